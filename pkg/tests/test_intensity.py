import math

import numpy as np
import pytest
import torch
from scipy import integrate

from eventlm.errors import InvalidParameter, OutOfInterval, ShapeMismatch
from eventlm.intensity import (
    IntensityHead,
    head_gradients,
    intensity_at,
    max_elapsed_ratio,
    mc_uniforms,
    param_groups,
    sequence_loglik,
    softplus,
    softplus_inverse,
)
from eventlm.tpp import Event, EventSequence, HawkesSpec, simulate_hawkes

D = 6


def varying_head(seed=0, num_types=2):
    torch.manual_seed(seed)
    head = IntensityHead(num_types, D, 0.7).double()
    with torch.no_grad():
        # alpha's input reaches t / 1e-6 before the first event, so keep it at that scale
        head.alpha.copy_(torch.tensor([0.8e-6, -0.5e-6][:num_types], dtype=torch.float64))
        head.weight.normal_(0, 0.3)
        head.log_beta.copy_(torch.tensor([0.3, -0.2][:num_types], dtype=torch.float64))
        head.initial_hidden.normal_(0, 0.5)
    return head


def sample_sequence():
    return EventSequence(
        [Event(0.4, 0), Event(1.1, 1), Event(1.5, 0), Event(3.2, 1)], 4.0, seq_id="probe"
    )


def scalar_softplus(x, beta):
    return beta * math.log1p(math.exp(x / beta))


class TestSoftplus:
    def test_examples(self):
        assert softplus(0.0, 1.0) == pytest.approx(math.log(2), abs=1e-12)
        assert softplus(0.0, 2.0) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert softplus(100.0, 1.0) == pytest.approx(100.0, abs=1e-6)
        assert math.isfinite(softplus(1e6, 0.5))

    def test_bad_beta(self):
        with pytest.raises(InvalidParameter):
            softplus(1.0, 0.0)
        with pytest.raises(InvalidParameter):
            softplus(torch.zeros(2), torch.tensor([1.0, -1.0]))

    def test_inverse(self):
        for y in (1e-4, 0.3, 2.0, 50.0):
            assert softplus(softplus_inverse(y), 1.0) == pytest.approx(y, rel=1e-9)


class TestIntensityAt:
    def test_reduces_to_softplus_zero(self):
        head = IntensityHead(1, D, base_rate=math.log(2)).double()
        with torch.no_grad():
            head.bias.zero_()
        for t in (0.5, 2.0, 9.0):
            assert intensity_at(head, torch.randn(D), 0.1, t, 0) == pytest.approx(math.log(2))

    def test_hidden_projection(self):
        head = IntensityHead(1, D).double()
        with torch.no_grad():
            head.bias.zero_()
            head.weight.zero_()
            head.weight[0, 0] = 1.5
        h = torch.zeros(D, dtype=torch.float64)
        h[0] = 2.0
        assert intensity_at(head, h, 1.0, 1.5, 0) == pytest.approx(scalar_softplus(3.0, 1.0), abs=1e-12)

    def test_zero_conditioning_time_is_finite(self):
        head = varying_head()
        assert math.isfinite(intensity_at(head, torch.zeros(D), 0.0, 1e-3, 1))

    def test_out_of_interval(self):
        head = varying_head()
        with pytest.raises(OutOfInterval):
            intensity_at(head, torch.zeros(D), 2.0, 2.0, 0)
        with pytest.raises(OutOfInterval):
            intensity_at(head, torch.zeros(D), 2.0, 3.5, 0, t_next=3.0)

    def test_always_positive(self):
        head = varying_head()
        with torch.no_grad():
            head.bias.fill_(-60.0)
        assert intensity_at(head, torch.zeros(D), 1.0, 5.0, 0) > 0


class TestLoglik:
    def test_unit_rate(self):
        head = IntensityHead(1, D, base_rate=1.0).double()
        seq = EventSequence([Event(1.0, 0), Event(2.0, 0), Event(3.0, 0)], 3.0)
        for samples in (1, 3, 10):
            ll = sequence_loglik(head, torch.zeros(3, D), seq, samples)
            assert ll.item() == pytest.approx(-3.0, abs=1e-9)

    def test_rate_two(self):
        head = IntensityHead(1, D, base_rate=2.0, dtype=torch.float64)
        seq = EventSequence([Event(0.5, 0), Event(1.5, 0)], 2.0)
        assert sequence_loglik(head, torch.zeros(2, D), seq).item() == pytest.approx(2 * math.log(2) - 4, abs=1e-9)

    def test_shape_mismatch(self):
        head = varying_head()
        with pytest.raises(ShapeMismatch):
            sequence_loglik(head, torch.zeros(3, D), sample_sequence())
        with pytest.raises(ShapeMismatch):
            sequence_loglik(IntensityHead(1, D), torch.zeros(4, D), sample_sequence())

    def test_deterministic_given_seed(self):
        head, seq, h = varying_head(), sample_sequence(), torch.randn(4, D, dtype=torch.float64)
        a = sequence_loglik(head, h, seq, 10, seed=3)
        assert a.item() == sequence_loglik(head, h, seq, 10, seed=3).item()
        assert a.item() != sequence_loglik(head, h, seq, 10, seed=4).item()

    def test_mc_against_references(self):
        """10-point stratified estimate vs a 10^6-point MC reference and quadrature."""
        head = varying_head()
        seq = sample_sequence()
        h = torch.randn(4, D, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        bank = torch.cat([head.initial_hidden[None], h]).detach()
        starts = np.concatenate([[0.0], seq.times])
        ends = np.concatenate([seq.times, [seq.t_end]])

        def ground(t, j):
            with torch.no_grad():
                lam = head(bank[j], torch.tensor(starts[j]), torch.as_tensor(t))
            return lam.sum(-1).numpy()

        rng = np.random.default_rng(0)
        ref_mc = sum((b - a) * ground(rng.uniform(a, b, 10**6), j).mean() for j, (a, b) in enumerate(zip(starts, ends)))
        ref_quad = sum(integrate.quad(lambda t: float(ground(np.array(t), j)), a, b)[0] for j, (a, b) in enumerate(zip(starts, ends)))
        assert ref_mc == pytest.approx(ref_quad, rel=1e-3)

        with torch.no_grad():
            logs = sum(
                math.log(float(head(bank[j], torch.tensor(starts[j]), torch.tensor(seq.times[j]))[e]))
                for j, e in enumerate(seq.types)
            )

        def compensator(seed):
            return logs - sequence_loglik(head, h, seq, 10, seed).item()

        estimates = np.array([compensator(s) for s in range(1000)])
        se = estimates.std(ddof=1)
        assert abs(compensator(0) - ref_mc) <= 3 * se
        assert abs(estimates.mean() - ref_mc) <= 3 * se / math.sqrt(len(estimates))

    def test_matches_truth_on_stratification(self):
        u = mc_uniforms("x", 3, 10, 0)
        assert u.shape == (3, 10)
        k = np.floor(u * 10)
        assert (k == np.arange(10)).all()


class TestHeadGradients:
    def test_finite_differences(self):
        head, seq = varying_head(), sample_sequence()
        h = torch.randn(4, D, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        grads = head_gradients(head, h, seq, 10, seed=5)
        worst = 0.0
        for name, p in head.named_parameters():
            step = 1e-6 / max_elapsed_ratio([seq]) if name == "alpha" else 1e-6
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = -sequence_loglik(head, h, seq, 10, 5).item()
                flat[i] = orig - step
                down = -sequence_loglik(head, h, seq, 10, 5).item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                an = grads[name].view(-1)[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        assert worst <= 1e-5

    def test_beta_gradient_finite_at_zero_argument(self):
        head = IntensityHead(1, D, base_rate=math.log(2)).double()
        with torch.no_grad():
            head.bias.zero_()
        seq = EventSequence([Event(1.0, 0)], 2.0)
        g = head_gradients(head, torch.zeros(1, D, dtype=torch.float64), seq)
        assert torch.isfinite(g["log_beta"]).all()


class TestFitting:
    def test_recovers_poisson_rate(self):
        spec = HawkesSpec((1.7,), ((0.0,),), 1.0)
        rng = np.random.default_rng(0)
        seqs = [simulate_hawkes(spec, 20.0, rng, seq_id=f"s{i}") for i in range(30)]
        head = IntensityHead(1, D, base_rate=0.3).double()
        opt = torch.optim.Adam(param_groups(head, 0.05, seqs))
        for step in range(300):
            loss = -sum(sequence_loglik(head, torch.zeros(len(s), D, dtype=torch.float64), s, 10, step) for s in seqs)
            opt.zero_grad()
            loss.backward()
            opt.step()
        n = sum(len(s) for s in seqs)
        rate = intensity_at(head, torch.zeros(D), 1.0, 1.5, 0)
        assert rate == pytest.approx(n / (20.0 * 30), rel=0.05)

    def test_monotone_objective(self):
        head, seq = varying_head(), sample_sequence()
        h = torch.randn(4, D, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        groups = param_groups(head, 1e-3, [seq])
        groups[0]["lr"] = 1e-3 / max_elapsed_ratio([seq]) ** 2  # plain gradient steps scale with the square
        opt = torch.optim.SGD(groups)
        values = []
        for _ in range(50):
            loss = -sequence_loglik(head, h, seq, 10, seed=0)
            values.append(loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))

    def test_alpha_step_is_scaled(self):
        seqs = [sample_sequence()]
        assert max_elapsed_ratio(seqs) == pytest.approx(0.4 / 1e-6)
        groups = param_groups(IntensityHead(2, D), 0.1, seqs, weight_decay=0.5)
        assert groups[0]["lr"] == pytest.approx(0.1 * 1e-6 / 0.4)
        assert [g["weight_decay"] for g in groups] == [0.0, 0.5, 0.0]

    def test_init_from_data(self):
        seqs = [EventSequence([Event(1.0, 0), Event(2.0, 1)], 10.0), EventSequence([Event(3.0, 0)], 10.0)]
        head = IntensityHead.for_data(seqs, 2, D)
        rate = softplus(head.bias, head.beta)
        assert torch.allclose(rate, torch.tensor([3 / 40, 3 / 40]))
        assert torch.count_nonzero(head.alpha) == 0 and torch.count_nonzero(head.weight) == 0
