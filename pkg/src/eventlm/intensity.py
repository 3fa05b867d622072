"""Softplus intensity head on top of sequence-model hidden states.

For the interval after event i (time t_i, hidden state h_i)::

    lambda(t, e) = softplus_{beta_e}(alpha_e * (t - t_i) / max(t_i, eps) + w_e . h_i + b_e)

The interval before the first event is conditioned on a learned initial
hidden vector with t_i = 0.  The compensator is estimated by stratified Monte
Carlo with a fixed number of points per interval.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidParameter, OutOfInterval, ShapeMismatch
from .tpp import EventSequence

EPS_TIME = 1e-6


def softplus(x, beta=1.0):
    """beta * log(1 + exp(x / beta)), overflow-safe; accepts floats or tensors."""
    as_float = not torch.is_tensor(x) and not torch.is_tensor(beta)
    beta_t = torch.as_tensor(beta, dtype=torch.float64 if as_float else None)
    if bool((beta_t <= 0).any()):
        raise InvalidParameter(f"softplus sharpness must be positive, got {beta}")
    x_t = torch.as_tensor(x, dtype=beta_t.dtype if as_float else None)
    out = beta_t * torch.logaddexp(torch.zeros_like(x_t / beta_t), x_t / beta_t)
    return float(out) if as_float else out


def log_softplus(x: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """log(softplus(x, beta)) without underflow for very negative x."""
    z = x / beta
    small = z < -30.0  # log1p(exp(z)) == exp(z) to double precision there
    sp = torch.logaddexp(torch.zeros_like(z), torch.where(small, torch.zeros_like(z), z))
    return torch.log(beta) + torch.where(small, z, torch.log(sp))


def softplus_inverse(y: float) -> float:
    """Inverse of softplus with beta = 1."""
    if y <= 0:
        raise InvalidParameter(f"softplus only reaches positive values, got {y}")
    return y + math.log(-math.expm1(-y))


class IntensityHead(nn.Module):
    def __init__(self, num_types: int, d_model: int, base_rate: float = 1.0, dtype=torch.float32):
        super().__init__()
        self.num_types = num_types
        self.d_model = d_model
        self.alpha = nn.Parameter(torch.zeros(num_types, dtype=dtype))
        self.weight = nn.Parameter(torch.zeros(num_types, d_model, dtype=dtype))
        self.bias = nn.Parameter(torch.full((num_types,), softplus_inverse(base_rate), dtype=dtype))
        self.log_beta = nn.Parameter(torch.zeros(num_types, dtype=dtype))
        self.initial_hidden = nn.Parameter(torch.zeros(d_model, dtype=dtype))

    @property
    def beta(self) -> torch.Tensor:
        return self.log_beta.exp()

    @classmethod
    def for_data(cls, seqs: Sequence[EventSequence], num_types: int, d_model: int, dtype=torch.float32) -> "IntensityHead":
        """Start from the best homogeneous rate N / (T * E) of the training data."""
        n = sum(len(s) for s in seqs)
        horizon = sum(s.t_end for s in seqs)
        rate = n / (horizon * num_types) if n and horizon > 0 else 1.0
        return cls(num_types, d_model, rate, dtype)

    def preactivation(self, hidden, t_prev, t):
        elapsed = (t - t_prev) / t_prev.clamp(min=EPS_TIME)
        return elapsed[..., None] * self.alpha + hidden @ self.weight.T + self.bias

    def forward(self, hidden: torch.Tensor, t_prev: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Intensities [..., E] for hidden [..., d] and times [...]."""
        return softplus(self.preactivation(hidden, t_prev, t), self.beta)

    def log_intensity(self, hidden, t_prev, t) -> torch.Tensor:
        return log_softplus(self.preactivation(hidden, t_prev, t), self.beta)


def intensity_at(head: IntensityHead, hidden, t_i: float, t: float, e: int, t_next: float | None = None) -> float:
    """Intensity of type ``e`` at ``t`` inside the interval (t_i, t_next]."""
    if not t > t_i:
        raise OutOfInterval(f"t={t} is not after the conditioning event at t_i={t_i}")
    if t_next is not None and t > t_next:
        raise OutOfInterval(f"t={t} is past the next event at {t_next}")
    if not 0 <= e < head.num_types:
        raise ValueError(f"type {e} outside [0, {head.num_types})")
    dtype = head.alpha.dtype
    h = torch.as_tensor(hidden, dtype=dtype)
    with torch.no_grad():
        lam = head(h, torch.tensor(float(t_i), dtype=dtype), torch.tensor(float(t), dtype=dtype))
    return float(lam[e])


def max_elapsed_ratio(seqs: Sequence[EventSequence]) -> float:
    """Largest (t - t_i) / max(t_i, eps) over all intervals, i.e. the scale of alpha's input."""
    worst = 1.0
    for seq in seqs:
        starts = np.concatenate([[0.0], seq.times])
        ends = np.concatenate([seq.times, [seq.t_end]])
        ratio = (ends - starts) / np.maximum(starts, EPS_TIME)
        worst = max(worst, float(ratio.max()))
    return worst


def param_groups(head: IntensityHead, lr: float, seqs: Sequence[EventSequence], weight_decay: float = 0.0) -> list:
    """Optimizer groups with alpha's step scaled down by the size of its input.

    The relative-elapsed feature reaches t_1 / eps in the interval before the
    first event, so an unscaled step on alpha moves the intensity there by
    orders of magnitude.  Weight decay applies to the hidden projection only.
    """
    return [
        {"params": [head.alpha], "lr": lr / max_elapsed_ratio(seqs), "weight_decay": 0.0},
        {"params": [head.weight], "lr": lr, "weight_decay": weight_decay},
        {"params": [head.bias, head.log_beta, head.initial_hidden], "lr": lr, "weight_decay": 0.0},
    ]


def mc_uniforms(seq_id: str, n_intervals: int, samples: int, seed: int) -> np.ndarray:
    """Stratification offsets in [0, 1) for each interval, keyed by sequence id and seed."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(seq_id.encode("utf-8"))])
    u = np.random.default_rng(ss).random((n_intervals, samples))
    return (np.arange(samples) + u) / samples


@dataclass
class Packed:
    """Flattened events and MC points of several sequences sharing one hidden bank.

    Bank row 0 is the learned initial hidden; row ``1 + offset_s + k`` is the
    hidden state after event k of sequence s.
    """

    n_seqs: int
    event_seq: torch.Tensor
    event_cond: torch.Tensor
    event_prev: torch.Tensor
    event_time: torch.Tensor
    event_type: torch.Tensor
    point_seq: torch.Tensor
    point_cond: torch.Tensor
    point_prev: torch.Tensor
    point_time: torch.Tensor
    point_weight: torch.Tensor  # interval length / samples
    event_counts: torch.Tensor


def pack(
    seqs: Sequence[EventSequence],
    mc_samples: int = 10,
    seed: int = 0,
    dtype=torch.float32,
) -> Packed:
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    ev = {k: [] for k in ("seq", "cond", "prev", "time", "type")}
    pt = {k: [] for k in ("seq", "cond", "prev", "time", "weight")}
    offset = 0
    for s, seq in enumerate(seqs):
        times = seq.times
        n = len(times)
        cond = np.concatenate([[0], 1 + offset + np.arange(n)])  # one per interval
        starts = np.concatenate([[0.0], times])
        ends = np.concatenate([times, [seq.t_end]])
        ev["seq"].append(np.full(n, s))
        ev["cond"].append(cond[:n])
        ev["prev"].append(starts[:n])
        ev["time"].append(times)
        ev["type"].append(seq.types)
        u = mc_uniforms(seq.seq_id, n + 1, mc_samples, seed)
        lengths = ends - starts
        pt["seq"].append(np.full((n + 1) * mc_samples, s))
        pt["cond"].append(np.repeat(cond, mc_samples))
        pt["prev"].append(np.repeat(starts, mc_samples))
        pt["time"].append((starts[:, None] + lengths[:, None] * u).ravel())
        pt["weight"].append(np.repeat(lengths / mc_samples, mc_samples))
        offset += n

    def cat(parts, kind):
        arr = np.concatenate(parts) if parts else np.zeros(0)
        return torch.as_tensor(arr, dtype=torch.long if kind == "long" else dtype)

    return Packed(
        len(seqs),
        cat(ev["seq"], "long"),
        cat(ev["cond"], "long"),
        cat(ev["prev"], "f"),
        cat(ev["time"], "f"),
        cat(ev["type"], "long"),
        cat(pt["seq"], "long"),
        cat(pt["cond"], "long"),
        cat(pt["prev"], "f"),
        cat(pt["time"], "f"),
        cat(pt["weight"], "f"),
        torch.as_tensor([len(s) for s in seqs], dtype=torch.long),
    )


def packed_loglik(head: IntensityHead, hiddens: torch.Tensor, packed: Packed) -> torch.Tensor:
    """Per-sequence log-likelihoods [S]; ``hiddens`` stacks every event's state in pack order."""
    if hiddens.shape[0] != int(packed.event_counts.sum()):
        raise ShapeMismatch(f"{hiddens.shape[0]} hidden states for {int(packed.event_counts.sum())} events")
    if hiddens.shape[-1] != head.d_model:
        raise ShapeMismatch(f"hidden width {hiddens.shape[-1]} does not match the head ({head.d_model})")
    bank = torch.cat([head.initial_hidden[None].to(hiddens.dtype), hiddens], dim=0)
    out = torch.zeros(packed.n_seqs, dtype=bank.dtype)
    if packed.event_time.numel():
        log_lam = head.log_intensity(bank[packed.event_cond], packed.event_prev, packed.event_time)
        logs = log_lam.gather(-1, packed.event_type[:, None])[:, 0]
        out = out.index_add(0, packed.event_seq, logs)
    if packed.point_time.numel():
        lam = head(bank[packed.point_cond], packed.point_prev, packed.point_time).sum(-1)
        out = out.index_add(0, packed.point_seq, -lam * packed.point_weight)
    return out


def sequence_loglik(
    head: IntensityHead,
    hiddens,
    seq: EventSequence,
    mc_samples_per_interval: int = 10,
    seed: int = 0,
) -> torch.Tensor:
    """Event log-intensities minus the MC compensator over [0, T] (differentiable scalar)."""
    hiddens = torch.as_tensor(hiddens, dtype=head.alpha.dtype)
    if hiddens.dim() != 2 or hiddens.shape[0] != len(seq):
        raise ShapeMismatch(f"need one hidden state per event ({len(seq)}), got shape {tuple(hiddens.shape)}")
    if seq.events and max(seq.types) >= head.num_types:
        raise ShapeMismatch(f"event type {max(seq.types)} outside the head's {head.num_types} types")
    packed = pack([seq], mc_samples_per_interval, seed, dtype=head.alpha.dtype)
    return packed_loglik(head, hiddens, packed)[0]


def head_gradients(head: IntensityHead, hiddens, seq: EventSequence, mc_samples: int = 10, seed: int = 0) -> dict:
    """Gradients of the negative MC log-likelihood for every head parameter."""
    loss = -sequence_loglik(head, hiddens, seq, mc_samples, seed)
    names, params = zip(*head.named_parameters())
    grads = torch.autograd.grad(loss, params)
    return dict(zip(names, grads))
