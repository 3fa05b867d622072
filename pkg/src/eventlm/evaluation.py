"""Per-dataset evaluation of next-event prediction and log-likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import metrics
from .inference import Decoding, Policy, Tally, decode_task
from .intensity import pack, packed_loglik
from .metrics import MetricReport
from .pipeline import Dataset, EventLM, event_hiddens, fit_to_context
from .seeding import derived_seed, torch_generator
from .template import TaskKind
from .tpp import analytic_loglik, homogeneous_poisson_loglik

TASKS = ("time", "type", "description", "tll")


@dataclass
class EvalResult:
    reports: list[MetricReport]
    notices: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def value(self, dataset: str, task: str, metric: str) -> float:
        for r in self.reports:
            if (r.dataset, r.task, r.metric) == (dataset, task, metric):
                return r.value
        raise KeyError((dataset, task, metric))


def _tally_counts(t: Tally) -> dict:
    return t.to_dict()


@torch.no_grad()
def evaluate(
    bundle: EventLM,
    datasets: Sequence[Dataset],
    tasks: Sequence[str] = TASKS,
    split: str = "test",
    decoding: Decoding = Decoding(),
    policy: Policy = Policy(),
    seed: int = 0,
    mc_samples: int = 10,
    max_sequences: int | None = None,
) -> EvalResult:
    """Score every prefix of every sequence in ``split`` of each dataset.

    Time, type and description predictions condition on each proper prefix;
    the log-likelihood uses the dataset's intensity head when one was fitted.
    """
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise ValueError(f"unknown tasks {sorted(unknown)}")
    reports, notices, details = [], [], {}
    model = bundle.model
    model.eval()
    for ds_index, ds in enumerate(datasets):
        info = bundle.info(ds.name)
        seqs = ds.split(split)[:max_sequences] if max_sequences else ds.split(split)
        seqs = [fit_to_context(s, bundle.rendering, model.cfg.max_context_len) for s in seqs]
        if not seqs:
            notices.append(f"{ds.name}: no {split} sequences, skipped")
            continue
        want = [t for t in tasks if t != "tll"]
        if "description" in want and not ds.has_descriptions:
            want.remove("description")
            notices.append(f"{ds.name}: no descriptions, description task skipped")
        head = bundle.head(ds.name) if "tll" in tasks else None
        if "tll" in tasks and head is None:
            notices.append(f"{ds.name}: no fitted intensity head, log-likelihood skipped")
        gen = torch_generator(seed, "decode", ds_index)
        true_tau, pred_tau, true_type, pred_type, refs, cands = [], [], [], [], [], []
        tallies = {t: Tally() for t in want}
        hiddens = []
        for seq in seqs:
            doc = bundle.rendering.render(seq)
            if len(seq) < 2 and head is None:
                continue
            cache = model.prefill(list(doc.tokens))
            if head is not None:
                hiddens.append(event_hiddens(model, doc, cache))
            if len(seq) < 2:
                continue
            ks = range(1, len(seq))
            lens = [doc.prefix_end(k) for k in ks]
            if "time" in want:
                outs = decode_task(bundle, cache, lens, TaskKind.TIME, info, decoding, policy, gen)
                for k, o in zip(ks, outs):
                    tallies["time"].add(o)
                    true_tau.append(float(seq.events[k].time - seq.events[k - 1].time))
                    pred_tau.append(float(o.value))
            if "type" in want:
                outs = decode_task(bundle, cache, lens, TaskKind.TYPE, info, decoding, policy, gen)
                for k, o in zip(ks, outs):
                    tallies["type"].add(o)
                    true_type.append(seq.events[k].type_label)
                    pred_type.append(str(o.value))
            if "description" in want:
                keep = [(k, n) for k, n in zip(ks, lens) if seq.events[k].description is not None]
                if keep:
                    outs = decode_task(
                        bundle, cache, [n for _, n in keep], TaskKind.DESCRIPTION, info, decoding, policy, gen
                    )
                    for (k, _), o in zip(keep, outs):
                        tallies["description"].add(o)
                        refs.append(seq.events[k].description)
                        cands.append(str(o.value))
        name = ds.name
        if true_tau:
            t = tallies["time"]
            baseline = metrics.rmse(true_tau, [info.mean_interval] * len(true_tau))
            value = metrics.rmse(true_tau, pred_tau)
            counts = _tally_counts(t)
            reports += [
                MetricReport(name, "time", "rmse", value, len(true_tau), counts),
                MetricReport(name, "time", "rmse_baseline_mean", baseline, len(true_tau)),
                MetricReport(name, "time", "rmse_ratio", value / baseline if baseline > 0 else 0.0, len(true_tau)),
                MetricReport(name, "time", "format_adherence", t.well_formed / max(t.samples, 1), max(t.samples, 1), counts),
            ]
            details.setdefault(name, {})["time"] = {"true": true_tau, "pred": pred_tau}
        if true_type:
            reports.append(
                MetricReport(name, "type", "accuracy", metrics.accuracy(true_type, pred_type), len(true_type), _tally_counts(tallies["type"]))
            )
        if refs:
            reports.append(
                MetricReport(name, "description", "rouge_l_f1", metrics.rouge_l_macro(refs, cands), len(refs), _tally_counts(tallies["description"]))
            )
        if head is not None:
            n_events = sum(len(s) for s in seqs)
            if n_events == 0:
                notices.append(f"{name}: no events, log-likelihood skipped")
                continue
            mc_seed = derived_seed(seed, "mc", ds_index)
            ll = packed_loglik(head, torch.cat(hiddens), pack(seqs, mc_samples, mc_seed))
            per_seq = [float(x) for x in ll]
            counts = [len(s) for s in seqs]
            reports.append(MetricReport(name, "tll", "tll_per_event", metrics.tll(per_seq, counts), len(seqs)))
            poisson, _ = homogeneous_poisson_loglik(seqs, info.num_types)
            reports.append(MetricReport(name, "tll", "tll_poisson_per_event", poisson / n_events, len(seqs)))
            if all(s.spec is not None for s in seqs):
                analytic = [analytic_loglik(s.spec, s) for s in seqs]
                if all(math.isfinite(a) for a in analytic):
                    reports.append(
                        MetricReport(name, "tll", "tll_analytic_per_event", metrics.tll(analytic, counts), len(seqs))
                    )
            details.setdefault(name, {})["intensity"] = intensity_curve(bundle, ds_index, head, seqs[0])
    return EvalResult(reports, notices, details)


@torch.no_grad()
def intensity_curve(bundle: EventLM, ds_index: int, head, seq, points: int = 400) -> dict:
    """Fitted ground intensity (summed over types) on a grid, plus the generating one if known."""
    from .tpp import analytic_intensity

    doc = bundle.rendering.render(seq)
    hidden = event_hiddens(bundle.model, doc) if len(seq) else torch.zeros(0, head.d_model)
    times = seq.times
    grid = np.linspace(0.0, seq.t_end, points)[1:]
    idx = np.searchsorted(times, grid, side="left")  # events strictly before each grid point
    bank = torch.cat([head.initial_hidden[None], hidden.to(head.initial_hidden.dtype)])
    prev = np.where(idx > 0, times[np.maximum(idx - 1, 0)], 0.0) if len(times) else np.zeros_like(grid)
    lam = head(bank[torch.as_tensor(idx)], torch.as_tensor(prev, dtype=bank.dtype), torch.as_tensor(grid, dtype=bank.dtype))
    out = {"t": grid.tolist(), "model": lam.sum(-1).tolist(), "events": times.tolist()}
    if seq.spec is not None:
        E = seq.spec.num_types
        out["true"] = [sum(analytic_intensity(seq.spec, seq, float(t), e) for e in range(E)) for t in grid]
    return out
