"""Next-event prediction from task-token prompts."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import template
from .errors import (
    EmptyPrediction,
    InvalidPrefix,
    MalformedTimeTokens,
    OutOfDomainTime,
    PredictionFailed,
)
from .model import GREEDY, DecoderLM, DocCache, Sampling, decode_branches
from .pipeline import DatasetInfo, EventLM
from .seeding import torch_generator
from .template import TaskKind
from .tpp import EventSequence

MALFORMED = (MalformedTimeTokens, OutOfDomainTime, EmptyPrediction)


@dataclass(frozen=True)
class Policy:
    """Handling of malformed emissions: regenerate up to ``retries`` times, then fall back or fail."""

    retries: int = 3
    fallback: bool = True

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """``reject``, ``fallback``, ``retry-K`` or ``retry-K+fallback``."""
        if text == "reject":
            return cls(0, False)
        if text == "fallback":
            return cls(0, True)
        m = re.fullmatch(r"retry-(\d+)(\+fallback)?", text)
        if not m:
            raise ValueError(f"unknown policy {text!r}")
        return cls(int(m.group(1)), bool(m.group(2)))

    def __str__(self):
        if self.retries == 0:
            return "fallback" if self.fallback else "reject"
        return f"retry-{self.retries}" + ("+fallback" if self.fallback else "")


@dataclass(frozen=True)
class Decoding:
    """Decoding choices per task.

    ``time_mode="mean"`` averages ``time_samples`` sampled intervals after
    dropping the ``time_trim`` fraction at each end (one wrong exponent byte
    can decode to 1e30 and would otherwise swamp the average); ``"greedy"``
    takes the single most likely token at each step.
    """

    time_mode: str = "mean"
    time_samples: int = 32
    time_trim: float = 0.1
    temperature: float = 1.0
    description_top_p: float | None = None
    max_text_tokens: int = 64
    retry_temperature: float = 1.0

    def __post_init__(self):
        if self.time_mode not in ("mean", "greedy"):
            raise ValueError(f"unknown time decoding mode {self.time_mode!r}")
        if self.time_samples < 1:
            raise ValueError("time_samples must be >= 1")
        if not 0 <= self.time_trim < 0.5:
            raise ValueError("time_trim must be in [0, 0.5)")


@dataclass
class Outcome:
    value: float | str
    samples: int = 0
    malformed: int = 0
    well_formed: int = 0
    retries: int = 0
    fallback: bool = False


@dataclass
class Tally:
    samples: int = 0
    malformed: int = 0
    well_formed: int = 0
    retries: int = 0
    fallbacks: int = 0
    extra: dict = field(default_factory=dict)

    def add(self, o: Outcome) -> None:
        self.samples += o.samples
        self.malformed += o.malformed
        self.well_formed += o.well_formed
        self.retries += o.retries
        self.fallbacks += o.fallback

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "malformed": self.malformed,
            "well_formed": self.well_formed,
            "retries": self.retries,
            "fallbacks": self.fallbacks,
        }


def trimmed_mean(values: Sequence[float], trim: float) -> float:
    """Mean after removing floor(trim * n) values from each end."""
    vals = sorted(values)
    cut = int(trim * len(vals))
    kept = vals[cut : len(vals) - cut] or vals
    return math.fsum(kept) / len(kept)


def _max_new(task: TaskKind, bundle: EventLM, decoding: Decoding) -> int:
    if task is TaskKind.TIME:
        return 5 if bundle.rendering.use_byte_tokens else 16
    return decoding.max_text_tokens


def _strategy(task: TaskKind, decoding: Decoding, retry: bool):
    if retry:
        return Sampling(temperature=decoding.retry_temperature)
    if task is TaskKind.TIME and decoding.time_mode == "mean":
        return Sampling(temperature=decoding.temperature)
    if task is TaskKind.DESCRIPTION and decoding.description_top_p is not None:
        return Sampling(temperature=decoding.temperature, top_p=decoding.description_top_p)
    return GREEDY


def _parse(row, task, bundle):
    r = bundle.rendering
    return template.parse_generation(row, task, r.order, r.use_byte_tokens)


@torch.no_grad()
def decode_task(
    bundle: EventLM,
    cache: DocCache,
    prefix_lens: Sequence[int],
    task: TaskKind,
    info: DatasetInfo,
    decoding: Decoding = Decoding(),
    policy: Policy = Policy(),
    generator: torch.Generator | None = None,
    chunk: int = 512,
) -> list[Outcome]:
    """Predict ``task`` after each prefix length of one cached document."""
    model: DecoderLM = bundle.model
    n_draw = decoding.time_samples if task is TaskKind.TIME and decoding.time_mode == "mean" else 1
    max_new = _max_new(task, bundle, decoding)
    start = [template.T_SOE, task.token]

    def run(lens, retry):
        strategy = _strategy(task, decoding, retry)
        rows = []
        flat = [p for p in lens for _ in range(n_draw)]
        for i in range(0, len(flat), chunk):
            part = flat[i : i + chunk]
            rows += decode_branches(
                model, cache, part, torch.tensor([start] * len(part)), strategy, max_new, generator
            )
        return [rows[j * n_draw : (j + 1) * n_draw] for j in range(len(lens))]

    outcomes = [Outcome(float("nan")) for _ in prefix_lens]
    pending = list(range(len(prefix_lens)))
    values: dict[int, list] = {i: [] for i in pending}
    for attempt in range(policy.retries + 1):
        if not pending:
            break
        draws = run([prefix_lens[i] for i in pending], retry=attempt > 0)
        still = []
        for i, rows in zip(pending, draws):
            o = outcomes[i]
            o.retries = attempt
            for row in rows:
                o.samples += 1
                if task is TaskKind.TIME:
                    o.well_formed += template.is_well_formed_time(row, bundle.rendering.use_byte_tokens)
                try:
                    values[i].append(_parse(row, task, bundle))
                except MALFORMED:
                    o.malformed += 1
            if not values[i]:
                still.append(i)
        pending = still
    for i, o in enumerate(outcomes):
        vals = values[i]
        if vals:
            o.value = trimmed_mean(vals, decoding.time_trim) if task is TaskKind.TIME else vals[0]
        elif policy.fallback:
            o.fallback = True
            o.value = info.mean_interval if task is TaskKind.TIME else info.majority_label
        else:
            raise PredictionFailed(f"{task.value} prediction malformed after {policy.retries} retries")
    return outcomes


def predict_next(
    bundle: EventLM,
    prefix: EventSequence,
    task: TaskKind,
    policy: Policy = Policy(),
    dataset: str | None = None,
    decoding: Decoding = Decoding(),
    seed: int = 0,
) -> float | str:
    """Next event time (absolute), type label or description after ``prefix``."""
    if len(prefix) == 0:
        raise InvalidPrefix("prediction needs at least one observed event")
    info = bundle.info(dataset) if dataset else next(iter(bundle.datasets.values()))
    doc = bundle.rendering.render(prefix)
    tokens = list(doc.tokens)
    with torch.no_grad():
        cache = bundle.model.prefill(tokens)
    gen = torch_generator(seed, "decode", len(prefix))
    (out,) = decode_task(bundle, cache, [len(tokens)], task, info, decoding, policy, gen)
    if task is TaskKind.TIME:
        return prefix.events[-1].time + float(out.value)
    return out.value
