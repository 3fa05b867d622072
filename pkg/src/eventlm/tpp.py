"""Event-sequence domain model, Hawkes simulation and closed-form likelihoods."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestError, NotTimeOrdered, UnstableSpec


@dataclass(frozen=True)
class Event:
    time: float
    type_index: int
    type_label: str = ""
    description: str | None = None

    def __post_init__(self):
        if not math.isfinite(self.time) or self.time < 0:
            raise ValueError(f"event time must be finite and >= 0, got {self.time}")
        if not self.type_label:
            object.__setattr__(self, "type_label", str(self.type_index))


@dataclass(frozen=True)
class EventSequence:
    """Time-ordered events observed on ``[0, t_end]``.

    ``spec`` optionally carries the generating process of synthetic data so the
    analytic likelihood can be recomputed downstream.
    """

    events: tuple[Event, ...]
    t_end: float
    info: str = ""
    seq_id: str = ""
    spec: "HawkesSpec | None" = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not math.isfinite(self.t_end) or self.t_end < 0:
            raise ValueError(f"t_end must be finite and >= 0, got {self.t_end}")
        prev = -math.inf
        for i, ev in enumerate(self.events):
            if ev.time <= prev:
                raise NotTimeOrdered(f"event {i} at t={ev.time} does not follow t={prev}")
            prev = ev.time
        if self.events and self.events[-1].time > self.t_end:
            raise ValueError(f"last event at {self.events[-1].time} is after t_end={self.t_end}")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([ev.time for ev in self.events], dtype=np.float64)

    @property
    def types(self) -> np.ndarray:
        return np.array([ev.type_index for ev in self.events], dtype=np.int64)

    @property
    def intervals(self) -> np.ndarray:
        """tau_1 = 0, tau_i = t_i - t_{i-1}."""
        t = self.times
        if t.size == 0:
            return t
        return np.concatenate([[0.0], np.diff(t)])

    @property
    def has_descriptions(self) -> bool:
        return any(ev.description is not None for ev in self.events)

    def prefix(self, n: int) -> "EventSequence":
        """First ``n`` events; the horizon is cut at the last kept event."""
        events = self.events[:n]
        t_end = events[-1].time if events else 0.0
        return EventSequence(events, t_end, self.info, self.seq_id, self.spec)

    def to_dict(self) -> dict:
        out = {"id": self.seq_id, "info": self.info, "t_end": self.t_end, "events": []}
        for ev in self.events:
            rec = {"time": ev.time, "type_index": ev.type_index, "type_label": ev.type_label}
            if ev.description is not None:
                rec["description"] = ev.description
            out["events"].append(rec)
        if self.spec is not None:
            out["spec"] = self.spec.to_dict()
        return out

    @classmethod
    def from_dict(cls, rec: dict, seq_id: str = "") -> "EventSequence":
        events = [
            Event(
                float(e["time"]),
                int(e["type_index"]),
                str(e.get("type_label") or e["type_index"]),
                e.get("description"),
            )
            for e in rec["events"]
        ]
        spec = HawkesSpec.from_dict(rec["spec"]) if rec.get("spec") else None
        return cls(events, float(rec["t_end"]), str(rec.get("info", "")), str(rec.get("id") or seq_id), spec)


def read_jsonl(path: str | Path) -> list[EventSequence]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(EventSequence.from_dict(rec, seq_id=f"{path.stem}:{lineno}"))
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"malformed record ({exc.__class__.__name__}: {exc})", path, lineno) from None
    return out


def write_jsonl(path: str | Path, seqs: Iterable[EventSequence]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for seq in seqs:
            fh.write(json.dumps(seq.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class HawkesSpec:
    """Multivariate Hawkes process with exponential kernel.

    intensity(t, e) = mu[e] + sum_{t_j < t} alpha[e][e_j] * exp(-beta * (t - t_j))

    With ``marks="cyclic"`` the ground process (the intensity summed over types)
    is kept but the type of the n-th event is forced to ``n mod num_types``, so
    the next type is a deterministic function of the history's parity.
    """

    mu: tuple[float, ...]
    alpha: tuple[tuple[float, ...], ...]
    beta: float
    marks: str = "free"

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        object.__setattr__(self, "alpha", tuple(tuple(float(a) for a in row) for row in self.alpha))
        E = len(self.mu)
        if E == 0:
            raise UnstableSpec("need at least one event type")
        if len(self.alpha) != E or any(len(row) != E for row in self.alpha):
            raise UnstableSpec(f"alpha must be {E}x{E}")
        if min(self.mu) < 0 or min(min(r) for r in self.alpha) < 0:
            raise UnstableSpec("mu and alpha must be non-negative")
        if not self.beta > 0:
            raise UnstableSpec("beta must be positive")
        if self.marks not in ("free", "cyclic"):
            raise UnstableSpec(f"unknown mark rule {self.marks!r}")
        if self.spectral_radius >= 1:
            raise UnstableSpec(f"spectral radius of alpha/beta is {self.spectral_radius:.3f} >= 1")

    @property
    def num_types(self) -> int:
        return len(self.mu)

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(np.asarray(self.alpha) / self.beta))))

    def to_dict(self) -> dict:
        return {"mu": list(self.mu), "alpha": [list(r) for r in self.alpha], "beta": self.beta, "marks": self.marks}

    @classmethod
    def from_dict(cls, d: dict) -> "HawkesSpec":
        return cls(tuple(d["mu"]), tuple(tuple(r) for r in d["alpha"]), float(d["beta"]), d.get("marks", "free"))


INTERVAL_BUCKETS = ((0.5, "instantly"), (1.5, "soon"), (4.0, "later"))
TYPE_PHRASES = ("steady signal", "sharp spike", "slow drift", "quiet pulse", "loud burst", "faint echo")


def describe_event(type_index: int, interval: float) -> str:
    """Deterministic synthetic description: a per-type phrase plus an interval bucket word."""
    bucket = "much later"
    for limit, word in INTERVAL_BUCKETS:
        if interval < limit:
            bucket = word
            break
    phrase = TYPE_PHRASES[type_index % len(TYPE_PHRASES)]
    return f"{phrase} arriving {bucket}"


def simulate_hawkes(
    spec: HawkesSpec,
    t_end: float,
    rng: np.random.Generator | int,
    *,
    labels: Sequence[str] | None = None,
    descriptions: bool = False,
    info: str = "",
    seq_id: str = "",
) -> EventSequence:
    """Ogata thinning on [0, t_end]."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    mu = np.asarray(spec.mu)
    alpha = np.asarray(spec.alpha)
    beta = spec.beta
    E = spec.num_types
    excite = np.zeros(E)  # excitation per target type, valid at time `t`
    t = 0.0
    events: list[Event] = []
    last = 0.0
    while True:
        # intensity only decays until the next accepted event, so the current value bounds it
        bound = mu.sum() + excite.sum()
        if bound <= 0:
            break
        dt = rng.exponential(1.0 / bound)
        t += dt
        if t > t_end:
            break
        excite *= math.exp(-beta * dt)
        lam = mu + excite
        total = lam.sum()
        if rng.uniform() * bound > total:
            continue
        if spec.marks == "cyclic":
            e = len(events) % E
        else:
            e = int(rng.choice(E, p=lam / total))
        label = labels[e] if labels is not None else str(e)
        desc = describe_event(e, t - last if events else 0.0) if descriptions else None
        events.append(Event(t, e, label, desc))
        last = t
        excite += alpha[:, e]
    return EventSequence(events, float(t_end), info, seq_id, spec)


def _validate_type(spec: HawkesSpec, e: int) -> None:
    if not 0 <= e < spec.num_types:
        raise ValueError(f"type {e} outside [0, {spec.num_types})")


def analytic_intensity(spec: HawkesSpec, seq: EventSequence, t: float, e: int, right_limit: bool = False) -> float:
    """Conditional intensity of the generating process by direct summation.

    Events at exactly ``t`` belong to the history only when ``right_limit`` is set.
    """
    _validate_type(spec, e)
    n_before = sum(1 for ev in seq.events if ev.time < t or (right_limit and ev.time == t))
    history = seq.events[:n_before]
    cyclic = spec.marks == "cyclic"
    ground = 0.0
    for target in range(spec.num_types) if cyclic else [e]:
        ground += spec.mu[target] + sum(
            spec.alpha[target][ev.type_index] * math.exp(-spec.beta * (t - ev.time)) for ev in history
        )
    if cyclic and e != n_before % spec.num_types:
        return 0.0
    return ground


def analytic_loglik(spec: HawkesSpec, seq: EventSequence) -> float:
    """Sum of log-intensities at the events minus the closed-form compensator on [0, T]."""
    mu = np.asarray(spec.mu)
    alpha = np.asarray(spec.alpha)
    beta = spec.beta
    E = spec.num_types
    excite = np.zeros(E)
    last = 0.0
    ll = 0.0
    for i, ev in enumerate(seq.events):
        excite = excite * math.exp(-beta * (ev.time - last))
        if spec.marks == "cyclic":
            if ev.type_index != i % E:
                return -math.inf
            lam = float(mu.sum() + excite.sum())
        else:
            lam = float(mu[ev.type_index] + excite[ev.type_index])
        ll += math.log(lam) if lam > 0 else -math.inf
        excite = excite + alpha[:, ev.type_index]
        last = ev.time
    compensator = mu.sum() * seq.t_end
    col = alpha.sum(axis=0)  # total excitation mass (times beta) injected by each source type
    for ev in seq.events:
        compensator += col[ev.type_index] / beta * (1.0 - math.exp(-beta * (seq.t_end - ev.time)))
    return ll - float(compensator)


def homogeneous_poisson_loglik(seqs: Sequence[EventSequence], num_types: int) -> tuple[float, np.ndarray]:
    """Best per-type constant-rate log-likelihood on ``seqs`` (rates fit by MLE on the same data)."""
    counts = np.zeros(num_types)
    horizon = 0.0
    for seq in seqs:
        horizon += seq.t_end
        for ev in seq.events:
            counts[ev.type_index] += 1
    if horizon <= 0:
        raise ValueError("total observation time is zero")
    rates = counts / horizon
    nz = counts > 0
    ll = float(np.sum(counts[nz] * np.log(rates[nz])) - counts.sum())
    return ll, rates
