"""Corpus assembly, prompt-response sampling and the three training stages.

Stage 1 continues pre-training on whole rendered sequences, stage 2 fine-tunes
on next-event prompt/response pairs with the loss restricted to the response,
and stage 3 freezes the backbone and fits one intensity head per dataset.
"""

from __future__ import annotations

import copy
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import template
from .checkpoint import Checkpoint, state_hash
from .codec import VOCAB, ByteOrder
from .errors import IncompatibleCheckpoint, IngestError, InvalidParameter, NoData, TrainingDiverged
from .intensity import IntensityHead, pack, packed_loglik, param_groups
from .model import GREEDY, DecoderLM, ModelConfig, decode_branches
from .seeding import derived_seed, numpy_rng, torch_generator
from .template import TaskKind, TemplateDoc
from .tpp import EventSequence, read_jsonl

Log = Callable[[str], None]

PROFILES = {
    "paper": {
        1: dict(learning_rate=1e-4, batch_size=4, weight_decay=0.01, epochs=5, grad_accum_steps=4),
        2: dict(learning_rate=1e-4, batch_size=4, weight_decay=0.01, epochs=5, grad_accum_steps=4),
        3: dict(learning_rate=1e-4, batch_size=32, weight_decay=0.01, epochs=5, grad_accum_steps=4),
        "common": dict(pair_budget=50_000, mc_samples=10),
    },
    "desk": {
        1: dict(learning_rate=1e-3, batch_size=4, weight_decay=0.01, epochs=3, grad_accum_steps=1),
        2: dict(learning_rate=1e-3, batch_size=4, weight_decay=0.01, epochs=3, grad_accum_steps=1),
        3: dict(learning_rate=1e-2, batch_size=32, weight_decay=0.01, epochs=40, grad_accum_steps=1),
        "common": dict(pair_budget=5_000, mc_samples=10),
    },
}


# appended after an event to read out the history representation
PROBE = (template.T_SOE, TaskKind.TYPE.token)


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 4
    weight_decay: float = 0.01
    epochs: int = 3
    grad_accum_steps: int = 1
    mc_samples: int = 10
    pair_budget: int = 5_000
    byte_order: str = "msb"
    use_byte_tokens: bool = True
    seed: int = 0
    warmup_frac: float = 0.01
    clip_norm: float = 1.0
    dev_pairs: int = 200
    task_mix: dict | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise InvalidParameter(f"stage must be 1, 2 or 3, got {self.stage}")
        for name in ("learning_rate", "batch_size", "epochs", "grad_accum_steps", "mc_samples", "pair_budget"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or not 0 <= self.warmup_frac <= 1:
            raise InvalidParameter("weight_decay must be >= 0 and warmup_frac in [0, 1]")
        ByteOrder(self.byte_order)

    @classmethod
    def for_stage(cls, stage: int, profile: str = "desk", **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise InvalidParameter(f"unknown profile {profile!r}")
        values = {**PROFILES[profile]["common"], **PROFILES[profile][stage], "stage": stage}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @property
    def rendering(self) -> "Rendering":
        return Rendering(ByteOrder(self.byte_order), self.use_byte_tokens)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Rendering:
    order: ByteOrder = ByteOrder.MSB
    use_byte_tokens: bool = True

    def render(self, seq: EventSequence) -> TemplateDoc:
        return template.render_sequence(seq, self.order, self.use_byte_tokens)

    def to_dict(self) -> dict:
        return {"byte_order": self.order.value, "use_byte_tokens": self.use_byte_tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Rendering":
        return cls(ByteOrder(d["byte_order"]), bool(d["use_byte_tokens"]))


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetInfo:
    name: str
    labels: list[str]
    mean_interval: float
    majority_label: str
    has_descriptions: bool

    @property
    def num_types(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetInfo":
        return cls(**d)


@dataclass
class Dataset:
    name: str
    train: list[EventSequence] = field(default_factory=list)
    dev: list[EventSequence] = field(default_factory=list)
    test: list[EventSequence] = field(default_factory=list)
    labels: list[str] | None = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = infer_labels(self.train + self.dev + self.test)

    SPLITS = ("train", "dev", "test")

    @classmethod
    def load(cls, path: str | Path, name: str | None = None) -> "Dataset":
        """A directory with train/dev/test JSONL splits, or one JSONL file used as the test split."""
        path = Path(path)
        if path.is_dir():
            splits = {s: read_jsonl(path / f"{s}.jsonl") if (path / f"{s}.jsonl").exists() else [] for s in cls.SPLITS}
            labels = None
            if (path / "labels.json").exists():
                labels = [str(x) for x in json.loads((path / "labels.json").read_text(encoding="utf-8"))]
            return cls(name or path.name, labels=labels, **splits)
        if not path.exists():
            raise IngestError("no such dataset", path)
        return cls(name or path.stem, test=read_jsonl(path))

    def split(self, name: str) -> list[EventSequence]:
        return getattr(self, name)

    @property
    def has_descriptions(self) -> bool:
        return any(s.has_descriptions for s in self.train + self.dev + self.test)

    def info(self) -> DatasetInfo:
        source = self.train or self.dev + self.test
        taus = [tau for s in source for tau in s.intervals[1:]]
        counts = Counter(ev.type_label for s in source for ev in s.events)
        majority = min(counts, key=lambda k: (-counts[k], k)) if counts else (self.labels[0] if self.labels else "")
        return DatasetInfo(
            self.name,
            list(self.labels),
            float(np.mean(taus)) if taus else 1.0,
            majority,
            self.has_descriptions,
        )


def infer_labels(seqs: Sequence[EventSequence]) -> list[str]:
    table: dict[int, str] = {}
    for s in seqs:
        for ev in s.events:
            seen = table.setdefault(ev.type_index, ev.type_label)
            if seen != ev.type_label:
                raise IngestError(f"type {ev.type_index} is labelled both {seen!r} and {ev.type_label!r}", s.seq_id)
    if not table:
        return []
    return [table.get(i, str(i)) for i in range(max(table) + 1)]


def fit_to_context(seq: EventSequence, rendering: Rendering, max_len: int) -> EventSequence:
    """Drop trailing events until the rendered document fits ``max_len``.

    Two positions stay free: one for end-of-text or a task token after the
    start-of-event marker, so every kept event can be probed and predicted.
    """
    doc = rendering.render(seq)
    if len(doc.tokens) + len(PROBE) <= max_len:
        return seq
    n = len(seq)
    while n > 0 and doc.prefix_end(n) + len(PROBE) > max_len:
        n -= 1
    if n == 0:
        raise NoData(f"sequence {seq.seq_id} does not fit a context of {max_len} tokens")
    return EventSequence(seq.events[:n], seq.events[n - 1].time, seq.info, seq.seq_id, seq.spec)


@dataclass
class Corpus:
    datasets: list[Dataset]
    rendering: Rendering
    max_context_len: int
    train_docs: list[tuple[str, EventSequence]]
    truncated: int = 0
    _docs: dict = field(default_factory=dict, repr=False)

    def dataset(self, name: str) -> Dataset:
        for ds in self.datasets:
            if ds.name == name:
                return ds
        raise KeyError(name)

    def doc(self, seq: EventSequence) -> TemplateDoc:
        key = id(seq)
        if key not in self._docs:
            self._docs[key] = self.rendering.render(seq)
        return self._docs[key]


def build_corpus(
    datasets: Sequence[Dataset],
    seed: int = 0,
    rendering: Rendering = Rendering(),
    max_context_len: int = 1024,
) -> Corpus:
    """Union of the training splits, shuffled with the run seed; dev and test stay per dataset."""
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise InvalidParameter(f"dataset names must be unique: {names}")
    fitted, truncated = [], 0
    for ds in datasets:
        splits = {}
        for split in Dataset.SPLITS:
            out = []
            for seq in ds.split(split):
                cut = fit_to_context(seq, rendering, max_context_len)
                truncated += cut is not seq
                out.append(cut)
            splits[split] = out
        fitted.append(Dataset(ds.name, labels=list(ds.labels), **splits))
    docs = [(ds.name, seq) for ds in fitted for seq in ds.train]
    if not docs:
        raise NoData("no training sequences in any dataset")
    order = numpy_rng(seed, "shuffle").permutation(len(docs))
    return Corpus(fitted, rendering, max_context_len, [docs[i] for i in order], truncated)


# ---------------------------------------------------------------- pairs


@dataclass(frozen=True)
class Pair:
    dataset: str
    seq: EventSequence
    doc: TemplateDoc
    prefix_events: int
    task: TaskKind

    @property
    def prompt(self) -> list[int]:
        return template.make_prompt(self.doc, self.prefix_events, self.task)

    @property
    def response(self) -> list[int]:
        return template.make_response(self.doc, self.prefix_events, self.task)

    @property
    def prefix_len(self) -> int:
        return self.doc.prefix_end(self.prefix_events)


def available_tasks(seq: EventSequence, target: int) -> list[TaskKind]:
    tasks = [TaskKind.TIME, TaskKind.TYPE]
    if seq.events[target].description is not None:
        tasks.append(TaskKind.DESCRIPTION)
    return tasks


def sample_pairs(
    corpus: Corpus,
    budget: int,
    task_mix: dict | None = None,
    seed: int = 0,
    split: str = "train",
) -> list[Pair]:
    """Draw (sequence, prefix length, task) uniformly; the mix is renormalised over the tasks each event offers."""
    if budget < 1:
        raise InvalidParameter(f"pair budget must be >= 1, got {budget}")
    pool = [(ds.name, s) for ds in corpus.datasets for s in ds.split(split) if len(s) >= 2]
    if split == "train":
        pool = [(name, s) for name, s in corpus.train_docs if len(s) >= 2]
    if not pool:
        raise NoData(f"no {split} sequence has two or more events")
    mix = {TaskKind(k) if not isinstance(k, TaskKind) else k: float(v) for k, v in (task_mix or {}).items()}
    rng = numpy_rng(seed, "pairs", Dataset.SPLITS.index(split))
    pairs = []
    for _ in range(budget):
        name, seq = pool[int(rng.integers(len(pool)))]
        k = int(rng.integers(1, len(seq)))
        tasks = available_tasks(seq, k)
        weights = np.array([mix.get(t, 0.0) if mix else 1.0 for t in tasks])
        if weights.sum() <= 0:
            weights = np.ones(len(tasks))
        task = tasks[int(rng.choice(len(tasks), p=weights / weights.sum()))]
        pairs.append(Pair(name, seq, corpus.doc(seq), k, task))
    return pairs


def group_pairs(pairs: Sequence[Pair]) -> list[list[Pair]]:
    """Group pairs sharing a document, in first-appearance order."""
    groups: dict[int, list[Pair]] = {}
    for p in pairs:
        groups.setdefault(id(p.doc), []).append(p)
    return list(groups.values())


# ---------------------------------------------------------------- bundle


@dataclass
class EventLM:
    """Backbone, rendering choice, per-dataset metadata and intensity heads."""

    model: DecoderLM
    rendering: Rendering
    datasets: dict[str, DatasetInfo]
    heads: dict[str, IntensityHead] = field(default_factory=dict)
    stage: int = 0
    history: dict = field(default_factory=dict)

    def info(self, name: str) -> DatasetInfo:
        if name in self.datasets:
            return self.datasets[name]
        if len(self.datasets) == 1:
            return next(iter(self.datasets.values()))
        raise KeyError(f"model was not trained on dataset {name!r}")

    def head(self, name: str) -> IntensityHead | None:
        if name in self.heads:
            return self.heads[name]
        if len(self.heads) == 1:
            return next(iter(self.heads.values()))
        return None

    def to_checkpoint(self, metrics: dict | None = None) -> Checkpoint:
        return Checkpoint(
            model_config=self.model.cfg.to_dict(),
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            stage=self.stage,
            head_states={n: {k: v.detach().clone() for k, v in h.state_dict().items()} for n, h in self.heads.items()},
            metrics=metrics or {},
            meta={
                "rendering": self.rendering.to_dict(),
                "datasets": {n: i.to_dict() for n, i in self.datasets.items()},
                "history": self.history,
                "backbone_hash": state_hash(self.model.state_dict()),
            },
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EventLM":
        cfg = ModelConfig(**ckpt.model_config)
        model = DecoderLM(cfg)
        try:
            model.load_state_dict(ckpt.model_state)
        except RuntimeError as exc:
            raise IncompatibleCheckpoint(f"model tensors do not match the stored config: {exc}") from None
        model.eval()
        infos = {n: DatasetInfo.from_dict(d) for n, d in ckpt.meta.get("datasets", {}).items()}
        heads = {}
        for name, state in ckpt.head_states.items():
            head = IntensityHead(state["alpha"].shape[0], cfg.d_model)
            head.load_state_dict(state)
            heads[name] = head
        return cls(model, Rendering.from_dict(ckpt.meta["rendering"]), infos, heads, ckpt.stage, ckpt.meta.get("history", {}))


def event_hiddens(model: DecoderLM, doc: TemplateDoc, cache=None) -> torch.Tensor:
    """History representation after each event, [N, d].

    The probe ``<|start_of_event|><|type_task|>`` is appended after event i and
    the final-layer state at its last token is used; the probe is constant, so
    the state depends on events 1..i only.
    """
    if doc.n_events == 0:
        return torch.zeros(0, model.cfg.d_model)
    if cache is None:
        cache = model.prefill(list(doc.tokens))
    ends = [doc.event_end(i) + 1 for i in range(doc.n_events)]
    _, hidden = model.branches(cache, ends, torch.tensor([PROBE] * len(ends)))
    return hidden[:, -1]


# ---------------------------------------------------------------- training


def _log(log: Log | None, msg: str) -> None:
    if log is not None:
        log(msg)


def _padded(token_lists: Sequence[Sequence[int]], pad: int = VOCAB.eos) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(t) for t in token_lists)
    out = torch.full((len(token_lists), width), pad, dtype=torch.long)
    valid = torch.zeros(len(token_lists), width, dtype=torch.bool)
    for i, t in enumerate(token_lists):
        out[i, : len(t)] = torch.as_tensor(list(t), dtype=torch.long)
        valid[i, : len(t)] = True
    return out, valid


def document_nll(model: DecoderLM, docs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, int]:
    """Summed next-token NLL over every position of each document, and the target count."""
    tokens, valid = _padded(docs)
    logp, _ = model(tokens)
    picked = logp[:, :-1].gather(-1, tokens[:, 1:, None])[..., 0]
    mask = valid[:, 1:]
    return -(picked * mask).sum(), int(mask.sum())


def branch_tokens(pair: Pair) -> list[int]:
    return [template.T_SOE, pair.task.token] + pair.response


def pairs_nll(model: DecoderLM, group: Sequence[Pair]) -> tuple[torch.Tensor, int]:
    """Response-only NLL of pairs that share one document, via a single prefix pass."""
    doc = group[0].doc
    prefix = [p.prefix_len for p in group]
    cache = model.prefill(list(doc.tokens[: max(prefix)]))
    tokens, valid = _padded([branch_tokens(p) for p in group])
    logp, _ = model.branches(cache, prefix, tokens)
    picked = logp[:, :-1].gather(-1, tokens[:, 1:, None])[..., 0]
    mask = valid[:, 1:].clone()
    mask[:, 0] = False  # the task token is part of the prompt
    return -(picked * mask).sum(), int(mask.sum())


def _optimizer(params, cfg: TrainConfig, total_steps: int):
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    warm = max(1, math.ceil(cfg.warmup_frac * total_steps))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: min(1.0, (step + 1) / warm))
    return opt, sched


def _train_backbone(
    model: DecoderLM,
    cfg: TrainConfig,
    units: list,
    batch_loss: Callable[[DecoderLM, list], tuple[torch.Tensor, int]],
    validate: Callable[[DecoderLM], tuple[tuple, dict]],
    log: Log | None,
) -> list[dict]:
    """Shared epoch loop with accumulation, warmup, clipping and keep-best selection."""
    torch.manual_seed(derived_seed(cfg.seed, "dropout", cfg.stage))
    params = [p for p in model.parameters() if p.requires_grad]
    n_batches = math.ceil(len(units) / cfg.batch_size)
    steps = math.ceil(n_batches / cfg.grad_accum_steps) * cfg.epochs
    opt, sched = _optimizer(params, cfg, steps)
    history, best, best_state = [], None, None
    for epoch in range(cfg.epochs):
        model.train()
        order = numpy_rng(cfg.seed, "shuffle", cfg.stage, epoch).permutation(len(units))
        total, count = 0.0, 0
        for b in range(n_batches):
            batch = [units[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            nll, n = batch_loss(model, batch)
            loss = nll / max(n, 1)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"stage {cfg.stage} loss is {loss.item()} at epoch {epoch}, batch {b}")
            (loss / cfg.grad_accum_steps).backward()
            total += float(nll.detach())
            count += n
            if (b + 1) % cfg.grad_accum_steps == 0 or b == n_batches - 1:
                if cfg.clip_norm:
                    torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                sched.step()
                opt.zero_grad(set_to_none=True)
        model.eval()
        score, metrics = validate(model)
        record = {"epoch": epoch + 1, "train_loss": total / max(count, 1), **metrics}
        history.append(record)
        _log(log, f"stage {cfg.stage} epoch {epoch + 1}/{cfg.epochs} " + " ".join(f"{k}={v:.4f}" for k, v in record.items() if isinstance(v, float)))
        if best is None or score > best:
            best, best_state = score, copy.deepcopy(model.state_dict())
            record["selected"] = True
    model.load_state_dict(best_state)
    return history


def new_model(model_config: ModelConfig | None, seed: int) -> DecoderLM:
    model = DecoderLM(model_config or ModelConfig())
    model.reset_parameters(torch_generator(seed, "init"))
    return model


def _infos(corpus: Corpus) -> dict[str, DatasetInfo]:
    return {ds.name: ds.info() for ds in corpus.datasets}


def _check_rendering(bundle: EventLM, cfg: TrainConfig) -> None:
    if bundle.rendering != cfg.rendering:
        raise IncompatibleCheckpoint(
            f"checkpoint renders times as {bundle.rendering.to_dict()}, config asks for {cfg.rendering.to_dict()}"
        )


@torch.no_grad()
def dev_document_loss(model: DecoderLM, corpus: Corpus) -> float:
    total, count = 0.0, 0
    for ds in corpus.datasets:
        for seq in ds.dev:
            nll, n = document_nll(model, [list(corpus.doc(seq).tokens) + [VOCAB.eos]])
            total += float(nll)
            count += n
    return total / count if count else float("nan")


def train_stage1(
    config: TrainConfig,
    corpus: Corpus,
    model_config: ModelConfig | None = None,
    log: Log | None = None,
) -> Checkpoint:
    """Next-token training on every position of each rendered training sequence."""
    if config.stage != 1:
        raise InvalidParameter("train_stage1 needs a stage-1 config")
    if corpus.rendering != config.rendering:
        raise InvalidParameter("corpus rendering differs from the config")
    model = new_model(model_config, config.seed)
    docs = [list(corpus.doc(seq).tokens) + [VOCAB.eos] for _, seq in corpus.train_docs]

    def validate(m):
        dev = dev_document_loss(m, corpus)
        if math.isnan(dev):  # no dev data: keep the last epoch
            return (0,), {}
        return (-dev,), {"dev_loss": dev}

    history = _train_backbone(model, config, docs, lambda m, b: document_nll(m, b), validate, log)
    bundle = EventLM(model, corpus.rendering, _infos(corpus), stage=1, history={"stage1": history})
    return bundle.to_checkpoint({"stage1": history[-1] if history else {}})


@torch.no_grad()
def type_accuracy(model: DecoderLM, pairs: Sequence[Pair], rendering: Rendering) -> tuple[float, int]:
    """Greedy type predictions on ``pairs`` that ask for the type."""
    hits, n = 0, 0
    for group in group_pairs([p for p in pairs if p.task is TaskKind.TYPE]):
        doc = group[0].doc
        cache = model.prefill(list(doc.tokens[: max(p.prefix_len for p in group)]))
        start = torch.tensor([[template.T_SOE, TaskKind.TYPE.token]] * len(group))
        rows = decode_branches(model, cache, [p.prefix_len for p in group], start, GREEDY, max_new=32)
        for p, row in zip(group, rows):
            try:
                pred = template.parse_generation(row, TaskKind.TYPE, rendering.order, rendering.use_byte_tokens)
            except Exception:
                pred = None
            hits += pred == p.seq.events[p.prefix_events].type_label
            n += 1
    return (hits / n if n else float("nan")), n


@torch.no_grad()
def pairs_loss(model: DecoderLM, pairs: Sequence[Pair]) -> float:
    total, count = 0.0, 0
    for group in group_pairs(pairs):
        nll, n = pairs_nll(model, group)
        total += float(nll)
        count += n
    return total / count if count else float("nan")


def train_stage2(
    config: TrainConfig,
    checkpoint: Checkpoint | None,
    pairs: Sequence[Pair],
    corpus: Corpus,
    model_config: ModelConfig | None = None,
    log: Log | None = None,
) -> Checkpoint:
    """Response-only fine-tuning on prompt/response pairs.

    Pairs of one document share a single pass over the longest prefix. Epochs
    revisit the same pair set; a batch counts documents, not pairs.  Without a
    checkpoint training starts from a fresh random backbone.
    """
    if config.stage != 2:
        raise InvalidParameter("train_stage2 needs a stage-2 config")
    if not pairs:
        raise NoData("no prompt-response pairs")
    if checkpoint is None:
        bundle = EventLM(new_model(model_config, config.seed), corpus.rendering, _infos(corpus))
    else:
        if checkpoint.stage < 1:
            raise IncompatibleCheckpoint(f"stage 2 continues a stage-1 checkpoint, got stage {checkpoint.stage}")
        bundle = EventLM.from_checkpoint(checkpoint)
    _check_rendering(bundle, config)
    model = bundle.model
    has_dev = any(len(s) >= 2 for ds in corpus.datasets for s in ds.dev)
    dev = sample_pairs(corpus, config.dev_pairs, config.task_mix, config.seed, split="dev") if has_dev else []

    def validate(m):
        if not dev:
            return (0,), {}
        acc, _ = type_accuracy(m, dev, bundle.rendering)
        loss = pairs_loss(m, dev)
        return (acc if not math.isnan(acc) else 0.0, -loss), {"dev_type_acc": acc, "dev_response_loss": loss}

    def batch_loss(m, groups):
        parts = [pairs_nll(m, g) for g in groups]
        return sum(p[0] for p in parts), sum(p[1] for p in parts)

    history = _train_backbone(model, config, group_pairs(pairs), batch_loss, validate, log)
    bundle.stage = 2
    bundle.history = {**bundle.history, "stage2": history}
    return bundle.to_checkpoint({"stage2": history[-1] if history else {}})


@torch.no_grad()
def cached_hiddens(model: DecoderLM, corpus: Corpus, seqs: Sequence[EventSequence]) -> torch.Tensor:
    parts = [event_hiddens(model, corpus.doc(s)) for s in seqs]
    return torch.cat(parts) if parts else torch.zeros(0, model.cfg.d_model)


def _head_loglik(head, seqs, hiddens, mc_samples, seed):
    packed = pack(seqs, mc_samples, seed)
    return packed_loglik(head, hiddens, packed)


def train_stage3(
    config: TrainConfig,
    checkpoint: Checkpoint,
    corpus: Corpus,
    log: Log | None = None,
) -> Checkpoint:
    """Fit one intensity head per dataset on frozen backbone hidden states.

    Hidden states are computed once; each epoch redraws the Monte Carlo points
    and the head with the best dev log-likelihood per event is kept.
    """
    if config.stage != 3:
        raise InvalidParameter("train_stage3 needs a stage-3 config")
    if checkpoint.stage < 1:
        raise IncompatibleCheckpoint(f"stage 3 needs a trained backbone, got stage {checkpoint.stage}")
    bundle = EventLM.from_checkpoint(checkpoint)
    _check_rendering(bundle, config)
    model = bundle.model
    for p in model.parameters():
        p.requires_grad_(False)
    before = state_hash(model.state_dict())
    torch.manual_seed(derived_seed(config.seed, "dropout", 3))
    history = {}
    for ds_index, ds in enumerate(corpus.datasets):
        if not ds.train:
            continue
        info = bundle.info(ds.name) if ds.name in bundle.datasets else ds.info()
        head = IntensityHead.for_data(ds.train, max(info.num_types, 1), model.cfg.d_model)
        train_h = cached_hiddens(model, corpus, ds.train)
        offsets = np.concatenate([[0], np.cumsum([len(s) for s in ds.train])])
        dev_seqs = ds.dev or ds.train
        dev_h = cached_hiddens(model, corpus, dev_seqs)
        dev_events = max(sum(len(s) for s in dev_seqs), 1)
        dev_seed = derived_seed(config.seed, "mc-dev", ds_index)
        opt = torch.optim.Adam(param_groups(head, config.learning_rate, ds.train, config.weight_decay))
        n_batches = math.ceil(len(ds.train) / config.batch_size)
        records = []

        def dev_tll():
            with torch.no_grad():
                return float(_head_loglik(head, dev_seqs, dev_h, config.mc_samples, dev_seed).sum()) / dev_events

        best, best_state = dev_tll(), copy.deepcopy(head.state_dict())
        records.append({"epoch": 0, "dev_tll": best})
        for epoch in range(config.epochs):
            order = numpy_rng(config.seed, "shuffle", 3, ds_index, epoch).permutation(len(ds.train))
            for b in range(n_batches):
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                seqs = [ds.train[i] for i in idx]
                h = torch.cat([train_h[offsets[i] : offsets[i + 1]] for i in idx])
                seed = derived_seed(config.seed, "mc", ds_index, epoch, b)
                ll = _head_loglik(head, seqs, h, config.mc_samples, seed)
                loss = -ll.sum() / max(sum(len(s) for s in seqs), 1)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"stage 3 loss is {loss.item()} on {ds.name}, epoch {epoch}")
                (loss / config.grad_accum_steps).backward()
                if (b + 1) % config.grad_accum_steps == 0 or b == n_batches - 1:
                    opt.step()
                    opt.zero_grad(set_to_none=True)
            score = dev_tll()
            records.append({"epoch": epoch + 1, "dev_tll": score})
            if score > best:
                best, best_state = score, copy.deepcopy(head.state_dict())
        head.load_state_dict(best_state)
        _log(log, f"stage 3 {ds.name}: best dev TLL per event {best:.4f}")
        bundle.heads[ds.name] = head
        history[ds.name] = records
    if state_hash(model.state_dict()) != before:
        raise RuntimeError("backbone parameters changed during stage 3")
    bundle.stage = 3
    bundle.history = {**bundle.history, "stage3": history}
    return bundle.to_checkpoint({"stage3": {n: r[-1] for n, r in history.items()}})
