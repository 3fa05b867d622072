"""Command-line entry point: ``eventlm <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import pickle
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__, template
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import VOCAB
from .errors import (
    ContextOverflow,
    DegenerateInput,
    EventLMError,
    IncompatibleCheckpoint,
    IngestError,
    InvalidParameter,
    InvalidPrefix,
    NoData,
    NotTimeOrdered,
    PredictionFailed,
    TrainingDiverged,
    UnstableSpec,
)
from .evaluation import TASKS, evaluate
from .inference import Decoding, Policy, predict_next
from .model import ModelConfig
from .pipeline import Dataset, EventLM, TrainConfig, build_corpus, sample_pairs, train_stage1, train_stage2, train_stage3
from .seeding import numpy_rng
from .template import TaskKind
from .tpp import Event, EventSequence, HawkesSpec, read_jsonl, simulate_hawkes, write_jsonl

log = logging.getLogger("eventlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATA_ERRORS = (IngestError, NoData, NotTimeOrdered, UnstableSpec, IncompatibleCheckpoint, DegenerateInput, InvalidPrefix)
RUNTIME_ERRORS = (TrainingDiverged, PredictionFailed, ContextOverflow)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

EVAL_KEYS = {"tasks", "split", "policy", "time_mode", "time_samples", "time_trim", "temperature", "description_top_p",
             "max_text_tokens", "mc_samples", "max_sequences", "plots"}
PREPARE_KEYS = {"format", "top_k", "split_times", "split_fractions", "info", "ties"}


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


SECTIONS = {
    "model": _names(ModelConfig),
    "train": TrainConfig.field_names() - {"stage"},
    "stage1": TrainConfig.field_names() - {"stage"},
    "stage2": TrainConfig.field_names() - {"stage"},
    "stage3": TrainConfig.field_names() - {"stage"},
    "eval": EVAL_KEYS,
    "prepare": PREPARE_KEYS,
}
TOP_LEVEL = {"profile", "seed", *SECTIONS}


def load_config(path: str | None) -> dict:
    """Read a YAML config; any key that is not a known setting is an error."""
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(data) - TOP_LEVEL
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in SECTIONS.items():
        body = data.get(section) or {}
        if not isinstance(body, dict):
            raise UsageError(f"config section {section!r} must be a mapping")
        bad = set(body) - allowed
        if bad:
            raise UsageError(f"unknown keys in {section!r}: {sorted(bad)}")
    return data


def train_config(args, cfg: dict, stage: int) -> TrainConfig:
    values = {**(cfg.get("train") or {}), **(cfg.get(f"stage{stage}") or {})}
    values["seed"] = args.seed if args.seed is not None else cfg.get("seed", values.get("seed", 0))
    if args.byte_order:
        values["byte_order"] = args.byte_order
    if args.no_byte_tokens:
        values["use_byte_tokens"] = False
    profile = args.profile or cfg.get("profile", "desk")
    return TrainConfig.for_stage(stage, profile, **values)


def run_seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else int(cfg.get("seed", 0))


# ---------------------------------------------------------------- manifest


def blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(paths) -> str:
    """Content hash over input files (directories are walked in sorted order)."""
    h = hashlib.sha1()
    for p in sorted(Path(x) for x in paths if x):
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f"{f.name} {blob_hash(f.read_bytes())}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict
    input_hash: str
    outputs: dict
    version: str = __version__
    vocab_hash: str = VOCAB.hash
    run_id: str = field(default="")

    def __post_init__(self):
        if not self.run_id:
            body = json.dumps({k: v for k, v in asdict(self).items() if k != "run_id"}, sort_keys=True)
            self.run_id = hashlib.sha1(body.encode()).hexdigest()[:16]

    def write(self, path: Path, force: bool = False) -> Path:
        """Write once; rerunning the same run is allowed, a different run in the same place is not."""
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists() and not force:
            old = json.loads(path.read_text(encoding="utf-8"))
            if old.get("run_id") != self.run_id:
                raise UsageError(f"{path} belongs to run {old.get('run_id')}; use another output location or --force")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _snapshot(args) -> dict:
    skip = {"func", "command", "force", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def start_run(args, cfg: dict, manifest_path: Path, inputs: dict, outputs: dict) -> RunManifest:
    files = [p for v in inputs.values() for p in (v if isinstance(v, list) else [v]) if p]
    manifest = RunManifest(
        args.command,
        {"args": _snapshot(args), "file": cfg},
        run_seed(args, cfg),
        inputs,
        inputs_hash(files),
        outputs,
    )
    manifest.write(manifest_path, args.force)
    log.info("run %s -> %s", manifest.run_id, manifest_path)
    return manifest


def _log_to(path: Path) -> logging.Handler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    return handler


# ---------------------------------------------------------------- simulate


def _load_spec(path: str) -> tuple[HawkesSpec, dict]:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read spec {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"spec {path} must be a mapping")
    extras = {k: raw.pop(k) for k in ("labels", "info", "descriptions") if k in raw}
    unknown = set(raw) - {"mu", "alpha", "beta", "marks"}
    if unknown:
        raise UsageError(f"unknown spec keys: {sorted(unknown)}")
    try:
        spec = HawkesSpec.from_dict(raw)
    except KeyError as exc:
        raise UsageError(f"spec {path} is missing {exc}") from None
    return spec, extras


def _parse_splits(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        if name not in Dataset.SPLITS or not n.isdigit():
            raise UsageError(f"bad --splits entry {part!r}; expected e.g. train=500,dev=100,test=100")
        out[name] = int(n)
    return out


def cmd_simulate(args, cfg) -> int:
    spec, extras = _load_spec(args.spec)
    if args.t_end < 0:
        raise UsageError("--t-end must be >= 0")
    labels = extras.get("labels")
    if labels is not None and len(labels) != spec.num_types:
        raise UsageError(f"spec lists {len(labels)} labels for {spec.num_types} types")
    seed = run_seed(args, cfg)
    out = Path(args.out)
    splits = _parse_splits(args.splits) if args.splits else {"": args.count}
    if any(n < 0 for n in splits.values()):
        raise UsageError("sequence counts must be >= 0")
    as_dir = bool(args.splits)
    manifest_path = out / "manifest.json" if as_dir else out.with_name(out.name + ".manifest.json")
    outputs = {s: str(out / f"{s}.jsonl") for s in splits} if as_dir else {"data": str(out)}
    start_run(args, cfg, manifest_path, {"spec": args.spec}, outputs)

    def sims(split: str, n: int):
        rng = numpy_rng(seed, "simulate", Dataset.SPLITS.index(split) if split else 0)
        return [
            simulate_hawkes(
                spec,
                args.t_end,
                rng,
                labels=labels,
                descriptions=bool(extras.get("descriptions", False)),
                info=str(extras.get("info", "")),
                seq_id=f"{split or 'seq'}-{i}",
            )
            for i in range(n)
        ]

    if as_dir:
        out.mkdir(parents=True, exist_ok=True)
        for split, n in splits.items():
            write_jsonl(out / f"{split}.jsonl", sims(split, n))
        names = labels or [str(i) for i in range(spec.num_types)]
        (out / "labels.json").write_text(json.dumps(list(names)) + "\n", encoding="utf-8")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(out, sims("", args.count))
    log.info("wrote %s", out)
    return EXIT_OK


# ---------------------------------------------------------------- prepare


def _rows_easytpp_pickle(path: Path) -> dict[str, list]:
    """EasyTPP pickles: ``{split: [[{time_since_start, type_event, ...}, ...], ...]}``."""
    files = [path / f"{s}.pkl" for s in Dataset.SPLITS] if path.is_dir() else [path]
    out = {}
    for f in files:
        if not f.exists():
            continue
        try:
            with f.open("rb") as fh:
                data = pickle.load(fh, encoding="latin1")
        except Exception as exc:  # pickle raises many unrelated types
            raise IngestError(f"cannot unpickle ({exc})", f) from None
        for split in Dataset.SPLITS:
            if split in data:
                out[split] = [
                    [(float(ev["time_since_start"]), ev["type_event"], None) for ev in seq] for seq in data[split]
                ]
    return out


def _rows_easytpp_json(path: Path) -> dict[str, list]:
    """EasyTPP JSON/JSONL: one record per sequence with parallel ``time_since_start`` / ``type_event`` lists."""
    files = [p for s in Dataset.SPLITS for p in path.glob(f"{s}.json*")] if path.is_dir() else [path]
    out = {}
    for f in files:
        split = f.name.split(".")[0] if f.name.split(".")[0] in Dataset.SPLITS else "test"
        text = f.read_text(encoding="utf-8").strip()
        try:
            records = json.loads(text) if text.startswith("[") else [json.loads(x) for x in text.splitlines() if x.strip()]
        except json.JSONDecodeError as exc:
            raise IngestError(f"invalid JSON ({exc.msg})", f, exc.lineno) from None
        seqs = []
        for i, rec in enumerate(records, start=1):
            try:
                seqs.append(list(zip(map(float, rec["time_since_start"]), rec["type_event"], [None] * len(rec["type_event"]))))
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"record {i}: {exc}", f) from None
        out[split] = seqs
    return out


def _rows_csv(path: Path) -> dict[str, list]:
    """CSV with ``seq_id,time,type`` and an optional ``description`` column; one split."""
    groups: dict[str, list] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"seq_id", "time", "type"} - set(reader.fieldnames or [])
        if missing:
            raise IngestError(f"missing columns {sorted(missing)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                t = float(row["time"])
            except ValueError:
                raise IngestError(f"time {row['time']!r} is not a number", path, lineno) from None
            desc = (row.get("description") or "").strip() or None
            groups.setdefault(row["seq_id"], []).append((t, row["type"].strip(), desc))
    return {"all": [sorted(v, key=lambda r: r[0]) for v in groups.values()]}


READERS = {"easytpp-pkl": _rows_easytpp_pickle, "easytpp-json": _rows_easytpp_json, "csv": _rows_csv}


def _label_table(splits: dict[str, list], top_k: int | None) -> tuple[list[str], dict]:
    """Labels ordered by integer value when all are integers, else by frequency; the tail merges into ``Other``."""
    counts = Counter(str(r[1]) for seqs in splits.values() for seq in seqs for r in seq)
    keys = list(counts)
    if all(k.lstrip("-").isdigit() for k in keys):
        keys.sort(key=int)
    else:
        keys.sort(key=lambda k: (-counts[k], k))
    if top_k and len(keys) > top_k:
        kept = sorted(keys, key=lambda k: (-counts[k], k))[: top_k - 1]
        labels = [k for k in keys if k in kept] + ["Other"]
        mapping = {k: labels.index(k) if k in kept else top_k - 1 for k in keys}
        return labels, mapping
    return keys, {k: i for i, k in enumerate(keys)}


def _to_sequences(rows, labels, mapping, info, prefix, ties) -> tuple[list[EventSequence], int]:
    seqs, nudged = [], 0
    for i, seq in enumerate(rows):
        events, prev = [], -np.inf
        for t, lab, desc in sorted(seq, key=lambda r: r[0]):
            if t <= prev:
                if ties == "reject":
                    raise NotTimeOrdered(f"sequence {prefix}{i} has simultaneous events at t={t}")
                t = prev + 1e-6  # keeps every record; strict ordering needs a positive gap
                nudged += 1
            idx = mapping[str(lab)]
            events.append(Event(t, idx, labels[idx], desc))
            prev = t
        t_end = events[-1].time if events else 0.0
        seqs.append(EventSequence(events, t_end, info, f"{prefix}{i}"))
    return seqs, nudged


def _chronological(seqs: list, split_times=None, split_fractions=None) -> dict[str, list]:
    """Split one pool by first-event time: explicit boundaries, or fractions of the ordered pool."""
    order = sorted(seqs, key=lambda s: (s[0][0] if s else 0.0))
    if split_times:
        a, b = split_times
        first = lambda s: s[0][0] if s else 0.0  # noqa: E731
        return {
            "train": [s for s in order if first(s) < a],
            "dev": [s for s in order if a <= first(s) < b],
            "test": [s for s in order if first(s) >= b],
        }
    f_train, f_dev = split_fractions or (0.8, 0.1)
    n = len(order)
    i, j = int(round(f_train * n)), int(round((f_train + f_dev) * n))
    return {"train": order[:i], "dev": order[i:j], "test": order[j:]}


def cmd_prepare(args, cfg) -> int:
    opts = {**(cfg.get("prepare") or {})}
    for key in ("format", "top_k", "info", "ties"):
        if getattr(args, key, None) is not None:
            opts[key] = getattr(args, key)
    if args.split_times:
        opts["split_times"] = [float(x) for x in args.split_times.split(",")]
    fmt = opts.get("format")
    if fmt not in READERS:
        raise UsageError(f"--format must be one of {sorted(READERS)}")
    src, out = Path(args.input), Path(args.out)
    if not src.exists():
        raise IngestError("no such input", src)
    outputs = {s: str(out / f"{s}.jsonl") for s in Dataset.SPLITS} | {"labels": str(out / "labels.json")}
    start_run(args, cfg, out / "manifest.json", {"input": str(src)}, outputs)
    splits = READERS[fmt](src)
    if "all" in splits:
        splits = _chronological(splits.pop("all"), opts.get("split_times"), opts.get("split_fractions"))
    if not any(splits.values()):
        raise NoData(f"no sequences found in {src}")
    labels, mapping = _label_table(splits, opts.get("top_k"))
    out.mkdir(parents=True, exist_ok=True)
    total_in = total_out = nudged = 0
    for split in Dataset.SPLITS:
        rows = splits.get(split, [])
        seqs, n = _to_sequences(rows, labels, mapping, str(opts.get("info", "")), f"{split}-", opts.get("ties", "nudge"))
        nudged += n
        total_in += sum(len(r) for r in rows)
        total_out += sum(len(s) for s in seqs)
        write_jsonl(out / f"{split}.jsonl", seqs)
    (out / "labels.json").write_text(json.dumps(labels, ensure_ascii=False) + "\n", encoding="utf-8")
    if total_in != total_out:
        raise IngestError(f"{total_in} events read but {total_out} written", src)
    log.info("prepared %d events in %d labels (%d tied times nudged) -> %s", total_out, len(labels), nudged, out)
    return EXIT_OK


# ---------------------------------------------------------------- train


def _datasets(paths) -> list[Dataset]:
    if not paths:
        raise UsageError("--data is required")
    return [Dataset.load(p) for p in paths]


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**(cfg.get("model") or {}))
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, cfg) -> int:
    out = Path(args.out_dir)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    if args.no_stage1:
        if 1 in stages and args.stage != "all":
            raise UsageError("--no-stage1 cannot be combined with --stage 1")
        stages = [s for s in stages if s != 1]
    if stages[0] in (2, 3) and args.stage != "all" and not args.checkpoint and not (stages[0] == 2 and args.no_stage1):
        raise UsageError(f"--stage {stages[0]} needs --checkpoint (or --no-stage1 for stage 2)")
    outputs = {f"stage{s}": str(out / "checkpoints" / f"stage{s}.ckpt") for s in stages}
    outputs["log"] = str(out / "logs" / "train.log")
    outputs["history"] = str(out / "reports" / "train_history.json")
    start_run(args, cfg, out / "manifest.json", {"data": list(args.data or []), "checkpoint": args.checkpoint}, outputs)
    handler = _log_to(out / "logs" / "train.log")
    try:
        datasets = _datasets(args.data)
        configs = {s: train_config(args, cfg, s) for s in stages}
        first = configs[stages[0]]
        model_cfg = _model_config(cfg)
        corpus = build_corpus(datasets, first.seed, first.rendering, model_cfg.max_context_len)
        if corpus.truncated:
            log.info("%d sequences were cut to fit a %d-token context", corpus.truncated, model_cfg.max_context_len)
        ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
        if ckpt is not None and ckpt.model_config != model_cfg.to_dict() and cfg.get("model"):
            raise IncompatibleCheckpoint("the config's model section differs from the checkpoint")
        for stage in stages:
            c = configs[stage]
            t0 = time.time()
            log.info("stage %d: %s", stage, json.dumps(c.to_dict(), sort_keys=True))
            if stage == 1:
                ckpt = train_stage1(c, corpus, model_cfg, log.info)
            elif stage == 2:
                pairs = sample_pairs(corpus, c.pair_budget, c.task_mix, c.seed)
                ckpt = train_stage2(c, ckpt, pairs, corpus, model_cfg, log.info)
            else:
                ckpt = train_stage3(c, ckpt, corpus, log.info)
            save_checkpoint(outputs[f"stage{stage}"], ckpt)
            log.info("stage %d finished in %.1fs -> %s", stage, time.time() - t0, outputs[f"stage{stage}"])
        history = Path(outputs["history"])
        history.parent.mkdir(parents=True, exist_ok=True)
        history.write_text(json.dumps(ckpt.meta.get("history", {}), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    finally:
        log.removeHandler(handler)
        handler.close()
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _decoding(args, opts: dict) -> Decoding:
    keys = {"time_mode", "time_samples", "time_trim", "temperature", "description_top_p", "max_text_tokens"}
    values = {k: v for k, v in opts.items() if k in keys}
    if getattr(args, "time_samples", None):
        values["time_samples"] = args.time_samples
    if getattr(args, "time_mode", None):
        values["time_mode"] = args.time_mode
    return Decoding(**values)


def _policy(args, opts: dict) -> Policy:
    text = getattr(args, "policy", None) or opts.get("policy", "retry-3+fallback")
    try:
        return Policy.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def write_reports(result, out: Path, plots: bool = True) -> dict[str, Path]:
    """metrics.jsonl and metrics.csv, plus figures next to them."""
    out.mkdir(parents=True, exist_ok=True)
    paths = {"jsonl": out / "metrics.jsonl", "csv": out / "metrics.csv", "notices": out / "notices.txt"}
    rows = [r.to_dict() for r in result.reports]
    paths["jsonl"].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "task", "metric", "value", "n", "fallbacks", "malformed"])
        for r in rows:
            w.writerow([r["dataset"], r["task"], r["metric"], repr(r["value"]), r["n"],
                        r["counts"].get("fallbacks", ""), r["counts"].get("malformed", "")])
    paths["notices"].write_text("".join(n + "\n" for n in result.notices), encoding="utf-8")
    if plots:
        from . import plots as figures

        for name, detail in sorted(result.details.items()):
            slug = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
            if "time" in detail:
                paths[f"{name}:time"] = figures.time_scatter(
                    detail["time"]["true"], detail["time"]["pred"], out / f"{slug}_time_scatter.png", f"{name}: next interval"
                )
            if "intensity" in detail:
                paths[f"{name}:intensity"] = figures.intensity_curve(
                    detail["intensity"], out / f"{slug}_intensity.png", f"{name}: intensity"
                )
    return paths


def cmd_eval(args, cfg) -> int:
    opts = {**(cfg.get("eval") or {})}
    tasks = args.tasks.split(",") if args.tasks else opts.get("tasks", list(TASKS))
    unknown = set(tasks) - set(TASKS)
    if unknown:
        raise UsageError(f"unknown tasks {sorted(unknown)}; choose from {list(TASKS)}")
    out = Path(args.out_dir)
    reports = out / "reports"
    outputs = {"metrics": str(reports / "metrics.jsonl"), "csv": str(reports / "metrics.csv")}
    start_run(args, cfg, out / "manifest.json", {"checkpoint": args.checkpoint, "data": list(args.data or [])}, outputs)
    handler = _log_to(out / "logs" / "eval.log")
    try:
        bundle = EventLM.from_checkpoint(load_checkpoint(args.checkpoint))
        datasets = _datasets(args.data)
        max_seq = args.max_sequences if args.max_sequences is not None else opts.get("max_sequences")
        result = evaluate(
            bundle,
            datasets,
            tasks,
            split=args.split or opts.get("split", "test"),
            decoding=_decoding(args, opts),
            policy=_policy(args, opts),
            seed=run_seed(args, cfg),
            mc_samples=int(opts.get("mc_samples", 10)),
            max_sequences=max_seq,
        )
        for notice in result.notices:
            log.info("notice: %s", notice)
        paths = write_reports(result, reports, plots=not args.no_plots and opts.get("plots", True))
        for r in result.reports:
            log.info("%s %s %s = %.6g (n=%d)", r.dataset, r.task, r.metric, r.value, r.n)
        log.info("reports in %s", paths["jsonl"].parent)
    finally:
        log.removeHandler(handler)
        handler.close()
    return EXIT_OK


# ---------------------------------------------------------------- predict / dump-prompt


def _pick_sequence(path: str, seq_id: str | None, index: int) -> EventSequence:
    seqs = read_jsonl(path)
    if seq_id is not None:
        for s in seqs:
            if s.seq_id == seq_id:
                return s
        raise NoData(f"no sequence {seq_id!r} in {path}")
    if not 0 <= index < len(seqs):
        raise NoData(f"{path} has {len(seqs)} sequences, index {index} is out of range")
    return seqs[index]


def cmd_predict(args, cfg) -> int:
    bundle = EventLM.from_checkpoint(load_checkpoint(args.checkpoint))
    seq = _pick_sequence(args.data, args.seq_id, args.index)
    n = args.prefix if args.prefix is not None else len(seq)
    if not 1 <= n <= len(seq):
        raise InvalidPrefix(f"prefix must be in [1, {len(seq)}], got {n}")
    prefix = seq.prefix(n)
    opts = cfg.get("eval") or {}
    task = TaskKind(args.task)
    value = predict_next(bundle, prefix, task, _policy(args, opts), args.dataset, _decoding(args, opts), run_seed(args, cfg))
    record = {"seq_id": seq.seq_id, "prefix_events": n, "task": task.value, "prediction": value}
    if n < len(seq):
        nxt = seq.events[n]
        record["truth"] = {"time": nxt.time, "type": nxt.type_label, "description": nxt.description}[task.value]
    print(json.dumps(record, ensure_ascii=False))
    return EXIT_OK


def cmd_dump_prompt(args, cfg) -> int:
    seq = _pick_sequence(args.data, args.seq_id, args.index)
    order = args.byte_order or (cfg.get("train") or {}).get("byte_order", "msb")
    use_bytes = not args.no_byte_tokens and (cfg.get("train") or {}).get("use_byte_tokens", True)
    from .codec import ByteOrder

    doc = template.render_sequence(seq, ByteOrder(order), use_bytes)
    if args.prefix is None:
        tokens = list(doc.tokens)
    else:
        tokens = template.make_prompt(doc, args.prefix, TaskKind(args.task))
    if args.ids:
        print(" ".join(map(str, tokens)))
    else:
        print(template.pretty_print(tokens))
        if args.prefix is not None and args.prefix < len(seq):
            print("--- response")
            print(template.pretty_print(template.make_response(doc, args.prefix, TaskKind(args.task))))
    return EXIT_OK


def cmd_vocab(args, cfg) -> int:
    text = VOCAB.manifest()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with model/train/stageN/eval/prepare sections")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--profile", choices=["desk", "paper"], default=None)
    common.add_argument("--byte-order", choices=["msb", "lsb"], default=None)
    common.add_argument("--no-byte-tokens", action="store_true", help="write times as 3-decimal number strings")
    common.add_argument("--force", action="store_true", help="replace an existing manifest from a different run")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="eventlm", description="Byte-token language models for event sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("simulate", parents=[common], help="sample Hawkes sequences to JSONL")
    s.add_argument("--spec", required=True, help="YAML with mu, alpha, beta[, marks, labels, info, descriptions]")
    s.add_argument("--t-end", type=float, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--count", type=int, help="number of sequences written to one JSONL file")
    g.add_argument("--splits", help="e.g. train=500,dev=100,test=100; --out is then a directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", parents=[common], help="convert an external dataset to JSONL splits")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=sorted(READERS), default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--top-k", type=int, default=None, help="keep the K-1 most frequent labels, merge the rest")
    s.add_argument("--split-times", default=None, help="chronological boundaries 'a,b' for single-pool inputs")
    s.add_argument("--info", default=None, help="sequence description placed in the system block")
    s.add_argument("--ties", choices=["nudge", "reject"], default=None)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="run training stages")
    s.add_argument("--stage", choices=["1", "2", "3", "all"], required=True)
    s.add_argument("--data", nargs="+", help="dataset directories (train/dev/test.jsonl) or files")
    s.add_argument("--checkpoint", default=None, help="checkpoint to continue from")
    s.add_argument("--no-stage1", action="store_true", help="start stage 2 from a random backbone")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on held-out splits")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", nargs="+")
    s.add_argument("--tasks", default=None, help=f"comma list from {','.join(TASKS)}")
    s.add_argument("--split", choices=list(Dataset.SPLITS), default=None)
    s.add_argument("--policy", default=None, help="reject | fallback | retry-K[+fallback]")
    s.add_argument("--time-mode", choices=["mean", "greedy"], default=None)
    s.add_argument("--time-samples", type=int, default=None)
    s.add_argument("--max-sequences", type=int, default=None)
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="predict the next event after a prefix")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="JSONL file")
    s.add_argument("--seq-id", default=None)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--prefix", type=int, default=None, help="number of observed events (default: all)")
    s.add_argument("--task", choices=[t.value for t in TaskKind], default="time")
    s.add_argument("--dataset", default=None)
    s.add_argument("--policy", default=None)
    s.add_argument("--time-mode", choices=["mean", "greedy"], default=None)
    s.add_argument("--time-samples", type=int, default=None)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("dump-prompt", parents=[common], help="print a rendered sequence or prompt")
    s.add_argument("--data", required=True, help="JSONL file")
    s.add_argument("--seq-id", default=None)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--prefix", type=int, default=None)
    s.add_argument("--task", choices=[t.value for t in TaskKind], default="time")
    s.add_argument("--ids", action="store_true", help="print token ids instead of the surface form")
    s.set_defaults(func=cmd_dump_prompt)

    s = sub.add_parser("vocab", parents=[common], help="print the vocabulary manifest")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_vocab)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and argument errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    log.setLevel(level)  # run logs are written even when the root logger is configured elsewhere
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"eventlm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"eventlm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RUNTIME_ERRORS as exc:
        print(f"eventlm: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except InvalidParameter as exc:
        print(f"eventlm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EventLMError as exc:
        print(f"eventlm: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"eventlm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
