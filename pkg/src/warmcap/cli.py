"""Command-line entry point: ``warmcap <command> [options]``.

Option values resolve in this order (later wins): built-in defaults, the
``--config`` INI file, then command-line flags. Every command that writes a
file records the fingerprint and seed that produced it.

On failure a single-line JSON error record is written to stderr and the
process exits with the code from ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonschema
from threadpoolctl import threadpool_limits

from . import evaluation
from .captioner import Study, export_attention, generate_report, write_attention
from .corpus import build_vocab, load_split, synth_dataset
from .decoder import DECODER_PRESETS, DecoderConfig
from .encoder import PRESETS, ConfigError, EncoderConfig
from .training.checkpoint import Checkpoint, CheckpointError, FingerprintMismatch
from .training.data import Split
from .training.finetune import TrainConfig, build_captioner, decode_split, finetune, load_captioner
from .training.pretrain import PretrainConfig, pretrain_decoder_lm, pretrain_decoder_mlm, pretrain_encoder_classification

log = logging.getLogger("warmcap")

EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "missing_file": 3,
    "fingerprint_mismatch": 4,
    "malformed_config": 5,
    "malformed_checkpoint": 6,
    "invalid_document": 7,
    "invalid_input": 8,
}


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message, self.prog)
        sys.exit(EXIT_CODES["usage"])


def _emit_error(kind: str, message: str, command: str) -> None:
    record = {"error": kind, "exit_code": EXIT_CODES[kind], "command": command, "message": message}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# configuration


class Settings:
    """Flag > config file > default lookup for one command invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = configparser.ConfigParser()
        if getattr(args, "config", None):
            path = Path(args.config)
            if not path.exists():
                raise FileNotFoundError(f"no config file at {path}")
            try:
                self.file.read(path)
            except configparser.Error as exc:
                raise CommandError("malformed_config", str(exc)) from exc
        self.resolved: Dict[str, Dict[str, str]] = {}

    def get(self, section: str, key: str, default=None, kind=str, flag: Optional[str] = None):
        value = getattr(self.args, flag or key, None)
        if value is None and self.file.has_option(section, key):
            raw = self.file.get(section, key)
            try:
                value = _parse(raw, kind)
            except ValueError as exc:
                raise CommandError("malformed_config", f"[{section}] {key} = {raw!r}: {exc}") from exc
        if value is None:
            value = default
        if value is not None:
            self.resolved.setdefault(section, {})[key] = str(value)
        return value

    def write(self, path) -> None:
        cp = configparser.ConfigParser()
        for section in sorted(self.resolved):
            cp[section] = dict(sorted(self.resolved[section].items()))
        with open(path, "w") as fh:
            cp.write(fh)


def _parse(raw: str, kind):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    return kind(raw)


def _encoder_config(s: Settings) -> EncoderConfig:
    name = s.get("encoder", "preset", "cvt-mini", flag="encoder")
    if name not in PRESETS:
        raise CommandError("malformed_config", f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def _decoder_config(s: Settings) -> DecoderConfig:
    name = s.get("decoder", "preset", "toy", flag="decoder")
    if name not in DECODER_PRESETS:
        raise CommandError("malformed_config", f"unknown decoder preset {name!r}; choose from {sorted(DECODER_PRESETS)}")
    return DECODER_PRESETS[name]


def _train_config(s: Settings) -> TrainConfig:
    values = {}
    for f in fields(TrainConfig):
        kind = type(f.default) if f.default is not None else int
        values[f.name] = s.get("train", f.name, f.default, kind)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise CommandError("malformed_config", str(exc)) from exc


def _pretrain_config(s: Settings) -> PretrainConfig:
    values = {f.name: s.get("pretrain", f.name, f.default, type(f.default)) for f in fields(PretrainConfig)}
    try:
        return PretrainConfig(**values)
    except ValueError as exc:
        raise CommandError("malformed_config", str(exc)) from exc


def _data_root(s: Settings) -> Path:
    root = Path(s.get("data", "root", None, flag="data") or "")
    if not (root / "dataset.json").exists():
        raise FileNotFoundError(f"no dataset at {root} (missing dataset.json)")
    return root


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(evaluation.json_safe(obj), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, s: Settings) -> dict:
    out = Path(s.get("data", "root", None, flag="out") or "")
    if not str(out):
        raise CommandError("usage", "synth needs --out")
    root = synth_dataset(
        out,
        n_train=s.get("synth", "n_train", 2000, int),
        n_val=s.get("synth", "n_val", 300, int),
        n_test=s.get("synth", "n_test", 500, int),
        views_per_example=s.get("synth", "views", 1, int),
        seed=s.get("synth", "seed", 0, int),
        profile=s.get("synth", "profile", "clinical"),
    )
    meta = json.loads((root / "dataset.json").read_text())
    return {"dataset": str(root), "fingerprint": meta["fingerprint"], "seed": meta["seed"]}


def cmd_pretrain_encoder(args, s: Settings) -> dict:
    root = _data_root(s)
    enc = _encoder_config(s)
    cfg = _pretrain_config(s)
    out = Path(args.out)
    train = Split.load(root, "train", enc)
    val = Split.load(root, "val", enc)
    res = pretrain_encoder_classification(enc, train, cfg, val)
    res.checkpoint.save(out)
    _write_history(res.history, _sidecar(out, ".history.jsonl"), res.checkpoint.fingerprint, cfg.seed)
    s.write(_sidecar(out, ".ini"))
    return {"checkpoint": str(out), "fingerprint": res.checkpoint.fingerprint, "seed": cfg.seed, "final": res.history[-1] if res.history else None}


def cmd_pretrain_decoder(args, s: Settings) -> dict:
    root = _data_root(s)
    objective = s.get("pretrain", "objective", "lm", flag="objective")
    if objective not in ("lm", "mlm"):
        raise CommandError("malformed_config", f"objective must be 'lm' or 'mlm', got {objective!r}")
    cfg = _pretrain_config(s)
    train = load_split(root, "train")
    val = load_split(root, "val")
    reports = [r.report for r in train]
    vocab = build_vocab(reports)
    dec = replace(_decoder_config(s), vocab_size=len(vocab))
    fn = pretrain_decoder_lm if objective == "lm" else pretrain_decoder_mlm
    res = fn(dec, reports, vocab, cfg, [r.report for r in val])
    out = Path(args.out)
    res.checkpoint.save(out)
    _write_history(res.history, _sidecar(out, ".history.jsonl"), res.checkpoint.fingerprint, cfg.seed)
    s.write(_sidecar(out, ".ini"))
    return {"checkpoint": str(out), "fingerprint": res.checkpoint.fingerprint, "seed": cfg.seed, "objective": objective}


def _write_history(history: List[dict], path: Path, fingerprint: str, seed: int) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(dict(rec, fingerprint=fingerprint, seed=seed), sort_keys=True) + "\n")


def _optional_checkpoint(path: Optional[str]) -> Optional[Checkpoint]:
    return Checkpoint.load(path) if path else None


def cmd_finetune(args, s: Settings) -> dict:
    root = _data_root(s)
    enc = _encoder_config(s)
    dec = _decoder_config(s)
    cfg = _train_config(s)
    enc_ck = _optional_checkpoint(s.get("warm_start", "encoder", None, flag="encoder_ckpt"))
    dec_ck = _optional_checkpoint(s.get("warm_start", "decoder", None, flag="decoder_ckpt"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = Split.load(root, "train", enc)
    val = Split.load(root, "val", enc)
    vocab = build_vocab(train.reports)
    model = build_captioner(enc, dec, vocab, cfg.seed)
    s.write(out / "config.ini")
    res = finetune(model, train, val, vocab, cfg, enc_ck, dec_ck, history_path=out / "history.jsonl")
    res.checkpoint.save(out / "model.ckpt")
    summary = {
        "checkpoint": str(out / "model.ckpt"),
        "fingerprint": res.checkpoint.fingerprint,
        "seed": cfg.seed,
        "best_epoch": res.best_epoch,
        "best_val_cider": res.best_val_cider,
        "epochs_run": res.stopped_epoch,
    }
    _write_json(summary, out / "run.json")
    return summary


def _read_lines(path) -> List[str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p.read_text().splitlines()


def _file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()[:16]


def cmd_evaluate(args, s: Settings) -> dict:
    seed = s.get("evaluate", "seed", 0, int, flag="seed")
    resamples = s.get("evaluate", "resamples", evaluation.stats.BOOTSTRAP_RESAMPLES, int)
    level = s.get("evaluate", "level", evaluation.stats.CONFIDENCE_LEVEL, float)
    t0 = time.time()
    if args.hyps or args.refs:
        if not (args.hyps and args.refs):
            raise CommandError("usage", "--hyps and --refs must be given together")
        hyps, refs = _read_lines(args.hyps), _read_lines(args.refs)
        if len(hyps) != len(refs):
            raise CommandError("invalid_input", f"{len(hyps)} hypotheses but {len(refs)} references")
        ids = None
        fingerprint = _file_digest(args.hyps, args.refs)
        source = {"mode": "files", "hypotheses": str(args.hyps), "references": str(args.refs)}
    else:
        if not args.model:
            raise CommandError("usage", "evaluate needs --model or --hyps/--refs")
        root = _data_root(s)
        split = s.get("evaluate", "split", "test", flag="split")
        model, vocab = load_captioner(Checkpoint.load(args.model))
        beam = s.get("evaluate", "beam", TrainConfig().test_beam, int, flag="beam")
        data = Split.load(root, split, model.encoder_config)
        if args.limit:
            data = data.subset(range(min(args.limit, len(data))))
        hyps = decode_split(model, data, vocab, beam)
        refs, ids = data.reports, data.ids
        fingerprint = model.fingerprint
        source = {"mode": "model", "checkpoint": str(args.model), "data": str(root), "split": split, "beam": beam}
        if args.save_hyps:
            Path(args.save_hyps).write_text("".join(h + "\n" for h in hyps))
    scores = evaluation.score_reports(hyps, refs, ids, seed, resamples, level)
    doc = evaluation.metrics_document(
        scores, fingerprint, seed, source, {"started": t0, "wall_time": time.time() - t0}
    )
    evaluation.write_document(doc, args.out)
    return {"metrics": str(args.out), "fingerprint": fingerprint, "seed": seed, "aggregate": scores["aggregate"]}


def cmd_attention(args, s: Settings) -> dict:
    root = _data_root(s)
    split = s.get("evaluate", "split", "test", flag="split")
    model, vocab = load_captioner(Checkpoint.load(args.model))
    records = load_split(root, split)
    if not 0 <= args.index < len(records):
        raise CommandError("invalid_input", f"index {args.index} outside split of {len(records)} studies")
    data = Split.from_records([records[args.index]], model.encoder_config)
    study = Study(list(data.images([0])[0]), id=data.ids[0])
    mode = "greedy" if args.beam == 1 else ("beam", args.beam)
    report = generate_report(model, study, vocab, mode)
    maps = export_attention(model, study, report, vocab)
    header = {
        "fingerprint": model.fingerprint,
        "seed": int(model.seed),
        "study": study.id,
        "report": report.text,
        "grid": list(model.encoder_config.grid),
    }
    write_attention(maps, args.out, header)
    return {"attention": str(args.out), "fingerprint": model.fingerprint, "seed": int(model.seed), "records": len(maps)}


def _load_document(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no metrics file at {p}")
    doc = json.loads(p.read_text())
    evaluation.validate(doc)
    if doc["schema"] != evaluation.METRICS_SCHEMA_ID:
        raise CommandError("invalid_document", f"{p} is not a metrics document")
    return doc


def cmd_compare(args, s: Settings) -> dict:
    groups: Dict[str, List[dict]] = {}
    for entry in args.group or []:
        label, sep, paths = entry.partition("=")
        if not sep or not paths:
            raise CommandError("usage", f"--group expects LABEL=FILE[,FILE...], got {entry!r}")
        groups.setdefault(label, []).extend(_load_document(p) for p in paths.split(","))
    for path in args.files or []:
        label = Path(path).stem
        if label in groups:
            raise CommandError("usage", f"duplicate group label {label!r}")
        groups[label] = [_load_document(path)]
    if len(groups) < 2:
        raise CommandError("usage", "compare needs at least two groups")
    metric = s.get("compare", "metric", "cider", flag="metric")
    pooling = s.get("compare", "pooling", "pooled", flag="pooling")
    alpha = s.get("compare", "alpha", 0.05, float, flag="alpha")
    if metric not in evaluation.PER_EXAMPLE_METRICS:
        raise CommandError("malformed_config", f"unknown metric {metric!r}")
    doc = evaluation.compare_documents(groups, metric, pooling, alpha)
    evaluation.write_document(doc, args.out)
    if not args.quiet:
        print(evaluation.stats.format_report(evaluation.json_safe(doc)))
    return {"report": str(args.out), "welch_p": doc["welch_anova"]["p"], "levene_p": doc["levene"]["p"]}


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-encoder": cmd_pretrain_encoder,
    "pretrain-decoder": cmd_pretrain_decoder,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "attention": cmd_attention,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="warmcap", description="Synthetic report-generation laboratory.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file; flags override its values")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap (1 = deterministic mode)")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    q.add_argument("--out")
    q.add_argument("--n-train", dest="n_train", type=int)
    q.add_argument("--n-val", dest="n_val", type=int)
    q.add_argument("--n-test", dest="n_test", type=int)
    q.add_argument("--views", type=int, choices=(1, 2))
    q.add_argument("--seed", type=int)
    q.add_argument("--profile", choices=("clinical", "uniform"))

    def pretrain_flags(q):
        q.add_argument("--data")
        q.add_argument("--out", required=True)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--seed", type=int)

    q = sub.add_parser("pretrain-encoder", parents=[common], help="classification pretraining of the encoder")
    pretrain_flags(q)
    q.add_argument("--encoder", help=f"preset: {', '.join(PRESETS)}")

    q = sub.add_parser("pretrain-decoder", parents=[common], help="LM or MLM pretraining of the decoder body")
    pretrain_flags(q)
    q.add_argument("--decoder", help=f"preset: {', '.join(DECODER_PRESETS)}")
    q.add_argument("--objective", choices=("lm", "mlm"))
    q.add_argument("--mask-rate", dest="mask_rate", type=float)

    q = sub.add_parser("finetune", parents=[common], help="teacher-forced fine-tuning with early stopping")
    q.add_argument("--data")
    q.add_argument("--out", required=True, help="run directory")
    q.add_argument("--encoder")
    q.add_argument("--decoder")
    q.add_argument("--encoder-ckpt", dest="encoder_ckpt")
    q.add_argument("--decoder-ckpt", dest="decoder_ckpt")
    q.add_argument("--max-epochs", dest="max_epochs", type=int)
    q.add_argument("--patience", type=int)
    q.add_argument("--batch-size", dest="batch_size", type=int)
    q.add_argument("--seed", type=int)

    q = sub.add_parser("evaluate", parents=[common], help="score a model or a pair of text files")
    q.add_argument("--model")
    q.add_argument("--data")
    q.add_argument("--split", choices=("train", "val", "test"))
    q.add_argument("--beam", type=int)
    q.add_argument("--limit", type=int, help="score only the first N studies")
    q.add_argument("--hyps")
    q.add_argument("--refs")
    q.add_argument("--save-hyps", dest="save_hyps")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", required=True)

    q = sub.add_parser("attention", parents=[common], help="export cross-attention maps for one study")
    q.add_argument("--model", required=True)
    q.add_argument("--data")
    q.add_argument("--split", choices=("train", "val", "test"))
    q.add_argument("--index", type=int, default=0)
    q.add_argument("--beam", type=int, default=1)
    q.add_argument("--out", required=True)

    q = sub.add_parser("compare", parents=[common], help="Levene, Welch ANOVA and Games-Howell over metrics files")
    q.add_argument("files", nargs="*", help="metrics files, one group each (label = file stem)")
    q.add_argument("--group", action="append", help="LABEL=FILE[,FILE...] (repeatable)")
    q.add_argument("--metric")
    q.add_argument("--pooling", choices=("pooled", "run_mean"))
    q.add_argument("--alpha", type=float)
    q.add_argument("--out", required=True)
    q.add_argument("--quiet", action="store_true")
    return p


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CommandError):
        return exc.kind
    if isinstance(exc, FileNotFoundError):
        return "missing_file"
    if isinstance(exc, FingerprintMismatch):
        return "fingerprint_mismatch"
    if isinstance(exc, CheckpointError):
        return "malformed_checkpoint"
    if isinstance(exc, (ConfigError, configparser.Error)):
        return "malformed_config"
    if isinstance(exc, (jsonschema.ValidationError, json.JSONDecodeError)):
        return "invalid_document"
    return "invalid_input"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        settings = Settings(args)
        with threadpool_limits(limits=args.threads):
            result = COMMANDS[args.command](args, settings)
    except (CommandError, OSError, CheckpointError, ConfigError, configparser.Error,
            jsonschema.ValidationError, ValueError, KeyError) as exc:
        kind = _classify(exc)
        _emit_error(kind, str(exc), args.command)
        return EXIT_CODES[kind]
    if result is not None:
        sys.stdout.write(json.dumps(evaluation.json_safe(result), sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
