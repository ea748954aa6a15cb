"""Warm-start and subset-size experiment drivers.

Both drivers share pretraining across runs: checkpoints are produced once and
each fine-tuning run differs only in its seed (and, for the subset driver, in
the training subset).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..corpus import Vocabulary
from ..decoder import DecoderConfig
from ..encoder import EncoderConfig
from .checkpoint import Checkpoint
from .data import Split
from .finetune import TrainConfig, build_captioner, decode_split, epochs_to_reach, finetune, load_captioner
from .pretrain import (
    PretrainConfig,
    pretrain_decoder_lm,
    pretrain_decoder_mlm,
    pretrain_encoder_classification,
)

log = logging.getLogger(__name__)

# condition -> (encoder checkpoint task, decoder checkpoint task)
CONDITIONS: Dict[str, Tuple[Optional[str], Optional[str]]] = {
    "cold": (None, None),
    "lm": (None, "lm"),
    "classification+lm": ("classification", "lm"),
    "mlm": (None, "mlm"),
}


@dataclass
class PretrainBudget:
    encoder_epochs: int = 10
    lm_epochs: int = 8
    mlm_epochs: int = 8
    seed: int = 0


def pretrain_checkpoints(
    enc: EncoderConfig,
    dec: DecoderConfig,
    train: Split,
    vocab: Vocabulary,
    tasks: Sequence[str],
    budget: PretrainBudget = PretrainBudget(),
    val: Optional[Split] = None,
) -> Dict[str, Checkpoint]:
    """One checkpoint per requested task, all trained on the training split."""
    out = {}
    val_reports = val.reports if val is not None else None
    if "classification" in tasks:
        cfg = PretrainConfig(epochs=budget.encoder_epochs, seed=budget.seed)
        out["classification"] = pretrain_encoder_classification(enc, train, cfg, val).checkpoint
    if "lm" in tasks:
        cfg = PretrainConfig(epochs=budget.lm_epochs, seed=budget.seed)
        out["lm"] = pretrain_decoder_lm(dec, train.reports, vocab, cfg, val_reports).checkpoint
    if "mlm" in tasks:
        cfg = PretrainConfig(epochs=budget.mlm_epochs, seed=budget.seed)
        out["mlm"] = pretrain_decoder_mlm(dec, train.reports, vocab, cfg, val_reports).checkpoint
    return out


@dataclass
class Run:
    condition: str
    seed: int
    best_val_cider: float
    best_epoch: int
    history: List[dict]
    checkpoint: Checkpoint
    wall_time: float
    test_hypotheses: Optional[List[str]] = None

    def summary(self) -> dict:
        return {
            "condition": self.condition,
            "seed": self.seed,
            "best_val_cider": self.best_val_cider,
            "best_epoch": self.best_epoch,
            "epochs": len(self.history),
            "wall_time": self.wall_time,
        }


def run_condition(
    condition: str,
    seed: int,
    enc: EncoderConfig,
    dec: DecoderConfig,
    train: Split,
    val: Split,
    vocab: Vocabulary,
    checkpoints: Dict[str, Checkpoint],
    cfg: TrainConfig,
    test: Optional[Split] = None,
) -> Run:
    enc_task, dec_task = CONDITIONS[condition]
    t0 = time.perf_counter()
    model = build_captioner(enc, dec, vocab, seed)
    res = finetune(
        model,
        train,
        val,
        vocab,
        TrainConfig(**{**cfg.to_dict(), "seed": seed}),
        checkpoints[enc_task] if enc_task else None,
        checkpoints[dec_task] if dec_task else None,
    )
    hyps = None
    if test is not None:
        best, _ = load_captioner(res.checkpoint)
        hyps = decode_split(best, test, vocab, cfg.test_beam, cfg.max_decode_len)
    run = Run(condition, seed, res.best_val_cider, res.best_epoch, res.history, res.checkpoint,
              time.perf_counter() - t0, hyps)
    log.info("run %s", run.summary())
    return run


def warm_start_experiment(
    enc: EncoderConfig,
    dec: DecoderConfig,
    train: Split,
    val: Split,
    vocab: Vocabulary,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    conditions: Sequence[str] = tuple(CONDITIONS),
    cfg: TrainConfig = TrainConfig(),
    budget: PretrainBudget = PretrainBudget(),
    checkpoints: Optional[Dict[str, Checkpoint]] = None,
    test: Optional[Split] = None,
    test_conditions: Sequence[str] = (),
    callback: Optional[Callable[[Run], None]] = None,
) -> List[Run]:
    """Fine-tune every condition under every seed (seed pairs share their initialisation)."""
    unknown = set(conditions) - set(CONDITIONS)
    if unknown:
        raise ValueError(f"unknown conditions {sorted(unknown)}")
    needed = {t for c in conditions for t in CONDITIONS[c] if t}
    if checkpoints is None:
        checkpoints = pretrain_checkpoints(enc, dec, train, vocab, sorted(needed), budget, val)
    missing = needed - set(checkpoints)
    if missing:
        raise ValueError(f"no checkpoint for tasks {sorted(missing)}")
    runs = []
    for seed in seeds:
        for condition in conditions:
            run = run_condition(condition, seed, enc, dec, train, val, vocab, checkpoints, cfg,
                                test if condition in test_conditions else None)
            runs.append(run)
            if callback:
                callback(run)
    return runs


def paired_comparison(runs: Sequence[Run], treatment: str, control: str) -> dict:
    """Seed-paired best-validation CIDEr of two conditions."""
    by = {(r.condition, r.seed): r for r in runs}
    seeds = sorted(s for c, s in by if c == treatment and (control, s) in by)
    if not seeds:
        raise ValueError(f"no seed has both {treatment!r} and {control!r} runs")
    t = np.array([by[treatment, s].best_val_cider for s in seeds])
    c = np.array([by[control, s].best_val_cider for s in seeds])
    faster = []
    for s in seeds:
        threshold = by[control, s].best_val_cider
        et = epochs_to_reach(by[treatment, s].history, threshold)
        ec = epochs_to_reach(by[control, s].history, threshold)
        faster.append(et is not None and et < ec)
    return {
        "treatment": treatment,
        "control": control,
        "seeds": seeds,
        "treatment_cider": t.tolist(),
        "control_cider": c.tolist(),
        "treatment_mean": float(t.mean()),
        "control_mean": float(c.mean()),
        "wins": int((t > c).sum()),
        "faster_to_control_best": int(sum(faster)),
        "n": len(seeds),
    }


# ---------------------------------------------------------------------------
# subset sizes


def subset_indices(n: int, size: int, base_seed: int) -> np.ndarray:
    """Sample ``size`` of ``n`` studies without replacement; identity when size == n."""
    if not 0 < size <= n:
        raise ValueError(f"subset size must be in [1, {n}], got {size}")
    if size == n:
        return np.arange(n)
    rng = np.random.default_rng([base_seed, size])
    return np.sort(rng.choice(n, size=size, replace=False))


@dataclass
class SubsetRun:
    size: int
    seed: int
    best_val_cider: float
    best_epoch: int
    checkpoint: Checkpoint = field(repr=False)
    test_hypotheses: Optional[List[str]] = field(default=None, repr=False)

    def row(self) -> dict:
        return {"size": self.size, "seed": self.seed, "best_val_cider": self.best_val_cider, "best_epoch": self.best_epoch}


def subset_experiment(
    enc: EncoderConfig,
    dec: DecoderConfig,
    train: Split,
    val: Split,
    vocab: Vocabulary,
    sizes: Sequence[int],
    runs_per_size: int,
    base_seed: int = 0,
    cfg: TrainConfig = TrainConfig(),
    checkpoints: Optional[Dict[str, Checkpoint]] = None,
    test: Optional[Split] = None,
    callback: Optional[Callable[[SubsetRun], None]] = None,
) -> List[SubsetRun]:
    """Train ``runs_per_size`` seeds on one shared random subset per size.

    ``checkpoints`` may hold "classification" and/or "lm"/"mlm" warm starts.
    The returned table has ``len(sizes) * runs_per_size`` rows.
    """
    if runs_per_size < 1:
        raise ValueError("runs_per_size must be >= 1")
    checkpoints = checkpoints or {}
    enc_ck = checkpoints.get("classification")
    dec_ck = checkpoints.get("lm", checkpoints.get("mlm"))
    rows = []
    for size in sizes:
        sub = train.subset(subset_indices(len(train), size, base_seed))
        for k in range(runs_per_size):
            seed = base_seed * 1000 + k
            model = build_captioner(enc, dec, vocab, seed)
            res = finetune(model, sub, val, vocab, TrainConfig(**{**cfg.to_dict(), "seed": seed}), enc_ck, dec_ck)
            hyps = None
            if test is not None:
                best, _ = load_captioner(res.checkpoint)
                hyps = decode_split(best, test, vocab, cfg.test_beam, cfg.max_decode_len)
            row = SubsetRun(size, seed, res.best_val_cider, res.best_epoch, res.checkpoint, hyps)
            log.info("subset run %s", row.row())
            rows.append(row)
            if callback:
                callback(row)
    return rows
