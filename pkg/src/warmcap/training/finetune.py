"""Teacher-forced fine-tuning of the captioner with early stopping on validation CIDEr."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..captioner import Captioner, decoder_fingerprint, encoder_fingerprint, model_fingerprint
from ..corpus import Vocabulary
from ..decoder import DecoderConfig
from ..encoder import EncoderConfig
from ..metrics.nlg import Cider
from .checkpoint import Checkpoint, CheckpointError, FingerprintMismatch, load_into
from .data import Split, batches, encode_reports, teacher_forcing_batch
from .optim import AdamW, split_groups

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_encoder: float = 1e-5
    lr_other: float = 1e-4
    batch_size: int = 16
    patience: int = 10
    min_delta: float = 1e-4
    monitor: str = "val_cider"
    max_epochs: int = 40
    seed: int = 0
    val_beam: int = 1
    test_beam: int = 4
    weight_decay: float = 0.01
    max_decode_len: Optional[int] = None

    def __post_init__(self):
        if self.lr_encoder <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.monitor != "val_cider":
            raise ValueError(f"only 'val_cider' can be monitored, got {self.monitor!r}")
        if self.val_beam < 1 or self.test_beam < 1:
            raise ValueError("beam sizes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best by more than ``min_delta``."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-4):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch's value; returns True when training should stop."""
        self.epoch += 1
        if value > self.best + self.min_delta:
            self.best, self.best_epoch, self.wait = value, self.epoch, 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def parameter_groups(model: Captioner, cfg: TrainConfig):
    """Encoder parameters at ``lr_encoder``; projection, cross-attention and decoder at ``lr_other``."""
    return split_groups(
        model.named_parameters(),
        [
            ("encoder", lambda n: n.startswith("encoder."), cfg.lr_encoder),
            ("other", lambda n: True, cfg.lr_other),
        ],
        cfg.weight_decay,
    )


CROSS_ATTENTION_PARTS = ("crossattention.", "ln_cross_attn.")


def _is_cross(name: str) -> bool:
    return any(part in name for part in CROSS_ATTENTION_PARTS)


def warm_start(
    model: Captioner,
    vocab: Vocabulary,
    encoder_ckpt: Optional[Checkpoint] = None,
    decoder_ckpt: Optional[Checkpoint] = None,
) -> Dict[str, List[str]]:
    """Load pretrained encoder and/or decoder-body parameters into a fresh captioner.

    Cross-attention and the projection keep their initialisation from the run
    seed. Returns the loaded names per component.
    """
    loaded: Dict[str, List[str]] = {}
    if encoder_ckpt is not None:
        if encoder_ckpt.metadata.get("component", "encoder") != "encoder":
            raise CheckpointError("expected an encoder checkpoint")
        loaded["encoder"] = load_into(
            model.encoder, encoder_ckpt, encoder_fingerprint(model.encoder_config), model.encoder_config.to_dict()
        )
    if decoder_ckpt is not None:
        if decoder_ckpt.metadata.get("component", "decoder") != "decoder":
            raise CheckpointError("expected a decoder checkpoint")
        stored_vocab = decoder_ckpt.metadata.get("vocab")
        if stored_vocab is not None and Vocabulary.from_dict(stored_vocab) != vocab:
            raise CheckpointError("decoder checkpoint was trained with a different vocabulary")
        own_cross = [n for n, _ in model.decoder.named_parameters() if _is_cross(n)]
        prefixes = sorted({n[: n.index(p) + len(p)] for n in own_cross for p in CROSS_ATTENTION_PARTS if p in n})
        loaded["decoder"] = load_into(
            model.decoder,
            decoder_ckpt,
            decoder_fingerprint(model.decoder_config),
            model.decoder_config.body().to_dict(),
            allow_missing=prefixes,
        )
    model.bump_version()
    return loaded


def decode_split(model: Captioner, split: Split, vocab: Vocabulary, beam: int = 1, max_len=None, chunk: int = 64) -> List[str]:
    """Generated report text for every study (batched greedy, or per-study beam search)."""
    model.eval()
    texts = []
    if beam == 1:
        for idx in batches(len(split), chunk):
            for seq in model.generate_batch(split.images(idx), max_len):
                texts.append(vocab.detokenize(seq.ids))
    else:
        for i in range(len(split)):
            seq = model.generate(split.images([i])[0], ("beam", beam), max_len)
            texts.append(vocab.detokenize(seq.ids))
    return texts


def validation_cider(model: Captioner, split: Split, vocab: Vocabulary, beam: int = 1, max_len=None) -> Tuple[float, List[str]]:
    hyps = decode_split(model, split, vocab, beam, max_len)
    _, mean = Cider(split.reports).score_corpus(hyps, split.reports)
    return mean, hyps


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: List[dict]
    best_epoch: int
    best_val_cider: float
    stopped_epoch: int
    model: Optional[Captioner] = None


def build_captioner(enc: EncoderConfig, dec: DecoderConfig, vocab: Vocabulary, seed: int) -> Captioner:
    if dec.vocab_size != len(vocab):
        from dataclasses import replace

        dec = replace(dec, vocab_size=len(vocab))
    return Captioner(enc, dec, seed=seed, bos_id=vocab.bos_id, eos_id=vocab.eos_id)


def captioner_metadata(model: Captioner, vocab: Vocabulary, **extra) -> dict:
    meta = {
        "task": "captioning",
        "component": "captioner",
        "config": {
            "encoder": model.encoder_config.to_dict(),
            "decoder": model.decoder_config.to_dict(),
            "projection_bias": model.projection_bias,
        },
        "vocab": vocab.to_dict(),
    }
    meta.update(extra)
    return meta


def load_captioner(ckpt: Checkpoint) -> Tuple[Captioner, Vocabulary]:
    """Rebuild a captioner and its vocabulary from a fine-tuned checkpoint."""
    if ckpt.metadata.get("component") != "captioner":
        raise CheckpointError(f"expected a captioner checkpoint, got {ckpt.metadata.get('component')!r}")
    cfg = ckpt.metadata["config"]
    enc = EncoderConfig.from_dict(cfg["encoder"])
    dec = DecoderConfig.from_dict(cfg["decoder"])
    vocab = Vocabulary.from_dict(ckpt.metadata["vocab"])
    model = Captioner(enc, dec, seed=int(ckpt.metadata.get("seed", 0)), projection_bias=cfg["projection_bias"],
                      bos_id=vocab.bos_id, eos_id=vocab.eos_id)
    load_into(model, ckpt, model.fingerprint)
    model.bump_version()
    return model, vocab


def finetune(
    model: Captioner,
    train: Split,
    val: Split,
    vocab: Vocabulary,
    cfg: TrainConfig = TrainConfig(),
    encoder_ckpt: Optional[Checkpoint] = None,
    decoder_ckpt: Optional[Checkpoint] = None,
    history_path=None,
    callback: Optional[Callable[[dict], None]] = None,
) -> FinetuneResult:
    """Train with teacher forcing; keep the epoch with the highest validation CIDEr."""
    loaded = warm_start(model, vocab, encoder_ckpt, decoder_ckpt)
    seqs = encode_reports(train.reports, vocab)
    opt = AdamW(parameter_groups(model, cfg))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 404]))
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    history: List[dict] = []
    best: Optional[Checkpoint] = None
    best_cider = -np.inf
    positions = model.decoder.config.n_positions
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            losses = []
            for idx in batches(len(train), cfg.batch_size, rng):
                inputs, targets = teacher_forcing_batch([seqs[i] for i in idx], vocab, positions)
                logits = model(train.images(idx, rng), inputs)
                loss = ad.cross_entropy(logits, targets, ignore_id=vocab.pad_id)
                opt.zero_grad()
                loss.backward()
                opt.step()
                model.bump_version()
                losses.append(float(loss.data))
            cider, _ = validation_cider(model, val, vocab, cfg.val_beam, cfg.max_decode_len)
            rec = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_cider": float(cider),
                "wall_time": time.perf_counter() - t0,
            }
            history.append(rec)
            if fh is not None:
                line = dict(rec, fingerprint=model.fingerprint, seed=cfg.seed)
                fh.write(json.dumps(line, sort_keys=True) + "\n")
                fh.flush()
            log.info("finetune seed=%d %s", cfg.seed, rec)
            if callback:
                callback(rec)
            if cider > best_cider:
                best_cider = cider
                best = Checkpoint.from_module(
                    model,
                    model.fingerprint,
                    captioner_metadata(
                        model,
                        vocab,
                        epoch=epoch,
                        val_cider=float(cider),
                        seed=cfg.seed,
                        warm_start={k: len(v) for k, v in loaded.items()},
                        encoder_task=encoder_ckpt.task if encoder_ckpt else "none",
                        decoder_task=decoder_ckpt.task if decoder_ckpt else "none",
                    ),
                )
            if stopper.update(cider):
                break
    finally:
        if fh is not None:
            fh.close()
    best_epoch = int(np.argmax([h["val_cider"] for h in history])) + 1
    return FinetuneResult(best, history, best_epoch, float(best_cider), len(history), model)


def epochs_to_reach(history: Sequence[dict], threshold: float) -> Optional[int]:
    """First epoch whose validation CIDEr is at least ``threshold`` (None if never)."""
    for rec in history:
        if rec["val_cider"] >= threshold:
            return int(rec["epoch"])
    return None
