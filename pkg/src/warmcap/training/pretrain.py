"""Pretraining tasks that produce warm-start checkpoints.

* encoder: multi-label classification of the 14 observations from mean-pooled
  visual features (the head is thrown away at save time);
* decoder: next-token language modelling, or masked-token reconstruction with
  bidirectional attention. Both train the decoder body without
  cross-attention, so either checkpoint loads into the captioner's decoder.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..captioner import decoder_fingerprint, encoder_fingerprint
from ..corpus import Vocabulary
from ..decoder import DecoderConfig, TextDecoder
from ..encoder import EncoderConfig, VisionEncoder
from ..nn import Linear, Module, fan_in_std
from .checkpoint import Checkpoint
from .data import Split, batches, encode_reports, teacher_forcing_batch
from .optim import AdamW, ParamGroup

log = logging.getLogger(__name__)

PRETRAIN_LR = 1e-3
MASK_RATE = 0.15


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = PRETRAIN_LR
    batch_size: int = 16
    seed: int = 0
    mask_rate: float = MASK_RATE

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if not 0 <= self.mask_rate <= 1:
            raise ValueError(f"mask_rate must be in [0, 1], got {self.mask_rate}")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    history: List[dict] = field(default_factory=list)
    model: Optional[Module] = None


def _optimizer(module: Module, lr: float) -> AdamW:
    return AdamW([ParamGroup("all", list(module.named_parameters()), lr)])


# ---------------------------------------------------------------------------
# encoder


class PooledClassifier(Module):
    """Encoder plus a temporary linear head on the mean over positions."""

    def __init__(self, encoder: VisionEncoder, n_labels: int, rng: np.random.Generator):
        self.encoder = encoder
        self.head = Linear(encoder.config.feature_dim, n_labels, rng, std=fan_in_std(encoder.config.feature_dim))

    def forward(self, images) -> ad.Tensor:
        feats = self.encoder(images if isinstance(images, ad.Tensor) else ad.Tensor(images))
        return self.head(ad.reduce_mean(feats, axis=1))


def _views_first(images: np.ndarray) -> np.ndarray:
    b, n = images.shape[:2]
    return images.reshape(b * n, *images.shape[2:])


def split_logits(model: PooledClassifier, split: Split, batch_size: int = 64) -> np.ndarray:
    """(n, 14) logits from the first view of every study."""
    model.eval()
    out = []
    for idx in batches(len(split), batch_size):
        with ad.no_grad():
            out.append(model(split.images(idx)[:, 0]).data)
    return np.concatenate(out)


def classification_accuracy(model: PooledClassifier, split: Split, batch_size: int = 64) -> float:
    """Per-label accuracy at threshold 0.5 (logit 0), first view of every study."""
    logits = split_logits(model, split, batch_size)
    return float(((logits > 0) == (split.labels() > 0.5)).mean())


def majority_accuracy(split: Split) -> float:
    """Accuracy of predicting each label's majority value."""
    y = split.labels()
    p = y.mean(axis=0)
    return float(np.maximum(p, 1 - p).mean())


def pretrain_encoder_classification(
    config: EncoderConfig,
    train: Split,
    cfg: PretrainConfig = PretrainConfig(),
    val: Optional[Split] = None,
    encoder: Optional[VisionEncoder] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> PretrainResult:
    enc_seq, head_seq, data_seq = np.random.SeedSequence([cfg.seed, 101]).spawn(3)
    encoder = encoder or VisionEncoder(config, np.random.default_rng(enc_seq))
    model = PooledClassifier(encoder, train.labels([0]).shape[1], np.random.default_rng(head_seq))
    opt = _optimizer(model, cfg.lr)
    rng = np.random.default_rng(data_seq)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for idx in batches(len(train), cfg.batch_size, rng):
            imgs = _views_first(train.images(idx, rng))
            y = np.repeat(train.labels(idx), imgs.shape[0] // len(idx), axis=0)
            loss = ad.binary_cross_entropy_with_logits(model(imgs), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val is not None:
            rec["val_accuracy"] = classification_accuracy(model, val)
        rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        log.info("encoder pretraining %s", rec)
        if callback:
            callback(rec)
    meta = {
        "task": "classification",
        "component": "encoder",
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "config": config.to_dict(),
        "val_accuracy": history[-1].get("val_accuracy") if history else None,
    }
    return PretrainResult(Checkpoint.from_module(encoder, encoder_fingerprint(config), meta), history, model)


# ---------------------------------------------------------------------------
# decoder


def _decoder_meta(task: str, config: DecoderConfig, cfg: PretrainConfig, vocab: Vocabulary, history) -> dict:
    return {
        "task": task,
        "component": "decoder",
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "config": config.body().to_dict(),
        "vocab": vocab.to_dict(),
        "final": {k: v for k, v in history[-1].items() if k != "wall_time"} if history else None,
    }


def _new_body(config: DecoderConfig, vocab: Vocabulary, seed_seq) -> TextDecoder:
    body = config.body()
    if body.vocab_size != len(vocab):
        raise ValueError(f"decoder vocab_size {body.vocab_size} does not match vocabulary of {len(vocab)}")
    return TextDecoder(body, np.random.default_rng(seed_seq), vocab.bos_id, vocab.eos_id)


def lm_loss(decoder: TextDecoder, seqs: Sequence[Sequence[int]], vocab: Vocabulary) -> ad.Tensor:
    inputs, targets = teacher_forcing_batch(seqs, vocab, decoder.config.n_positions)
    return ad.cross_entropy(decoder(inputs), targets, ignore_id=vocab.pad_id)


def perplexity(decoder: TextDecoder, seqs: Sequence[Sequence[int]], vocab: Vocabulary, batch_size: int = 64) -> float:
    decoder.eval()
    total = count = 0.0
    for idx in batches(len(seqs), batch_size):
        inputs, targets = teacher_forcing_batch([seqs[i] for i in idx], vocab, decoder.config.n_positions)
        with ad.no_grad():
            loss = ad.cross_entropy(decoder(inputs), targets, ignore_id=vocab.pad_id)
        n = int((targets != vocab.pad_id).sum())
        total += float(loss.data) * n
        count += n
    return float(np.exp(total / count))


def pretrain_decoder_lm(
    config: DecoderConfig,
    reports: Sequence[str],
    vocab: Vocabulary,
    cfg: PretrainConfig = PretrainConfig(),
    val_reports: Optional[Sequence[str]] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> PretrainResult:
    """Next-token prediction on reports; the body has no cross-attention."""
    dec_seq, data_seq = np.random.SeedSequence([cfg.seed, 202]).spawn(2)
    decoder = _new_body(config, vocab, dec_seq)
    seqs = encode_reports(reports, vocab)
    val_seqs = encode_reports(val_reports, vocab) if val_reports else None
    opt = _optimizer(decoder, cfg.lr)
    rng = np.random.default_rng(data_seq)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        decoder.train()
        losses = []
        for idx in batches(len(seqs), cfg.batch_size, rng):
            loss = lm_loss(decoder, [seqs[i] for i in idx], vocab)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_seqs:
            rec["val_perplexity"] = perplexity(decoder, val_seqs, vocab)
        rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        log.info("decoder LM pretraining %s", rec)
        if callback:
            callback(rec)
    meta = _decoder_meta("lm", config, cfg, vocab, history)
    return PretrainResult(Checkpoint.from_module(decoder, decoder_fingerprint(config), meta), history, decoder)


def mask_tokens(seqs: Sequence[Sequence[int]], vocab: Vocabulary, rate: float, rng: np.random.Generator, max_positions: int):
    """Bidirectional inputs [BOS] ids [EOS] with a ``rate`` fraction of word tokens replaced by MASK.

    Targets hold the original id at masked positions and PAD elsewhere.
    """
    rows = [[vocab.bos_id] + list(s)[: max_positions - 2] + [vocab.eos_id] for s in seqs]
    t = max(len(r) for r in rows)
    inputs = np.full((len(rows), t), vocab.pad_id, dtype=np.int64)
    targets = np.full((len(rows), t), vocab.pad_id, dtype=np.int64)
    for k, r in enumerate(rows):
        inputs[k, : len(r)] = r
        for j in range(1, len(r) - 1):
            if rng.random() < rate:
                targets[k, j] = r[j]
                inputs[k, j] = vocab.mask_id
    return inputs, targets


def mlm_loss(decoder: TextDecoder, inputs: np.ndarray, targets: np.ndarray, vocab: Vocabulary) -> ad.Tensor:
    return ad.cross_entropy(decoder(inputs, causal=False), targets, ignore_id=vocab.pad_id)


def mlm_accuracy(decoder: TextDecoder, seqs, vocab: Vocabulary, rate: float, seed: int = 0, batch_size: int = 64) -> float:
    """Fraction of masked positions reconstructed exactly (fixed masking stream)."""
    decoder.eval()
    rng = np.random.default_rng(seed)
    correct = total = 0
    for idx in batches(len(seqs), batch_size):
        inputs, targets = mask_tokens([seqs[i] for i in idx], vocab, rate, rng, decoder.config.n_positions)
        with ad.no_grad():
            pred = decoder(inputs, causal=False).data.argmax(-1)
        keep = targets != vocab.pad_id
        correct += int((pred[keep] == targets[keep]).sum())
        total += int(keep.sum())
    return correct / total if total else 0.0


def pretrain_decoder_mlm(
    config: DecoderConfig,
    reports: Sequence[str],
    vocab: Vocabulary,
    cfg: PretrainConfig = PretrainConfig(),
    val_reports: Optional[Sequence[str]] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> PretrainResult:
    """Masked-token reconstruction with unmasked (bidirectional) self-attention."""
    dec_seq, data_seq = np.random.SeedSequence([cfg.seed, 303]).spawn(2)
    decoder = _new_body(config, vocab, dec_seq)
    seqs = encode_reports(reports, vocab)
    val_seqs = encode_reports(val_reports, vocab) if val_reports else None
    opt = _optimizer(decoder, cfg.lr)
    rng = np.random.default_rng(data_seq)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        decoder.train()
        losses = []
        for idx in batches(len(seqs), cfg.batch_size, rng):
            inputs, targets = mask_tokens([seqs[i] for i in idx], vocab, cfg.mask_rate, rng, decoder.config.n_positions)
            loss = mlm_loss(decoder, inputs, targets, vocab)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_seqs and cfg.mask_rate > 0:
            rec["val_mask_accuracy"] = mlm_accuracy(decoder, val_seqs, vocab, cfg.mask_rate)
        rec["wall_time"] = time.perf_counter() - t0
        history.append(rec)
        log.info("decoder MLM pretraining %s", rec)
        if callback:
            callback(rec)
    meta = _decoder_meta("mlm", config, cfg, vocab, history)
    return PretrainResult(Checkpoint.from_module(decoder, decoder_fingerprint(config), meta), history, decoder)
