"""In-memory splits: resized images, token ids and annotations, plus batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from ..corpus import (
    MAX_ROTATION_DEG,
    RESIZE_MARGIN,
    ObservationAnnotation,
    StudyRecord,
    Vocabulary,
    crop,
    load_split,
    preprocess_report,
    resize_smallest_side,
    rotate,
)
from ..encoder import EncoderConfig
from ..metrics.ce import binarize, extract_observations


@dataclass
class Split:
    """One split prepared for a given image width.

    ``resized`` holds each view resized so its smallest side is W + margin
    (float32, [0, 1]); cropping, rotation and standardisation happen per batch.
    """

    ids: List[str]
    reports: List[str]
    annotations: List[ObservationAnnotation]
    resized: np.ndarray  # (n, views, H', W')
    width: int
    mean: np.ndarray
    std: np.ndarray
    targets: Optional[np.ndarray] = None  # overrides the annotation-derived labels

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: Sequence[StudyRecord], cfg: EncoderConfig, margin: int = RESIZE_MARGIN) -> "Split":
        if not records:
            raise ValueError("empty split")
        side = cfg.image_width + margin
        resized = np.stack(
            [np.stack([resize_smallest_side(im / 255.0, side) for im in rec.load_images()]) for rec in records]
        ).astype(np.float32)
        return cls(
            [r.id for r in records],
            [preprocess_report(r.report) for r in records],
            [r.annotation for r in records],
            resized,
            cfg.image_width,
            np.asarray(cfg.channel_mean, dtype=np.float64),
            np.asarray(cfg.channel_std, dtype=np.float64),
        )

    @classmethod
    def from_arrays(
        cls, images, reports: Sequence[str], cfg: EncoderConfig, ids: Optional[Sequence[str]] = None, margin: int = RESIZE_MARGIN
    ) -> "Split":
        """Split from raw 8-bit views shaped (n, views, H, W); annotations come from the reports' labels."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4:
            raise ValueError(f"images must be (n, views, H, W), got shape {images.shape}")
        if len(images) != len(reports) or len(images) == 0:
            raise ValueError(f"{len(images)} studies but {len(reports)} reports")
        side = cfg.image_width + margin
        resized = np.stack(
            [np.stack([resize_smallest_side(im / 255.0, side) for im in views]) for views in images.astype(np.float64)]
        ).astype(np.float32)
        reports = [preprocess_report(r) for r in reports]
        return cls(
            [str(i) for i in ids] if ids is not None else [str(i) for i in range(len(reports))],
            reports,
            [extract_observations(r) for r in reports],
            resized,
            cfg.image_width,
            np.asarray(cfg.channel_mean, dtype=np.float64),
            np.asarray(cfg.channel_std, dtype=np.float64),
        )

    @classmethod
    def load(cls, root, split: str, cfg: EncoderConfig) -> "Split":
        return cls.from_records(load_split(root, split), cfg)

    def subset(self, index: Sequence[int]) -> "Split":
        index = list(index)
        return Split(
            [self.ids[i] for i in index],
            [self.reports[i] for i in index],
            [self.annotations[i] for i in index],
            self.resized[index],
            self.width,
            self.mean,
            self.std,
            None if self.targets is None else self.targets[index],
        )

    def images(self, index: Sequence[int], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """(B, views, C, W, W) standardised images; augmented when ``rng`` is given."""
        out = []
        for i in index:
            views = []
            for src in self.resized[i]:
                img = crop(src.astype(np.float64), self.width, rng)
                if rng is not None:
                    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
                    img = rotate(img, angle, float(img.mean()))
                img = np.broadcast_to(img, (len(self.mean),) + img.shape)
                views.append((img - self.mean[:, None, None]) / self.std[:, None, None])
            out.append(np.stack(views))
        return np.stack(out)

    def labels(self, index: Optional[Sequence[int]] = None) -> np.ndarray:
        if self.targets is not None:
            return self.targets if index is None else self.targets[np.asarray(index)]
        index = range(len(self)) if index is None else index
        return np.stack([binarize(self.annotations[i]) for i in index]).astype(np.float64)


def encode_reports(reports: Sequence[str], vocab: Vocabulary) -> List[List[int]]:
    return [vocab.tokenize(r) for r in reports]


def teacher_forcing_batch(seqs: Sequence[Sequence[int]], vocab: Vocabulary, max_positions: int):
    """Inputs [BOS] + ids and targets ids + [EOS], right-padded with PAD and clipped to the context."""
    rows = [list(s)[: max_positions - 1] for s in seqs]
    t = max(len(r) for r in rows) + 1
    inputs = np.full((len(rows), t), vocab.pad_id, dtype=np.int64)
    targets = np.full((len(rows), t), vocab.pad_id, dtype=np.int64)
    for k, r in enumerate(rows):
        inputs[k, : len(r) + 1] = [vocab.bos_id] + r
        targets[k, : len(r) + 1] = r + [vocab.eos_id]
    return inputs, targets


def batches(n: int, size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start : start + size]
