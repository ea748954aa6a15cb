"""Encoder-to-decoder report generator.

Each view of a study is encoded independently to S x F features, the views are
concatenated along the position axis (D = S * N), projected to the decoder
width with a learned F x H matrix, and consumed by the decoder's
cross-attention.
"""

from __future__ import annotations

import hashlib
import json
import math
import uuid
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .corpus import ObservationAnnotation, Vocabulary
from .decoder import DecoderConfig, StaleStateError, TextDecoder, TokenSequence
from .encoder import EncoderConfig, VisionEncoder, VisualFeatures
from .nn import Linear, Module

ATTENTION_FORMAT = "warmcap-attention/1"


def _digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def encoder_fingerprint(cfg: EncoderConfig) -> str:
    d = cfg.to_dict()
    d.pop("channel_mean")
    d.pop("channel_std")
    return _digest({"encoder": d})


def decoder_fingerprint(cfg: DecoderConfig) -> str:
    """Fingerprint of the transformer body; cross-attention and dropout do not change it."""
    d = cfg.to_dict()
    d.pop("dropout")
    d.pop("cross_attention")
    return _digest({"decoder": d})


def model_fingerprint(enc: EncoderConfig, dec: DecoderConfig, projection_bias: bool = True) -> str:
    return _digest(
        {"encoder": encoder_fingerprint(enc), "decoder": decoder_fingerprint(dec), "projection_bias": projection_bias}
    )


@dataclass
class Study:
    """One example: 1..N model-ready views (C x W x W), its report and latent annotation."""

    images: List[np.ndarray]
    ground_truth: Optional[TokenSequence] = None
    latent: Optional[ObservationAnnotation] = None
    id: str = ""

    def __post_init__(self):
        if not self.images:
            raise ShapeError("a study needs at least one image")
        shapes = {np.shape(im) for im in self.images}
        if len(shapes) != 1:
            raise ShapeError(f"all views of a study must share C, W, H; got {sorted(shapes)}")

    @property
    def num_views(self) -> int:
        return len(self.images)


def concat_views(features: Sequence[Union[VisualFeatures, np.ndarray]]) -> np.ndarray:
    """Stack per-view S x F grids along the position axis into D x F."""
    grids = [f.grid if isinstance(f, VisualFeatures) else np.asarray(f) for f in features]
    if not grids:
        raise ShapeError("no views to concatenate")
    widths = {g.shape[1] for g in grids}
    if len(widths) != 1:
        raise ShapeError(f"views disagree on feature width: {sorted(widths)}")
    if len(grids) == 1:
        return grids[0]
    return np.concatenate(grids, axis=0)


def project_features(v_concat, projection: Linear):
    """D x F -> D x H via the learned projection (matrix product plus optional bias)."""
    v = v_concat if isinstance(v_concat, Tensor) else Tensor(v_concat)
    if v.shape[-1] != projection.weight.shape[0]:
        raise ShapeError(f"features of width {v.shape[-1]} do not match projection {projection.weight.shape}")
    return projection(v)


class Captioner(Module):
    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        seed: int = 0,
        projection_bias: bool = True,
        bos_id: int = 1,
        eos_id: int = 2,
    ):
        enc_seq, proj_seq, dec_seq = np.random.SeedSequence(seed).spawn(3)
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.projection_bias = projection_bias
        self.seed = seed
        self.encoder = VisionEncoder(encoder_config, np.random.default_rng(enc_seq))
        self.projection = Linear(
            encoder_config.feature_dim, decoder_config.hidden, np.random.default_rng(proj_seq), bias=projection_bias
        )
        self.decoder = TextDecoder(decoder_config, np.random.default_rng(dec_seq), bos_id, eos_id)
        self.identity = uuid.uuid4().hex
        self.version = 0

    @property
    def fingerprint(self) -> str:
        return model_fingerprint(self.encoder_config, self.decoder_config, self.projection_bias)

    def bump_version(self) -> None:
        self.version += 1
        self.decoder.bump_version()

    def load_state_dict(self, state, strict: bool = True):
        loaded = super().load_state_dict(state, strict)
        self.bump_version()
        return loaded

    # -- forward ----------------------------------------------------------
    def _images(self, images) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 4:
            arr = arr[:, None]
        cfg = self.encoder_config
        expected = (cfg.channels, cfg.image_width, cfg.image_width)
        if arr.ndim != 5 or arr.shape[2:] != expected:
            raise ShapeError(f"expected images (B, N, {expected}), got {arr.shape}")
        return arr

    def visual_features(self, images) -> Tensor:
        """(B, N, C, W, W) -> projected features (B, D, H) with D = N * S."""
        arr = self._images(images)
        b, n = arr.shape[:2]
        feats = self.encoder(Tensor(arr.reshape(b * n, *arr.shape[2:])))
        s, f = feats.shape[1:]
        v_concat = feats.reshape(b, n * s, f) if n > 1 else feats
        return project_features(v_concat, self.projection)

    def forward(self, images, ids, return_cross: bool = False):
        return self.decoder(ids, self.visual_features(images), return_cross=return_cross)

    # -- generation -------------------------------------------------------
    def _study_images(self, study: Study) -> np.ndarray:
        return np.stack(study.images)[None]

    def generate(self, images, mode: Union[str, Tuple[str, int]] = "greedy", max_len: Optional[int] = None):
        """Decode one (N, C, W, W) study; ``mode`` is "greedy" or ("beam", b)."""
        self.eval()
        with ad.no_grad():
            visual = self.visual_features(np.asarray(images)[None])
        if mode == "greedy":
            return self.decoder.greedy_decode(visual, max_len)
        kind, width = mode
        if kind != "beam":
            raise ValueError(f"unknown decoding mode {mode!r}")
        return self.decoder.beam_decode(visual, int(width), max_len)

    def generate_batch(self, images, max_len: Optional[int] = None, chunk: int = 64) -> List[TokenSequence]:
        """Greedy decoding of a (B, N, C, W, W) batch."""
        self.eval()
        arr = self._images(images)
        out = []
        for start in range(0, arr.shape[0], chunk):
            with ad.no_grad():
                visual = self.visual_features(arr[start : start + chunk])
            out.extend(self.decoder.greedy_decode_batch(visual, max_len))
        return out


def generate_report(
    model: Captioner,
    study: Study,
    vocab: Vocabulary,
    mode: Union[str, Tuple[str, int]] = "greedy",
    max_len: Optional[int] = None,
) -> TokenSequence:
    seq = model.generate(np.stack(study.images), mode, max_len)
    seq.text = vocab.detokenize(seq.ids)
    seq.provenance = (model.identity, model.version, study.id)
    return seq


def scale_attention(weights: np.ndarray) -> np.ndarray:
    """Min-max normalise a map, then apply a -> exp(1 - 1/a) with a = 0 -> 0.

    A constant map has no range and is defined as all zeros.
    """
    w = np.asarray(weights, dtype=np.float64)
    lo, hi = w.min(), w.max()
    if hi <= lo:
        return np.zeros_like(w)
    a = (w - lo) / (hi - lo)
    out = np.zeros_like(a)
    pos = a > 0
    with np.errstate(over="ignore"):  # tiny a: 1/a -> inf, exp -> 0
        out[pos] = np.exp(1.0 - 1.0 / a[pos])
    return out


@dataclass
class AttentionRecord:
    token_index: int
    token: str
    layer: int
    head: int
    views: int
    rows: int
    cols: int
    raw: List[float]
    scaled: List[float]

    def to_json(self) -> dict:
        return {
            "format": ATTENTION_FORMAT,
            "token_index": self.token_index,
            "token": self.token,
            "layer": self.layer,
            "head": self.head,
            "views": self.views,
            "rows": self.rows,
            "cols": self.cols,
            "raw": self.raw,
            "scaled": self.scaled,
        }


def export_attention(model: Captioner, study: Study, report: TokenSequence, vocab: Vocabulary) -> List[AttentionRecord]:
    """Cross-attention maps for every generated token, layer and head.

    The report must have been generated by this model, in its current state,
    for this study.
    """
    if report.provenance != (model.identity, model.version, study.id):
        raise StaleStateError("report was not generated by this model state for this study")
    ids = [model.decoder.bos_id] + list(report.ids)
    emitted = list(report.ids) + ([model.decoder.eos_id] if report.finished else [])
    ids = ids[: len(emitted)]
    model.eval()
    with ad.no_grad():
        _, cross = model.forward(np.stack(study.images)[None], np.array([ids]), return_cross=True)
    rows, cols = model.encoder_config.grid
    n = study.num_views
    records = []
    for t, tok in enumerate(emitted):
        word = vocab.id_to_word(tok)
        for layer, w in enumerate(cross):
            for head in range(w.shape[1]):
                raw = w.data[0, head, t]
                records.append(
                    AttentionRecord(t, word, layer, head, n, rows, cols, raw.tolist(), scale_attention(raw).tolist())
                )
    return records


def write_attention(records: Sequence[AttentionRecord], path, header: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"format": ATTENTION_FORMAT, "header": header}, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_attention(path) -> Tuple[Optional[dict], List[dict]]:
    header, records = None, []
    with open(path) as fh:
        for line in fh:
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                records.append(obj)
    return header, records
