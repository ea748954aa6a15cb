"""scikit-learn style wrappers around the captioner and the encoder pretrainer."""

from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import Vocabulary, build_vocab, preprocess_report
from .decoder import DECODER_PRESETS
from .encoder import PRESETS
from .metrics.nlg import Cider
from .training.checkpoint import Checkpoint
from .training.data import Split
from .training.finetune import TrainConfig, build_captioner, decode_split, finetune, load_captioner
from .training.pretrain import PretrainConfig, pretrain_encoder_classification, split_logits


def _check_reports(y, n: int) -> List[str]:
    if isinstance(y, str):
        raise TypeError("y must be a sequence of report strings, not a single string")
    y = [str(r) for r in y]
    if len(y) != n:
        raise ValueError(f"X has {n} studies but y has {len(y)} reports")
    return y


def _holdout(n: int, fraction: float, seed: int):
    if not 0 < fraction < 1:
        raise ValueError(f"validation_fraction must be in (0, 1), got {fraction}")
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise ValueError(f"{n} studies are too few to hold out a validation set")
    order = np.random.default_rng([seed, 77]).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


class ReportGenerator(BaseEstimator):
    """Image-to-report captioner with optional warm starting.

    ``fit(X, y)`` takes raw 8-bit views shaped (n, views, H, W) and report
    strings. Without ``X_val``, a ``validation_fraction`` of the studies is held
    out to monitor validation CIDEr. ``predict`` returns report strings.
    """

    def __init__(
        self,
        encoder="cvt-mini",
        decoder="toy",
        encoder_checkpoint=None,
        decoder_checkpoint=None,
        lr_encoder=1e-5,
        lr_other=1e-4,
        batch_size=16,
        patience=10,
        min_delta=1e-4,
        max_epochs=40,
        beam=4,
        validation_fraction=0.15,
        random_state=0,
    ):
        self.encoder = encoder
        self.decoder = decoder
        self.encoder_checkpoint = encoder_checkpoint
        self.decoder_checkpoint = decoder_checkpoint
        self.lr_encoder = lr_encoder
        self.lr_other = lr_other
        self.batch_size = batch_size
        self.patience = patience
        self.min_delta = min_delta
        self.max_epochs = max_epochs
        self.beam = beam
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _configs(self):
        if self.encoder not in PRESETS:
            raise ValueError(f"unknown encoder preset {self.encoder!r}")
        if self.decoder not in DECODER_PRESETS:
            raise ValueError(f"unknown decoder preset {self.decoder!r}")
        return PRESETS[self.encoder], DECODER_PRESETS[self.decoder]

    @staticmethod
    def _checkpoint(ck) -> Optional[Checkpoint]:
        if ck is None or isinstance(ck, Checkpoint):
            return ck
        return Checkpoint.load(ck)

    def fit(self, X, y, X_val=None, y_val=None):
        enc, dec = self._configs()
        X = np.asarray(X)
        y = _check_reports(y, len(X))
        if X_val is None:
            tr, va = _holdout(len(X), self.validation_fraction, self.random_state)
            train = Split.from_arrays(X[tr], [y[i] for i in tr], enc)
            val = Split.from_arrays(X[va], [y[i] for i in va], enc)
        else:
            X_val = np.asarray(X_val)
            train = Split.from_arrays(X, y, enc)
            val = Split.from_arrays(X_val, _check_reports(y_val, len(X_val)), enc)
        cfg = TrainConfig(
            lr_encoder=self.lr_encoder,
            lr_other=self.lr_other,
            batch_size=self.batch_size,
            patience=self.patience,
            min_delta=self.min_delta,
            max_epochs=self.max_epochs,
            seed=self.random_state,
            test_beam=self.beam,
        )
        enc_ck = self._checkpoint(self.encoder_checkpoint)
        dec_ck = self._checkpoint(self.decoder_checkpoint)
        stored = dec_ck.metadata.get("vocab") if dec_ck is not None else None
        vocab = build_vocab(train.reports)
        if stored is not None:
            vocab = Vocabulary.from_dict(stored)
        model = build_captioner(enc, dec, vocab, self.random_state)
        res = finetune(model, train, val, vocab, cfg, enc_ck, dec_ck)
        self.model_, self.vocab_ = load_captioner(res.checkpoint)
        self.checkpoint_ = res.checkpoint
        self.history_ = res.history
        self.best_epoch_ = res.best_epoch
        self.best_val_cider_ = res.best_val_cider
        return self

    def _split(self, X) -> Split:
        X = np.asarray(X)
        return Split.from_arrays(X, [""] * len(X), self.model_.encoder_config)

    def predict(self, X) -> List[str]:
        check_is_fitted(self, "model_")
        return decode_split(self.model_, self._split(X), self.vocab_, self.beam)

    def score(self, X, y) -> float:
        """Mean CIDEr of the predictions (document frequencies from ``y``)."""
        refs = [preprocess_report(r) for r in _check_reports(y, len(X))]
        hyps = self.predict(X)
        return Cider(refs).score_corpus(hyps, refs)[1]


class EncoderPretrainer(BaseEstimator, ClassifierMixin):
    """Multi-label observation classifier whose encoder becomes a warm-start checkpoint.

    ``y`` is a (n, 14) binary matrix. ``checkpoint_`` holds the encoder only.
    """

    def __init__(self, encoder="cvt-mini", epochs=5, lr=1e-3, batch_size=16, random_state=0):
        self.encoder = encoder
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        if self.encoder not in PRESETS:
            raise ValueError(f"unknown encoder preset {self.encoder!r}")
        enc = PRESETS[self.encoder]
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2:
            raise ValueError(f"y must be a (n, labels) matrix, got shape {y.shape}")
        train = Split.from_arrays(np.asarray(X), [""] * len(y), enc)
        train.targets = y
        cfg = PretrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.random_state)
        res = pretrain_encoder_classification(enc, train, cfg)
        self.checkpoint_ = res.checkpoint
        self.history_ = res.history
        self.classifier_ = res.model
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        split = Split.from_arrays(np.asarray(X), [""] * len(X), PRESETS[self.encoder])
        return split_logits(self.classifier_, split)

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def score(self, X, y) -> float:
        """Mean per-label accuracy."""
        return float((self.predict(X) == np.asarray(y)).mean())
