"""GPT2-style causal decoder with a cross-attention module in every layer.

Each layer runs masked self-attention, then cross-attention over the projected
visual features, then the feed-forward network; every sublayer is pre-norm with
a residual connection. The output head is tied to the token embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoder import ConfigError
from .nn import (
    MLP,
    Dropout,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    causal_mask,
    merge_heads,
    scaled_dot_attention,
    split_heads,
)


class StaleStateError(RuntimeError):
    """A cache or generated report no longer matches the model parameters."""


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 64
    layers: int = 3
    hidden: int = 128
    heads: int = 4
    ff_width: int = 512
    max_length: int = 128
    dropout: float = 0.1
    cross_attention: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_length < 1:
            raise ConfigError("max_length must be >= 1")
        if self.vocab_size < 1 or self.layers < 1:
            raise ConfigError("vocab_size and layers must be positive")

    @property
    def n_positions(self) -> int:
        # BOS plus max_length - 1 fed-back tokens
        return self.max_length

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)

    def body(self) -> "DecoderConfig":
        """The same transformer without cross-attention (what pretraining sees)."""
        return replace(self, cross_attention=False)


DECODER_PRESETS = {
    "toy": DecoderConfig(),
    "tiny": DecoderConfig(layers=2, hidden=64, heads=2, ff_width=256),
    "distilgpt2": DecoderConfig(vocab_size=50257, layers=6, hidden=768, heads=12, ff_width=3072, max_length=1024),
    "micro": DecoderConfig(vocab_size=6, layers=2, hidden=8, heads=2, ff_width=16, max_length=8, dropout=0.0),
}


@dataclass
class TokenSequence:
    """Generated or reference token ids without BOS/EOS."""

    ids: List[int]
    text: str = ""
    logprob: float = 0.0
    finished: bool = True
    provenance: Optional[tuple] = None

    def __len__(self) -> int:
        return len(self.ids)


class SelfAttention(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.heads = cfg.heads
        self.c_attn = Linear(cfg.hidden, 3 * cfg.hidden, rng)
        self.c_proj = Linear(cfg.hidden, cfg.hidden, rng)

    def qkv(self, x: Tensor):
        h = x.shape[-1]
        qkv = self.c_attn(x)
        return (split_heads(qkv[..., i * h : (i + 1) * h], self.heads) for i in range(3))

    def forward(self, x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        q, k, v = self.qkv(x)
        out, _ = scaled_dot_attention(q, k, v, mask)
        return self.c_proj(merge_heads(out))


class CrossAttention(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.heads = cfg.heads
        self.q_attn = Linear(cfg.hidden, cfg.hidden, rng)
        self.c_attn = Linear(cfg.hidden, 2 * cfg.hidden, rng)
        self.c_proj = Linear(cfg.hidden, cfg.hidden, rng)

    def keys_values(self, visual: Tensor):
        h = visual.shape[-1]
        kv = self.c_attn(visual)
        return split_heads(kv[..., :h], self.heads), split_heads(kv[..., h:], self.heads)

    def forward(self, x: Tensor, kv) -> Tuple[Tensor, Tensor]:
        k, v = kv
        q = split_heads(self.q_attn(x), self.heads)
        out, weights = scaled_dot_attention(q, k, v)
        return self.c_proj(merge_heads(out)), weights


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, drop_rng: np.random.Generator):
        self.ln_1 = LayerNorm(cfg.hidden)
        self.attn = SelfAttention(cfg, rng)
        if cfg.cross_attention:
            self.ln_cross_attn = LayerNorm(cfg.hidden)
            self.crossattention = CrossAttention(cfg, rng)
        self.ln_2 = LayerNorm(cfg.hidden)
        self.mlp = MLP(cfg.hidden, cfg.ff_width, rng)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def forward(self, x: Tensor, mask, cross_kv=None) -> Tuple[Tensor, Optional[Tensor]]:
        x = x + self.drop(self.attn(self.ln_1(x), mask))
        weights = None
        if cross_kv is not None:
            y, weights = self.crossattention(self.ln_cross_attn(x), cross_kv)
            x = x + self.drop(y)
        x = x + self.drop(self.mlp(self.ln_2(x)))
        return x, weights


@dataclass
class DecoderState:
    """Per-call incremental decoding cache."""

    keys: List[np.ndarray]
    values: List[np.ndarray]
    cross: List[Optional[tuple]]
    position: int
    version: int
    cross_weights: List[List[np.ndarray]] = field(default_factory=list)

    def select(self, rows: Sequence[int]) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState(
            [k[rows] for k in self.keys],
            [v[rows] for v in self.values],
            [None if c is None else (Tensor(c[0].data[rows]), Tensor(c[1].data[rows])) for c in self.cross],
            self.position,
            self.version,
        )


def log_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class TextDecoder(Module):
    def __init__(self, config: DecoderConfig, rng: np.random.Generator, bos_id: int = 1, eos_id: int = 2):
        self.config = config
        drop_rng = np.random.default_rng(rng.integers(2**63))
        self.wte = Embedding(config.vocab_size, config.hidden, rng)
        self.wpe = Embedding(config.n_positions, config.hidden, rng, std=0.01)
        self.layers = [DecoderLayer(config, rng, drop_rng) for _ in range(config.layers)]
        self.ln_f = LayerNorm(config.hidden)
        self.drop = Dropout(config.dropout, drop_rng)
        self.bos_id, self.eos_id = bos_id, eos_id
        self.version = 0

    def bump_version(self) -> None:
        self.version += 1

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] > self.config.n_positions:
            raise ShapeError(
                f"sequence of {ids.shape[1]} positions exceeds the context limit {self.config.n_positions}; clip first"
            )
        return ids

    def _visual(self, visual) -> Optional[Tensor]:
        if visual is None:
            return None
        v = visual if isinstance(visual, Tensor) else Tensor(visual)
        if v.ndim == 2:
            v = v.reshape(1, *v.shape)
        if v.shape[-1] != self.config.hidden:
            raise ShapeError(f"visual features have width {v.shape[-1]}, decoder hidden size is {self.config.hidden}")
        return v

    def forward(self, ids, visual=None, causal: bool = True, return_cross: bool = False):
        """Teacher-forced logits (B, T, V); ``visual`` is (B, D, H) or None to skip cross-attention."""
        ids = self._check_ids(ids)
        t = ids.shape[1]
        v = self._visual(visual)
        if v is not None and not self.config.cross_attention:
            raise ConfigError("decoder was built without cross-attention")
        x = self.drop(self.wte(ids) + self.wpe(np.arange(t)))
        mask = causal_mask(t) if causal else None
        cross = []
        for layer in self.layers:
            kv = layer.crossattention.keys_values(v) if v is not None else None
            x, w = layer(x, mask, kv)
            cross.append(w)
        x = self.ln_f(x)
        logits = ad.matmul(x, self.wte.weight.T)
        return (logits, cross) if return_cross else logits

    # -- incremental decoding ---------------------------------------------
    def start(self, visual, batch: Optional[int] = None) -> DecoderState:
        v = self._visual(visual)
        with ad.no_grad():
            cross = [layer.crossattention.keys_values(v) if v is not None else None for layer in self.layers]
        return DecoderState([None] * len(self.layers), [None] * len(self.layers), cross, 0, self.version)

    def step(self, last_ids, state: DecoderState, record_cross: bool = False) -> np.ndarray:
        """Logits (B, V) for the next token given the newest token per row."""
        if state.version != self.version:
            raise StaleStateError("decoder parameters changed since this cache was built")
        if state.position >= self.config.n_positions:
            raise ShapeError(f"position {state.position} exceeds context limit {self.config.n_positions}")
        ids = np.asarray(last_ids, dtype=np.int64).reshape(-1, 1)
        p = state.position
        weights_step = []
        with ad.no_grad():
            x = self.wte(ids) + self.wpe(np.array([p]))
            for i, layer in enumerate(self.layers):
                h = layer.ln_1(x)
                q, k, v = layer.attn.qkv(h)
                if state.keys[i] is not None:
                    k = Tensor(np.concatenate([state.keys[i], k.data], axis=2))
                    v = Tensor(np.concatenate([state.values[i], v.data], axis=2))
                state.keys[i], state.values[i] = k.data, v.data
                out, _ = scaled_dot_attention(q, k, v)
                x = x + layer.attn.c_proj(merge_heads(out))
                if state.cross[i] is not None:
                    y, w = layer.crossattention(layer.ln_cross_attn(x), state.cross[i])
                    x = x + y
                    weights_step.append(w.data[:, :, 0, :])
                x = x + layer.mlp(layer.ln_2(x))
            x = self.ln_f(x)
            logits = ad.matmul(x, self.wte.weight.T).data[:, 0, :]
        if record_cross:
            state.cross_weights.append(weights_step)
        state.position = p + 1
        return logits

    # -- search -----------------------------------------------------------
    def greedy_decode_batch(self, visual, max_len: Optional[int] = None) -> List[TokenSequence]:
        """Greedy search for every row of a (B, D, H) batch; deterministic."""
        max_len = self._max_len(max_len)
        v = self._visual(visual)
        b = v.shape[0] if v is not None else 1
        state = self.start(v, b)
        last = np.full(b, self.bos_id)
        cum = np.zeros(b)
        seqs: List[List[int]] = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            lp = log_probs(self.step(last, state))
            cand = cum[:, None] + lp
            tok = cand.argmax(axis=-1)
            for r in np.nonzero(~done)[0]:
                cum[r] = cand[r, tok[r]]
                if tok[r] == self.eos_id:
                    done[r] = True
                else:
                    seqs[r].append(int(tok[r]))
            if done.all():
                break
            last = tok
        return [TokenSequence(s, logprob=float(c), finished=bool(d)) for s, c, d in zip(seqs, cum, done)]

    def greedy_decode(self, visual, max_len: Optional[int] = None) -> TokenSequence:
        v = self._visual(visual)
        if v is not None and v.shape[0] != 1:
            raise ShapeError("greedy_decode takes one example; use greedy_decode_batch")
        return self.greedy_decode_batch(v, max_len)[0]

    def beam_decode(self, visual, beam: int, max_len: Optional[int] = None) -> TokenSequence:
        """Beam search without length normalisation.

        Each step keeps the ``beam`` best extensions overall; extensions ending in
        EOS leave the beam as finished hypotheses. The result is the finished
        hypothesis with the highest summed log-probability, ties going to the
        earlier finish and then to the lexicographically smaller token sequence.
        """
        if beam < 1:
            raise ValueError(f"beam must be >= 1, got {beam}")
        max_len = self._max_len(max_len)
        v = self._visual(visual)
        if v is not None and v.shape[0] != 1:
            raise ShapeError("beam_decode takes one example")
        state = self.start(v, 1)
        alive: List[Tuple[float, List[int]]] = [(0.0, [])]
        finished: List[Tuple[float, int, List[int], bool]] = []
        for step in range(max_len):
            last = [toks[-1] if toks else self.bos_id for _, toks in alive]
            lp = log_probs(self.step(last, state))
            cands = []
            for i, (score, toks) in enumerate(alive):
                row = lp[i]
                for tok in range(row.shape[0]):
                    cands.append((score + row[tok], toks + [tok], i))
            cands.sort(key=lambda c: (-c[0], c[1]))
            keep, rows = [], []
            for score, toks, i in cands[:beam]:
                if toks[-1] == self.eos_id:
                    finished.append((float(score), step, toks[:-1], True))
                else:
                    keep.append((float(score), toks))
                    rows.append(i)
            if not keep:
                break
            if finished and max(f[0] for f in finished) >= keep[0][0]:
                break
            alive = keep
            state = state.select(rows)
        else:
            finished.extend((s, max_len, toks, False) for s, toks in alive)
        best = min(finished, key=lambda f: (-f[0], f[1], f[2]))
        return TokenSequence(list(best[2]), logprob=best[0], finished=best[3])

    def sequence_logprob(self, ids: Sequence[int], visual=None, finished: bool = True) -> float:
        """Summed log-probability of ``ids`` (plus EOS when ``finished``) under the model."""
        seq = [self.bos_id] + list(ids)
        targets = list(ids) + ([self.eos_id] if finished else [])
        with ad.no_grad():
            logits = self.forward(np.array([seq[: len(targets)]]), visual).data[0]
        lp = log_probs(logits)
        return float(sum(lp[i, t] for i, t in enumerate(targets)))

    def _max_len(self, max_len: Optional[int]) -> int:
        max_len = self.config.max_length if max_len is None else int(max_len)
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        return min(max_len, self.config.n_positions)

