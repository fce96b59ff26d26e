"""Causal self-attention next-item model trained on shifted sequences.

Inputs are left-padded item windows; position j is trained to predict the
item at position j + 1.  Item scores are dot products between the hidden
state and (by default tied) item embeddings.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .losses import LossSpec, sampled_loss, softmax_loss
from .sampling import sample_negative_indices


@dataclass
class ModelConfig:
    max_seq_len: int = 200
    embed_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    dropout_rate: float = 0.2
    tie_output_embeddings: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"activation must be relu or gelu, got {self.activation}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


DESK_PROFILE = ModelConfig(max_seq_len=50, embed_dim=64, n_blocks=2, n_heads=1, dropout_rate=0.2)


@dataclass
class SequenceBatch:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.targets > 0


def _left_pad(rows: Sequence[Sequence[int]], length: int) -> np.ndarray:
    out = np.zeros((len(rows), length), dtype=np.int64)
    for r, seq in enumerate(rows):
        seq = list(seq)[-length:]
        if seq:
            out[r, length - len(seq):] = seq
    return out


def make_training_batch(sequences: Sequence[Sequence[int]], max_seq_len: int) -> SequenceBatch:
    """Shift each sequence by one: inputs s[:-1], targets s[1:], last ``max_seq_len`` steps."""
    ins, outs = [], []
    for seq in sequences:
        seq = list(seq)[-(max_seq_len + 1):]
        ins.append(seq[:-1])
        outs.append(seq[1:])
    return SequenceBatch(_left_pad(ins, max_seq_len), _left_pad(outs, max_seq_len))


def make_inference_inputs(sequences: Sequence[Sequence[int]], max_seq_len: int) -> np.ndarray:
    return _left_pad(sequences, max_seq_len)


def _xavier(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class SASRec:
    """Parameters live in ``self.params`` (name -> trainable Tensor)."""

    def __init__(self, n_items: int, config: ModelConfig = ModelConfig(), seed: int = 0):
        if n_items < 2:
            raise ValueError("catalog must contain at least 2 items")
        self.n_items = n_items
        self.config = config
        self.params: Dict[str, Tensor] = self._init(seed)

    def _init(self, seed: int) -> Dict[str, Tensor]:
        rng = np.random.default_rng(seed)
        c, d = self.config, self.config.embed_dim
        p = {}
        item = _xavier(rng, self.n_items + 1, d)
        item[0] = 0.0
        p["item_emb"] = item
        p["pos_emb"] = _xavier(rng, c.max_seq_len, d)
        for b in range(c.n_blocks):
            for name in ("q", "k", "v", "o", "ff1", "ff2"):
                p[f"b{b}.{name}.w"] = _xavier(rng, d, d)
                p[f"b{b}.{name}.b"] = np.zeros(d)
            for ln in ("ln1", "ln2"):
                p[f"b{b}.{ln}.g"] = np.ones(d)
                p[f"b{b}.{ln}.b"] = np.zeros(d)
        p["ln_out.g"] = np.ones(d)
        p["ln_out.b"] = np.zeros(d)
        if not c.tie_output_embeddings:
            out = _xavier(rng, self.n_items + 1, d)
            out[0] = 0.0
            p["out_emb"] = out
        return {k: ag.parameter(v, k) for k, v in p.items()}

    @property
    def output_table(self) -> Tensor:
        key = "item_emb" if self.config.tie_output_embeddings else "out_emb"
        return self.params[key]

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def forward_hidden(self, inputs: np.ndarray, rng: Optional[np.random.Generator] = None,
                       params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Hidden states [batch, seq, dim]; dropout is active only when ``rng`` is given."""
        p = self.params if params is None else params
        c = self.config
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be [batch, seq], got shape {inputs.shape}")
        B, L = inputs.shape
        if L > c.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
        if inputs.min() < 0 or inputs.max() > self.n_items:
            raise IndexError(f"item index outside [0, {self.n_items}]")
        mask = inputs > 0
        keep = ag.Tensor(mask[..., None].astype(np.float64))
        rate = c.dropout_rate
        x = ag.scale(ag.embedding(p["item_emb"], inputs), math.sqrt(c.embed_dim))
        pos = ag.embedding(p["pos_emb"], np.arange(c.max_seq_len - L, c.max_seq_len))
        x = ag.mul(ag.dropout(ag.add(x, pos), rate, rng), keep)
        act = ag.relu if c.activation == "relu" else ag.gelu
        for b in range(c.n_blocks):
            w = lambda name: p[f"b{b}.{name}"]
            h = ag.layer_norm(x, w("ln1.g"), w("ln1.b"))
            att = ag.causal_attention(ag.linear(h, w("q.w"), w("q.b")),
                                      ag.linear(h, w("k.w"), w("k.b")),
                                      ag.linear(h, w("v.w"), w("v.b")),
                                      key_mask=mask, n_heads=c.n_heads, dropout_rate=rate, rng=rng)
            x = ag.add(x, ag.dropout(ag.linear(att, w("o.w"), w("o.b")), rate, rng))
            h = ag.layer_norm(x, w("ln2.g"), w("ln2.b"))
            ff = ag.linear(ag.dropout(act(ag.linear(h, w("ff1.w"), w("ff1.b"))), rate, rng),
                           w("ff2.w"), w("ff2.b"))
            x = ag.mul(ag.add(x, ag.dropout(ff, rate, rng)), keep)
        return ag.layer_norm(x, p["ln_out.g"], p["ln_out.b"])

    def score_items(self, hidden, item_indices) -> Tensor:
        """Dot products of hidden state(s) [..., d] with the given items' output embeddings."""
        hidden = ag.as_tensor(hidden)
        idx = np.asarray(item_indices, dtype=np.int64)
        if idx.size and (idx.min() < 1 or idx.max() > self.n_items):
            raise IndexError(f"item index outside [1, {self.n_items}]")
        if idx.ndim == 1 and hidden.ndim == 1:
            return ag.reshape(ag.sampled_scores(ag.reshape(hidden, (1, -1)), self.output_table,
                                                idx[None]), idx.shape)
        return ag.sampled_scores(hidden, self.output_table, idx)

    def score_all(self, hidden) -> Tensor:
        """Scores for items 1..n_items (column j holds item j + 1)."""
        return ag.full_scores(ag.as_tensor(hidden), self.output_table, skip=1)

    def training_loss(self, batch: SequenceBatch, spec: LossSpec, rng: Optional[np.random.Generator],
                      dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
        """Mean loss over valid (non-padded) positions of the shifted batch.

        Sampled kinds score the positive plus ``spec.k`` fresh uniform
        negatives per position; ``softmax`` scores the whole catalog.
        """
        valid = batch.mask
        if not valid.any():
            raise ValueError("batch has no valid target positions")
        hidden = ag.select(self.forward_hidden(batch.inputs, dropout_rng), valid)
        pos = batch.targets[valid]
        table = self.output_table
        if spec.kind == "softmax":
            scores = ag.full_scores(hidden, table, skip=1)
            return ag.mean(softmax_loss(scores, pos - 1))
        if rng is None:
            raise ValueError("sampled losses need a negative-sampling rng")
        neg = sample_negative_indices(pos, self.n_items, spec.k, rng)
        s_pos = ag.reshape(ag.sampled_scores(hidden, table, pos[:, None]), pos.shape)
        s_neg = ag.sampled_scores(hidden, table, neg)
        return ag.mean(sampled_loss(spec, s_pos, s_neg, self.n_items))

    def last_hidden(self, sequences: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
        """Hidden state at the final position for each sequence (no dropout)."""
        L = self.config.max_seq_len
        out = []
        for start in range(0, len(sequences), batch_size):
            ids = make_inference_inputs(sequences[start:start + batch_size], L)
            out.append(self.forward_hidden(ids).data[:, -1, :])
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.embed_dim))

    def full_catalog_scores(self, sequences: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
        """[n_sequences, n_items] scores; column j is item j + 1."""
        h = self.last_hidden(sequences, batch_size)
        return h @ self.output_table.data[1:].T

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k} missing or shape mismatch")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)


class TabularScores:
    """One free logit per item, no features: the simplest model the convergence
    results apply to.  Shares the training/scoring surface of :class:`SASRec`."""

    def __init__(self, n_items: int, init: float = 0.0):
        self.n_items = n_items
        self.config = ModelConfig(max_seq_len=1, embed_dim=1, n_blocks=0, dropout_rate=0.0)
        logits = np.full((n_items + 1, 1), init, dtype=np.float64)
        logits[0] = 0.0
        self.params = {"item_logit": ag.parameter(logits, "item_logit")}

    def sigmoid(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.params["item_logit"].data[1:, 0]))

    def training_loss(self, batch: SequenceBatch, spec: LossSpec, rng, dropout_rng=None) -> Tensor:
        valid = batch.mask
        if not valid.any():
            raise ValueError("batch has no valid target positions")
        pos = batch.targets[valid]
        table = self.params["item_logit"]
        s_pos = ag.reshape(ag.embedding(table, pos), pos.shape)
        if spec.kind == "softmax":
            every = np.broadcast_to(np.arange(1, self.n_items + 1), (len(pos), self.n_items))
            scores = ag.reshape(ag.embedding(table, every), every.shape)
            return ag.mean(softmax_loss(scores, pos - 1))
        neg = sample_negative_indices(pos, self.n_items, spec.k, rng)
        s_neg = ag.reshape(ag.embedding(table, neg), neg.shape)
        return ag.mean(sampled_loss(spec, s_pos, s_neg, self.n_items))

    def full_catalog_scores(self, sequences, batch_size: int = 256) -> np.ndarray:
        row = self.params["item_logit"].data[1:, 0]
        return np.tile(row, (len(sequences), 1))

    def state(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)
