"""Transformer-based temporal feature extractor.

A price segment of shape (L, F) is embedded to (L, F'), passed through a
stack of multi-head self-attention blocks and average-pooled over time to a
length-F' feature vector. Every method accepts either one segment (L, F) or a
batch (B, L, F).

Block layout (one residual only, around attention)::

    heads -> concat -> out LT -> + block input -> LayerNorm -> LT(F'->ffn) -> ReLU -> LT(ffn->F')

There is no positional encoding unless ``positional_encoding`` is set, so
order reaches the features only through price content.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .tensor import DTYPE, ParamStore, Tensor, layer_norm, linear, relu, softmax_rows

ATTENTION_COLUMNS = ("block", "head", "row", "col", "weight")


@dataclass(frozen=True)
class TTFEConfig:
    seg_len: int = 32
    in_features: int = 7
    model_dim: int = 64
    heads: int = 8
    n_blocks: int = 2
    ffn_dim: int = 2048
    # "model_dim" divides logits by sqrt(F'); "head_dim" by sqrt(F'/h)
    attention_scale: str = "model_dim"
    positional_encoding: bool = False

    def __post_init__(self):
        if self.seg_len < 1:
            raise ConfigError("must be >= 1", "seg_len")
        if self.n_blocks < 1:
            raise ConfigError("must be >= 1", "n_blocks")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads", "heads")
        if self.attention_scale not in ("model_dim", "head_dim"):
            raise ConfigError("expected 'model_dim' or 'head_dim'", "attention_scale")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TTFE:
    def __init__(self, cfg: TTFEConfig, gen: torch.Generator, store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore("ttfe")
        s, d = self.store, cfg.model_dim
        s.add_linear("embed", cfg.in_features, d, gen)
        for i in range(cfg.n_blocks):
            # per-head projections are the column blocks of these F' x F' matrices
            s.add_linear(f"block{i}.q", d, d, gen, bias=False)
            s.add_linear(f"block{i}.k", d, d, gen, bias=False)
            s.add_linear(f"block{i}.v", d, d, gen, bias=False)
            s.add_linear(f"block{i}.out", d, d, gen)
            s.add(f"block{i}.ln.gain", np.ones((1, d)))
            s.add(f"block{i}.ln.bias", np.zeros((1, d)))
            s.add_linear(f"block{i}.ffn1", d, cfg.ffn_dim, gen)
            s.add_linear(f"block{i}.ffn2", cfg.ffn_dim, d, gen)
        self._pe = torch.as_tensor(sinusoidal_encoding(cfg.seg_len, d), dtype=DTYPE)

    @property
    def scale(self) -> float:
        d = self.cfg.model_dim if self.cfg.attention_scale == "model_dim" else self.cfg.head_dim
        return 1.0 / math.sqrt(d)

    def head_weights(self, block: int, head: int, which: str) -> Tensor:
        """View of W^Q/W^K/W^V for one head, shape (F', F'/h)."""
        dh = self.cfg.head_dim
        return self.store[f"block{block}.{which}.W"][:, head * dh : (head + 1) * dh]

    # -------------------------------------------------------------- stages

    def _check_segment(self, seg: Tensor):
        L, F = self.cfg.seg_len, self.cfg.in_features
        if seg.shape[-2:] != (L, F):
            raise ShapeError(f"segment must end in shape ({L}, {F}), got {tuple(seg.shape)}")

    def embed(self, seg: Tensor) -> Tensor:
        self._check_segment(seg)
        s = self.store
        out = linear(seg, s["embed.W"], s["embed.b"])
        if self.cfg.positional_encoding:
            out = out + self._pe
        return out

    def attention_head(self, x: Tensor, block: int, head: int) -> tuple[Tensor, Tensor]:
        """One self-attention head: (output (..., L, F'/h), attention (..., L, L))."""
        q = x @ self.head_weights(block, head, "q")
        k = x @ self.head_weights(block, head, "k")
        v = x @ self.head_weights(block, head, "v")
        att = softmax_rows(q @ k.transpose(-1, -2) * self.scale)
        return att @ v, att

    def mha_block(self, x: Tensor, block: int) -> tuple[Tensor, Tensor]:
        """Returns (output (..., L, F'), attention (..., h, L, L))."""
        cfg, s = self.cfg, self.store
        if x.shape[-1] != cfg.model_dim:
            raise ShapeError(f"block input must have {cfg.model_dim} columns, got {x.shape[-1]}")
        lead = x.shape[:-1]
        h, dh = cfg.heads, cfg.head_dim
        q = (x @ s[f"block{block}.q.W"]).reshape(*lead, h, dh).transpose(-2, -3)
        k = (x @ s[f"block{block}.k.W"]).reshape(*lead, h, dh).transpose(-2, -3)
        v = (x @ s[f"block{block}.v.W"]).reshape(*lead, h, dh).transpose(-2, -3)
        att = softmax_rows(q @ k.transpose(-1, -2) * self.scale)  # (..., h, L, L)
        heads = (att @ v).transpose(-2, -3).reshape(*lead, cfg.model_dim)
        y = linear(heads, s[f"block{block}.out.W"], s[f"block{block}.out.b"]) + x
        y = layer_norm(y, s[f"block{block}.ln.gain"], s[f"block{block}.ln.bias"])
        y = relu(linear(y, s[f"block{block}.ffn1.W"], s[f"block{block}.ffn1.b"]))
        y = linear(y, s[f"block{block}.ffn2.W"], s[f"block{block}.ffn2.b"])
        return y, att

    @staticmethod
    def aggregate(x: Tensor) -> Tensor:
        """Global average pooling over the time axis."""
        return x.mean(dim=-2)

    def forward(self, seg: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Feature vector(s) plus the attention tensor of every block."""
        x = self.embed(seg)
        records = []
        for i in range(self.cfg.n_blocks):
            x, att = self.mha_block(x, i)
            records.append(att)
        return self.aggregate(x), records

    __call__ = forward

    def features_np(self, seg: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            f, _ = self.forward(torch.as_tensor(np.asarray(seg, dtype=np.float64)))
        return f.numpy()


def attention_rows(records: list[Tensor]) -> list[np.ndarray]:
    """Detach per-block attention tensors for a single segment: list of (h, L, L)."""
    return [r.detach().numpy().copy() for r in records]


def write_attention_csv(path: str | Path, records: list[np.ndarray]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTENTION_COLUMNS)
        for b, att in enumerate(records):
            att = np.asarray(att)
            h, L, _ = att.shape
            for j in range(h):
                for r in range(L):
                    for c in range(L):
                        w.writerow([b, j, r, c, repr(float(att[j, r, c]))])


def read_attention_csv(path: str | Path) -> list[np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["block"]), int(rec["head"]), int(rec["row"]), int(rec["col"]), float(rec["weight"])))
    nb = max(r[0] for r in rows) + 1
    nh = max(r[1] for r in rows) + 1
    L = max(r[2] for r in rows) + 1
    out = [np.zeros((nh, L, L)) for _ in range(nb)]
    for b, j, r, c, wgt in rows:
        out[b][j, r, c] = wgt
    return out
