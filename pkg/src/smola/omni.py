"""Modality-partitioned composition of three SMoLA blocks over one base layer.

The visual block only ever sees visual tokens, the text block only text
tokens, and the multimodal block sees everything. Their corrections are
scattered back to token positions and summed with a single ``x @ base``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from . import numkit as nk
from .core import SmolaBlock, SmolaConfig, SmolaGradients
from .numkit import ShapeError

VISUAL = "visual"
TEXT = "text"
BLOCK_NAMES = ("mm", "v", "t")


@dataclass
class TokenBatch:
    x: np.ndarray
    modality: list

    def __post_init__(self):
        self.x = nk.as_matrix(self.x, "x")
        self.modality = [str(m) for m in self.modality]
        if len(self.modality) != self.x.shape[0]:
            raise ShapeError(
                f"modality has {len(self.modality)} labels for {self.x.shape[0]} tokens"
            )
        bad = set(self.modality) - {VISUAL, TEXT}
        if bad:
            raise ValueError(f"unknown modality labels {sorted(bad)}")

    @property
    def visual_index(self):
        return np.array([i for i, m in enumerate(self.modality) if m == VISUAL], dtype=np.intp)

    @property
    def text_index(self):
        return np.array([i for i, m in enumerate(self.modality) if m == TEXT], dtype=np.intp)


@dataclass
class OmniAdapter:
    block_mm: SmolaBlock
    block_v: SmolaBlock
    block_t: SmolaBlock
    base: np.ndarray

    def __post_init__(self):
        self.base = nk.as_matrix(self.base, "base")
        for name, blk in self.blocks.items():
            if blk.base is not self.base and not np.array_equal(blk.base, self.base):
                raise ValueError(f"block {name} does not share the adapter's base weight")
            blk.base = self.base

    @property
    def blocks(self):
        return {"mm": self.block_mm, "v": self.block_v, "t": self.block_t}

    @property
    def d_in(self):
        return self.base.shape[0]

    @property
    def d_out(self):
        return self.base.shape[1]

    def params(self):
        out = {}
        for name, blk in self.blocks.items():
            for k, v in blk.params().items():
                out[f"{name}.{k}"] = v
        return out

    def set_params(self, p):
        for name, blk in self.blocks.items():
            blk.set_params({k: p[f"{name}.{k}"] for k in ("phi", "alpha", "w_in", "w_out")})

    def forward(self, batch):
        return omni_forward_cached(self, batch)

    def backward(self, caches, upstream):
        grads, d_x = omni_backward(self, caches, upstream)
        flat = {}
        for name, g in grads.items():
            for k, v in g.as_dict().items():
                flat[f"{name}.{k}"] = v
        return flat, d_x

    def predict(self, batch):
        return omni_forward(self, batch)


def init_omni(base, num_experts, rank, alpha_init=1.0, init_scale=1.0, seed=0) -> OmniAdapter:
    """Three zero-initialized blocks on ``base``.

    ``num_experts`` is an int or a ``{"mm", "v", "t"}`` mapping; each block
    draws from its own child stream of ``Rng(seed)``.
    """
    base = nk.as_matrix(base, "base")
    if isinstance(num_experts, int):
        num_experts = dict.fromkeys(BLOCK_NAMES, num_experts)
    root = nk.Rng(seed)
    blocks = {}
    for k, name in enumerate(BLOCK_NAMES):
        cfg = SmolaConfig(num_experts[name], rank, base.shape[0], base.shape[1],
                          alpha_init, init_scale, seed)
        blocks[name] = core.init_block(cfg, base, rng=root.spawn(k))
    return OmniAdapter(blocks["mm"], blocks["v"], blocks["t"], base)


def _check(adapter, batch):
    if not isinstance(batch, TokenBatch):
        raise TypeError("omni_forward expects a TokenBatch")
    if batch.x.shape[0] == 0:
        raise ShapeError("token batch is empty (N = 0)")
    if batch.x.shape[1] != adapter.d_in:
        raise ShapeError(f"x has {batch.x.shape[1]} columns, adapter expects d_in={adapter.d_in}")


def omni_forward_cached(adapter: OmniAdapter, batch: TokenBatch):
    _check(adapter, batch)
    x = batch.x
    parts = {}
    # each partial is computed independently, then summed in a fixed order
    d_mm, c_mm = core.correction(adapter.block_mm, x)
    parts["mm"] = (None, d_mm, c_mm)
    for name, idx in (("v", batch.visual_index), ("t", batch.text_index)):
        if idx.size == 0:
            parts[name] = (idx, None, None)
            continue
        delta, cache = core.correction(adapter.blocks[name], x[idx])
        parts[name] = (idx, delta, cache)
    with nk.tagged("base"):
        y = nk.matmul(x, adapter.base)
    y = y + d_mm
    for name in ("v", "t"):
        idx, delta, _ = parts[name]
        if delta is not None:
            full = np.zeros_like(y)
            full[idx] = delta
            y = y + full
    caches = {name: (idx, cache) for name, (idx, _, cache) in parts.items()}
    caches["n"] = x.shape[0]
    return y, caches


def omni_forward(adapter: OmniAdapter, batch: TokenBatch) -> np.ndarray:
    return omni_forward_cached(adapter, batch)[0]


def _zero_grads(block):
    return SmolaGradients(np.zeros_like(block.phi), 0.0, np.zeros_like(block.w_in),
                          np.zeros_like(block.w_out), None)


def omni_backward(adapter: OmniAdapter, caches, upstream):
    """Per-block parameter gradients and the total input gradient.

    A block skipped because its modality is absent gets all-zero gradients.
    """
    g = nk.as_matrix(upstream, "upstream")
    if g.shape != (caches["n"], adapter.d_out):
        raise ShapeError(f"upstream {g.shape} does not match output ({caches['n']}, {adapter.d_out})")
    d_x = g @ adapter.base.T
    grads = {}
    for name in BLOCK_NAMES:
        idx, cache = caches[name]
        blk = adapter.blocks[name]
        if cache is None:
            grads[name] = _zero_grads(blk)
            continue
        gi = core.correction_backward(blk, cache, g if idx is None else g[idx])
        if idx is None:
            d_x = d_x + gi.d_input
        else:
            full = np.zeros_like(d_x)
            full[idx] = gi.d_input
            d_x = d_x + full
        grads[name] = gi
    return grads, d_x
