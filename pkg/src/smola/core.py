"""Soft mixture of zero-initialized low-rank experts on one frozen linear layer.

Shapes used throughout: tokens ``x`` are (N, d_in), the frozen weight ``base``
is (d_in, d_out), the routing matrix ``phi`` is (E, d_in), dispatch and
combine weights are (E, N), and each expert is a factor pair
``w_in[i]`` (r, d_in), ``w_out[i]`` (d_out, r).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numkit as nk
from .numkit import ShapeError


class ConfigError(ValueError):
    """Invalid adapter configuration."""


@dataclass(frozen=True)
class SmolaConfig:
    num_experts: int
    rank: int
    d_in: int
    d_out: int
    alpha_init: float = 1.0
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_experts", "rank", "d_in", "d_out"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.rank > min(self.d_in, self.d_out):
            raise ConfigError(
                f"rank {self.rank} exceeds min(d_in, d_out) = {min(self.d_in, self.d_out)}"
            )

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def trainable_params(self):
        e, r, d1, d2 = self.num_experts, self.rank, self.d_in, self.d_out
        return e * d1 + 1 + e * r * (d1 + d2)


@dataclass
class RoutingWeights:
    dispatch: np.ndarray
    combine: np.ndarray


@dataclass
class SmolaGradients:
    d_phi: np.ndarray
    d_alpha: float
    d_w_in: np.ndarray
    d_w_out: np.ndarray
    d_input: np.ndarray

    @property
    def d_experts(self):
        return [(self.d_w_in[i], self.d_w_out[i]) for i in range(len(self.d_w_in))]

    def as_dict(self):
        return {"phi": self.d_phi, "alpha": np.array(self.d_alpha),
                "w_in": self.d_w_in, "w_out": self.d_w_out}


@dataclass
class SmolaBlock:
    phi: np.ndarray
    alpha: float
    w_in: np.ndarray
    w_out: np.ndarray
    base: np.ndarray = field(repr=False)
    config: SmolaConfig | None = None

    def __post_init__(self):
        self.phi = nk.as_matrix(self.phi, "phi")
        self.base = nk.as_matrix(self.base, "base")
        self.w_in = np.ascontiguousarray(self.w_in, dtype=np.float64)
        self.w_out = np.ascontiguousarray(self.w_out, dtype=np.float64)
        self.alpha = float(self.alpha)
        e, d1 = self.phi.shape
        d2 = self.base.shape[1]
        if self.base.shape[0] != d1:
            raise ShapeError(f"base {self.base.shape} does not match phi {self.phi.shape}")
        if self.w_in.ndim != 3 or self.w_in.shape[0] != e or self.w_in.shape[2] != d1:
            raise ShapeError(f"w_in stack {self.w_in.shape} inconsistent with E={e}, d_in={d1}")
        r = self.w_in.shape[1]
        if self.w_out.shape != (e, d2, r):
            raise ShapeError(f"w_out stack {self.w_out.shape}, expected {(e, d2, r)}")

    @property
    def num_experts(self):
        return self.phi.shape[0]

    @property
    def rank(self):
        return self.w_in.shape[1]

    @property
    def d_in(self):
        return self.phi.shape[1]

    @property
    def d_out(self):
        return self.base.shape[1]

    @property
    def experts(self):
        """List of ``(w_in, w_out)`` views, one per expert."""
        return [(self.w_in[i], self.w_out[i]) for i in range(self.num_experts)]

    def params(self):
        return {"phi": self.phi.copy(), "alpha": np.array(self.alpha),
                "w_in": self.w_in.copy(), "w_out": self.w_out.copy()}

    def set_params(self, p):
        self.phi = np.array(p["phi"], dtype=np.float64)
        self.alpha = float(p["alpha"])
        self.w_in = np.array(p["w_in"], dtype=np.float64)
        self.w_out = np.array(p["w_out"], dtype=np.float64)

    def copy(self):
        return SmolaBlock(self.phi.copy(), self.alpha, self.w_in.copy(),
                          self.w_out.copy(), self.base, self.config)

    # trainer interface
    def forward(self, batch):
        return forward(self, getattr(batch, "x", batch))

    def backward(self, cache, upstream):
        g = backward(self, cache, upstream)
        return g.as_dict(), g.d_input

    def predict(self, batch):
        return self.forward(batch)[0]


def init_block(cfg: SmolaConfig, base, rng: nk.Rng | None = None) -> SmolaBlock:
    """Fresh block whose expert outputs are exactly zero.

    ``w_out`` is zero; ``w_in`` ~ N(0, (init_scale / sqrt(d_in))^2) and
    ``phi`` ~ N(0, 1 / d_in). Draws come from ``rng`` or, by default, from
    ``Rng(cfg.seed)``.
    """
    base = nk.as_matrix(base, "base")
    if base.shape != (cfg.d_in, cfg.d_out):
        raise ShapeError(f"base shape {base.shape} does not match config ({cfg.d_in}, {cfg.d_out})")
    rng = nk.Rng(cfg.seed) if rng is None else rng
    e, r, d1, d2 = cfg.num_experts, cfg.rank, cfg.d_in, cfg.d_out
    phi = rng.normal((e, d1), std=1.0 / np.sqrt(d1))
    w_in = rng.normal((e, r, d1), std=cfg.init_scale / np.sqrt(d1))
    w_out = np.zeros((e, d2, r))
    return SmolaBlock(phi, cfg.alpha_init, w_in, w_out, base, cfg)


def _check_tokens(block, x):
    x = nk.as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ShapeError("token batch is empty (N = 0)")
    if x.shape[1] != block.d_in:
        raise ShapeError(f"x has {x.shape[1]} columns, block expects d_in={block.d_in}")
    return x


def _routing(block, x):
    phi_n = nk.l2_normalize_rows(block.phi)
    x_n = nk.l2_normalize_rows(x)
    with nk.tagged("routing"):
        sim = nk.matmul(phi_n, x_n.T)
    logits = block.alpha * sim
    d = nk.softmax_axis(logits, "over_cols")
    c = nk.softmax_axis(logits, "over_rows")
    return phi_n, x_n, sim, d, c


def compute_routing(block: SmolaBlock, x) -> RoutingWeights:
    x = _check_tokens(block, x)
    _, _, _, d, c = _routing(block, x)
    return RoutingWeights(d, c)


def expert_apply(block: SmolaBlock, i: int, routing: RoutingWeights, x) -> np.ndarray:
    """Output of expert ``i`` on its dispatched slice, as a (d_out, 1) column."""
    if not 0 <= i < block.num_experts:
        raise IndexError(f"expert index {i} out of range for E={block.num_experts}")
    x = _check_tokens(block, x)
    slice_i = nk.matmul(routing.dispatch[i:i + 1], x)
    h = nk.matmul(block.w_in[i], slice_i.T)
    return nk.matmul(block.w_out[i], h)


@dataclass
class SmolaCache:
    x: np.ndarray
    x_n: np.ndarray
    phi_n: np.ndarray
    sim: np.ndarray
    dispatch: np.ndarray
    combine: np.ndarray
    dispatched: np.ndarray
    hidden: np.ndarray
    expert_out: np.ndarray


def correction(block: SmolaBlock, x):
    """Expert term of the block output (everything except ``x @ base``)."""
    x = _check_tokens(block, x)
    phi_n, x_n, sim, d, c = _routing(block, x)
    with nk.tagged("dispatch"):
        xd = nk.matmul(d, x)
    with nk.tagged("expert"):
        h = nk.stacked_matvec(block.w_in, xd)
        y_e = nk.stacked_matvec(block.w_out, h)
    with nk.tagged("combine"):
        delta = nk.matmul(c.T, y_e)
    return delta, SmolaCache(x, x_n, phi_n, sim, d, c, xd, h, y_e)


def forward(block: SmolaBlock, x):
    """Block output ``x @ base + combine.T @ expert_outputs`` and its cache."""
    delta, cache = correction(block, x)
    with nk.tagged("base"):
        y = nk.matmul(cache.x, block.base)
    return y + delta, cache


def correction_backward(block: SmolaBlock, cache: SmolaCache, upstream) -> SmolaGradients:
    """Gradients of ``sum(upstream * correction)``; ``d_input`` excludes the base path."""
    g = nk.as_matrix(upstream, "upstream")
    n = cache.x.shape[0]
    if g.shape != (n, block.d_out):
        raise ShapeError(f"upstream {g.shape} does not match output ({n}, {block.d_out})")
    d, c = cache.dispatch, cache.combine

    d_ye = c @ g
    d_c = cache.expert_out @ g.T
    d_w_out = d_ye[:, :, None] * cache.hidden[:, None, :]
    d_h = np.einsum("edr,ed->er", block.w_out, d_ye)
    d_w_in = d_h[:, :, None] * cache.dispatched[:, None, :]
    d_xd = np.einsum("erk,er->ek", block.w_in, d_h)
    d_d = d_xd @ cache.x.T
    d_x = d.T @ d_xd

    d_logits = d * (d_d - np.sum(d_d * d, axis=1, keepdims=True))
    d_logits += c * (d_c - np.sum(d_c * c, axis=0, keepdims=True))
    d_alpha = float(np.sum(d_logits * cache.sim))
    d_sim = block.alpha * d_logits
    d_phi = nk.l2_normalize_rows_backward(block.phi, d_sim @ cache.x_n)
    d_x = d_x + nk.l2_normalize_rows_backward(cache.x, d_sim.T @ cache.phi_n)
    return SmolaGradients(d_phi, d_alpha, d_w_in, d_w_out, d_x)


def backward(block: SmolaBlock, cache: SmolaCache, upstream) -> SmolaGradients:
    """Exact gradients of ``sum(upstream * forward(block, x)[0])``.

    The frozen ``base`` gets no gradient; its contribution to ``d_input`` is
    ``upstream @ base.T``.
    """
    grads = correction_backward(block, cache, upstream)
    grads.d_input = grads.d_input + np.asarray(upstream) @ block.base.T
    return grads
