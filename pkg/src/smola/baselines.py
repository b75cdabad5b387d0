"""Reference adapters: plain LoRA, a gated MoE feed-forward layer, and a
per-token weighted mixture of LoRA experts.

Each class also works as a trainer model (``forward``/``backward``/``params``)
by adding its output to a frozen ``x @ base``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .numkit import ShapeError


def _tokens(batch):
    return batch.x if hasattr(batch, "x") else nk.as_matrix(batch, "x")


# -- plain LoRA ---------------------------------------------------------------

@dataclass
class PlainLora:
    w_in: np.ndarray
    w_out: np.ndarray
    base: np.ndarray

    def __post_init__(self):
        self.w_in = nk.as_matrix(self.w_in, "w_in")
        self.w_out = nk.as_matrix(self.w_out, "w_out")
        self.base = nk.as_matrix(self.base, "base")
        r, d1 = self.w_in.shape
        d1b, d2 = self.base.shape
        if d1 != d1b or self.w_out.shape != (d2, r):
            raise ShapeError(
                f"inconsistent LoRA shapes: w_in {self.w_in.shape}, "
                f"w_out {self.w_out.shape}, base {self.base.shape}"
            )

    @classmethod
    def init(cls, base, rank, seed=0, init_scale=1.0):
        base = nk.as_matrix(base, "base")
        d1, d2 = base.shape
        rng = nk.Rng(seed)
        return cls(rng.normal((rank, d1), std=init_scale / np.sqrt(d1)),
                   np.zeros((d2, rank)), base)

    @property
    def rank(self):
        return self.w_in.shape[0]

    def effective_weight(self):
        return self.base + self.w_in.T @ self.w_out.T

    def params(self):
        return {"w_in": self.w_in.copy(), "w_out": self.w_out.copy()}

    def set_params(self, p):
        self.w_in = np.array(p["w_in"], dtype=np.float64)
        self.w_out = np.array(p["w_out"], dtype=np.float64)

    def forward(self, batch):
        x = _tokens(batch)
        with nk.tagged("lora"):
            h = nk.matmul(x, self.w_in.T)
            delta = nk.matmul(h, self.w_out.T)
        with nk.tagged("base"):
            y = nk.matmul(x, self.base)
        return y + delta, (x, h)

    def backward(self, cache, upstream):
        x, h = cache
        g = nk.as_matrix(upstream, "upstream")
        d_w_out = g.T @ h
        d_h = g @ self.w_out
        d_w_in = d_h.T @ x
        d_x = g @ self.base.T + d_h @ self.w_in
        return {"w_in": d_w_in, "w_out": d_w_out}, d_x

    def predict(self, batch):
        return self.forward(batch)[0]


def lora_apply(lora: PlainLora, x) -> np.ndarray:
    """``x @ base + (x @ w_in.T) @ w_out.T`` without forming the adapted weight."""
    x = nk.as_matrix(x, "x")
    if x.shape[1] != lora.base.shape[0]:
        raise ShapeError(f"x has {x.shape[1]} columns, LoRA expects {lora.base.shape[0]}")
    return lora.forward(x)[0]


# -- gated MoE feed-forward -------------------------------------------------

@dataclass
class GatedMoeFfn:
    """Experts ``w_out[i] @ gelu(w_in[i] @ x)`` mixed by a softmax gate.

    ``w_in`` has shape (n_experts, d_hidden, d_in), ``w_out`` shape
    (n_experts, d_out, d_hidden) and ``gate`` shape (n_experts, d_in). Tokens
    are l2-normalized before gating.
    """
    w_in: np.ndarray
    w_out: np.ndarray
    gate: np.ndarray
    base: np.ndarray | None = None

    def __post_init__(self):
        self.w_in = np.ascontiguousarray(self.w_in, dtype=np.float64)
        self.w_out = np.ascontiguousarray(self.w_out, dtype=np.float64)
        self.gate = nk.as_matrix(self.gate, "gate")
        ne, dh, d1 = self.w_in.shape
        if self.w_out.ndim != 3 or self.w_out.shape[0] != ne or self.w_out.shape[2] != dh:
            raise ShapeError(f"w_out {self.w_out.shape} inconsistent with w_in {self.w_in.shape}")
        if self.gate.shape != (ne, d1):
            raise ShapeError(f"gate {self.gate.shape}, expected {(ne, d1)}")
        if self.base is not None:
            self.base = nk.as_matrix(self.base, "base")
            if self.base.shape != (d1, self.w_out.shape[1]):
                raise ShapeError(f"base {self.base.shape} does not match experts")

    @classmethod
    def init(cls, base, n_experts, d_hidden, seed=0):
        """Residual adapter on ``base`` whose expert outputs start at zero."""
        base = nk.as_matrix(base, "base")
        d1, d2 = base.shape
        rng = nk.Rng(seed)
        gate = rng.normal((n_experts, d1), std=1.0 / np.sqrt(d1))
        w_in = rng.normal((n_experts, d_hidden, d1), std=1.0 / np.sqrt(d1))
        return cls(w_in, np.zeros((n_experts, d2, d_hidden)), gate, base)

    @property
    def n_experts(self):
        return self.w_in.shape[0]

    @property
    def experts(self):
        return [(self.w_in[i], self.w_out[i]) for i in range(self.n_experts)]

    def gate_probs(self, x):
        return nk.softmax_axis(nk.l2_normalize_rows(x) @ self.gate.T, "over_cols")

    def params(self):
        return {"w_in": self.w_in.copy(), "w_out": self.w_out.copy(), "gate": self.gate.copy()}

    def set_params(self, p):
        self.w_in = np.array(p["w_in"], dtype=np.float64)
        self.w_out = np.array(p["w_out"], dtype=np.float64)
        self.gate = np.array(p["gate"], dtype=np.float64)

    def forward(self, batch):
        """Soft-gated residual output and cache (trainer path)."""
        x = _tokens(batch)
        x_n = nk.l2_normalize_rows(x)
        probs = nk.softmax_axis(x_n @ self.gate.T, "over_cols")
        pre = np.einsum("ehd,nd->neh", self.w_in, x)
        act = nk.gelu(pre)
        outs = np.einsum("eoh,neh->neo", self.w_out, act)
        y = x @ self.base + np.einsum("ne,neo->no", probs, outs)
        return y, (x, x_n, probs, pre, act, outs)

    def backward(self, cache, upstream):
        x, x_n, probs, pre, act, outs = cache
        g = nk.as_matrix(upstream, "upstream")
        d_probs = np.einsum("no,neo->ne", g, outs)
        d_outs = probs[:, :, None] * g[:, None, :]
        d_w_out = np.einsum("neo,neh->eoh", d_outs, act)
        d_pre = np.einsum("eoh,neo->neh", self.w_out, d_outs) * nk.gelu_grad(pre)
        d_w_in = np.einsum("neh,nd->ehd", d_pre, x)
        d_logits = probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))
        d_gate = d_logits.T @ x_n
        d_x = g @ self.base.T + np.einsum("ehd,neh->nd", self.w_in, d_pre)
        d_x = d_x + nk.l2_normalize_rows_backward(x, d_logits @ self.gate)
        return {"w_in": d_w_in, "w_out": d_w_out, "gate": d_gate}, d_x

    def predict(self, batch):
        return self.forward(batch)[0]


def gated_moe_forward(m: GatedMoeFfn, x, top1=False, access_log=None) -> np.ndarray:
    """Sum of gate-weighted expert FFN outputs for every token.

    With ``top1`` the gate becomes one-hot at its argmax (lowest index on
    ties) and only that expert is evaluated. ``access_log``, if given, is a
    list that receives one ``(token, expert)`` pair per expert evaluation.
    The base weight, if any, is not added here.
    """
    x = nk.as_matrix(x, "x")
    if x.shape[1] != m.w_in.shape[2]:
        raise ShapeError(f"x has {x.shape[1]} columns, experts expect {m.w_in.shape[2]}")
    probs = m.gate_probs(x)
    out = np.zeros((x.shape[0], m.w_out.shape[1]))
    for s, xs in enumerate(x):
        if top1:
            chosen = [(int(np.argmax(probs[s])), 1.0)]
        else:
            chosen = list(enumerate(probs[s]))
        for i, weight in chosen:
            if access_log is not None:
                access_log.append((s, i))
            out[s] += weight * (m.w_out[i] @ nk.gelu(m.w_in[i] @ xs))
    return out


# -- mixture of LoRA ------------------------------------------------------------

@dataclass
class LoraMixture:
    """E LoRA factor pairs on one base, mixed per token.

    Mixing weights are either passed explicitly to :func:`lora_mixture_forward`
    or, on the trainer path, produced by ``softmax(normalize(x) @ gate.T)``.
    """
    w_in: np.ndarray
    w_out: np.ndarray
    base: np.ndarray
    gate: np.ndarray | None = None

    def __post_init__(self):
        self.w_in = np.ascontiguousarray(self.w_in, dtype=np.float64)
        self.w_out = np.ascontiguousarray(self.w_out, dtype=np.float64)
        self.base = nk.as_matrix(self.base, "base")
        e, r, d1 = self.w_in.shape
        if self.w_out.shape != (e, self.base.shape[1], r) or self.base.shape[0] != d1:
            raise ShapeError(
                f"inconsistent mixture shapes: w_in {self.w_in.shape}, "
                f"w_out {self.w_out.shape}, base {self.base.shape}"
            )
        if self.gate is not None:
            self.gate = nk.as_matrix(self.gate, "gate")

    @classmethod
    def init(cls, base, n_experts, rank, seed=0):
        base = nk.as_matrix(base, "base")
        d1, d2 = base.shape
        rng = nk.Rng(seed)
        gate = rng.normal((n_experts, d1), std=1.0 / np.sqrt(d1))
        w_in = rng.normal((n_experts, rank, d1), std=1.0 / np.sqrt(d1))
        return cls(w_in, np.zeros((n_experts, d2, rank)), base, gate)

    @property
    def experts(self):
        return [PlainLora(self.w_in[i], self.w_out[i], self.base) for i in range(len(self.w_in))]

    def params(self):
        p = {"w_in": self.w_in.copy(), "w_out": self.w_out.copy()}
        if self.gate is not None:
            p["gate"] = self.gate.copy()
        return p

    def set_params(self, p):
        self.w_in = np.array(p["w_in"], dtype=np.float64)
        self.w_out = np.array(p["w_out"], dtype=np.float64)
        if "gate" in p:
            self.gate = np.array(p["gate"], dtype=np.float64)

    def forward(self, batch):
        if self.gate is None:
            raise ValueError("mixture has no gate; pass explicit weights to lora_mixture_forward")
        x = _tokens(batch)
        x_n = nk.l2_normalize_rows(x)
        weights = nk.softmax_axis(x_n @ self.gate.T, "over_cols")
        h = np.einsum("erd,nd->ner", self.w_in, x)
        outs = np.einsum("eor,ner->neo", self.w_out, h)
        y = x @ self.base + np.einsum("ne,neo->no", weights, outs)
        return y, (x, x_n, weights, h, outs)

    def backward(self, cache, upstream):
        x, x_n, weights, h, outs = cache
        g = nk.as_matrix(upstream, "upstream")
        d_weights = np.einsum("no,neo->ne", g, outs)
        d_outs = weights[:, :, None] * g[:, None, :]
        d_w_out = np.einsum("neo,ner->eor", d_outs, h)
        d_h = np.einsum("eor,neo->ner", self.w_out, d_outs)
        d_w_in = np.einsum("ner,nd->erd", d_h, x)
        d_logits = weights * (d_weights - np.sum(d_weights * weights, axis=1, keepdims=True))
        d_gate = d_logits.T @ x_n
        d_x = g @ self.base.T + np.einsum("erd,ner->nd", self.w_in, d_h)
        d_x = d_x + nk.l2_normalize_rows_backward(x, d_logits @ self.gate)
        return {"w_in": d_w_in, "w_out": d_w_out, "gate": d_gate}, d_x

    def predict(self, batch):
        return self.forward(batch)[0]


def lora_mixture_forward(m: LoraMixture, x, weights) -> np.ndarray:
    """``x @ base + sum_i weights[:, i] * (x @ w_in[i].T) @ w_out[i].T``."""
    x = nk.as_matrix(x, "x")
    weights = nk.as_matrix(weights, "weights")
    e = m.w_in.shape[0]
    if weights.shape != (x.shape[0], e):
        raise ShapeError(f"weights {weights.shape}, expected {(x.shape[0], e)}")
    if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("mixing weights must be nonnegative and sum to 1 per token")
    y = nk.matmul(x, m.base)
    for i in range(e):
        delta = nk.matmul(nk.matmul(x, m.w_in[i].T), m.w_out[i].T)
        y = y + weights[:, i:i + 1] * delta
    return y
