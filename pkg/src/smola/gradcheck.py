"""Central finite-difference checks of the analytic backward passes."""
from __future__ import annotations

import numpy as np

from .core import SmolaConfig, init_block
from .omni import TEXT, VISUAL, TokenBatch, init_omni

STEP = 1e-5
RTOL = 1e-6
ATOL = 1e-9


def scaled_error(analytic, numeric, rtol=RTOL, atol=ATOL):
    """``|a - n| / max(|n|, atol / rtol)``: at most ``rtol`` exactly when the
    entry passes "within rtol relative or atol absolute"."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), atol / rtol)


def check_model(model, batch, upstream, step=STEP, rtol=RTOL, atol=ATOL):
    """Compare ``model.backward`` against central differences of
    ``sum(upstream * model.forward(batch)[0])`` for every trainable scalar and
    every input entry. Returns ``{group: max scaled error}``."""
    x = batch.x if hasattr(batch, "x") else batch

    def objective(b):
        return float(np.sum(upstream * model.forward(b)[0]))

    _, cache = model.forward(batch)
    grads, d_x = model.backward(cache, upstream)
    params = model.params()
    report = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        numeric = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            model.set_params(params)
            fp = objective(batch)
            flat[j] = orig - step
            model.set_params(params)
            fm = objective(batch)
            flat[j] = orig
            numeric[j] = (fp - fm) / (2 * step)
        model.set_params(params)
        err = scaled_error(np.asarray(grads[name]).reshape(-1), numeric, rtol, atol)
        report[name] = float(err.max()) if err.size else 0.0

    numeric = np.empty(x.size)
    for j in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[j] += step
        xm[j] -= step
        numeric[j] = (objective(_like(batch, xp.reshape(x.shape)))
                      - objective(_like(batch, xm.reshape(x.shape)))) / (2 * step)
    report["input"] = float(scaled_error(d_x.reshape(-1), numeric, rtol, atol).max())
    return report


def _like(batch, x):
    return TokenBatch(x, batch.modality) if hasattr(batch, "modality") else x


def random_case(seed, kind="block", d_in=None, d_out=None, num_experts=None, rank=None,
                n_tokens=None, max_dim=8, max_experts=4, max_rank=2, max_tokens=5):
    """Seeded small model with nonzero experts, plus an input and upstream."""
    rng = np.random.default_rng(seed)
    lo = max(2, rank or 1)
    d1 = d_in or int(rng.integers(lo, max(lo, max_dim) + 1))
    d2 = d_out or int(rng.integers(lo, max(lo, max_dim) + 1))
    e = num_experts or int(rng.integers(1, max_experts + 1))
    r = rank or int(rng.integers(1, min(max_rank, d1, d2) + 1))
    n = n_tokens or int(rng.integers(1, max_tokens + 1))
    base = rng.standard_normal((d1, d2))
    if kind == "block":
        model = init_block(SmolaConfig(e, r, d1, d2, seed=seed), base)
        blocks = [model]
        batch = rng.standard_normal((n, d1))
    elif kind == "omni":
        model = init_omni(base, e, r, seed=seed)
        blocks = list(model.blocks.values())
        modality = [VISUAL if v else TEXT for v in rng.integers(0, 2, n)]
        batch = TokenBatch(rng.standard_normal((n, d1)), modality)
    else:
        raise ValueError(f"unknown case kind {kind!r}")
    for blk in blocks:
        blk.w_out = rng.standard_normal(blk.w_out.shape)
        blk.alpha = float(rng.uniform(0.5, 3.0))
    upstream = rng.standard_normal((n, d2))
    return model, batch, upstream


def run_suite(cases=20, seed=0, kinds=("block", "omni"), step=STEP, rtol=RTOL, atol=ATOL,
              **shape):
    """Check ``cases`` seeded models of each kind; returns per-kind, per-group
    maxima and an overall pass flag."""
    report = {"step": step, "rtol": rtol, "atol": atol, "cases": cases, "groups": {}}
    for kind in kinds:
        for c in range(cases):
            model, batch, upstream = random_case(seed + c, kind, **shape)
            for group, err in check_model(model, batch, upstream, step, rtol, atol).items():
                key = f"{kind}.{group}"
                report["groups"][key] = max(report["groups"].get(key, 0.0), err)
    report["max_error"] = max(report["groups"].values(), default=0.0)
    report["passed"] = report["max_error"] <= rtol
    return report

