"""Cost accounting, routing-matrix Gram maps, singular-value spectra and a
throughput microbenchmark for SMoLA blocks."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import core
from . import numkit as nk
from .core import SmolaConfig

THRESHOLDS = (0.0001, 0.001, 0.01, 0.05, 0.10)


# -- multiply-add model ---------------------------------------------------------

@dataclass
class CostReport:
    base_madds: int
    routing_madds: int
    dispatch_madds: int
    expert_madds: int
    combine_madds: int
    extra_params: int
    d_max: int
    nonlinearity_ops: int = 0

    @property
    def extra_madds(self):
        return self.routing_madds + self.dispatch_madds + self.expert_madds + self.combine_madds

    @property
    def total_madds(self):
        return self.base_madds + self.extra_madds

    @property
    def extra_ratio(self):
        return self.extra_madds / self.base_madds

    def to_dict(self):
        d = asdict(self)
        d.update(extra_madds=self.extra_madds, total_madds=self.total_madds,
                 extra_ratio=self.extra_ratio)
        return d


def count_costs(cfg: SmolaConfig, n_tokens: int) -> CostReport:
    """Closed-form multiply-add counts of one block forward over ``n_tokens``.

    ``nonlinearity_ops`` (two softmax exponentials per logit) is informational
    and not part of any madd total.
    """
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    e, r, d1, d2, n = cfg.num_experts, cfg.rank, cfg.d_in, cfg.d_out, n_tokens
    return CostReport(
        base_madds=n * d1 * d2,
        routing_madds=e * d1 * n,
        dispatch_madds=e * n * d1,
        expert_madds=e * (r * d1 + r * d2),
        combine_madds=e * n * d2,
        extra_params=cfg.trainable_params,
        d_max=max(d1, d2),
        nonlinearity_ops=2 * e * n,
    )


def measure_madds(block, x) -> dict:
    """Run a forward pass under a counter; returns madds per cost term."""
    with nk.MaddCounter() as counter:
        core.forward(block, x)
    out = {k: counter.by_tag.get(k, 0) for k in ("base", "routing", "dispatch", "expert", "combine")}
    out["total"] = counter.total
    return out


# -- routing matrix Gram --------------------------------------------------------

@dataclass
class HeatmapReport:
    gram: np.ndarray
    identity_distance: float

    def to_dict(self):
        return {"gram": self.gram.tolist(), "identity_distance": self.identity_distance}


def phi_gram(block_or_phi) -> HeatmapReport:
    """Gram matrix of the row-normalized routing matrix and its mean absolute
    off-diagonal entry (0 for orthonormal rows, 1 for identical rows)."""
    phi = getattr(block_or_phi, "phi", block_or_phi)
    phi_n = nk.l2_normalize_rows(nk.as_matrix(phi, "phi"))
    gram = phi_n @ phi_n.T
    gram = 0.5 * (gram + gram.T)
    e = gram.shape[0]
    if e < 2:
        return HeatmapReport(gram, 0.0)
    off = np.abs(gram[~np.eye(e, dtype=bool)])
    return HeatmapReport(gram, float(off.mean()))


# -- spectra ------------------------------------------------------------------

@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    counts_at: dict

    def to_dict(self):
        return {"singular_values": self.singular_values.tolist(),
                "counts_at": {str(k): v for k, v in self.counts_at.items()}}


def effective_rank(m, thresholds=THRESHOLDS) -> SpectrumReport:
    """Number of singular values above each fraction of the largest one."""
    m = nk.as_matrix(m)
    if not np.any(m):
        raise ValueError("effective rank is undefined for a zero matrix")
    s, _, _ = nk.jacobi_svd(m)
    top = s[0]
    counts = {f: int(np.sum(s > f * top)) for f in sorted(thresholds)}
    return SpectrumReport(s, counts)


def expert_products(block):
    """``w_out[i] @ w_in[i]`` for every expert, each (d_out, d_in)."""
    return [block.w_out[i] @ block.w_in[i] for i in range(block.num_experts)]


# -- throughput ---------------------------------------------------------------

@dataclass
class BenchResult:
    num_experts: int
    d: int
    n_tokens: int
    batch: int
    dense_mean: float
    dense_std: float
    dense_median: float
    smola_mean: float
    smola_std: float
    smola_median: float
    overhead_pct: float

    def to_dict(self):
        return asdict(self)


def _calls_for(fn, min_time):
    """Calls needed for one timed repeat to last about ``min_time`` seconds."""
    t0 = time.perf_counter()
    fn()
    dt = max(time.perf_counter() - t0, 1e-9)
    return max(1, int(np.ceil(min_time / dt)))


def _setup(num_experts, d, n_tokens, rank, seed):
    rng = nk.Rng(seed)
    base = rng.normal((d, d), std=1.0 / np.sqrt(d))
    x = rng.normal((n_tokens, d))

    def dense():
        nk.matmul(x, base)

    if num_experts == 0:
        return dense, dense
    block = core.init_block(SmolaConfig(num_experts, rank, d, d, seed=seed), base)
    block.w_out = rng.normal(block.w_out.shape, std=0.1)
    return dense, lambda: core.forward(block, x)


def bench_sweep(points, n_tokens=256, rank=4, batch=1, repeats=5, warmup=2, seed=0,
                min_time=0.5) -> list:
    """Throughput of dense versus SMoLA forward for every ``(num_experts, d)``.

    All variants of all points are timed round-robin, call by call, so slow
    drift in machine speed affects every point alike. A repeat's rate for a
    variant uses its median call time over at least three calls (about
    ``min_time`` seconds for the slowest variant), which discards sporadic scheduler stalls. Overhead is the median over
    repeats of the paired relative slowdown; ``num_experts=0`` times the dense
    path against itself and reports zero overhead.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    if not points:
        raise ValueError("need at least one (num_experts, d) point")
    with threadpool_limits(limits=1):
        fns = [_setup(e, d, n_tokens, rank, seed) for e, d in points]
        calls = max(3, min(_calls_for(f, min_time / 2) for pair in fns for f in pair))
        rates = [([], []) for _ in points]
        for k in range(warmup + repeats):
            spent = [([], []) for _ in points]
            for _ in range(calls):
                for p, pair in enumerate(fns):
                    for slot, fn in enumerate(pair):
                        t0 = time.perf_counter()
                        for _ in range(batch):
                            fn()
                        spent[p][slot].append(time.perf_counter() - t0)
            if k >= warmup:
                for p in range(len(points)):
                    for slot in (0, 1):
                        rates[p][slot].append(batch / statistics.median(spent[p][slot]))

    results = []
    for (e, d), (dense_rates, smola_rates) in zip(points, rates):
        if e == 0:
            smola_rates = dense_rates
        paired = [100.0 * (dr / sr - 1.0) for dr, sr in zip(dense_rates, smola_rates)]
        results.append(BenchResult(
            e, d, n_tokens, batch,
            statistics.fmean(dense_rates), statistics.stdev(dense_rates),
            statistics.median(dense_rates),
            statistics.fmean(smola_rates), statistics.stdev(smola_rates),
            statistics.median(smola_rates),
            0.0 if e == 0 else statistics.median(paired)))
    return results


def bench_throughput(num_experts, d, n_tokens=256, rank=4, batch=1, repeats=5,
                     warmup=2, seed=0, min_time=0.5) -> BenchResult:
    """Examples per second for ``x @ base`` versus a full block forward; a
    single-point :func:`bench_sweep`."""
    return bench_sweep([(num_experts, d)], n_tokens, rank, batch, repeats, warmup, seed,
                       min_time)[0]


def fit_affine(xs, ys):
    """Least-squares line through (xs, ys): ``(slope, intercept, r_squared)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    design = np.column_stack([xs, np.ones_like(xs)])
    (slope, intercept), *_ = np.linalg.lstsq(design, ys, rcond=None)
    resid = ys - (slope * xs + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return float(slope), float(intercept), r2


# -- exports --------------------------------------------------------------------

def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def write_spectrum_csv(path, report: SpectrumReport):
    with open(path, "w") as fh:
        fh.write("kind,key,value\n")
        for i, s in enumerate(report.singular_values):
            fh.write(f"sigma,{i},{s:.17g}\n")
        for f, c in report.counts_at.items():
            fh.write(f"count_above,{f:g},{c}\n")
