"""Acceptance criteria, one test each, at their stated tolerances and time
limits. Every test prints a single ``[ACCEPT n] PASS|FAIL`` line; run with
``pytest tests/test_acceptance.py -v -s`` to see them."""
import json
import time

import numpy as np
import pytest

import oracles
from smola import cli, core, diagnostics as dg, gradcheck
from smola import numkit as nk
from smola import serialization as ser
from smola import trainer as tr
from smola.baselines import GatedMoeFfn, PlainLora, gated_moe_forward, lora_apply
from smola.core import SmolaConfig
from smola.omni import TEXT, VISUAL, TokenBatch, init_omni, omni_forward


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[ACCEPT {n:>2}] {'PASS' if ok else 'FAIL'} {title} {detail}".rstrip())
        assert ok, f"criterion {n} failed: {detail}"
    return report


def random_cfg(r, max_d=10, max_e=6):
    d1, d2 = (int(v) for v in r.integers(1, max_d + 1, size=2))
    return SmolaConfig(int(r.integers(1, max_e + 1)), int(r.integers(1, min(d1, d2) + 1)),
                       d1, d2, seed=int(r.integers(1 << 30)))


def test_01_backbone_preservation(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    ok = True
    for _ in range(50):
        cfg = random_cfg(r)
        base = r.standard_normal((cfg.d_in, cfg.d_out))
        n = int(r.integers(1, 9))
        x = r.standard_normal((n, cfg.d_in)) * 10.0 ** r.uniform(-3, 3)
        want = nk.matmul(x, base)
        y, _ = core.forward(core.init_block(cfg, base), x)
        modality = list(r.choice([VISUAL, TEXT], size=n))
        y_omni = omni_forward(init_omni(base, cfg.num_experts, cfg.rank, seed=cfg.seed),
                              TokenBatch(x, modality))
        ok &= bool(np.array_equal(y, want) and np.array_equal(y_omni, want))
    dt = time.perf_counter() - t0
    verdict(1, "backbone preservation", ok and dt < 5, f"(50 cases, {dt:.2f}s)")


def test_02_routing_normalization(verdict):
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        cfg = random_cfg(r)
        if i % 10 == 0:
            cfg = SmolaConfig(1, 1, cfg.d_in, cfg.d_out)
        n = 1 if i % 10 == 1 else int(r.integers(1, 9))
        scale = 10.0 ** (-3 + 6 * i / 99)
        block = core.init_block(cfg, np.zeros((cfg.d_in, cfg.d_out)))
        rw = core.compute_routing(block, r.standard_normal((n, cfg.d_in)) * scale)
        worst = max(worst, np.abs(rw.dispatch.sum(1) - 1).max(), np.abs(rw.combine.sum(0) - 1).max())
    dt = time.perf_counter() - t0
    verdict(2, "routing normalization", worst <= 1e-12 and dt < 5,
            f"(max deviation {worst:.1e}, {dt:.2f}s)")


def test_03_routing_scale_invariance(verdict):
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        cfg = random_cfg(r)
        block = core.init_block(cfg, np.zeros((cfg.d_in, cfg.d_out)))
        x = r.standard_normal((int(r.integers(1, 8)), cfg.d_in))
        ref = core.compute_routing(block, x)
        scaled = core.init_block(cfg, np.zeros((cfg.d_in, cfg.d_out)))
        scaled.phi = block.phi * r.uniform(1e-2, 1e2, size=(cfg.num_experts, 1))
        rw = core.compute_routing(scaled, x * r.uniform(1e-2, 1e2, size=(len(x), 1)))
        worst = max(worst, np.abs(rw.dispatch - ref.dispatch).max(),
                    np.abs(rw.combine - ref.combine).max())
    verdict(3, "routing scale invariance", worst <= 1e-12, f"(max change {worst:.1e})")


def test_04_gradient_correctness(verdict):
    t0 = time.perf_counter()
    report = gradcheck.run_suite(100, seed=4, kinds=("block", "omni"), step=1e-5,
                                 rtol=1e-6, atol=1e-9, max_dim=8)
    dt = time.perf_counter() - t0
    verdict(4, "gradient correctness", report["passed"] and dt < 60,
            f"(200 models, max scaled error {report['max_error']:.1e}, {dt:.1f}s)")


def test_05_cost_model(verdict):
    r = np.random.default_rng(5)
    exact = True
    for _ in range(20):
        cfg = random_cfg(r, max_d=48, max_e=12)
        n = int(r.integers(1, 40))
        measured = dg.measure_madds(core.init_block(cfg, np.zeros((cfg.d_in, cfg.d_out))),
                                    r.standard_normal((n, cfg.d_in)))
        c = dg.count_costs(cfg, n)
        exact &= [measured[k] for k in ("base", "routing", "dispatch", "expert", "combine")] == \
            [c.base_madds, c.routing_madds, c.dispatch_madds, c.expert_madds, c.combine_madds]
        exact &= measured["total"] == c.total_madds
    ratios = [dg.count_costs(SmolaConfig(48, 4, d, d), 256).extra_ratio for d in (256, 512, 1024, 2048)]
    falling = all(b < a for a, b in zip(ratios, ratios[1:]))
    verdict(5, "cost model exactness", exact and falling,
            "(ratios " + ", ".join(f"{v:.3f}" for v in ratios) + ")")


@pytest.mark.slow
def test_06_throughput_trend(verdict):
    t0 = time.perf_counter()
    kw = dict(n_tokens=256, rank=4, repeats=5, warmup=2, seed=7)
    narrow, wide = (r.overhead_pct for r in dg.bench_sweep([(48, 256), (48, 1024)], **kw))
    sweep = [r.overhead_pct for r in dg.bench_sweep([(8, 256), (24, 256), (48, 256)], **kw)]
    _, _, r2 = dg.fit_affine([8, 24, 48], sweep)
    dt = time.perf_counter() - t0
    verdict(6, "throughput trend", wide < narrow and r2 > 0.9 and dt < 180,
            f"(overhead d=256 {narrow:.1f}%, d=1024 {wide:.1f}%, E-sweep R2 {r2:.3f}, {dt:.0f}s)")


def test_07_spectral_tooling(verdict):
    counts = dg.effective_rank(np.diag([1.0, 0.2, 0.04])).counts_at
    ok = counts == {0.10: 2, 0.05: 2, 0.01: 3, 0.001: 3, 0.0001: 3}
    r = np.random.default_rng(7)
    for _ in range(20):
        cfg = random_cfg(r, max_d=12, max_e=4)
        block = core.init_block(cfg, np.zeros((cfg.d_in, cfg.d_out)))
        block.w_out = r.standard_normal(block.w_out.shape)
        ok &= all(dg.effective_rank(p).counts_at[0.0001] <= cfg.rank
                  for p in dg.expert_products(block))
    verdict(7, "spectral tooling", ok, f"(diag counts {counts})")


def test_08_heatmap_tooling(verdict):
    r = np.random.default_rng(8)
    q, _ = np.linalg.qr(r.standard_normal((7, 5)))
    ortho = dg.phi_gram(q.T)
    equal = dg.phi_gram(np.tile(r.standard_normal(6), (4, 1)))
    ok = np.allclose(ortho.gram, np.eye(5), atol=1e-14) and ortho.identity_distance < 1e-14
    ok &= abs(equal.identity_distance - 1.0) < 1e-14
    for _ in range(20):
        cfg = random_cfg(r)
        g = dg.phi_gram(core.init_block(cfg, np.zeros((cfg.d_in, cfg.d_out)))).gram
        ok &= np.array_equal(g, g.T) and np.allclose(np.diag(g), 1.0, atol=1e-14)
    verdict(8, "heat-map tooling", bool(ok),
            f"(orthonormal {ortho.identity_distance:.1e}, equal rows {equal.identity_distance:.15f})")


def test_09_baseline_conformance(verdict):
    r = np.random.default_rng(9)
    dense_err = lora_err = 0.0
    one_each = True
    for _ in range(10):
        d1, d2, dh = (int(v) for v in r.integers(1, 8, size=3))
        x = r.standard_normal((int(r.integers(1, 6)), d1))
        m = GatedMoeFfn(r.standard_normal((1, dh, d1)), r.standard_normal((1, d2, dh)),
                        r.standard_normal((1, d1)))
        dense = oracles.matmul(oracles.matmul(nk.gelu(nk.matmul(x, m.w_in[0].T)), m.w_out[0].T), np.eye(d2))
        dense_err = max(dense_err, oracles.max_abs_diff(gated_moe_forward(m, x), dense))
        ne = int(r.integers(2, 6))
        m = GatedMoeFfn(r.standard_normal((ne, dh, d1)), r.standard_normal((ne, d2, dh)),
                        r.standard_normal((ne, d1)))
        log = []
        gated_moe_forward(m, x, top1=True, access_log=log)
        one_each &= sorted(t for t, _ in log) == list(range(len(x)))
        k = int(r.integers(1, min(d1, d2) + 1))
        lora = PlainLora(r.standard_normal((k, d1)), r.standard_normal((d2, k)), r.standard_normal((d1, d2)))
        materialized = oracles.matmul(x, lora.base + np.array(oracles.matmul(lora.w_out, lora.w_in)).T)
        lora_err = max(lora_err, oracles.max_abs_diff(lora_apply(lora, x), materialized))
    verdict(9, "baseline conformance", dense_err <= 1e-12 and one_each and lora_err <= 1e-12,
            f"(dense {dense_err:.1e}, lora {lora_err:.1e})")


@pytest.mark.slow
def test_10_multitask_demonstration(verdict, tmp_path):
    t0 = time.perf_counter()
    outs = []
    for run in ("a", "b"):
        cfg = cli.load_config(seed=7, output_dir=str(tmp_path / run))
        cfg["train"]["arms"] = ["omni-smola", "plain-lora"]
        outs.append(cli.run_arms(cfg)[1])
    dt = time.perf_counter() - t0
    files = ["train_log.jsonl", "comparison.json", "checkpoints/omni-smola/final_block_mm.json",
             "checkpoints/plain-lora/final.json", "checkpoints/omni-smola/state.json"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    rows = {r["arm"]: r for r in outs[0]}
    omni, lora = rows["omni-smola"]["final_avg_loss"], rows["plain-lora"]["final_avg_loss"]
    verdict(10, "multitask demonstration", omni <= lora and same and dt < 300,
            f"(omni {omni:.4f} [{rows['omni-smola']['params']} params] vs lora {lora:.4f} "
            f"[{rows['plain-lora']['params']} params], reproducible={same}, {dt:.0f}s)")


def test_11_serialization_round_trip(verdict, tmp_path):
    r = np.random.default_rng(11)
    base = r.standard_normal((12, 6))
    block = core.init_block(SmolaConfig(3, 2, 12, 6, seed=1), base)
    block.set_params({k: v + r.standard_normal(np.shape(v)) for k, v in block.params().items()})
    ser.save_model(tmp_path / "block.json", block)
    adapter = init_omni(base, 3, 2, seed=2)
    adapter.set_params({k: v + r.standard_normal(np.shape(v)) for k, v in adapter.params().items()})
    manifest = ser.save_omni(tmp_path / "omni", adapter)

    def same(a, b):
        pa, pb = a.params(), b.params()
        return pa.keys() == pb.keys() and all(np.array_equal(pa[k], pb[k]) for k in pa)

    exact = same(block, ser.load_model(tmp_path / "block.json")) and \
        same(adapter, ser.load_model(manifest))

    tasks = tr.make_mixture(3, 12, 6, seed=7)
    kw = dict(lr=0.1, eval_every=5, seed=7, val_examples=4)
    full = tr.train(init_omni(tasks[0].base, 2, 1, seed=7), tasks, steps=20, **kw)
    part = tr.train(init_omni(tasks[0].base, 2, 1, seed=7), tasks, steps=10, **kw)
    tr.save_state(tmp_path / "state.json", part)
    resumed = tr.train(None, tasks, steps=20, state=tr.load_state(tmp_path / "state.json", tasks[0].base), **kw)
    bitwise = json.dumps(resumed.to_dict()) == json.dumps(full.to_dict())
    verdict(11, "serialization round-trip", exact and bitwise,
            f"(value-exact={exact}, resume bitwise={bitwise})")
