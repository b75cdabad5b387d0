"""``smola`` command line: gradcheck, train, bench, inspect.

Every command reads a JSON config (see README for the schema); ``--seed`` and
``--output-dir`` override the matching top-level fields. Exit codes: 0
success, 1 check failure, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import diagnostics as dg
from . import gradcheck
from . import numkit as nk
from . import serialization as ser
from . import trainer as tr
from .baselines import GatedMoeFfn, LoraMixture, PlainLora
from .core import ConfigError, SmolaBlock, SmolaConfig
from .omni import OmniAdapter

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "seed": 7,
    "output_dir": "smola_out",
    "model": {"num_experts": 8, "rank": 2, "alpha_init": 1.0, "init_scale": 1.0},
    "mixture": {"num_tasks": 3, "d_in": 64, "d_out": 64, "task_rank": 2, "key_scale": 2.0,
                "delta_scale": 1.0, "noise_std": 0.0, "modality_profile": 0.5,
                "tokens_per_example": 2, "conflict": "orthogonal"},
    "train": {"arms": ["omni-smola", "plain-lora"], "steps": 2000, "eval_every": 100,
              "batch_size": 4, "val_examples": 16, "momentum": 0.9,
              "lr": {"omni-smola": 0.1, "plain-lora": 0.02, "gated-moe": 0.1,
                     "lora-mixture": 0.1}},
    "gradcheck": {"cases": 20, "kinds": ["block", "omni"], "step": 1e-5, "rtol": 1e-6,
                  "atol": 1e-9, "d_in": None, "d_out": None, "num_experts": None,
                  "rank": None, "n_tokens": None},
    "bench": {"widths": [256, 1024], "width_experts": 48, "experts": [8, 24, 48],
              "experts_width": 256, "rank": 4, "n_tokens": 256, "batch": 1, "repeats": 5,
              "warmup": 2, "min_time": 0.5},
}


class UsageError(Exception):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise UsageError(f"unknown config field {path}{k!r}")
        if isinstance(base[k], dict) and k != "lr":
            if not isinstance(v, dict):
                raise UsageError(f"config field {path}{k} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None, output_dir=None):
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
    if output_dir is not None:
        cfg["output_dir"] = output_dir
    return cfg


def _validate_model(cfg):
    m, mix = cfg["model"], cfg["mixture"]
    try:
        SmolaConfig(m["num_experts"], m["rank"], mix["d_in"], mix["d_out"],
                    m["alpha_init"], m["init_scale"], cfg["seed"])
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


# -- commands -----------------------------------------------------------------

def cmd_gradcheck(cfg):
    g = cfg["gradcheck"]
    shape = {k: g[k] for k in ("d_in", "d_out", "num_experts", "rank", "n_tokens")}
    d1, d2, r = shape["d_in"], shape["d_out"], shape["rank"]
    if r is not None:
        try:
            SmolaConfig(shape["num_experts"] or 1, r, d1 or max(r, 8), d2 or max(r, 8))
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
    if g["cases"] < 1:
        raise UsageError("gradcheck.cases must be >= 1")
    report = gradcheck.run_suite(g["cases"], cfg["seed"], tuple(g["kinds"]), g["step"],
                                 g["rtol"], g["atol"], **shape)
    os.makedirs(cfg["output_dir"], exist_ok=True)
    dg.write_json(os.path.join(cfg["output_dir"], "gradcheck.json"), report)
    print(json.dumps({"max_error": report["max_error"], "passed": report["passed"]}))
    return EXIT_OK if report["passed"] else EXIT_CHECK


def _save_checkpoint(directory, name, model):
    os.makedirs(directory, exist_ok=True)
    if isinstance(model, OmniAdapter):
        return ser.save_omni(directory, model, name=name)
    path = os.path.join(directory, f"{name}.json")
    ser.save_model(path, model, base_path=os.path.join(directory, "base.csv"))
    return path


def run_arms(cfg):
    """Train every configured arm; returns ``{arm: TrainState}`` and writes
    the log, checkpoints and comparison table under ``output_dir``."""
    _validate_model(cfg)
    t, m = cfg["train"], cfg["model"]
    for arm in t["arms"]:
        if arm not in tr.ARMS:
            raise UsageError(f"unknown arm {arm!r}; choose from {list(tr.ARMS)}")
    if t["steps"] < 0 or t["eval_every"] < 1:
        raise UsageError("train.steps must be >= 0 and train.eval_every >= 1")
    try:
        tasks = tr.make_mixture(seed=cfg["seed"], **cfg["mixture"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    base = tasks[0].base
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    log_path = os.path.join(out, "train_log.jsonl")
    states = {}
    with open(log_path, "w") as log:
        for arm in t["arms"]:
            model = tr.make_arm(arm, base, m["num_experts"], m["rank"], seed=cfg["seed"])
            lr = t["lr"][arm] if isinstance(t["lr"], dict) else t["lr"]

            def on_eval(entry, arm=arm):
                log.write(json.dumps({"arm": arm, **entry}) + "\n")

            state = tr.train(model, tasks, t["steps"], lr, t["eval_every"], cfg["seed"],
                             t["batch_size"], t["val_examples"], t["momentum"], arm=arm,
                             on_eval=on_eval)
            ckpt = os.path.join(out, "checkpoints", arm)
            _save_checkpoint(ckpt, "final", state.model)
            _save_checkpoint(ckpt, "best", state.best_model(base))
            tr.save_state(os.path.join(ckpt, "state.json"), state)
            states[arm] = state
    table = [{"arm": arm, "params": tr.param_count(s.model), "lr": t["lr"][arm]
              if isinstance(t["lr"], dict) else t["lr"],
              "final_avg_loss": s.log[-1]["avg"], "best_avg_loss": -s.best_validation,
              "best_step": s.best_step} for arm, s in states.items()]
    dg.write_json(os.path.join(out, "comparison.json"), table)
    return states, table


def cmd_train(cfg):
    try:
        _, table = run_arms(cfg)
    except tr.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    print(f"{'arm':<14}{'params':>8}{'final avg loss':>16}{'best avg loss':>15}")
    for row in table:
        print(f"{row['arm']:<14}{row['params']:>8}{row['final_avg_loss']:>16.6f}"
              f"{row['best_avg_loss']:>15.6f}")
    return EXIT_OK


def cmd_bench(cfg):
    b = cfg["bench"]
    if not b["widths"] or not b["experts"]:
        raise UsageError("bench.widths and bench.experts must be non-empty")
    if b["repeats"] < 3:
        raise UsageError("bench.repeats must be >= 3")
    if not b["min_time"] > 0:
        raise UsageError("bench.min_time must be positive")
    common = dict(n_tokens=b["n_tokens"], rank=b["rank"], batch=b["batch"],
                  repeats=b["repeats"], warmup=b["warmup"], seed=cfg["seed"],
                  min_time=b["min_time"])
    widths = [r.to_dict() for r in
              dg.bench_sweep([(b["width_experts"], d) for d in b["widths"]], **common)]
    experts = [r.to_dict() for r in
               dg.bench_sweep([(e, b["experts_width"]) for e in b["experts"]], **common)]
    fit = None
    if len(experts) >= 2:
        slope, intercept, r2 = dg.fit_affine([r["num_experts"] for r in experts],
                                             [r["overhead_pct"] for r in experts])
        fit = {"slope": slope, "intercept": intercept, "r2": r2}
    report = {"width_sweep": widths, "expert_sweep": experts, "expert_fit": fit}
    os.makedirs(cfg["output_dir"], exist_ok=True)
    dg.write_json(os.path.join(cfg["output_dir"], "bench.json"), report)
    print(f"{'E':>4}{'d':>6}{'dense ex/s':>14}{'smola ex/s':>14}{'overhead %':>12}")
    for row in widths + experts:
        print(f"{row['num_experts']:>4}{row['d']:>6}"
              f"{row['dense_mean']:>9.2f}±{row['dense_std']:<4.2f}"
              f"{row['smola_mean']:>9.2f}±{row['smola_std']:<4.2f}{row['overhead_pct']:>12.2f}")
    return EXIT_OK


def _spectrum(m):
    if not np.any(m):
        k = min(m.shape)
        return dg.SpectrumReport(np.zeros(k), {f: 0 for f in dg.THRESHOLDS})
    return dg.effective_rank(m)


def inspect_model(model, out):
    """Write heat maps and spectra for every block of ``model`` into ``out``."""
    os.makedirs(out, exist_ok=True)
    if isinstance(model, OmniAdapter):
        blocks = model.blocks
    elif isinstance(model, SmolaBlock):
        blocks = {"block": model}
    else:
        blocks = {}
    summary = {"blocks": {}, "spectra": {}}
    for name, blk in blocks.items():
        heat = dg.phi_gram(blk)
        nk.save_matrix(os.path.join(out, f"heatmap_{name}.csv"), heat.gram)
        entry = {"identity_distance": heat.identity_distance, "experts": []}
        products = dg.expert_products(blk)
        for i, prod in enumerate(products):
            spec = _spectrum(prod)
            dg.write_spectrum_csv(os.path.join(out, f"spectrum_{name}_expert{i}.csv"), spec)
            entry["experts"].append(spec.to_dict()["counts_at"])
        agg = _spectrum(np.sum(products, axis=0))
        dg.write_spectrum_csv(os.path.join(out, f"spectrum_{name}_aggregate.csv"), agg)
        entry["aggregate"] = agg.to_dict()["counts_at"]
        summary["blocks"][name] = entry
    if isinstance(model, PlainLora):
        products = {"lora": model.w_out @ model.w_in}
    elif isinstance(model, LoraMixture):
        products = {f"expert{i}": model.w_out[i] @ model.w_in[i] for i in range(len(model.w_in))}
    else:
        products = {}
    for name, prod in products.items():
        spec = _spectrum(prod)
        dg.write_spectrum_csv(os.path.join(out, f"spectrum_{name}.csv"), spec)
        summary["spectra"][name] = spec.to_dict()["counts_at"]
    if isinstance(model, (GatedMoeFfn, LoraMixture)) and getattr(model, "gate", None) is not None:
        heat = dg.phi_gram(model.gate)
        nk.save_matrix(os.path.join(out, "heatmap_gate.csv"), heat.gram)
        summary["gate_identity_distance"] = heat.identity_distance
    dg.write_json(os.path.join(out, "inspect.json"), summary)
    return summary


def cmd_inspect(checkpoint, output_dir=None):
    try:
        model = ser.load_model(checkpoint)
    except ser.CheckpointError as exc:
        print(json.dumps({"error": "checkpoint", "path": checkpoint, "detail": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "inspect")
    summary = inspect_model(model, out)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="smola", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("gradcheck", "finite-difference gradient checks"),
                        ("train", "train adapter arms on a synthetic task mixture"),
                        ("bench", "throughput sweep over widths and expert counts")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
    p = sub.add_parser("inspect", help="routing heat maps and spectra of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--output-dir")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.checkpoint, args.output_dir)
        cfg = load_config(args.config, args.seed, args.output_dir)
        return {"gradcheck": cmd_gradcheck, "train": cmd_train, "bench": cmd_bench}[args.command](cfg)
    except UsageError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
