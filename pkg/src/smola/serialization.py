"""JSON documents with CSV-embedded matrices for every adapter type.

The frozen base weight is never embedded; documents carry ``base_path``
pointing at a CSV file written with :func:`numkit.save_matrix`. Stacked
expert factors are stored as one CSV string per expert.
"""
from __future__ import annotations

import json
import os

import numpy as np

from . import numkit as nk
from .baselines import GatedMoeFfn, LoraMixture, PlainLora
from .core import SmolaBlock, SmolaConfig
from .omni import OmniAdapter

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is missing, unreadable or inconsistent."""


def _csv(m):
    return nk.matrix_to_csv(m)


def _stack(m):
    return [nk.matrix_to_csv(s) for s in m]


def _unstack(items, shape_tail):
    if not items:
        return np.zeros((0,) + tuple(shape_tail))
    return np.stack([nk.matrix_from_csv(s) for s in items])


def model_to_dict(model, base_path=None) -> dict:
    """Serializable document for ``model`` (base excluded)."""
    if isinstance(model, SmolaBlock):
        doc = {
            "kind": "smola_block",
            "config": model.config.to_dict() if model.config else None,
            "alpha": model.alpha,
            "phi": _csv(model.phi),
            "w_in": _stack(model.w_in),
            "w_out": _stack(model.w_out),
        }
    elif isinstance(model, OmniAdapter):
        doc = {"kind": "omni", "blocks": {n: model_to_dict(b) for n, b in model.blocks.items()}}
    elif isinstance(model, PlainLora):
        doc = {"kind": "plain_lora", "w_in": _csv(model.w_in), "w_out": _csv(model.w_out)}
    elif isinstance(model, GatedMoeFfn):
        doc = {"kind": "gated_moe", "w_in": _stack(model.w_in), "w_out": _stack(model.w_out),
               "gate": _csv(model.gate)}
    elif isinstance(model, LoraMixture):
        doc = {"kind": "lora_mixture", "w_in": _stack(model.w_in), "w_out": _stack(model.w_out),
               "gate": None if model.gate is None else _csv(model.gate)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    doc["format_version"] = FORMAT_VERSION
    if base_path is not None:
        doc["base_path"] = str(base_path)
    return doc


def model_from_dict(doc: dict, base):
    """Inverse of :func:`model_to_dict`; ``base`` is the frozen weight matrix."""
    try:
        kind = doc["kind"]
        if kind == "smola_block":
            d2 = base.shape[1]
            phi = nk.matrix_from_csv(doc["phi"])
            w_in = _unstack(doc["w_in"], (0, phi.shape[1]))
            w_out = _unstack(doc["w_out"], (d2, 0))
            cfg = SmolaConfig(**doc["config"]) if doc.get("config") else None
            return SmolaBlock(phi, doc["alpha"], w_in, w_out, base, cfg)
        if kind == "omni":
            blocks = {n: model_from_dict(doc["blocks"][n], base) for n in ("mm", "v", "t")}
            return OmniAdapter(blocks["mm"], blocks["v"], blocks["t"], base)
        if kind == "plain_lora":
            return PlainLora(nk.matrix_from_csv(doc["w_in"]), nk.matrix_from_csv(doc["w_out"]), base)
        if kind == "gated_moe":
            return GatedMoeFfn(_unstack(doc["w_in"], ()), _unstack(doc["w_out"], ()),
                               nk.matrix_from_csv(doc["gate"]), base)
        if kind == "lora_mixture":
            gate = None if doc.get("gate") is None else nk.matrix_from_csv(doc["gate"])
            return LoraMixture(_unstack(doc["w_in"], ()), _unstack(doc["w_out"], ()), base, gate)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt adapter document: {exc}") from None
    raise CheckpointError(f"unknown adapter kind {kind!r}")


def _resolve(path, rel):
    return rel if os.path.isabs(rel) else os.path.join(os.path.dirname(os.path.abspath(path)), rel)


def save_model(path, model, base_path=None):
    """Write ``model`` to ``path``; the base goes to ``base_path`` (default
    ``base.csv`` next to ``path``) unless that file already exists."""
    if base_path is None:
        base_path = os.path.join(os.path.dirname(os.path.abspath(path)), "base.csv")
    if not os.path.exists(base_path):
        nk.save_matrix(base_path, model.base)
    rel = os.path.relpath(base_path, os.path.dirname(os.path.abspath(path)))
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, base_path=rel), fh, indent=1)


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is not valid JSON: {exc}") from None


def load_base(path, doc):
    if "base_path" not in doc:
        raise CheckpointError(f"{path} does not reference a base weight")
    try:
        return nk.load_matrix(_resolve(path, doc["base_path"]))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot load base for {path}: {exc}") from None


def load_model(path, base=None):
    doc = read_json(path)
    if doc.get("kind") == "omni_manifest":
        return load_omni(path)
    if base is None:
        base = load_base(path, doc)
    return model_from_dict(doc, base)


def save_omni(directory, adapter: OmniAdapter, name="omni"):
    """Manifest ``<name>.json`` plus one file per block and a shared base CSV."""
    os.makedirs(directory, exist_ok=True)
    base_path = os.path.join(directory, "base.csv")
    nk.save_matrix(base_path, adapter.base)
    files = {}
    for block_name, blk in adapter.blocks.items():
        fname = f"{name}_block_{block_name}.json"
        with open(os.path.join(directory, fname), "w") as fh:
            json.dump(model_to_dict(blk, base_path="base.csv"), fh, indent=1)
        files[block_name] = fname
    manifest = {"kind": "omni_manifest", "format_version": FORMAT_VERSION,
                "base_path": "base.csv", "blocks": files}
    path = os.path.join(directory, f"{name}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_omni(manifest_path) -> OmniAdapter:
    manifest = read_json(manifest_path)
    if manifest.get("kind") != "omni_manifest":
        raise CheckpointError(f"{manifest_path} is not an Omni manifest")
    base = load_base(manifest_path, manifest)
    blocks = {}
    for name in ("mm", "v", "t"):
        try:
            block_file = _resolve(manifest_path, manifest["blocks"][name])
        except KeyError:
            raise CheckpointError(f"manifest lacks block {name!r}") from None
        blocks[name] = model_from_dict(read_json(block_file), base)
    return OmniAdapter(blocks["mm"], blocks["v"], blocks["t"], base)
