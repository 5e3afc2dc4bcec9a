"""Versioned JSON model documents.

Floats are written with ``repr`` precision so a load/save cycle reproduces
the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .modules import ModuleInstance, ModuleSpec, build_module
from .tree import AntModel, GrowthSpecs, Node, Task

FORMAT_VERSION = 1
FORMAT_NAME = "antree-model"


class ModelFormatError(ValueError):
    pass


def _module_doc(mid: str, m: ModuleInstance) -> dict:
    return {
        "id": mid,
        "kind": m.kind,
        "recipe": m.spec.recipe,
        "downsample_freq": m.spec.downsample_freq,
        "input_shape": list(m.input_shape),
        "out_dim": m.out_dim,
        "params": [
            {"name": name, "shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in m.params.items()
        ],
    }


def _spec_doc(spec: ModuleSpec) -> dict:
    return {"recipe": spec.recipe, "downsample_freq": spec.downsample_freq}


def model_to_dict(model: AntModel) -> dict:
    nodes = []
    for nid in sorted(model.nodes):
        n = model.nodes[nid]
        nodes.append(
            {
                "id": nid,
                "kind": "leaf" if n.is_leaf else "internal",
                "parent": n.parent,
                "children": [] if n.is_leaf else [n.left, n.right],
                "edge": [f"t{nid}.{i}" for i in range(len(model.edges[nid]))],
            }
        )
    specs = None
    if model.specs is not None:
        specs = {
            "router": _spec_doc(model.specs.router),
            "transformer": _spec_doc(model.specs.transformer),
            "solver": _spec_doc(model.specs.solver),
        }
    mean = None
    if model.input_mean is not None:
        mean = {"shape": list(np.shape(model.input_mean)), "data": np.ravel(model.input_mean).tolist()}
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "task": {"kind": model.task.kind, "dim": model.task.dim},
        "input_shape": list(model.input_shape),
        "input_mean": mean,
        "specs": specs,
        "topology": {"root": model.root, "next_id": model.next_id, "nodes": nodes},
        "modules": [_module_doc(mid, m) for mid, m in model.modules()],
    }


def _load_module(doc: dict) -> ModuleInstance:
    spec = ModuleSpec.parse(doc["kind"], doc["recipe"], doc["downsample_freq"])
    m = build_module(spec, doc["input_shape"], 0, doc["out_dim"])
    names = [p["name"] for p in doc["params"]]
    if names != list(m.params):
        raise ModelFormatError(f"module {doc['id']}: parameter names {names} do not match recipe")
    for p in doc["params"]:
        arr = np.array(p["data"], dtype=np.float64).reshape(p["shape"])
        if arr.shape != m.params[p["name"]].shape:
            raise ModelFormatError(f"module {doc['id']}: parameter {p['name']} has shape {arr.shape}")
        m.params[p["name"]] = Tensor(arr, name=p["name"])
    return m


def model_from_dict(doc: dict) -> AntModel:
    if doc.get("format") != FORMAT_NAME:
        raise ModelFormatError("not an antree model document")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"model format version {doc.get('format_version')} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    modules = {m["id"]: _load_module(m) for m in doc["modules"]}
    task = Task(doc["task"]["kind"], doc["task"]["dim"])
    specs = None
    if doc["specs"] is not None:
        s = doc["specs"]
        specs = GrowthSpecs(
            ModuleSpec.parse("router", s["router"]["recipe"], s["router"]["downsample_freq"]),
            ModuleSpec.parse("transformer", s["transformer"]["recipe"], s["transformer"]["downsample_freq"]),
            ModuleSpec.parse("solver", s["solver"]["recipe"], s["solver"]["downsample_freq"]),
        )
    topo = doc["topology"]
    model = AntModel.__new__(AntModel)
    model.task = task
    model.input_shape = tuple(doc["input_shape"])
    model.root = topo["root"]
    model.next_id = topo["next_id"]
    model.specs = specs
    model.nodes, model.edges, model.routers, model.solvers = {}, {}, {}, {}
    depth = {}
    for n in topo["nodes"]:
        nid = n["id"]
        left, right = (n["children"] + [None, None])[:2]
        model.nodes[nid] = Node(nid, n["parent"], 0, left, right)
        model.edges[nid] = [modules[t] for t in n["edge"]]
        if n["kind"] == "leaf":
            model.solvers[nid] = modules[f"s{nid}"]
        else:
            model.routers[nid] = modules[f"r{nid}"]
    for nid in model.subtree(model.root):
        par = model.nodes[nid].parent
        depth[nid] = 0 if par is None else depth[par] + 1
        model.nodes[nid].depth = depth[nid]
    mean = doc["input_mean"]
    model.input_mean = None if mean is None else np.array(mean["data"]).reshape(mean["shape"])
    model.validate()
    return model


def dumps(model: AntModel) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def loads(text: str) -> AntModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def save_model(model: AntModel, path) -> None:
    Path(path).write_text(dumps(model))


def load_model(path) -> AntModel:
    return loads(Path(path).read_text())
