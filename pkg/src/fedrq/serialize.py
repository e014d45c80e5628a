"""JSON documents for MDPs, Q tables, reports and traces.

Floats are written with 17 significant digits, which round-trips every
IEEE double exactly. Non-finite values are written as ``NaN``/``Infinity``
(accepted by Python's json reader).
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .mdp import TabularMDP


def _emit(obj, indent: int, level: int) -> str:
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," + pad if indent else ", "
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_emit(v, indent, level + 1)}" for k, v in obj.items()]
        return "{" + pad + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = [_emit(v, indent, level + 1) for v in obj]
        # numeric rows stay on one line
        if all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            return "[" + ", ".join(inner) + "]"
        return "[" + pad + sep.join(inner) + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 1) -> str:
    return _emit(obj, indent, 0)


def dump(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def load(path):
    return json.loads(Path(path).read_text())


def mdp_to_dict(mdp: TabularMDP) -> dict:
    doc = {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "gamma": mdp.discount,
        "initial_dist": mdp.initial_dist,
        "reward": mdp.reward,
        "kernel": mdp.kernel,
    }
    if mdp.generator is not None:
        doc["generator"] = mdp.generator
    return doc


def mdp_from_dict(doc: dict) -> TabularMDP:
    mdp = TabularMDP(
        kernel=np.array(doc["kernel"], dtype=float),
        reward=np.array(doc["reward"], dtype=float),
        discount=float(doc["gamma"]),
        initial_dist=np.array(doc["initial_dist"], dtype=float),
        generator=doc.get("generator"),
    )
    if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
        raise ValueError("declared sizes disagree with the arrays")
    return mdp


def save_mdp(mdp: TabularMDP, path) -> None:
    dump(mdp_to_dict(mdp), path)


def load_mdp(path) -> TabularMDP:
    return mdp_from_dict(load(path))


def save_family(family, directory) -> None:
    """One MDP file per member plus a manifest with seed, rate and factors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, member in enumerate(family.members):
        name = f"member_{k}.json"
        save_mdp(member, directory / name)
        files.append(name)
    dump({
        "seed": family.seed,
        "perturbation_rate": family.perturbation_rate,
        "param": family.param,
        "nominal": family.nominal,
        "n_k": family.factors,
        "values": family.values,
        "clamped": family.clamped,
        "members": files,
    }, directory / "manifest.json")


def load_family(directory):
    from .envgen import EnvFamily

    directory = Path(directory)
    man = load(directory / "manifest.json")
    members = [load_mdp(directory / f) for f in man["members"]]
    return EnvFamily(members, man["n_k"], man["values"], man["clamped"], man["param"],
                     man["nominal"], man["seed"], man["perturbation_rate"])


def trace_lines(trace) -> str:
    return "".join(dumps(rec, indent=0) + "\n" for rec in trace.records())
