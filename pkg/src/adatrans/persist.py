"""Save and load fitted models as a single ``.npz`` archive.

Arrays are stored verbatim; everything else goes into a JSON header kept in
the same archive under ``__meta__``.  Floats round-trip through ``repr`` so a
reloaded model reproduces predictions bit for bit.
"""
from __future__ import annotations

import dataclasses
import enum
import json
from typing import Any, Dict

import numpy as np

from .auxiliary import OutcomeRegressor, PropensityModel, Standardiser
from .confounder import ConfounderModel, StructuralConfig
from .data import OutcomeKind
from .errors import ModelSchemaMismatch
from .estimator import Models
from .kernels import TransferFactors

FORMAT_VERSION = 1

_TYPES = {cls.__name__: cls for cls in (
    ConfounderModel, OutcomeRegressor, PropensityModel, Standardiser,
    StructuralConfig, TransferFactors)}


def _encode(obj: Any, prefix: str, arrays: Dict[str, np.ndarray]) -> Any:
    if isinstance(obj, np.ndarray):
        arrays[prefix] = obj
        return {"__array__": prefix}
    if isinstance(obj, enum.Enum):
        return obj.value
    if dataclasses.is_dataclass(obj):
        out = {"__type__": type(obj).__name__}
        for f in dataclasses.fields(obj):
            out[f.name] = _encode(getattr(obj, f.name), f"{prefix}.{f.name}", arrays)
        return out
    if isinstance(obj, dict):
        return {"__dict__": {k: _encode(v, f"{prefix}.{k}", arrays) for k, v in obj.items()}}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, f"{prefix}.{i}", arrays) for i, v in enumerate(obj)]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _decode(node: Any, arrays) -> Any:
    if isinstance(node, dict):
        if "__array__" in node:
            return np.array(arrays[node["__array__"]])
        if "__dict__" in node:
            return {k: _decode(v, arrays) for k, v in node["__dict__"].items()}
        cls = _TYPES[node["__type__"]]
        kw = {k: _decode(v, arrays) for k, v in node.items() if k != "__type__"}
        if cls is StructuralConfig or cls is OutcomeRegressor:
            if "outcome_kind" in kw:
                kw["outcome_kind"] = OutcomeKind(kw["outcome_kind"])
        return cls(**kw)
    if isinstance(node, list):
        return [_decode(v, arrays) for v in node]
    return node


def save_models(models: Models, path) -> None:
    arrays: Dict[str, np.ndarray] = {}
    meta = {
        "format": FORMAT_VERSION,
        "confounder": _encode(models.confounder, "confounder", arrays),
        "outcome": _encode(models.outcome, "outcome", arrays),
        "propensity": _encode(models.propensity, "propensity", arrays),
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_models(path) -> Models:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != FORMAT_VERSION:
        raise ModelSchemaMismatch(f"unsupported model archive format {meta.get('format')}")
    models = Models(
        confounder=_decode(meta["confounder"], arrays),
        outcome=_decode(meta["outcome"], arrays),
        propensity=_decode(meta["propensity"], arrays),
    )
    models.check()
    return models
