"""Experiment configuration: a flat ``key = value`` file plus overrides.

Every field of :class:`ExperimentConfig` is a valid key.  Tuples are written
comma-separated (``deltas = 0, 0.5, 1``), booleans as ``true``/``false``.
Unknown keys are an error so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from typing import Dict, Mapping, Tuple

from .data import read_kv

MODES = ("synthetic-1src", "synthetic-multisrc", "twins-sim", "custom-csv")
POLICIES = ("adaptive", "full", "none", "ablate-l1", "ablate-l2", "ablate-l3")

# per-level policy (level 1, level 2, level 3)
POLICY_LEVELS: Dict[str, Tuple[str, str, str]] = {
    "adaptive": ("adaptive", "adaptive", "adaptive"),
    "full": ("full", "full", "full"),
    "none": ("none", "none", "none"),
    "ablate-l1": ("none", "adaptive", "adaptive"),
    "ablate-l2": ("adaptive", "none", "adaptive"),
    "ablate-l3": ("adaptive", "adaptive", "none"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "synthetic-1src"
    policies: Tuple[str, ...] = ("adaptive",)
    replicates: int = 10
    seed: int = 0
    out_dir: str = "results"

    # grids
    deltas: Tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0)
    source_counts: Tuple[int, ...] = (0, 2, 4)
    source_deltas: Tuple[float, ...] = (2.0, 1.5, 1.0, 0.5)

    # synthetic data and target split
    n_per_pop: int = 1000
    n_target: int = 1000
    d_x: int = 30
    d_z: int = 2
    n_train: int = 50
    n_val: int = 100
    n_test: int = 850       # 0: every target row left after train and val

    # twins-sim
    twins_csv: str = ""     # empty: built-in stand-in table
    twins_b_t: float = 0.2
    twins_folds: int = 9
    twins_fold_size: int = 100

    # custom-csv
    manifest: str = ""

    # level 1
    n_samples: int = 5
    restarts: int = 5
    max_iter: int = 2000
    lr: float = 1e-2
    tol: float = 1e-6
    window: int = 20
    gamma: float = 1.0
    gamma_grid: Tuple[float, ...] = ()
    anchor_budget: int = 2000
    q_anchor_budget: int = 2000
    z_kernel: str = "rbf"
    z_lengthscale: float = 1.5

    # levels 2 and 3
    aux_gamma: float = 1.0
    aux_anchor_budget: int = 2000
    aux_max_iter: int = 2000

    # estimator
    n_mc: int = 500
    marginalize_w: bool = False

    # harness
    jobs: int = 1
    record_wall_ms: bool = False
    plotdata: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad or not self.policies:
            raise ValueError(f"policies must be a non-empty subset of {POLICIES}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.mode in ("synthetic-1src", "twins-sim") and not self.deltas:
            raise ValueError("delta grid must be non-empty")
        if self.mode == "synthetic-multisrc":
            if not self.source_counts:
                raise ValueError("source_counts must be non-empty")
            if max(self.source_counts) > len(self.source_deltas) or min(self.source_counts) < 0:
                raise ValueError("source_counts must lie in 0..len(source_deltas)")
        if self.mode == "custom-csv" and not self.manifest:
            raise ValueError("custom-csv mode needs a manifest path")
        if self.jobs < 1 or self.n_mc < 1:
            raise ValueError("jobs and n_mc must be >= 1")

    @property
    def grid(self) -> Tuple:
        if self.mode == "synthetic-multisrc":
            return tuple(self.source_counts)
        if self.mode == "custom-csv":
            return (None,)
        return tuple(self.deltas)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_items(self) -> Dict[str, str]:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(u) for u in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, kind: type):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        v = float(text)
        if not math.isfinite(v):
            raise ValueError(f"not a finite number: {text!r}")
        return v
    return text


# element type of each tuple-valued field
_TUPLE_KIND = {"policies": str, "deltas": float, "source_counts": int,
               "source_deltas": float, "gamma_grid": float}


def coerce(raw: Mapping[str, str]) -> Dict[str, object]:
    """Convert string values to the field types of :class:`ExperimentConfig`."""
    types = {f.name: type(f.default) for f in fields(ExperimentConfig)}
    out: Dict[str, object] = {}
    for key, text in raw.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise KeyError(f"unknown configuration key {key!r}")
        if key in _TUPLE_KIND:
            parts = [p for p in str(text).replace(" ", ",").split(",") if p.strip()]
            out[key] = tuple(_parse_scalar(p, _TUPLE_KIND[key]) for p in parts)
        else:
            out[key] = _parse_scalar(str(text), types[key])
    return out


def load_config(path=None, overrides: Mapping[str, str] = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``overrides``."""
    raw: Dict[str, str] = dict(read_kv(path)) if path else {}
    raw.update(overrides or {})
    return ExperimentConfig(**coerce(raw))
