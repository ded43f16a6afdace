"""Synthetic and Twins-style semi-synthetic data generators.

The synthetic process draws a latent confounder, binary proxies, a binary
treatment and two Gaussian potential outcomes whose means pass through a
softplus.  Populations differ only in the per-population slope vectors
``b1``, ``c1``, ``d1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .data import DataSchema, MultiSourceDataset, OutcomeKind, PopulationData
from .errors import BadCategory, ShapeMismatch
from .seeding import derive_seed, rng_for

# Default target population slopes.
TARGET_B1 = (1.1, 1.7)
TARGET_C1 = (1.5, 1.8)
TARGET_D1 = (1.5, 2.8)


def softplus(u):
    return np.logaddexp(0.0, u)


@dataclass(frozen=True)
class PopVectors:
    b1: np.ndarray
    c1: np.ndarray
    d1: np.ndarray

    def shifted(self, delta: float) -> "PopVectors":
        return PopVectors(self.b1 + delta, self.c1 + delta, self.d1 + delta)


def target_vectors() -> PopVectors:
    return PopVectors(np.array(TARGET_B1), np.array(TARGET_C1), np.array(TARGET_D1))


@dataclass(frozen=True, eq=False)
class SynthParams:
    a0: np.ndarray
    a1: np.ndarray
    sigma_z: float = math.sqrt(8.0)
    sigma_y: float = math.sqrt(2.0)
    b0: float = 0.5
    c0: float = 0.7
    d0: float = 2.0
    n_per_pop: int = 1000

    def __post_init__(self):
        a0 = np.asarray(self.a0, dtype=float)
        a1 = np.asarray(self.a1, dtype=float)
        if a0.ndim != 1 or a1.ndim != 2 or a1.shape[0] != a0.shape[0]:
            raise ShapeMismatch(f"a0 {a0.shape} and a1 {a1.shape} are inconsistent")
        if not (self.sigma_z > 0 and self.sigma_y > 0):
            raise ValueError("sigma_z and sigma_y must be positive")
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "a1", a1)

    @property
    def d_x(self) -> int:
        return self.a0.shape[0]

    @property
    def d_z(self) -> int:
        return self.a1.shape[1]

    def to_dict(self) -> dict:
        return {
            "a0": self.a0.tolist(), "a1": self.a1.tolist(),
            "sigma_z": self.sigma_z, "sigma_y": self.sigma_y,
            "b0": self.b0, "c0": self.c0, "d0": self.d0, "n_per_pop": self.n_per_pop,
        }


def default_params(seed: int, d_x: int = 30, d_z: int = 2, n_per_pop: int = 1000) -> SynthParams:
    """Ground-truth parameters with randomly drawn proxy coefficients.

    ``a0_j ~ N(0, 2)`` and ``a1_j ~ N(0, 2 I)``, variance 2, drawn from the
    ``(seed, "params")`` stream so runs are replayable.
    """
    rng = rng_for(seed, "params")
    a0 = rng.normal(0.0, math.sqrt(2.0), size=d_x)
    a1 = rng.normal(0.0, math.sqrt(2.0), size=(d_x, d_z))
    return SynthParams(a0=a0, a1=a1, n_per_pop=n_per_pop)


def generate_population(params: SynthParams, vectors: PopVectors, n: int, seed: int,
                        pop_id: str = "t") -> PopulationData:
    """Draw ``n`` individuals; the latent confounder is not returned."""
    b1, c1, d1 = (np.asarray(v, dtype=float) for v in (vectors.b1, vectors.c1, vectors.d1))
    for name, v in (("b1", b1), ("c1", c1), ("d1", d1)):
        if v.shape != (params.d_z,):
            raise ShapeMismatch(f"{name} has shape {v.shape}, expected ({params.d_z},)")
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, params.sigma_z, size=(n, params.d_z))
    px = expit(params.a0 + z @ params.a1.T)
    x = (rng.uniform(size=px.shape) < px).astype(float)
    pw = expit(params.b0 + z @ b1)
    w = (rng.uniform(size=n) < pw).astype(float)
    mu0 = softplus(params.c0 + z @ c1)
    mu1 = softplus(params.d0 + z @ d1)
    y0 = mu0 + params.sigma_y * rng.standard_normal(n)
    y1 = mu1 + params.sigma_y * rng.standard_normal(n)
    y = np.where(w == 1.0, y1, y0)
    schema = DataSchema.all_binary(params.d_x, OutcomeKind.CONTINUOUS)
    return PopulationData(pop_id, x, w, y, schema, y0, y1, mu0, mu1)


@dataclass(frozen=True)
class DiscrepancySpec:
    deltas: Tuple[float, ...] = ()

    def __post_init__(self):
        d = tuple(float(v) for v in self.deltas)
        if not all(math.isfinite(v) for v in d):
            raise ValueError("deltas must be finite")
        object.__setattr__(self, "deltas", d)


def make_multisource(params: SynthParams, vectors: Optional[PopVectors],
                     spec: DiscrepancySpec, seed: int,
                     n_target: Optional[int] = None) -> MultiSourceDataset:
    """Target ``t`` plus one source ``s{k}`` per delta, shifted by ``delta * 1``.

    Population ``k`` (target 0) draws from sub-seed ``(seed, "pop", k)``, so
    adding sources leaves earlier populations unchanged.
    """
    vectors = vectors or target_vectors()
    n_t = params.n_per_pop if n_target is None else n_target
    target = generate_population(params, vectors, n_t, derive_seed(seed, "pop", 0), "t")
    sources = [
        generate_population(params, vectors.shifted(delta), params.n_per_pop,
                            derive_seed(seed, "pop", k), f"s{k}")
        for k, delta in enumerate(spec.deltas, start=1)
    ]
    return MultiSourceDataset(target, tuple(sources))


def synth_manifest_items(params: SynthParams, vectors: PopVectors, spec: DiscrepancySpec,
                         seed: int) -> Dict[str, str]:
    """Ground-truth parameters and seeds for the dataset manifest."""
    items = {
        "generator": "synthetic",
        "seed": str(seed),
        "params": json.dumps(params.to_dict()),
        "deltas": json.dumps(list(spec.deltas)),
        "target_b1": json.dumps(vectors.b1.tolist()),
        "target_c1": json.dumps(vectors.c1.tolist()),
        "target_d1": json.dumps(vectors.d1.tolist()),
    }
    for k in range(len(spec.deltas) + 1):
        items[f"pop_seed.{k}"] = str(derive_seed(seed, "pop", k))
    return items


# ---------------------------------------------------------------- Twins


@dataclass(frozen=True)
class TwinsSimSpec:
    b_t: float = 0.2
    delta_s: float = 0.0
    replication: int = 3
    z_column: str = "gestat10"
    y0_column: str = "y0"
    y1_column: str = "y1"
    n_categories: int = 10
    target_fraction: float = 0.19
    target_block: int = 100


def twins_partition_sizes(n: int, spec: TwinsSimSpec) -> Tuple[int, int]:
    """(n_source, n_target).

    The target share is rounded down to a whole number of ``target_block``
    rows so it splits into equal CV folds (4821 pairs give 3921 / 900).
    """
    raw = spec.target_fraction * n
    if spec.target_block > 0 and raw >= spec.target_block:
        n_t = int(raw // spec.target_block) * spec.target_block
    else:
        n_t = int(round(raw))
    n_t = min(max(n_t, 1), n - 1)
    return n - n_t, n_t


def one_hot_proxies(z: np.ndarray, n_categories: int = 10, replication: int = 3) -> np.ndarray:
    onehot = np.zeros((z.shape[0], n_categories))
    onehot[np.arange(z.shape[0]), z] = 1.0
    return np.tile(onehot, (1, replication))


def twins_simulate(records: Mapping, spec: TwinsSimSpec, seed: int) -> MultiSourceDataset:
    """Simulate an observational study from paired twin outcomes.

    ``records`` maps column names to arrays (a DataFrame works).  Rows are
    shuffled and split into source and target before any treatment is drawn;
    the partition and the uniforms behind the treatment draws depend only on
    ``seed``, so a grid over ``delta_s`` shares them.
    """
    z_raw = np.asarray(records[spec.z_column], dtype=float)
    if np.any(~np.isfinite(z_raw)) or np.any(z_raw != np.round(z_raw)) \
            or np.any(z_raw < 0) or np.any(z_raw > spec.n_categories - 1):
        raise BadCategory(f"{spec.z_column} must be integers in 0..{spec.n_categories - 1}")
    z = z_raw.astype(int)
    y0 = np.asarray(records[spec.y0_column], dtype=float)
    y1 = np.asarray(records[spec.y1_column], dtype=float)
    if np.any(~np.isfinite(y0)) or np.any(~np.isfinite(y1)):
        raise ValueError("both potential outcomes must be present for every pair")
    n = z.shape[0]
    n_s, n_t = twins_partition_sizes(n, spec)
    perm = rng_for(seed, "twins_partition").permutation(n)
    parts = {"t": np.sort(perm[:n_t]), "s1": np.sort(perm[n_t:])}
    schema = DataSchema.all_binary(spec.n_categories * spec.replication, OutcomeKind.BINARY)
    pops = {}
    for k, (pid, idx) in enumerate(parts.items()):
        b = spec.b_t if pid == "t" else spec.b_t + spec.delta_s
        u = rng_for(seed, "twins_w", k).uniform(size=idx.shape[0])
        w = (u < expit(b * (0.1 * z[idx] - 0.1))).astype(float)
        x = one_hot_proxies(z[idx], spec.n_categories, spec.replication)
        y = np.where(w == 1.0, y1[idx], y0[idx])
        pops[pid] = PopulationData(pid, x, w, y, schema, y0[idx], y1[idx])
    return MultiSourceDataset(pops["t"], (pops["s1"],))


def twins_standin_table(n_pairs: int = 4821, seed: int = 0) -> Dict[str, np.ndarray]:
    """Synthetic replacement for the Twins extract.

    Gestation category ``gestat10`` in 0..9 and paired binary first-year
    mortality; death probability falls with gestation and is slightly lower
    for the heavier twin (``y1``).
    """
    rng = rng_for(seed, "twins_standin")
    weights = np.array([1, 2, 3, 5, 8, 12, 16, 20, 18, 15], dtype=float)
    z = rng.choice(10, size=n_pairs, p=weights / weights.sum())
    p0 = expit(0.8 - 0.45 * z)
    p1 = expit(0.4 - 0.45 * z)
    shared = rng.uniform(size=n_pairs)
    # a shared uniform correlates the twins' outcomes
    own0, own1 = rng.uniform(size=n_pairs), rng.uniform(size=n_pairs)
    u0 = np.where(rng.uniform(size=n_pairs) < 0.5, shared, own0)
    u1 = np.where(rng.uniform(size=n_pairs) < 0.5, shared, own1)
    return {
        "gestat10": z.astype(float),
        "y0": (u0 < p0).astype(float),
        "y1": (u1 < p1).astype(float),
    }
