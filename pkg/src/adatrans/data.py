"""Multi-population observational data: types, validation, CSV I/O, splits.

A population is a table of proxies ``x`` (n x d_x), binary treatments ``w``
and outcomes ``y``, optionally with the ground-truth potential outcomes
``y0_true``/``y1_true`` that only synthetic generators can provide.  Those
are the sampled potential outcomes, so ``y`` always equals the selected one.
Generators that know the noise-free conditional means also record
``mu0_true``/``mu1_true``; effect metrics prefer them when present.  The
per-column proxy types and the outcome kind form a :class:`DataSchema` that
is declared up front and never inferred from values.
"""
from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyPopulation, SchemaMismatch, ShapeMismatch, SplitTooLarge
from .seeding import rng_for


class OutcomeKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class DataSchema:
    """Column types shared by every population of a dataset."""

    x_binary: tuple
    outcome_kind: OutcomeKind = OutcomeKind.CONTINUOUS

    def __post_init__(self):
        object.__setattr__(self, "x_binary", tuple(bool(b) for b in self.x_binary))
        object.__setattr__(self, "outcome_kind", OutcomeKind(self.outcome_kind))

    @property
    def d_x(self) -> int:
        return len(self.x_binary)

    @classmethod
    def all_binary(cls, d_x: int, outcome_kind=OutcomeKind.CONTINUOUS) -> "DataSchema":
        return cls((True,) * d_x, outcome_kind)

    def type_string(self) -> str:
        return "".join("b" if b else "c" for b in self.x_binary)

    @classmethod
    def from_type_string(cls, types: str, outcome_kind) -> "DataSchema":
        bad = set(types) - {"b", "c"}
        if bad:
            raise SchemaMismatch(f"unknown proxy type codes {sorted(bad)}")
        return cls(tuple(t == "b" for t in types), OutcomeKind(outcome_kind))


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PopulationData:
    """Records of one population.

    Construction only checks shapes; content invariants (binary values,
    finiteness) are reported by :func:`validate` and enforced on load.
    """

    pop_id: str
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    schema: DataSchema
    y0_true: Optional[np.ndarray] = None
    y1_true: Optional[np.ndarray] = None
    mu0_true: Optional[np.ndarray] = None
    mu1_true: Optional[np.ndarray] = None

    def __post_init__(self):
        x = _frozen(self.x, np.float64)
        if x.ndim == 1 and x.size == 0:
            x = _frozen(np.zeros((0, self.schema.d_x)), np.float64)
        if x.ndim != 2:
            raise ShapeMismatch(f"x must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        w = _frozen(self.w, np.float64)
        y = _frozen(self.y, np.float64)
        if w.shape != (n,) or y.shape != (n,):
            raise ShapeMismatch(
                f"population {self.pop_id!r}: x has {n} rows, w {w.shape}, y {y.shape}"
            )
        if (self.y0_true is None) != (self.y1_true is None):
            raise ShapeMismatch("y0_true and y1_true must be given together")
        if (self.mu0_true is None) != (self.mu1_true is None):
            raise ShapeMismatch("mu0_true and mu1_true must be given together")
        if self.mu0_true is not None and self.y0_true is None:
            raise ShapeMismatch("mu0_true/mu1_true require y0_true/y1_true")
        object.__setattr__(self, "pop_id", str(self.pop_id))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "y", y)
        if self.y0_true is not None:
            y0 = _frozen(self.y0_true, np.float64)
            y1 = _frozen(self.y1_true, np.float64)
            if y0.shape != (n,) or y1.shape != (n,):
                raise ShapeMismatch("ground-truth vectors must have length n")
            object.__setattr__(self, "y0_true", y0)
            object.__setattr__(self, "y1_true", y1)
        if self.mu0_true is not None:
            mu0 = _frozen(self.mu0_true, np.float64)
            mu1 = _frozen(self.mu1_true, np.float64)
            if mu0.shape != (n,) or mu1.shape != (n,):
                raise ShapeMismatch("mean vectors must have length n")
            object.__setattr__(self, "mu0_true", mu0)
            object.__setattr__(self, "mu1_true", mu1)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.y0_true is not None

    @property
    def has_means(self) -> bool:
        return self.mu0_true is not None

    def truth_pair(self, which: str = "auto"):
        """Ground-truth (y0, y1) for metrics.

        ``which`` is ``"sampled"``, ``"expected"`` or ``"auto"`` (expected when
        recorded, else sampled).
        """
        if not self.has_truth:
            raise ValueError(f"population {self.pop_id!r} has no ground truth")
        if which == "expected" or (which == "auto" and self.has_means):
            if not self.has_means:
                raise ValueError(f"population {self.pop_id!r} has no expected outcomes")
            return self.mu0_true, self.mu1_true
        return self.y0_true, self.y1_true

    def subset(self, idx) -> "PopulationData":
        idx = np.asarray(idx, dtype=int)
        return PopulationData(
            self.pop_id,
            self.x[idx],
            self.w[idx],
            self.y[idx],
            self.schema,
            None if self.y0_true is None else self.y0_true[idx],
            None if self.y1_true is None else self.y1_true[idx],
            None if self.mu0_true is None else self.mu0_true[idx],
            None if self.mu1_true is None else self.mu1_true[idx],
        )

    def with_outcomes(self, y) -> "PopulationData":
        return PopulationData(self.pop_id, self.x, self.w, y, self.schema,
                              self.y0_true, self.y1_true, self.mu0_true, self.mu1_true)

    def equals(self, other: "PopulationData") -> bool:
        """Exact (bitwise) equality of ids, schema and all arrays."""
        if self.pop_id != other.pop_id or self.schema != other.schema:
            return False
        pairs = [(self.x, other.x), (self.w, other.w), (self.y, other.y)]
        if self.has_truth != other.has_truth:
            return False
        if self.has_truth:
            pairs += [(self.y0_true, other.y0_true), (self.y1_true, other.y1_true)]
        if self.has_means != other.has_means:
            return False
        if self.has_means:
            pairs += [(self.mu0_true, other.mu0_true), (self.mu1_true, other.mu1_true)]
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)


@dataclass(frozen=True, eq=False)
class MultiSourceDataset:
    target: PopulationData
    sources: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def m(self) -> int:
        return len(self.sources)

    @property
    def d_x(self) -> int:
        return self.target.d_x

    @property
    def schema(self) -> DataSchema:
        return self.target.schema

    @property
    def populations(self) -> List[PopulationData]:
        return [self.target, *self.sources]

    @property
    def pop_ids(self) -> List[str]:
        return [p.pop_id for p in self.populations]

    def with_sources(self, sources: Sequence[PopulationData]) -> "MultiSourceDataset":
        return MultiSourceDataset(self.target, tuple(sources))

    def target_only(self) -> "MultiSourceDataset":
        return MultiSourceDataset(self.target, ())

    def equals(self, other: "MultiSourceDataset") -> bool:
        return (self.m == other.m and self.target.equals(other.target)
                and all(a.equals(b) for a, b in zip(self.sources, other.sources)))


@dataclass(frozen=True)
class SplitSpec:
    n_train: int = 50
    n_val: int = 100
    n_test: int = 850
    seed: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split counts must be non-negative")


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Finding:
    kind: str
    pop_id: str
    row: Optional[int] = None
    column: Optional[str] = None
    message: str = ""


@dataclass
class ValidationReport:
    findings: List[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def __len__(self):
        return len(self.findings)

    def __iter__(self):
        return iter(self.findings)

    def kinds(self) -> List[str]:
        return [f.kind for f in self.findings]


def _column_names(d_x: int) -> List[str]:
    return [f"x{j}" for j in range(d_x)]


def _validate_population(pop: PopulationData, schema: DataSchema, out: List[Finding],
                         check_identity: bool) -> None:
    pid = pop.pop_id
    if pop.n == 0:
        out.append(Finding("EmptyPopulation", pid, message="population has no rows"))
        return
    if pop.schema != schema:
        out.append(Finding("SchemaMismatch", pid, message="proxy types or outcome kind differ"))
    if pop.d_x != schema.d_x:
        # column checks would be meaningless against a different schema
        return
    names = _column_names(pop.d_x)
    finite_x = np.isfinite(pop.x)
    for i, j in zip(*np.nonzero(~finite_x)):
        out.append(Finding("NonFinite", pid, int(i), names[j]))
    for j, is_bin in enumerate(schema.x_binary):
        if not is_bin:
            continue
        col = pop.x[:, j]
        bad = np.isfinite(col) & (col != 0.0) & (col != 1.0)
        for i in np.nonzero(bad)[0]:
            out.append(Finding("NonBinary", pid, int(i), names[j], f"value {col[i]!r}"))
    for i in np.nonzero((pop.w != 0.0) & (pop.w != 1.0))[0]:
        out.append(Finding("NonBinary", pid, int(i), "w", f"value {pop.w[i]!r}"))
    for i in np.nonzero(~np.isfinite(pop.y))[0]:
        out.append(Finding("NonFinite", pid, int(i), "y"))
    if schema.outcome_kind is OutcomeKind.BINARY:
        bad = np.isfinite(pop.y) & (pop.y != 0.0) & (pop.y != 1.0)
        for i in np.nonzero(bad)[0]:
            out.append(Finding("NonBinary", pid, int(i), "y", f"value {pop.y[i]!r}"))
    if pop.has_truth:
        cols = [("y0_true", pop.y0_true), ("y1_true", pop.y1_true)]
        if pop.has_means:
            cols += [("mu0_true", pop.mu0_true), ("mu1_true", pop.mu1_true)]
        for name, col in cols:
            for i in np.nonzero(~np.isfinite(col))[0]:
                out.append(Finding("NonFinite", pid, int(i), name))
        if check_identity:
            sel = np.where(pop.w == 1.0, pop.y1_true, pop.y0_true)
            for i in np.nonzero(sel != pop.y)[0]:
                out.append(Finding("OutcomeIdentity", pid, int(i), "y",
                                   "y differs from the selected potential outcome"))


def validate(data: MultiSourceDataset, check_identity: bool = False) -> ValidationReport:
    """List every invariant violation of ``data``; empty iff all hold.

    ``check_identity`` additionally asserts ``y == w*y1_true + (1-w)*y0_true``
    row-wise, which holds only for generator output.
    """
    findings: List[Finding] = []
    schema = data.target.schema
    seen = set()
    for pop in data.populations:
        if pop.pop_id in seen:
            findings.append(Finding("DuplicatePopId", pop.pop_id))
        seen.add(pop.pop_id)
        if pop.d_x != data.target.d_x:
            findings.append(Finding("DimMismatch", pop.pop_id,
                                    message=f"d_x={pop.d_x}, target has {data.target.d_x}"))
        _validate_population(pop, schema, findings, check_identity)
    return ValidationReport(findings)


# ---------------------------------------------------------------- CSV I/O


def _fmt(v: float) -> str:
    # repr of a Python float round-trips exactly
    return repr(float(v))


def write_population_csv(pop: PopulationData, path) -> None:
    header = _column_names(pop.d_x) + ["w", "y"]
    if pop.has_truth:
        header += ["y0_true", "y1_true"]
    if pop.has_means:
        header += ["mu0_true", "mu1_true"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(pop.n):
            row = [_fmt(v) for v in pop.x[i]] + [_fmt(pop.w[i]), _fmt(pop.y[i])]
            if pop.has_truth:
                row += [_fmt(pop.y0_true[i]), _fmt(pop.y1_true[i])]
            if pop.has_means:
                row += [_fmt(pop.mu0_true[i]), _fmt(pop.mu1_true[i])]
            writer.writerow(row)


def read_population_csv(path, pop_id: str, schema: DataSchema) -> PopulationData:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyPopulation(f"{path}: file is empty")
    header, body = rows[0], [r for r in rows[1:] if r]
    base = _column_names(schema.d_x) + ["w", "y"]
    truth, means = ["y0_true", "y1_true"], ["mu0_true", "mu1_true"]
    if header == base:
        has_truth = has_means = False
    elif header == base + truth:
        has_truth, has_means = True, False
    elif header == base + truth + means:
        has_truth = has_means = True
    else:
        raise SchemaMismatch(f"{path}: header {header} does not match schema with d_x={schema.d_x}")
    if not body:
        raise EmptyPopulation(f"{path}: population {pop_id!r} has no rows")
    width = len(header)
    for k, r in enumerate(body):
        if len(r) != width:
            raise SchemaMismatch(f"{path}: row {k} has {len(r)} fields, expected {width}")

    def num(s: str) -> float:
        return math.nan if s.strip() == "" else float(s)

    table = np.array([[num(s) for s in r] for r in body], dtype=np.float64)
    d = schema.d_x
    y0 = y1 = mu0 = mu1 = None
    if has_truth:
        y0, y1 = table[:, d + 2], table[:, d + 3]
        if np.all(np.isnan(y0)) and np.all(np.isnan(y1)):
            y0 = y1 = None
    if has_means and y0 is not None:
        mu0, mu1 = table[:, d + 4], table[:, d + 5]
        if np.all(np.isnan(mu0)) and np.all(np.isnan(mu1)):
            mu0 = mu1 = None
    return PopulationData(pop_id, table[:, :d], table[:, d], table[:, d + 1], schema,
                          y0, y1, mu0, mu1)


def _raise_on_findings(report: ValidationReport) -> None:
    for f in report:
        if f.kind == "EmptyPopulation":
            raise EmptyPopulation(f"population {f.pop_id!r} is empty")
        if f.kind in ("DimMismatch", "SchemaMismatch"):
            raise SchemaMismatch(f"population {f.pop_id!r}: {f.message}")
        if f.kind == "DuplicatePopId":
            raise ValueError(f"duplicate population id {f.pop_id!r}")
        if f.kind in ("NonBinary", "NonFinite"):
            raise ValueError(f"population {f.pop_id!r} row {f.row} column {f.column}: "
                             f"{f.kind} {f.message}".rstrip())


def load_dataset(paths: Mapping[str, str], schema: DataSchema, target: str) -> MultiSourceDataset:
    """Read one CSV per population and return a validated dataset.

    ``paths`` maps population id to file; ``target`` names the target id.
    Sources keep the iteration order of ``paths``.
    """
    if target not in paths:
        raise KeyError(f"target {target!r} not among populations {list(paths)}")
    pops = {pid: read_population_csv(p, pid, schema) for pid, p in paths.items()}
    data = MultiSourceDataset(pops[target], tuple(v for k, v in pops.items() if k != target))
    _raise_on_findings(validate(data))
    return data


# Manifest: "key = value" lines, '#' comments.
#   target = <pop_id>
#   outcome = continuous|binary
#   x_types = bbbb...c   (one code per proxy column)
#   pop.<pop_id> = <csv path, relative to the manifest>
#   any other key is carried through as metadata


def read_kv(path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, items: Mapping[str, object]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def load_manifest(path) -> MultiSourceDataset:
    kv = read_kv(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        schema = DataSchema.from_type_string(kv["x_types"], kv.get("outcome", "continuous"))
        target = kv["target"]
    except KeyError as exc:
        raise SchemaMismatch(f"{path}: manifest lacks key {exc}") from None
    paths = {k[4:]: os.path.join(base, v) for k, v in kv.items() if k.startswith("pop.")}
    return load_dataset(paths, schema, target)


def save_dataset(data: MultiSourceDataset, directory, extra: Optional[Mapping] = None) -> str:
    """Write one CSV per population plus ``manifest.txt``; return the manifest path."""
    os.makedirs(directory, exist_ok=True)
    items: Dict[str, object] = {
        "target": data.target.pop_id,
        "outcome": data.schema.outcome_kind.value,
        "x_types": data.schema.type_string(),
    }
    for pop in data.populations:
        fname = f"{pop.pop_id}.csv"
        write_population_csv(pop, os.path.join(directory, fname))
        items[f"pop.{pop.pop_id}"] = fname
    if extra:
        items.update(extra)
    manifest = os.path.join(directory, "manifest.txt")
    write_kv(manifest, items)
    return manifest


# ---------------------------------------------------------------- splitting


def split_target(data: MultiSourceDataset, spec: SplitSpec) -> Dict[str, MultiSourceDataset]:
    """Partition the target into train/val/test views.

    The partition is a seeded uniform draw without replacement; sources are
    attached unchanged to the train view only.
    """
    n = data.target.n
    total = spec.n_train + spec.n_val + spec.n_test
    if total > n:
        raise SplitTooLarge(f"split needs {total} rows, target has {n}")
    perm = rng_for(spec.seed, "split").permutation(n)
    a, b = spec.n_train, spec.n_train + spec.n_val
    parts = {
        "train": np.sort(perm[:a]),
        "val": np.sort(perm[a:b]),
        "test": np.sort(perm[b:total]),
    }
    return {
        "train": MultiSourceDataset(data.target.subset(parts["train"]), data.sources),
        "val": MultiSourceDataset(data.target.subset(parts["val"]), ()),
        "test": MultiSourceDataset(data.target.subset(parts["test"]), ()),
    }


# ---------------------------------------------------------------- stacking


@dataclass(frozen=True)
class Stacked:
    """Row-stacked view of all populations (target first) used by the fitters."""

    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    pop: np.ndarray
    sizes: tuple
    schema: DataSchema

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_pops(self) -> int:
        return len(self.sizes)


def stack(data: MultiSourceDataset) -> Stacked:
    pops = data.populations
    return Stacked(
        x=np.vstack([p.x for p in pops]),
        w=np.concatenate([p.w for p in pops]),
        y=np.concatenate([p.y for p in pops]),
        pop=np.concatenate([np.full(p.n, k, dtype=int) for k, p in enumerate(pops)]),
        sizes=tuple(p.n for p in pops),
        schema=data.schema,
    )
