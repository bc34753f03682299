"""Two-level random-intercept model: truth, synthetic data, design matrices.

The generating model uses a latent decomposition of each predictor into a
cluster mean and a centered within-cluster part:

    y_ij = g00 + gw1*x1_ij + gw2*x2_ij + gb1*z1_j + gb2*z2_j + u_j + e_ij

with u_j ~ N(0, tau2) and e_ij ~ N(0, sigma2).  Datasets keep the centered
within columns and the cluster-mean columns separately so both halves of the
decomposition are observable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ConditionSpec",
    "TrueParams",
    "TwoLevelDataset",
    "ModelFormula",
    "DesignMatrices",
    "solve_condition",
    "generate",
    "build_design",
    "write_dataset_csv",
    "read_dataset_csv",
]

CENTER_TOL = 1e-10


def _check_unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value < 1.0:
        raise ValueError(f"{name} must lie in [0, 1), got {value!r}")
    return value


@dataclass(frozen=True)
class ConditionSpec:
    """One simulation condition: sizes, ICC, and per-level R-squared."""

    n_clusters: int
    cluster_size: int
    icc: float
    r2_within: float
    r2_between: float
    total_variance: float = 1.0

    def __post_init__(self) -> None:
        if int(self.n_clusters) != self.n_clusters or self.n_clusters < 2:
            raise ValueError(f"n_clusters must be an integer >= 2, got {self.n_clusters!r}")
        if int(self.cluster_size) != self.cluster_size or self.cluster_size < 2:
            raise ValueError(f"cluster_size must be an integer >= 2, got {self.cluster_size!r}")
        object.__setattr__(self, "n_clusters", int(self.n_clusters))
        object.__setattr__(self, "cluster_size", int(self.cluster_size))
        object.__setattr__(self, "icc", _check_unit_interval("icc", self.icc))
        object.__setattr__(self, "r2_within", _check_unit_interval("r2_within", self.r2_within))
        object.__setattr__(self, "r2_between", _check_unit_interval("r2_between", self.r2_between))
        tv = float(self.total_variance)
        if not math.isfinite(tv) or tv <= 0.0:
            raise ValueError(f"total_variance must be positive, got {tv!r}")
        object.__setattr__(self, "total_variance", tv)

    @property
    def n_rows(self) -> int:
        return self.n_clusters * self.cluster_size


@dataclass(frozen=True)
class TrueParams:
    """Generating parameter values for one condition."""

    grand_mean: float
    within_slopes: tuple[float, float]
    between_slopes: tuple[float, float]
    tau2: float
    sigma2: float

    def __post_init__(self) -> None:
        for name in ("within_slopes", "between_slopes"):
            slopes = tuple(float(v) for v in getattr(self, name))
            if len(slopes) != 2:
                raise ValueError(f"{name} must hold exactly two coefficients")
            object.__setattr__(self, name, slopes)
        if self.tau2 < 0.0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2!r}")
        if self.sigma2 <= 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2!r}")
        object.__setattr__(self, "grand_mean", float(self.grand_mean))
        object.__setattr__(self, "tau2", float(self.tau2))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    def as_dict(self) -> dict[str, float]:
        return {
            "grand_mean": self.grand_mean,
            "within_slope_1": self.within_slopes[0],
            "within_slope_2": self.within_slopes[1],
            "between_slope_1": self.between_slopes[0],
            "between_slope_2": self.between_slopes[1],
            "intercept_variance": self.tau2,
            "residual_variance": self.sigma2,
        }


def solve_condition(spec: ConditionSpec) -> TrueParams:
    """Translate (ICC, R2 per level, total variance) into generating values.

    The total variance splits into between and within shares by the ICC;
    each level's R2 is then divided equally across that level's two
    independent unit-variance predictors, leaving the remainder to the
    variance component.
    """
    v_between = spec.icc * spec.total_variance
    v_within = (1.0 - spec.icc) * spec.total_variance
    tau2 = (1.0 - spec.r2_between) * v_between
    sigma2 = (1.0 - spec.r2_within) * v_within
    slope_b = math.sqrt(spec.r2_between * v_between / 2.0)
    slope_w = math.sqrt(spec.r2_within * v_within / 2.0)
    return TrueParams(
        grand_mean=0.0,
        within_slopes=(slope_w, slope_w),
        between_slopes=(slope_b, slope_b),
        tau2=tau2,
        sigma2=sigma2,
    )


def _frozen(values: np.ndarray, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.ndim != 1:
        raise ValueError("dataset columns must be one-dimensional")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TwoLevelDataset:
    """Immutable clustered dataset with separated within and between columns.

    ``cluster`` holds contiguous indices 0..J-1 (every index present).  L2
    columns must be exactly constant within each cluster.  When
    ``l1_centered`` is set, every L1 column must sum to zero within each
    cluster to 1e-10 per row.
    """

    cluster: np.ndarray
    y: np.ndarray
    l1: Mapping[str, np.ndarray]
    l2: Mapping[str, np.ndarray]
    interactions: Mapping[str, np.ndarray] = field(default_factory=dict)
    l1_centered: bool = True
    cluster_labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        cluster = np.array(self.cluster, dtype=np.int64)
        if cluster.ndim != 1 or cluster.size == 0:
            raise ValueError("cluster must be a nonempty one-dimensional index array")
        n = cluster.size
        n_clusters = int(cluster.max()) + 1 if cluster.size else 0
        present = np.bincount(cluster[cluster >= 0], minlength=max(n_clusters, 1))
        if cluster.min() < 0 or np.any(present == 0):
            raise ValueError("cluster indices must be contiguous 0..J-1 with every index present")
        cluster.setflags(write=False)
        object.__setattr__(self, "cluster", cluster)
        object.__setattr__(self, "y", self._column("y", self.y, n))
        object.__setattr__(
            self, "l1", {k: self._column(k, v, n) for k, v in dict(self.l1).items()}
        )
        object.__setattr__(
            self, "l2", {k: self._column(k, v, n) for k, v in dict(self.l2).items()}
        )
        object.__setattr__(
            self,
            "interactions",
            {k: self._column(k, v, n) for k, v in dict(self.interactions).items()},
        )
        if self.cluster_labels is not None:
            labels = tuple(str(v) for v in self.cluster_labels)
            if len(labels) != n_clusters:
                raise ValueError("cluster_labels must supply one label per cluster")
            object.__setattr__(self, "cluster_labels", labels)
        self._validate_structure()

    @staticmethod
    def _column(name: str, values, n: int) -> np.ndarray:
        arr = _frozen(values)
        if arr.size != n:
            raise ValueError(f"column {name!r} has {arr.size} rows, expected {n}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"column {name!r} contains non-finite values")
        return arr

    def _validate_structure(self) -> None:
        first_idx = np.full(self.n_clusters, -1, dtype=np.int64)
        seen = np.zeros(self.n_clusters, dtype=bool)
        for i, j in enumerate(self.cluster):
            if not seen[j]:
                seen[j] = True
                first_idx[j] = i
        for name, col in self.l2.items():
            if np.any(col != col[first_idx][self.cluster]):
                raise ValueError(f"L2 column {name!r} is not constant within every cluster")
        if self.l1_centered:
            sizes = self.cluster_sizes
            for name, col in self.l1.items():
                sums = np.bincount(self.cluster, weights=col, minlength=self.n_clusters)
                if np.any(np.abs(sums) > CENTER_TOL * sizes):
                    raise ValueError(
                        f"L1 column {name!r} is flagged centered but does not sum to "
                        "zero within every cluster"
                    )

    @property
    def n_rows(self) -> int:
        return self.cluster.size

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max()) + 1

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def column(self, name: str) -> np.ndarray:
        for group in (self.l1, self.l2, self.interactions):
            if name in group:
                return group[name]
        raise KeyError(f"unknown column {name!r}")

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self.l1) + tuple(self.l2) + tuple(self.interactions)


def generate(
    spec: ConditionSpec, params: TrueParams, rng: np.random.Generator
) -> TwoLevelDataset:
    """Simulate one balanced dataset from the generating model.

    Draw order is fixed (cluster means, random intercepts, within parts,
    residuals) so a given stream always yields the same dataset.  Within
    parts are centered against their empirical cluster means, which makes
    the centering invariant exact and keeps the fitted decomposition aligned
    with the generating one.
    """
    j, m = spec.n_clusters, spec.cluster_size
    n = j * m
    cluster = np.repeat(np.arange(j), m)
    mu1 = rng.standard_normal(j)
    mu2 = rng.standard_normal(j)
    u = rng.standard_normal(j) * math.sqrt(params.tau2)
    w1 = rng.standard_normal(n)
    w2 = rng.standard_normal(n)
    eps = rng.standard_normal(n) * math.sqrt(params.sigma2)
    x1 = w1 - np.bincount(cluster, weights=w1)[cluster] / m
    x2 = w2 - np.bincount(cluster, weights=w2)[cluster] / m
    z1 = mu1[cluster]
    z2 = mu2[cluster]
    gw1, gw2 = params.within_slopes
    gb1, gb2 = params.between_slopes
    y = (
        params.grand_mean
        + gw1 * x1
        + gw2 * x2
        + gb1 * z1
        + gb2 * z2
        + u[cluster]
        + eps
    )
    return TwoLevelDataset(
        cluster=cluster,
        y=y,
        l1={"x1": x1, "x2": x2},
        l2={"z1": z1, "z2": z2},
        l1_centered=True,
    )


@dataclass(frozen=True)
class ModelFormula:
    """Which columns enter the fixed part, by role.

    Interactions are written ``"a:b"`` and expand to the elementwise product
    of the two named parent columns.
    """

    l1: tuple[str, ...] = ()
    l2: tuple[str, ...] = ()
    interactions: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "l1", tuple(self.l1))
        object.__setattr__(self, "l2", tuple(self.l2))
        object.__setattr__(self, "interactions", tuple(self.interactions))
        names = list(self.l1) + list(self.l2)
        if len(set(names)) != len(names):
            raise ValueError("formula names a column more than once")
        for term in self.interactions:
            if term.count(":") != 1 or not all(term.split(":")):
                raise ValueError(f"interaction term must be 'a:b', got {term!r}")

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return ("intercept",) + self.l1 + self.l2 + self.interactions

    @classmethod
    def simulation_default(cls) -> "ModelFormula":
        return cls(l1=("x1", "x2"), l2=("z1", "z2"))


@dataclass(frozen=True)
class DesignMatrices:
    """Fixed-effects matrix plus the cluster index that pairs with it."""

    x: np.ndarray
    columns: tuple[str, ...]
    cluster: np.ndarray

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float)
        if x.ndim != 2 or x.shape[1] != len(self.columns):
            raise ValueError("design matrix shape does not match its column names")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "columns", tuple(self.columns))


def build_design(dataset: TwoLevelDataset, formula: ModelFormula) -> DesignMatrices:
    """Assemble the fixed-effects matrix: intercept, L1, L2, interactions."""
    n = dataset.n_rows
    cols: list[np.ndarray] = [np.ones(n)]
    for name in formula.l1:
        if name not in dataset.l1:
            raise ValueError(f"unknown L1 column {name!r}")
        cols.append(dataset.l1[name])
    for name in formula.l2:
        if name not in dataset.l2:
            raise ValueError(f"unknown L2 column {name!r}")
        cols.append(dataset.l2[name])
    for term in formula.interactions:
        left, right = term.split(":")
        cols.append(dataset.column(left) * dataset.column(right))
    x = np.column_stack(cols)
    return DesignMatrices(x=x, columns=formula.fixed_names, cluster=dataset.cluster)


def write_dataset_csv(dataset: TwoLevelDataset, path) -> None:
    """Write ``cluster,y,<l1...>,<l2...>[,<interactions...>]`` at full precision."""
    names = dataset.column_names
    labels = dataset.cluster_labels
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "y", *names])
        for i in range(dataset.n_rows):
            j = int(dataset.cluster[i])
            label = labels[j] if labels is not None else j
            writer.writerow(
                [label, repr(float(dataset.y[i]))]
                + [repr(float(dataset.column(name)[i])) for name in names]
            )


def read_dataset_csv(
    path,
    l1_columns: Sequence[str],
    l2_columns: Sequence[str],
    center_l1: bool = False,
) -> TwoLevelDataset:
    """Load a clustered CSV, mapping cluster labels to 0..J-1 by first appearance.

    Requires ``cluster`` and ``y`` columns plus every named predictor column.
    With ``center_l1`` the L1 columns are centered against their cluster
    means at ingestion; otherwise centering is detected from the data and
    recorded on the returned dataset.
    """
    l1_columns = list(l1_columns)
    l2_columns = list(l2_columns)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file, expected a CSV header")
        header = list(reader.fieldnames)
        missing = [
            c for c in ["cluster", "y", *l1_columns, *l2_columns] if c not in header
        ]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    label_to_index: dict[str, int] = {}
    cluster = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        label = row["cluster"]
        if label not in label_to_index:
            label_to_index[label] = len(label_to_index)
        cluster[i] = label_to_index[label]

    def parse(name: str) -> np.ndarray:
        try:
            return np.array([float(row[name]) for row in rows])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: column {name!r} has a non-numeric value") from exc

    y = parse("y")
    l1 = {name: parse(name) for name in l1_columns}
    l2 = {name: parse(name) for name in l2_columns}
    sizes = np.bincount(cluster)
    if center_l1:
        for name, col in l1.items():
            l1[name] = col - (np.bincount(cluster, weights=col) / sizes)[cluster]
        centered = True
    else:
        centered = all(
            np.all(
                np.abs(np.bincount(cluster, weights=col)) <= CENTER_TOL * sizes
            )
            for col in l1.values()
        )
    return TwoLevelDataset(
        cluster=cluster,
        y=y,
        l1=l1,
        l2=l2,
        l1_centered=centered,
        cluster_labels=tuple(label_to_index),
    )
