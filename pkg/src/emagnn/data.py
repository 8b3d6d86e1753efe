"""EMA cohorts: preprocessing, windowing, synthetic generation and file I/O."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LIKERT_MIN, LIKERT_MAX = 1, 7


class EmptyCohortError(ValueError):
    """A filter removed every individual."""


class CohortFormatError(ValueError):
    """A cohort file could not be parsed or failed validation."""


@dataclass
class RawCohort:
    """Likert ratings per individual as ``(T_i, V)`` arrays, NaN where unanswered."""

    ratings: dict[str, np.ndarray]
    variable_names: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for ind, arr in self.ratings.items():
            if arr.ndim != 2 or arr.shape[1] != len(self.variable_names):
                raise ValueError(f"individual {ind}: expected (T, {len(self.variable_names)}) ratings")
            seen = arr[~np.isnan(arr)]
            if seen.size and (np.any(seen != np.round(seen)) or seen.min() < LIKERT_MIN or seen.max() > LIKERT_MAX):
                raise ValueError(f"individual {ind}: ratings must be integers in {LIKERT_MIN}..{LIKERT_MAX}")

    @property
    def individuals(self) -> list[str]:
        return list(self.ratings)

    def compliance(self, individual: str) -> float:
        arr = self.ratings[individual]
        if arr.shape[0] == 0:
            return 0.0
        answered = ~np.all(np.isnan(arr), axis=1)
        return float(answered.mean())


@dataclass
class IndividualSeries:
    """One participant's normalized ``V x T`` series plus the stats that undo it."""

    individual_id: str
    values: np.ndarray
    variable_names: list[str]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.variable_names):
            raise ValueError("values must be V x T with one name per variable")
        if np.isnan(self.values).any():
            raise ValueError(f"individual {self.individual_id}: series still has missing entries")

    @property
    def V(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def inverse_transform(self, values: np.ndarray | None = None) -> np.ndarray:
        values = self.values if values is None else values
        if self.mean is None or self.std is None:
            return values.copy()
        return values * self.std[:, None] + self.mean[:, None]

    def segment(self, start: int, stop: int) -> "IndividualSeries":
        return IndividualSeries(self.individual_id, self.values[:, start:stop], list(self.variable_names),
                                self.mean, self.std)


@dataclass
class WindowedSamples:
    inputs: np.ndarray  # (n, L, V)
    targets: np.ndarray  # (n, V)
    L: int

    def __len__(self) -> int:
        return self.targets.shape[0]


@dataclass
class SyntheticSpec:
    n_individuals: int = 20
    n_variables: int = 26
    n_timepoints: int = 140
    density: float = 0.2
    radius_cap: float = 0.95
    noise_std: float = 0.3
    coupling: float = 2.0
    self_weight: float = 0.5
    missing_rate: float = 0.05
    likert_scale: float = 2.0
    burn_in: int = 100
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must lie in (0, 1], got {self.density}")
        if not 0.0 <= self.radius_cap < 1.0:
            raise ValueError(f"spectral radius cap must lie in [0, 1), got {self.radius_cap}")
        if self.n_variables < 2 or self.n_timepoints < 2 or self.n_individuals < 1:
            raise ValueError("need at least 1 individual, 2 variables and 2 timepoints")
        if self.coupling < 0 or self.self_weight < 0:
            raise ValueError("coupling and self_weight must be non-negative")
        if self.noise_std < 0 or not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("noise_std must be >= 0 and missing_rate in [0, 1)")


# ------------------------------------------------------------------ filtering
def filter_compliance(cohort: RawCohort, min_fraction: float = 0.5) -> RawCohort:
    """Keep individuals who answered at least ``min_fraction`` of their prompts."""
    if not 0.0 < min_fraction <= 1.0:
        raise ValueError(f"min_fraction must lie in (0, 1], got {min_fraction}")
    kept = {i: arr for i, arr in cohort.ratings.items() if cohort.compliance(i) >= min_fraction}
    if not kept:
        raise EmptyCohortError(f"no individual reaches compliance {min_fraction}")
    provenance = dict(cohort.provenance)
    provenance["compliance"] = {"min_fraction": min_fraction,
                                "removed": sorted(set(cohort.ratings) - set(kept))}
    return RawCohort(kept, list(cohort.variable_names), provenance)


def filter_low_variance(cohort: RawCohort, min_std: float = 0.1) -> RawCohort:
    """Drop variables whose raw-scale std falls below ``min_std`` for any individual.

    The surviving variable set is the intersection across individuals, so
    everyone keeps the same subset.
    """
    if min_std < 0:
        raise ValueError("min_std must be non-negative")
    keep = np.ones(len(cohort.variable_names), dtype=bool)
    for arr in cohort.ratings.values():
        with np.errstate(invalid="ignore"):
            std = np.nanstd(arr, axis=0)
        keep &= np.nan_to_num(std, nan=0.0) >= min_std
    if not keep.any():
        raise ValueError(f"every variable has std < {min_std}")
    names = [n for n, k in zip(cohort.variable_names, keep) if k]
    provenance = dict(cohort.provenance)
    provenance["variance"] = {"min_std": min_std,
                              "removed": [n for n, k in zip(cohort.variable_names, keep) if not k]}
    return RawCohort({i: arr[:, keep] for i, arr in cohort.ratings.items()}, names, provenance)


def impute(values: np.ndarray) -> np.ndarray:
    """Linear interpolation of interior gaps, nearest-value fill at the edges.

    ``values`` is ``V x T`` with NaN gaps; each row needs two observations.
    """
    values = np.array(values, dtype=np.float64)
    t = np.arange(values.shape[1])
    for v, row in enumerate(values):
        observed = ~np.isnan(row)
        if observed.sum() < 2:
            raise ValueError(f"variable {v} has fewer than 2 observed values")
        # np.interp holds the end values constant outside the observed range
        values[v] = np.interp(t, t[observed], row[observed])
    return values


def normalize_individual(values: np.ndarray, individual_id: str, variable_names: Sequence[str]) -> IndividualSeries:
    """Per-variable z-score with the population std (ddof=0)."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=1)
    std = values.std(axis=1)
    flat = np.flatnonzero(std == 0)
    if flat.size:
        raise ValueError(f"individual {individual_id}: zero variance in {variable_names[flat[0]]!r}")
    return IndividualSeries(individual_id, (values - mean[:, None]) / std[:, None], list(variable_names), mean, std)


def preprocess(cohort: RawCohort, min_compliance: float = 0.5, min_std: float = 0.1) -> tuple[list[IndividualSeries], dict]:
    """Compliance filter, variance filter, imputation and normalization."""
    cohort = filter_compliance(cohort, min_compliance)
    cohort = filter_low_variance(cohort, min_std)
    series = []
    for ind, arr in cohort.ratings.items():
        answered = ~np.all(np.isnan(arr), axis=1)
        # drop unanswered prompts at the edges, interpolate the rest
        first, last = np.flatnonzero(answered)[[0, -1]]
        filled = impute(arr[first:last + 1].T)
        series.append(normalize_individual(filled, ind, cohort.variable_names))
    return series, cohort.provenance


# ------------------------------------------------------------ splitting, windows
def split_sequential(series: IndividualSeries, train_fraction: float = 0.7) -> tuple[IndividualSeries, IndividualSeries]:
    if series.T < 10:
        raise ValueError(f"series of length {series.T} is too short to split (need >= 10)")
    cut = math.floor(train_fraction * series.T)
    return series.segment(0, cut), series.segment(cut, series.T)


def make_windows(segment: np.ndarray, L: int, prefix: np.ndarray | None = None) -> WindowedSamples:
    """Sliding windows over a ``V x T`` segment: ``x[t-L:t]`` predicts ``x[t]``.

    Without ``prefix`` there are ``T - L`` samples.  With ``prefix`` (the
    preceding segment) its last ``L`` points are borrowed, so every point of
    ``segment`` becomes a target.
    """
    if L < 1:
        raise ValueError("window length must be >= 1")
    data = np.asarray(segment, dtype=np.float64)
    if prefix is not None:
        prefix = np.asarray(prefix, dtype=np.float64)
        if prefix.shape[1] < L:
            raise ValueError(f"prefix needs at least {L} points")
        data = np.concatenate([prefix[:, -L:], data], axis=1)
    T = data.shape[1]
    if L >= T:
        raise ValueError(f"window length {L} must be shorter than the segment ({T})")
    X = data.T  # (T, V)
    view = np.lib.stride_tricks.sliding_window_view(X, L, axis=0)  # (T-L+1, V, L)
    inputs = np.ascontiguousarray(view[:-1].transpose(0, 2, 1))
    targets = X[L:].copy()
    return WindowedSamples(inputs, targets, L)


def train_test_windows(series: IndividualSeries, L: int, train_fraction: float = 0.7) -> tuple[WindowedSamples, WindowedSamples]:
    """Windows for the sequential split; test windows borrow from the training tail."""
    train, test = split_sequential(series, train_fraction)
    return make_windows(train.values, L), make_windows(test.values, L, prefix=train.values)


# ------------------------------------------------------------------ synthetic
def _planted_adjacency(rng: np.random.Generator, V: int, density: float) -> np.ndarray:
    iu = np.triu_indices(V, k=1)
    n_edges = int(round(density * len(iu[0])))
    chosen = rng.choice(len(iu[0]), size=n_edges, replace=False)
    weights = np.zeros((V, V))
    weights[iu[0][chosen], iu[1][chosen]] = rng.uniform(0.5, 1.0, size=n_edges)
    return weights + weights.T


def var_coefficients(weights: np.ndarray, rng: np.random.Generator, coupling: float,
                     self_weight: float, radius_cap: float) -> np.ndarray:
    """VAR(1) coefficients on the support of ``weights`` plus a self-persistence diagonal.

    Each undirected edge is given one direction from a random node order, so
    the coupling part is nilpotent; incoming weights are scaled by
    ``coupling / sqrt(in-degree)``.  The result is rescaled only if its
    spectral radius exceeds ``radius_cap``.
    """
    V = weights.shape[0]
    rank = np.empty(V, dtype=int)
    rank[rng.permutation(V)] = np.arange(V)
    directed = np.where(rank[:, None] > rank[None, :], weights, 0.0)
    indeg = np.maximum((directed > 0).sum(axis=1), 1)
    coef = coupling * directed / np.sqrt(indeg)[:, None] + self_weight * np.eye(V)
    radius = np.max(np.abs(np.linalg.eigvals(coef))) if coef.any() else 0.0
    if radius > radius_cap:
        coef = coef * (radius_cap / radius)
    return coef


def simulate_var_tanh(coef: np.ndarray, T: int, noise_std: float, rng: np.random.Generator,
                      burn_in: int = 100) -> np.ndarray:
    """Simulate ``x_t = tanh(coef @ x_{t-1}) + eps``; returns ``T x V``."""
    V = coef.shape[0]
    x = rng.normal(0.0, noise_std, size=V) if noise_std > 0 else np.zeros(V)
    out = np.empty((T, V))
    for t in range(burn_in + T):
        x = np.tanh(coef @ x) + rng.normal(0.0, noise_std, size=V)
        if t >= burn_in:
            out[t - burn_in] = x
    return out


def generate_raw(spec: SyntheticSpec) -> tuple[RawCohort, list[np.ndarray]]:
    """Raw Likert cohort and the planted weight matrices, one per individual."""
    spec.validate()
    V = spec.n_variables
    names = [f"var_{j + 1}" for j in range(V)]
    root = np.random.SeedSequence(spec.seed)
    ratings, planted = {}, []
    for i, child in enumerate(root.spawn(spec.n_individuals)):
        rng = np.random.default_rng(child)
        weights = _planted_adjacency(rng, V, spec.density)
        coef = var_coefficients(weights, rng, spec.coupling, spec.self_weight, spec.radius_cap)
        x = simulate_var_tanh(coef, spec.n_timepoints, spec.noise_std, rng, spec.burn_in)
        likert = np.clip(np.round(4.0 + spec.likert_scale * x), LIKERT_MIN, LIKERT_MAX)
        if spec.missing_rate > 0:
            # an unanswered prompt blanks every variable at that timepoint
            gone = rng.random(spec.n_timepoints) < spec.missing_rate
            likert[gone] = np.nan
        ratings[f"ind_{i + 1:03d}"] = likert
        planted.append(weights)
    provenance = {"generator": "var1_tanh", "seed": spec.seed, "spec": dict(spec.__dict__)}
    return RawCohort(ratings, names, provenance), planted


def generate_synthetic(spec: SyntheticSpec, min_compliance: float = 0.5, min_std: float = 0.1):
    """Preprocessed synthetic cohort and its planted graphs.

    Returns ``(series, graphs, provenance)``; graphs are restricted to the
    variables and individuals that survive the filters.
    """
    from .graphs import Graph

    raw, planted = generate_raw(spec)
    series, provenance = preprocess(raw, min_compliance, min_std)
    index = {name: j for j, name in enumerate(raw.variable_names)}
    order = {ind: k for k, ind in enumerate(raw.ratings)}
    graphs = []
    for s in series:
        keep = [index[n] for n in s.variable_names]
        w = planted[order[s.individual_id]][np.ix_(keep, keep)]
        graphs.append(Graph(w, "PLANTED", 1.0, seed=spec.seed, node_names=list(s.variable_names)))
    return series, graphs, provenance


# ----------------------------------------------------------------------- I/O
def _sidecar(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def save_cohort(series: Sequence[IndividualSeries], path, provenance: dict | None = None) -> None:
    """Normalized cohort as long CSV plus a JSON sidecar with the z-score stats."""
    path = Path(path)
    names = list(series[0].variable_names)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["individual_id", "t", *names])
        for s in series:
            if list(s.variable_names) != names:
                raise ValueError("all individuals must share one variable set")
            for t in range(s.T):
                w.writerow([s.individual_id, t, *(format(v, ".17g") for v in s.values[:, t])])
    meta = {
        "kind": "normalized",
        "variables": names,
        "individuals": {
            s.individual_id: {
                "mean": None if s.mean is None else [float(m) for m in s.mean],
                "std": None if s.std is None else [float(d) for d in s.std],
            }
            for s in series
        },
        "provenance": provenance or {},
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2, default=_json_default))


def save_raw_cohort(cohort: RawCohort, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["individual_id", "t", *cohort.variable_names])
        for ind, arr in cohort.ratings.items():
            for t, row in enumerate(arr):
                w.writerow([ind, t, *("" if np.isnan(v) else int(v) for v in row)])
    meta = {"kind": "raw", "variables": list(cohort.variable_names), "provenance": cohort.provenance}
    _sidecar(path).write_text(json.dumps(meta, indent=2, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _read_rows(path: Path, required: Sequence[str] = ()):
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError(f"{path}: empty file") from None
        for col in ("individual_id", "t", *required):
            if col not in header:
                raise CohortFormatError(f"{path}: missing column {col!r}")
        names = [h for h in header if h not in ("individual_id", "t")]
        if not names:
            raise CohortFormatError(f"{path}: no variable columns")
        rows: dict[str, list[tuple[int, list[str]]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CohortFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            try:
                t = int(rec["t"])
            except ValueError:
                raise CohortFormatError(f"{path}:{lineno}: bad timepoint {rec['t']!r}") from None
            rows.setdefault(rec["individual_id"], []).append((t, [rec[n] for n in names], lineno))
    return names, rows


def cohort_kind(path) -> str:
    side = _sidecar(Path(path))
    if side.exists():
        return json.loads(side.read_text()).get("kind", "normalized")
    return "normalized"


def load_cohort(path, required: Sequence[str] = ()) -> list[IndividualSeries]:
    """Inverse of :func:`save_cohort`."""
    path = Path(path)
    names, rows = _read_rows(path, required)
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    stats = meta.get("individuals", {})
    series = []
    for ind, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        values = np.empty((len(names), len(recs)))
        for k, (t, cells, lineno) in enumerate(recs):
            try:
                values[:, k] = [float(c) if c != "" else np.nan for c in cells]
            except ValueError:
                raise CohortFormatError(f"{path}:{lineno}: non-numeric value") from None
        if np.isnan(values).any():
            raise CohortFormatError(f"{path}: individual {ind} has missing values; load it as a raw cohort")
        st = stats.get(ind, {})
        mean = np.array(st["mean"]) if st.get("mean") is not None else None
        std = np.array(st["std"]) if st.get("std") is not None else None
        series.append(IndividualSeries(ind, values, names, mean, std))
    return series


def load_raw_cohort(path, required: Sequence[str] = ()) -> RawCohort:
    """Read integer Likert ratings; empty cells are missing prompts."""
    path = Path(path)
    names, rows = _read_rows(path, required)
    ratings = {}
    for ind, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        arr = np.full((len(recs), len(names)), np.nan)
        for k, (t, cells, lineno) in enumerate(recs):
            for j, c in enumerate(cells):
                if c == "":
                    continue
                try:
                    value = float(c)
                except ValueError:
                    raise CohortFormatError(f"{path}:{lineno}: non-numeric rating {c!r}") from None
                if value != round(value) or not LIKERT_MIN <= value <= LIKERT_MAX:
                    raise CohortFormatError(
                        f"{path}:{lineno}: rating {c!r} for {names[j]} outside {LIKERT_MIN}..{LIKERT_MAX}")
                arr[k, j] = value
        ratings[ind] = arr
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
    return RawCohort(ratings, names, meta.get("provenance", {}))
