"""Irregular multivariate series: data model, JSON-lines I/O, preprocessing, synthesis."""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DatasetError

__all__ = [
    "IrregularSeries",
    "Dataset",
    "Batch",
    "SynthSpec",
    "load_dataset",
    "save_dataset",
    "compute_stats",
    "normalize_impute",
    "generate_synthetic",
    "simulate_exact",
    "baseline_separability",
    "split",
    "collate",
    "segment_assignment",
]


@dataclass
class IrregularSeries:
    """One labelled sample: ``L`` timestamps, ``L x D`` values and mask, class index."""

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    label: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.label = int(self.label)

    @property
    def length(self):
        return len(self.times)

    @property
    def n_vars(self):
        return self.values.shape[1]

    def validate(self, line=None):
        if self.times.ndim != 1 or len(self.times) == 0:
            raise DatasetError("times must be a non-empty 1-d array", line)
        L = len(self.times)
        if self.values.ndim != 2 or self.values.shape[0] != L:
            raise DatasetError(f"values must have shape (L={L}, D), got {self.values.shape}", line)
        if self.mask.shape != self.values.shape:
            raise DatasetError(f"mask shape {self.mask.shape} != values shape {self.values.shape}", line)
        bad = np.flatnonzero(np.diff(self.times) <= 0)
        if bad.size:
            i = int(bad[0]) + 1
            raise DatasetError(f"times not strictly increasing at index {i} "
                               f"({self.times[i - 1]!r} -> {self.times[i]!r})", line)
        if not np.all(np.isfinite(self.times)):
            raise DatasetError("times must be finite", line)
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DatasetError("mask entries must be 0 or 1", line)
        if not np.all(np.isfinite(self.values[self.mask == 1])):
            raise DatasetError("observed values must be finite", line)
        if self.label < 0:
            raise DatasetError("label must be a nonnegative class index", line)
        return self


@dataclass
class Dataset:
    samples: List[IrregularSeries] = field(default_factory=list)
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index):
        if isinstance(index, (slice, list, np.ndarray)):
            idx = range(len(self))[index] if isinstance(index, slice) else index
            return Dataset([self.samples[i] for i in idx], self.mean, self.std)
        return self.samples[index]

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=int)

    @property
    def n_vars(self):
        return self.samples[0].n_vars if self.samples else 0


# --------------------------------------------------------------------------- I/O

def _record_to_series(record, line):
    try:
        times = np.asarray(record["times"], dtype=np.float64)
        mask = np.asarray(record["mask"], dtype=np.float64)
        raw = record["values"]
        label = record.get("label", 0)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed record: {exc}", line) from None
    try:
        values = np.array([[np.nan if v is None else v for v in row] for row in raw], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"malformed values: {exc}", line) from None
    if values.ndim != 2 and len(times):
        raise DatasetError("values must be a matrix", line)
    if values.shape == mask.shape:
        values = np.where(mask == 1, values, 0.0)
    if not isinstance(label, int) or isinstance(label, bool):
        raise DatasetError(f"label must be an integer, got {label!r}", line)
    return IrregularSeries(times, values, mask, label).validate(line)


def load_dataset(path):
    """Read one JSON record per line with keys ``times``, ``values``, ``mask``, ``label``.

    Missing values may be written as ``null`` (their mask must be 0) and are
    zero-imputed. If any timestamp lies outside ``[0, 1]`` every timestamp in
    the file is mapped affinely onto ``[0, 1]`` with the file-wide min/max.
    """
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(record, dict):
                raise DatasetError("record must be a JSON object", lineno)
            samples.append(_record_to_series(record, lineno))
    if samples:
        dims = {s.n_vars for s in samples}
        if len(dims) > 1:
            raise DatasetError(f"records disagree on the number of variables: {sorted(dims)}")
        lo = min(s.times[0] for s in samples)
        hi = max(s.times[-1] for s in samples)
        if lo < 0.0 or hi > 1.0:
            span = hi - lo if hi > lo else 1.0
            for s in samples:
                s.times = (s.times - lo) / span
    return Dataset(samples)


def save_dataset(dataset, path):
    with open(path, "w") as fh:
        for s in dataset:
            record = {
                "times": s.times.tolist(),
                "values": s.values.tolist(),
                "mask": s.mask.astype(int).tolist(),
                "label": int(s.label),
            }
            fh.write(json.dumps(record) + "\n")


# ------------------------------------------------------------------ preprocessing

def compute_stats(dataset, min_std=1e-8):
    """Per-variable mean/std over observed entries (variables never observed get (0, 1))."""
    D = dataset.n_vars
    total = np.zeros(D)
    total_sq = np.zeros(D)
    count = np.zeros(D)
    for s in dataset:
        total += (s.values * s.mask).sum(axis=0)
        count += s.mask.sum(axis=0)
    mean = np.divide(total, count, out=np.zeros(D), where=count > 0)
    for s in dataset:
        total_sq += (((s.values - mean) * s.mask) ** 2).sum(axis=0)
    var = np.divide(total_sq, count, out=np.ones(D), where=count > 0)
    std = np.sqrt(var)
    std[std < min_std] = 1.0
    return mean, std


def normalize_impute(dataset, stats=None):
    """Standardise observed entries and set unobserved ones to exactly 0.

    ``stats`` defaults to statistics of ``dataset`` itself, so pass the
    training split's ``(mean, std)`` when transforming validation/test data.
    """
    mean, std = compute_stats(dataset) if stats is None else stats
    out = []
    for s in dataset:
        vals = np.where(s.mask == 1, (s.values - mean) / std, 0.0)
        out.append(IrregularSeries(s.times.copy(), vals, s.mask.copy(), s.label))
    return Dataset(out, np.asarray(mean), np.asarray(std))


# ---------------------------------------------------------------------- synthesis

@dataclass
class SynthSpec:
    """Coupled linear consensus dynamics ``dx/dt = c (G - I) x`` with class-specific ``c``."""

    n_vars: int = 8
    length: int = 32
    n_samples: int = 600
    missing_rate: float = 0.5
    noise_std: float = 0.05
    coupling: Tuple[float, ...] = (0.5, 3.0)
    graph: Optional[List[List[float]]] = None
    class_graphs: bool = False
    degree: int = 2
    init_spread: float = 1.0
    init_noise: float = 0.3
    n_grid: int = 512
    seed: int = 0

    def __post_init__(self):
        self.coupling = tuple(float(c) for c in self.coupling)
        if self.n_vars < 1 or self.length < 1 or self.n_samples < 0:
            raise ConfigError("n_vars and length must be >= 1, n_samples >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if len(self.coupling) < 1:
            raise ConfigError("coupling needs one strength per class")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.graph is not None:
            G = np.asarray(self.graph, dtype=np.float64)
            if G.shape != (self.n_vars, self.n_vars) or np.any(G < 0) or not np.allclose(G.sum(1), 1.0):
                raise ConfigError("graph must be a row-stochastic n_vars x n_vars matrix")
        if self.degree < 1 or (self.n_vars > 1 and self.degree > self.n_vars - 1):
            raise ConfigError("degree must lie in [1, n_vars - 1]")

    @property
    def n_classes(self):
        return len(self.coupling)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["coupling"] = list(self.coupling)
        return d


def random_graph(n_vars, degree, rng):
    """Row-stochastic graph: each row spreads Dirichlet weights over ``degree`` other nodes."""
    G = np.zeros((n_vars, n_vars))
    if n_vars == 1:
        G[0, 0] = 1.0
        return G
    for i in range(n_vars):
        others = np.array([j for j in range(n_vars) if j != i])
        nbrs = rng.choice(others, size=degree, replace=False)
        G[i, nbrs] = rng.dirichlet(np.ones(degree))
    return G


def class_graphs(spec, rng):
    if spec.graph is not None:
        G = np.asarray(spec.graph, dtype=np.float64)
        return [G] * spec.n_classes
    if spec.class_graphs:
        return [random_graph(spec.n_vars, spec.degree, rng) for _ in range(spec.n_classes)]
    G = random_graph(spec.n_vars, spec.degree, rng)
    return [G] * spec.n_classes


def _rk4_step(K, x, h):
    """One RK4 step of ``dx/dt = K x``; ``K`` (..., D, D), ``x`` (..., D), ``h`` broadcastable."""
    def f(y):
        return np.einsum("...ij,...j->...i", K, y)

    h = np.asarray(h)[..., None]
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate(K, x0, times, n_grid):
    """RK4 on a uniform grid over [0, 1] plus a partial RK4 step to each sample time.

    ``K`` (N, D, D), ``x0`` (N, D), ``times`` (N, L) in [0, 1]; returns (N, L, D).
    """
    N, D = x0.shape
    h = 1.0 / n_grid
    grid = np.empty((n_grid + 1, N, D))
    grid[0] = x0
    x = x0
    for j in range(n_grid):
        x = _rk4_step(K, x, h)
        grid[j + 1] = x
    idx = np.minimum(np.floor(times / h).astype(int), n_grid)
    base = grid[idx, np.arange(N)[:, None]]
    rest = times - idx * h
    return _rk4_step(K[:, None], base, rest)


def simulate_exact(K, x0, times):
    """Matrix-exponential solution of the same linear system (reference path)."""
    from scipy.linalg import expm

    out = np.empty(times.shape + (x0.shape[-1],))
    for n in range(x0.shape[0]):
        for i, t in enumerate(times[n]):
            out[n, i] = expm(K[n] * t) @ x0[n]
    return out


def _sample_times(rng, n, L):
    out = np.empty((n, L))
    for i in range(n):
        while True:
            t = np.sort(rng.uniform(0.0, 1.0, L))
            if L == 1 or np.all(np.diff(t) > 0):
                break
        out[i] = t
    return out


def generate_synthetic(spec, return_truth=False):
    """Simulate a balanced dataset; class ``k`` uses coupling ``spec.coupling[k]``.

    With ``return_truth`` the per-class ground-truth graphs and the noiseless,
    fully observed trajectories are returned alongside the dataset.
    """
    rng = np.random.default_rng(spec.seed)
    graphs = class_graphs(spec, rng)
    N, D, L = spec.n_samples, spec.n_vars, spec.length
    labels = np.arange(N) % spec.n_classes
    profile = spec.init_spread * np.linspace(-1.0, 1.0, D) if D > 1 else np.zeros(1)
    x0 = profile + spec.init_noise * rng.standard_normal((N, D))
    K = np.stack([spec.coupling[y] * (graphs[y] - np.eye(D)) for y in labels]) if N else np.zeros((0, D, D))
    times = _sample_times(rng, N, L)
    clean = simulate(K, x0, times, spec.n_grid) if N else np.zeros((0, L, D))
    noisy = clean + spec.noise_std * rng.standard_normal(clean.shape)
    mask = (rng.random(clean.shape) >= spec.missing_rate).astype(np.float64)
    samples = [IrregularSeries(times[n], np.where(mask[n] == 1, noisy[n], 0.0), mask[n], int(labels[n]))
               for n in range(N)]
    ds = Dataset(samples)
    if return_truth:
        return ds, {"graphs": graphs, "clean": clean, "x0": x0, "K": K}
    return ds


def baseline_separability(dataset, seed=0):
    """Nearest-centroid accuracy on per-variable observed means (half/half split)."""
    feats = np.stack([
        np.divide((s.values * s.mask).sum(0), s.mask.sum(0), out=np.zeros(s.n_vars), where=s.mask.sum(0) > 0)
        for s in dataset
    ])
    y = dataset.labels
    order = np.random.default_rng(seed).permutation(len(y))
    half = len(y) // 2
    tr, te = order[:half], order[half:]
    classes = np.unique(y[tr])
    centroids = np.stack([feats[tr][y[tr] == c].mean(0) for c in classes])
    d = ((feats[te][:, None, :] - centroids[None]) ** 2).sum(-1)
    pred = classes[np.argmin(d, axis=1)]
    return float(np.mean(pred == y[te]))


# -------------------------------------------------------------------- splitting

def _split_sizes(n, fractions):
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes


def _stratified_counts(class_sizes, split_sizes):
    """Integer class-by-split table with the given margins and every cell within 1 of its share.

    Cells start at the floor of ``n_c * S_j / n``; the leftover units are
    placed by an integer max-flow over cells with a fractional share, which
    always saturates for two-way tables.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import maximum_flow

    n_c = np.asarray(class_sizes)
    S = np.asarray(split_sizes)
    share = np.outer(n_c, S) / max(n_c.sum(), 1)
    base = np.floor(share + 1e-9).astype(int)
    row_need = n_c - base.sum(1)
    col_need = S - base.sum(0)
    K, J = base.shape
    if row_need.sum() == 0:
        return base
    # nodes: 0 source, 1..K classes, K+1..K+J splits, K+J+1 sink
    edges = []
    for c in range(K):
        edges.append((0, 1 + c, row_need[c]))
        edges += [(1 + c, 1 + K + j, 1) for j in range(J) if share[c, j] - base[c, j] > 1e-9]
    edges += [(1 + K + j, K + J + 1, col_need[j]) for j in range(J)]
    src, dst, cap = zip(*edges)
    n_nodes = K + J + 2
    graph = csr_matrix((np.asarray(cap, dtype=np.int32), (src, dst)), shape=(n_nodes, n_nodes))
    flow = maximum_flow(graph, 0, n_nodes - 1)
    if flow.flow_value != row_need.sum():
        raise DatasetError("could not build a stratified split table")
    extra = flow.flow.toarray()[1:1 + K, 1 + K:1 + K + J]
    return base + np.maximum(extra, 0).astype(int)


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded, label-stratified split.

    Each class is shuffled and cut into contiguous pieces whose sizes keep
    every split within one sample of the global class proportions; each
    split is then shuffled.
    """
    fractions = tuple(fractions)
    if any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    y = dataset.labels
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    members = []
    for c in classes:
        idx = np.flatnonzero(y == c)
        if len(idx) < 3:
            raise DatasetError(f"class {c} has {len(idx)} samples; stratification needs >= 3")
        members.append(rng.permutation(idx))
    table = _stratified_counts([len(m) for m in members], _split_sizes(len(y), fractions))
    parts = [[] for _ in fractions]
    for m, counts in zip(members, table):
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            parts[j].extend(m[a:b].tolist())
    return tuple(dataset[list(rng.permutation(np.asarray(p, dtype=int)))] for p in parts)


# --------------------------------------------------------------------- batching

def segment_assignment(length, n_segments):
    """0-based segment index per observation; the last segment absorbs the remainder."""
    if n_segments > length:
        raise ConfigError(f"cannot split {length} observations into {n_segments} segments")
    size = length // n_segments
    return np.minimum(np.arange(length) // size, n_segments - 1)


@dataclass
class Batch:
    """Padded arrays for ``B`` series of possibly different lengths."""

    times: np.ndarray      # (B, L)
    values: np.ndarray     # (B, L, D)
    mask: np.ndarray       # (B, L, D)
    valid: np.ndarray      # (B, L) 1 for real observations
    lengths: np.ndarray    # (B,)
    labels: np.ndarray     # (B,)
    segments: np.ndarray   # (B, L) segment index per observation
    seg_weights: np.ndarray  # (B, C, L) averaging weights

    @property
    def size(self):
        return len(self.lengths)


def collate(samples: Sequence[IrregularSeries], n_segments):
    B = len(samples)
    L = max(s.length for s in samples)
    D = samples[0].n_vars
    times = np.zeros((B, L))
    values = np.zeros((B, L, D))
    mask = np.zeros((B, L, D))
    valid = np.zeros((B, L))
    segments = np.full((B, L), n_segments - 1, dtype=int)
    seg_w = np.zeros((B, n_segments, L))
    for b, s in enumerate(samples):
        n = s.length
        times[b, :n] = s.times
        times[b, n:] = s.times[-1]
        values[b, :n] = s.values
        mask[b, :n] = s.mask
        valid[b, :n] = 1.0
        seg = segment_assignment(n, n_segments)
        segments[b, :n] = seg
        counts = np.bincount(seg, minlength=n_segments)
        seg_w[b, seg, np.arange(n)] = 1.0 / counts[seg]
    lengths = np.array([s.length for s in samples])
    labels = np.array([s.label for s in samples])
    return Batch(times, values, mask, valid, lengths, labels, segments, seg_w)
