"""Probability measures as particle clouds, Wasserstein distances, and measure flows.

A measure here is always a finitely supported probability measure on R^d,
stored as an (n, d) array of atoms with nonnegative weights summing to one.
Distances between 1-d measures use the quantile coupling, which is exact for
weighted atoms; higher dimensions use exact assignment (small clouds) or a
debiased entropic approximation.  A :class:`MeasureFlow` is the discrete
stand-in for a continuous path of measures: a uniform time grid with one
measure per node and an extension rule for times outside the window.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    ConstructionError,
    CoverageError,
    DistanceError,
    FlowRangeError,
    SizeLimitError,
)

__all__ = [
    "EmpiricalMeasure",
    "MeasureFlow",
    "FlowMetric",
    "from_samples",
    "dirac",
    "mean",
    "moment",
    "shift_measure",
    "resample",
    "wasserstein_1d",
    "wasserstein_nd",
    "flow_eval",
    "flow_seminorm",
    "flow_metric",
    "constant_flow",
    "with_extension",
    "flow_to_csv",
    "flow_from_csv",
    "flow_to_bytes",
    "flow_from_bytes",
]

_WEIGHT_TOL = 1e-12
_NODE_SNAP = 1e-9
_EXTENSIONS = ("none", "constant", "periodic")
_SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted particle cloud on R^d.

    ``points`` has shape (n, d) and ``weights`` shape (n,); weights are
    nonnegative and sum to one.  Instances are immutable: the backing arrays
    are marked read-only so a measure can be shared freely across workers.
    Use :func:`from_samples` to construct one with validation and canonical
    ordering (sorted by first coordinate when d = 1).
    """

    points: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def uniform(self) -> bool:
        w0 = 1.0 / self.n_atoms
        return bool(np.all(np.abs(self.weights - w0) <= _WEIGHT_TOL))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
        )


def _freeze(points: np.ndarray, weights: np.ndarray) -> EmpiricalMeasure:
    points = np.ascontiguousarray(points, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    points.flags.writeable = False
    weights.flags.writeable = False
    return EmpiricalMeasure(points, weights)


def _raw(points: np.ndarray, weights: Optional[np.ndarray] = None) -> EmpiricalMeasure:
    """Internal constructor: no validation, no reordering.

    Used by the integrators to record ensemble states without disturbing the
    particle-to-noise pairing; the ensemble is known finite there.
    """
    if weights is None:
        n = points.shape[0]
        weights = np.full(n, 1.0 / n)
    return _freeze(points, weights)


def from_samples(points, weights=None) -> EmpiricalMeasure:
    """Build a measure from atom locations and optional weights.

    Weights default to uniform and are normalized to sum to one.  Rejects
    empty input, non-finite coordinates, and negative weights.  For d = 1 the
    atoms are sorted by position (canonical form).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ConstructionError("points must be a nonempty (n, d) array")
    if not np.all(np.isfinite(pts)):
        raise ConstructionError("points contain NaN or infinity")
    n = pts.shape[0]
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ConstructionError(f"weights shape {w.shape} does not match {n} points")
        if not np.all(np.isfinite(w)):
            raise ConstructionError("weights contain NaN or infinity")
        if np.any(w < 0):
            raise ConstructionError("weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise ConstructionError("weights must have positive total mass")
        w = w / total
    if pts.shape[1] == 1:
        order = np.argsort(pts[:, 0], kind="stable")
        pts = pts[order]
        w = w[order]
    return _freeze(pts.copy(), w.copy())


def dirac(x, dim: Optional[int] = None) -> EmpiricalMeasure:
    """Point mass at ``x`` (scalar or vector)."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if dim is not None and arr.shape != (dim,):
        raise ConstructionError(f"dirac location has shape {arr.shape}, expected ({dim},)")
    return from_samples(arr[None, :])


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    """Weighted mean vector of the cloud."""
    return mu.weights @ mu.points


def moment(mu: EmpiricalMeasure, p: float) -> float:
    """Return the p-th absolute moment, the integral of |x|^p.

    Note this is the p-th *power* of the usual p-norm of the measure.
    """
    if p < 1:
        raise ConstructionError(f"moment order must be >= 1, got {p}")
    norms = np.sqrt(np.einsum("ij,ij->i", mu.points, mu.points))
    return float(mu.weights @ norms**p)


def shift_measure(mu: EmpiricalMeasure, a) -> EmpiricalMeasure:
    """Translate the measure by +a: the result assigns to A the mass mu(A - a)."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if a.shape != (mu.dim,):
        raise ConstructionError(f"shift vector has shape {a.shape}, expected ({mu.dim},)")
    return _freeze(mu.points + a, mu.weights.copy())


def _sorted_1d(mu: EmpiricalMeasure):
    x = mu.points[:, 0]
    if np.all(x[:-1] <= x[1:]):
        return x, mu.weights
    order = np.argsort(x, kind="stable")
    return x[order], mu.weights[order]


def quantiles_1d(mu: EmpiricalMeasure, qs: np.ndarray) -> np.ndarray:
    """Values of the generalized inverse CDF at levels ``qs`` (d = 1 only)."""
    if mu.dim != 1:
        raise DistanceError("quantiles_1d requires dim = 1")
    x, w = _sorted_1d(mu)
    cw = np.cumsum(w)
    idx = np.searchsorted(cw, qs, side="left")
    return x[np.minimum(idx, len(x) - 1)]


def resample(mu: EmpiricalMeasure, n: int, seed: int = 0) -> EmpiricalMeasure:
    """Canonical equal-weight representation with exactly ``n`` atoms.

    d = 1 uses inverse-CDF sampling at the midpoint levels (i + 1/2)/n, which
    is deterministic; d > 1 falls back to multinomial resampling driven by a
    counter-based generator keyed on ``seed``.
    """
    if n < 1:
        raise ConstructionError("resample size must be >= 1")
    if mu.dim == 1:
        qs = (np.arange(n) + 0.5) / n
        pts = quantiles_1d(mu, qs)[:, None]
        return _raw(pts)
    gen = np.random.Generator(np.random.Philox(key=int(seed) & ((1 << 128) - 1)))
    idx = gen.choice(mu.n_atoms, size=n, p=mu.weights)
    return _raw(mu.points[np.sort(idx)])


# ---------------------------------------------------------------------------
# Wasserstein distances
# ---------------------------------------------------------------------------

def wasserstein_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> float:
    """Exact p-Wasserstein distance between two 1-d atomic measures.

    Computed through the quantile coupling: the integral of
    |F_mu^{-1}(q) - F_nu^{-1}(q)|^p over the common refinement of the two
    cumulative-weight ladders, which is the optimal coupling in one dimension.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise DistanceError("wasserstein_1d requires both measures to have dim = 1")
    if p < 1:
        raise ConstructionError(f"order p must be >= 1, got {p}")
    x, wx = _sorted_1d(mu)
    y, wy = _sorted_1d(nu)
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    qs = np.union1d(cx, cy)
    qs = qs[qs < 1.0 + _WEIGHT_TOL]
    levels = np.concatenate([[0.0], np.minimum(qs, 1.0)])
    levels = np.unique(levels)
    if levels[-1] < 1.0:
        levels = np.append(levels, 1.0)
    dq = np.diff(levels)
    mids = 0.5 * (levels[:-1] + levels[1:])
    xi = x[np.minimum(np.searchsorted(cx, mids, side="left"), len(x) - 1)]
    yi = y[np.minimum(np.searchsorted(cy, mids, side="left"), len(y) - 1)]
    diff = np.abs(xi - yi)
    if p == 1:
        cost = float(dq @ diff)
    elif p == 2:
        cost = float(dq @ (diff * diff))
    else:
        cost = float(dq @ diff**p)
    return cost ** (1.0 / p)


EXACT_ASSIGNMENT_LIMIT = 512


def _pairwise_cost(a: np.ndarray, b: np.ndarray, p: float) -> np.ndarray:
    d2 = np.sum(a[:, None, :] ** 2, axis=2) - 2.0 * a @ b.T + np.sum(b[None, :, :] ** 2, axis=2)
    np.maximum(d2, 0.0, out=d2)
    if p == 2:
        return d2
    return d2 ** (p / 2.0)


def _sinkhorn_cost(wa, wb, cost, eps, iters) -> float:
    """Entropic transport cost <pi, C> by log-domain Sinkhorn iterations."""
    logwa = np.log(wa)
    logwb = np.log(wb)
    f = np.zeros(len(wa))
    g = np.zeros(len(wb))
    for _ in range(iters):
        f = -eps * _logsumexp((g[None, :] - cost) / eps + logwb[None, :], axis=1)
        g = -eps * _logsumexp((f[:, None] - cost) / eps + logwa[:, None], axis=0)
    logpi = (f[:, None] + g[None, :] - cost) / eps + logwa[:, None] + logwb[None, :]
    pi = np.exp(logpi)
    pi /= pi.sum()
    return float(np.sum(pi * cost))


def _logsumexp(a, axis):
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out


def wasserstein_nd(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    p: float = 2.0,
    method: str = "exact_assignment",
    eps: Optional[float] = None,
    iters: int = 200,
) -> float:
    """p-Wasserstein distance in any dimension.

    ``exact_assignment`` solves the optimal matching between equal-size
    uniform clouds (at most ``EXACT_ASSIGNMENT_LIMIT`` atoms) and is exact.
    ``entropic`` runs debiased log-domain Sinkhorn with regularization
    ``eps`` (default 0.01 times the squared data diameter); its result
    carries the usual entropic bias of order eps.
    """
    if mu.dim != nu.dim:
        raise DistanceError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if p < 1:
        raise ConstructionError(f"order p must be >= 1, got {p}")
    if method == "exact_assignment":
        if mu.n_atoms != nu.n_atoms:
            raise SizeLimitError(
                "exact_assignment needs equal atom counts; resample the clouds first"
            )
        if mu.n_atoms > EXACT_ASSIGNMENT_LIMIT:
            raise SizeLimitError(
                f"exact_assignment supports at most {EXACT_ASSIGNMENT_LIMIT} atoms "
                f"(got {mu.n_atoms}); subsample or use method='entropic'"
            )
        if not (mu.uniform and nu.uniform):
            raise SizeLimitError("exact_assignment requires uniform weights")
        cost = _pairwise_cost(mu.points, nu.points, p)
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean()) ** (1.0 / p)
    if method == "entropic":
        cost = _pairwise_cost(mu.points, nu.points, p)
        if eps is None:
            allpts = np.vstack([mu.points, nu.points])
            span = allpts.max(axis=0) - allpts.min(axis=0)
            diam2 = float(span @ span)
            eps = max(0.01 * diam2, 1e-9)
        ab = _sinkhorn_cost(mu.weights, nu.weights, cost, eps, iters)
        aa = _sinkhorn_cost(mu.weights, mu.weights, _pairwise_cost(mu.points, mu.points, p), eps, iters)
        bb = _sinkhorn_cost(nu.weights, nu.weights, _pairwise_cost(nu.points, nu.points, p), eps, iters)
        debiased = max(ab - 0.5 * aa - 0.5 * bb, 0.0)
        return debiased ** (1.0 / p)
    raise ConstructionError(f"unknown method {method!r}")


def wasserstein(mu: EmpiricalMeasure, nu: EmpiricalMeasure, p: float = 2.0) -> float:
    """Dimension-dispatching distance: exact quantile coupling in d=1, assignment otherwise."""
    if mu.dim == 1 and nu.dim == 1:
        return wasserstein_1d(mu, nu, p)
    return wasserstein_nd(mu, nu, p)


# ---------------------------------------------------------------------------
# Measure flows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeasureFlow:
    """Uniform time grid of measures: node i sits at ``t_start + i * dt_grid``.

    ``extension`` controls evaluation outside the window: ``"none"`` raises,
    ``"constant"`` clamps to the nearest endpoint, ``"periodic"`` wraps with
    period ``tau`` (the window length must then be an integer multiple of tau).
    """

    t_start: float
    dt_grid: float
    measures: tuple
    extension: str = "none"
    tau: Optional[float] = None

    def __post_init__(self):
        if self.dt_grid <= 0:
            raise ConstructionError("dt_grid must be positive")
        if len(self.measures) == 0:
            raise ConstructionError("a flow needs at least one node")
        if self.extension not in _EXTENSIONS:
            raise ConstructionError(f"extension must be one of {_EXTENSIONS}")
        dims = {m.dim for m in self.measures}
        if len(dims) != 1:
            raise ConstructionError("all node measures must share one dimension")
        counts = {m.n_atoms for m in self.measures}
        if len(counts) != 1:
            raise ConstructionError("all node measures must share one particle count")
        if self.extension == "periodic":
            if self.tau is None or self.tau <= 0:
                raise ConstructionError("periodic extension needs tau > 0")
            length = self.window_length
            ratio = length / self.tau
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ConstructionError(
                    f"window length {length} is not an integer multiple of tau={self.tau}"
                )

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    @property
    def n_nodes(self) -> int:
        return len(self.measures)

    @property
    def t_end(self) -> float:
        return self.t_start + (self.n_nodes - 1) * self.dt_grid

    @property
    def window_length(self) -> float:
        return (self.n_nodes - 1) * self.dt_grid

    def node_times(self) -> np.ndarray:
        return self.t_start + self.dt_grid * np.arange(self.n_nodes)


def constant_flow(mu: EmpiricalMeasure, t_start: float, t_end: float, dt_grid: float) -> MeasureFlow:
    """Flow equal to ``mu`` at every node of the given grid, constant-extended."""
    n = int(round((t_end - t_start) / dt_grid)) + 1
    if n < 1:
        raise ConstructionError("empty window")
    return MeasureFlow(t_start, dt_grid, tuple([mu] * n), extension="constant")


def with_extension(flow: MeasureFlow, extension: str, tau: Optional[float] = None) -> MeasureFlow:
    """Copy of the flow with a different extension rule (validated)."""
    return replace(flow, extension=extension, tau=tau)


def _interp_1d(m0: EmpiricalMeasure, m1: EmpiricalMeasure, lam: float) -> EmpiricalMeasure:
    # displacement interpolation: convex combination of quantile functions
    if m0.n_atoms == m1.n_atoms and m0.uniform and m1.uniform:
        a = np.sort(m0.points[:, 0])
        b = np.sort(m1.points[:, 0])
    else:
        n = max(m0.n_atoms, m1.n_atoms)
        qs = (np.arange(n) + 0.5) / n
        a = quantiles_1d(m0, qs)
        b = quantiles_1d(m1, qs)
    return _raw(((1.0 - lam) * a + lam * b)[:, None])


def flow_eval(flow: MeasureFlow, t: float) -> EmpiricalMeasure:
    """Measure at time ``t``: stored node if t hits the grid, interpolation otherwise.

    Between nodes, d = 1 interpolates quantile functions (displacement
    interpolation); d > 1 returns the nearest node.  Outside the window the
    extension rule applies.
    """
    rel = (t - flow.t_start) / flow.dt_grid
    n1 = flow.n_nodes - 1
    if flow.extension == "periodic" and n1 > 0:
        # reduce modulo one period; integer index arithmetic when the period
        # is a whole number of grid steps keeps node lookups exact
        per = flow.tau / flow.dt_grid
        per_i = round(per)
        rel = rel % per_i if (abs(per - per_i) < _NODE_SNAP and per_i >= 1) else rel % per
    if rel < -_NODE_SNAP or rel > n1 + _NODE_SNAP:
        if flow.extension == "constant":
            rel = min(max(rel, 0.0), float(n1))
        else:
            raise FlowRangeError(
                f"t={t} outside window [{flow.t_start}, {flow.t_end}] and no extension is set"
            )
    rel = min(max(rel, 0.0), float(n1))
    j = int(round(rel))
    if abs(rel - j) <= _NODE_SNAP:
        return flow.measures[min(max(j, 0), n1)]
    j0 = int(math.floor(rel))
    lam = rel - j0
    if flow.dim == 1:
        return _interp_1d(flow.measures[j0], flow.measures[j0 + 1], lam)
    return flow.measures[j0 if lam < 0.5 else j0 + 1]


def _probe_times(flow1: MeasureFlow, flow2: MeasureFlow, radius: float) -> np.ndarray:
    ts = [np.array([-radius, radius])]
    for f in (flow1, flow2):
        nt = f.node_times()
        ts.append(nt[(nt >= -radius - _NODE_SNAP) & (nt <= radius + _NODE_SNAP)])
    return np.unique(np.concatenate(ts))


def _require_coverage(flow: MeasureFlow, lo: float, hi: float):
    if flow.extension != "none":
        return
    if flow.t_start > lo + _NODE_SNAP or flow.t_end < hi - _NODE_SNAP:
        raise CoverageError(
            f"flow window [{flow.t_start}, {flow.t_end}] does not cover [{lo}, {hi}]"
        )


def flow_seminorm(flow1: MeasureFlow, flow2: MeasureFlow, p: float, window_radius: float) -> float:
    """Sup of W_p(flow1(t), flow2(t)) over |t| <= radius, probed at grid nodes."""
    if flow1.dim != flow2.dim:
        raise DistanceError("flow dimension mismatch")
    _require_coverage(flow1, -window_radius, window_radius)
    _require_coverage(flow2, -window_radius, window_radius)
    worst = 0.0
    for t in _probe_times(flow1, flow2, window_radius):
        worst = max(worst, wasserstein(flow_eval(flow1, t), flow_eval(flow2, t), p))
    return worst


class FlowMetric(NamedTuple):
    value: float
    tail_bound: float
    n_max: int


def flow_metric(flow1: MeasureFlow, flow2: MeasureFlow, p: float = 2.0) -> FlowMetric:
    """Summable flow distance: sum over n of 2^-n * d_n / (1 + d_n).

    ``d_n`` is :func:`flow_seminorm` at radius n.  The series is truncated at
    ``n_max = ceil(window radius)``; the discarded tail is at most
    ``2^-n_max``, which is reported alongside the value.
    """
    radius = max(
        abs(flow1.t_start), abs(flow1.t_end), abs(flow2.t_start), abs(flow2.t_end)
    )
    n_max = max(1, int(math.ceil(radius - _NODE_SNAP)))
    total = 0.0
    for n in range(1, n_max + 1):
        dn = flow_seminorm(flow1, flow2, p, float(n))
        total += (0.5**n) * dn / (1.0 + dn)
    return FlowMetric(total, 0.5**n_max, n_max)


def flow_sup_distance(flow1: MeasureFlow, flow2: MeasureFlow, p: float = 2.0) -> float:
    """Sup of W_p over the union of node times of both flows (no symmetric window)."""
    if flow1.dim != flow2.dim:
        raise DistanceError("flow dimension mismatch")
    ts = np.unique(np.concatenate([flow1.node_times(), flow2.node_times()]))
    worst = 0.0
    for t in ts:
        worst = max(worst, wasserstein(flow_eval(flow1, t), flow_eval(flow2, t), p))
    return worst


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def flow_to_csv(flow: MeasureFlow) -> str:
    """CSV text: header comments with grid metadata, one row per particle."""
    buf = io.StringIO()
    tau = "" if flow.tau is None else repr(flow.tau)
    buf.write("# mckv-flow 1\n")
    buf.write(
        f"# t_start={flow.t_start!r} dt_grid={flow.dt_grid!r} "
        f"extension={flow.extension} tau={tau} dim={flow.dim} nodes={flow.n_nodes}\n"
    )
    cols = ",".join(f"x{k + 1}" for k in range(flow.dim))
    buf.write(f"node,weight,{cols}\n")
    for i, m in enumerate(flow.measures):
        for w, xs in zip(m.weights, m.points):
            row = ",".join(repr(float(v)) for v in xs)
            buf.write(f"{i},{w!r},{row}\n")
    return buf.getvalue()


def flow_from_csv(text: str) -> MeasureFlow:
    lines = text.splitlines()
    if len(lines) < 3 or not lines[0].startswith("# mckv-flow"):
        raise ConstructionError("not a mckv flow CSV")
    meta = {}
    for tok in lines[1][1:].split():
        k, _, v = tok.partition("=")
        meta[k] = v
    t_start = float(meta["t_start"])
    dt_grid = float(meta["dt_grid"])
    extension = meta["extension"]
    tau = float(meta["tau"]) if meta.get("tau") else None
    dim = int(meta["dim"])
    n_nodes = int(meta["nodes"])
    per_node_pts: list = [[] for _ in range(n_nodes)]
    per_node_w: list = [[] for _ in range(n_nodes)]
    for line in lines[3:]:
        if not line.strip():
            continue
        parts = line.split(",")
        i = int(parts[0])
        per_node_w[i].append(float(parts[1]))
        per_node_pts[i].append([float(v) for v in parts[2 : 2 + dim]])
    measures = tuple(
        _raw(np.asarray(pts, dtype=np.float64), np.asarray(w, dtype=np.float64))
        for pts, w in zip(per_node_pts, per_node_w)
    )
    return MeasureFlow(t_start, dt_grid, measures, extension=extension, tau=tau)


def flow_to_bytes(flow: MeasureFlow) -> bytes:
    """Compact binary snapshot; a single version byte leads the payload."""
    out = io.BytesIO()
    out.write(bytes([_SNAPSHOT_VERSION]))
    ext_code = _EXTENSIONS.index(flow.extension)
    tau = flow.tau if flow.tau is not None else 0.0
    out.write(struct.pack("<Bddii", ext_code, flow.t_start, flow.dt_grid, flow.dim, flow.n_nodes))
    out.write(struct.pack("<d", tau))
    for m in flow.measures:
        out.write(struct.pack("<i", m.n_atoms))
        out.write(m.weights.astype("<f8").tobytes())
        out.write(m.points.astype("<f8").tobytes())
    return out.getvalue()


def flow_from_bytes(data: bytes) -> MeasureFlow:
    buf = io.BytesIO(data)
    version = buf.read(1)[0]
    if version != _SNAPSHOT_VERSION:
        raise ConstructionError(f"unsupported snapshot version {version}")
    ext_code, t_start, dt_grid, dim, n_nodes = struct.unpack("<Bddii", buf.read(struct.calcsize("<Bddii")))
    (tau,) = struct.unpack("<d", buf.read(8))
    measures = []
    for _ in range(n_nodes):
        (n_atoms,) = struct.unpack("<i", buf.read(4))
        w = np.frombuffer(buf.read(8 * n_atoms), dtype="<f8").copy()
        pts = np.frombuffer(buf.read(8 * n_atoms * dim), dtype="<f8").copy().reshape(n_atoms, dim)
        measures.append(_raw(pts, w))
    return MeasureFlow(
        t_start,
        dt_grid,
        tuple(measures),
        extension=_EXTENSIONS[ext_code],
        tau=tau if tau > 0 else None,
    )
