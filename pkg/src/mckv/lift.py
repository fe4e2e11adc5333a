"""Torus-lifted measures and the autonomous semigroup acting on them.

A time-(quasi-)periodic problem becomes autonomous after attaching the phase:
states live on the product of an n-torus of phases with R^d, and measures
there are stored in disintegrated form, as weighted fibers ``(base point,
weight, measure on R^d)``.  The lifted push-forward rotates every base by t
and evolves its fiber through the reparameterized dynamics started at phase
``base``; fibers are never mixed before evolving (the fiber semigroup is
nonlinear in the law, so averaging first would change the result), and merging
happens only at exactly equal bases after the push.

The Cesaro average of an entrance flow over a long symmetric window,
folded onto the torus, approximates an invariant measure of this semigroup;
:func:`invariance_residual` measures how close it gets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import integrate, measure
from ._parallel import parallel_map
from .errors import ConstructionError, CoverageError, DistanceError
from .integrate import SALT_LIFT, SimConfig
from .measure import EmpiricalMeasure, MeasureFlow, flow_eval, wasserstein
from .model import CoefficientModel, reparameterize

__all__ = [
    "TorusPoint",
    "LiftedMeasure",
    "rotate",
    "torus_distance",
    "uniform_base_grid",
    "cesaro_lift",
    "lifted_push",
    "lifted_distance",
    "invariance_residual",
    "qp_representation",
    "base_marginal",
    "lifted_to_csv",
    "lifted_summary",
]


@dataclass(frozen=True)
class TorusPoint:
    """Point on the product torus: coordinate i lives in [0, periods[i])."""

    coords: tuple
    periods: tuple

    def __post_init__(self):
        if len(self.coords) != len(self.periods):
            raise ConstructionError("coords and periods must have equal length")
        if any(tau <= 0 for tau in self.periods):
            raise ConstructionError("periods must be positive")
        if any(not (0.0 <= c < tau) for c, tau in zip(self.coords, self.periods)):
            raise ConstructionError("coordinates must lie in [0, period)")

    @property
    def n(self) -> int:
        return len(self.coords)


def torus_point(coords, periods) -> TorusPoint:
    """Normalize arbitrary real coordinates onto the torus."""
    periods = tuple(float(tau) for tau in periods)
    normed = []
    for c, tau in zip(coords, periods):
        r = float(c) % tau
        if r >= tau or r < 0.0:  # float-mod edge
            r = 0.0
        normed.append(r)
    return TorusPoint(tuple(normed), periods)


def rotate(p: TorusPoint, t: float) -> TorusPoint:
    """Rotation by t: add t to every coordinate modulo its period."""
    return torus_point(tuple(c + t for c in p.coords), p.periods)


def torus_distance(p: TorusPoint, q: TorusPoint) -> float:
    """Sum over coordinates of the shorter arc between the two angles."""
    if p.periods != q.periods:
        raise DistanceError(f"period mismatch: {p.periods} vs {q.periods}")
    total = 0.0
    for a, b, tau in zip(p.coords, q.coords, p.periods):
        gap = abs(a - b)
        total += min(gap, tau - gap)
    return total


@dataclass(frozen=True)
class LiftedMeasure:
    """Measure on (torus x R^d) in disintegrated form: weighted fibers."""

    fibers: tuple  # of (TorusPoint, weight, EmpiricalMeasure)
    periods: tuple

    def __post_init__(self):
        if not self.fibers:
            raise ConstructionError("a lifted measure needs at least one fiber")
        total = 0.0
        dims = set()
        for base, w, fib in self.fibers:
            if base.periods != tuple(self.periods):
                raise ConstructionError("all fiber bases must share the torus periods")
            if w < 0:
                raise ConstructionError("fiber weights must be nonnegative")
            total += w
            dims.add(fib.dim)
        if abs(total - 1.0) > 1e-9:
            raise ConstructionError(f"fiber weights sum to {total}, expected 1")
        if len(dims) != 1:
            raise ConstructionError("all fibers must share one dimension")

    @property
    def dim(self) -> int:
        return self.fibers[0][2].dim

    @property
    def n_fibers(self) -> int:
        return len(self.fibers)

    def second_moment(self) -> float:
        return sum(w * measure.moment(fib, 2) for _, w, fib in self.fibers)


def base_marginal(mu_hat: LiftedMeasure):
    """Torus marginal as a list of (base, weight) pairs."""
    return [(base, w) for base, w, _ in mu_hat.fibers]


def uniform_base_grid(periods, resolution) -> list:
    """Product grid of torus points, ``resolution`` cells per axis."""
    periods = tuple(float(tau) for tau in periods)
    if isinstance(resolution, int):
        resolution = (resolution,) * len(periods)
    axes = [np.arange(r) * (tau / r) for r, tau in zip(resolution, periods)]
    grids = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    return [TorusPoint(tuple(float(v) for v in row), periods) for row in coords]


def cesaro_lift(flow: MeasureFlow, T: float, periods) -> LiftedMeasure:
    """Time-average of the flow folded onto the torus.

    Samples the flow at its own grid step h over [-T, T) (left endpoints, so
    every residue class is hit equally often when 2T is a multiple of every
    period) and groups nodes by their residue index.  Grouping is integer
    arithmetic, never float modulus, so bases merge exactly.  Fibers at one
    base are concatenated with proportional weights and recanonicalized.
    """
    periods = tuple(float(tau) for tau in periods)
    h = flow.dt_grid
    count = 2.0 * T / h
    if abs(count - round(count)) > 1e-9 or round(count) < 1:
        raise CoverageError("2T must be an integer multiple of the flow grid step")
    count = int(round(count))
    n_per = []
    for tau in periods:
        ratio = tau / h
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise CoverageError(
                f"period {tau} is not an integer multiple of the grid step {h}"
            )
        n_per.append(int(round(ratio)))
    j_start = int(round(-T / h))

    groups: dict = {}
    for j in range(count):
        idx = tuple((j_start + j) % n for n in n_per)
        groups.setdefault(idx, []).append(j_start + j)
    w_node = 1.0 / count

    atom_count = flow.measures[0].n_atoms
    fibers = []
    for idx in sorted(groups):
        nodes = groups[idx]
        clouds = [flow_eval(flow, j * h) for j in nodes]
        pts = np.vstack([c.points for c in clouds])
        ws = np.concatenate([c.weights / len(clouds) for c in clouds])
        merged = measure.resample(measure._raw(pts, ws), atom_count, seed=hash(idx) & ((1 << 63) - 1))
        base = TorusPoint(tuple(i * h for i in idx), periods)
        fibers.append((base, w_node * len(nodes), merged))
    return LiftedMeasure(tuple(fibers), periods)


def lifted_push(
    model: CoefficientModel,
    mu_hat: LiftedMeasure,
    t: float,
    cfg: SimConfig,
    threads: int = 1,
) -> LiftedMeasure:
    """Push the lifted measure forward by time t.

    Each fiber evolves independently: the base rotates by t and the fiber is
    transported by the self-consistent dynamics reparameterized at the old
    base, run from time 0 to t.  Fiber weights are untouched; fibers landing
    on exactly equal bases are merged afterwards.
    """
    if model.qp is None:
        raise ConstructionError("lifted_push needs a model with a quasi-periodic representation")
    if t < 0:
        raise ConstructionError("t must be nonnegative")
    if t == 0.0:
        return mu_hat

    def push(entry):
        base, w, fib = entry
        out = integrate.run_selfconsistent(
            reparameterize(model, np.asarray(base.coords)), fib, 0.0, t, cfg, record_from=t
        )
        return rotate(base, t), w, out.measures[-1]

    pushed = parallel_map(push, mu_hat.fibers, threads)

    groups: dict = {}
    order: list = []
    for base, w, fib in pushed:
        key = base.coords
        if key not in groups:
            groups[key] = []
            order.append((key, base))
        groups[key].append((w, fib))
    fibers = []
    for key, base in order:
        entries = groups[key]
        if len(entries) == 1:
            w, fib = entries[0]
            fibers.append((base, w, fib))
            continue
        wtot = sum(w for w, _ in entries)
        pts = np.vstack([f.points for _, f in entries])
        ws = np.concatenate([f.weights * (w / wtot) for w, f in entries])
        merged = measure.resample(measure._raw(pts, ws), entries[0][1].n_atoms)
        fibers.append((base, wtot, merged))
    return LiftedMeasure(tuple(fibers), mu_hat.periods)


def _joint_sample(mu_hat: LiftedMeasure, n: int, seed: int):
    """n draws (base coords array, points array) from the lifted measure, deterministic in seed."""
    atom_counts = [fib.n_atoms for _, _, fib in mu_hat.fibers]
    flat_w = np.concatenate([w * fib.weights for (_, w, fib) in mu_hat.fibers])
    flat_w = flat_w / flat_w.sum()
    flat_pts = np.vstack([fib.points for _, _, fib in mu_hat.fibers])
    base_coords = np.vstack(
        [
            np.tile(np.asarray(base.coords, dtype=np.float64), (cnt, 1))
            for (base, _, _), cnt in zip(mu_hat.fibers, atom_counts)
        ]
    )
    gen = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | SALT_LIFT))
    idx = gen.choice(len(flat_w), size=n, p=flat_w)
    return base_coords[idx], flat_pts[idx]


def _torus_cost_matrix(b1: np.ndarray, b2: np.ndarray, periods) -> np.ndarray:
    """Pairwise torus arc distances between two coordinate arrays."""
    total = np.zeros((b1.shape[0], b2.shape[0]))
    for k, tau in enumerate(periods):
        gap = np.abs(b1[:, k][:, None] - b2[:, k][None, :])
        total += np.minimum(gap, tau - gap)
    return total


def lifted_distance(
    mu1: LiftedMeasure,
    mu2: LiftedMeasure,
    method: str = "exact_assignment",
    p: float = 2.0,
    n_samples: int = 512,
    seed: int = 0,
) -> float:
    """Wasserstein distance on the lifted space under the product metric.

    The ground metric combines the torus arc metric on bases with the
    Euclidean metric on fibers: ``sqrt(d0^2 + |x - y|^2)``.  Both measures are
    reduced to ``n_samples`` matched joint draws (same seed, so identical
    inputs give exactly zero) and the discrete problem is solved exactly by
    assignment, or approximately by debiased Sinkhorn for larger samples.
    """
    if tuple(mu1.periods) != tuple(mu2.periods):
        raise DistanceError("period mismatch")
    if mu1.dim != mu2.dim:
        raise DistanceError("dimension mismatch")
    b1, x1 = _joint_sample(mu1, n_samples, seed)
    b2, x2 = _joint_sample(mu2, n_samples, seed)

    def cost_matrix(ba, xa, bb, xb):
        d0 = _torus_cost_matrix(ba, bb, mu1.periods)
        dx2 = np.sum(xa**2, axis=1)[:, None] - 2.0 * xa @ xb.T + np.sum(xb**2, axis=1)[None, :]
        np.maximum(dx2, 0.0, out=dx2)
        c2 = d0 * d0 + dx2
        return c2 if p == 2 else c2 ** (p / 2.0)

    cost = cost_matrix(b1, x1, b2, x2)
    if method == "exact_assignment":
        if n_samples > measure.EXACT_ASSIGNMENT_LIMIT:
            raise ConstructionError(
                f"exact_assignment supports at most {measure.EXACT_ASSIGNMENT_LIMIT} samples; "
                "reduce n_samples or use method='entropic'"
            )
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean()) ** (1.0 / p)
    if method == "entropic":
        span = max(float(cost.max()), 1e-12)
        eps = 0.01 * span
        w = np.full(n_samples, 1.0 / n_samples)
        ab = measure._sinkhorn_cost(w, w, cost, eps, 200)
        aa = measure._sinkhorn_cost(w, w, cost_matrix(b1, x1, b1, x1), eps, 200)
        bb = measure._sinkhorn_cost(w, w, cost_matrix(b2, x2, b2, x2), eps, 200)
        return max(ab - 0.5 * aa - 0.5 * bb, 0.0) ** (1.0 / p)
    raise ConstructionError(f"unknown method {method!r}")


def invariance_residual(
    model: CoefficientModel,
    mu_hat: LiftedMeasure,
    t_list: Sequence[float],
    cfg: SimConfig,
    method: str = "exact_assignment",
    n_samples: int = 512,
    threads: int = 1,
) -> list:
    """Distance between the lifted measure and its push-forward, per time."""
    out = []
    for t in t_list:
        pushed = lifted_push(model, mu_hat, float(t), cfg, threads=threads)
        out.append(lifted_distance(pushed, mu_hat, method=method, n_samples=n_samples))
    return out


def qp_representation(
    model: CoefficientModel,
    base_grid: Sequence[TorusPoint],
    window,
    anchor,
    tol: float,
    cfg: SimConfig,
    max_iter: int = 12,
    profile=None,
    threads: int = 1,
):
    """Per-base entrance laws: one fiber per torus point of the grid.

    For each base the coefficients are reparameterized at that phase and the
    entrance fixed point is solved on ``window``; the stored fiber is the
    converged law at time 0, so pushing a fiber for time t should land on the
    fiber at the rotated base.  Non-converged bases are listed in the report
    and excluded from the returned measure (partial results).
    """
    from . import entrance as entrance_mod

    t0, t1 = float(window[0]), float(window[1])
    if not (t0 <= 0.0 <= t1):
        raise ConstructionError("window must contain time 0 (fibers are laws at time 0)")

    def solve(base):
        rmodel = reparameterize(model, np.asarray(base.coords))
        flow, rep = entrance_mod.solve_fixed_point(
            rmodel, window, anchor, tol, max_iter, cfg, profile=profile
        )
        return base, flow, rep

    results = parallel_map(solve, list(base_grid), threads)
    good = [(b, f) for b, f, r in results if r.converged]
    report = {
        "n_bases": len(results),
        "n_converged": len(good),
        "failed_bases": [list(b.coords) for b, _, r in results if not r.converged],
        "per_base_iterates": [r.iterates for _, _, r in results],
    }
    if not good:
        return None, report
    w = 1.0 / len(good)
    fibers = tuple((b, w, flow_eval(f, 0.0)) for b, f in good)
    periods = good[0][0].periods
    return LiftedMeasure(fibers, periods), report


def lifted_to_csv(mu_hat: LiftedMeasure) -> str:
    """One row per fiber atom: fiber index, base coords, fiber weight, atom weight, coords."""
    n = len(mu_hat.periods)
    cols_s = ",".join(f"s{k + 1}" for k in range(n))
    cols_x = ",".join(f"x{k + 1}" for k in range(mu_hat.dim))
    lines = [f"# mckv-lifted 1 periods={','.join(repr(p) for p in mu_hat.periods)}"]
    lines.append(f"fiber,{cols_s},weight,atom_weight,{cols_x}")
    for i, (base, w, fib) in enumerate(mu_hat.fibers):
        base_txt = ",".join(repr(c) for c in base.coords)
        for aw, xs in zip(fib.weights, fib.points):
            xs_txt = ",".join(repr(float(v)) for v in xs)
            lines.append(f"{i},{base_txt},{w!r},{aw!r},{xs_txt}")
    return "\n".join(lines) + "\n"


def lifted_summary(mu_hat: LiftedMeasure) -> dict:
    """JSON-ready per-base summary: weight, mean, second moment."""
    entries = []
    for base, w, fib in mu_hat.fibers:
        entries.append(
            {
                "base": [float(c) for c in base.coords],
                "weight": float(w),
                "mean": [float(v) for v in measure.mean(fib)],
                "second_moment": float(measure.moment(fib, 2)),
            }
        )
    return {"periods": [float(p) for p in mu_hat.periods], "fibers": entries}
