"""Entrance measures by pull-back and fixed-point iteration.

An entrance measure is a flow of laws carried forward consistently by the
equation's transport semigroup.  For a *frozen* law flow the entrance measure
is found by pulling back: start at ever-earlier times from a point mass and
wait until the law on the target window stops moving.  The map from a frozen
flow to that pull-back limit is iterated (Picard) until it fixes itself,
which yields a numerical entrance measure of the self-consistent equation.

All runs share one noise key space, so consecutive pull-back stages and
consecutive Picard iterates are coupled by common random numbers: residuals
measure genuine contraction, not fresh Monte Carlo noise.  Diagnostics
(:func:`entrance_residual`) deliberately use a separate key space to stay
independent of the runs they check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import integrate, measure
from .errors import ConstructionError
from .integrate import SALT_REPLICA, SALT_RESIDUAL, SimConfig
from .measure import EmpiricalMeasure, MeasureFlow, constant_flow, dirac, flow_eval, wasserstein
from .model import CoefficientModel

__all__ = [
    "PullbackReport",
    "FixedPointReport",
    "EntranceResidual",
    "pullback_entrance",
    "psi",
    "solve_fixed_point",
    "entrance_residual",
    "periodicity_residual",
    "window_sup_distance",
]

MAX_DOUBLING = 10


@dataclass
class PullbackReport:
    """Cauchy diagnostic of the pull-back sequence.

    ``start_times`` lists the (decreasing) start times used; ``gaps[i]`` is
    the sup over window nodes of W2 between the laws obtained from
    ``start_times[i+1]`` and ``start_times[i]``.
    """

    start_times: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    converged: bool = False
    final_gap: float = float("nan")
    tol: float = float("nan")
    left_extension: str = "constant"

    def to_dict(self) -> dict:
        return {
            "start_times": [float(v) for v in self.start_times],
            "gaps": [float(v) for v in self.gaps],
            "converged": bool(self.converged),
            "final_gap": float(self.final_gap),
            "tol": float(self.tol),
            "left_extension": self.left_extension,
        }


@dataclass
class FixedPointReport:
    """History of one Picard iteration of the pull-back map."""

    iterates: int = 0
    residuals: list = field(default_factory=list)
    window: tuple = (0.0, 0.0)
    anchor: tuple = (0.0,)
    converged: bool = False
    cycle_detected: bool = False
    tol: float = float("nan")
    entrance_check: Optional[dict] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterates": self.iterates,
            "residuals": [float(v) for v in self.residuals],
            "window": [float(self.window[0]), float(self.window[1])],
            "anchor": [float(v) for v in self.anchor],
            "converged": bool(self.converged),
            "cycle_detected": bool(self.cycle_detected),
            "tol": float(self.tol),
            "entrance_check": self.entrance_check,
            "notes": list(self.notes),
        }


def _check_window(window, cfg: SimConfig):
    t0, t1 = float(window[0]), float(window[1])
    if t1 <= t0:
        raise ConstructionError("window must satisfy t1 > t0")
    dt_grid = cfg.record_stride * cfg.dt
    for name, val in (("t0", t0 / cfg.dt), ("window length", (t1 - t0) / dt_grid)):
        if abs(val - round(val)) > 1e-6:
            raise ConstructionError(
                f"{name} must sit on the simulation grid (dt={cfg.dt}, stride={cfg.record_stride})"
            )
    return t0, t1, dt_grid


def window_sup_distance(flow1: MeasureFlow, flow2: MeasureFlow, p: float = 2.0) -> float:
    """Sup of W_p over the (shared) node grid of two window flows."""
    if flow1.n_nodes != flow2.n_nodes or abs(flow1.dt_grid - flow2.dt_grid) > 1e-12:
        return measure.flow_sup_distance(flow1, flow2, p)
    return max(
        wasserstein(m1, m2, p) for m1, m2 in zip(flow1.measures, flow2.measures)
    )


def _default_base(profile) -> float:
    if profile is None:
        return 5.0
    avg = profile.average_dissipation()
    if avg >= 0:
        raise ConstructionError("profile has nonnegative average of alpha+beta")
    return 5.0 / abs(avg)


def pullback_entrance(
    model: CoefficientModel,
    frozen: Optional[MeasureFlow],
    window,
    anchor,
    tol: float,
    cfg: SimConfig,
    base_burn_in: Optional[float] = None,
    profile=None,
    max_doubling: int = MAX_DOUBLING,
) -> tuple:
    """Pull-back law on the target window, started ever earlier until Cauchy.

    Stage k starts at ``t0 - B * 2^k`` from a point mass at ``anchor`` and
    runs to the window end (frozen dynamics if ``frozen`` is given, otherwise
    self-consistent).  Stops when consecutive stage laws differ by at most
    ``tol`` at every window node.  Non-convergence within ``max_doubling``
    stages is reported, not raised.
    """
    if tol <= 0:
        raise ConstructionError("tol must be positive")
    t0, t1, dt_grid = _check_window(window, cfg)
    B = base_burn_in if base_burn_in is not None else _default_base(profile)
    if B <= 0:
        raise ConstructionError("burn-in base must be positive")
    init = dirac(anchor, dim=model.dim)

    if frozen is not None and frozen.extension == "none":
        frozen = measure.with_extension(frozen, "constant")

    report = PullbackReport(tol=tol)
    prev = None
    flow = None
    for k in range(max_doubling + 1):
        s_k = t0 - B * (2.0**k)
        s_k = math.floor(s_k / cfg.dt + 1e-9) * cfg.dt
        report.start_times.append(s_k)
        if frozen is None:
            flow = integrate.run_selfconsistent(model, init, s_k, t1, cfg, record_from=t0)
        else:
            flow = integrate.run_frozen(model, frozen, init, s_k, t1, cfg, record_from=t0)
        if prev is not None:
            gap = window_sup_distance(flow, prev, 2.0)
            report.gaps.append(gap)
            if gap <= tol:
                report.converged = True
                report.final_gap = gap
                break
        prev = flow
    if report.gaps and not report.converged:
        report.final_gap = report.gaps[-1]
    return flow, report


def psi(
    model: CoefficientModel,
    mu_flow: MeasureFlow,
    window,
    anchor,
    tol: float,
    cfg: SimConfig,
    base_burn_in: Optional[float] = None,
    profile=None,
) -> tuple:
    """Entrance measure of the equation frozen at ``mu_flow``.

    This is one application of the fixed-point map: substitute ``mu_flow``
    for the law in the coefficients and pull back.  The input flow is
    extended to the left of its window by its own extension rule (constant if
    none is set; this choice is recorded in the report).
    """
    if mu_flow.extension == "none":
        mu_flow = measure.with_extension(mu_flow, "constant")
    flow, report = pullback_entrance(
        model, mu_flow, window, anchor, tol, cfg, base_burn_in=base_burn_in, profile=profile
    )
    report.left_extension = mu_flow.extension
    return flow, report


def _quantile_average(flow_a: MeasureFlow, flow_b: MeasureFlow) -> MeasureFlow:
    """Node-wise displacement midpoint of two flows on the same grid."""
    nodes = []
    for ma, mb in zip(flow_a.measures, flow_b.measures):
        if ma.dim == 1:
            a = np.sort(ma.points[:, 0])
            b = np.sort(mb.points[:, 0])
            if len(a) != len(b):
                n = max(len(a), len(b))
                qs = (np.arange(n) + 0.5) / n
                a = measure.quantiles_1d(ma, qs)
                b = measure.quantiles_1d(mb, qs)
            nodes.append(measure._raw((0.5 * (a + b))[:, None]))
        else:
            stacked = np.vstack([ma.points, mb.points])
            w = np.concatenate([ma.weights, mb.weights]) * 0.5
            nodes.append(measure.resample(measure._raw(stacked, w), ma.n_atoms))
    return MeasureFlow(flow_a.t_start, flow_a.dt_grid, tuple(nodes), extension=flow_a.extension, tau=flow_a.tau)


def solve_fixed_point(
    model: CoefficientModel,
    window,
    anchor,
    tol: float,
    max_iter: int,
    cfg: SimConfig,
    base_burn_in: Optional[float] = None,
    profile=None,
    check_entrance: bool = True,
    residual_pairs: int = 2,
) -> tuple:
    """Picard iteration of the pull-back map from a point-mass anchor flow.

    Starts from the constant flow at ``anchor`` and repeats
    ``rho <- psi(rho)`` until the window-sup W2 residual drops below ``tol``.
    A 2-cycle (residual to the second-to-last iterate much smaller than to
    the last) switches to node-wise quantile averaging of the last two
    iterates; this is recorded and such a run is never reported as converged.
    On convergence the flow property is re-verified with independent noise
    via :func:`entrance_residual`, which must stay below ``3 * tol``.

    The anchor is the only mechanism for selecting among multiple entrance
    measures; no basin analysis is attempted.
    """
    if max_iter < 1:
        raise ConstructionError("max_iter must be >= 1")
    t0, t1, dt_grid = _check_window(window, cfg)
    rho = constant_flow(dirac(anchor, dim=model.dim), t0, t1, dt_grid)
    report = FixedPointReport(window=(t0, t1), anchor=tuple(np.atleast_1d(anchor).tolist()), tol=tol)

    prev: Optional[MeasureFlow] = None
    for _ in range(max_iter):
        nxt, pb = psi(model, rho, window, anchor, tol, cfg, base_burn_in=base_burn_in, profile=profile)
        report.iterates += 1
        if not pb.converged:
            report.notes.append(
                f"pull-back stage did not reach tol at iterate {report.iterates} "
                f"(final gap {pb.final_gap:.3g})"
            )
        resid = window_sup_distance(nxt, rho, 2.0)
        report.residuals.append(resid)
        if prev is not None and not report.cycle_detected:
            back = window_sup_distance(nxt, prev, 2.0)
            if back < resid / 4.0:
                report.cycle_detected = True
                report.notes.append(
                    f"2-cycle declared at iterate {report.iterates} "
                    f"(back-residual {back:.3g} vs residual {resid:.3g}); averaging iterates"
                )
                nxt = _quantile_average(nxt, rho)
        prev = rho
        rho = nxt
        if resid <= tol and not report.cycle_detected:
            report.converged = True
            break

    if report.converged and check_entrance:
        check = entrance_residual(model, rho, max(1, residual_pairs), cfg)
        report.entrance_check = {"value": check.value, "noise_floor": check.noise_floor}
        if check.value > 3.0 * tol:
            report.converged = False
            report.notes.append(
                f"entrance residual {check.value:.3g} exceeds 3*tol={3 * tol:.3g}; "
                "demoting to non-converged"
            )
    return rho, report


class EntranceResidual(NamedTuple):
    value: float
    noise_floor: float


def entrance_residual(
    model: CoefficientModel, flow: MeasureFlow, pair_count: int, cfg: SimConfig
) -> EntranceResidual:
    """Flow-property defect: restart the dynamics from the flow and compare.

    For sampled pairs s < t in the window, runs the self-consistent dynamics
    from ``flow(s)`` to ``t`` with an independent noise key space and takes
    the worst W2 distance to ``flow(t)``.  ``noise_floor`` estimates the pure
    Monte Carlo contribution by repeating the first pair with yet another key
    space and comparing the two restarted laws to each other.
    """
    if pair_count < 1:
        raise ConstructionError("pair_count must be >= 1")
    n1 = flow.n_nodes - 1
    if n1 < 1:
        raise ConstructionError("flow needs at least two nodes")
    half = max(1, n1 // 2)
    starts = [int(round(j * (n1 - half) / max(1, pair_count - 1))) if pair_count > 1 else 0
              for j in range(pair_count)]
    worst = 0.0
    floor = 0.0
    times = flow.node_times()
    for j, i0 in enumerate(starts):
        s, t = times[i0], times[i0 + half]
        init = flow.measures[i0]
        end = integrate.run_selfconsistent(
            model, init, s, t, cfg, record_from=t, noise_salt=SALT_RESIDUAL
        ).measures[-1]
        worst = max(worst, wasserstein(end, flow.measures[i0 + half], 2.0))
        if j == 0:
            alt = integrate.run_selfconsistent(
                model, init, s, t, cfg, record_from=t, noise_salt=SALT_REPLICA
            ).measures[-1]
            floor = wasserstein(end, alt, 2.0)
    return EntranceResidual(worst, floor)


def periodicity_residual(flow: MeasureFlow, tau: float) -> float:
    """Sup over node times t of W2(flow(t + tau), flow(t)).

    Requires the window to span at least two periods so several independent
    node pairs enter the sup.
    """
    if tau <= 0:
        raise ConstructionError("tau must be positive")
    if flow.window_length < 2.0 * tau - 1e-9:
        raise ConstructionError(
            f"window length {flow.window_length} is below 2*tau = {2 * tau}"
        )
    worst = 0.0
    for t in flow.node_times():
        if t + tau > flow.t_end + 1e-9 and flow.extension == "none":
            break
        worst = max(worst, wasserstein(flow_eval(flow, t + tau), flow_eval(flow, t), 2.0))
    return worst
