"""Numerical certification of dissipativity profiles and multistability thresholds.

The second-moment ceiling ``theta_t`` is the improper integral

    theta_t = int_{-inf}^t exp(2 int_u^t (alpha_r + beta_r) dr) (2 gamma_u + d c_sigma) du,

well defined whenever alpha + beta has negative average.  Because profiles
are restricted to constants plus sinusoids, the inner antiderivative is exact
and only the outer integral is quadrature.  ``theta`` obeys an exact identity
(see :func:`theta_identity_residual`) that cross-checks the implementation,
and it bootstraps the higher-moment ceilings ``a_p``.

Assumption checking is sampling-based falsification, never proof: every
report states the number of samples inspected and lists violations with
witness points.  The Curie-Weiss threshold algebra, by contrast, is exact
polynomial arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from . import entrance as entrance_mod
from . import integrate, measure
from .errors import ConstructionError, DissipativityError
from .integrate import SimConfig
from .measure import EmpiricalMeasure, MeasureFlow, dirac, wasserstein
from .model import (
    CoefficientModel,
    CurieWeissParams,
    ForcingSpec,
    eval_diffusion,
    eval_drift,
    make_curie_weiss,
)

__all__ = [
    "DissipativityProfile",
    "theta",
    "theta_identity_residual",
    "a_p_bound",
    "SampleSpec",
    "AssumptionReport",
    "check_assumptions",
    "g_a_eval",
    "g_a_convex",
    "CWConditions",
    "cw_conditions",
    "cw_optimal_theta",
    "cw_cubic_max",
    "cw_beta_threshold",
    "cw_uniqueness_criterion",
    "curie_weiss_profile",
    "ball_membership",
    "BistabilityReport",
    "multistability_run",
]

_TAIL_LOG = 12.0 * math.log(10.0)  # exponential factor cut at 1e-12


def _scalar_fn(spec: ForcingSpec):
    c = float(spec.constant)
    terms = [(float(t.amplitude), float(t.omega), float(t.phase)) for t in spec.terms]
    if not terms:
        return lambda u: c

    def f(u):
        val = c
        for a, w, p in terms:
            val += a * math.sin(w * u + p)
        return val

    return f


def _antiderivative(spec: ForcingSpec):
    """Exact antiderivative of a constant-plus-sinusoids function."""
    c = float(spec.constant)
    terms = [(float(t.amplitude), float(t.omega), float(t.phase)) for t in spec.terms]

    def F(u):
        val = c * u
        for a, w, p in terms:
            val -= (a / w) * math.cos(w * u + p)
        return val

    osc = sum(abs(a / w) for a, w, _ in terms)
    return F, osc


@dataclass(frozen=True)
class DissipativityProfile:
    """Coercivity data ``<x, b> <= alpha |x|^2 + beta ||mu||_2^2 + gamma``.

    ``alpha``, ``beta``, ``gamma`` are constant-plus-sinusoid functions of
    time; ``c_sigma``/``c_sigma_lower`` bound the diffusion quadratic form
    from above/below, ``L`` is the one-sided Lipschitz constant and ``kappa``
    the drift growth order; ``d`` is the state dimension.  ``beta`` and
    ``gamma`` must be nonnegative, which is checked exactly through the
    sinusoid amplitude bound.
    """

    alpha: ForcingSpec
    beta: ForcingSpec
    gamma: ForcingSpec
    c_sigma: float
    c_sigma_lower: float
    L: float
    kappa: float = 1.0
    d: int = 1

    def __post_init__(self):
        if not (self.c_sigma >= self.c_sigma_lower > 0):
            raise ConstructionError("need c_sigma >= c_sigma_lower > 0")
        if self.L <= 0:
            raise ConstructionError("L must be positive")
        if self.kappa < 1:
            raise ConstructionError("kappa must be >= 1")
        if self.d < 1:
            raise ConstructionError("d must be >= 1")
        for name, spec in (("beta", self.beta), ("gamma", self.gamma)):
            inf = spec.constant - sum(abs(t.amplitude) for t in spec.terms)
            if inf < -1e-12:
                raise ConstructionError(f"{name} must be nonnegative (exact infimum {inf})")

    def average_dissipation(self) -> float:
        """Exact period average of alpha + beta (sinusoids average to zero)."""
        return self.alpha.constant + self.beta.constant

    def is_constant(self) -> bool:
        return not (self.alpha.terms or self.beta.terms or self.gamma.terms)

    def max_period(self) -> float:
        periods = self.alpha.periods() + self.beta.periods() + self.gamma.periods()
        return max(periods) if periods else 1.0


def _require_dissipative(profile: DissipativityProfile) -> float:
    avg = profile.average_dissipation()
    if avg >= 0:
        raise DissipativityError(avg)
    return avg


def theta(profile: DissipativityProfile, t: float, rel_tol: float = 1e-7) -> float:
    """Second-moment ceiling at time ``t``.

    Constant profiles use the closed form ``(2 gamma + d c_sigma) / (2 |avg|)``;
    otherwise the improper integral is truncated where the exponential factor
    falls below 1e-12 of its peak and evaluated by adaptive quadrature with
    relative tolerance ``rel_tol``.
    """
    if rel_tol <= 0:
        raise ConstructionError("rel_tol must be positive")
    avg = _require_dissipative(profile)
    dcs = profile.d * profile.c_sigma
    if profile.is_constant():
        return (2.0 * profile.gamma.constant + dcs) / (2.0 * abs(avg))

    ab = ForcingSpec(
        profile.alpha.constant + profile.beta.constant,
        profile.alpha.terms + profile.beta.terms,
    )
    Aab, osc = _antiderivative(ab)
    gam = _scalar_fn(profile.gamma)
    tail = (_TAIL_LOG + 4.0 * osc) / (2.0 * abs(avg))
    top = Aab(t)

    def integrand(u):
        return math.exp(2.0 * (top - Aab(u))) * (2.0 * gam(u) + dcs)

    val, _err = quad(integrand, t - tail, t, epsabs=0.0, epsrel=rel_tol, limit=400)
    return val


def _theta_spline(profile: DissipativityProfile, lo: float, hi: float, rel_tol: float, n: int = 1025):
    us = np.linspace(lo, hi, n)
    vals = np.array([theta(profile, float(u), rel_tol) for u in us])
    return CubicSpline(us, vals)


def theta_identity_residual(profile: DissipativityProfile, t: float, rel_tol: float = 1e-7) -> float:
    """Relative defect of the exact self-consistency identity of ``theta``.

    The ceiling satisfies

        int_{-inf}^t exp(2 int_u^t alpha) (2 beta_u theta_u + 2 gamma_u + d c_sigma) du
            = theta_t

    exactly; quadrature is the only error source, so the residual should sit
    within a small multiple of ``rel_tol``.
    """
    avg = _require_dissipative(profile)
    dcs = profile.d * profile.c_sigma
    th_t = theta(profile, t, rel_tol)

    alpha_avg = profile.alpha.constant
    if alpha_avg >= 0:
        raise DissipativityError(alpha_avg)
    Aa, osc_a = _antiderivative(profile.alpha)
    bet = _scalar_fn(profile.beta)
    gam = _scalar_fn(profile.gamma)
    tail = (_TAIL_LOG + 4.0 * osc_a) / (2.0 * abs(alpha_avg))
    lo = t - tail
    if profile.is_constant():
        th_fn = lambda u: th_t
    else:
        spline = _theta_spline(profile, lo, t, rel_tol)
        th_fn = spline
    top = Aa(t)

    def integrand(u):
        return math.exp(2.0 * (top - Aa(u))) * (2.0 * bet(u) * float(th_fn(u)) + 2.0 * gam(u) + dcs)

    lhs, _err = quad(integrand, lo, t, epsabs=0.0, epsrel=rel_tol, limit=400)
    return abs(lhs - th_t) / th_t


def a_p_bound(profile: DissipativityProfile, p: float, t: float, rel_tol: float = 1e-7) -> float:
    """Moment ceiling of order ``p``: ``||rho_t||_p^p <= a_p(t)``.

    ``a_2`` coincides with ``theta``.  For ``2 <= p <= 4`` the kernel carries
    ``theta^{p/2 - 1}``; above 4 the construction recurses on ``a_{p-2}``.
    """
    if p < 2:
        raise ConstructionError("a_p is defined for p >= 2")
    _require_dissipative(profile)
    alpha_avg = profile.alpha.constant
    if alpha_avg >= 0:
        raise DissipativityError(alpha_avg)
    dcs = profile.d * profile.c_sigma

    if profile.is_constant():
        th = theta(profile, t, rel_tol)
        a_prev = th  # order 2
        q = 2.0
        while q < p - 1e-12:
            q = min(q + 2.0, p)
            inner = th ** (q / 2.0 - 1.0) if q <= 4.0 else a_prev
            a_prev = (
                (profile.beta.constant * th + profile.gamma.constant + (q - 1.0) / 2.0 * dcs)
                * inner
                / abs(alpha_avg)
            )
        return a_prev

    Aa, osc_a = _antiderivative(profile.alpha)
    bet = _scalar_fn(profile.beta)
    gam = _scalar_fn(profile.gamma)
    tail = (_TAIL_LOG + 2.0 * p * osc_a) / (p * abs(alpha_avg))
    lo = t - tail
    th_spline = _theta_spline(profile, lo, t, rel_tol)
    top = Aa(t)

    def make_integrand(q, inner_fn):
        def integrand(u):
            th_u = float(th_spline(u))
            return (
                q
                * math.exp(q * (top - Aa(u)))
                * (bet(u) * th_u + gam(u) + (q - 1.0) / 2.0 * dcs)
                * float(inner_fn(u))
            )

        return integrand

    if p <= 4.0:
        integrand = make_integrand(p, lambda u: float(th_spline(u)) ** (p / 2.0 - 1.0))
        val, _ = quad(integrand, lo, t, epsabs=0.0, epsrel=rel_tol, limit=400)
        return val

    # recursion: tabulate a_{p-2} on the same grid
    us = np.linspace(lo, t, 257)
    prev_vals = np.array([a_p_bound(profile, p - 2.0, float(u), rel_tol * 10) for u in us])
    prev = CubicSpline(us, prev_vals)
    integrand = make_integrand(p, prev)
    val, _ = quad(integrand, lo, t, epsabs=0.0, epsrel=rel_tol, limit=400)
    return val


# ---------------------------------------------------------------------------
# Assumption falsification on sample grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """Grids used to probe the assumption inequalities."""

    t_count: int = 64
    x_count: int = 41
    x_radius: Optional[float] = None
    dirac_count: int = 9
    cloud_atoms: int = 64
    seed: int = 2024


@dataclass
class CheckRow:
    name: str
    worst_margin: float
    n_samples: int
    violations: list = dc_field(default_factory=list)
    required: bool = True

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.passed:
            return f"{self.name}: no violation found on {self.n_samples} samples (worst margin {self.worst_margin:.4g})"
        return f"{self.name}: {len(self.violations)} violation(s) on {self.n_samples} samples (worst margin {self.worst_margin:.4g})"


@dataclass
class AssumptionReport:
    rows: list

    @property
    def passed(self) -> bool:
        return all(row.passed for row in self.rows if row.required)

    def row(self, name: str) -> CheckRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "rows": [
                {
                    "name": r.name,
                    "worst_margin": float(r.worst_margin),
                    "n_samples": r.n_samples,
                    "passed": r.passed,
                    "required": r.required,
                    "violations": r.violations[:10],
                }
                for r in self.rows
            ],
        }


def _sample_measures(spec: SampleSpec, dim: int, radius: float):
    out = []
    centers = np.linspace(-radius, radius, spec.dirac_count)
    for c in centers:
        out.append(dirac(np.full(dim, c)))
    for c in centers[:: max(1, len(centers) // 4)]:
        pts = np.vstack([np.full(dim, c), np.full(dim, -c)])
        out.append(measure.from_samples(pts))
        pts = np.vstack([np.full(dim, c), np.full(dim, c + 1.0)])
        out.append(measure.from_samples(pts))
    gen = np.random.Generator(np.random.Philox(key=spec.seed))
    for c in (-radius / 2, 0.0, radius / 2):
        pts = gen.standard_normal((spec.cloud_atoms, dim)) + c
        out.append(measure.from_samples(pts))
    return out


def check_assumptions(
    model: CoefficientModel,
    profile: DissipativityProfile,
    sample_spec: Optional[SampleSpec] = None,
) -> AssumptionReport:
    """Probe the assumption inequalities on structured grids.

    Each row records the worst margin (RHS - LHS; negative means violated)
    and witness points for violations.  The inequalities are universally
    quantified, so a clean report is falsification evidence, never a proof.
    The two-sided drift Lipschitz row is diagnostic only (superlinear drifts
    are expected to fail it while still passing the one-sided row).
    """
    spec = sample_spec or SampleSpec()
    d = model.dim
    try:
        th_bar = theta(profile, 0.0, 1e-6)
    except DissipativityError:
        th_bar = 1.0
    radius = spec.x_radius if spec.x_radius is not None else 3.0 + 3.0 * math.sqrt(max(th_bar, 0.0))
    span = profile.max_period()
    ts = np.linspace(0.0, span, spec.t_count, endpoint=False)
    xs_axis = np.linspace(-radius, radius, spec.x_count)
    if d == 1:
        xs = xs_axis[:, None]
    else:
        per_axis = max(3, int(round(spec.x_count ** (1.0 / d))))
        grids = np.meshgrid(*[np.linspace(-radius, radius, per_axis)] * d)
        xs = np.stack([g.ravel() for g in grids], axis=1)
    mus = _sample_measures(spec, d, radius)

    alpha = _scalar_fn(profile.alpha)
    beta = _scalar_fn(profile.beta)
    gamma = _scalar_fn(profile.gamma)

    rows = []

    def add_row(name, margins, witnesses, required=True):
        margins = np.asarray(margins)
        worst_i = int(np.argmin(margins))
        violations = [
            witnesses[i] for i in np.nonzero(margins < -1e-9)[0][:25]
        ]
        rows.append(
            CheckRow(name, float(margins[worst_i]), len(margins), violations, required)
        )

    # nondegeneracy of sigma sigma^T in unit directions
    dirs = [np.eye(d)[i] for i in range(d)]
    margins_lo, margins_hi, wit = [], [], []
    for t in ts[:: max(1, len(ts) // 8)]:
        for x in xs[:: max(1, len(xs) // 8)]:
            for mu in mus[::2]:
                sig = eval_diffusion(model, float(t), x, mu)
                ssT = sig @ sig.T
                for y in dirs:
                    qf = float(y @ ssT @ y)
                    margins_lo.append(qf - profile.c_sigma_lower * float(y @ y))
                    margins_hi.append(profile.c_sigma * float(y @ y) - qf)
                    wit.append({"t": float(t), "x": x.tolist(), "quadratic_form": qf})
    add_row("nondegeneracy_lower", margins_lo, wit)
    add_row("nondegeneracy_upper", margins_hi, wit)

    # coercivity <x, b> <= alpha |x|^2 + beta ||mu||_2^2 + gamma
    margins, wit = [], []
    for t in ts:
        at, bt, gt = alpha(float(t)), beta(float(t)), gamma(float(t))
        for mu in mus:
            m2 = measure.moment(mu, 2)
            bvals = eval_drift(model, float(t), xs, mu)
            lhs = np.einsum("nd,nd->n", xs, bvals)
            rhs = at * np.einsum("nd,nd->n", xs, xs) + bt * m2 + gt
            marg = rhs - lhs
            for i in range(len(xs)):
                wit.append({"t": float(t), "x": xs[i].tolist(), "lhs": float(lhs[i])})
            margins.extend(marg.tolist())
    add_row("coercivity", margins, wit)

    # growth |b| <= L (1 + |x|^kappa + ||mu||_2^kappa)
    margins, wit = [], []
    for t in ts[:: max(1, len(ts) // 8)]:
        for mu in mus:
            m2 = measure.moment(mu, 2) ** 0.5
            bvals = eval_drift(model, float(t), xs, mu)
            norms = np.sqrt(np.einsum("nd,nd->n", bvals, bvals))
            xnorm = np.sqrt(np.einsum("nd,nd->n", xs, xs))
            rhs = profile.L * (1.0 + xnorm**profile.kappa + m2**profile.kappa)
            marg = rhs - norms
            for i in range(len(xs)):
                wit.append({"t": float(t), "x": xs[i].tolist(), "|b|": float(norms[i])})
            margins.extend(marg.tolist())
    add_row("growth", margins, wit)

    # pairwise rows: one-sided drift and sigma/drift Lipschitz
    margins_os, margins_sig, margins_dl, wit_pairs = [], [], [], []
    pair_mus = mus[:: max(1, len(mus) // 6)]
    for t in ts[:: max(1, len(ts) // 8)]:
        for mi in range(len(pair_mus)):
            for mj in range(mi, len(pair_mus)):
                mu, nu = pair_mus[mi], pair_mus[mj]
                w2 = wasserstein(mu, nu, 2.0) if mi != mj else 0.0
                bx = eval_drift(model, float(t), xs, mu)
                by = eval_drift(model, float(t), xs, nu)
                for i in range(0, len(xs), max(1, len(xs) // 12)):
                    dxv = xs - xs[i]
                    dbv = bx - by[i]
                    dx = np.sqrt(np.einsum("nd,nd->n", dxv, dxv))
                    inner = np.einsum("nd,nd->n", dxv, dbv)
                    rhs = profile.L * (dx**2 + dx * w2)
                    margins_os.extend((rhs - inner).tolist())
                    cross = np.sqrt(np.einsum("nd,nd->n", dbv, dbv))
                    margins_dl.extend((profile.L * (dx + w2) - cross).tolist())
                    sig_x = eval_diffusion(model, float(t), xs[i], mu)
                    sig_y = eval_diffusion(model, float(t), xs[i], nu)
                    sdiff = float(np.linalg.norm(sig_x - sig_y))
                    margins_sig.append(profile.L * w2 - sdiff)
                    wit_pairs.append({"t": float(t), "x_index": i, "w2": w2})
    pad = [{"pair": "see one_sided row"}] * len(margins_os)
    add_row("one_sided_lipschitz", margins_os, pad)
    add_row("sigma_lipschitz", margins_sig, wit_pairs)
    add_row("drift_lipschitz_twosided", margins_dl, pad, required=False)

    return AssumptionReport(rows)


# ---------------------------------------------------------------------------
# Curie-Weiss threshold algebra (exact)
# ---------------------------------------------------------------------------

def g_a_eval(params: CurieWeissParams, a: int, z: float, w: float) -> float:
    """Comparison polynomial controlling the shifted squared radius.

    For anchors +-1:  2 beta (z^4 - 3 z^3 + 2(k+1) z^2 - (f_sup + 2 k w) z) - sigma^2.
    For anchor 0:     2 beta (z^4 + (2k-1) z^2 - (f_sup + 2 k w) z) - sigma^2.
    """
    beta, k, f = params.beta, params.k, params.f_sup
    s2 = params.sigma**2
    if a in (1, -1):
        return 2.0 * beta * (z**4 - 3.0 * z**3 + 2.0 * (k + 1.0) * z**2 - (f + 2.0 * k * w) * z) - s2
    if a == 0:
        return 2.0 * beta * (z**4 + (2.0 * k - 1.0) * z**2 - (f + 2.0 * k * w) * z) - s2
    raise ConstructionError("supported anchors are -1, 0, +1")


def g_a_convex(params: CurieWeissParams, a: int) -> bool:
    """Convexity of z -> g_a(z, w) on z >= 0 (w-independent).

    Anchors +-1: the inner quadratic 6 z^2 - 9 z + 2(k+1) is nonnegative iff
    its discriminant 81 - 48 (k+1) is nonpositive, i.e. k >= 11/16.
    Anchor 0: 6 z^2 + (2k - 1) >= 0 on z >= 0 iff k >= 1/2.
    """
    if a in (1, -1):
        return 81.0 - 48.0 * (params.k + 1.0) <= 0.0
    if a == 0:
        return params.k >= 0.5
    raise ConstructionError("supported anchors are -1, 0, +1")


def _cw_cubic(a: int, th: float) -> float:
    if a in (1, -1):
        return th**3 - 3.0 * th**2 + 2.0 * th
    return th**3 - th


def cw_optimal_theta() -> float:
    """Radius maximizing the cubic th^3 - 3 th^2 + 2 th on (0, 1).

    Stationarity 3 th^2 - 6 th + 2 = 0 gives th = (6 - sqrt(12)) / 6.
    """
    return (6.0 - math.sqrt(12.0)) / 6.0


def cw_cubic_max() -> float:
    """Maximum of the anchor +-1 cubic over [0, 1]."""
    return _cw_cubic(1, cw_optimal_theta())


def cw_beta_threshold(params: CurieWeissParams, a: int, th: float) -> float:
    """Smallest admissible beta for the given anchor and radius (inf if none)."""
    head = _cw_cubic(a, th) - params.f_sup
    if head <= 0.0 or th <= 0.0:
        return float("inf")
    return params.sigma**2 / (2.0 * th * head)


@dataclass
class CWConditions:
    satisfied: bool
    margins: dict
    beta_threshold: float
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "satisfied": self.satisfied,
            "margins": {k: float(v) for k, v in self.margins.items()},
            "beta_threshold": float(self.beta_threshold),
            "reason": self.reason,
        }


def cw_conditions(params: CurieWeissParams, a: int, th: float) -> CWConditions:
    """Exact feasibility of the trapping conditions for one anchor.

    Anchors +-1 require k >= 11/16, radius outside [1, 2], forcing supremum
    strictly below the cubic value, and beta at or above the induced
    threshold; anchor 0 requires k >= 1/2 and radius above 1.  Inside the
    stated radius bands the comparison polynomial is negative at the radius
    regardless of beta, so the conditions are unsatisfiable there.
    """
    if th <= 0:
        raise ConstructionError("theta must be positive")
    margins = {}
    if a in (1, -1):
        margins["k_margin"] = params.k - 11.0 / 16.0
        band_bad = 1.0 <= th <= 2.0
        band_reason = "radius in the infeasible band [1, 2]"
    elif a == 0:
        margins["k_margin"] = params.k - 0.5
        band_bad = th <= 1.0
        band_reason = "radius in the infeasible band (0, 1]"
    else:
        raise ConstructionError("supported anchors are -1, 0, +1")
    cubic = _cw_cubic(a, th)
    margins["f_margin"] = cubic - params.f_sup
    thr = cw_beta_threshold(params, a, th)
    margins["beta_margin"] = params.beta - thr if math.isfinite(thr) else float("-inf")
    if band_bad:
        return CWConditions(False, margins, float("inf"), band_reason)
    if margins["k_margin"] < 0:
        return CWConditions(False, margins, thr, "interaction strength below the convexity boundary")
    if margins["f_margin"] <= 0:
        return CWConditions(False, margins, float("inf"), "forcing supremum at or above the cubic value")
    if margins["beta_margin"] < 0:
        return CWConditions(False, margins, thr, "beta below the threshold")
    return CWConditions(True, margins, thr)


def cw_uniqueness_criterion(params: CurieWeissParams) -> Optional[bool]:
    """Known sufficient condition for a unique invariant law (quadratic kernel).

    Stated for noise amplitude normalized to sigma^2 = 2 and constant
    forcing; returns None when the parameters sit outside that normalization.
    """
    if abs(params.sigma**2 - 2.0) > 1e-12 or params.forcing.terms:
        return None
    k, beta = params.k, params.beta
    if k <= 0.5:
        return 2.0 * k * math.sqrt(math.pi * beta) * math.exp((1.0 - 2.0 * k) ** 2 * beta / 4.0) <= 1.0
    return 2.0 * k * math.sqrt(math.pi * beta) <= 1.0


def curie_weiss_profile(params: CurieWeissParams) -> DissipativityProfile:
    """Shift-invariant dissipativity profile of the double-well model.

    alpha = -beta (k+1), beta = beta k, gamma = beta (f_sup^2 + 10),
    c_sigma = sigma^2; valid for the model conjugated to any of the anchors
    -1, 0, +1, with closed-form ceiling f_sup^2 + 10 + sigma^2 / (2 beta).
    """
    b = params.beta
    return DissipativityProfile(
        alpha=ForcingSpec(constant=-b * (params.k + 1.0)),
        beta=ForcingSpec(constant=b * params.k),
        gamma=ForcingSpec(constant=b * (params.f_sup**2 + 10.0)),
        c_sigma=params.sigma**2,
        c_sigma_lower=params.sigma**2,
        L=b * (1.0 + 2.0 * params.k),
        kappa=3.0,
        d=1,
    )


# ---------------------------------------------------------------------------
# Ball membership and the multistability driver
# ---------------------------------------------------------------------------

def ball_membership(flow: MeasureFlow, a, th: float):
    """Whether every node satisfies W1(mu_t, delta_a) <= th; returns (flag, worst)."""
    a_vec = np.atleast_1d(np.asarray(a, dtype=np.float64))
    worst = 0.0
    for mu in flow.measures:
        diff = mu.points - a_vec
        val = float(mu.weights @ np.sqrt(np.einsum("nd,nd->n", diff, diff)))
        worst = max(worst, val)
    return worst <= th, worst


@dataclass
class BistabilityReport:
    anchors: list
    separation_lower_bound: float
    measured_min_separation: float
    certified: bool
    classification: str
    mc_slack: float
    notes: list = dc_field(default_factory=list)
    fixed_point_reports: list = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "anchors": self.anchors,
            "separation_lower_bound": float(self.separation_lower_bound),
            "measured_min_separation": float(self.measured_min_separation),
            "certified": bool(self.certified),
            "classification": self.classification,
            "mc_slack": float(self.mc_slack),
            "notes": list(self.notes),
            "fixed_point_reports": [r.to_dict() for r in self.fixed_point_reports],
        }


def multistability_run(
    params: CurieWeissParams,
    anchors,
    thetas,
    window,
    tol: float,
    cfg: SimConfig,
    max_iter: int = 12,
    mc_slack: float = 0.05,
    threads: int = 1,
) -> BistabilityReport:
    """Solve for entrance measures at two anchors and certify their separation.

    Certification needs: exact conditions satisfied at both anchors, both
    Picard solvers converged, each flow inside its W1 ball, and the measured
    node-wise separation at least ``|a1 - a2| - th1 - th2 - mc_slack``.
    Failing the exact conditions downgrades the run to a diagnostic; balls
    that overlap are refused outright (no simulation).
    """
    a1, a2 = float(anchors[0]), float(anchors[1])
    th1, th2 = float(thetas[0]), float(thetas[1])
    sep_bound = abs(a1 - a2) - th1 - th2
    notes = []

    cond_entries = []
    for a, th in ((a1, th1), (a2, th2)):
        ai = int(round(a))
        if ai in (-1, 0, 1) and abs(a - ai) < 1e-12:
            cond = cw_conditions(params, ai, th)
        else:
            cond = CWConditions(False, {}, float("inf"), "no exact criterion for this anchor")
        cond_entries.append(cond)

    uniq = cw_uniqueness_criterion(params)
    conditions_ok = all(c.satisfied for c in cond_entries)

    if sep_bound <= 0:
        notes.append("refused: balls overlap (theta_1 + theta_2 >= |a1 - a2|); no runs performed")
        classification = "balls-overlap"
        return BistabilityReport(
            anchors=[
                {"a": a, "theta": th, "conditions": c.to_dict(), "converged": False, "in_ball": False,
                 "worst_ball_value": float("nan")}
                for (a, th), c in zip(((a1, th1), (a2, th2)), cond_entries)
            ],
            separation_lower_bound=sep_bound,
            measured_min_separation=float("nan"),
            certified=False,
            classification=classification,
            mc_slack=mc_slack,
            notes=notes,
        )

    if not conditions_ok:
        notes.append("exact conditions unsatisfied; proceeding diagnostically, certification off")

    model = make_curie_weiss(params)
    profile = curie_weiss_profile(params)

    def solve(anchor):
        return entrance_mod.solve_fixed_point(
            model, window, anchor, tol, max_iter, cfg, profile=profile
        )

    from ._parallel import parallel_map

    results = parallel_map(solve, [a1, a2], threads)
    flows = [r[0] for r in results]
    reports = [r[1] for r in results]

    entries = []
    for (a, th), cond, rep, flow in zip(((a1, th1), (a2, th2)), cond_entries, reports, flows):
        in_ball, worst = ball_membership(flow, a, th)
        entries.append(
            {
                "a": a,
                "theta": th,
                "conditions": cond.to_dict(),
                "converged": bool(rep.converged),
                "in_ball": bool(in_ball),
                "worst_ball_value": float(worst),
                "ball_margin": float(th - worst),
            }
        )

    min_sep = min(
        wasserstein(m1, m2, 1.0) for m1, m2 in zip(flows[0].measures, flows[1].measures)
    )
    certified = (
        conditions_ok
        and all(e["converged"] and e["in_ball"] for e in entries)
        and min_sep >= sep_bound - mc_slack
    )
    if certified:
        classification = "multistable-certified"
    elif uniq:
        classification = "uniqueness-criterion"
    else:
        classification = "indeterminate"
        if uniq is None and not conditions_ok:
            notes.append(
                "parameters sit between the uniqueness and multistability criteria (or outside "
                "the normalization of the uniqueness test); labeled indeterminate"
            )

    return BistabilityReport(
        anchors=entries,
        separation_lower_bound=sep_bound,
        measured_min_separation=float(min_sep),
        certified=certified,
        classification=classification,
        mc_slack=mc_slack,
        notes=notes,
        fixed_point_reports=reports,
    )
