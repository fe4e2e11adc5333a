"""Time-inhomogeneous, law-dependent coefficient models.

A :class:`CoefficientModel` bundles a drift ``b(t, x, mu)`` and a diffusion
``sigma(t, x, mu)``; both are vectorized over a leading particle axis, and the
law argument is always an :class:`~mckv.measure.EmpiricalMeasure`.  Models
whose coefficients are (quasi-)periodic in time additionally carry a
:class:`QuasiPeriodicRep`: a multi-parameter version of the coefficients that
reduces to the original on the diagonal and is periodic in each coordinate.

Forcing terms are restricted to a constant plus a finite sum of sinusoids.
That keeps the supremum, the periods, and the quasi-periodic representation
(one sinusoid per torus coordinate) all exact, which the threshold checks in
:mod:`mckv.verify` rely on.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import measure
from .errors import ConstructionError, ModelEvaluationError, UnsupportedModelError

__all__ = [
    "SinusoidTerm",
    "ForcingSpec",
    "QuasiPeriodicRep",
    "CoefficientModel",
    "CurieWeissParams",
    "make_curie_weiss",
    "make_ou",
    "make_linear_periodic",
    "make_meanfield_ou",
    "eval_drift",
    "eval_diffusion",
    "eval_qp_drift",
    "eval_qp_diffusion",
    "shift_model",
    "reparameterize",
    "interaction_term",
    "MODEL_BUILDERS",
    "build_model",
]


# ---------------------------------------------------------------------------
# Forcing: constant + finite sum of sinusoids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SinusoidTerm:
    """One term ``amplitude * sin(omega * t + phase)``."""

    amplitude: float
    omega: float
    phase: float = 0.0

    def __post_init__(self):
        if self.omega == 0:
            raise ConstructionError("sinusoid frequency must be nonzero; fold constants into ForcingSpec.constant")

    @property
    def period(self) -> float:
        return 2.0 * math.pi / abs(self.omega)

    def value(self, s) -> float:
        return self.amplitude * np.sin(self.omega * s + self.phase)


@dataclass(frozen=True)
class ForcingSpec:
    """Scalar forcing ``f(t) = constant + sum_i a_i sin(omega_i t + phi_i)``."""

    constant: float = 0.0
    terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for term in self.terms:
            if not isinstance(term, SinusoidTerm):
                raise ConstructionError("forcing terms must be SinusoidTerm instances")

    def __call__(self, t):
        out = self.constant
        for term in self.terms:
            out = out + term.value(t)
        return out

    def sup(self) -> float:
        """Exact supremum of |f|: |constant| + sum of |amplitudes|."""
        return abs(self.constant) + sum(abs(term.amplitude) for term in self.terms)

    def periods(self) -> tuple:
        return tuple(term.period for term in self.terms)

    def rep_value(self, svec):
        """Multi-parameter version: term i evaluated on coordinate i of ``svec``."""
        svec = np.asarray(svec, dtype=np.float64)
        if svec.shape != (len(self.terms),):
            raise ConstructionError(
                f"expected {len(self.terms)} torus coordinates, got shape {svec.shape}"
            )
        out = self.constant
        for i, term in enumerate(self.terms):
            out = out + term.value(svec[i])
        return out

    @staticmethod
    def constant_forcing(c: float) -> "ForcingSpec":
        return ForcingSpec(constant=c)


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuasiPeriodicRep:
    """Multi-parameter coefficients with per-coordinate periods.

    ``drift_rep(svec, x, mu)`` and ``diffusion_rep(svec, x, mu)`` must agree
    with the base coefficients on the diagonal ``svec = (t, ..., t)`` and be
    periodic in each coordinate with the stated period.
    """

    periods: tuple
    drift_rep: Callable
    diffusion_rep: Callable

    def __post_init__(self):
        if len(self.periods) == 0:
            raise ConstructionError("need at least one period")
        if any(tau <= 0 for tau in self.periods):
            raise ConstructionError("periods must be positive")

    @property
    def n(self) -> int:
        return len(self.periods)


@dataclass(frozen=True)
class CoefficientModel:
    """Drift/diffusion pair for a law-dependent SDE in R^d with m-dimensional noise.

    ``drift(t, x, mu) -> (n, d)`` and ``diffusion(t, x, mu) -> (d, m) or
    (n, d, m)`` for x of shape (n, d).  Built-in models reuse internal scratch
    buffers, so the returned array is only valid until the next call on the
    same thread; :func:`eval_drift` returns a defensive copy.
    """

    dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    qp: Optional[QuasiPeriodicRep] = None
    label: str = "model"
    sigma_const: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise ConstructionError("dim and noise_dim must be >= 1")


def _as_batch(x, dim: int):
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ConstructionError(f"state has shape {np.shape(x)}, expected (..., {dim})")
    return arr, squeeze


def eval_drift(model: CoefficientModel, t: float, x, mu: measure.EmpiricalMeasure) -> np.ndarray:
    """Evaluate the drift with finiteness checks; raises on non-finite output."""
    arr, squeeze = _as_batch(x, model.dim)
    out = np.array(model.drift(t, arr, mu), dtype=np.float64, copy=True)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"drift of {model.label!r} returned non-finite values", t, x)
    return out[0] if squeeze else out


def eval_diffusion(model: CoefficientModel, t: float, x, mu: measure.EmpiricalMeasure) -> np.ndarray:
    """Evaluate the diffusion matrix with finiteness checks."""
    arr, squeeze = _as_batch(x, model.dim)
    out = np.array(model.diffusion(t, arr, mu), dtype=np.float64, copy=True)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"diffusion of {model.label!r} returned non-finite values", t, x)
    if squeeze and out.ndim == 3:
        return out[0]
    return out


def eval_qp_drift(model: CoefficientModel, svec, x, mu: measure.EmpiricalMeasure) -> np.ndarray:
    """Drift of the multi-parameter representation at torus coordinates ``svec``."""
    if model.qp is None:
        raise UnsupportedModelError(f"model {model.label!r} has no quasi-periodic representation")
    arr, squeeze = _as_batch(x, model.dim)
    out = np.array(model.qp.drift_rep(np.asarray(svec, dtype=np.float64), arr, mu), dtype=np.float64)
    return out[0] if squeeze else out


def eval_qp_diffusion(model: CoefficientModel, svec, x, mu: measure.EmpiricalMeasure) -> np.ndarray:
    if model.qp is None:
        raise UnsupportedModelError(f"model {model.label!r} has no quasi-periodic representation")
    arr, squeeze = _as_batch(x, model.dim)
    out = np.array(model.qp.diffusion_rep(np.asarray(svec, dtype=np.float64), arr, mu), dtype=np.float64)
    if squeeze and out.ndim == 3:
        return out[0]
    return out


class _Scratch(threading.local):
    """Per-thread reusable buffers so hot drift evaluations avoid allocations."""

    def __init__(self):
        self.bufs = {}

    def get(self, name: str, shape) -> np.ndarray:
        buf = self.bufs.get(name)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self.bufs[name] = buf
        return buf


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------

def _const_diffusion(sigma_mat: np.ndarray):
    def diffusion(t, x, mu):
        return sigma_mat

    return diffusion


def _trivial_qp(drift, diffusion, period: float) -> QuasiPeriodicRep:
    # autonomous coefficients: any period gives an exact representation
    def drift_rep(svec, x, mu):
        return drift(float(svec[0]), x, mu)

    def diffusion_rep(svec, x, mu):
        return diffusion(float(svec[0]), x, mu)

    return QuasiPeriodicRep((period,), drift_rep, diffusion_rep)


@dataclass(frozen=True)
class CurieWeissParams:
    """Parameters of the scalar double-well mean-field model.

    Drift ``beta * (x - x^3 + f(t) - 2k * (x - mean))`` with constant noise
    amplitude ``sigma``; ``k`` scales the quadratic attraction toward the
    ensemble mean.  ``f_sup`` is the exact supremum of the forcing.
    """

    beta: float
    k: float
    sigma: float
    forcing: ForcingSpec = field(default_factory=ForcingSpec)

    def __post_init__(self):
        if self.beta <= 0:
            raise ConstructionError("beta must be positive")
        if self.k <= 0:
            raise ConstructionError("k must be positive")
        if self.sigma == 0:
            raise ConstructionError("sigma = 0 makes the noise degenerate and is rejected")

    @property
    def f_sup(self) -> float:
        return self.forcing.sup()


def make_curie_weiss(params: CurieWeissParams) -> CoefficientModel:
    """Scalar double-well model with mean interaction and sinusoidal forcing.

    The interaction only needs the ensemble mean, so the drift is O(n) in the
    batch size.  A quasi-periodic representation (one torus coordinate per
    sinusoid) is attached whenever the forcing has oscillating terms.
    """
    beta = float(params.beta)
    k = float(params.k)
    forcing = params.forcing
    scratch = _Scratch()
    lin = beta * (1.0 - 2.0 * k)

    def _base(x, m, ft):
        u = scratch.get("u", x.shape)
        v = scratch.get("v", x.shape)
        np.multiply(x, x, out=u)
        np.multiply(u, x, out=u)          # x^3
        np.multiply(u, -beta, out=u)      # -beta x^3
        np.multiply(x, lin, out=v)        # beta(1-2k) x
        np.add(u, v, out=u)
        u += beta * (ft + 2.0 * k * m)
        return u

    def drift(t, x, mu):
        return _base(x, float(measure.mean(mu)[0]), float(forcing(t)))

    sigma_mat = np.array([[float(params.sigma)]])

    qp = None
    if forcing.terms:
        def drift_rep(svec, x, mu):
            return _base(x, float(measure.mean(mu)[0]), float(forcing.rep_value(svec)))

        def diffusion_rep(svec, x, mu):
            return sigma_mat

        qp = QuasiPeriodicRep(forcing.periods(), drift_rep, diffusion_rep)

    return CoefficientModel(
        dim=1,
        noise_dim=1,
        drift=drift,
        diffusion=_const_diffusion(sigma_mat),
        qp=qp,
        label=f"curie_weiss(beta={beta}, k={k}, sigma={params.sigma})",
        sigma_const=sigma_mat,
    )


def make_ou(rate: float = 1.0, sigma: float = math.sqrt(2.0), period: Optional[float] = 1.0) -> CoefficientModel:
    """Linear contraction ``b = -rate * x`` with constant noise.

    ``period`` attaches a trivial quasi-periodic representation (autonomous
    coefficients are periodic with any period); pass None to omit it.
    """
    if rate <= 0:
        raise ConstructionError("rate must be positive")
    scratch = _Scratch()

    def drift(t, x, mu):
        out = scratch.get("u", x.shape)
        np.multiply(x, -rate, out=out)
        return out

    sigma_mat = np.array([[float(sigma)]])
    diffusion = _const_diffusion(sigma_mat)
    qp = _trivial_qp(drift, diffusion, period) if period else None
    return CoefficientModel(
        1, 1, drift, diffusion, qp=qp, label=f"ou(rate={rate}, sigma={sigma})", sigma_const=sigma_mat
    )


def make_linear_periodic(
    rate: float = 1.0,
    sigma: float = 1.0,
    forcing: Optional[ForcingSpec] = None,
) -> CoefficientModel:
    """``b = -rate * x + f(t)`` with constant noise; default forcing sin(t)."""
    if forcing is None:
        forcing = ForcingSpec(terms=(SinusoidTerm(1.0, 1.0),))
    if not forcing.terms:
        raise ConstructionError("linear_periodic needs at least one sinusoid; use make_ou otherwise")
    scratch = _Scratch()

    def _base(x, ft):
        out = scratch.get("u", x.shape)
        np.multiply(x, -rate, out=out)
        out += ft
        return out

    def drift(t, x, mu):
        return _base(x, float(forcing(t)))

    sigma_mat = np.array([[float(sigma)]])

    def drift_rep(svec, x, mu):
        return _base(x, float(forcing.rep_value(svec)))

    def diffusion_rep(svec, x, mu):
        return sigma_mat

    qp = QuasiPeriodicRep(forcing.periods(), drift_rep, diffusion_rep)
    return CoefficientModel(
        1,
        1,
        drift,
        _const_diffusion(sigma_mat),
        qp=qp,
        label=f"linear_periodic(rate={rate}, sigma={sigma})",
        sigma_const=sigma_mat,
    )


def make_meanfield_ou(
    rate: float = 1.0, coupling: float = 0.5, sigma: float = math.sqrt(2.0), period: Optional[float] = 1.0
) -> CoefficientModel:
    """``b = -rate * x + coupling * mean(mu)``: the simplest genuinely law-dependent model."""
    scratch = _Scratch()

    def drift(t, x, mu):
        out = scratch.get("u", x.shape)
        np.multiply(x, -rate, out=out)
        out += coupling * float(measure.mean(mu)[0])
        return out

    sigma_mat = np.array([[float(sigma)]])
    diffusion = _const_diffusion(sigma_mat)
    qp = _trivial_qp(drift, diffusion, period) if period else None
    return CoefficientModel(
        1,
        1,
        drift,
        diffusion,
        qp=qp,
        label=f"meanfield_ou(rate={rate}, coupling={coupling}, sigma={sigma})",
        sigma_const=sigma_mat,
    )


def interaction_term(grad_w: Callable) -> Callable:
    """Mean-field interaction ``x -> integral of grad_w(x, y) d mu(y)``.

    ``grad_w(x, y)`` must broadcast over arrays.  Expensive: evaluating the
    returned term costs O(batch * atoms) kernel calls per time step, unlike
    the built-in models which reduce the law to summary statistics.
    """

    def term(t, x, mu):
        contrib = grad_w(x[:, None, :], mu.points[None, :, :])
        return np.einsum("nmd,m->nd", contrib, mu.weights)

    return term


# ---------------------------------------------------------------------------
# Shift conjugation and reparameterization
# ---------------------------------------------------------------------------

def shift_model(model: CoefficientModel, a) -> CoefficientModel:
    """Conjugate the model by a spatial shift.

    The shifted coefficients satisfy ``b_a(t, y, nu) = b(t, y + a,
    shift_measure(nu, a))``, so if ``X`` solves the original equation then
    ``X - a`` solves the shifted one.  Composing shifts adds the vectors.
    """
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if a.shape != (model.dim,):
        raise ConstructionError(f"shift vector has shape {a.shape}, expected ({model.dim},)")

    def drift(t, x, mu):
        return model.drift(t, x + a, measure.shift_measure(mu, a))

    def diffusion(t, x, mu):
        return model.diffusion(t, x + a, measure.shift_measure(mu, a))

    qp = None
    if model.qp is not None:
        base = model.qp

        def drift_rep(svec, x, mu):
            return base.drift_rep(svec, x + a, measure.shift_measure(mu, a))

        def diffusion_rep(svec, x, mu):
            return base.diffusion_rep(svec, x + a, measure.shift_measure(mu, a))

        qp = QuasiPeriodicRep(base.periods, drift_rep, diffusion_rep)

    return CoefficientModel(
        model.dim,
        model.noise_dim,
        drift,
        diffusion,
        qp=qp,
        label=f"{model.label} shifted by {a.tolist()}",
        sigma_const=model.sigma_const,
    )


def reparameterize(model: CoefficientModel, svec) -> CoefficientModel:
    """Model with coefficients read off at torus-shifted times.

    The new drift is ``(t, x, mu) -> drift_rep(svec + t, x, mu)``; setting
    ``svec = 0`` recovers the original coefficients on the diagonal.
    """
    if model.qp is None:
        raise UnsupportedModelError(f"model {model.label!r} has no quasi-periodic representation")
    svec = np.asarray(svec, dtype=np.float64)
    if svec.shape != (model.qp.n,):
        raise ConstructionError(f"svec has shape {svec.shape}, expected ({model.qp.n},)")
    base = model.qp

    def drift(t, x, mu):
        return base.drift_rep(svec + t, x, mu)

    def diffusion(t, x, mu):
        return base.diffusion_rep(svec + t, x, mu)

    def drift_rep(u, x, mu):
        return base.drift_rep(np.asarray(u) + svec, x, mu)

    def diffusion_rep(u, x, mu):
        return base.diffusion_rep(np.asarray(u) + svec, x, mu)

    qp = QuasiPeriodicRep(base.periods, drift_rep, diffusion_rep)
    return CoefficientModel(
        model.dim,
        model.noise_dim,
        drift,
        diffusion,
        qp=qp,
        label=f"{model.label} @ svec={svec.tolist()}",
        sigma_const=model.sigma_const,
    )


# ---------------------------------------------------------------------------
# Registry for config-driven construction
# ---------------------------------------------------------------------------

def _forcing_from_table(table) -> ForcingSpec:
    if table is None:
        return ForcingSpec()
    if isinstance(table, (int, float)):
        return ForcingSpec(constant=float(table))
    terms = tuple(
        SinusoidTerm(float(t[0]), float(t[1]), float(t[2]) if len(t) > 2 else 0.0)
        for t in table.get("terms", [])
    )
    return ForcingSpec(constant=float(table.get("constant", 0.0)), terms=terms)


def _build_curie_weiss(params: dict) -> CoefficientModel:
    return make_curie_weiss(
        CurieWeissParams(
            beta=float(params["beta"]),
            k=float(params["k"]),
            sigma=float(params["sigma"]),
            forcing=_forcing_from_table(params.get("forcing")),
        )
    )


def _build_ou(params: dict) -> CoefficientModel:
    return make_ou(
        rate=float(params.get("rate", 1.0)),
        sigma=float(params.get("sigma", math.sqrt(2.0))),
        period=params.get("period", 1.0),
    )


def _build_linear_periodic(params: dict) -> CoefficientModel:
    forcing = _forcing_from_table(params.get("forcing"))
    if not forcing.terms:
        forcing = ForcingSpec(terms=(SinusoidTerm(float(params.get("amp", 1.0)), float(params.get("omega", 1.0))),))
    return make_linear_periodic(
        rate=float(params.get("rate", 1.0)),
        sigma=float(params.get("sigma", 1.0)),
        forcing=forcing,
    )


def _build_meanfield_ou(params: dict) -> CoefficientModel:
    return make_meanfield_ou(
        rate=float(params.get("rate", 1.0)),
        coupling=float(params.get("coupling", 0.5)),
        sigma=float(params.get("sigma", math.sqrt(2.0))),
        period=params.get("period", 1.0),
    )


MODEL_BUILDERS = {
    "curie_weiss": _build_curie_weiss,
    "ou": _build_ou,
    "linear_periodic": _build_linear_periodic,
    "meanfield_ou": _build_meanfield_ou,
}


def build_model(name: str, params: dict) -> CoefficientModel:
    try:
        builder = MODEL_BUILDERS[name]
    except KeyError:
        raise ConstructionError(
            f"unknown model {name!r}; built-ins: {sorted(MODEL_BUILDERS)}"
        ) from None
    return builder(params or {})
