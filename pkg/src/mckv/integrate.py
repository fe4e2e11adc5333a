"""Deterministic Euler-Maruyama integration of interacting and frozen particle systems.

Noise is counter-based: the increments consumed at absolute time step ``k``
are a pure function of ``(seed, particle index, k)``, generated per step from
a Philox stream keyed on ``(seed, k)``.  Because draws are consumed in lane
order, particle ``i`` receives the same values no matter how many particles
run or how the work is scheduled, which makes every run bit-reproducible and
lets split runs continue each other exactly.

Three entry points share one core loop:

* :func:`run_selfconsistent` - each particle sees the live ensemble law;
* :func:`run_frozen` - particles evolve independently under a fixed measure
  flow;
* :func:`run_reparameterized` - either of the above with coefficients read at
  torus-shifted times.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import measure
from .errors import BlowUpError, ConstructionError, CoverageError
from .measure import EmpiricalMeasure, MeasureFlow
from .model import CoefficientModel, eval_diffusion, eval_drift, reparameterize

__all__ = [
    "SimConfig",
    "NoiseStream",
    "sample_increment",
    "normal_block",
    "step_frozen",
    "run_selfconsistent",
    "run_frozen",
    "run_reparameterized",
    "gaussian_cloud",
    "expand_initial",
]

_M64 = (1 << 64) - 1

# separate key domains so different consumers never share draws
SALT_NOISE = 0
SALT_INIT = 1
SALT_RESAMPLE = 2
SALT_RESIDUAL = 3
SALT_LIFT = 4
SALT_REPLICA = 5


def _mix64(a: int, b: int) -> int:
    """SplitMix64-style mixer combining two 64-bit words into one."""
    z = (int(a) ^ (int(b) * 0x9E3779B97F4A7C15)) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def _philox_key(seed: int, salt: int, step: int) -> int:
    return (_mix64(seed, salt) << 64) | (int(step) & _M64)


def normal_block(
    seed: int, step: int, n: int, m: int = 1, salt: int = SALT_NOISE, out: Optional[np.ndarray] = None
) -> np.ndarray:
    """Standard-normal block of shape (n, m) for one absolute time step.

    Entry (i, j) is a pure function of (seed, salt, step, i, j): lanes are
    filled sequentially, so a longer block extends a shorter one.
    """
    gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, salt, step)))
    if out is not None:
        gen.standard_normal(out=out)
        return out
    return gen.standard_normal((n, m))


@dataclass(frozen=True)
class NoiseStream:
    """Identity of one particle's noise source: (seed, stream_id) plus a cursor."""

    seed: int
    stream_id: int
    counter: int = 0
    m: int = 1

    def next(self):
        """Increment at the cursor position and the advanced stream."""
        vec = sample_increment(self, self.counter)
        return vec, NoiseStream(self.seed, self.stream_id, self.counter + 1, self.m)


def sample_increment(stream: NoiseStream, step: int) -> np.ndarray:
    """Standard normal vector for (stream.seed, stream.stream_id, step).

    Deterministic: repeated calls with the same triple return identical
    values, and the values match lane ``stream_id`` of :func:`normal_block`.
    """
    block = normal_block(stream.seed, step, stream.stream_id + 1, stream.m)
    return block[stream.stream_id].copy()


@dataclass(frozen=True)
class SimConfig:
    """Ensemble-simulation knobs.

    ``n_canon`` is the atom count recorded per flow node (resampled,
    equal-weight); ``record_stride`` spaces nodes every ``record_stride * dt``.
    ``drift_scale``, when given, triggers a stability advisory if
    ``dt * drift_scale >= 0.5``.  ``tame_drift`` replaces b with
    b / (1 + dt |b|), the standard guard for superlinear drift under explicit
    stepping; it is off by default to keep the scheme plainly auditable.
    """

    n_particles: int
    dt: float
    seed: int = 0
    n_canon: int = 2048
    record_stride: int = 1
    tame_drift: bool = False
    drift_scale: Optional[float] = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConstructionError("n_particles must be >= 2")
        if self.dt <= 0:
            raise ConstructionError("dt must be positive")
        if self.record_stride < 1:
            raise ConstructionError("record_stride must be >= 1")
        if not (1 <= self.n_canon <= self.n_particles):
            raise ConstructionError("need 1 <= n_canon <= n_particles")
        if self.drift_scale is not None and self.dt * self.drift_scale >= 0.5:
            warnings.warn(
                f"dt * drift_scale = {self.dt * self.drift_scale:.3g} >= 0.5; "
                "explicit stepping may be unstable (consider tame_drift or smaller dt)",
                stacklevel=2,
            )


def gaussian_cloud(center, std: float, n: int, seed: int, dim: int = 1) -> EmpiricalMeasure:
    """Gaussian particle cloud drawn from the reserved init key space."""
    gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, SALT_INIT, 0)))
    pts = gen.standard_normal((n, dim)) * std + np.atleast_1d(np.asarray(center, dtype=np.float64))
    return measure.from_samples(pts)


def expand_initial(init: EmpiricalMeasure, n: int, seed: int) -> np.ndarray:
    """(n, d) particle positions distributed like ``init``.

    A Dirac replicates; a uniform cloud with exactly n atoms is used verbatim
    (state order preserved, so split runs continue exactly); otherwise d = 1
    uses deterministic midpoint quantiles and d > 1 multinomial resampling.
    """
    if init.n_atoms == 1:
        return np.repeat(init.points, n, axis=0).astype(np.float64)
    if init.n_atoms == n and init.uniform:
        return init.points.copy()
    if init.dim == 1:
        return measure.resample(init, n).points.copy()
    gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, SALT_INIT, 1)))
    idx = gen.choice(init.n_atoms, size=n, p=init.weights)
    return init.points[idx].copy()


def step_frozen(model: CoefficientModel, mu: EmpiricalMeasure, x, t: float, dt: float, dW, tame: bool = False):
    """One explicit Euler step ``x + b dt + sigma dW`` under the frozen law ``mu``.

    ``dW`` is the Brownian increment itself (already carries its sqrt(dt)
    scale).  Accepts a single state (d,) or a batch (n, d).
    """
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    dw = np.asarray(dW, dtype=np.float64)
    if dw.ndim == 1:
        dw = dw[None, :] if squeeze else np.tile(dw, (arr.shape[0], 1))
    b = eval_drift(model, t, arr, mu)
    sig = eval_diffusion(model, t, arr, mu)
    if tame:
        norms = np.sqrt(np.einsum("nd,nd->n", b, b))
        b = b / (1.0 + dt * norms)[:, None]
    if sig.ndim == 2:
        noise = dw @ sig.T
    else:
        noise = np.einsum("ndm,nm->nd", sig, dw)
    out = arr + b * dt + noise
    if not np.all(np.isfinite(out)):
        finite = np.isfinite(arr).all(axis=1)
        mag = float(np.max(np.abs(arr[finite]))) if finite.any() else float("nan")
        raise BlowUpError(t, mag)
    return out[0] if squeeze else out


def _record_node(x: np.ndarray, cfg: SimConfig, step_index: int) -> EmpiricalMeasure:
    if cfg.n_canon == x.shape[0]:
        return measure._raw(x.copy())
    cloud = measure._raw(x.copy())
    if x.shape[1] == 1:
        return measure.resample(cloud, cfg.n_canon)
    return measure.resample(cloud, cfg.n_canon, seed=_philox_key(cfg.seed, SALT_RESAMPLE, step_index))


def _simulate(
    model: CoefficientModel,
    x0: np.ndarray,
    s: float,
    t_end: float,
    cfg: SimConfig,
    frozen: Optional[MeasureFlow] = None,
    record_from: Optional[float] = None,
    noise_salt: int = SALT_NOISE,
) -> MeasureFlow:
    """Shared Euler loop; ``frozen=None`` means self-consistent ensemble coupling."""
    dt = cfg.dt
    k0 = int(math.floor(s / dt + 1e-9))
    k1 = int(round(t_end / dt))
    if k1 < k0:
        raise ConstructionError("t_end must be >= start time")
    rec0 = k0 if record_from is None else int(round(record_from / dt))
    stride = cfg.record_stride

    n, d = x0.shape
    m = model.noise_dim
    x = np.array(x0, dtype=np.float64, copy=True)
    uw = np.full(n, 1.0 / n)
    dWbuf = np.empty((n, m))
    bd = np.empty((n, d))
    tnorm = np.empty(n) if cfg.tame_drift else None

    sig_const = model.sigma_const
    scalar_sigma = None
    sigT = None
    if sig_const is not None:
        if sig_const.shape == (1, 1):
            scalar_sigma = float(sig_const[0, 0]) * math.sqrt(dt)
        else:
            sigT = sig_const.T * math.sqrt(dt)
    sqrt_dt = math.sqrt(dt)

    nodes = []
    last_healthy = None
    first_k = None

    def record(k: int):
        nonlocal last_healthy, first_k
        if k < rec0 or (k - rec0) % stride != 0:
            return
        if not np.all(np.isfinite(x)):
            t_bad = last_healthy if last_healthy is not None else k0 * dt
            finite = np.isfinite(x).all(axis=1)
            mag = float(np.max(np.abs(x[finite]))) if finite.any() else float("nan")
            raise BlowUpError(t_bad, mag)
        last_healthy = k * dt
        if first_k is None:
            first_k = k
        nodes.append(_record_node(x, cfg, k))

    for k in range(k0, k1):
        record(k)
        t = k * dt
        if frozen is None:
            mu = EmpiricalMeasure(x, uw)
        else:
            mu = measure.flow_eval(frozen, t)
        b = model.drift(t, x, mu)
        sig_local = None
        if sig_const is None:
            sig_local = model.diffusion(t, x, mu)
        if cfg.tame_drift:
            np.einsum("nd,nd->n", b, b, out=tnorm)
            np.sqrt(tnorm, out=tnorm)
            tnorm *= dt
            tnorm += 1.0
            np.divide(b, tnorm[:, None], out=bd)
            bd *= dt
        else:
            np.multiply(b, dt, out=bd)
        x += bd
        normal_block(cfg.seed, k, n, m, salt=noise_salt, out=dWbuf)
        if scalar_sigma is not None:
            np.multiply(dWbuf, scalar_sigma, out=bd)
            x += bd
        elif sigT is not None:
            np.matmul(dWbuf, sigT, out=bd)
            x += bd
        else:
            sig_arr = np.asarray(sig_local, dtype=np.float64)
            if sig_arr.ndim == 2:
                x += (dWbuf @ sig_arr.T) * sqrt_dt
            else:
                x += np.einsum("ndm,nm->nd", sig_arr, dWbuf) * sqrt_dt
    record(k1)

    if not nodes:
        raise ConstructionError("no nodes recorded; check record_from/stride alignment")
    return MeasureFlow(first_k * dt, stride * dt, tuple(nodes), extension="constant")


def run_selfconsistent(
    model: CoefficientModel,
    init: EmpiricalMeasure,
    s: float,
    t_end: float,
    cfg: SimConfig,
    record_from: Optional[float] = None,
    noise_salt: int = SALT_NOISE,
) -> MeasureFlow:
    """Evolve the interacting ensemble: every particle sees the live empirical law.

    The returned flow holds the canonicalized ensemble law every
    ``record_stride`` steps; it approximates the mean-field law up to the
    finite-ensemble (propagation of chaos) error.
    """
    if init.dim != model.dim:
        raise ConstructionError(f"init dim {init.dim} != model dim {model.dim}")
    x0 = expand_initial(init, cfg.n_particles, cfg.seed)
    return _simulate(model, x0, s, t_end, cfg, frozen=None, record_from=record_from, noise_salt=noise_salt)


def run_frozen(
    model: CoefficientModel,
    flow: MeasureFlow,
    init: EmpiricalMeasure,
    s: float,
    t_end: float,
    cfg: SimConfig,
    record_from: Optional[float] = None,
    noise_salt: int = SALT_NOISE,
) -> MeasureFlow:
    """Evolve independent particles under the fixed measure flow ``flow``.

    Realizes the linear transport semigroup of the frozen equation; particles
    never interact.  ``flow`` must cover [s, t_end] after extension.
    """
    if init.dim != model.dim:
        raise ConstructionError(f"init dim {init.dim} != model dim {model.dim}")
    if flow.extension == "none" and (flow.t_start > s + 1e-9 or flow.t_end < t_end - 1e-9):
        raise CoverageError(
            f"frozen flow window [{flow.t_start}, {flow.t_end}] does not cover [{s}, {t_end}]"
        )
    x0 = expand_initial(init, cfg.n_particles, cfg.seed)
    return _simulate(model, x0, s, t_end, cfg, frozen=flow, record_from=record_from, noise_salt=noise_salt)


def run_reparameterized(
    model: CoefficientModel,
    svec,
    init: EmpiricalMeasure,
    s: float,
    t_end: float,
    cfg: SimConfig,
    mode: str = "selfconsistent",
    frozen: Optional[MeasureFlow] = None,
    record_from: Optional[float] = None,
    noise_salt: int = SALT_NOISE,
) -> MeasureFlow:
    """Integrate with coefficients read at torus-shifted times ``svec + t``.

    ``mode`` selects the self-consistent ensemble or, with ``frozen=...``, the
    frozen-law dynamics.  With ``svec = (t0, ..., t0)`` the run matches the
    original coefficients time-shifted by t0 (same noise keys).
    """
    rmodel = reparameterize(model, svec)
    if mode == "selfconsistent":
        return run_selfconsistent(rmodel, init, s, t_end, cfg, record_from=record_from, noise_salt=noise_salt)
    if mode == "frozen":
        if frozen is None:
            raise ConstructionError("mode='frozen' needs frozen=<MeasureFlow>")
        return run_frozen(rmodel, frozen, init, s, t_end, cfg, record_from=record_from, noise_salt=noise_salt)
    raise ConstructionError(f"unknown mode {mode!r}")
