"""Simulation engines for the discrete, diffusion, and linearized dynamics.

All runners are pure functions of their inputs plus an integer seed: a fresh
generator is created per call, so identical calls reproduce trajectories
bitwise.  Discrete runs abort with :class:`DivergenceError` (carrying the
partial trajectory) once the iterate norm passes 1e12 or a recorded loss
stops being finite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import SymMatrix, solve_lyapunov, sqrt_spd
from .problems import LossModel, QuadraticModel, as_param_vector, gradient_covariance

__all__ = [
    "EngineError",
    "DivergenceError",
    "SgdConfig",
    "Trajectory",
    "OuSpec",
    "sgd_run",
    "gaussian_sgd_run",
    "sde_run",
    "gradient_flow",
    "ou_eigenbasis_run",
    "fluctuation_trajectory",
    "integrate_fluctuation_covariance",
    "sgd_replica_ensemble",
    "write_trajectory_csv",
    "write_snapshots_csv",
]

# Abort once ||theta||^2 exceeds this (i.e. ||theta|| > 1e12).
DIVERGENCE_NORM_SQ = 1e24
# Full parameter snapshots are kept only while their total entry count
# stays under this budget; beyond it runs fall back to summary records.
SNAPSHOT_BUDGET = 10_000_000

SAMPLING_MODES = ("with_replacement", "without_replacement")


class EngineError(ValueError):
    """Raised on dynamics precondition violations."""


class DivergenceError(RuntimeError):
    """Iterate escaped the divergence guard; carries the partial run."""

    def __init__(self, step: int, trajectory: "Trajectory", detail: str = ""):
        self.step = step
        self.trajectory = trajectory
        message = f"divergence at step {step}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


@dataclass(frozen=True)
class SgdConfig:
    """Step size, batch size, horizon, seed, and sampling mode."""

    learning_rate: float
    batch_size: int
    steps: int
    seed: int
    sampling: str = "with_replacement"

    def __post_init__(self) -> None:
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise EngineError("learning_rate must be positive and finite")
        if self.batch_size < 1:
            raise EngineError("batch_size must be at least 1")
        if self.steps < 1:
            raise EngineError("steps must be at least 1")
        if self.sampling not in SAMPLING_MODES:
            raise EngineError(
                f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}"
            )


@dataclass
class Trajectory:
    """Recorded (step, time, loss, ||grad||^2) rows, optionally with states.

    ``times`` equals ``steps * time_step`` for whichever time step the
    producing run used (the learning rate for discrete runs, dt for
    integrators).
    """

    record_stride: int
    steps: np.ndarray
    times: np.ndarray
    losses: np.ndarray
    grad_norms_sq: np.ndarray
    thetas: np.ndarray | None = None

    def __post_init__(self) -> None:
        k = len(self.steps)
        if not (len(self.times) == len(self.losses) == len(self.grad_norms_sq) == k):
            raise EngineError("trajectory column lengths disagree")
        if k == 0:
            raise EngineError("trajectory must contain at least one record")
        if (np.diff(self.steps) <= 0).any():
            raise EngineError("trajectory steps must increase strictly")
        if self.thetas is not None and len(self.thetas) != k:
            raise EngineError("snapshot count must match record count")


class _Recorder:
    def __init__(self, total_steps: int, stride: int, param_dim: int, snapshots: bool):
        if stride < 1:
            raise EngineError("record_stride must be at least 1")
        n_rec = total_steps // stride + 1
        if total_steps % stride:
            n_rec += 1
        self.stride = stride
        self.steps = np.empty(n_rec, dtype=np.int64)
        self.losses = np.empty(n_rec)
        self.grad_norms_sq = np.empty(n_rec)
        self.thetas: np.ndarray | None = None
        if snapshots:
            if param_dim * n_rec > SNAPSHOT_BUDGET:
                warnings.warn(
                    f"snapshot request of {param_dim * n_rec} entries exceeds the "
                    f"budget {SNAPSHOT_BUDGET}; keeping summary records only",
                    stacklevel=3,
                )
            else:
                self.thetas = np.empty((n_rec, param_dim))
        self.count = 0

    def add(self, step: int, loss: float, grad_norm_sq: float, theta: np.ndarray) -> None:
        i = self.count
        self.steps[i] = step
        self.losses[i] = loss
        self.grad_norms_sq[i] = grad_norm_sq
        if self.thetas is not None:
            self.thetas[i] = theta
        self.count = i + 1

    def build(self, time_step: float) -> Trajectory:
        sl = slice(0, self.count)
        return Trajectory(
            record_stride=self.stride,
            steps=self.steps[sl].copy(),
            times=self.steps[sl] * time_step,
            losses=self.losses[sl].copy(),
            grad_norms_sq=self.grad_norms_sq[sl].copy(),
            thetas=None if self.thetas is None else self.thetas[sl].copy(),
        )


def _record_state(rec: _Recorder, model: LossModel, step: int, theta: np.ndarray, time_step: float):
    loss = model.loss(theta)
    if not np.isfinite(loss):
        raise DivergenceError(step, rec.build(time_step), "loss is not finite")
    grad = model.full_grad(theta)
    rec.add(step, loss, float(grad @ grad), theta)


def _check_batch(model: LossModel, batch_size: int) -> None:
    n = model.example_count
    if n is not None and batch_size > n:
        raise EngineError(f"batch_size {batch_size} exceeds the {n} available examples")


def sgd_run(
    model: LossModel,
    theta0,
    cfg: SgdConfig,
    *,
    record_stride: int = 1,
    snapshots: bool = False,
) -> Trajectory:
    """Plain minibatch SGD: theta <- theta - lr * (mean batch gradient).

    Finite-data models draw index batches per ``cfg.sampling`` from the
    seeded stream; synthesized-noise models draw ``batch_size`` fresh
    per-example gradients instead.
    """
    theta = as_param_vector(theta0, model.param_dim)
    _check_batch(model, cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    delta = cfg.learning_rate
    m = cfg.batch_size
    n = model.example_count
    with_replacement = cfg.sampling == "with_replacement"
    rec = _Recorder(cfg.steps, record_stride, theta.size, snapshots)
    _record_state(rec, model, 0, theta, delta)
    for k in range(1, cfg.steps + 1):
        if n is None:
            grad = model.synthesized_minibatch_grad(theta, m, rng)
        else:
            if with_replacement:
                idx = rng.integers(0, n, size=m)
            else:
                idx = rng.choice(n, size=m, replace=False)
            grad = model.batch_grad(theta, idx)
        theta = theta - delta * grad
        sq = theta @ theta
        if sq != sq or sq > DIVERGENCE_NORM_SQ:
            raise DivergenceError(k, rec.build(delta), "iterate norm guard tripped")
        if k % record_stride == 0 or k == cfg.steps:
            _record_state(rec, model, k, theta, delta)
    return rec.build(delta)


def _noise_root(model: LossModel, reference: np.ndarray, cov_sample_count: int) -> np.ndarray:
    exact = model.exact_gradient_covariance()
    if exact is not None:
        return sqrt_spd(exact)
    cov = gradient_covariance(model, reference, cov_sample_count)
    return sqrt_spd(cov)


def gaussian_sgd_run(
    model: LossModel,
    theta0,
    cfg: SgdConfig,
    *,
    ref_point=None,
    cov_sample_count: int = 20000,
    record_stride: int = 1,
    snapshots: bool = False,
) -> Trajectory:
    """SGD with the minibatch noise replaced by its Gaussian surrogate.

    Updates theta <- theta - lr * grad + (lr / sqrt(m)) * R xi with
    R R^T equal to the per-example gradient covariance.  The covariance is
    the model's exact one when available, otherwise it is estimated once at
    ``ref_point`` (default: the start point) and frozen for the run.
    """
    theta = as_param_vector(theta0, model.param_dim)
    reference = theta if ref_point is None else as_param_vector(ref_point, model.param_dim)
    root = _noise_root(model, reference, cov_sample_count)
    rng = np.random.default_rng(cfg.seed)
    delta = cfg.learning_rate
    scale = delta / np.sqrt(cfg.batch_size)
    p = theta.size
    rec = _Recorder(cfg.steps, record_stride, p, snapshots)
    _record_state(rec, model, 0, theta, delta)
    for k in range(1, cfg.steps + 1):
        grad = model.full_grad(theta)
        theta = theta - delta * grad + scale * (root @ rng.standard_normal(p))
        sq = theta @ theta
        if sq != sq or sq > DIVERGENCE_NORM_SQ:
            raise DivergenceError(k, rec.build(delta), "iterate norm guard tripped")
        if k % record_stride == 0 or k == cfg.steps:
            _record_state(rec, model, k, theta, delta)
    return rec.build(delta)


def _step_count(t_end: float, dt: float) -> int:
    if not (np.isfinite(dt) and dt > 0):
        raise EngineError("dt must be positive and finite")
    if not (np.isfinite(t_end) and t_end >= 0):
        raise EngineError("t_end must be nonnegative and finite")
    return int(round(t_end / dt))


def sde_run(
    model: LossModel,
    theta0,
    learning_rate: float,
    batch_size: int,
    t_end: float,
    dt: float,
    seed: int,
    *,
    record_stride: int = 1,
    snapshots: bool = False,
    cov_sample_count: int = 20000,
) -> Trajectory:
    """Euler-Maruyama discretization of the SGD diffusion approximation:

        dX = -grad f(X) dt + sqrt(lr / m) * sigma(X) dW,

    with sigma(X) the PSD square root of the per-example gradient
    covariance.  A constant exact covariance is factored once; finite-data
    models refresh sigma(X) at every step.  Requires dt <= learning_rate
    (the diffusion has no business resolving scales finer than one SGD
    step).
    """
    theta = as_param_vector(theta0, model.param_dim)
    if not (np.isfinite(learning_rate) and learning_rate > 0):
        raise EngineError("learning_rate must be positive and finite")
    if batch_size < 1:
        raise EngineError("batch_size must be at least 1")
    if dt > learning_rate:
        raise EngineError(f"dt={dt} must not exceed learning_rate={learning_rate}")
    steps = _step_count(t_end, dt)
    if steps < 1:
        raise EngineError("t_end must cover at least one dt step")
    exact = model.exact_gradient_covariance()
    frozen_root = sqrt_spd(exact) if exact is not None else None
    rng = np.random.default_rng(seed)
    amp = np.sqrt(learning_rate / batch_size)
    sqrt_dt = np.sqrt(dt)
    p = theta.size
    rec = _Recorder(steps, record_stride, p, snapshots)
    _record_state(rec, model, 0, theta, dt)
    for k in range(1, steps + 1):
        if frozen_root is None:
            root = sqrt_spd(gradient_covariance(model, theta, cov_sample_count))
        else:
            root = frozen_root
        grad = model.full_grad(theta)
        theta = theta - grad * dt + (amp * sqrt_dt) * (root @ rng.standard_normal(p))
        sq = theta @ theta
        if sq != sq or sq > DIVERGENCE_NORM_SQ:
            raise DivergenceError(k, rec.build(dt), "iterate norm guard tripped")
        if k % record_stride == 0 or k == steps:
            _record_state(rec, model, k, theta, dt)
    return rec.build(dt)


def gradient_flow(
    model: LossModel,
    theta0,
    t_end: float,
    dt: float,
    *,
    record_stride: int = 1,
    snapshots: bool = True,
) -> Trajectory:
    """Classical fourth-order Runge-Kutta integration of dX/dt = -grad f(X).

    Integrates round(t_end / dt) steps of size exactly dt; snapshots default
    on because downstream interpolation needs the states.
    """
    theta = as_param_vector(theta0, model.param_dim)
    steps = _step_count(t_end, dt)
    if steps < 1:
        raise EngineError("t_end must cover at least one dt step")
    rec = _Recorder(steps, record_stride, theta.size, snapshots)
    _record_state(rec, model, 0, theta, dt)
    half = 0.5 * dt
    for k in range(1, steps + 1):
        k1 = -model.full_grad(theta)
        k2 = -model.full_grad(theta + half * k1)
        k3 = -model.full_grad(theta + half * k2)
        k4 = -model.full_grad(theta + dt * k3)
        theta = theta + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if k % record_stride == 0 or k == steps:
            _record_state(rec, model, k, theta, dt)
    return rec.build(dt)


@dataclass(frozen=True)
class OuSpec:
    """Linear diffusion dX = -A X dt + scale * B dW with B B^T = Q.

    ``drift`` (A) is symmetric; ``diffusion_cov`` (Q) must be PSD.  The
    stationary covariance solves G A + A G = scale^2 * Q.
    """

    drift: SymMatrix
    diffusion_cov: SymMatrix
    scale: float = 1.0
    diffusion_root: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.drift.dim != self.diffusion_cov.dim:
            raise EngineError("drift and diffusion dimensions disagree")
        if not (np.isfinite(self.scale) and self.scale >= 0):
            raise EngineError("scale must be nonnegative and finite")
        object.__setattr__(self, "diffusion_root", sqrt_spd(self.diffusion_cov))

    @classmethod
    def eigenbasis(cls, eigenvalues, learning_rate: float, batch_size: int) -> "OuSpec":
        lam = np.asarray(eigenvalues, dtype=float)
        return cls(
            drift=SymMatrix.diagonal(lam),
            diffusion_cov=SymMatrix.diagonal(lam),
            scale=float(np.sqrt(learning_rate / batch_size)),
        )

    @classmethod
    def at_minimum(cls, hessian: SymMatrix, noise_cov: SymMatrix) -> "OuSpec":
        return cls(drift=hessian, diffusion_cov=noise_cov, scale=1.0)

    def stationary_covariance(self) -> SymMatrix:
        scaled = SymMatrix(self.scale**2 * self.diffusion_cov.entries)
        return solve_lyapunov(self.drift, scaled)


def ou_eigenbasis_run(
    eigenvalues,
    learning_rate: float,
    batch_size: int,
    t_end: float,
    dt: float,
    seed: int,
    *,
    record_stride: int = 1,
    snapshots: bool = True,
    z0=None,
) -> Trajectory:
    """Exact-discretization OU process in the curvature eigenbasis.

    Each coordinate follows dz_i = -lam_i z_i dt + sqrt(lr/m) sqrt(lam_i) dW,
    stepped exactly: z <- exp(-lam dt) z + eta with
    Var eta = (lr / 2m)(1 - exp(-2 lam dt)).  The stationary variance is
    lr/(2m) in every coordinate regardless of lam.  Records carry the
    quadratic loss 0.5 * sum lam z^2 and its gradient norm squared.
    """
    lam = np.asarray(eigenvalues, dtype=float).reshape(-1)
    if lam.size < 1 or not (np.isfinite(lam).all() and (lam > 0).all()):
        raise EngineError("eigenvalues must be positive and finite")
    if not (np.isfinite(learning_rate) and learning_rate >= 0):
        raise EngineError("learning_rate must be nonnegative and finite")
    if batch_size < 1:
        raise EngineError("batch_size must be at least 1")
    steps = _step_count(t_end, dt)
    if steps < 1:
        raise EngineError("t_end must cover at least one dt step")
    z = np.zeros(lam.size) if z0 is None else as_param_vector(z0, lam.size)
    rng = np.random.default_rng(seed)
    decay = np.exp(-lam * dt)
    std = np.sqrt((learning_rate / (2.0 * batch_size)) * (1.0 - decay * decay))
    rec = _Recorder(steps, record_stride, lam.size, snapshots)

    def add(step: int, state: np.ndarray) -> None:
        weighted = lam * state
        rec.add(step, 0.5 * float(state @ weighted), float(weighted @ weighted), state)

    add(0, z)
    for k in range(1, steps + 1):
        z = decay * z + std * rng.standard_normal(lam.size)
        if k % record_stride == 0 or k == steps:
            add(k, z)
    return rec.build(dt)


def _hermite_interpolate(grid: np.ndarray, values: np.ndarray, slopes: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Piecewise-cubic Hermite evaluation of values on grid at query times."""
    idx = np.searchsorted(grid, query, side="right") - 1
    idx = np.clip(idx, 0, len(grid) - 2)
    width = grid[idx + 1] - grid[idx]
    tau = ((query - grid[idx]) / width)[:, None]
    t2 = tau * tau
    t3 = t2 * tau
    h00 = 2.0 * t3 - 3.0 * t2 + 1.0
    h10 = t3 - 2.0 * t2 + tau
    h01 = -2.0 * t3 + 3.0 * t2
    h11 = t3 - t2
    w = width[:, None]
    return (
        h00 * values[idx]
        + h10 * w * slopes[idx]
        + h01 * values[idx + 1]
        + h11 * w * slopes[idx + 1]
    )


def fluctuation_trajectory(
    sgd_traj: Trajectory,
    flow_traj: Trajectory,
    learning_rate: float,
    batch_size: int,
    *,
    model: LossModel | None = None,
) -> Trajectory:
    """Rescaled deviation sqrt(m / lr) * (x(t) - X(t)) at the SGD record times.

    The deterministic reference X is evaluated by cubic Hermite interpolation
    on the flow grid, with exact slopes -grad f(X) when a model is supplied
    and finite-difference slopes otherwise.  The returned records store the
    deviation snapshots; their loss column holds 0.5 * ||v||^2 and the
    gradient column ||v||^2 (the process has no loss of its own).
    """
    if sgd_traj.thetas is None or flow_traj.thetas is None:
        raise EngineError("both trajectories must carry parameter snapshots")
    grid = flow_traj.times
    if len(grid) < 2:
        raise EngineError("flow trajectory needs at least two records to interpolate")
    horizon = grid[-1] + 1e-9 * max(1.0, abs(grid[-1]))
    if sgd_traj.times[-1] > horizon:
        raise EngineError(
            f"time-range mismatch: SGD runs to t={sgd_traj.times[-1]} but the "
            f"flow grid ends at t={grid[-1]}"
        )
    values = flow_traj.thetas
    if model is not None:
        slopes = np.stack([-model.full_grad(x) for x in values])
    else:
        slopes = np.empty_like(values)
        slopes[1:-1] = (values[2:] - values[:-2]) / (grid[2:] - grid[:-2])[:, None]
        slopes[0] = (values[1] - values[0]) / (grid[1] - grid[0])
        slopes[-1] = (values[-1] - values[-2]) / (grid[-1] - grid[-2])
    reference = _hermite_interpolate(grid, values, slopes, sgd_traj.times)
    deviations = np.sqrt(batch_size / learning_rate) * (sgd_traj.thetas - reference)
    norms_sq = (deviations * deviations).sum(axis=1)
    return Trajectory(
        record_stride=sgd_traj.record_stride,
        steps=sgd_traj.steps.copy(),
        times=sgd_traj.times.copy(),
        losses=0.5 * norms_sq,
        grad_norms_sq=norms_sq,
        thetas=deviations,
    )


def integrate_fluctuation_covariance(
    hessian_along_flow,
    cov_along_flow,
    t_end: float,
    dt: float,
) -> SymMatrix:
    """RK4 integration of dG/dt = -(H(t) G + G H(t)) + Q(t) from G(0) = 0.

    ``hessian_along_flow`` and ``cov_along_flow`` map a time to a SymMatrix;
    the result is the deviation-process covariance at ``t_end``.
    """
    steps = _step_count(t_end, dt)
    h0 = hessian_along_flow(0.0)
    dim = h0.dim

    def deriv(t: float, g: np.ndarray) -> np.ndarray:
        h = hessian_along_flow(t).entries
        q = cov_along_flow(t).entries
        return -(h @ g + g @ h) + q

    gamma = np.zeros((dim, dim))
    for k in range(steps):
        t = k * dt
        k1 = deriv(t, gamma)
        k2 = deriv(t + 0.5 * dt, gamma + 0.5 * dt * k1)
        k3 = deriv(t + 0.5 * dt, gamma + 0.5 * dt * k2)
        k4 = deriv(t + dt, gamma + dt * k3)
        gamma = gamma + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return SymMatrix(0.5 * (gamma + gamma.T))


def sgd_replica_ensemble(
    model: QuadraticModel,
    theta0,
    learning_rate: float,
    batch_size: int,
    steps: int,
    replicas: int,
    master_seed: int,
    *,
    block: int = 512,
) -> np.ndarray:
    """Final states of `replicas` independent SGD runs, advanced in lockstep.

    Only synthesized-noise quadratic dynamics support this vectorized form.
    Each replica owns a child stream spawned from the master seed and draws
    its noise in step order, so the ensemble is reproducible and independent
    of any execution partitioning.  The per-step minibatch noise is a single
    N(0, C/m) variate, exactly the law of a mean of ``batch_size``
    per-example draws.
    """
    if not isinstance(model, QuadraticModel) or not model.synthesizes_noise:
        raise EngineError("lockstep ensembles need a synthesized-noise quadratic model")
    if replicas < 1 or steps < 1:
        raise EngineError("replicas and steps must be positive")
    theta_start = as_param_vector(theta0, model.param_dim)
    h = model.hessian.entries
    center = model.minimizer
    root_t = model.noise_sqrt.T / np.sqrt(batch_size)
    states = np.tile(theta_start, (replicas, 1))
    generators = [
        np.random.default_rng(child)
        for child in np.random.SeedSequence(master_seed).spawn(replicas)
    ]
    p = model.param_dim
    done = 0
    while done < steps:
        b = min(block, steps - done)
        noise = np.empty((replicas, b, p))
        for r, gen in enumerate(generators):
            noise[r] = gen.standard_normal((b, p))
        for j in range(b):
            grads = (states - center) @ h + noise[:, j, :] @ root_t
            states = states - learning_rate * grads
        done += b
        peak = np.abs(states).max()
        if not np.isfinite(peak) or peak > 1e12:
            raise EngineError(
                f"replica ensemble diverged within {done} steps (max |theta|={peak:.3e})"
            )
    return states


def write_trajectory_csv(path, traj: Trajectory) -> None:
    lines = ["step,t,loss,grad_norm_sq"]
    for k, t, loss, g in zip(traj.steps, traj.times, traj.losses, traj.grad_norms_sq):
        lines.append(f"{int(k)},{float(t)!r},{float(loss)!r},{float(g)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_snapshots_csv(path, traj: Trajectory) -> None:
    if traj.thetas is None:
        raise EngineError("trajectory carries no snapshots")
    p = traj.thetas.shape[1]
    lines = ["step," + ",".join(f"theta_{i}" for i in range(p))]
    for k, row in zip(traj.steps, traj.thetas):
        lines.append(f"{int(k)}," + ",".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
