"""Model-free policy iteration from trajectory data.

One excitation run is collected under the initial policy plus
exploration noise; every iteration afterwards reuses that window,
re-targeting the least-squares problem with the current policy iterate.
Each row couples the change of the value basis across a sampling
interval with integrals of the policy basis against the composite-input
mismatch; the stacked system is solved by SVD least squares under a
persistent-excitation guard.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .basis import Approximant, BasisSet
from .dynsys import CostSpec, Plant, Trajectory
from .errors import EmptyInterval, PEViolation, ScheduleExhausted


@dataclass
class ExplorationNoise:
    """Sum of seeded sinusoids; peak magnitude bounded by `amplitude`.

    Frequencies are log-spaced over [freq_low, freq_high] Hz and phases
    are drawn once from the seeded generator, so the signal is fully
    reproducible.
    """

    amplitude: float
    seed: int
    n_components: int = 10
    freq_low: float = 0.1
    freq_high: float = 10.0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.frequencies = np.logspace(
            np.log10(self.freq_low), np.log10(self.freq_high), self.n_components
        )
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=self.n_components)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        args = 2.0 * np.pi * self.frequencies * t[..., None] + self.phases
        return self.amplitude * np.mean(np.sin(args), axis=-1)


@dataclass
class SampleWindow:
    """A dense trajectory plus the sampling instants t_0 < ... < t_l.

    Sampling instants are grid-aligned (stored as indices into the dense
    grid), which keeps the interval quadratures exact restrictions of
    the dense record.
    """

    trajectory: Trajectory
    sample_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.sample_indices, dtype=int)
        if idx.ndim != 1 or idx.size < 2:
            raise ValueError("need at least two sampling instants")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("sampling instants must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.trajectory.t.size:
            raise ValueError("sampling instants outside the dense grid")
        if np.any(np.diff(idx) < 1):
            raise EmptyInterval("a sampling interval contains no dense points")
        self.sample_indices = idx

    @property
    def n_intervals(self) -> int:
        return self.sample_indices.size - 1

    @classmethod
    def from_trajectory(
        cls, trajectory: Trajectory, interval: float, count: int, start: float = 0.0
    ) -> "SampleWindow":
        step = trajectory.step
        stride = int(round(interval / step))
        if stride < 1:
            raise EmptyInterval("interval shorter than the integration step")
        first = int(round(start / step))
        idx = first + stride * np.arange(count + 1)
        if idx[-1] >= trajectory.t.size:
            raise ValueError(
                f"window needs {idx[-1] + 1} dense points, trajectory has "
                f"{trajectory.t.size}"
            )
        return cls(trajectory=trajectory, sample_indices=idx)


@dataclass
class RegressionProblem:
    """Stacked least-squares system for one policy-iteration step."""

    theta: np.ndarray
    targets: np.ndarray
    basis_value: BasisSet
    basis_policy: BasisSet
    control_weight: float
    residuals: Optional[np.ndarray] = None
    min_singular_value: Optional[float] = None

    @property
    def n_value(self) -> int:
        return len(self.basis_value)

    @property
    def n_policy(self) -> int:
        return len(self.basis_policy)


def _interval_integrals(dense: np.ndarray, t: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trapezoid integrals of dense columns over each sampling interval."""
    cum = cumulative_trapezoid(dense, t, axis=0, initial=0.0)
    return cum[idx[1:]] - cum[idx[:-1]]


def assemble_regression(
    window: SampleWindow,
    basis_value: BasisSet,
    basis_policy: BasisSet,
    current_policy,
    cost: CostSpec,
) -> RegressionProblem:
    """Build the data matrix and targets for the current policy iterate.

    Row k holds the value-basis increments across [t_k, t_k+1] followed
    by 2r * integral(phi_j * v) entries, where v is the measured
    composite input minus the current policy; the target is minus the
    integral of the running cost under the current policy.
    """
    traj = window.trajectory
    idx = window.sample_indices
    x = traj.x
    t = traj.t

    if hasattr(current_policy, "evaluate_many"):
        u_i = current_policy.evaluate_many(x)
    else:
        u_i = np.asarray([current_policy(xk) for xk in x], dtype=float)
    v = traj.x_input - u_i

    phi_v = basis_value.design_matrix(x)
    phi_u = basis_policy.design_matrix(x)
    r = cost.control_weight

    delta_phi = phi_v[idx[1:]] - phi_v[idx[:-1]]
    policy_cols = 2.0 * r * _interval_integrals(phi_u * v[:, None], t, idx)
    theta = np.hstack([delta_phi, policy_cols])

    running = cost.q_many(x) + r * u_i**2
    targets = -_interval_integrals(running[:, None], t, idx)[:, 0]
    return RegressionProblem(
        theta=theta,
        targets=targets,
        basis_value=basis_value,
        basis_policy=basis_policy,
        control_weight=r,
    )


@dataclass
class PIStepResult:
    value: Approximant
    policy: Approximant
    residual_rms: float
    min_singular_value: float


def solve_pi_step(problem: RegressionProblem, delta_rel: float = 1e-6) -> PIStepResult:
    """Minimum-norm SVD solve of one regression, with the PE guard.

    The guard compares the smallest eigenvalue of (1/l) Theta^T Theta to
    `delta_rel` times the largest; failing it means the excitation did
    not span the basis and raises PEViolation.
    """
    theta = problem.theta
    l, cols = theta.shape
    if l < cols:
        raise PEViolation(f"{l} intervals cannot excite {cols} unknowns")
    svals = np.linalg.svd(theta, compute_uv=False)
    scaled = svals**2 / l
    problem.min_singular_value = float(scaled[-1])
    if svals[0] == 0.0 or scaled[-1] < delta_rel * scaled[0]:
        raise PEViolation(
            "persistent-excitation check failed: "
            f"min/max eigenvalue ratio {0 if svals[0] == 0 else scaled[-1] / scaled[0]:.3e}"
            f" below delta_rel = {delta_rel:g}"
        )
    weights, *_ = np.linalg.lstsq(theta, problem.targets, rcond=None)
    problem.residuals = theta @ weights - problem.targets
    residual_rms = float(np.sqrt(np.mean(problem.residuals**2)))
    n1 = problem.n_value
    return PIStepResult(
        value=Approximant(problem.basis_value, weights[:n1]),
        policy=Approximant(problem.basis_policy, weights[n1:]),
        residual_rms=residual_rms,
        min_singular_value=problem.min_singular_value,
    )


@dataclass
class OnlineIterate:
    iteration: int
    value: Approximant
    policy: Approximant
    residual_rms: float
    min_singular_value: float
    weight_change: float


@dataclass
class OnlinePIResult:
    iterates: list
    window: SampleWindow
    converged_iteration: Optional[int] = None

    @property
    def final_value(self) -> Approximant:
        return self.iterates[-1].value

    @property
    def final_policy(self) -> Approximant:
        return self.iterates[-1].policy


def _stacked_weights(step: PIStepResult) -> np.ndarray:
    return np.concatenate([step.value.weights, step.policy.weights])


def run_online_pi(
    plant: Plant,
    initial_policy: Callable,
    exploration: Optional[ExplorationNoise],
    basis_value: BasisSet,
    basis_policy: BasisSet,
    cost: CostSpec,
    *,
    interval: float,
    n_intervals: int,
    delta_rel: float = 1e-6,
    tol: float = 1e-3,
    max_iter: int = 20,
    start: float = 0.0,
    drive: Optional[Callable] = None,
    window: Optional[SampleWindow] = None,
) -> OnlinePIResult:
    """Collect one excited window, then iterate regression solves on it.

    The stopping rule is a relative weight change below `tol`:
    max|W_i - W_{i-1}| / max(1, max|W_i|).  `drive` overrides the
    default excitation controller (initial policy plus noise); cascade
    plants must supply one since their input channel differs from the
    learned virtual policy.
    """
    if window is None:
        if drive is None:
            noise = exploration if exploration is not None else (lambda t: 0.0)
            drive = lambda x, t: initial_policy(x) + noise(t)
        horizon = start + interval * n_intervals
        traj = plant.observe(drive, horizon)
        window = SampleWindow.from_trajectory(traj, interval, n_intervals, start)

    iterates = []
    policy = initial_policy
    prev = None
    converged = None
    for i in range(max_iter):
        problem = assemble_regression(window, basis_value, basis_policy, policy, cost)
        step = solve_pi_step(problem, delta_rel=delta_rel)
        stacked = _stacked_weights(step)
        if prev is None:
            change = np.inf
        else:
            change = float(
                np.max(np.abs(stacked - prev)) / max(1.0, np.max(np.abs(stacked)))
            )
        iterates.append(
            OnlineIterate(
                iteration=i,
                value=step.value,
                policy=step.policy,
                residual_rms=step.residual_rms,
                min_singular_value=step.min_singular_value,
                weight_change=change,
            )
        )
        if change < tol:
            converged = i + 1
            break
        prev = stacked
        policy = step.policy
    return OnlinePIResult(
        iterates=iterates, window=window, converged_iteration=converged
    )


@dataclass
class TwoLoopResult:
    schedule_index: int
    basis_value: BasisSet
    basis_policy: BasisSet
    result: OnlinePIResult
    residual_rms: float
    history: list = field(default_factory=list)


def two_loop_optimize(
    plant: Plant,
    initial_policy: Callable,
    exploration: Optional[ExplorationNoise],
    cost: CostSpec,
    schedule: Sequence,
    residual_threshold: float,
    *,
    interval: float,
    intervals_factor: int = 4,
    delta_rel: float = 1e-6,
    tol: float = 1e-3,
    max_iter: int = 20,
    start: float = 0.0,
    drive: Optional[Callable] = None,
) -> TwoLoopResult:
    """Grow the bases along `schedule` until the residual threshold is met.

    Inner loop: `run_online_pi`.  Outer loop: on failure, move to the
    next (larger) basis pair and recollect data sized to it.  Raises
    ScheduleExhausted (carrying the best attempt) if nothing qualifies.
    """
    sizes = [len(bv) + len(bu) for bv, bu in schedule]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("basis schedule must be strictly increasing in size")
    history = []
    best = None
    for k, (basis_value, basis_policy) in enumerate(schedule):
        n_intervals = intervals_factor * (len(basis_value) + len(basis_policy))
        result = run_online_pi(
            plant,
            initial_policy,
            exploration,
            basis_value,
            basis_policy,
            cost,
            interval=interval,
            n_intervals=n_intervals,
            delta_rel=delta_rel,
            tol=tol,
            max_iter=max_iter,
            start=start,
            drive=drive,
        )
        residual = result.iterates[-1].residual_rms
        entry = TwoLoopResult(
            schedule_index=k,
            basis_value=basis_value,
            basis_policy=basis_policy,
            result=result,
            residual_rms=residual,
        )
        history.append((k, residual))
        if best is None or residual < best.residual_rms:
            best = entry
        if residual <= residual_threshold:
            entry.history = history
            return entry
    raise ScheduleExhausted(
        "no schedule entry met the residual threshold "
        f"{residual_threshold:g}; best achieved "
        f"{best.residual_rms if best else float('nan'):g}",
        best=best,
    )
