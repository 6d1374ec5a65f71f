"""Backstepping extension for plants with an extra integrator channel.

When the disturbance enters upstream of the control (through dz/dt
rather than dx/dt), learning runs in two phases: phase one treats z as
a virtual input and learns + robustifies a virtual policy xi for the
x-subsystem; phase two identifies the transformed error dynamics of
zeta = z - xi(x) by least squares, without ever forming the spatial
derivatives of xi.  The final policy stabilizes zeta while inheriting
the phase-one gain assignment, and is certified by the cascade variant
of the small-gain test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .basis import Approximant, BasisSet
from .dynsys import CostSpec, Plant, SystemModel
from .errors import PEViolation
from .online_pi import (
    OnlinePIResult,
    SampleWindow,
    _interval_integrals,
    run_online_pi,
)
from .robust import ClassKFunction, RobustPolicy, check_small_gain, robust_redesign


def make_rho1(rho: Callable) -> Callable:
    """Companion scaling for the augmented state: rho1(s) = 2 rho(s/2)."""
    return lambda s: 2.0 * np.asarray(rho(0.5 * np.asarray(s, dtype=float)))


def finite_difference_gradient(fn: Callable, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar map, certification-side only."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for d in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[d] += h
        lo[d] -= h
        grad[d] = (fn(hi) - fn(lo)) / (2.0 * h)
    return grad


def cascade_gain_from_rho(rho: Callable, margin: float, s_max: float) -> ClassKFunction:
    """Assigned gain for the augmented loop: (margin/2) rho(s^2 / 2) s."""
    return ClassKFunction(
        fn=lambda s: 0.5
        * margin
        * np.asarray(rho(0.5 * np.asarray(s) ** 2))
        * np.asarray(s),
        s_max=s_max,
        unbounded=True,
        name="gamma1",
    )


@dataclass
class CompositeLyapunov:
    """V(x) + zeta^2 / 2 on the augmented state (x, zeta)."""

    value_x: Approximant
    xi: RobustPolicy

    @property
    def n(self) -> int:
        return self.value_x.basis.dim

    def zeta_many(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) - self.xi.evaluate_many(np.atleast_2d(x))

    def augmented(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.hstack([x, self.zeta_many(x, z)[:, None]])

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        x, zeta = pts[:, : self.n], pts[:, self.n]
        return self.value_x.evaluate_many(x) + 0.5 * zeta**2

    def evaluate(self, point) -> float:
        return float(self.evaluate_many(np.atleast_2d(point))[0])

    def __call__(self, point) -> float:
        return self.evaluate(point)


@dataclass
class PhaseOneResult:
    pi_result: OnlinePIResult
    xi: RobustPolicy


def phase_one(
    plant: Plant,
    initial_virtual_policy: Callable,
    drive: Callable,
    basis_value: BasisSet,
    basis_policy: BasisSet,
    cost: CostSpec,
    rho: Callable,
    margin: float,
    *,
    interval: float,
    n_intervals: int,
    delta_rel: float = 1e-6,
    tol: float = 1e-3,
    max_iter: int = 20,
    start: float = 0.0,
    s_max: float = 10.0,
) -> PhaseOneResult:
    """Learn the x-subsystem policy with z as its input, then robustify.

    Identical mechanics to the matched learner: the x-channel composite
    signal already carries z plus the disturbance, so the same
    regression applies verbatim.  The returned xi is frozen before any
    phase-two data are collected.
    """
    result = run_online_pi(
        plant,
        initial_virtual_policy,
        None,
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
    xi = robust_redesign(result.final_policy, rho, cost.control_weight, margin, s_max)
    return PhaseOneResult(pi_result=result, xi=xi)


@dataclass
class PhaseTwoRegression:
    """Least-squares system identifying the zeta-channel dynamics.

    Column layout: the psi-basis integrals first, then the
    disturbance-weighted phi-basis integrals, matching the declared
    excitation condition for this stage.
    """

    theta: np.ndarray
    targets: np.ndarray
    psi_basis: BasisSet
    phi_basis: BasisSet
    residuals: Optional[np.ndarray] = None
    min_singular_value: Optional[float] = None


def assemble_phase_two(
    window: SampleWindow,
    psi_basis: BasisSet,
    phi_basis: BasisSet,
    xi: RobustPolicy,
) -> PhaseTwoRegression:
    """Assemble rows from a cascade window with xi frozen.

    The disturbance factor is recovered from learner-visible channels
    (composite x-input minus the measured z); the actuation side of the
    zeta equation is the recorded composite z-channel input.
    """
    traj = window.trajectory
    if traj.z is None or traj.z_input is None:
        raise ValueError("phase two needs a cascade trajectory with a z channel")
    idx = window.sample_indices
    x, z, t = traj.x, traj.z, traj.t
    delta = traj.x_input - z
    zeta = z - xi.evaluate_many(x)

    xz = np.hstack([x, z[:, None]])
    psi = psi_basis.design_matrix(xz)
    phi = phi_basis.design_matrix(x)

    psi_cols = _interval_integrals(psi * zeta[:, None], t, idx)
    phi_cols = _interval_integrals(phi * (delta * zeta)[:, None], t, idx)
    theta = np.hstack([psi_cols, phi_cols])

    half_sq = 0.5 * zeta**2
    drive_term = _interval_integrals((traj.z_input * zeta)[:, None], t, idx)[:, 0]
    targets = half_sq[idx[1:]] - half_sq[idx[:-1]] - drive_term
    return PhaseTwoRegression(
        theta=theta, targets=targets, psi_basis=psi_basis, phi_basis=phi_basis
    )


@dataclass
class PhaseTwoResult:
    f1_hat: Approximant
    g1_hat: Approximant
    residual_rms: float
    min_singular_value: float


def solve_phase_two(
    problem: PhaseTwoRegression, delta_rel: float = 1e-6
) -> PhaseTwoResult:
    """SVD least squares for the zeta-dynamics weights, with PE guard."""
    theta = problem.theta
    l, cols = theta.shape
    if l < cols:
        raise PEViolation(f"{l} intervals cannot excite {cols} unknowns")
    svals = np.linalg.svd(theta, compute_uv=False)
    scaled = svals**2 / l
    problem.min_singular_value = float(scaled[-1])
    if svals[0] == 0.0 or scaled[-1] < delta_rel * scaled[0]:
        raise PEViolation(
            "persistent-excitation check failed in phase two: eigenvalue ratio "
            f"{0 if svals[0] == 0 else scaled[-1] / scaled[0]:.3e} below {delta_rel:g}"
        )
    beta, *_ = np.linalg.lstsq(theta, problem.targets, rcond=None)
    problem.residuals = theta @ beta - problem.targets
    n3 = len(problem.psi_basis)
    # theta carries +integral(phi * delta * zeta); the model subtracts the
    # g-term, so those weights come out negated
    return PhaseTwoResult(
        f1_hat=Approximant(problem.psi_basis, beta[:n3]),
        g1_hat=Approximant(problem.phi_basis, -beta[n3:]),
        residual_rms=float(np.sqrt(np.mean(problem.residuals**2))),
        min_singular_value=problem.min_singular_value,
    )


class BacksteppedPolicy:
    """Final control law on (x, z) for the cascade plant.

    Combines the identified zeta dynamics, the phase-one learned policy
    and the damping terms sized by rho/rho1 and the cost margin.  The
    last term divides by rho(|x|^2)^2, which the positivity of rho
    guarantees is safe.
    """

    def __init__(
        self,
        f1_hat: Approximant,
        g1_hat: Approximant,
        learned_policy: Approximant,
        xi: RobustPolicy,
        rho: Callable,
        margin: float,
        control_weight: float,
    ):
        self.f1_hat = f1_hat
        self.g1_hat = g1_hat
        self.learned_policy = learned_policy
        self.xi = xi
        self.rho = rho
        self.rho1 = make_rho1(rho)
        self.margin = margin
        self.control_weight = control_weight

    def evaluate_many(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        zeta = z - self.xi.evaluate_many(x)
        xz = np.hstack([x, z[:, None]])
        x_sq = np.sum(x**2, axis=1)
        aug_sq = x_sq + zeta**2
        eps2 = self.margin**2
        rho1_sq = np.asarray(self.rho1(aug_sq)) ** 2
        g_hat = self.g1_hat.evaluate_many(x)
        return (
            -self.f1_hat.evaluate_many(xz)
            + 2.0 * self.control_weight * self.learned_policy.evaluate_many(x)
            - g_hat**2 * rho1_sq * zeta / 4.0
            - eps2 * zeta
            - rho1_sq * zeta / 4.0
            - eps2 * np.asarray(self.rho(zeta**2)) ** 2 * zeta
            / (2.0 * np.asarray(self.rho(x_sq)) ** 2)
        )

    def __call__(self, x, z) -> float:
        return float(self.evaluate_many(np.atleast_2d(x), [z])[0])


def backstepped_redesign_error(
    f1_true: Callable,
    f1_hat: Approximant,
    policy_true_next,
    policy_hat_next: Approximant,
    g1_true: Callable,
    g1_hat: Approximant,
    rho1: Callable,
    xi: RobustPolicy,
    control_weight: float,
) -> Callable:
    """Certification-time gap of the backstepped law, on (x, zeta) points.

    Needs the true transformed dynamics and oracle policy, so it exists
    only where a model-based reference is available.
    """

    def error(x: np.ndarray, zeta: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
        z = zeta + xi.evaluate_many(x)
        xz = np.hstack([x, z[:, None]])
        f_true = np.asarray([f1_true(xi_, zi) for xi_, zi in zip(x, z)])
        g_true = np.asarray([g1_true(xi_) for xi_ in x])
        if hasattr(policy_true_next, "evaluate_many"):
            u_true = policy_true_next.evaluate_many(x)
        else:
            u_true = np.asarray([policy_true_next(xi_) for xi_ in x])
        aug_sq = np.sum(x**2, axis=1) + zeta**2
        rho1_sq = np.asarray(rho1(aug_sq)) ** 2
        return (
            -f_true
            + f1_hat.evaluate_many(xz)
            + 2.0 * control_weight * (u_true - policy_hat_next.evaluate_many(x))
            - (g_true**2 - g1_hat.evaluate_many(x) ** 2) * rho1_sq * zeta / 4.0
        )

    return error


def cascade_truth(model: SystemModel, xi: RobustPolicy, xi_gradient: Callable):
    """Ground-truth transformed dynamics from the model and grad(xi).

    Used only to build certification references; the learner never forms
    these derivatives.
    """

    def f1_bar(x, z):
        x = np.asarray(x, dtype=float)
        grad = np.asarray(xi_gradient(x), dtype=float)
        return float(
            model.f1(x, z) - grad @ (model.drift(x) + model.input_gain(x) * z)
        )

    def g1_bar(x):
        x = np.asarray(x, dtype=float)
        return float(np.asarray(xi_gradient(x), dtype=float) @ model.input_gain(x))

    return f1_bar, g1_bar


def cascade_effective_gains(
    kappa5: ClassKFunction,
    kappa6: ClassKFunction,
    kappa7: ClassKFunction,
    kappa8: ClassKFunction,
    kappa1: ClassKFunction,
    kappa2: ClassKFunction,
    s_max: float,
) -> tuple:
    """Fold the z-channel disturbance bounds into a matched-form pair.

    kappa9 majorizes the z dependence through the xi envelope kappa8;
    the maxima with the x-channel gains give the effective
    (w-side, state-side) pair for the augmented loop.
    """
    kappa9 = ClassKFunction(
        fn=lambda s: np.maximum(
            np.asarray(kappa6(s)),
            np.maximum(
                np.asarray(kappa7(np.asarray(kappa8(2.0 * np.asarray(s))))),
                np.asarray(kappa7(2.0 * np.asarray(s))),
            ),
        ),
        s_max=s_max,
        name="kappa9",
    )
    return ClassKFunction.maximum(kappa1, kappa5), ClassKFunction.maximum(
        kappa2, kappa9
    )


def check_small_gain_cascade(
    gamma1: ClassKFunction,
    kappa5: ClassKFunction,
    kappa6: ClassKFunction,
    kappa7: ClassKFunction,
    kappa8: ClassKFunction,
    kappa1: ClassKFunction,
    kappa2: ClassKFunction,
    kappa3: ClassKFunction,
    lam_lo: ClassKFunction,
    alpha1_lo: ClassKFunction,
    alpha1_hi: ClassKFunction,
    *,
    s_max: float,
    samples: int = 200,
):
    """Ladder test of the augmented-loop gain inequality."""
    kappa1_eff, kappa2_eff = cascade_effective_gains(
        kappa5, kappa6, kappa7, kappa8, kappa1, kappa2, s_max
    )
    return check_small_gain(
        gamma1,
        kappa1_eff,
        kappa2_eff,
        kappa3,
        lam_lo,
        alpha1_lo,
        alpha1_hi,
        s_max=s_max,
        samples=samples,
    )
