"""Robust redesign of a learned policy and small-gain certification.

The learned policy is scaled by 1 + (r/2) rho^2(|x|^2), which assigns
the closed x-subsystem an input-to-state gain controlled by rho and the
cost margin.  Stability of the interconnection with the hidden
subsystem is then certified numerically: class-K gain inequalities are
evaluated on log-spaced ladders, the redesign error is bounded on
sampled level sets, and the resulting region-of-attraction estimate is
exported as a level-set descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import Approximant
from .errors import CompositionDomain

LADDER_DECADES = 8.0

# default bisection bracket for gain inverses; evaluation ladders are
# always passed an explicit, physically meaningful s_max
BRACKET = 1.0e7


def log_ladder(s_max: float, samples: int = 200) -> np.ndarray:
    """Log-spaced evaluation ladder on (0, s_max], endpoints included."""
    return np.logspace(np.log10(s_max) - LADDER_DECADES, np.log10(s_max), samples)


@dataclass
class ClassKFunction:
    """Scalar gain function: continuous, zero at zero, increasing.

    Inversion is by monotone bisection on [0, s_max]; composition simply
    chains callables.  `positive_definite_only` marks members that are
    only required to be positive away from zero (decay-rate bounds), for
    which the monotonicity checks are skipped.
    """

    fn: Callable
    s_max: float
    strictly_increasing: bool = True
    unbounded: bool = False
    positive_definite_only: bool = False
    name: str = ""

    def __call__(self, s):
        return self.fn(np.asarray(s, dtype=float))

    def inverse(self, y: float, tol: float = 1e-12) -> float:
        y = float(y)
        if y < 0:
            raise CompositionDomain(f"{self.name or 'gain'}: inverse of negative value")
        if y == 0.0:
            return 0.0
        top = float(self.fn(np.asarray(self.s_max)))
        if y > top * (1 + 1e-12):
            raise CompositionDomain(
                f"{self.name or 'gain'}: inverse of {y:g} outside range (max {top:g}); "
                "s_max too small for the declared bounds"
            )
        lo, hi = 0.0, self.s_max
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(self.fn(np.asarray(mid))) < y:
                lo = mid
            else:
                hi = mid
            if hi - lo <= tol * max(1.0, hi):
                break
        return 0.5 * (lo + hi)

    def inverse_many(self, ys) -> np.ndarray:
        return np.asarray([self.inverse(y) for y in np.atleast_1d(ys)], dtype=float)

    def compose(self, inner: "ClassKFunction") -> "ClassKFunction":
        return ClassKFunction(
            fn=lambda s: self.fn(np.asarray(inner.fn(np.asarray(s)))),
            s_max=inner.s_max,
            strictly_increasing=self.strictly_increasing and inner.strictly_increasing,
            unbounded=self.unbounded and inner.unbounded,
            name=f"{self.name or 'f'}o{inner.name or 'g'}",
        )

    @staticmethod
    def maximum(*gains: "ClassKFunction") -> "ClassKFunction":
        s_max = min(g.s_max for g in gains)
        return ClassKFunction(
            fn=lambda s: np.max([g.fn(np.asarray(s)) for g in gains], axis=0),
            s_max=s_max,
            unbounded=any(g.unbounded for g in gains),
            name="max(" + ",".join(g.name or "?" for g in gains) + ")",
        )

    @classmethod
    def linear(cls, slope: float, s_max: float, name: str = "") -> "ClassKFunction":
        return cls(fn=lambda s: slope * s, s_max=s_max, unbounded=True, name=name)

    @classmethod
    def power(
        cls, coefficient: float, exponent: float, s_max: float, name: str = ""
    ) -> "ClassKFunction":
        return cls(
            fn=lambda s: coefficient * np.asarray(s) ** exponent,
            s_max=s_max,
            unbounded=True,
            name=name,
        )

    @classmethod
    def from_samples(
        cls, s: np.ndarray, values: np.ndarray, name: str = ""
    ) -> "ClassKFunction":
        """Monotone tabulated gain; linear interpolation, linear tail."""
        s = np.concatenate([[0.0], np.asarray(s, dtype=float)])
        values = np.concatenate([[0.0], np.asarray(values, dtype=float)])
        tail_slope = (values[-1] - values[-2]) / max(s[-1] - s[-2], 1e-300)

        def fn(q):
            q = np.asarray(q, dtype=float)
            out = np.interp(q, s, values)
            beyond = q > s[-1]
            if np.any(beyond):
                out = np.where(beyond, values[-1] + tail_slope * (q - s[-1]), out)
            return out

        return cls(fn=fn, s_max=BRACKET, unbounded=tail_slope > 0, name=name)

    def check_basic(self, samples: int = 60) -> bool:
        """f(0) = 0 and strict increase along a log ladder."""
        if abs(float(self.fn(np.asarray(0.0)))) > 1e-12:
            return False
        if self.positive_definite_only:
            return bool(np.all(self.fn(log_ladder(self.s_max, samples)) > 0))
        vals = self.fn(log_ladder(self.s_max, samples))
        return bool(np.all(np.diff(vals) > 0) and vals[0] > 0)


@dataclass
class RobustPolicy:
    """Gain-scheduled rescaling of a learned policy.

    u(x) = [1 + (r/2) rho^2(|x|^2)] * base(x); rho is smooth,
    nondecreasing and positive, so the rescaling never flips sign and
    u(0) = 0 is inherited from the base policy.
    """

    base_policy: Approximant
    rho: Callable
    control_weight: float
    margin: float
    gamma: ClassKFunction = None

    def scale_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        s = np.sum(pts**2, axis=1)
        return 1.0 + 0.5 * self.control_weight * np.asarray(self.rho(s)) ** 2

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        return self.scale_many(points) * self.base_policy.evaluate_many(points)

    def evaluate(self, x) -> float:
        return float(self.evaluate_many(np.atleast_2d(x))[0])

    def __call__(self, x) -> float:
        return self.evaluate(x)


def iss_gain_from_rho(rho: Callable, margin: float, s_max: float = BRACKET) -> ClassKFunction:
    """Assigned disturbance gain gamma(s) = (margin/2) * rho(s^2) * s."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    return ClassKFunction(
        fn=lambda s: 0.5 * margin * np.asarray(rho(np.asarray(s) ** 2)) * np.asarray(s),
        s_max=s_max,
        unbounded=True,
        name="gamma",
    )


def robust_redesign(
    base_policy: Approximant, rho: Callable, control_weight: float, margin: float,
    s_max: float = BRACKET,
) -> RobustPolicy:
    """Wrap a learned policy with the rho-rescaling and derived gain."""
    probe = np.asarray(rho(np.asarray([0.0, 1.0, float(s_max)])), dtype=float)
    if np.any(probe <= 0) or np.any(np.diff(probe) < -1e-12):
        raise ValueError("rho must be positive and nondecreasing")
    return RobustPolicy(
        base_policy=base_policy,
        rho=rho,
        control_weight=control_weight,
        margin=margin,
        gamma=iss_gain_from_rho(rho, margin, s_max),
    )


@dataclass
class SmallGainReport:
    holds: bool
    margin: float
    relative_margin: float
    ladder: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    def table(self) -> str:
        lines = ["        s            gamma(s)         rhs(s)          margin"]
        for s, a, b in zip(self.ladder, self.lhs, self.rhs):
            lines.append(f"{s:14.6e} {a:15.6e} {b:15.6e} {a - b:15.6e}")
        return "\n".join(lines)


def _chain_rhs(
    kappa1: ClassKFunction,
    kappa3: ClassKFunction,
    lam_lo: ClassKFunction,
    alpha_lo: ClassKFunction,
    alpha_hi: ClassKFunction,
    ladder: np.ndarray,
) -> np.ndarray:
    """kappa1 o lam_lo^-1 o kappa3 o alpha_lo^-1 o alpha_hi on the ladder."""
    vals = np.asarray(alpha_hi(ladder))
    vals = alpha_lo.inverse_many(vals)
    vals = np.asarray(kappa3(vals))
    vals = lam_lo.inverse_many(vals)
    return np.asarray(kappa1(vals))


def check_small_gain(
    gamma: ClassKFunction,
    kappa1: ClassKFunction,
    kappa2: ClassKFunction,
    kappa3: ClassKFunction,
    lam_lo: ClassKFunction,
    alpha_lo: ClassKFunction,
    alpha_hi: ClassKFunction,
    *,
    s_max: float,
    samples: int = 200,
) -> SmallGainReport:
    """Ladder test of gamma > max(kappa2, chained uncertainty gain)."""
    ladder = log_ladder(s_max, samples)
    lhs = np.asarray(gamma(ladder))
    rhs = np.maximum(
        np.asarray(kappa2(ladder)),
        _chain_rhs(kappa1, kappa3, lam_lo, alpha_lo, alpha_hi, ladder),
    )
    margin = float(np.min(lhs - rhs))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = float(np.min(np.where(rhs > 0, lhs / rhs - 1.0, np.inf)))
    return SmallGainReport(
        holds=margin > 0,
        margin=margin,
        relative_margin=rel,
        ladder=ladder,
        lhs=lhs,
        rhs=rhs,
    )


def select_rho(
    rho_ladder,
    margin: float,
    gain_set: dict,
    *,
    s_max: float,
    relative_margin: float = 0.10,
    samples: int = 200,
) -> tuple:
    """Smallest constant rho whose gain passes with the relative margin.

    `gain_set` carries kappa1, kappa2, kappa3, lam_lo, alpha_lo,
    alpha_hi.  Returns (rho_value, report); raises CompositionDomain if
    no ladder entry qualifies.
    """
    for rho_val in np.asarray(rho_ladder, dtype=float):
        gamma = iss_gain_from_rho(
            lambda s, c=rho_val: np.full_like(np.asarray(s, dtype=float), c), margin
        )
        report = check_small_gain(
            gamma,
            gain_set["kappa1"],
            gain_set["kappa2"],
            gain_set["kappa3"],
            gain_set["lam_lo"],
            gain_set["alpha_lo"],
            gain_set["alpha_hi"],
            s_max=s_max,
            samples=samples,
        )
        if report.holds and report.relative_margin >= relative_margin:
            return float(rho_val), report
    raise CompositionDomain(
        "no rho on the search ladder satisfies the small-gain condition "
        f"with relative margin {relative_margin:g}"
    )


def redesign_error(
    learned_policy: Approximant,
    oracle_policy_now: Approximant,
    oracle_policy_next: Approximant,
    rho: Callable,
    control_weight: float,
) -> Callable:
    """Pointwise gap between the applied redesign and its exact form.

    e(x) = (r/2) rho^2(|x|^2) [learned - oracle_next] + learned -
    oracle_now; used only at certification time, when oracle iterates
    are available.
    """

    def e_ro(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        s = np.sum(pts**2, axis=1)
        scale = 0.5 * control_weight * np.asarray(rho(s)) ** 2
        learned = learned_policy.evaluate_many(pts)
        return (
            scale * (learned - oracle_policy_next.evaluate_many(pts))
            + learned
            - oracle_policy_now.evaluate_many(pts)
        )

    return e_ro


@dataclass
class CertifiedLevel:
    d: float
    n_checked: int
    worst_ratio: float


def certify_error_bound(
    error_fn: Callable,
    gamma: ClassKFunction,
    value: Callable,
    *,
    d_ladder,
    sample_low,
    sample_high,
    n_samples: int = 4000,
    seed: int = 0,
) -> Optional[CertifiedLevel]:
    """Largest level d with |e(x)| < gamma(|x|) on the sampled set 0 < V <= d.

    Returns None when even the smallest ladder level fails.
    """
    low = np.atleast_1d(np.asarray(sample_low, dtype=float))
    high = np.atleast_1d(np.asarray(sample_high, dtype=float))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(low, high, size=(n_samples, low.size))
    vvals = (
        value.evaluate_many(pts)
        if hasattr(value, "evaluate_many")
        else np.asarray([value(x) for x in pts])
    )
    evals = np.abs(np.asarray(error_fn(pts)))
    gvals = np.asarray(gamma(np.linalg.norm(pts, axis=1)))
    best = None
    for d in sorted(np.asarray(d_ladder, dtype=float)):
        mask = (vvals > 0) & (vvals <= d)
        if not np.any(mask):
            continue
        ratios = evals[mask] / np.maximum(gvals[mask], 1e-300)
        if np.all(ratios < 1.0):
            best = CertifiedLevel(
                d=float(d), n_checked=int(mask.sum()), worst_ratio=float(ratios.max())
            )
        else:
            break
    return best


def radial_envelopes(
    value: Callable,
    dim: int,
    s_max: float,
    *,
    n_radii: int = 32,
    n_dirs: int = 64,
    safety: float = 0.02,
    clip_low=None,
    clip_high=None,
) -> tuple:
    """Quadratic class-K envelopes of a positive-definite function.

    Returns (alpha_lo, alpha_hi) with alpha_lo(|x|) <= V(x) <=
    alpha_hi(|x|) on the sampled set: the ball of radius s_max, clipped
    to [clip_low, clip_high] when given (the region where the function
    is trusted).  Coefficients are the extreme values of V(x)/|x|^2
    widened by `safety`, which absorbs the direction-sampling gap; both
    envelopes are genuine class-K-infinity quadratics.
    """
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        angles = np.linspace(0.0, 2.0 * np.pi, n_dirs, endpoint=False)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        if dim > 2:
            rng = np.random.default_rng(0)
            raw = rng.normal(size=(n_dirs, dim))
            dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    radii = np.linspace(s_max / n_radii, s_max, n_radii)
    pts = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, dim)
    if clip_low is not None and clip_high is not None:
        lo = np.atleast_1d(np.asarray(clip_low, dtype=float))
        hi = np.atleast_1d(np.asarray(clip_high, dtype=float))
        keep = np.all((pts >= lo) & (pts <= hi), axis=1)
        pts = pts[keep]
        if pts.shape[0] < 4:
            raise ValueError("clip box excludes almost the whole sampled ball")
    vals = (
        value.evaluate_many(pts)
        if hasattr(value, "evaluate_many")
        else np.asarray([value(x) for x in pts])
    )
    ratio = vals / np.sum(pts**2, axis=1)
    c_lo, c_hi = float(np.min(ratio)), float(np.max(ratio))
    if c_lo <= 0:
        raise ValueError(
            "function is not positive definite on the sampled set; "
            "shrink s_max for the envelope construction"
        )
    return (
        ClassKFunction.power(c_lo * (1.0 - safety), 2.0, BRACKET, name="alpha_lo"),
        ClassKFunction.power(c_hi * (1.0 + safety), 2.0, BRACKET, name="alpha_hi"),
    )


def boundary_minimum(value: Callable, low, high, n: int = 200) -> float:
    """Smallest value of V on the faces of the box [low, high].

    Capping a sublevel set below this keeps it inside the box.
    """
    low = np.atleast_1d(np.asarray(low, dtype=float))
    high = np.atleast_1d(np.asarray(high, dtype=float))
    dim = low.size
    rng = np.random.default_rng(7)
    faces = []
    for d in range(dim):
        for bound in (low[d], high[d]):
            pts = rng.uniform(low, high, size=(n, dim))
            pts[:, d] = bound
            faces.append(pts)
    pts = np.vstack(faces)
    vals = (
        value.evaluate_many(pts)
        if hasattr(value, "evaluate_many")
        else np.asarray([value(x) for x in pts])
    )
    return float(np.min(vals))


def monotone_envelope(
    fn_abs: Callable,
    dim: int,
    s_max: float,
    *,
    n_radii: int = 64,
    n_dirs: int = 64,
    safety: float = 0.02,
) -> ClassKFunction:
    """Class-K upper envelope of |f| over spheres of growing radius.

    `safety` widens the envelope to absorb the direction-sampling gap.
    """
    if dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        angles = np.linspace(0.0, 2.0 * np.pi, n_dirs, endpoint=False)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        if dim > 2:
            rng = np.random.default_rng(1)
            raw = rng.normal(size=(n_dirs, dim))
            dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    radii = np.linspace(s_max / n_radii, s_max, n_radii)
    peaks = np.empty(n_radii)
    for i, r in enumerate(radii):
        pts = r * dirs
        vals = (
            np.abs(fn_abs.evaluate_many(pts))
            if hasattr(fn_abs, "evaluate_many")
            else np.abs(np.asarray([fn_abs(x) for x in pts]))
        )
        peaks[i] = vals.max()
    peaks = np.maximum.accumulate(peaks) * (1.0 + safety)
    # tiny slope keeps the tabulated envelope strictly increasing
    peaks = peaks + 1e-12 * peaks[-1] * (radii / s_max)
    return ClassKFunction.from_samples(radii, peaks, name="envelope")


def interconnection_sigma(
    chi1: ClassKFunction, chi2: ClassKFunction, s_max: float, samples: int = 200
) -> ClassKFunction:
    """Level-shaping function strictly between chi2 and the inverse of chi1.

    Built numerically: chi_hat = geometric mean of chi2 and chi1^-1 on
    the ladder (well defined exactly when the small-gain loop is a
    contraction), then sigma = geometric mean of chi2 and chi_hat,
    monotonized by cumulative max.
    """
    ladder = log_ladder(s_max, samples)
    chi2_vals = np.asarray(chi2(ladder))
    chi1_inv = chi1.inverse_many(ladder)
    if np.any(chi2_vals >= chi1_inv):
        raise CompositionDomain(
            "chi2 >= chi1^-1 somewhere on the ladder: the small-gain loop "
            "is not a contraction, no valid sigma exists"
        )
    chi_hat = np.sqrt(chi2_vals * chi1_inv)
    sigma_vals = np.sqrt(chi2_vals * chi_hat)
    sigma_vals = np.maximum.accumulate(sigma_vals)
    return ClassKFunction.from_samples(ladder, sigma_vals, name="sigma")


def build_chi_pair(
    gamma: ClassKFunction,
    kappa1: ClassKFunction,
    kappa3: ClassKFunction,
    lam_lo: ClassKFunction,
    alpha_lo: ClassKFunction,
    alpha_hi: ClassKFunction,
    s_max: float,
) -> tuple:
    """The two loop gains whose contraction the small-gain test verifies."""
    def chi1_fn(s):
        out = np.empty_like(np.atleast_1d(np.asarray(s, dtype=float)))
        flat = np.atleast_1d(np.asarray(s, dtype=float))
        for i, v in enumerate(flat):
            out[i] = float(
                alpha_hi(np.asarray(gamma.inverse(float(kappa1(lam_lo.inverse(v))))))
            )
        return out.reshape(np.shape(s))

    def chi2_fn(s):
        flat = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.asarray(kappa3(alpha_lo.inverse_many(flat)))
        return out.reshape(np.shape(s))

    chi1 = ClassKFunction(fn=chi1_fn, s_max=s_max, name="chi1")
    chi2 = ClassKFunction(fn=chi2_fn, s_max=s_max, name="chi2")
    return chi1, chi2


@dataclass
class RegionEstimate:
    """Sublevel-set region of attraction: max(sigma(V(x)), W(w)) <= level."""

    value: Callable
    lyapunov_w: Callable
    sigma: ClassKFunction
    d: float
    level: float = field(init=False)

    def __post_init__(self):
        self.level = float(self.sigma(np.asarray(self.d)))

    def _v(self, x) -> float:
        if hasattr(self.value, "evaluate"):
            return float(self.value.evaluate(x))
        return float(self.value(x))

    def contains(self, x, w) -> bool:
        vx = self._v(np.asarray(x, dtype=float))
        ww = float(self.lyapunov_w(np.asarray(w, dtype=float)))
        return max(float(self.sigma(np.asarray(vx))), ww) <= self.level

    def w_bound(self, w_max_search: float = 1e6) -> float:
        """Largest |w| admitted (scalar hidden state), by bisection."""
        lo, hi = 0.0, 1e-6
        while float(self.lyapunov_w(np.asarray([hi]))) < self.level and hi < w_max_search:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(self.lyapunov_w(np.asarray([mid]))) < self.level:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def boundary_points(self, dim: int, n: int = 72, r_max: float = 1e3) -> np.ndarray:
        """Radial sample of the x-slice boundary {V(x) = d} (w = 0)."""
        if dim == 1:
            dirs = np.array([[1.0], [-1.0]])
        else:
            angles = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
            dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        pts = []
        for u in dirs:
            lo, hi = 0.0, 1e-6
            while self._v(hi * u) < self.d and hi < r_max:
                hi *= 2.0
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                if self._v(mid * u) < self.d:
                    lo = mid
                else:
                    hi = mid
            pts.append(0.5 * (lo + hi) * u)
        return np.asarray(pts)


def estimate_roa(
    value: Callable, lyapunov_w: Callable, d: float, sigma: ClassKFunction
) -> RegionEstimate:
    """Package the certified level set as a membership test + exporter."""
    if d <= 0:
        raise ValueError("d must be positive")
    return RegionEstimate(value=value, lyapunov_w=lyapunov_w, sigma=sigma, d=d)
