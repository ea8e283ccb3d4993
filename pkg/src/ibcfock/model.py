"""Interaction models and the scalar theory derived from their parameters.

A model is a space dimension d, a number of sources M, a coupling g, a
form factor vhat(k) with decay exponent alpha, and a boson dispersion
omega(k) with lower-bound exponent beta (the rest mass is normalized to
one and is not configurable).  The ultraviolet character of the model is
measured by

    D = d - 2*alpha - 2 .

D < 0 puts the model in the form-perturbation regime; D >= 0 (together
with a dimension-dependent condition on alpha and beta) in the
renormalizable regime, where a diverging counterterm is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import quad

__all__ = [
    "FormKind",
    "FormFactor",
    "DispersionKind",
    "Dispersion",
    "Case",
    "ValidationResult",
    "ModelSpec",
    "RegularityParams",
    "EpsilonTooLarge",
    "froehlich",
    "nelson",
    "delta2d",
    "power_law_model",
    "validate",
    "uv_exponent",
    "u_transform",
    "coupling_integral_diverges",
    "select_regularity_params",
    "self_energy",
    "regularity_threshold",
]


class FormKind(Enum):
    FROEHLICH = "froehlich"
    NELSON_MASSIVE = "nelson_massive"
    DELTA_2D = "delta_2d"
    POWER_LAW = "power_law"


@dataclass(frozen=True)
class FormFactor:
    """Rotation-invariant form factor vhat(|k|) with decay exponent alpha.

    alpha is the exponent in the bound |vhat(k)| <= |k|^(-alpha); for the
    named kinds it is fixed, for POWER_LAW the bound is an equality.
    """

    kind: FormKind
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        fixed = {FormKind.FROEHLICH: 1.0, FormKind.NELSON_MASSIVE: 0.5, FormKind.DELTA_2D: 0.0}
        if self.kind in fixed and self.alpha != fixed[self.kind]:
            raise ValueError(f"{self.kind.value} requires alpha = {fixed[self.kind]}")

    def value(self, k_norm):
        """vhat at radius |k|; real, nonnegative, vectorized."""
        k = np.asarray(k_norm, dtype=float)
        if self.kind is FormKind.FROEHLICH:
            out = 1.0 / k
        elif self.kind is FormKind.NELSON_MASSIVE:
            out = (1.0 + k * k) ** (-0.25)
        elif self.kind is FormKind.DELTA_2D:
            out = np.ones_like(k)
        else:
            out = np.ones_like(k) if self.alpha == 0.0 else k ** (-self.alpha)
        return out if out.ndim else float(out)


class DispersionKind(Enum):
    CONSTANT_ONE = "constant_one"
    RELATIVISTIC_MASSIVE = "relativistic_massive"
    NONREL_MASSIVE = "nonrel_massive"
    POWER_LOWER = "power_lower"


@dataclass(frozen=True)
class Dispersion:
    """Boson dispersion omega(|k|) >= (1 + k^2)^(beta/2) >= 1."""

    kind: DispersionKind
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 2.0:
            raise ValueError("beta must lie in [0, 2]")
        fixed = {
            DispersionKind.CONSTANT_ONE: 0.0,
            DispersionKind.RELATIVISTIC_MASSIVE: 1.0,
            DispersionKind.NONREL_MASSIVE: 2.0,
        }
        if self.kind in fixed and self.beta != fixed[self.kind]:
            raise ValueError(f"{self.kind.value} requires beta = {fixed[self.kind]}")

    def value(self, k_norm):
        k = np.asarray(k_norm, dtype=float)
        if self.kind is DispersionKind.CONSTANT_ONE:
            out = np.ones_like(k)
        elif self.kind is DispersionKind.RELATIVISTIC_MASSIVE:
            out = np.sqrt(1.0 + k * k)
        elif self.kind is DispersionKind.NONREL_MASSIVE:
            out = 1.0 + k * k
        else:
            out = (1.0 + k * k) ** (0.5 * self.beta)
        return out if out.ndim else float(out)


class Case(Enum):
    FORM_PERTURBATION = "form_perturbation"
    RENORMALISABLE = "renormalisable"
    INVALID = "invalid"


@dataclass(frozen=True)
class ValidationResult:
    case: Case
    reason: str | None = None

    def __bool__(self):
        return self.case is not Case.INVALID


def uv_exponent(d, alpha):
    """The ultraviolet parameter D = d - 2*alpha - 2."""
    return d - 2.0 * alpha - 2.0


def coupling_integral_diverges(d, alpha):
    """Whether the coupling integral of |vhat|^2/(k^2 + omega) is infinite.

    Decided symbolically from the large-k tail exponent (d-1) - 2*alpha - 2:
    the integral diverges exactly when D = d - 2*alpha - 2 >= 0.  Numerical
    divergence detection is ill-posed and deliberately avoided.
    """
    return uv_exponent(d, alpha) >= 0.0


def validate(d, form, dispersion):
    """Classify model parameters into the two admissible regimes.

    Returns a ValidationResult whose case is FORM_PERTURBATION,
    RENORMALISABLE, or INVALID with a reason naming the violated
    inequality.  Invalid input is a value, not an exception.
    """
    alpha, beta = form.alpha, dispersion.beta
    if d not in (1, 2, 3):
        return ValidationResult(Case.INVALID, f"dimension d = {d} not in {{1, 2, 3}}")
    if alpha < 0:
        return ValidationResult(Case.INVALID, f"alpha = {alpha} violates alpha >= 0")
    if not 0.0 <= beta <= 2.0:
        return ValidationResult(Case.INVALID, f"beta = {beta} violates 0 <= beta <= 2")
    if alpha >= d / 2.0:
        return ValidationResult(
            Case.INVALID, f"alpha = {alpha} violates alpha < d/2 = {d / 2.0}"
        )
    if not coupling_integral_diverges(d, alpha):
        # alpha > d/2 - 1, the coupling integral is finite
        return ValidationResult(Case.FORM_PERTURBATION)
    if d == 2:
        # divergence forces alpha = 0 here
        if beta > 0.0:
            return ValidationResult(Case.RENORMALISABLE)
        return ValidationResult(
            Case.INVALID, "renormalisable case in d = 2 needs beta > 0"
        )
    if d == 3:
        bound = 0.5 - beta * beta / (8.0 + beta * beta)
        if alpha > bound:
            return ValidationResult(Case.RENORMALISABLE)
        return ValidationResult(
            Case.INVALID,
            f"renormalisable case in d = 3 needs alpha > 1/2 - beta^2/(8+beta^2)"
            f" = {bound:.6g}, got alpha = {alpha}",
        )
    # d = 1 always has a finite coupling integral (alpha < 1/2), so the
    # divergent branch is unreachable; keep a reason for safety.
    return ValidationResult(Case.INVALID, "d = 1 admits no renormalisable model")


@dataclass(frozen=True)
class ModelSpec:
    """A validated model: dimension, sources, coupling, vhat, omega.

    D and case are derived; construct through build() or the named
    factories so the invariants hold.
    """

    d: int
    M: int
    g: float
    v: FormFactor
    omega: Dispersion
    D: float
    case: Case

    @classmethod
    def build(cls, d, M, g, v, omega):
        if M < 1:
            raise ValueError("source count M must be >= 1")
        res = validate(d, v, omega)
        if not res:
            raise ValueError(f"invalid model parameters: {res.reason}")
        return cls(d=d, M=M, g=float(g), v=v, omega=omega,
                   D=uv_exponent(d, v.alpha), case=res.case)

    @property
    def is_renormalisable(self):
        return self.case is Case.RENORMALISABLE

    def vhat(self, k_norm):
        return self.v.value(k_norm)

    def omega_of(self, k_norm):
        return self.omega.value(k_norm)

    def describe(self):
        return {
            "d": self.d, "M": self.M, "g": self.g,
            "form": self.v.kind.value, "alpha": self.v.alpha,
            "dispersion": self.omega.kind.value, "beta": self.omega.beta,
            "D": self.D, "case": self.case.value,
            "eta_threshold": regularity_threshold(self),
        }


def froehlich(g=1.0, M=1):
    """d = 3, omega = 1, vhat = 1/|k|; form-perturbation regime."""
    return ModelSpec.build(3, M, g, FormFactor(FormKind.FROEHLICH, 1.0),
                           Dispersion(DispersionKind.CONSTANT_ONE, 0.0))


def nelson(g=1.0, M=1):
    """d = 3, omega = sqrt(1+k^2), vhat = omega^(-1/2); renormalisable."""
    return ModelSpec.build(3, M, g, FormFactor(FormKind.NELSON_MASSIVE, 0.5),
                           Dispersion(DispersionKind.RELATIVISTIC_MASSIVE, 1.0))


def delta2d(g=1.0, M=1):
    """d = 2, omega = 1 + k^2, vhat = 1 (contact interaction); renormalisable."""
    return ModelSpec.build(2, M, g, FormFactor(FormKind.DELTA_2D, 0.0),
                           Dispersion(DispersionKind.NONREL_MASSIVE, 2.0))


def power_law_model(d, alpha, beta, g=1.0, M=1):
    """Generic |k|^(-alpha) form factor with (1+k^2)^(beta/2) dispersion."""
    return ModelSpec.build(d, M, g, FormFactor(FormKind.POWER_LAW, alpha),
                           Dispersion(DispersionKind.POWER_LOWER, beta))


def u_transform(s, spec):
    """The affine map u(s) = (beta/2) s - D/2 steering the domain choices."""
    return 0.5 * spec.omega.beta * s - 0.5 * spec.D


def regularity_threshold(spec):
    """Supremum of exponents eta with D(H) inside D(L^eta): (2 - D)/4."""
    return (2.0 - spec.D) / 4.0


class EpsilonTooLarge(ValueError):
    """eps breaks one of the strict inequalities of the parameter selection."""


@dataclass(frozen=True)
class RegularityParams:
    """Admissible (s, sigma) pair and the derived domain exponents.

    Invariants: u(s) < 1, u(u(s)) > 0, delta1 < 1, delta2 < 1.  S2 may be
    +inf (beta = 2).
    """

    s: float
    sigma: float
    eps: float
    S1: float
    S2: float
    delta1: float
    delta2: float
    eta_threshold: float


def _regularity_candidate(beta, D, eps):
    if beta == 2.0:
        S1, S2 = 1.0 + 0.5 * D, math.inf
    else:
        S1 = (2.0 + D) / beta
        S2 = (1.0 - 1.5 * D) / (2.0 - beta)
    s = min(S1, S2) - eps
    sigma = max(0.0, min(2.0 * (S2 - S1), S1) - 2.0 * eps)
    return S1, S2, s, sigma


def _regularity_violation(beta, D, eps):
    """Name of the first violated strict inequality, or None if admissible."""
    u = lambda x: 0.5 * beta * x - 0.5 * D
    S1, S2, s, sigma = _regularity_candidate(beta, D, eps)
    if s <= 0.0:
        return "s = min(S1, S2) - eps must stay positive"
    if u(s) >= 1.0:
        return "u(s) < 1 fails"
    if u(u(s)) <= 0.0:
        return "u(u(s)) > 0 fails"
    if u(sigma) >= 1.0:
        return "u(sigma) < 1 fails"
    if s - u(s) + 0.5 * (sigma - u(sigma) - 1.0) >= 0.0:
        return "mapping inequality s - u(s) < (1 - sigma + u(sigma))/2 fails"
    delta2 = max(0.0, 1.0 - s) + 0.5 * max(0.0, 1.0 - sigma)
    if delta2 >= 1.0:
        return "delta2 < 1 fails"
    return None


def select_regularity_params(spec, eps=None):
    """Pick the admissible pair (s, sigma) for a renormalisable model.

    s and sigma follow the three-way case split on S1 = (2+D)/beta versus
    S2 = (1 - 3D/2)/(2 - beta); all strict inequalities that the choice
    must preserve are rechecked for the given eps.  When eps is omitted it
    defaults to a quarter of the largest admissible value, found by
    bisection on the (monotone) admissibility predicate.

    Raises EpsilonTooLarge when an explicit eps breaks an inequality.
    """
    if not spec.is_renormalisable:
        raise ValueError("regularity parameters exist for renormalisable models only")
    beta, D = spec.omega.beta, spec.D
    u = lambda x: 0.5 * beta * x - 0.5 * D

    if eps is None:
        lo, hi = 0.0, min(_regularity_candidate(beta, D, 0.0)[0:2])
        if not math.isfinite(hi):
            hi = _regularity_candidate(beta, D, 0.0)[0]
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if _regularity_violation(beta, D, mid) is None:
                lo = mid
            else:
                hi = mid
        eps = 0.25 * lo
        if eps <= 0.0:
            raise EpsilonTooLarge("no admissible eps exists for these parameters")
    violation = _regularity_violation(beta, D, eps)
    if violation is not None:
        raise EpsilonTooLarge(f"eps = {eps}: {violation}")

    S1, S2, s, sigma = _regularity_candidate(beta, D, eps)
    delta2 = max(0.0, 1.0 - s) + 0.5 * max(0.0, 1.0 - sigma)
    delta1 = 1.0 - u(s) if s <= 1.0 else s - u(s)
    return RegularityParams(s=s, sigma=sigma, eps=eps, S1=S1, S2=S2,
                            delta1=delta1, delta2=delta2,
                            eta_threshold=regularity_threshold(spec))


def self_energy(spec, lam, tol=1e-8):
    """Counterterm E(Lambda) = g^2 M * integral_{|k|<Lambda} |vhat|^2/(k^2+omega).

    Monotone nondecreasing in Lambda, zero at Lambda = 0; diverges as
    Lambda grows in the renormalisable regime.
    """
    if lam < 0:
        raise ValueError("cutoff must be nonnegative")
    if lam == 0.0:
        return 0.0
    vhat, omega = spec.v.value, spec.omega.value

    def profile(r):
        return vhat(r) ** 2 / (r * r + omega(r))

    res = quad.radial_integral(profile, spec.d, 0.0, lam, tol=tol,
                               singular_exponent=2.0 * spec.v.alpha)
    return spec.g * spec.g * spec.M * res.value
