"""Primitive model data and the quantities derived from it.

Prelimit rates are generated from the limit coefficients,

    lambda^n_i(k) = n lambda_i(k) + n^beta lambda_hat_i(k)
    mu^n_i(k)     = mu_i(k) + n^(beta-1) mu_hat_i(k)
    gamma^n_i(k)  = gamma_i(k)

so the averaged Halfin-Whitt scaling assumptions hold exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .env_chain import EnvAnalytics, EnvGenerator, theta_matrix
from .errors import ValidationError

#: tolerance on sum(rho) == 1
CRITICAL_LOAD_TOL = 1e-9


def scaling_exponent(alpha: float) -> float:
    return max(0.5, 1.0 - alpha / 2.0)


def _table(a, d, K, name):
    arr = np.atleast_1d(np.array(a, dtype=float))
    if arr.ndim == 1 and d == 1:
        arr = arr[None, :]
    if arr.ndim == 1 and K == 1:
        arr = arr[:, None]
    if arr.shape != (d, K):
        raise ValidationError(f"{name} must have shape (d, K) = {(d, K)}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ValidationReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_failed(self):
        if self.violations:
            raise ValidationError("; ".join(self.violations), self.violations)

    def __bool__(self):
        return self.ok


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Rate tables are ``d x K`` arrays indexed ``[class, environment]``."""

    env: EnvGenerator
    lambda_lim: np.ndarray
    mu_lim: np.ndarray
    gamma_lim: np.ndarray
    lambda_hat: np.ndarray = None
    mu_hat: np.ndarray = None

    def __post_init__(self):
        K = self.env.K
        lam = np.atleast_1d(np.array(self.lambda_lim, dtype=float))
        if lam.ndim == 2:
            d = lam.shape[0]
        else:
            # a flat table is a row (d = 1) unless there is a single environment
            d = len(lam) if K == 1 else 1
        object.__setattr__(self, "lambda_lim", _table(self.lambda_lim, d, K, "lambda_lim"))
        object.__setattr__(self, "mu_lim", _table(self.mu_lim, d, K, "mu_lim"))
        object.__setattr__(self, "gamma_lim", _table(self.gamma_lim, d, K, "gamma_lim"))
        zeros = np.zeros((d, K))
        object.__setattr__(
            self, "lambda_hat", _table(zeros if self.lambda_hat is None else self.lambda_hat, d, K, "lambda_hat")
        )
        object.__setattr__(
            self, "mu_hat", _table(zeros if self.mu_hat is None else self.mu_hat, d, K, "mu_hat")
        )

    @property
    def d(self) -> int:
        return self.lambda_lim.shape[0]

    @property
    def K(self) -> int:
        return self.env.K

    @property
    def n(self) -> int:
        return self.env.n

    @property
    def alpha(self) -> float:
        return self.env.alpha

    @property
    def beta(self) -> float:
        return scaling_exponent(self.alpha)

    def with_n(self, n: int) -> "ModelParams":
        return replace(self, env=self.env.with_n(n))

    def with_alpha(self, alpha: float) -> "ModelParams":
        return replace(self, env=EnvGenerator(self.env.Q, alpha, self.env.n))

    # prelimit rates, d x K
    @property
    def lambda_n(self) -> np.ndarray:
        n, b = self.n, self.beta
        return n * self.lambda_lim + n**b * self.lambda_hat

    @property
    def mu_n(self) -> np.ndarray:
        n, b = self.n, self.beta
        return self.mu_lim + n ** (b - 1.0) * self.mu_hat

    @property
    def gamma_n(self) -> np.ndarray:
        return np.array(self.gamma_lim)

    @cached_property
    def analytics(self) -> EnvAnalytics:
        return self.env.analytics()

    def validate(self) -> ValidationReport:
        return validate(self)

    def derive(self) -> "DerivedQuantities":
        return derive(self)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "alpha": self.alpha,
            "Q": self.env.Q.tolist(),
            "lambda": self.lambda_lim.tolist(),
            "mu": self.mu_lim.tolist(),
            "gamma": self.gamma_lim.tolist(),
            "lambda_hat": self.lambda_hat.tolist(),
            "mu_hat": self.mu_hat.tolist(),
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "ModelParams":
        """Build from a mapping with keys ``n, alpha, Q, lambda, mu, gamma``
        and optional ``lambda_hat, mu_hat``."""
        missing = [k for k in ("n", "alpha", "Q", "lambda", "mu", "gamma") if k not in cfg]
        if missing:
            raise ValidationError(f"model block missing keys: {missing}", [f"model.{k}" for k in missing])
        env = EnvGenerator(np.array(cfg["Q"], dtype=float), float(cfg["alpha"]), int(cfg["n"]))
        return cls(
            env,
            cfg["lambda"],
            cfg["mu"],
            cfg["gamma"],
            cfg.get("lambda_hat"),
            cfg.get("mu_hat"),
        )


@dataclass(frozen=True)
class DerivedQuantities:
    beta: float
    lambda_pi: np.ndarray
    mu_pi: np.ndarray
    gamma_pi: np.ndarray
    rho: np.ndarray
    ell: np.ndarray
    M: np.ndarray
    Gamma: np.ndarray
    Lambda: np.ndarray
    Theta: np.ndarray
    Sigma: np.ndarray
    bar_lambda_n: np.ndarray
    bar_mu_n: np.ndarray
    bar_gamma_n: np.ndarray
    pi: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def validate(params: ModelParams) -> ValidationReport:
    """Check rate positivity and critical loading; collect every violation."""
    v = []
    for name, tab in (("lambda", params.lambda_lim), ("mu", params.mu_lim), ("gamma", params.gamma_lim)):
        bad = np.argwhere(~(tab > 0))
        if len(bad):
            v.append(f"positivity violated: {name}_i(k) <= 0 at (i, k) = {bad.tolist()}")
    for name, tab in (("lambda^n", params.lambda_n), ("mu^n", params.mu_n)):
        bad = np.argwhere(~(tab > 0))
        if len(bad):
            v.append(f"positivity violated: prelimit {name}_i(k) <= 0 at (i, k) = {bad.tolist()}")
    pi = params.analytics.pi
    rho = (params.lambda_lim @ pi) / (params.mu_lim @ pi)
    if np.all(np.isfinite(rho)) and abs(rho.sum() - 1.0) > CRITICAL_LOAD_TOL:
        v.append(f"critical load violated: sum(rho) = {rho.sum():.12g} != 1")
    return ValidationReport(v)


def covariance(Lambda: np.ndarray, Theta: np.ndarray, alpha: float) -> np.ndarray:
    """Diffusion covariance: ``Lambda^2`` (alpha > 1), ``Lambda^2 + Theta``
    (alpha = 1) or ``Theta`` (alpha < 1)."""
    L2 = Lambda @ Lambda
    if alpha > 1:
        return L2.copy()
    if alpha == 1:
        return L2 + Theta
    return np.array(Theta, dtype=float)


def derive(params: ModelParams) -> DerivedQuantities:
    validate(params).raise_if_failed()
    an = params.analytics
    pi = an.pi
    lam_pi = params.lambda_lim @ pi
    mu_pi = params.mu_lim @ pi
    gam_pi = params.gamma_lim @ pi
    rho = lam_pi / mu_pi
    ell = params.lambda_hat @ pi - rho * (params.mu_hat @ pi)
    Lambda = np.diag(np.sqrt(2.0 * lam_pi))
    Theta = theta_matrix(params.lambda_lim, params.mu_lim, rho, pi, an.Upsilon)
    return DerivedQuantities(
        beta=params.beta,
        lambda_pi=lam_pi,
        mu_pi=mu_pi,
        gamma_pi=gam_pi,
        rho=rho,
        ell=ell,
        M=np.diag(mu_pi),
        Gamma=np.diag(gam_pi),
        Lambda=Lambda,
        Theta=Theta,
        Sigma=covariance(Lambda, Theta, params.alpha),
        bar_lambda_n=params.lambda_n @ pi,
        bar_mu_n=params.mu_n @ pi,
        bar_gamma_n=params.gamma_n @ pi,
        pi=pi,
    )


def load_gap(params: ModelParams) -> float:
    """``n^(1-beta) (1 - rho^n)`` computed from the pi-averaged prelimit rates."""
    pi = params.analytics.pi
    n = params.n
    rho_n = np.sum((params.lambda_n @ pi) / (params.mu_n @ pi)) / n
    return n ** (1.0 - params.beta) * (1.0 - rho_n)


def load_gap_limit(params: ModelParams) -> float:
    """Large-n limit of :func:`load_gap`."""
    pi = params.analytics.pi
    lam_pi = params.lambda_lim @ pi
    mu_pi = params.mu_lim @ pi
    rho = lam_pi / mu_pi
    return float(np.sum((rho * (params.mu_hat @ pi) - params.lambda_hat @ pi) / mu_pi))
