"""Mean-field variational families over static parameters.

Each factor is a transformed normal: the underlying draw is
mu + exp(v) * eta with eta standard normal, pushed through identity
(normal), exp (log-normal) or the logistic sigmoid (sigmoid-normal).
log-densities include the transform Jacobian.  Priors are evaluated
exactly; points outside the support score -inf rather than raising.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import LOG_2PI, value_of

__all__ = [
    "Factor",
    "MeanFieldFamily",
    "PointEstimate",
    "Prior",
    "sample_reparam",
    "log_prior",
    "fisher_block",
    "UnsupportedFactorError",
    "DEFAULT_LOG_SD",
]

FACTOR_KINDS = ("normal", "log-normal", "sigmoid-normal")

# small initial spread stabilizes the early evidence estimates
DEFAULT_LOG_SD = math.log(0.1)


class UnsupportedFactorError(ValueError):
    pass


def _transform(kind, z):
    if kind == "normal":
        return z
    if kind == "log-normal":
        return ad.exp(z)
    if kind == "sigmoid-normal":
        return ad.sigmoid(z)
    raise UnsupportedFactorError(f"unknown factor kind {kind!r}")


def _log_jacobian(kind, theta):
    # log |d theta / d z| at theta = transform(z)
    if kind == "normal":
        return 0.0
    if kind == "log-normal":
        return ad.log(theta)
    if kind == "sigmoid-normal":
        return ad.log(theta) + ad.log(1.0 - theta)
    raise UnsupportedFactorError(f"unknown factor kind {kind!r}")


@dataclass
class Factor:
    """One scalar variational factor: location mu, log standard deviation v."""

    kind: str
    mu: float = 0.0
    v: float = DEFAULT_LOG_SD

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise UnsupportedFactorError(f"unknown factor kind {self.kind!r}")

    def support(self):
        return {"normal": (-np.inf, np.inf),
                "log-normal": (0.0, np.inf),
                "sigmoid-normal": (0.0, 1.0)}[self.kind]

    def reparam(self, mu, v, eta):
        """theta and its log-density from one standard-normal draw.

        ``mu`` and ``v`` may be tape parameters; the density is written
        through the sampled point so the pathwise derivative is complete.
        """
        z = mu + ad.exp(v) * eta
        theta = _transform(self.kind, z)
        resid = (z - mu) * ad.exp(-v)
        log_q = -0.5 * LOG_2PI - v - 0.5 * resid * resid - _log_jacobian(self.kind, theta)
        return theta, log_q

    def log_density(self, theta):
        lo, hi = self.support()
        th = value_of(theta)
        if th <= lo or th >= hi:
            return -np.inf
        if self.kind == "normal":
            z = theta
        elif self.kind == "log-normal":
            z = ad.log(theta)
        else:
            z = ad.log(theta) - ad.log(1.0 - theta)
        resid = (z - self.mu) * math.exp(-self.v)
        return (-0.5 * LOG_2PI - self.v - 0.5 * resid * resid
                - _log_jacobian(self.kind, theta))

    def mean_point(self):
        """The transform of the location (a convenient point summary)."""
        return value_of(_transform(self.kind, self.mu))


class MeanFieldFamily:
    """Ordered name -> Factor product; log q is the sum of factor terms."""

    def __init__(self, factors):
        self.factors = dict(factors)

    def __len__(self):
        return len(self.factors)

    def names(self):
        return list(self.factors)

    def param_vector(self):
        out = []
        for f in self.factors.values():
            out.extend((f.mu, f.v))
        return np.array(out)

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        for i, f in enumerate(self.factors.values()):
            f.mu = float(vec[2 * i])
            f.v = float(vec[2 * i + 1])

    def log_density(self, theta: dict) -> float:
        total = 0.0
        for name, f in self.factors.items():
            total += value_of(f.log_density(theta[name]))
        return total

    def mean_theta(self) -> dict:
        return {name: f.mean_point() for name, f in self.factors.items()}

    def copy(self) -> "MeanFieldFamily":
        return MeanFieldFamily({n: Factor(f.kind, f.mu, f.v)
                                for n, f in self.factors.items()})

    def to_json(self) -> str:
        return json.dumps({"type": "mean-field",
                           "factors": [[n, f.kind, f.mu, f.v]
                                       for n, f in self.factors.items()]},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MeanFieldFamily":
        spec = json.loads(text)
        if spec.get("type") != "mean-field":
            raise ValueError("not a mean-field checkpoint")
        return cls({n: Factor(kind, mu, v) for n, kind, mu, v in spec["factors"]})


class PointEstimate:
    """Point-mass family for variational EM: theta = transform(raw)."""

    def __init__(self, entries):
        # entries: name -> (kind, raw value)
        self.entries = {n: (k, float(r)) for n, (k, r) in dict(entries).items()}

    def names(self):
        return list(self.entries)

    def param_vector(self):
        return np.array([r for _, r in self.entries.values()])

    def set_param_vector(self, vec):
        for i, n in enumerate(self.entries):
            kind, _ = self.entries[n]
            self.entries[n] = (kind, float(vec[i]))

    def theta(self, tape=None) -> dict:
        out = {}
        for n, (kind, raw) in self.entries.items():
            z = tape.parameter(raw) if tape is not None else raw
            out[n] = _transform(kind, z)
        return out

    def mean_theta(self) -> dict:
        return {n: value_of(_transform(kind, raw))
                for n, (kind, raw) in self.entries.items()}

    def copy(self) -> "PointEstimate":
        return PointEstimate(dict(self.entries))

    def to_json(self) -> str:
        return json.dumps({"type": "point",
                           "entries": [[n, k, r] for n, (k, r) in self.entries.items()]},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PointEstimate":
        spec = json.loads(text)
        if spec.get("type") != "point":
            raise ValueError("not a point checkpoint")
        return cls({n: (k, r) for n, k, r in spec["entries"]})


def family_from_json(text: str):
    kind = json.loads(text).get("type")
    return {"mean-field": MeanFieldFamily, "point": PointEstimate}[kind].from_json(text)


def sample_reparam(family: MeanFieldFamily, rng, tape=None):
    """One reparameterized draw of every factor.

    Returns (theta dict, total log q).  With a tape, (mu, v) of every
    factor are declared as parameters in iteration order, so gradients
    flow to them through both the sample and the density.
    """
    theta = {}
    log_q = 0.0
    for name, f in family.factors.items():
        mu = tape.parameter(f.mu) if tape is not None else f.mu
        v = tape.parameter(f.v) if tape is not None else f.v
        eta = rng.standard_normal()
        th, lq = f.reparam(mu, v, eta)
        theta[name] = th
        log_q = log_q + lq
    return theta, log_q


@dataclass
class Prior:
    """Prior density spec. Kinds: normal(mean, var), uniform(lo, hi),
    gamma(shape, rate), inv-gamma(shape, scale), log-normal(mean, var)."""

    kind: str
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("normal", "uniform", "gamma", "inv-gamma", "log-normal"):
            raise ValueError(f"unknown prior kind {self.kind!r}")


def log_prior(prior: Prior, theta):
    """Exact log prior density; -inf outside the support (caller decides)."""
    th = value_of(theta)
    if prior.kind == "normal":
        var = prior.b
        resid = theta - prior.a
        return -0.5 * math.log(2.0 * math.pi * var) - 0.5 * resid * resid / var
    if prior.kind == "uniform":
        lo, hi = prior.a, prior.b
        if th < lo or th > hi:
            return -np.inf
        return -math.log(hi - lo)
    if prior.kind == "gamma":
        shape, rate = prior.a, prior.b
        if th <= 0.0:
            return -np.inf
        const = shape * math.log(rate) - gammaln(shape)
        return const + (shape - 1.0) * ad.log(theta) - rate * theta
    if prior.kind == "inv-gamma":
        shape, scale = prior.a, prior.b
        if th <= 0.0:
            return -np.inf
        const = shape * math.log(scale) - gammaln(shape)
        return const - (shape + 1.0) * ad.log(theta) - scale / theta
    if prior.kind == "log-normal":
        mean, var = prior.a, prior.b
        if th <= 0.0:
            return -np.inf
        z = ad.log(theta)
        return (-0.5 * math.log(2.0 * math.pi * var)
                - 0.5 * (z - mean) * (z - mean) / var - z)
    raise ValueError(prior.kind)  # pragma: no cover


def log_prior_total(priors: dict, theta: dict):
    total = 0.0
    for name, prior in priors.items():
        total = total + log_prior(prior, theta[name])
    return total


def fisher_block(factor: Factor) -> np.ndarray:
    """Per-factor Fisher information in the (mu, v) parameterization.

    Closed form only for the normal and log-normal factors:
    diag(exp(-2 v), 2).
    """
    if factor.kind == "sigmoid-normal":
        raise UnsupportedFactorError(
            "no closed-form Fisher block for sigmoid-normal factors")
    return np.diag([math.exp(-2.0 * factor.v), 2.0])


def natural_direction(family: MeanFieldFamily, grads: np.ndarray) -> np.ndarray:
    """Precondition a (mu, v)-packed gradient by the inverse Fisher blocks.

    Factors without a closed-form block fall back to the plain gradient
    with a warning.
    """
    grads = np.asarray(grads, dtype=float)
    out = grads.copy()
    for i, f in enumerate(family.factors.values()):
        if f.kind == "sigmoid-normal":
            warnings.warn("sigmoid-normal factor: natural gradient unavailable, "
                          "using the plain gradient", RuntimeWarning, stacklevel=2)
            continue
        out[2 * i] = math.exp(2.0 * f.v) * grads[2 * i]
        out[2 * i + 1] = 0.5 * grads[2 * i + 1]
    return out
