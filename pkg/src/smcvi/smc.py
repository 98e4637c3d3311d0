"""Particle filter with a differentiable log-evidence estimate, plus the
conditional variant that clamps one retained path.

All weight arithmetic is in log space.  Model densities and samplers are
bound into a ModelSpec by the model modules; the engine only moves
per-dimension particle columns around, so the same code path serves the
tape-recorded training runs, plain float runs, and float runs batched
over independent replicates (particle axis last, replicate axis first).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffScalar, value_of

__all__ = [
    "ModelSpec",
    "ResamplingPolicy",
    "ParticleSystem",
    "AncestralLineage",
    "CarryState",
    "RngStreams",
    "run_smc",
    "run_csmc",
    "trace_lineage",
    "effective_sample_size",
    "log_joint_path_density",
    "DegenerateFilterError",
    "SmcNumericError",
]


class DegenerateFilterError(RuntimeError):
    """Every particle weight vanished or went non-finite at some step."""

    def __init__(self, step):
        super().__init__(f"all particle weights degenerate at step {step}")
        self.step = step


class SmcNumericError(ArithmeticError):
    """NaN appeared in a proposal sample or weight."""


@dataclass
class ModelSpec:
    """Log-density and reparameterized-sampler callables of one model.

    Static parameters, proposal parameters and the observation sequence
    are bound in by the model modules.  States are lists of per-dimension
    scalar lanes; ``eps`` is a list of standard-normal driving noises.
    """

    num_steps: int
    state_dim: int
    eps_dim: int
    sample_init: Callable
    log_init_target: Callable
    log_init_proposal: Callable
    sample_step: Callable          # (x_prev, eps, n) -> x_n
    log_step_proposal: Callable    # (x_n, x_prev, n)
    log_transition: Callable       # (x_n, x_prev, n)
    log_observation: Callable      # (x_n, n)


@dataclass
class ResamplingPolicy:
    """When and how ancestors are drawn.

    ``always`` redraws every step; ``ess-threshold`` only when the
    effective sample size drops below ``threshold * K``.  Multinomial is
    the default scheme because the extended-target identities assume
    categorical ancestor draws; systematic is available for variance
    reduction but excluded from the unbiasedness checks of record.
    """

    mode: str = "always"
    threshold: float = 0.5
    scheme: str = "multinomial"

    def __post_init__(self):
        if self.mode not in ("always", "ess-threshold"):
            raise ValueError(f"unknown resampling mode {self.mode!r}")
        if self.scheme not in ("multinomial", "systematic"):
            raise ValueError(f"unknown resampling scheme {self.scheme!r}")


@dataclass
class RngStreams:
    """Dedicated substreams so ancestry draws never perturb proposal noise.

    Keeping the proposal stream isolated lets a rerun with frozen
    ancestry replay identical noise, which the finite-difference gradient
    checks rely on.
    """

    proposal: np.random.Generator
    ancestry: np.random.Generator
    selection: np.random.Generator

    @classmethod
    def from_rng(cls, rng) -> "RngStreams":
        if isinstance(rng, RngStreams):
            return rng
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        p, a, s = rng.spawn(3)
        return cls(p, a, s)


@dataclass
class CarryState:
    """Particles handed from one filter segment to the next (event batching)."""

    columns: list
    log_norm_weights: object   # log W over the particle axis
    next_step: int


@dataclass
class AncestralLineage:
    """Back-traced ancestor indices of one surviving particle."""

    final_index: object        # int, or one index per replicate
    indices: np.ndarray        # shape (num steps,) or (replicates, num steps)


class ParticleSystem:
    """Weighted particle paths with ancestry and the running evidence estimate.

    ``columns[n][d]`` holds dimension ``d`` of the particles born at step
    ``n`` (particle axis last).  ``ancestry[n]`` gives the parent of each
    step-``n`` particle, or None where no resampling happened.
    """

    def __init__(self, num_particles, num_steps):
        self.num_particles = num_particles
        self.num_steps = num_steps
        self.columns = []
        self.log_weights = []      # unnormalized log w_n, gradient carrying
        self.weights = []          # normalized W_n, detached floats
        self.ancestry = [None]     # entry n: parents of step-n particles (None at 0)
        self.log_z = 0.0
        self.ess_trace = []
        self.final_index = None
        self.ancestry_logprob = None

    @property
    def log_z_value(self):
        return value_of(self.log_z)

    def state_at(self, n):
        return self.columns[n]

    def path_along(self, lineage: AncestralLineage):
        """Per-step state values read off along a lineage (floats)."""
        idx = np.asarray(lineage.indices)
        out = []
        for n, cols in enumerate(self.columns):
            take = idx[..., n]
            row = []
            for col in cols:
                v = np.asarray(value_of(col))
                if v.ndim == 0:
                    row.append(float(v))
                elif np.ndim(take) == 0:
                    row.append(v[..., int(take)])
                else:
                    row.append(np.take_along_axis(v, take[..., None], axis=-1)[..., 0])
            out.append(row)
        return out

    def full_paths(self):
        """Forward reconstruction of every particle's path by repeated
        ancestor gathers (independent of the lineage back-walk)."""
        paths = [[np.asarray(value_of(c)) + 0.0 for c in cols] for cols in self.columns]
        for n in range(1, len(self.columns)):
            anc = self.ancestry[n]
            if anc is None:
                continue
            for m in range(n):
                paths[m] = [ad.gather(c, anc) for c in paths[m]]
        return paths


def effective_sample_size(weights) -> np.ndarray:
    """1 / sum of squared normalized weights, in [1, K]."""
    w = np.asarray(weights, dtype=float)
    return 1.0 / np.sum(w * w, axis=-1)


def _normalize(log_w_values):
    m = np.max(log_w_values, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(log_w_values - m)
    return w / np.sum(w, axis=-1, keepdims=True)


def _categorical(weights, u):
    """Inverse-CDF lookup of uniforms ``u`` against rows of ``weights``."""
    cdf = np.cumsum(weights, axis=-1)
    cdf[..., -1] = 1.0
    return np.sum(u[..., :, None] >= cdf[..., None, :], axis=-1).astype(np.int64)


def _draw_ancestors(weights, policy, rng, shape):
    if policy.scheme == "systematic":
        k = shape[-1]
        u0 = rng.random(shape[:-1] + (1,)) / k
        pts = u0 + np.arange(k) / k
        return _categorical(weights, pts)
    return _categorical(weights, rng.random(shape))


def _is_diff(cols):
    return any(isinstance(c, DiffScalar) and not c.is_constant for c in cols)


def _check_finite(values, step, what):
    v = np.asarray(values)
    if np.isnan(v).any():
        raise SmcNumericError(f"NaN in {what} at step {step}")


def run_smc(model: ModelSpec, num_particles: int, rng, *,
            policy: Optional[ResamplingPolicy] = None,
            replicates: Optional[int] = None,
            forced_ancestry: Optional[Sequence] = None,
            carry: Optional[CarryState] = None,
            stop: Optional[int] = None,
            retained: Optional[tuple] = None,
            track_ancestry_logprob: bool = False,
            on_step: Optional[Callable] = None):
    """Run the filter and return (ParticleSystem, AncestralLineage).

    The running evidence estimate accumulates log sum_k w_n(k) per step
    via log-sum-exp and is unbiased for the marginal likelihood on the
    exponential scale.  The final index is drawn from the terminal
    normalized weights.

    ``replicates`` batches independent float-mode runs over a leading
    axis.  ``forced_ancestry`` replays recorded resampling outcomes (one
    entry per step; None means no resampling at that step), which freezes
    the graph topology for gradient checks.  ``carry`` continues from a
    previous segment's particles.  ``retained`` is used by run_csmc.
    """
    if num_particles < 1:
        raise ValueError("need at least one particle")
    if model.num_steps < 1:
        raise ValueError("observation sequence is empty")
    policy = policy or ResamplingPolicy()
    streams = RngStreams.from_rng(rng)
    K = num_particles
    batch = () if replicates is None else (replicates,)

    retained_path, retained_slots = retained if retained is not None else (None, None)

    def draw_eps():
        e = streams.proposal.standard_normal((model.eps_dim,) + batch + (K,))
        return list(e)

    system = ParticleSystem(K, model.num_steps)
    log_k = np.log(K)
    stop = model.num_steps if stop is None else min(stop, model.num_steps)

    if carry is None:
        start = 0
        x = model.sample_init(draw_eps())
        if retained_path is not None:
            x = _clamp(x, retained_path[0], retained_slots[0], batch, K)
        for col in x:
            _check_finite(value_of(col), 0, "proposal sample")
        log_alpha = (model.log_observation(x, 0)
                     + model.log_init_target(x)
                     - model.log_init_proposal(x))
        log_w = log_alpha - log_k
        _finish_step(system, x, log_w, 0, on_step)
        first = 1
    else:
        start = carry.next_step
        system.columns.append(carry.columns)
        system.log_weights.append(carry.log_norm_weights)
        system.weights.append(_normalize(np.asarray(value_of(carry.log_norm_weights))))
        system.ess_trace.append(effective_sample_size(system.weights[-1]))
        first = start

    if replicates is not None and _is_diff(system.columns[0]):
        raise ValueError("batched replicates are a float-mode feature")

    for n in range(first, stop):
        w_prev = system.weights[-1]
        log_w_prev = system.log_weights[-1]

        if forced_ancestry is not None:
            # aligned with ParticleSystem.ancestry: one entry per absolute step
            anc = forced_ancestry[n]
            anc = None if anc is None else np.asarray(anc)
            do_resample = anc is not None
        else:
            if policy.mode == "always":
                do_resample = True
            else:
                do_resample = effective_sample_size(w_prev) < policy.threshold * K
                if not np.ndim(do_resample):
                    do_resample = bool(do_resample)
            anc = None
            if np.any(do_resample):
                anc = _draw_ancestors(w_prev, policy, streams.ancestry, batch + (K,))
                if np.ndim(do_resample):
                    # mixed decisions across replicate lanes: identity where
                    # the threshold was not hit
                    identity = np.broadcast_to(np.arange(K), anc.shape)
                    anc = np.where(np.asarray(do_resample)[..., None], anc, identity)

        if retained_path is not None and anc is not None:
            anc = anc.copy()
            anc[..., retained_slots[n]] = retained_slots[n - 1]

        if anc is not None:
            x_prev = [ad.gather(c, anc) for c in system.columns[-1]]
            if np.ndim(do_resample):
                vals = np.asarray(value_of(log_w_prev))
                log_norm = vals - ad.logsumexp(vals, keepdims=True)
                log_prev = np.where(np.asarray(do_resample)[..., None], -log_k, log_norm)
            else:
                log_prev = -log_k
            if track_ancestry_logprob:
                log_norm = log_w_prev - ad.logsumexp(log_w_prev, keepdims=True)
                picked = ad.gather(log_norm, anc)
                contrib = ad.asum(picked, axis=-1) if isinstance(picked, DiffScalar) else np.sum(picked, axis=-1)
                system.ancestry_logprob = (contrib if system.ancestry_logprob is None
                                           else system.ancestry_logprob + contrib)
        else:
            x_prev = system.columns[-1]
            log_prev = log_w_prev - ad.logsumexp(log_w_prev, keepdims=True)

        system.ancestry.append(anc)
        x = model.sample_step(x_prev, draw_eps(), n)
        if retained_path is not None:
            x = _clamp(x, retained_path[n], retained_slots[n], batch, K)
        for col in x:
            _check_finite(value_of(col), n, "proposal sample")

        log_alpha = (model.log_observation(x, n)
                     + model.log_transition(x, x_prev, n)
                     - model.log_step_proposal(x, x_prev, n))
        log_w = log_prev + log_alpha
        _finish_step(system, x, log_w, n, on_step)

    w_final = system.weights[-1]
    u = streams.selection.random(batch)
    final = _categorical(w_final, u[..., None])[..., 0] if batch else int(
        _categorical(w_final, np.asarray([u]))[0])
    system.final_index = final
    return system, trace_lineage(system, final)


def _clamp(cols, retained_state, slot, batch, K):
    out = []
    for col, val in zip(cols, retained_state):
        if isinstance(col, DiffScalar) and not col.is_constant:
            raise ValueError("retained-path (conditional) runs are float-mode only")
        v = np.asarray(value_of(col), dtype=float)
        if v.ndim == 0:
            v = np.broadcast_to(v, batch + (K,)).copy()
        else:
            v = v.copy()
        v[..., slot] = val
        out.append(v)
    return out


def _finish_step(system, x, log_w, n, on_step):
    vals = np.asarray(value_of(log_w))
    if np.isnan(vals).any():
        raise SmcNumericError(f"NaN in weights at step {n}")
    if np.any(np.max(vals, axis=-1) == -np.inf):
        raise DegenerateFilterError(n)
    system.columns.append(x)
    system.log_weights.append(log_w)
    system.log_z = system.log_z + ad.logsumexp(log_w)
    w = _normalize(vals)
    system.weights.append(w)
    system.ess_trace.append(effective_sample_size(w))
    if on_step is not None:
        on_step(system, n)


def run_csmc(model: ModelSpec, num_particles: int, retained_path, rng, *,
             lineage_slots=None, replicates: Optional[int] = None,
             policy: Optional[ResamplingPolicy] = None) -> ParticleSystem:
    """Conditional run: the particle in the lineage slot at each step is
    clamped to the retained value; everything else (sampling, weighting)
    is identical to the unconditional filter.

    ``retained_path`` is a list over steps of per-dimension values.
    ``lineage_slots`` fixes which slot hosts the retained path at each
    step (defaults to slot 0 throughout).
    """
    if len(retained_path) != model.num_steps:
        raise ValueError("retained path length must match the observation count")
    slots = np.zeros(model.num_steps, dtype=int) if lineage_slots is None \
        else np.asarray(lineage_slots, dtype=int)
    if slots.shape != (model.num_steps,):
        raise ValueError("lineage must provide one slot per step")
    if np.any(slots < 0) or np.any(slots >= num_particles):
        raise ValueError("lineage slot out of range")
    system, _ = run_smc(model, num_particles, rng,
                        policy=policy or ResamplingPolicy(),
                        replicates=replicates,
                        retained=(retained_path, slots))
    return system


def trace_lineage(system: ParticleSystem, final_index) -> AncestralLineage:
    """Back-walk the stored ancestry from a terminal index."""
    steps = len(system.columns)
    k = system.num_particles
    fi = np.asarray(final_index)
    if np.any(fi < 0) or np.any(fi >= k):
        raise ValueError("final index out of range")
    idx = np.empty(fi.shape + (steps,), dtype=int)
    idx[..., steps - 1] = fi
    for n in range(steps - 1, 0, -1):
        anc = system.ancestry[n]
        if anc is None:
            idx[..., n - 1] = idx[..., n]
        else:
            a = np.asarray(anc)
            if a.ndim == 1:
                idx[..., n - 1] = a[idx[..., n]]
            else:
                idx[..., n - 1] = np.take_along_axis(a, idx[..., n][..., None], axis=-1)[..., 0]
    return AncestralLineage(final_index=final_index, indices=idx)


def log_joint_path_density(model: ModelSpec, path) -> float:
    """log of the unnormalized target along one path: initial density plus
    transitions plus observation terms."""
    total = value_of(model.log_init_target(path[0]))
    for n in range(len(path)):
        total = total + value_of(model.log_observation(path[n], n))
        if n >= 1:
            total = total + value_of(model.log_transition(path[n], path[n - 1], n))
    return total
