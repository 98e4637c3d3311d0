"""Reverse-mode autodiff on a dynamically recorded scalar graph.

The tape is rebuilt on every optimization step because the particle
filter's resampling makes the graph topology data dependent.  Node
values are floats, or numpy arrays whose axes are independent scalar
lanes (particle axis last, extra batch or quadrature axes broadcast);
adjoints of broadcast operands are summed back to the operand shape.
"""

from __future__ import annotations

import math
import numbers

import numpy as np

__all__ = [
    "Tape",
    "DiffScalar",
    "DomainError",
    "constant",
    "record",
    "backward",
    "stop_gradient",
    "value_of",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "power",
    "logsumexp",
    "asum",
]

LOG_2PI = math.log(2.0 * math.pi)

# Elementary function names accepted by record().
ELEMENTARY_OPS = (
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "sqrt", "tanh", "sigmoid", "softplus",
    "pow", "logsumexp",
)


class DomainError(ValueError):
    """Input outside an elementary function's domain (carries node provenance)."""


class TapeMismatchError(ValueError):
    """Operands belong to different tapes."""


def _is_number(x):
    return isinstance(x, (numbers.Real, np.floating, np.integer, np.ndarray))


class DiffScalar:
    """A value on (or detached from) a tape.

    ``node`` is the index into the owning tape, or -1 for a constant
    that contributes no adjoint anywhere.
    """

    __slots__ = ("value", "node", "tape")

    def __init__(self, value, node=-1, tape=None):
        self.value = value
        self.node = node
        self.tape = tape

    @property
    def is_constant(self):
        return self.node < 0

    def __repr__(self):
        tag = "const" if self.is_constant else f"node {self.node}"
        return f"DiffScalar({self.value!r}, {tag})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", other, self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", other, self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", other, self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", other, self)

    def __neg__(self):
        return _unary("neg", self)

    def __pow__(self, exponent):
        return power(self, exponent)


def constant(value):
    """Wrap a raw value as a constant DiffScalar (zero adjoint everywhere)."""
    return DiffScalar(value)


def value_of(x):
    """Raw value of ``x`` whether it is a DiffScalar or a plain number/array."""
    return x.value if isinstance(x, DiffScalar) else x


class Tape:
    """Append-only record of (operation kind, parent indices, local partials, value).

    Parents always have smaller indices than their children, so a single
    reverse sweep propagates adjoints.  ``parameter`` declares the leaves
    that ``backward`` reports gradients for.
    """

    def __init__(self):
        self.kinds = []
        self.parents = []    # tuple of node indices, -1 for constant operands
        self.partials = []   # tuple of local partial derivatives (or None for indexed ops)
        self.values = []
        self.aux = []        # constant operand values / index arrays / axes, for replay and backward
        self.param_nodes = []

    def __len__(self):
        return len(self.kinds)

    def _append(self, kind, parents, partials, value, aux=None):
        idx = len(self.kinds)
        self.kinds.append(kind)
        self.parents.append(parents)
        self.partials.append(partials)
        self.values.append(value)
        self.aux.append(aux)
        return idx

    def parameter(self, value):
        """Declare a leaf that backward() reports a gradient for."""
        value = float(value) if isinstance(value, numbers.Real) else np.asarray(value, dtype=float)
        idx = self._append("param", (), (), value)
        self.param_nodes.append(idx)
        return DiffScalar(value, idx, self)

    def record(self, op, args):
        """Record one elementary operation over DiffScalars or constants."""
        return record(op, args, tape=self)

    def replay(self):
        """Recompute every node from its parents; returns the list of values.

        Used to check the invariant that stored values are reproducible
        from the leaves.
        """
        out = [None] * len(self.kinds)
        for i, kind in enumerate(self.kinds):
            vals = []
            for slot, p in enumerate(self.parents[i]):
                vals.append(out[p] if p >= 0 else self.aux[i][slot])
            if kind == "param":
                out[i] = self.values[i]
            elif kind in _FORWARD:
                out[i] = _FORWARD[kind](*vals)
            elif kind == "logsumexp":
                out[i] = _lse_forward(np.stack([np.asarray(v, dtype=float) for v in vals], axis=0), axis=0)
            elif kind == "logsumexp_last":
                v = _lse_forward(vals[0], axis=-1)
                out[i] = np.expand_dims(v, -1) if self.aux[i][2] else v
            elif kind == "gather":
                out[i] = np.take_along_axis(np.asarray(vals[0]), self.aux[i][1], axis=-1)
            elif kind == "pick":
                out[i] = _pick_forward(vals[0], self.aux[i][1])
            elif kind == "sum":
                out[i] = np.asarray(vals[0]).sum(axis=self.aux[i][1])
            elif kind == "stop_gradient":
                out[i] = vals[0]
            else:  # pragma: no cover - guarded by record()
                raise ValueError(f"unknown op kind {kind!r}")
        return out


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, DiffScalar) and a.tape is not None:
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise TapeMismatchError("operands recorded on different tapes")
    return tape


def _coerce(x):
    """Split an operand into (node index, value, const value for replay)."""
    if isinstance(x, DiffScalar):
        if x.is_constant:
            return -1, x.value, x.value
        return x.node, x.value, None
    if _is_number(x):
        return -1, x, x
    raise TypeError(f"cannot use {type(x).__name__} as an operand")


_FORWARD = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "sigmoid": lambda a: _sigmoid_forward(a),
    "softplus": lambda a: np.logaddexp(0.0, a),
    "pow": lambda a, p: a ** p,
}


def _sigmoid_forward(x):
    from scipy.special import expit

    return expit(x)


def _lse_forward(x, axis):
    x = np.asarray(x, dtype=float)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))
    return out


def _pick_forward(v, idx):
    v = np.asarray(v)
    if np.ndim(idx) == 0:
        return v[..., int(idx)]
    return np.take_along_axis(v, np.asarray(idx)[..., None], axis=-1)[..., 0]


def _emit(tape, kind, operands, value, partials, aux_extra=None):
    if tape is None:
        return DiffScalar(value)
    parents, consts = [], []
    for x in operands:
        node, _, const = _coerce(x)
        parents.append(node)
        consts.append(const)
    aux = tuple(consts) if aux_extra is None else (tuple(consts), *aux_extra)
    idx = tape._append(kind, tuple(parents), partials, value, aux)
    return DiffScalar(value, idx, tape)


def _binary(kind, a, b, tape=None):
    tape = _tape_of((a, b)) or tape
    av, bv = value_of(a), value_of(b)
    if kind == "add":
        value, partials = av + bv, (1.0, 1.0)
    elif kind == "sub":
        value, partials = av - bv, (1.0, -1.0)
    elif kind == "mul":
        value, partials = av * bv, (bv, av)
    elif kind == "div":
        value, partials = av / bv, (1.0 / bv, -av / (bv * bv))
    else:  # pragma: no cover
        raise ValueError(kind)
    return _emit(tape, kind, (a, b), value, partials)


def _unary(kind, a, tape=None):
    tape = _tape_of((a,)) or tape
    av = value_of(a)
    if kind == "neg":
        value, partials = -av, (-1.0,)
    elif kind == "exp":
        value = np.exp(av)
        partials = (value,)
    elif kind == "log":
        if np.any(np.asarray(av) <= 0.0):
            raise DomainError(f"log of non-positive value{_where(tape)}")
        value, partials = np.log(av), (1.0 / av,)
    elif kind == "sqrt":
        if np.any(np.asarray(av) <= 0.0):
            raise DomainError(f"sqrt of non-positive value{_where(tape)}")
        value = np.sqrt(av)
        partials = (0.5 / value,)
    elif kind == "tanh":
        value = np.tanh(av)
        partials = (1.0 - value * value,)
    elif kind == "sigmoid":
        value = _sigmoid_forward(av)
        partials = (value * (1.0 - value),)
    elif kind == "softplus":
        value = np.logaddexp(0.0, av)
        partials = (_sigmoid_forward(av),)
    else:  # pragma: no cover
        raise ValueError(kind)
    return _emit(tape, kind, (a,), value, partials)


def _where(tape):
    if tape is None:
        return ""
    return f" (next node {len(tape)})"


# public facade ---------------------------------------------------------
#
# These dispatch on DiffScalar vs plain numerics, so model code written
# once runs both on the tape and in the fast float lane.

def exp(x):
    if isinstance(x, DiffScalar):
        return _unary("exp", x)
    return np.exp(x)


def log(x):
    if isinstance(x, DiffScalar):
        return _unary("log", x)
    return np.log(x)


def sqrt(x):
    if isinstance(x, DiffScalar):
        return _unary("sqrt", x)
    return np.sqrt(x)


def tanh(x):
    if isinstance(x, DiffScalar):
        return _unary("tanh", x)
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, DiffScalar):
        return _unary("sigmoid", x)
    return _sigmoid_forward(x)


def softplus(x):
    if isinstance(x, DiffScalar):
        return _unary("softplus", x)
    return np.logaddexp(0.0, x)


def power(x, p):
    """x ** p. A DiffScalar exponent is composed as exp(p * log x)."""
    if isinstance(p, DiffScalar):
        return exp(p * log(x))
    if isinstance(x, DiffScalar):
        xv = value_of(x)
        value = xv ** p
        return _emit(_tape_of((x,)), "pow", (x, p), value, (p * xv ** (p - 1.0), None))
    return x ** p


def logsumexp(x, axis=-1, keepdims=False):
    """Overflow-safe log-sum-exp.

    Accepts a DiffScalar (reduced over its last axis), a list of
    scalar-like operands (one node with one parent per operand), or a
    plain array.
    """
    if isinstance(x, DiffScalar):
        value = _lse_forward(x.value, axis=-1)
        w = np.exp(np.asarray(x.value) - np.expand_dims(value, -1))
        if keepdims:
            value = np.expand_dims(value, -1)
        return _emit(x.tape, "logsumexp_last", (x,), value, None, aux_extra=(w, keepdims))
    if isinstance(x, (list, tuple)):
        return _logsumexp_multi(list(x))
    from scipy.special import logsumexp as _sp_lse

    return _sp_lse(x, axis=axis, keepdims=keepdims)


def _logsumexp_multi(args, tape=None):
    if not any(isinstance(a, DiffScalar) for a in args) and tape is None:
        return _lse_forward(np.stack([np.asarray(v, dtype=float) for v in args]), axis=0)
    tape = _tape_of(args) or tape
    vals = np.stack([np.asarray(value_of(a), dtype=float) for a in args], axis=0)
    value = _lse_forward(vals, axis=0)
    w = np.exp(vals - value)
    partials = tuple(w[i] for i in range(len(args)))
    return _emit(tape, "logsumexp", tuple(args), value if value.ndim else float(value), partials)


def asum(x, axis=None):
    """Sum of an array-valued node over ``axis`` (None sums everything)."""
    if isinstance(x, DiffScalar):
        v = np.asarray(x.value)
        value = v.sum(axis=axis)
        return _emit(x.tape, "sum", (x,), value, None, aux_extra=(axis, v.shape))
    return np.sum(x, axis=axis)


def stop_gradient(x):
    """Same value, no adjoint flow (severs e.g. resampling outcomes)."""
    if isinstance(x, DiffScalar):
        return _emit(x.tape, "stop_gradient", (x,), x.value, (0.0,))
    return x


def record(op, args, tape=None):
    """Record one elementary operation by name.

    ``op`` is one of add, sub, mul, div, neg, exp, log, sqrt, tanh,
    sigmoid, softplus, pow, logsumexp (aliases: +, -, *, /,
    log-sum-exp, power). Constants are allowed as arguments; pass
    ``tape`` to host the node when no argument carries one.
    """
    aliases = {"+": "add", "-": "sub", "*": "mul", "/": "div",
               "log-sum-exp": "logsumexp", "power": "pow"}
    op = aliases.get(op, op)
    if op not in ELEMENTARY_OPS:
        raise ValueError(f"unknown elementary op {op!r}")
    inferred = _tape_of([a for a in args if isinstance(a, DiffScalar)])
    if inferred is not None and tape is not None and inferred is not tape:
        raise TapeMismatchError("args belong to a different tape")
    host = inferred if inferred is not None else tape
    if op in ("add", "sub", "mul", "div"):
        if len(args) != 2:
            raise ValueError(f"{op} takes 2 arguments")
        return _binary(op, args[0], args[1], tape=host)
    if op == "pow":
        if len(args) != 2:
            raise ValueError("pow takes (base, exponent)")
        base, p = args
        if isinstance(p, DiffScalar) and not p.is_constant:
            return exp(p * log(base))
        xv, pv = value_of(base), value_of(p)
        return _emit(host, "pow", (base, p), xv ** pv, (pv * xv ** (pv - 1.0), None))
    if op == "logsumexp":
        return _logsumexp_multi(list(args), tape=host)
    if len(args) != 1:
        raise ValueError(f"{op} takes 1 argument")
    return _unary(op, args[0], tape=host)


# gather / pick: engine-internal indexed ops (resampling, final selection)

def gather(x, idx):
    """Reorder the last axis by integer indices (scatter-add on backward)."""
    idx = np.asarray(idx)
    if isinstance(x, DiffScalar):
        v = np.asarray(x.value)
        if v.ndim == 0:
            return x  # uniform over particles, reordering is a no-op
        value = np.take_along_axis(v, idx, axis=-1)
        return _emit(x.tape, "gather", (x,), value, None, aux_extra=(idx, v.shape))
    v = np.asarray(x)
    if v.ndim == 0:
        return x
    return np.take_along_axis(v, idx, axis=-1)


def pick(x, idx):
    """Select one lane of the last axis (idx scalar, or one index per batch row)."""
    if isinstance(x, DiffScalar):
        v = np.asarray(x.value)
        if v.ndim == 0:
            return x
        value = _pick_forward(v, idx)
        return _emit(x.tape, "pick", (x,), value, None, aux_extra=(np.asarray(idx), v.shape))
    v = np.asarray(x)
    if v.ndim == 0:
        return x
    return _pick_forward(v, idx)


# backward ---------------------------------------------------------------

def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0:
        return grad.sum()
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _shape(v):
    return np.shape(v)


def backward(tape, output):
    """Adjoints by the chain rule; returns gradients over the declared parameters.

    Array-valued outputs are treated as a sum of their lanes (the seed
    adjoint is one in every lane). Parameters not reachable from
    ``output`` get gradient zero.
    """
    if not isinstance(output, DiffScalar) or output.tape is not tape or output.is_constant:
        raise ValueError("output does not belong to this tape")
    n = output.node
    adj = [None] * (n + 1)
    out_shape = _shape(output.value)
    adj[n] = np.ones(out_shape) if out_shape else 1.0

    kinds, parents, partials, values, aux = (
        tape.kinds, tape.parents, tape.partials, tape.values, tape.aux)
    for i in range(n, -1, -1):
        a = adj[i]
        if a is None:
            continue
        kind = kinds[i]
        if kind in ("param", "stop_gradient"):
            continue
        ps = parents[i]
        if kind == "gather":
            p = ps[0]
            if p >= 0:
                idx, shape = aux[i][1], aux[i][2]
                g = _scatter_add_last(shape, idx, np.asarray(a))
                adj[p] = g if adj[p] is None else adj[p] + g
            continue
        if kind == "pick":
            p = ps[0]
            if p >= 0:
                idx, shape = aux[i][1], aux[i][2]
                g = np.zeros(shape)
                if idx.ndim == 0:
                    g[..., int(idx)] = a
                else:
                    np.put_along_axis(g, idx[..., None], np.asarray(a)[..., None], axis=-1)
                adj[p] = g if adj[p] is None else adj[p] + g
            continue
        if kind == "sum":
            p = ps[0]
            if p >= 0:
                axis, shape = aux[i][1], aux[i][2]
                if axis is None:
                    g = np.broadcast_to(a, shape)
                else:
                    g = np.broadcast_to(np.expand_dims(a, axis), shape)
                adj[p] = g.copy() if adj[p] is None else adj[p] + g
            continue
        if kind == "logsumexp_last":
            p = ps[0]
            if p >= 0:
                w, kept = aux[i][1], aux[i][2]
                a_arr = np.asarray(a)
                g = (a_arr if kept else np.expand_dims(a_arr, -1)) * w
                pg = _unbroadcast(g, _shape(values[p]))
                adj[p] = pg if adj[p] is None else adj[p] + pg
            continue
        for slot, p in enumerate(ps):
            if p < 0:
                continue
            d = partials[i][slot]
            if d is None:
                continue
            g = a * d
            pshape = _shape(values[p])
            if _shape(g) != pshape:
                g = _unbroadcast(g, pshape)
            adj[p] = g if adj[p] is None else adj[p] + g

    grads = []
    for p in tape.param_nodes:
        if p <= n and adj[p] is not None:
            grads.append(adj[p])
        else:
            grads.append(np.zeros(_shape(tape.values[p])) if _shape(tape.values[p]) else 0.0)
    return grads


def _scatter_add_last(shape, idx, adj):
    out = np.zeros(shape)
    if idx.ndim == 1 and len(shape) == 1:
        np.add.at(out, idx, adj)
        return out
    flat = out.reshape(-1, shape[-1])
    fidx = np.broadcast_to(idx, adj.shape).reshape(-1, adj.shape[-1])
    fadj = adj.reshape(-1, adj.shape[-1])
    rows = np.arange(flat.shape[0])[:, None]
    np.add.at(flat, (rows, fidx), fadj)
    return out
