"""Tape-based reverse-mode differentiation and the finite-difference oracle.

Operators record onto the active tape (a thread-local stack, entered with
`with record() as tape:`). `backward` walks the tape once in reverse,
accumulates dL/dvalue for every recorded tensor and adds the totals into
each reachable `Parameter.grad`. Gradients keep accumulating across
backward calls until the parameters are reset.

`grad_check` is the numerical oracle used throughout the test suite: it
compares the taped gradient of a scalar-valued function against central
differences, coordinate by coordinate.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Shape4, Tensor


class AutodiffError(RuntimeError):
    pass


class GradCheckNonFinite(AutodiffError):
    """Perturbed function values were NaN/Inf at the listed coordinates."""

    def __init__(self, coords):
        self.coords = list(coords)
        head = ", ".join(str(c) for c in self.coords[:8])
        more = "" if len(self.coords) <= 8 else f" (+{len(self.coords) - 8} more)"
        super().__init__(f"non-finite function value at coordinates [{head}]{more}")


class Parameter:
    """Named tensor with an accumulated gradient and a trainability flag."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, name: str, value: Tensor, trainable: bool = True):
        self.name = name
        self.value = value
        self.grad = Tensor.zeros(value.shape, dtype=value.dtype)
        self.trainable = trainable

    def zero_grad(self) -> None:
        self.grad = Tensor.zeros(self.value.shape, dtype=self.value.dtype)

    def assign(self, value: Tensor) -> None:
        if tuple(value.shape) != tuple(self.value.shape):
            raise AutodiffError(
                f"parameter {self.name}: cannot assign shape {tuple(value.shape)} "
                f"over {tuple(self.value.shape)}")
        self.value = value

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={tuple(self.value.shape)})"


class Node:
    """One recorded op: output tensor, input refs, and a backward rule.

    `backward(grad_out)` returns one gradient array (or None) per input,
    in input order.
    """

    __slots__ = ("output", "inputs", "backward", "name")

    def __init__(self, output: Tensor, inputs: Sequence, backward: Callable, name: str = ""):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward = backward
        self.name = name


class Tape:
    """Topologically ordered record of ops from one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, output: Tensor, inputs: Sequence, backward: Callable,
               name: str = "") -> None:
        self.nodes.append(Node(output, inputs, backward, name))

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


_LOCAL = threading.local()


def _stack() -> list:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


class record:
    """Context manager exposing a fresh active tape to the ops inside."""

    def __init__(self):
        self.tape = Tape()

    def __enter__(self) -> Tape:
        _stack().append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self.tape
        return False


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def value_of(x) -> Tensor:
    """The Tensor behind a Tensor or Parameter input."""
    return x.value if isinstance(x, Parameter) else x


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate dLoss back through the tape.

    Accumulates into every reachable Parameter's grad and returns a dict
    mapping id(tensor) -> gradient array for every tensor touched,
    including leaf inputs (used by grad_check).
    """
    if tuple(loss.shape) != (1, 1, 1, 1):
        raise AutodiffError(f"loss must be scalar-shaped 1x1x1x1, got {tuple(loss.shape)}")

    # Reject tapes that are not in topological order (an input produced by
    # a later node would mean a cycle or corrupted recording).
    produced_at: dict[int, int] = {}
    for k, node in enumerate(tape.nodes):
        out_id = id(node.output)
        if out_id in produced_at:
            raise AutodiffError(f"tensor produced twice on tape (node {k}, {node.name!r})")
        produced_at[out_id] = k
    for k, node in enumerate(tape.nodes):
        for inp in node.inputs:
            j = produced_at.get(id(value_of(inp)))
            if j is not None and j >= k:
                raise AutodiffError(
                    f"cycle detected: node {k} ({node.name!r}) consumes a tensor "
                    f"produced at node {j}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    params: dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        input_grads = node.backward(g_out)
        for inp, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            val = value_of(inp)
            if isinstance(inp, Parameter):
                params[id(val)] = inp
            key = id(val)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    for key, param in params.items():
        g = grads.get(key)
        if g is not None:
            param.grad = Tensor(param.grad.data + g.astype(param.grad.dtype, copy=False),
                                _checked=True)
    return grads


def default_eps(dtype) -> float:
    return 1e-3 if np.dtype(dtype) == np.float32 else 1e-5


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float | None = None,
               f_ref: Callable[[Tensor], Tensor] | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    The step for coordinate i is eps * max(1, |x_i|). Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    `f_ref`, when given, is a float64 twin of `f` built from the same
    parameter values; the finite differences are taken through it so the
    32-bit analytic gradient is measured against the true derivative
    instead of against single-precision evaluation noise.
    """
    if eps is None:
        eps = default_eps(x.dtype)
    if eps <= 0:
        raise ValueError("eps must be positive")

    with record() as t:
        y = f(x)
    if tuple(y.shape) != (1, 1, 1, 1):
        raise AutodiffError("grad_check target must return a scalar tensor")
    grads = backward(t, y)
    analytic = grads.get(id(x))
    if analytic is None:
        analytic = np.zeros(tuple(x.shape), dtype=x.dtype)
    analytic = analytic.reshape(-1).astype(np.float64)

    f_num = f_ref if f_ref is not None else f
    num_dtype = np.float64 if f_ref is not None else x.dtype
    flat = x.ravel().astype(np.float64)
    shape = x.shape
    bad_coords = []
    max_rel = 0.0
    for i in range(flat.size):
        h = eps * max(1.0, abs(float(flat[i])))
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = f_num(Tensor.from_flat(bumped, shape, dtype=num_dtype)).item()
        bumped[i] = flat[i] - h
        f_minus = f_num(Tensor.from_flat(bumped, shape, dtype=num_dtype)).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            bad_coords.append(i)
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        rel = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    if bad_coords:
        raise GradCheckNonFinite(bad_coords)
    return max_rel


def resample_away_from_kinks(rng, shape: Shape4 | tuple, margin: float,
                             kinks: Iterable[float] = (0.0,), std: float = 1.0,
                             dtype=np.float32, max_tries: int = 64) -> Tensor:
    """Gaussian sample with every coordinate at least `margin` from each kink.

    Keeps finite-difference perturbations from crossing the non-smooth
    points of the activations being checked.
    """
    shape = tuple(shape)
    vals = rng.normal(shape, 0.0, std, dtype=np.float64)
    kinks = np.asarray(list(kinks), dtype=np.float64)
    for _ in range(max_tries):
        dist = np.abs(vals[..., None] - kinks).min(axis=-1)
        mask = dist < margin
        if not mask.any():
            break
        vals = np.where(mask, rng.normal(shape, 0.0, std, dtype=np.float64), vals)
    else:
        raise RuntimeError("could not sample inputs away from kinks")
    return Tensor(vals.astype(dtype))
