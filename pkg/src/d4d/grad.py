"""Reverse-mode differentiation fabric for the engine's fixed pipelines.

There is deliberately no general expression-graph engine here. The set of
differentiable pipelines (grid encode -> MLP heads -> volume render ->
losses) is closed, so every operation ships a hand-derived adjoint and the
tape is just an ordered log of executed pipeline ops. Replaying the tape
in reverse accumulates gradients into :class:`ParamTensor` buffers.

A finite-difference harness (:func:`fd_check`) verifies any scalar loss
against its analytic gradient, per coordinate for small tensors and with
random directional probes for large ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonDeterministicLossError, UsageError


class ParamTensor:
    """A named trainable array with a gradient buffer and a freeze flag.

    Frozen tensors never accumulate gradient and are skipped by the
    optimizer, so their bytes stay identical across training steps.
    """

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def accumulate(self, g: np.ndarray) -> None:
        """Add ``g`` into the gradient buffer unless frozen."""
        if self.frozen:
            return
        if g.shape != self.grad.shape:
            raise UsageError(
                f"gradient shape {g.shape} does not match parameter "
                f"{self.name!r} of shape {self.grad.shape}"
            )
        self.grad += g

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"ParamTensor({self.name!r}, shape={self.value.shape}, frozen={self.frozen})"


class Tape:
    """Ordered record of executed pipeline ops for one optimization step.

    Forward passes append backward closures via :meth:`record`; each
    closure receives the seed gradient of the recorded scalar loss and
    scatters parameter gradients. :meth:`backward` replays the closures in
    exact reverse execution order, exactly once.
    """

    def __init__(self):
        self._ops: list[Callable[[float], None]] = []
        self._consumed = False

    def record(self, backward_fn: Callable[[float], None]) -> None:
        if self._consumed:
            raise UsageError("tape already consumed; re-record the forward pass")
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, seed: float = 1.0) -> None:
        """Run all recorded adjoints in reverse order with gradient ``seed``."""
        if self._consumed:
            raise UsageError("tape already consumed; re-record the forward pass")
        if not self._ops:
            raise UsageError("empty tape: no forward pass was recorded")
        self._consumed = True
        for op in reversed(self._ops):
            op(float(seed))


def global_grad_norm(params: Iterable[ParamTensor]) -> float:
    sq = 0.0
    for p in params:
        if not p.frozen:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(sq))


def clip_grad_norm(params: Sequence[ParamTensor], max_norm: float) -> float:
    """Scale all unfrozen gradients so their global norm is <= max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if not p.frozen:
                p.grad *= scale
    return norm


@dataclass
class ParamCheck:
    name: str
    rel_err: float
    analytic: float
    numeric: float
    mode: str  # "exact" or "probe"


@dataclass
class FDReport:
    """Outcome of a finite-difference gradient verification."""

    max_rel_err: float
    worst_param: str
    tolerance: float
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        lines = [
            f"{'PASS' if self.passed else 'FAIL'}  max_rel_err={self.max_rel_err:.3e} "
            f"tol={self.tolerance:.1e} worst={self.worst_param}"
        ]
        for c in self.checks:
            lines.append(
                f"  {c.name:<40s} {c.mode:<5s} rel_err={c.rel_err:.3e} "
                f"analytic={c.analytic:+.6e} numeric={c.numeric:+.6e}"
            )
        return "\n".join(lines)


def _rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def fd_check(
    loss_fn: Callable[[], float],
    grad_fn: Callable[[], None],
    params: Sequence[ParamTensor],
    h: float = 1e-4,
    tolerance: float = 1e-4,
    probe_threshold: int = 1000,
    n_probes: int = 8,
    rng: np.random.Generator | None = None,
) -> FDReport:
    """Verify analytic gradients against central finite differences.

    ``loss_fn`` evaluates the scalar loss at the current parameter values;
    it must be deterministic (any internal sampling under a fixed seed).
    ``grad_fn`` populates ``p.grad`` for every tensor in ``params``.
    Tensors with more than ``probe_threshold`` coordinates are checked with
    ``n_probes`` random directional derivatives instead of per-coordinate
    differences.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    l0 = float(loss_fn())
    l1 = float(loss_fn())
    if l0 != l1:
        raise NonDeterministicLossError(
            f"loss changed across repeated evaluation ({l0!r} vs {l1!r}); "
            "fix the seed before running fd_check"
        )

    for p in params:
        p.zero_grad()
    grad_fn()
    analytic = {p.name: p.grad.copy() for p in params}

    checks: list[ParamCheck] = []
    for p in params:
        g = analytic[p.name]
        flat = p.value.reshape(-1)
        if p.size <= probe_threshold:
            worst = ParamCheck(p.name, 0.0, 0.0, 0.0, "exact")
            gflat = g.reshape(-1)
            for i in range(p.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = float(loss_fn())
                flat[i] = orig - h
                lm = float(loss_fn())
                flat[i] = orig
                num = (lp - lm) / (2.0 * h)
                err = _rel_err(float(gflat[i]), num)
                if err >= worst.rel_err:
                    worst = ParamCheck(p.name, err, float(gflat[i]), num, "exact")
            checks.append(worst)
        else:
            worst = ParamCheck(p.name, 0.0, 0.0, 0.0, "probe")
            for _ in range(n_probes):
                v = rng.standard_normal(p.size)
                v /= np.linalg.norm(v)
                ana = float(np.dot(g.reshape(-1), v))
                backup = flat.copy()
                flat += h * v
                lp = float(loss_fn())
                flat[...] = backup - h * v
                lm = float(loss_fn())
                flat[...] = backup
                num = (lp - lm) / (2.0 * h)
                err = _rel_err(ana, num)
                if err >= worst.rel_err:
                    worst = ParamCheck(p.name, err, ana, num, "probe")
            checks.append(worst)

    if not checks:
        raise UsageError("fd_check needs at least one parameter tensor")
    worst_overall = max(checks, key=lambda c: c.rel_err)
    return FDReport(
        max_rel_err=worst_overall.rel_err,
        worst_param=worst_overall.name,
        tolerance=tolerance,
        checks=checks,
    )
