"""Reverse-mode automatic differentiation on an explicit tape.

The model code builds values out of Tensor objects and the ops in
mosld.ops. While a Tape is active (used as a context manager), each op
appends a record holding its input tensors, its output tensor, and a
closure that maps the output gradient to input gradients. backward()
replays the records in exact reverse execution order and sums gradients
for tensors that feed more than one op.

Frozen parameters are plain Tensors with requires_grad=False: ops treat
them as constants, no record mentions them as differentiable, and
backward() never produces a gradient for them.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, require

__all__ = ["Tensor", "Tape", "Gradients", "parameter", "constant",
           "active_tape"]


class Tensor:
    """A float64 array node in the computation graph.

    value is treated as immutable once constructed; the optimizer builds a
    replacement Tensor instead of writing in place, so tape closures can
    safely capture values by reference.
    """

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False,
                 name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor{tag}(shape={self.shape}{grad})"


def parameter(value, name: Optional[str] = None) -> Tensor:
    """Trainable leaf: gradients are accumulated for it."""
    return Tensor(value, requires_grad=True, name=name)


def constant(value, name: Optional[str] = None) -> Tensor:
    """Non-trainable leaf: treated as a constant by backward()."""
    return Tensor(value, requires_grad=False, name=name)


class _Record:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 vjp: Callable[[np.ndarray], tuple]):
        self.inputs = tuple(inputs)
        self.output = output
        self.vjp = vjp


# Module-level stack of active tapes. Ops record onto the innermost one.
_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Gradients:
    """Result of Tape.backward: gradient arrays keyed by Tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray],
                 tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        return self._grads.get(id(t))

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        if g is None:
            raise KeyError(f"no gradient recorded for {t!r}")
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


class Tape:
    """Ordered record of differentiable ops executed under this tape."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               vjp: Callable[[np.ndarray], tuple]) -> None:
        self._records.append(_Record(inputs, output, vjp))

    def backward(self, root: Tensor) -> Gradients:
        """Gradients of scalar root w.r.t. every requires_grad tensor
        reachable backward along the tape.

        Records are visited strictly in reverse execution order. A record
        whose output carries no gradient (its subtree does not reach root)
        is skipped. Gradients for a tensor consumed by several ops sum.
        """
        require(root.value.ndim == 0 or root.value.size == 1, ConfigError,
                f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.value)
        }
        tensors: dict[int, Tensor] = {id(root): root}
        for rec in reversed(self._records):
            gout = grads.get(id(rec.output))
            if gout is None:
                continue
            gins = rec.vjp(gout)
            for t, gt in zip(rec.inputs, gins):
                if gt is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gt
                else:
                    grads[key] = gt
                    tensors[key] = t
        return Gradients(grads, tensors)
