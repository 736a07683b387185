"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and which touch at least
one tensor with ``requires_grad=True``, are appended to that tape. Calling
:meth:`Tape.backward` replays the recorded adjoints in exact reverse order.
"""

from __future__ import annotations

import numpy as np

_ACTIVE: list["Tape"] = []


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __neg__(self):
        from dmeta.tensor import ops

        return ops.scale(self, -1.0)

    def __add__(self, other):
        from dmeta.tensor import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from dmeta.tensor import ops

        return ops.add(self, ops.scale(other, -1.0))

    def __mul__(self, other):
        from dmeta.tensor import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = w * 3.0
    >>> tape.backward(y)
    >>> w.grad
    array([3.], dtype=float32)
    """

    def __init__(self):
        self.nodes = []
        self.leaves = []
        self._leaf_ids = set()
        self._produced = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False

    def watch(self, *tensors):
        for t in tensors:
            t.requires_grad = True
            if id(t) not in self._leaf_ids and id(t) not in self._produced:
                self._leaf_ids.add(id(t))
                self.leaves.append(t)

    def record(self, output, inputs, backward):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self.leaves.append(t)
        self._produced.add(id(output))
        self.nodes.append((output, inputs, backward))

    def backward(self, output, seed=None):
        """Accumulate d(output)/d(leaf) into every leaf's ``grad``.

        ``seed`` is the adjoint of ``output`` (ones when omitted). The tape is
        left intact, so it may be replayed with a different seed.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        grads = {id(output): np.asarray(seed, dtype=output.data.dtype)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def active_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(data, inputs, backward):
    """Wrap ``data`` as the result of an op and record it when needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
