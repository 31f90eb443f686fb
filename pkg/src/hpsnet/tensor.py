"""Dense 4-D tensors and a define-by-run reverse-mode tape.

Every value is an ``(n, c, h, w)`` array.  Operations executed while a
:class:`Tape` is active are appended to it together with a closure computing
their vector-Jacobian product; :meth:`Tape.backward` walks the tape in reverse.
``detach`` records a node whose gradient is blocked, which is how the
HP-Module cuts the mask-to-feature gradient.

Outside of any tape, operations only compute values (inference mode).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "hpsnet_active_tape", default=None
)

# op_kind -> fn(*arrays, **params) -> (out_array, vjp)
# vjp(grad_out, needs) -> sequence of input gradients (None where not needed)
_PRIMITIVES: dict[str, Callable] = {}


def primitive(op_kind):
    """Register a forward rule under ``op_kind``."""

    def deco(fn):
        _PRIMITIVES[op_kind] = fn
        return fn

    return deco


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_nid")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError("Tensor", arr.shape, detail="expected 4-D (n, c, h, w)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._nid = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)


@dataclass
class TapeNode:
    op_kind: str
    parent_ids: tuple
    shape: tuple
    vjp: Optional[Callable] = None  # closes over the saved values
    grad_blocked: bool = False
    needs_grad: bool = False


class Tape:
    """Append-only record of one forward pass.

    A tape is single-owner.  Separate tapes may run concurrently over shared
    read-only parameter tensors, since leaves are tracked inside the tape
    rather than on the tensors themselves.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        if self.dtype.kind != "f":
            raise ContractError(f"tape precision must be a float type, got {self.dtype}")
        self.nodes: list[TapeNode] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []
        self._token = None

    def __enter__(self):
        if self._token is not None:
            raise ContractError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def node_id(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t._nid
        return self._leaf_ids.get(id(t))

    def watch(self, t: Tensor) -> int:
        """Return the node id of ``t``, registering it as a leaf if new."""
        nid = self.node_id(t)
        if nid is not None:
            return nid
        if t.dtype != self.dtype:
            raise ContractError(
                f"tensor of dtype {t.dtype} used on a {self.dtype} tape; precision is tape-wide"
            )
        nid = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), t.shape, needs_grad=t.requires_grad))
        self._leaf_ids[id(t)] = nid
        self._leaf_refs.append(t)
        return nid

    def record(self, op_kind, inputs, out_data, vjp, grad_blocked=False) -> Tensor:
        parent_ids = tuple(self.watch(t) for t in inputs)
        needs = (not grad_blocked) and any(self.nodes[p].needs_grad for p in parent_ids)
        node = TapeNode(op_kind, parent_ids, out_data.shape, vjp, grad_blocked, needs)
        out = Tensor(out_data, requires_grad=needs)
        out._tape = self
        out._nid = len(self.nodes)
        self.nodes.append(node)
        return out

    def backward(self, loss: Tensor) -> dict:
        """Reverse sweep from a scalar ``loss``.

        Returns ``{node id: gradient array}`` for every node that received a
        contribution.  Nodes behind a detach receive nothing through it; use
        :meth:`grad` to read a gradient with zeros as the default.
        """
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"backward needs a (1, 1, 1, 1) loss, got {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {loss._nid: np.ones(loss.shape, dtype=self.dtype)}
        nodes = self.nodes
        for nid in range(loss._nid, -1, -1):
            g = grads.get(nid)
            node = nodes[nid]
            if g is None or node.vjp is None or node.grad_blocked or not node.needs_grad:
                continue
            needs = tuple(nodes[p].needs_grad for p in node.parent_ids)
            parent_grads = node.vjp(g, needs)
            for pid, pg, need in zip(node.parent_ids, parent_grads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
        return grads

    def grad(self, grads: dict, t: Tensor) -> np.ndarray:
        nid = self.node_id(t)
        if nid is not None and nid in grads:
            return grads[nid]
        return np.zeros(t.shape, dtype=self.dtype)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def forward_record(op_kind, inputs, **params) -> Tensor:
    """Run primitive ``op_kind`` on ``inputs`` and append it to the active tape."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown op_kind {op_kind!r}") from None
    for t in inputs:
        if not isinstance(t, Tensor):
            raise ContractError(f"{op_kind}: inputs must be Tensor, got {type(t).__name__}")
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ContractError(f"{op_kind}: mixed precision inputs {sorted(map(str, dtypes))}")
    out, vjp = fn(*(t.data for t in inputs), **params)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return Tensor(out)
    return tape.record(op_kind, inputs, out, vjp, grad_blocked=(op_kind == "detach"))


@primitive("detach")
def _detach(x):
    # vjp is never called: the node is grad_blocked
    return x.copy(), None


def detach(x: Tensor) -> Tensor:
    """Value-identical copy whose node blocks every gradient."""
    return forward_record("detach", [x])
