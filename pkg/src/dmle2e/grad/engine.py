"""Reverse-mode differentiation on a per-run tape.

The tape records the forward computation as an append-only DAG of
primitive nodes (values cached, parents by index). ``backward`` walks the
DAG once in reverse topological order accumulating vector-Jacobian
products. Everything is float64 numpy; there is no global state, so
independent tapes are safe on independent threads.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DmlError, InvalidArgumentError, NumericError


class TapeUsageError(DmlError, RuntimeError):
    """The tape was used out of protocol (double backward, stale nodes,
    duplicate parameter registration)."""


class Node:
    """One recorded primitive: cached forward value + parent links."""

    __slots__ = ("tape", "idx", "epoch", "value", "parents", "vjps", "op")

    def __init__(self, tape, idx, epoch, value, parents, vjps, op):
        self.tape = tape
        self.idx = idx
        self.epoch = epoch
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Node {self.idx} {self.op} shape={self.value.shape}>"

    # arithmetic sugar is attached by grad.ops at import time


class Tape:
    """Recording context for one forward pass and one backward pass."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._params: dict[str, Node] = {}
        self._epoch = 0
        self._backward_done = False

    def reset(self) -> None:
        """Drop all recorded nodes and parameters; prior nodes become stale."""
        self._nodes.clear()
        self._params.clear()
        self._epoch += 1
        self._backward_done = False

    # ------------------------------------------------------------------
    # recording
    # ------------------------------------------------------------------

    def record(
        self,
        value,
        parents: Sequence[Node] = (),
        vjps: Sequence[Optional[Callable]] = (),
        op: str = "",
    ) -> Node:
        value = np.asarray(value, dtype=np.float64)
        for p in parents:
            if p.tape is not self or p.epoch != self._epoch:
                raise TapeUsageError("parent node belongs to another tape or epoch")
        node = Node(self, len(self._nodes), self._epoch, value, tuple(parents), tuple(vjps), op)
        self._nodes.append(node)
        return node

    def constant(self, value, op: str = "const") -> Node:
        return self.record(value, op=op)

    def param(self, name: str, value) -> Node:
        if name in self._params:
            raise TapeUsageError(f"parameter {name!r} registered twice")
        node = self.record(value, op=f"param:{name}")
        self._params[name] = node
        return node

    @property
    def parameters(self) -> dict[str, Node]:
        return dict(self._params)

    def __len__(self) -> int:
        return len(self._nodes)

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every registered parameter.

        Unused parameters get exact zeros. Fan-out accumulates. A second
        backward on the same recording is rejected.
        """
        if loss.tape is not self or loss.epoch != self._epoch or not self._nodes:
            raise TapeUsageError("loss node does not belong to this tape recording")
        if self._backward_done:
            raise TapeUsageError("backward already ran for this recording")
        if loss.value.size != 1:
            raise InvalidArgumentError(
                f"loss must be scalar, got shape {loss.value.shape}"
            )
        self._backward_done = True

        grads: list[Optional[np.ndarray]] = [None] * len(self._nodes)
        grads[loss.idx] = np.ones_like(loss.value)
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self._nodes[i]
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient flowing into node {node!r}")
            for parent, vjp in zip(node.parents, node.vjps):
                if vjp is None:
                    continue
                contrib = vjp(g)
                if grads[parent.idx] is None:
                    grads[parent.idx] = np.zeros_like(parent.value)
                grads[parent.idx] = grads[parent.idx] + contrib

        out = {}
        for name, node in self._params.items():
            g = grads[node.idx]
            if g is not None and np.isnan(g).any():
                raise NumericError(f"NaN gradient for parameter {name!r} ({node!r})")
            out[name] = np.zeros_like(node.value) if g is None else g
        return out

    # ------------------------------------------------------------------
    # debugging
    # ------------------------------------------------------------------

    def dump(self) -> str:
        """Readable node list for debugging."""
        lines = []
        for node in self._nodes:
            parents = ",".join(str(p.idx) for p in node.parents)
            lines.append(
                f"{node.idx:5d}  {node.op:<24s} shape={node.value.shape} parents=[{parents}]"
            )
        return "\n".join(lines)
