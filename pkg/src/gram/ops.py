"""Node operation palette."""

from __future__ import annotations

import math
from dataclasses import dataclass

KERNELS = {"conv1x1": 1, "conv3x3": 3}


@dataclass(frozen=True, order=True)
class NodeOp:
    """Convolution assigned to a DAG node: stride 1, SAME padding, then BN and ELU."""

    kind: str
    filters: int

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown node op kind {self.kind!r}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")

    @property
    def kernel(self) -> int:
        return KERNELS[self.kind]

    @property
    def label(self) -> str:
        return f"{self.kind}/{self.filters}"

    @classmethod
    def parse(cls, label: str) -> "NodeOp":
        kind, _, filters = label.partition("/")
        try:
            return cls(kind, int(filters))
        except ValueError as exc:
            raise ValueError(f"bad node op label {label!r}") from exc

    def scaled(self, factor: float) -> "NodeOp":
        # half-up rounding, floor 1
        return NodeOp(self.kind, max(1, math.floor(self.filters * factor + 0.5)))


DEFAULT_PALETTE = (
    NodeOp("conv1x1", 32),
    NodeOp("conv1x1", 64),
    NodeOp("conv1x1", 128),
    NodeOp("conv3x3", 32),
    NodeOp("conv3x3", 64),
)
