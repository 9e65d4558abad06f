from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np


@dataclass(frozen=True)
class ParamLayout:
    """Names and shapes of the blocks packed into a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return sum(prod(shape) for _, shape in self.entries)

    def offsets(self):
        start = 0
        for name, shape in self.entries:
            stop = start + prod(shape)
            yield name, shape, start, stop
            start = stop

    def unflatten(self, flat):
        """Split ``flat`` into named blocks. Works on arrays and on Tensors."""
        if flat.shape != (self.size,):
            raise ValueError(f"expected a flat vector of size {self.size}, got shape {flat.shape}")
        return {name: flat[a:b].reshape(shape) for name, shape, a, b in self.offsets()}

    def flatten(self, blocks) -> np.ndarray:
        missing = [name for name, _ in self.entries if name not in blocks]
        if missing:
            raise KeyError(f"missing parameter blocks: {missing}")
        parts = []
        for name, shape in self.entries:
            arr = np.asarray(blocks[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"block {name!r} has shape {arr.shape}, expected {shape}")
            parts.append(arr.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)
