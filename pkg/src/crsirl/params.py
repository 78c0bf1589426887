"""Flat named parameter vectors.

Gradients throughout the package are flat float64 vectors, so parameters
are stored the same way and exposed as named, reshaped views.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from crsirl.errors import InvalidArgument


@dataclass(frozen=True)
class Layout:
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return sum(prod(s) for s in self.shapes)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for name, shape in zip(self.names, self.shapes):
            n = prod(shape)
            out[name] = (start, start + n)
            start += n
        return out

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise InvalidArgument(f"expected flat vector of length {self.size}, got shape {flat.shape}")
        return {
            name: flat[a:b].reshape(shape)
            for (name, (a, b)), shape in zip(self.offsets().items(), self.shapes)
        }


class FlatParams:
    """Parameter collection backed by one contiguous float64 vector."""

    layout: Layout

    def __init__(self, layout: Layout, flat: np.ndarray | None = None):
        self.layout = layout
        if flat is None:
            flat = np.zeros(layout.size)
        flat = np.array(flat, dtype=np.float64)
        if flat.shape != (layout.size,):
            raise InvalidArgument(f"expected {layout.size} parameters, got shape {flat.shape}")
        if not np.all(np.isfinite(flat)):
            raise InvalidArgument("parameters must be finite")
        self.flat = flat
        self._views = layout.views(self.flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __len__(self) -> int:
        return self.layout.size

    def with_flat(self, flat: np.ndarray):
        """Same architecture, new values."""
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        FlatParams.__init__(new, self.layout, flat)
        return new

    def copy(self):
        return self.with_flat(self.flat.copy())

    def sections(self) -> dict[str, np.ndarray]:
        return dict(self._views)

    def __eq__(self, other) -> bool:
        return (
            type(self) is type(other)
            and self.layout == other.layout
            and np.array_equal(self.flat, other.flat)
        )

    def __repr__(self) -> str:
        shapes = ", ".join(f"{n}{s}" for n, s in zip(self.layout.names, self.layout.shapes))
        return f"{type(self).__name__}({shapes})"
