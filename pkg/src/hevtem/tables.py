"""Lookup tables with linear / bilinear interpolation.

These sit on the plant's hot path (the fine-step integrator evaluates them
hundreds of thousands of times), so they are plain-Python over lists rather
than numpy: scalar lookups through numpy cost ~10x more. Queries outside the
grid are clamped to the edge and a warning is logged once per table.
"""

from __future__ import annotations

import bisect
import logging

from .errors import ConfigError

log = logging.getLogger(__name__)


def _check_axis(name: str, xs) -> list[float]:
    xs = [float(x) for x in xs]
    if len(xs) < 2:
        raise ConfigError(f"{name}: axis needs at least 2 breakpoints")
    if any(b <= a for a, b in zip(xs, xs[1:])):
        raise ConfigError(f"{name}: axis breakpoints must be strictly increasing")
    return xs


class Table1D:
    """Piecewise-linear y(x) with edge clamping."""

    __slots__ = ("name", "xs", "ys", "_n", "_warned")

    def __init__(self, xs, ys, name: str = "table1d"):
        self.name = name
        self.xs = _check_axis(name, xs)
        self.ys = [float(y) for y in ys]
        if len(self.ys) != len(self.xs):
            raise ConfigError(f"{name}: {len(self.xs)} breakpoints vs {len(self.ys)} values")
        self._n = len(self.xs)
        self._warned = False

    def _clamp_warn(self, x: float) -> None:
        if not self._warned:
            self._warned = True
            log.warning("%s: query %.6g outside grid [%g, %g]; clamping "
                        "(warning logged once per table)",
                        self.name, x, self.xs[0], self.xs[-1])

    def __call__(self, x: float) -> float:
        xs = self.xs
        if x <= xs[0]:
            if x < xs[0]:
                self._clamp_warn(x)
            return self.ys[0]
        if x >= xs[-1]:
            if x > xs[-1]:
                self._clamp_warn(x)
            return self.ys[-1]
        i = bisect.bisect_right(xs, x) - 1
        t = (x - xs[i]) / (xs[i + 1] - xs[i])
        return self.ys[i] + t * (self.ys[i + 1] - self.ys[i])


class Table2D:
    """Bilinear z(x, y) on a rectangular grid with edge clamping.

    ``values[i][j]`` corresponds to ``(xs[i], ys[j])``.
    """

    __slots__ = ("name", "xs", "ys", "values", "_warned")

    def __init__(self, xs, ys, values, name: str = "table2d"):
        self.name = name
        self.xs = _check_axis(name, xs)
        self.ys = _check_axis(name, ys)
        self.values = [[float(v) for v in row] for row in values]
        if len(self.values) != len(self.xs):
            raise ConfigError(f"{name}: {len(self.xs)} x-breakpoints vs {len(self.values)} rows")
        for row in self.values:
            if len(row) != len(self.ys):
                raise ConfigError(f"{name}: ragged value rows")
        self._warned = False

    def _clamp_warn(self, x: float, y: float) -> None:
        if not self._warned:
            self._warned = True
            log.warning("%s: query (%.6g, %.6g) outside grid; clamping "
                        "(warning logged once per table)", self.name, x, y)

    def __call__(self, x: float, y: float) -> float:
        xs, ys = self.xs, self.ys
        clamped = False
        if x < xs[0]:
            x, clamped = xs[0], True
        elif x > xs[-1]:
            x, clamped = xs[-1], True
        if y < ys[0]:
            y, clamped = ys[0], True
        elif y > ys[-1]:
            y, clamped = ys[-1], True
        if clamped:
            self._clamp_warn(x, y)
        i = bisect.bisect_right(xs, x) - 1
        if i >= len(xs) - 1:
            i = len(xs) - 2
        j = bisect.bisect_right(ys, y) - 1
        if j >= len(ys) - 1:
            j = len(ys) - 2
        tx = (x - xs[i]) / (xs[i + 1] - xs[i])
        ty = (y - ys[j]) / (ys[j + 1] - ys[j])
        v = self.values
        z00 = v[i][j]
        z01 = v[i][j + 1]
        z10 = v[i + 1][j]
        z11 = v[i + 1][j + 1]
        return (z00 * (1.0 - tx) * (1.0 - ty) + z10 * tx * (1.0 - ty)
                + z01 * (1.0 - tx) * ty + z11 * tx * ty)

    def min_over_grid(self) -> float:
        return min(min(row) for row in self.values)

    def max_over_grid(self) -> float:
        return max(max(row) for row in self.values)
