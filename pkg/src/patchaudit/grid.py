"""Patch grid geometry shared by the proxy heatmap and the insertion harness.

A model with receptive field r and output stride s maps an H x W image to a
grid of floor((H - r) / s) + 1 by floor((W - r) / s) + 1 cells; cell (i, j)
covers exactly the pixel window [i*s, i*s + r) x [j*s, j*s + r).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


def grid_shape(height: int, width: int, receptive_field: int, stride: int) -> tuple[int, int]:
    if receptive_field > height or receptive_field > width:
        raise ValidationError(
            f"receptive field {receptive_field} exceeds image size {height}x{width}"
        )
    return (
        (height - receptive_field) // stride + 1,
        (width - receptive_field) // stride + 1,
    )


@dataclass(frozen=True)
class GridGeometry:
    """Receptive-field grid over a fixed image size."""

    receptive_field: int
    stride: int
    height: int
    width: int

    def __post_init__(self):
        grid_shape(self.height, self.width, self.receptive_field, self.stride)

    @property
    def shape(self) -> tuple[int, int]:
        return grid_shape(self.height, self.width, self.receptive_field, self.stride)

    @property
    def n_cells(self) -> int:
        gh, gw = self.shape
        return gh * gw

    def cell_window(self, row: int, col: int) -> tuple[int, int, int, int]:
        """(top, left, height, width) pixel window of a grid cell."""
        gh, gw = self.shape
        if not (0 <= row < gh and 0 <= col < gw):
            raise ValidationError(f"cell ({row}, {col}) outside {gh}x{gw} grid")
        r, s = self.receptive_field, self.stride
        return (row * s, col * s, r, r)

    def positions(self) -> list[tuple[int, int]]:
        """All grid cells in row-major order."""
        gh, gw = self.shape
        return [(i, j) for i in range(gh) for j in range(gw)]

    def to_dict(self) -> dict:
        return {
            "receptive_field": self.receptive_field,
            "stride": self.stride,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridGeometry":
        return cls(
            receptive_field=int(d["receptive_field"]),
            stride=int(d["stride"]),
            height=int(d["height"]),
            width=int(d["width"]),
        )
