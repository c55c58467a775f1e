from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class BevBox:
    """Object footprint in the ground plane. ``length`` runs along x and
    ``width`` along y; ``yaw`` is carried along but not used for overlap."""

    class_id: int
    cx: float
    cy: float
    length: float
    width: float
    yaw: float = 0.0
    score: float | None = None

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box sizes must be positive, got {self.length} x {self.width}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BevBox":
        return cls(**d)


def bev_iou(a: BevBox, b: BevBox) -> float:
    """Axis-aligned IoU of the two footprints."""
    ix = min(a.cx + a.length / 2, b.cx + b.length / 2) - max(a.cx - a.length / 2, b.cx - b.length / 2)
    iy = min(a.cy + a.width / 2, b.cy + b.width / 2) - max(a.cy - a.width / 2, b.cy - b.width / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.length * a.width + b.length * b.width - inter
    return float(inter / union)
