from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import DataError
from ..lie import Intrinsics, Pose
from ..motion import FlowField


@dataclass
class FrameBundle:
    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    flow_to_prev: Optional[FlowField] = None  # F^{t,t-1}
    flow_from_prev: Optional[FlowField] = None  # F^{t-1,t}
    semantic_mask: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class Dataset:
    frames: list[FrameBundle]
    intrinsics: Intrinsics
    gt_poses: Optional[list[Pose]] = None
    gt_object_masks: Optional[list[np.ndarray]] = None
    depth_scale: float = 1.0
    name: str = "sequence"
    flow_source: Optional[Callable[[int, int], Optional[FlowField]]] = None
    _flow_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.gt_poses is not None and len(self.gt_poses) != len(self.frames):
            raise DataError("ground-truth pose count differs from frame count")
        stamps = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise DataError("frame timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> list[float]:
        return [f.timestamp for f in self.frames]

    def flow(self, i: int, j: int) -> Optional[FlowField]:
        """Flow from frame ``i`` to frame ``j`` (pixels of ``i``), if available."""
        if i == j:
            h, w = self.frames[i].shape
            return FlowField.zeros(h, w)
        if j == i - 1 and self.frames[i].flow_to_prev is not None:
            return self.frames[i].flow_to_prev
        if j == i + 1 and self.frames[j].flow_from_prev is not None:
            return self.frames[j].flow_from_prev
        key = (i, j)
        if key not in self._flow_cache:
            self._flow_cache[key] = self.flow_source(i, j) if self.flow_source else None
        return self._flow_cache[key]
