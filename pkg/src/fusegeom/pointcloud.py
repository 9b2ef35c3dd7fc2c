from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FrameMismatch


class Frame(str, enum.Enum):
    VELODYNE = "velodyne"
    RECT = "rect"


@dataclass(frozen=True)
class PointCloud:
    """An (N, 3) array of points tagged with the frame they live in.

    Arrays are copied to float64 and frozen on construction, so a cloud can be
    shared between threads without defensive copies.
    """

    xyz: np.ndarray
    frame: Frame = Frame.VELODYNE
    reflectance: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        xyz.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "frame", Frame(self.frame))
        if self.reflectance is not None:
            refl = np.array(self.reflectance, dtype=np.float64).reshape(-1)
            if refl.shape[0] != xyz.shape[0]:
                raise ValueError(
                    f"reflectance has {refl.shape[0]} entries for {xyz.shape[0]} points")
            refl.setflags(write=False)
            object.__setattr__(self, "reflectance", refl)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def subset(self, index) -> "PointCloud":
        refl = None if self.reflectance is None else self.reflectance[index]
        return PointCloud(self.xyz[index], self.frame, refl)

    def with_xyz(self, xyz: np.ndarray, frame: Frame | None = None) -> "PointCloud":
        return PointCloud(xyz, self.frame if frame is None else frame, self.reflectance)

    def require(self, frame: Frame) -> None:
        if self.frame != frame:
            raise FrameMismatch(f"expected a {frame.value} cloud, got {self.frame.value}")

    @staticmethod
    def concat(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        frame = clouds[0].frame
        for c in clouds:
            c.require(frame)
        xyz = np.concatenate([c.xyz for c in clouds], axis=0)
        if all(c.reflectance is None for c in clouds):
            return PointCloud(xyz, frame)
        refl = np.concatenate([
            np.zeros(len(c)) if c.reflectance is None else c.reflectance for c in clouds])
        return PointCloud(xyz, frame, refl)
