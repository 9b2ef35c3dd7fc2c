"""On-disk formats (KITTI velodyne/label/calib, disparity, score files) and synthetic scenes."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .boxes import Box2D, Box3D, points_in_box_mask, project_box3d_corners_envelope, to_box_frame, wrap_angle
from .boxes import iou_bev
from .calib import Calibration, format_kitti_calib, parse_kitti_calib, project_velo_xyz, rect_to_velo_xyz, velo_to_rect_xyz
from .errors import (FullyBehindCamera, InfeasiblePlacement, MalformedFile, MalformedLine, TruncatedFile)
from .evaluation import Detection, Difficulty, GroundTruth, difficulty_of
from .pointcloud import Frame, PointCloud
from .pseudolidar import DisparityMap


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- velodyne ------------------------------------------------------------------------

def read_velodyne(path: str | os.PathLike) -> PointCloud:
    """KITTI velodyne scan: little-endian float32 (x, y, z, reflectance) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3], Frame.VELODYNE, data[:, 3])


def velodyne_bytes(cloud: PointCloud) -> bytes:
    cloud.require(Frame.VELODYNE)
    data = np.zeros((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.xyz
    if cloud.reflectance is not None:
        data[:, 3] = cloud.reflectance
    return data.tobytes()


def write_velodyne(cloud: PointCloud, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, velodyne_bytes(cloud))


# --- calibration -----------------------------------------------------------------------

def read_calib(path: str | os.PathLike, camera: int = 2) -> Calibration:
    return parse_kitti_calib(Path(path).read_text(), camera)


def write_calib(calib: Calibration, path: str | os.PathLike) -> None:
    atomic_write_text(path, format_kitti_calib(calib))


# --- float32 arrays --------------------------------------------------------------------

def read_scores(path: str | os.PathLike) -> np.ndarray:
    """Per-point foreground probabilities, one little-endian float32 per point."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_scores(scores, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, np.asarray(scores, dtype="<f4").tobytes())


_F32_MAGIC = b"DSP1"


def read_disparity(path: str | os.PathLike) -> DisparityMap:
    """Disparity from a 16-bit PNG (value / 256, 0 invalid) or a headered ``.f32`` grid.

    The ``.f32`` layout is the magic ``DSP1``, uint32 width, uint32 height (all
    little-endian), then width*height float32 values in row-major order.
    """
    path = Path(path)
    if path.suffix == ".f32":
        raw = path.read_bytes()
        if len(raw) < 12:
            raise TruncatedFile(f"{path}: header incomplete")
        if raw[:4] != _F32_MAGIC:
            raise MalformedFile(f"{path}: bad magic {raw[:4]!r}")
        width, height = struct.unpack("<II", raw[4:12])
        if len(raw) != 12 + 4 * width * height:
            raise TruncatedFile(f"{path}: expected {width}x{height} floats")
        values = np.frombuffer(raw[12:], dtype="<f4").reshape(height, width).astype(np.float64)
        return DisparityMap(values)
    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except OSError as exc:
        raise MalformedFile(f"{path}: {exc}") from None
    if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise MalformedFile(f"{path}: expected a single-channel 16-bit PNG, got {arr.dtype} {arr.shape}")
    return DisparityMap(arr.astype(np.float64) / 256.0)


def write_disparity(disp: DisparityMap, path: str | os.PathLike) -> None:
    path = Path(path)
    if path.suffix == ".f32":
        header = _F32_MAGIC + struct.pack("<II", disp.width, disp.height)
        atomic_write_bytes(path, header + disp.values.astype("<f4").tobytes())
        return
    quantized = np.clip(np.round(disp.values * 256.0), 0, 65535).astype(np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}.png")
    Image.fromarray(quantized).save(tmp, format="PNG")
    os.replace(tmp, path)


# --- labels -------------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelRecord:
    """One KITTI label (or detection result) line.

    ``location`` is the bottom-face centre in rectified camera coordinates and
    ``dimensions`` is (h, w, l), both as in the text format.
    """

    type: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float
    score: Optional[float] = None

    @property
    def box2d(self) -> Box2D:
        return Box2D.from_corners(*self.bbox)

    @property
    def difficulty(self) -> Difficulty:
        if self.type == "DontCare":
            return Difficulty.IGNORED
        return difficulty_of(self.bbox[3] - self.bbox[1], self.occlusion, self.truncation)

    def box3d(self, calib: Calibration) -> Box3D:
        return label_to_box3d(self, calib)

    def format(self) -> str:
        vals = [self.type, _fmt(self.truncation), str(int(self.occlusion)), _fmt(self.alpha),
                *(_fmt(v) for v in self.bbox), *(_fmt(v) for v in self.dimensions),
                *(_fmt(v) for v in self.location), _fmt(self.rotation_y)]
        if self.score is not None:
            vals.append(_fmt(self.score))
        return " ".join(vals)


def _fmt(x: float) -> str:
    return repr(float(x))


def _down_rect(calib: Calibration) -> np.ndarray:
    return calib.velo_to_rect_rotation @ np.array([0.0, 0.0, -1.0])


def label_to_box3d(record: LabelRecord, calib: Calibration) -> Box3D:
    """Convert a camera-frame label into a velodyne-frame Box3D.

    The bottom-centre location is lifted by h/2 along the velodyne vertical, and
    the yaw is the velodyne heading whose rectified-frame image has camera yaw
    ``rotation_y`` (exact inverse of :func:`box3d_to_label_fields`).
    """
    h, w, l = record.dimensions
    center_rect = np.asarray(record.location, dtype=np.float64) - 0.5 * h * _down_rect(calib)
    center = rect_to_velo_xyz(calib, center_rect[None])[0]
    r = calib.velo_to_rect_rotation
    ry = record.rotation_y
    n = r.T @ np.array([math.sin(ry), 0.0, math.cos(ry)])
    theta = math.atan2(n[0], -n[1])
    heading = r @ np.array([math.cos(theta), math.sin(theta), 0.0])
    if heading[0] * math.cos(ry) - heading[2] * math.sin(ry) < 0:
        theta += math.pi
    return Box3D(center[0], center[1], center[2], l, w, h, theta)


def box3d_to_label_fields(box: Box3D, calib: Calibration) -> tuple[tuple, tuple, float, float]:
    """(dimensions (h, w, l), bottom-centre location, rotation_y, alpha) in the camera frame."""
    center_rect = velo_to_rect_xyz(calib, box.center[None])[0]
    loc = center_rect + 0.5 * box.h * _down_rect(calib)
    heading = calib.velo_to_rect_rotation @ np.array([math.cos(box.theta), math.sin(box.theta), 0.0])
    ry = math.atan2(-heading[2], heading[0])
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    return (box.h, box.w, box.l), tuple(float(v) for v in loc), ry, alpha


def parse_label_line(line: str, lineno: int = 0) -> LabelRecord:
    toks = line.split()
    if len(toks) not in (15, 16):
        raise MalformedLine(f"line {lineno}: expected 15 or 16 fields, got {len(toks)}")
    try:
        nums = [float(t) for t in toks[1:]]
    except ValueError as exc:
        raise MalformedLine(f"line {lineno}: {exc}") from None
    return LabelRecord(
        type=toks[0], truncation=nums[0], occlusion=int(nums[1]), alpha=nums[2],
        bbox=tuple(nums[3:7]), dimensions=tuple(nums[7:10]), location=tuple(nums[10:13]),
        rotation_y=nums[13], score=nums[14] if len(nums) == 15 else None)


def read_label_records(path: str | os.PathLike) -> list[LabelRecord]:
    text = Path(path).read_text()
    return [parse_label_line(line, i) for i, line in enumerate(text.splitlines(), 1) if line.strip()]


def write_label_records(records: Sequence[LabelRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, "".join(r.format() + "\n" for r in records))


# classes evaluated as "don't care" for a target class rather than dropped
NEIGHBOR_CLASSES = {"Car": ("Van",), "Pedestrian": ("Person_sitting",)}


def records_to_ground_truth(records: Sequence[LabelRecord], calib: Calibration, frame_id="",
                            mode: str = "3d", class_name: str = "Car") -> list[GroundTruth]:
    out = []
    neighbors = NEIGHBOR_CLASSES.get(class_name, ())
    for r in records:
        if r.type == class_name:
            difficulty = r.difficulty
        elif r.type == "DontCare" or r.type in neighbors:
            difficulty = Difficulty.IGNORED
        else:
            continue
        if mode == "2d":
            x1, y1, x2, y2 = r.bbox
            if not (x2 > x1 and y2 > y1):
                continue
            box = r.box2d
        elif r.type == "DontCare":
            continue  # DontCare regions carry no 3D box
        else:
            box = label_to_box3d(r, calib)
        out.append(GroundTruth(box, difficulty, frame_id))
    return out


def read_labels(path, calib: Calibration, frame_id="", mode: str = "3d", class_name: str = "Car") -> list[GroundTruth]:
    return records_to_ground_truth(read_label_records(path), calib, frame_id, mode, class_name)


def read_detections(path, calib: Calibration, frame_id="", mode: str = "3d", class_name: str = "Car") -> list[Detection]:
    """Detections in KITTI result format (label line plus a trailing score)."""
    out = []
    for r in read_label_records(path):
        if r.type != class_name:
            continue
        if r.score is None:
            raise MalformedLine(f"{path}: detection line without score")
        box = r.box2d if mode == "2d" else label_to_box3d(r, calib)
        out.append(Detection(box, min(max(r.score, 0.0), 1.0), frame_id))
    return out


def box3d_to_record(box: Box3D, calib: Calibration, type_: str = "Car", score: Optional[float] = None,
                    bbox: Optional[tuple] = None, truncation: float = 0.0, occlusion: int = 0,
                    image_size: Optional[tuple[int, int]] = None) -> LabelRecord:
    dims, loc, ry, alpha = box3d_to_label_fields(box, calib)
    if bbox is None:
        try:
            bbox = tuple(float(v) for v in project_box3d_corners_envelope(calib, box, image_size))
        except FullyBehindCamera:
            bbox = (0.0, 0.0, 0.0, 0.0)
    return LabelRecord(type_, truncation, occlusion, alpha, bbox, dims, loc, ry, score)


# --- frame bundles -----------------------------------------------------------------------

@dataclass(frozen=True)
class FrameBundle:
    cloud: PointCloud
    calib: Calibration
    labels: list[LabelRecord]
    disparity: Optional[DisparityMap] = None
    point_scores: Optional[np.ndarray] = None
    image_size: tuple[int, int] = (1242, 375)

    def __post_init__(self):
        if self.point_scores is not None and len(self.point_scores) != len(self.cloud):
            raise ValueError(f"{len(self.point_scores)} scores for {len(self.cloud)} points")

    def ground_truths(self, frame_id="", mode: str = "3d", class_name: str = "Car") -> list[GroundTruth]:
        return records_to_ground_truth(self.labels, self.calib, frame_id, mode, class_name)

    @property
    def boxes(self) -> list[Box3D]:
        return [r.box3d(self.calib) for r in self.labels if r.type != "DontCare"]


FRAME_LAYOUT = {
    "velodyne": ("velodyne", ".bin"),
    "calib": ("calib", ".txt"),
    "labels": ("label_2", ".txt"),
    "disparity": ("disparity", ".png"),
    "scores": ("scores", ".f32"),
}


def frame_path(root, kind: str, frame_id: str, suffix: Optional[str] = None) -> Path:
    sub, ext = FRAME_LAYOUT[kind]
    return Path(root) / sub / f"{frame_id}{suffix or ext}"


def list_frames(root) -> list[str]:
    velo = Path(root) / FRAME_LAYOUT["velodyne"][0]
    if not velo.is_dir():
        return []
    return sorted(p.stem for p in velo.glob("*.bin"))


def write_frame(bundle: FrameBundle, root, frame_id: str, disparity_suffix: str = ".png") -> None:
    write_velodyne(bundle.cloud, frame_path(root, "velodyne", frame_id))
    write_calib(bundle.calib, frame_path(root, "calib", frame_id))
    write_label_records(bundle.labels, frame_path(root, "labels", frame_id))
    if bundle.disparity is not None:
        write_disparity(bundle.disparity, frame_path(root, "disparity", frame_id, disparity_suffix))
    if bundle.point_scores is not None:
        write_scores(bundle.point_scores, frame_path(root, "scores", frame_id))


def load_frame(root, frame_id: str, camera: int = 2, need=("velodyne", "calib")) -> FrameBundle:
    """Load whatever exists of a frame; files named in ``need`` must be present."""
    for kind in need:
        if kind == "disparity":
            if not any(frame_path(root, kind, frame_id, s).exists() for s in (".png", ".f32")):
                raise FileNotFoundError(frame_path(root, kind, frame_id))
        elif not frame_path(root, kind, frame_id).exists():
            raise FileNotFoundError(frame_path(root, kind, frame_id))
    cloud = read_velodyne(frame_path(root, "velodyne", frame_id))
    calib = read_calib(frame_path(root, "calib", frame_id), camera)
    label_file = frame_path(root, "labels", frame_id)
    labels = read_label_records(label_file) if label_file.exists() else []
    disparity = None
    for suffix in (".png", ".f32"):
        p = frame_path(root, "disparity", frame_id, suffix)
        if p.exists():
            disparity = read_disparity(p)
            break
    score_file = frame_path(root, "scores", frame_id)
    scores = read_scores(score_file) if score_file.exists() else None
    if scores is not None and len(scores) != len(cloud):
        raise MalformedFile(f"{score_file}: {len(scores)} scores for {len(cloud)} points")
    size = (disparity.width, disparity.height) if disparity is not None else (1242, 375)
    return FrameBundle(cloud, calib, labels, disparity, scores, size)


# --- synthetic scenes ----------------------------------------------------------------------

GROUND_Z = -1.73


def default_calibration() -> Calibration:
    """KITTI-like left colour camera with an exact axis-permutation LiDAR mount."""
    return Calibration(
        f_u=721.5377, f_v=721.5377, c_u=609.5593, c_v=172.854, b_x=-0.06217,
        rect_rotation=np.eye(3),
        velo_to_cam_rotation=np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
        velo_to_cam_translation=np.array([0.0, -0.08, -0.27]),
        stereo_baseline=0.54, camera=2)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_boxes: int = 5
    depth_range: tuple[float, float] = (6.0, 45.0)
    surface_density: float = 40.0      # LiDAR points per square metre of visible box face
    clutter_points: int = 3000
    disparity_noise: float = 0.0       # std of additive disparity noise (px)
    image_size: tuple[int, int] = (1242, 375)
    calib: Calibration = field(default_factory=default_calibration)
    max_attempts: int = 500

    def __post_init__(self):
        if self.num_boxes < 0 or self.clutter_points < 0:
            raise ValueError("counts must be non-negative")
        if self.surface_density <= 0:
            raise ValueError("surface_density must be positive")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth_range must be increasing and positive")


def _place_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    boxes: list[Box3D] = []
    for _ in range(spec.num_boxes):
        for _attempt in range(spec.max_attempts):
            x = rng.uniform(*spec.depth_range)
            y = rng.uniform(-0.55, 0.55) * x
            l, w, h = rng.uniform(3.5, 4.5), rng.uniform(1.5, 1.8), rng.uniform(1.4, 1.7)
            cand = Box3D(x, y, GROUND_Z + h / 2, l, w, h, rng.uniform(-math.pi, math.pi))
            if abs(y) > 39.0 or x + l > 69.0:
                continue
            grown = Box3D(cand.x, cand.y, cand.z, cand.l + 1.0, cand.w + 1.0, cand.h, cand.theta)
            if all(iou_bev(grown, b) == 0.0 for b in boxes):
                boxes.append(cand)
                break
        else:
            raise InfeasiblePlacement(f"could not place box {len(boxes) + 1} of {spec.num_boxes}")
    return boxes


INSET = 1e-4  # surface samples sit this far inside their face


def _face_points(box: Box3D, rng: np.random.Generator, density: float, eye: np.ndarray) -> np.ndarray:
    half = np.array([box.l, box.w, box.h]) / 2
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    eye_local = rot.T @ (eye - box.center)
    chunks = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            if axis == 2 and sign < 0:
                continue  # bottom face sits on the ground
            if sign * (eye_local[axis] - sign * half[axis]) <= 0:
                continue  # face points away from the sensor
            other = [a for a in range(3) if a != axis]
            area = 4 * half[other[0]] * half[other[1]]
            n = int(round(density * area))
            local = np.empty((n, 3))
            local[:, axis] = sign * (half[axis] - INSET)
            for a in other:
                local[:, a] = rng.uniform(-half[a] + INSET, half[a] - INSET, n)
            chunks.append(local @ rot.T + box.center)
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def render_depth(calib: Calibration, boxes: Sequence[Box3D], image_size: tuple[int, int]):
    """Ray-cast box surfaces into a per-pixel rectified depth map.

    Returns (depth (H, W) with inf where nothing is hit, hit box index or -1,
    per-box count of pixels hit when ignoring the other boxes).
    """
    width, height = image_size
    vv, uu = np.mgrid[0:height, 0:width].astype(np.float64)
    d_rect = np.stack([(uu - calib.c_u) / calib.f_u, (vv - calib.c_v) / calib.f_v, np.ones_like(uu)], -1).reshape(-1, 3)
    origin = rect_to_velo_xyz(calib, np.array([[calib.b_x, 0.0, 0.0]]))[0]
    d_velo = d_rect @ calib.velo_to_rect_rotation
    depth = np.full(d_velo.shape[0], np.inf)
    hit = np.full(d_velo.shape[0], -1, dtype=np.int64)
    alone = []
    for i, box in enumerate(boxes):
        c, s = math.cos(box.theta), math.sin(box.theta)
        o = to_box_frame(box, origin[None])[0]
        d = np.stack([c * d_velo[:, 0] + s * d_velo[:, 1], -s * d_velo[:, 0] + c * d_velo[:, 1], d_velo[:, 2]], -1)
        half = np.array([box.l, box.w, box.h]) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (t_near <= t_far) & (t_near > 0)
        alone.append(int(ok.sum()))
        closer = ok & (t_near < depth)
        depth[closer] = t_near[closer]
        hit[closer] = i
    return depth.reshape(height, width), hit.reshape(height, width), alone


def synth_scene(spec: SceneSpec) -> FrameBundle:
    """Deterministic synthetic frame: car-sized boxes on a ground plane, LiDAR
    returns on sensor-facing box faces plus road clutter, an ideal (optionally
    noisy) disparity map rendered from the boxes, and perfect per-point scores."""
    rng = np.random.default_rng(spec.seed)
    calib = spec.calib
    boxes = _place_boxes(spec, rng)
    depth, hit, alone = render_depth(calib, boxes, spec.image_size)

    eye = np.zeros(3)
    surface = [_face_points(b, rng, spec.surface_density, eye) for b in boxes]
    surface = np.concatenate(surface) if surface else np.zeros((0, 3))
    if len(surface):
        # drop returns the camera cannot see because another box is in front
        proj = project_velo_xyz(calib, surface)
        width, height = spec.image_size
        ui, vi = np.round(proj.u).astype(np.int64), np.round(proj.v).astype(np.int64)
        inside = (proj.depth > 0) & (ui >= 0) & (ui < width) & (vi >= 0) & (vi < height)
        occluded = np.zeros(len(surface), dtype=bool)
        occluded[inside] = depth[vi[inside], ui[inside]] < proj.depth[inside] - 0.05
        surface = surface[~occluded]

    clutter = np.stack([rng.uniform(0.0, 70.0, spec.clutter_points),
                        rng.uniform(-40.0, 40.0, spec.clutter_points),
                        GROUND_Z + rng.normal(0.0, 0.02, spec.clutter_points)], -1)
    if boxes:
        in_any = np.zeros(len(clutter), dtype=bool)
        for b in boxes:
            in_any |= points_in_box_mask(b, clutter, margin=0.05)
        clutter = clutter[~in_any]

    xyz = np.concatenate([surface, clutter])
    refl = rng.uniform(0.0, 1.0, len(xyz))
    scores = np.concatenate([np.ones(len(surface)), np.zeros(len(clutter))])
    cloud = PointCloud(xyz, Frame.VELODYNE, refl)

    disp = np.zeros_like(depth)
    valid = np.isfinite(depth)
    disp[valid] = calib.f_u * calib.stereo_baseline / depth[valid]
    if spec.disparity_noise > 0:
        disp[valid] += rng.normal(0.0, spec.disparity_noise, int(valid.sum()))
        disp = np.clip(disp, 0.0, None)

    labels = []
    for i, box in enumerate(boxes):
        try:
            full = project_box3d_corners_envelope(calib, box)
            clipped = project_box3d_corners_envelope(calib, box, spec.image_size)
        except FullyBehindCamera:
            continue
        full_area = (full[2] - full[0]) * (full[3] - full[1])
        clip_area = max(clipped[2] - clipped[0], 0.0) * max(clipped[3] - clipped[1], 0.0)
        truncation = float(np.clip(1.0 - clip_area / full_area, 0.0, 1.0))
        visible = int((hit == i).sum()) / alone[i] if alone[i] else 0.0
        occlusion = 0 if visible > 0.95 else (1 if visible > 0.6 else 2)
        bbox = tuple(float(v) for v in clipped)
        if clip_area <= 0:
            bbox = (0.0, 0.0, 0.0, 0.0)
            truncation = 1.0
        labels.append(box3d_to_record(box, calib, "Car", bbox=bbox, truncation=truncation, occlusion=occlusion))
    return FrameBundle(cloud, calib, labels, DisparityMap(disp), scores, spec.image_size)
