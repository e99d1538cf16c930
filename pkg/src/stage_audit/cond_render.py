"""Conditioning renders: body depth map, dense semantic map, 2D skeleton map.

Conventions: image arrays are (H, W[, C]) with row = y; the pixel at integer
coordinates (ix, iy) is sampled at its center (ix + 0.5, iy + 0.5). Camera
space is p_cam = rotation @ (p_world - center), looking along +z. The
normalized focal length is in units of the image half-extent, so a point
projects to pixel ((f * x / z) + 1) / 2 * W and the analog in y.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .body_model import (
    BodyModelData,
    Mesh,
    Pose,
    ROOT_PARENT,
    canonical_semantic_colors,
    posed_joints,
    regress_joints,
    skin_mesh,
)
from .skeletons import SkeletonDef, get_skeleton

BACKGROUND_DEPTH = np.inf
_Z_NEAR = 1e-9

CHECKLIST_JOINT_NAMES = (
    "left_wrist", "right_wrist",
    "left_ankle", "right_ankle",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with normalized focal length (units of image half-extent)."""

    focal_normalized: float
    center: np.ndarray  # (3,) position, meters
    rotation: np.ndarray  # (3, 3) world-to-camera
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        if self.focal_normalized <= 0:
            raise RenderError("focal_normalized must be positive")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise RenderError("image_size must be positive")
        rot = self.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise RenderError("camera rotation must be orthonormal with det +1")

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.T

    def to_dict(self) -> dict:
        return {
            "focal_normalized": float(self.focal_normalized),
            "center": [float(v) for v in self.center],
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            focal_normalized=d["focal_normalized"],
            center=np.asarray(d["center"], dtype=np.float64),
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
        )


@dataclass
class ConditioningBundle:
    depth_map: np.ndarray  # (H, W) float, meters, background = +inf
    semantic_map: np.ndarray  # (H, W, 3) float in [0, 1], background = 0
    skeleton_map: np.ndarray  # (H, W, 3) uint8
    camera: Camera
    pose_id: str


@dataclass(frozen=True)
class RenderConfig:
    image_size: tuple[int, int] = (512, 512)
    focal_normalized: float = 4.0
    margin: float = 0.1
    orient_frontal: bool = True
    orient_grid_deg: float = 5.0
    occlusion_tol_m: float = 0.15


@dataclass(frozen=True)
class FrontalOrientation:
    pose: Pose
    angle_deg: float
    visible_count: int


def root_joint_index(model: BodyModelData) -> int:
    return int(np.flatnonzero(model.kinematic_parents == ROOT_PARENT)[0])


# ---------------------------------------------------------------------------
# Camera placement and projection


def place_camera(
    joints3d: np.ndarray,
    focal_normalized: float,
    margin: float,
    image_size: tuple[int, int],
    root_index: int = 0,
) -> Camera:
    """Identity-rotation camera whose optical axis passes through the root joint.

    The distance is the minimum d such that every joint projects inside the
    normalized image square shrunk by 1/(1 + margin).
    """
    joints3d = np.asarray(joints3d, dtype=np.float64)
    if joints3d.ndim != 2 or joints3d.shape[0] < 2:
        raise RenderError("place_camera needs at least two joints")
    if margin < 0:
        raise RenderError("margin must be nonnegative")
    root = joints3d[root_index]
    rel = joints3d - root
    if np.max(np.abs(rel)) == 0.0:
        raise RenderError("degenerate joint set: all joints coincide")
    # f * |u| / (z_rel + d) <= 1/(1+margin)  =>  d >= f*(1+margin)*|u| - z_rel
    lateral = np.abs(rel[:, :2]).max(axis=1)
    need = focal_normalized * (1.0 + margin) * lateral - rel[:, 2]
    distance = float(np.max(need))
    distance = max(distance, float(-rel[:, 2].min()) + 1e-6 if distance <= 0 else distance)
    center = root - np.array([0.0, 0.0, distance])
    return Camera(
        focal_normalized=focal_normalized,
        center=center,
        rotation=np.eye(3),
        image_size=image_size,
    )


def project_points(camera: Camera, points3d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection to pixel coordinates plus a per-point in-front flag."""
    pts = camera.world_to_cam(points3d)
    z = pts[:, 2]
    in_front = z > _Z_NEAR
    safe_z = np.where(in_front, z, 1.0)
    w, h = camera.image_size
    f = camera.focal_normalized
    px = (f * pts[:, 0] / safe_z + 1.0) / 2.0 * w
    py = (f * pts[:, 1] / safe_z + 1.0) / 2.0 * h
    pixels = np.stack([px, py], axis=1)
    pixels[~in_front] = np.nan
    return pixels, in_front


def _pixel_rays(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """Camera-space ray directions (a, b, 1) through pixel centers; z equals ray parameter."""
    w, h = camera.image_size
    f = camera.focal_normalized
    a = (2.0 * pixels[:, 0] / w - 1.0) / f
    b = (2.0 * pixels[:, 1] / h - 1.0) / f
    return np.stack([a, b, np.ones_like(a)], axis=1)


def depth_at_pixels(mesh_cam_vertices: np.ndarray, faces: np.ndarray, camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """Nearest-surface camera z along the rays through the given pixel centers.

    Exact ray-triangle intersection; equivalent to querying an ideal z-buffer
    at those pixels. Misses return +inf.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if len(pixels) == 0 or len(faces) == 0:
        return np.full(len(pixels), BACKGROUND_DEPTH)
    dirs = _pixel_rays(camera, pixels)  # (N, 3)
    tri = mesh_cam_vertices[faces]  # (F, 3, 3)
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    # Moller-Trumbore, vectorized over rays x triangles.
    p = np.cross(dirs[:, None, :], e2[None, :, :])  # (N, F, 3)
    det = np.einsum("fc,nfc->nf", e1, p)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    t_vec = -v0[None, :, :]  # ray origin is the camera at 0
    u = np.einsum("nfc,nfc->nf", t_vec, p) * inv_det
    q = np.cross(t_vec, e1[None, :, :])
    v = np.einsum("nc,nfc->nf", dirs, q) * inv_det
    t = np.einsum("fc,nfc->nf", e2, q) * inv_det
    hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > _Z_NEAR)
    t = np.where(hit, t, np.inf)
    return t.min(axis=1)


# ---------------------------------------------------------------------------
# Rasterization


def rasterize(
    mesh: Mesh,
    vertex_colors: np.ndarray | None,
    camera: Camera,
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered triangle rasterization sampled at pixel centers.

    Returns (depth_map, semantic_map). Depth is camera-space z of the nearest
    surface (+inf background); the semantic value is the perspective-correct
    barycentric blend of vertex colors (0 background). Back faces are kept.
    """
    w, h = camera.image_size
    depth = np.full((h, w), BACKGROUND_DEPTH, dtype=np.float64)
    semantic = np.zeros((h, w, 3), dtype=np.float64)
    verts = mesh.vertices
    if len(verts) == 0 or len(mesh.faces) == 0:
        return depth, semantic

    cam_pts = camera.world_to_cam(verts)
    z = cam_pts[:, 2]
    f = camera.focal_normalized
    px = (f * cam_pts[:, 0] / np.where(z > _Z_NEAR, z, 1.0) + 1.0) / 2.0 * w
    py = (f * cam_pts[:, 1] / np.where(z > _Z_NEAR, z, 1.0) + 1.0) / 2.0 * h

    colors = vertex_colors if vertex_colors is not None else np.zeros((len(verts), 3))

    for face in mesh.faces:
        i0, i1, i2 = int(face[0]), int(face[1]), int(face[2])
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 <= _Z_NEAR or z1 <= _Z_NEAR or z2 <= _Z_NEAR:
            continue  # no near-plane clipping; body fixtures stay in front
        x0, y0, x1g, y1g, x2g, y2g = px[i0], py[i0], px[i1], py[i1], px[i2], py[i2]
        area = (x1g - x0) * (y2g - y0) - (y1g - y0) * (x2g - x0)
        if area == 0.0:
            continue
        min_x = max(int(math.floor(min(x0, x1g, x2g) - 0.5)), 0)
        max_x = min(int(math.ceil(max(x0, x1g, x2g) - 0.5)), w - 1)
        min_y = max(int(math.floor(min(y0, y1g, y2g) - 0.5)), 0)
        max_y = min(int(math.ceil(max(y0, y1g, y2g) - 0.5)), h - 1)
        if min_x > max_x or min_y > max_y:
            continue
        xs = np.arange(min_x, max_x + 1) + 0.5
        ys = np.arange(min_y, max_y + 1) + 0.5
        cx, cy = np.meshgrid(xs, ys)
        w0 = (x2g - x1g) * (cy - y1g) - (y2g - y1g) * (cx - x1g)
        w1 = (x0 - x2g) * (cy - y2g) - (y0 - y2g) * (cx - x2g)
        w2 = (x1g - x0) * (cy - y0) - (y1g - y0) * (cx - x0)
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue
        l0 = w0[inside] / area
        l1 = w1[inside] / area
        l2 = w2[inside] / area
        inv_z = l0 / z0 + l1 / z1 + l2 / z2
        pix_depth = 1.0 / inv_z
        rows = cy[inside].astype(np.intp)  # centers are at integer + 0.5
        cols = cx[inside].astype(np.intp)
        closer = pix_depth < depth[rows, cols]
        if not closer.any():
            continue
        rows, cols, pix_depth = rows[closer], cols[closer], pix_depth[closer]
        depth[rows, cols] = pix_depth
        c_over_z = (
            np.outer(l0[closer] / z0, colors[i0])
            + np.outer(l1[closer] / z1, colors[i1])
            + np.outer(l2[closer] / z2, colors[i2])
        )
        semantic[rows, cols] = c_over_z * pix_depth[:, None]
    return depth, semantic


# ---------------------------------------------------------------------------
# Frontal orientation search


def _yaw_matrix(angle_deg: float, up_axis: np.ndarray) -> np.ndarray:
    axis = up_axis / np.linalg.norm(up_axis)
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    x, y, zc = axis
    cross = np.array([[0, -zc, y], [zc, 0, -x], [-y, x, 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def _signed_deg(angle: float) -> float:
    return ((angle + 180.0) % 360.0) - 180.0


def orient_body_frontal(
    pose: Pose,
    model: BodyModelData,
    camera: Camera,
    grid_step_deg: float = 5.0,
    occlusion_tol_m: float = 0.15,
    up_axis: np.ndarray = np.array([0.0, 1.0, 0.0]),
    forward_axis: np.ndarray = np.array([0.0, 0.0, -1.0]),
) -> FrontalOrientation:
    """Rotate the pose about the vertical axis through its root joint so the
    body faces the camera and checklist joints are visible.

    Searches a fixed angle grid; an angle is admissible when the pelvis
    forward axis points toward the camera within 90 degrees, and among
    admissible angles the one maximizing the visible-checklist-joint count
    wins, ties broken toward the smallest absolute rotation.  Visibility of a
    joint means it projects in-frame and a depth query at its projection does
    not show a surface more than ``occlusion_tol_m`` in front of it.
    """
    root_idx = root_joint_index(model)
    mesh = skin_mesh(model, pose)
    joints = posed_joints(model, pose)
    root_pos = joints[root_idx]

    checklist = [
        model.joint_names.index(n) for n in CHECKLIST_JOINT_NAMES if n in model.joint_names
    ]
    check_pts = joints[checklist] if checklist else np.zeros((0, 3))

    forward0 = pose.joint_rotations[root_idx] @ np.asarray(forward_axis, dtype=np.float64)
    to_cam = camera.center - root_pos

    n_angles = int(round(360.0 / grid_step_deg))
    angles = [i * grid_step_deg for i in range(n_angles)]
    results = []
    for angle in angles:
        yaw = _yaw_matrix(angle, np.asarray(up_axis, dtype=np.float64))
        frontal = float(np.dot(yaw @ forward0, to_cam)) > 0.0
        count = 0
        if len(check_pts):
            pts = root_pos + (check_pts - root_pos) @ yaw.T
            pix, in_front = project_points(camera, pts)
            w, h = camera.image_size
            in_frame = in_front & (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
            if in_frame.any():
                verts = root_pos + (mesh.vertices - root_pos) @ yaw.T
                cam_verts = camera.world_to_cam(verts)
                z_joint = camera.world_to_cam(pts[in_frame])[:, 2]
                surf = depth_at_pixels(cam_verts, model.faces, camera, pix[in_frame])
                visible = z_joint - surf <= occlusion_tol_m
                count = int(np.count_nonzero(visible))
        results.append((angle, frontal, count))

    admissible = [r for r in results if r[1]] or results
    best = min(admissible, key=lambda r: (-r[2], abs(_signed_deg(r[0])), _signed_deg(r[0])))
    angle = best[0]
    yaw = _yaw_matrix(angle, np.asarray(up_axis, dtype=np.float64))
    rotations = pose.joint_rotations.copy()
    rotations[root_idx] = yaw @ rotations[root_idx]
    adjusted = pose.replace(joint_rotations=rotations)
    return FrontalOrientation(pose=adjusted, angle_deg=_signed_deg(angle), visible_count=best[2])


# ---------------------------------------------------------------------------
# Skeleton map


def render_skeleton_map(
    joints2d: np.ndarray,
    visibility: np.ndarray,
    skeleton: SkeletonDef | str,
    image_size: tuple[int, int],
) -> np.ndarray:
    """Deterministic skeleton conditioning image.

    Every edge between visible joints is a fixed-width line in its assigned
    color, every visible joint a filled disc; widths scale from 4 px at 512.
    """
    if isinstance(skeleton, str):
        skeleton = get_skeleton(skeleton)
    joints2d = np.asarray(joints2d, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    if len(joints2d) != skeleton.num_joints:
        raise RenderError(
            f"skeleton {skeleton.name!r} expects {skeleton.num_joints} joints, got {len(joints2d)}"
        )
    w, h = image_size
    image = np.zeros((h, w, 3), dtype=np.uint8)
    scale = min(w, h) / 512.0
    half_width = max(2.0 * scale, 0.5)
    radius = max(4.0 * scale, 0.75)

    def paint(mask_rows, mask_cols, color):
        image[mask_rows, mask_cols] = color

    def draw_segment(p0, p1, color):
        lo = np.minimum(p0, p1) - half_width - 1
        hi = np.maximum(p0, p1) + half_width + 1
        x0, y0 = max(int(lo[0]), 0), max(int(lo[1]), 0)
        x1, y1 = min(int(hi[0]) + 1, w), min(int(hi[1]) + 1, h)
        if x0 >= x1 or y0 >= y1:
            return
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        cx, cy = np.meshgrid(xs, ys)
        d = p1 - p0
        len2 = float(d @ d)
        if len2 == 0.0:
            t = np.zeros_like(cx)
        else:
            t = np.clip(((cx - p0[0]) * d[0] + (cy - p0[1]) * d[1]) / len2, 0.0, 1.0)
        dist2 = (cx - (p0[0] + t * d[0])) ** 2 + (cy - (p0[1] + t * d[1])) ** 2
        mask = dist2 <= half_width ** 2
        rows, cols = np.nonzero(mask)
        paint(rows + y0, cols + x0, color)

    def draw_disc(p, color):
        x0, y0 = max(int(p[0] - radius - 1), 0), max(int(p[1] - radius - 1), 0)
        x1, y1 = min(int(p[0] + radius + 2), w), min(int(p[1] + radius + 2), h)
        if x0 >= x1 or y0 >= y1:
            return
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        cx, cy = np.meshgrid(xs, ys)
        mask = (cx - p[0]) ** 2 + (cy - p[1]) ** 2 <= radius ** 2
        rows, cols = np.nonzero(mask)
        paint(rows + y0, cols + x0, color)

    for e, (a, b) in enumerate(skeleton.edges):
        if visibility[a] and visibility[b]:
            draw_segment(joints2d[a], joints2d[b], skeleton.edge_colors[e])
    for j in range(skeleton.num_joints):
        if visibility[j]:
            draw_disc(joints2d[j], skeleton.joint_colors[j])
    return image


# ---------------------------------------------------------------------------
# Bundle assembly and serialization


def build_conditioning_bundle(
    model: BodyModelData,
    pose: Pose,
    config: RenderConfig = RenderConfig(),
) -> tuple[ConditioningBundle, dict]:
    """Render the full conditioning bundle for one pose.

    Returns the bundle plus a metadata record (camera, orientation, ground
    truth joint positions in camera frame, projected keypoints).
    """
    root_idx = root_joint_index(model)
    joints = posed_joints(model, pose)
    camera = place_camera(
        joints, config.focal_normalized, config.margin, config.image_size, root_index=root_idx
    )
    if config.orient_frontal:
        orientation = orient_body_frontal(
            pose, model, camera,
            grid_step_deg=config.orient_grid_deg,
            occlusion_tol_m=config.occlusion_tol_m,
        )
    else:
        orientation = FrontalOrientation(pose=pose, angle_deg=0.0, visible_count=-1)
    posed = orientation.pose

    mesh = skin_mesh(model, posed)
    colors = canonical_semantic_colors(model)
    depth, semantic = rasterize(mesh, colors, camera)

    kp3d = regress_joints(mesh.vertices, model.joint_regressor_keypoints)
    kp2d, in_front = project_points(camera, kp3d)
    w, h = config.image_size
    in_frame = in_front & (kp2d[:, 0] >= 0) & (kp2d[:, 0] < w) & (kp2d[:, 1] >= 0) & (kp2d[:, 1] < h)
    visibility = in_frame.copy()
    if in_frame.any():
        cam_verts = camera.world_to_cam(mesh.vertices)
        z_kp = camera.world_to_cam(kp3d[in_frame])[:, 2]
        surf = depth_at_pixels(cam_verts, model.faces, camera, kp2d[in_frame])
        visibility[in_frame] = z_kp - surf <= config.occlusion_tol_m

    skeleton_map = render_skeleton_map(kp2d if in_front.all() else np.nan_to_num(kp2d),
                                       visibility, model.keypoint_skeleton, config.image_size)
    bundle = ConditioningBundle(
        depth_map=depth,
        semantic_map=semantic,
        skeleton_map=skeleton_map,
        camera=camera,
        pose_id=pose.pose_id,
    )
    joints_cam = camera.world_to_cam(posed_joints(model, posed))
    meta = {
        "pose_id": pose.pose_id,
        "camera": camera.to_dict(),
        "orientation_deg": float(orientation.angle_deg),
        "checklist_visible": int(orientation.visible_count),
        "keypoint_skeleton": model.keypoint_skeleton,
        "keypoints2d": [[float(v) for v in p] for p in np.nan_to_num(kp2d)],
        "keypoint_visibility": [bool(v) for v in visibility],
        "joints3d_cam": [[float(v) for v in p] for p in joints_cam],
        "joint_names": list(model.joint_names),
    }
    return bundle, meta


def bundle_paths(directory: str | Path, pose_id: str) -> dict[str, Path]:
    directory = Path(directory)
    return {
        "depth": directory / f"{pose_id}.depth.png",
        "semantic": directory / f"{pose_id}.semantic.png",
        "skeleton": directory / f"{pose_id}.skeleton.png",
        "meta": directory / f"{pose_id}.meta.json",
    }


def encode_depth_png(depth_map: np.ndarray) -> np.ndarray:
    """16-bit encoding: round(depth_m * 1000), background 0."""
    mm = np.where(np.isfinite(depth_map), np.rint(depth_map * 1000.0), 0.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def decode_depth_png(arr: np.ndarray) -> np.ndarray:
    depth = arr.astype(np.float64) / 1000.0
    depth[arr == 0] = BACKGROUND_DEPTH
    return depth


def encode_semantic_png(semantic_map: np.ndarray, depth_map: np.ndarray) -> np.ndarray:
    """8-bit encoding with foreground bytes in [1, 255] so support survives
    quantization; background stays exactly 0."""
    fg = np.isfinite(depth_map)
    bytes_ = np.zeros(semantic_map.shape, dtype=np.uint8)
    scaled = 1.0 + np.clip(semantic_map[fg], 0.0, 1.0) * 254.0
    bytes_[fg] = np.rint(scaled).astype(np.uint8)
    return bytes_


def decode_semantic_png(arr: np.ndarray) -> np.ndarray:
    out = (arr.astype(np.float64) - 1.0) / 254.0
    out[arr == 0] = 0.0
    return np.clip(out, 0.0, 1.0)


def save_bundle(bundle: ConditioningBundle, meta: dict, directory: str | Path) -> dict[str, Path]:
    paths = bundle_paths(directory, bundle.pose_id)
    Path(directory).mkdir(parents=True, exist_ok=True)
    Image.fromarray(encode_depth_png(bundle.depth_map)).save(paths["depth"])
    Image.fromarray(encode_semantic_png(bundle.semantic_map, bundle.depth_map)).save(paths["semantic"])
    Image.fromarray(bundle.skeleton_map).save(paths["skeleton"])
    paths["meta"].write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return paths


def load_bundle(directory: str | Path, pose_id: str) -> tuple[ConditioningBundle, dict]:
    paths = bundle_paths(directory, pose_id)
    for key in ("depth", "semantic", "skeleton", "meta"):
        if not paths[key].is_file():
            raise FileNotFoundError(f"bundle file missing: {paths[key]}")
    depth_raw = np.asarray(Image.open(paths["depth"]))
    semantic_raw = np.asarray(Image.open(paths["semantic"]))
    skeleton = np.asarray(Image.open(paths["skeleton"]))
    meta = json.loads(paths["meta"].read_text())
    bundle = ConditioningBundle(
        depth_map=decode_depth_png(depth_raw),
        semantic_map=decode_semantic_png(semantic_raw),
        skeleton_map=skeleton,
        camera=Camera.from_dict(meta["camera"]),
        pose_id=pose_id,
    )
    return bundle, meta
