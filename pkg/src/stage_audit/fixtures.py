"""Deterministic desk-scale fixtures: a minimal 2-bone chain, a boxy
humanoid with an 18-keypoint skeleton, and synthetic pose corpora.

The humanoid faces -z in its canonical pose (y up, left side at -x), matching
the renderer's convention that a camera placed on the -z side sees the front.
"""

from __future__ import annotations

import math

import numpy as np

from .body_model import BodyModelData, Pose
from .pose_sampling import PoseCorpus
from .skeletons import OPENPOSE18


def rotation_matrix(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    cross = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def make_toy_model() -> BodyModelData:
    """Two-bone vertical chain: 8 vertices, 2 joints, chain2 keypoints."""
    verts = np.array([
        [-0.1, 0.00, -0.02], [0.1, 0.00, 0.02],
        [-0.1, 0.45, -0.02], [0.1, 0.45, 0.02],
        [-0.1, 0.55, -0.02], [0.1, 0.55, 0.02],
        [-0.1, 1.00, -0.02], [0.1, 1.00, 0.02],
    ])
    faces = np.array([[0, 1, 2], [1, 3, 2], [4, 5, 6], [5, 7, 6]], dtype=np.int32)
    weights = np.zeros((8, 2))
    weights[:4, 0] = 1.0
    weights[4:, 1] = 1.0
    native = np.zeros((2, 8))
    native[0, 0] = native[0, 1] = 0.5  # joint at (0, 0, 0)
    native[1, 2:6] = 0.25  # joint at (0, 0.5, 0)
    return BodyModelData(
        template_vertices=verts,
        faces=faces,
        skinning_weights=weights,
        kinematic_parents=np.array([-1, 0], dtype=np.int32),
        joint_regressor_native=native,
        joint_regressor_keypoints=native.copy(),
        joint_names=("root", "tip"),
        keypoint_skeleton="chain2",
    )


def _box(center, half) -> tuple[np.ndarray, np.ndarray]:
    cx, cy, cz = center
    hx, hy, hz = half
    corners = np.array([
        [cx + (1 if i & 4 else -1) * hx,
         cy + (1 if i & 2 else -1) * hy,
         cz + (1 if i & 1 else -1) * hz]
        for i in range(8)
    ])
    tris = np.array([
        [0, 1, 3], [0, 3, 2],  # x-
        [4, 7, 5], [4, 6, 7],  # x+
        [0, 5, 1], [0, 4, 5],  # y-
        [2, 3, 7], [2, 7, 6],  # y+
        [0, 2, 6], [0, 6, 4],  # z-
        [1, 3, 7], [1, 7, 5],  # z+
    ], dtype=np.int32)
    return corners, tris


HUMANOID_JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
)

_HUMANOID_PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14], dtype=np.int32)

# (center, half extents, driving joint)
_HUMANOID_BOXES = [
    ((0.00, 1.175, 0.0), (0.16, 0.225, 0.06), 1),   # torso -> spine
    ((0.00, 1.550, 0.0), (0.08, 0.100, 0.07), 3),   # head
    ((-0.315, 1.38, 0.0), (0.135, 0.040, 0.04), 4),  # left upper arm -> shoulder
    ((0.315, 1.38, 0.0), (0.135, 0.040, 0.04), 7),   # right upper arm
    ((-0.575, 1.38, 0.0), (0.125, 0.035, 0.035), 5),  # left forearm -> elbow
    ((0.575, 1.38, 0.0), (0.125, 0.035, 0.035), 8),   # right forearm
    ((-0.10, 0.70, 0.0), (0.055, 0.200, 0.055), 10),  # left thigh -> hip
    ((0.10, 0.70, 0.0), (0.055, 0.200, 0.055), 13),   # right thigh
    ((-0.10, 0.30, 0.0), (0.050, 0.200, 0.050), 11),  # left shin -> knee
    ((0.10, 0.30, 0.0), (0.050, 0.200, 0.050), 14),   # right shin
]


def _face_row(base: int, idx: list[int], n_verts: int) -> np.ndarray:
    row = np.zeros(n_verts)
    row[[base + i for i in idx]] = 1.0 / len(idx)
    return row


def make_humanoid_model() -> BodyModelData:
    """Boxy 16-joint humanoid with an openpose18 keypoint regressor."""
    all_verts = []
    all_faces = []
    box_base = []
    offset = 0
    for center, half, _joint in _HUMANOID_BOXES:
        corners, tris = _box(center, half)
        box_base.append(offset)
        all_verts.append(corners)
        all_faces.append(tris + offset)
        offset += 8
    verts = np.concatenate(all_verts)
    faces = np.concatenate(all_faces).astype(np.int32)
    n = len(verts)

    weights = np.zeros((n, 16))
    for b, (_c, _h, joint) in enumerate(_HUMANOID_BOXES):
        weights[box_base[b]:box_base[b] + 8, joint] = 1.0

    # Native joints as vertex blends. Each joint position must be an exact
    # convex combination of template vertices.
    native = np.zeros((16, n))
    torso, head = box_base[0], box_base[1]
    lua, rua, lfa, rfa = box_base[2], box_base[3], box_base[4], box_base[5]
    lth, rth, lsh, rsh = box_base[6], box_base[7], box_base[8], box_base[9]
    # corner index bits: 4 = +x, 2 = +y, 1 = +z
    bottom = [0, 1, 4, 5]
    top = [2, 3, 6, 7]
    xneg = [0, 1, 2, 3]
    xpos = [4, 5, 6, 7]
    native[0] = _face_row(torso, bottom, n)            # pelvis (0, 0.95, 0)
    native[1] = _face_row(torso, list(range(8)), n)    # spine = torso center (0, 1.175, 0)
    native[2] = _face_row(torso, top, n)               # neck (0, 1.4, 0)
    native[3] = _face_row(head, list(range(8)), n)     # head (0, 1.55, 0)
    native[4] = _face_row(lua, xpos, n)                # left_shoulder (-0.18, 1.38, 0)
    native[5] = _face_row(lfa, xpos, n)                # left_elbow (-0.45, 1.38, 0)
    native[6] = _face_row(lfa, xneg, n)                # left_wrist (-0.7, 1.38, 0)
    native[7] = _face_row(rua, xneg, n)                # right_shoulder (0.18, 1.38, 0)
    native[8] = _face_row(rfa, xneg, n)                # right_elbow (0.45, 1.38, 0)
    native[9] = _face_row(rfa, xpos, n)                # right_wrist (0.7, 1.38, 0)
    native[10] = _face_row(lth, top, n)                # left_hip (-0.1, 0.9, 0)
    native[11] = _face_row(lsh, top, n)                # left_knee (-0.1, 0.5, 0)
    native[12] = _face_row(lsh, bottom, n)             # left_ankle (-0.1, 0.1, 0)
    native[13] = _face_row(rth, top, n)                # right_hip (0.1, 0.9, 0)
    native[14] = _face_row(rsh, top, n)                # right_knee (0.1, 0.5, 0)
    native[15] = _face_row(rsh, bottom, n)             # right_ankle (0.1, 0.1, 0)

    # 1 = +z is the back; the face at -z (front) carries bits with z=0.
    front_top_left = 2       # -x +y -z
    front_top_right = 6      # +x +y -z
    back_top_left = 3        # -x +y +z
    back_top_right = 7       # +x +y +z
    front = [0, 2, 4, 6]
    kp = np.zeros((18, n))
    names = OPENPOSE18.joint_names
    idx = {name: i for i, name in enumerate(names)}
    kp[idx["nose"]] = _face_row(head, front, n)
    kp[idx["neck"]] = native[2]
    kp[idx["right_shoulder"]] = native[7]
    kp[idx["right_elbow"]] = native[8]
    kp[idx["right_wrist"]] = native[9]
    kp[idx["left_shoulder"]] = native[4]
    kp[idx["left_elbow"]] = native[5]
    kp[idx["left_wrist"]] = native[6]
    kp[idx["right_hip"]] = native[13]
    kp[idx["right_knee"]] = native[14]
    kp[idx["right_ankle"]] = native[15]
    kp[idx["left_hip"]] = native[10]
    kp[idx["left_knee"]] = native[11]
    kp[idx["left_ankle"]] = native[12]
    kp[idx["right_eye"], head + front_top_right] = 1.0
    kp[idx["left_eye"], head + front_top_left] = 1.0
    kp[idx["right_ear"], head + back_top_right] = 1.0
    kp[idx["left_ear"], head + back_top_left] = 1.0

    return BodyModelData(
        template_vertices=verts,
        faces=faces,
        skinning_weights=weights,
        kinematic_parents=_HUMANOID_PARENTS,
        joint_regressor_native=native,
        joint_regressor_keypoints=kp,
        joint_names=HUMANOID_JOINT_NAMES,
        keypoint_skeleton="openpose18",
    )


# Joints articulated when sampling synthetic poses, with per-joint angle caps
# chosen so limbs stay mostly unoccluded and in front of the torso.
_ARTICULATED = {
    4: 0.35, 5: 0.45, 7: 0.35, 8: 0.45,   # shoulders, elbows
    10: 0.30, 11: 0.40, 13: 0.30, 14: 0.40,  # hips, knees
    1: 0.15, 2: 0.15,  # spine, neck
}


def make_humanoid_pose(rng: np.random.Generator, pose_id: str, gender: str) -> Pose:
    rotations = np.broadcast_to(np.eye(3), (16, 3, 3)).copy()
    yaw = rng.uniform(-math.pi / 4, math.pi / 4)
    rotations[0] = rotation_matrix([0, 1, 0], yaw)
    for joint, cap in _ARTICULATED.items():
        axis = rng.normal(size=3)
        angle = rng.uniform(-cap, cap)
        rotations[joint] = rotation_matrix(axis, angle)
    return Pose(
        joint_rotations=rotations,
        root_translation=np.zeros(3),
        pose_id=pose_id,
        gender_label=gender,
    )


def make_humanoid_corpus(n: int, seed: int = 7, source_tag: str = "synthetic-humanoid") -> PoseCorpus:
    rng = np.random.default_rng(seed)
    poses = [
        make_humanoid_pose(rng, f"pose{i:04d}", "male" if i % 2 == 0 else "female")
        for i in range(n)
    ]
    return PoseCorpus(poses=tuple(poses), source_tag=source_tag)


def make_toy_pose(angle_rad: float, pose_id: str = "toy", yaw_rad: float = 0.0) -> Pose:
    rotations = np.broadcast_to(np.eye(3), (2, 3, 3)).copy()
    rotations[0] = rotation_matrix([0, 1, 0], yaw_rad)
    rotations[1] = rotation_matrix([1, 0, 0], angle_rad)
    return Pose(joint_rotations=rotations, root_translation=np.zeros(3), pose_id=pose_id)
