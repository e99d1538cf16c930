"""Keypoint skeleton definitions: joint names, edges, and draw colors."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SkeletonDef:
    name: str
    joint_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    joint_colors: tuple[tuple[int, int, int], ...]  # RGB per joint
    edge_colors: tuple[tuple[int, int, int], ...]  # RGB per edge

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def joint_index(self, name: str) -> int:
        return self.joint_names.index(name)


_OPENPOSE18_NAMES = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
)

_OPENPOSE18_EDGES = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 15), (0, 16), (16, 17),
)

_OPENPOSE18_COLORS = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0),
    (85, 255, 0), (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255),
    (0, 170, 255), (0, 85, 255), (0, 0, 255), (85, 0, 255), (170, 0, 255),
    (255, 0, 255), (255, 0, 170), (255, 0, 85),
)

OPENPOSE18 = SkeletonDef(
    name="openpose18",
    joint_names=_OPENPOSE18_NAMES,
    edges=_OPENPOSE18_EDGES,
    joint_colors=_OPENPOSE18_COLORS,
    edge_colors=tuple(_OPENPOSE18_COLORS[:len(_OPENPOSE18_EDGES)]),
)

# Minimal two-joint chain used by the bundled toy model.
CHAIN2 = SkeletonDef(
    name="chain2",
    joint_names=("root", "tip"),
    edges=((0, 1),),
    joint_colors=((255, 0, 0), (0, 0, 255)),
    edge_colors=((0, 255, 0),),
)

_REGISTRY: dict[str, SkeletonDef] = {s.name: s for s in (OPENPOSE18, CHAIN2)}

# Keypoints compared by the 2D alignment filter (stable detector variance).
FILTER_KEYPOINT_NAMES = (
    "right_wrist", "left_wrist",
    "right_ankle", "left_ankle",
    "right_shoulder", "left_shoulder",
    "right_elbow", "left_elbow",
    "right_knee", "left_knee",
)


def get_skeleton(name: str) -> SkeletonDef:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown skeleton definition {name!r}") from None


def register_skeleton(skeleton: SkeletonDef) -> None:
    _REGISTRY[skeleton.name] = skeleton
