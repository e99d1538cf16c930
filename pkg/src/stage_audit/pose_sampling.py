"""Diverse, label-balanced pose subset selection over a pose corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body_model import BodyModelData, Pose, regress_joints, skin_mesh

CORPUS_HEADER = "# pose-corpus v1"


@dataclass(frozen=True)
class PoseCorpus:
    poses: tuple[Pose, ...]
    source_tag: str = ""

    def __post_init__(self):
        ids = [p.pose_id for p in self.poses]
        if len(ids) != len(set(ids)):
            raise ValueError("pose corpus has duplicate pose_ids")

    def __len__(self) -> int:
        return len(self.poses)


def save_pose_corpus(corpus: PoseCorpus, path: str | Path) -> None:
    """Text format: one record per pose; fields are pose_id, gender label,
    J rotation matrices row-major, translation, then optional shape coefficients."""
    path = Path(path)
    lines = [CORPUS_HEADER]
    if corpus.poses:
        lines.append(f"# joints={corpus.poses[0].num_joints}")
    if corpus.source_tag:
        lines.append(f"# source={corpus.source_tag}")
    for pose in corpus.poses:
        fields = [pose.pose_id, pose.gender_label]
        fields.extend(repr(float(v)) for v in pose.joint_rotations.ravel())
        fields.extend(repr(float(v)) for v in pose.root_translation)
        if pose.shape_coeffs is not None:
            fields.extend(repr(float(v)) for v in np.asarray(pose.shape_coeffs).ravel())
        lines.append(" ".join(fields))
    path.write_text("\n".join(lines) + "\n")


def load_pose_corpus(path: str | Path, num_joints: int = 24) -> PoseCorpus:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"pose corpus not found: {path}")
    source_tag = ""
    poses: list[Pose] = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("joints="):
                num_joints = int(body.split("=", 1)[1])
            elif body.startswith("source="):
                source_tag = body.split("=", 1)[1]
            continue
        fields = line.split()
        if len(fields) < 2 + num_joints * 9 + 3:
            raise ValueError(f"{path}: short pose record starting {fields[:2]}")
        pose_id, gender = fields[0], fields[1]
        vals = np.array([float(v) for v in fields[2:]])
        rots = vals[: num_joints * 9].reshape(num_joints, 3, 3)
        trans = vals[num_joints * 9 : num_joints * 9 + 3]
        rest = vals[num_joints * 9 + 3 :]
        poses.append(
            Pose(
                joint_rotations=rots,
                root_translation=trans,
                pose_id=pose_id,
                gender_label=gender,
                shape_coeffs=rest if rest.size else None,
            )
        )
    return PoseCorpus(poses=tuple(poses), source_tag=source_tag)


def _root_zeroed(pose: Pose, root_index: int) -> Pose:
    rots = pose.joint_rotations.copy()
    rots[root_index] = np.eye(3)
    return pose.replace(joint_rotations=rots, root_translation=np.zeros(3))


def pose_joint_features(model: BodyModelData, pose: Pose) -> np.ndarray:
    """Root-aligned regressed joints, the comparison space for pose distances."""
    root_idx = int(np.flatnonzero(model.kinematic_parents == -1)[0])
    zeroed = _root_zeroed(pose, root_idx)
    mesh = skin_mesh(model, zeroed)
    return regress_joints(mesh.vertices, model.joint_regressor_native)


def pose_distance(a: Pose, b: Pose, model: BodyModelData) -> float:
    """Mean Euclidean distance between root-aligned regressed joints (meters)."""
    if a.num_joints != b.num_joints:
        raise ValueError(f"joint counts differ: {a.num_joints} vs {b.num_joints}")
    fa = pose_joint_features(model, a)
    fb = pose_joint_features(model, b)
    return float(np.mean(np.linalg.norm(fa - fb, axis=1)))


def _feature_distance(fa: np.ndarray, fb: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(fa - fb, axis=1)))


def farthest_point_sample(corpus: PoseCorpus, k: int, model: BodyModelData) -> list[int]:
    """Greedy max-min selection of k pose indices.

    Starts from the pose farthest from the corpus centroid in joint space;
    every later pick maximizes its minimum distance to the selected set.
    Ties break toward the smallest pose_id, making the result a function of
    the pose set alone.
    """
    n = len(corpus)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    feats = np.stack([pose_joint_features(model, p) for p in corpus.poses])
    ids = [p.pose_id for p in corpus.poses]

    centroid = feats.mean(axis=0)
    d0 = np.array([_feature_distance(f, centroid) for f in feats])
    start = min(range(n), key=lambda i: (-d0[i], ids[i]))

    selected = [start]
    min_dist = np.array([_feature_distance(feats[i], feats[start]) for i in range(n)])
    min_dist[start] = -np.inf
    while len(selected) < k:
        nxt = min(range(n), key=lambda i: (-min_dist[i], ids[i]))
        selected.append(nxt)
        dn = np.linalg.norm(feats - feats[nxt], axis=2).mean(axis=1)
        min_dist = np.minimum(min_dist, dn)
        min_dist[nxt] = -np.inf
    return selected


def balance_by_label(
    corpus: PoseCorpus,
    per_label: int,
    model: BodyModelData,
    labels: tuple[str, ...] = ("male", "female"),
    label_field: str = "gender",
) -> PoseCorpus:
    """First ``per_label`` poses of each label in farthest-point order."""
    if label_field != "gender":
        raise ValueError(f"unsupported label field {label_field!r}")
    if per_label == 0:
        return PoseCorpus(poses=(), source_tag=corpus.source_tag)
    order = farthest_point_sample(corpus, len(corpus), model)
    picked: dict[str, list[Pose]] = {label: [] for label in labels}
    for idx in order:
        pose = corpus.poses[idx]
        bucket = picked.get(pose.gender_label)
        if bucket is not None and len(bucket) < per_label:
            bucket.append(pose)
    for label in labels:
        if len(picked[label]) < per_label:
            raise ValueError(
                f"insufficient poses for label {label!r}: "
                f"have {len(picked[label])}, need {per_label}"
            )
    keep = {p.pose_id for bucket in picked.values() for p in bucket}
    ordered = [corpus.poses[i] for i in order if corpus.poses[i].pose_id in keep]
    return PoseCorpus(poses=tuple(ordered), source_tag=corpus.source_tag)
