"""Skinned parametric body model: load, pose, skin, regress joints.

The model file is a self-describing binary container (magic + JSON header +
raw little-endian buffers) so that tiny test fixtures and converted
full-scale models go through the same loader. ``convert_smpl_layout``
translates the public SMPL parameter layout (npz or pickle) into this
container.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"BODYMDL1"
CONTAINER_VERSION = 1
ROOT_PARENT = -1

GENDER_LABELS = ("male", "female", "neutral", "unknown")

_REQUIRED_BUFFERS = {
    "template_vertices": ("float64", 2),
    "faces": ("int32", 2),
    "skinning_weights": ("float64", 2),
    "kinematic_parents": ("int32", 1),
    "joint_regressor_native": ("float64", 2),
    "joint_regressor_keypoints": ("float64", 2),
}
_OPTIONAL_BUFFERS = {"shape_blendshapes": ("float64", 3)}


class BodyModelError(ValueError):
    """Raised when a model file is missing, malformed, or violates an invariant."""


@dataclass(frozen=True)
class BodyModelData:
    """Immutable buffers of a skinned body model.

    All lengths are in meters; the template is a canonical A-pose.
    ``kinematic_parents`` uses -1 for the single root joint.
    """

    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    skinning_weights: np.ndarray  # (V, J), rows sum to 1
    kinematic_parents: np.ndarray  # (J,) int, root = -1
    joint_regressor_native: np.ndarray  # (J, V), row-stochastic
    joint_regressor_keypoints: np.ndarray  # (K, V), row-stochastic
    joint_names: tuple[str, ...]
    keypoint_skeleton: str
    shape_blendshapes: np.ndarray | None = None  # (V, 3, B)

    @property
    def num_vertices(self) -> int:
        return int(self.template_vertices.shape[0])

    @property
    def num_joints(self) -> int:
        return int(self.kinematic_parents.shape[0])

    @property
    def num_keypoints(self) -> int:
        return int(self.joint_regressor_keypoints.shape[0])

    @property
    def num_shape_coeffs(self) -> int:
        return 0 if self.shape_blendshapes is None else int(self.shape_blendshapes.shape[2])

    def rest_joints(self, shape_coeffs: np.ndarray | None = None) -> np.ndarray:
        """Joint positions of the (shape-adjusted) template, shape (J, 3)."""
        return self.joint_regressor_native @ self.shaped_template(shape_coeffs)

    def shaped_template(self, shape_coeffs: np.ndarray | None = None) -> np.ndarray:
        if shape_coeffs is None or self.shape_blendshapes is None:
            return self.template_vertices
        coeffs = np.asarray(shape_coeffs, dtype=np.float64)
        if coeffs.shape != (self.num_shape_coeffs,):
            raise BodyModelError(
                f"shape_coeffs has shape {coeffs.shape}, model expects ({self.num_shape_coeffs},)"
            )
        return self.template_vertices + np.einsum("vcb,b->vc", self.shape_blendshapes, coeffs)


@dataclass(frozen=True)
class Pose:
    """Per-joint rotations plus a root translation, with source metadata."""

    joint_rotations: np.ndarray  # (J, 3, 3)
    root_translation: np.ndarray  # (3,)
    pose_id: str
    gender_label: str = "unknown"
    shape_coeffs: np.ndarray | None = None

    def __post_init__(self):
        rots = np.asarray(self.joint_rotations, dtype=np.float64)
        if rots.ndim != 3 or rots.shape[1:] != (3, 3):
            raise ValueError(f"joint_rotations must be (J, 3, 3), got {rots.shape}")
        if self.gender_label not in GENDER_LABELS:
            raise ValueError(f"unknown gender_label {self.gender_label!r}")
        object.__setattr__(self, "joint_rotations", rots)
        object.__setattr__(self, "root_translation", np.asarray(self.root_translation, dtype=np.float64))

    @property
    def num_joints(self) -> int:
        return int(self.joint_rotations.shape[0])

    def validate_rotations(self, tol: float = 1e-5) -> None:
        """Check every rotation is orthonormal with det +1 within ``tol``."""
        rots = self.joint_rotations
        eye = np.eye(3)
        for j, rot in enumerate(rots):
            if not np.allclose(rot.T @ rot, eye, atol=tol):
                raise ValueError(f"pose {self.pose_id}: joint {j} rotation is not orthonormal")
            if abs(np.linalg.det(rot) - 1.0) > tol:
                raise ValueError(f"pose {self.pose_id}: joint {j} rotation has det != +1")

    def replace(self, **changes) -> "Pose":
        base = dict(
            joint_rotations=self.joint_rotations,
            root_translation=self.root_translation,
            pose_id=self.pose_id,
            gender_label=self.gender_label,
            shape_coeffs=self.shape_coeffs,
        )
        base.update(changes)
        return Pose(**base)


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3), world frame
    faces: np.ndarray  # (F, 3), shared with the model


def identity_pose(model: BodyModelData, pose_id: str = "identity") -> Pose:
    rots = np.broadcast_to(np.eye(3), (model.num_joints, 3, 3)).copy()
    return Pose(joint_rotations=rots, root_translation=np.zeros(3), pose_id=pose_id)


# ---------------------------------------------------------------------------
# Container I/O


def _validate_model(data: BodyModelData) -> None:
    v = data.num_vertices
    j = data.num_joints
    if data.template_vertices.shape != (v, 3):
        raise BodyModelError(f"template_vertices has shape {data.template_vertices.shape}")
    if not np.all(np.isfinite(data.template_vertices)):
        raise BodyModelError("template_vertices contains non-finite values")
    if data.faces.ndim != 2 or data.faces.shape[1] != 3:
        raise BodyModelError(f"faces has shape {data.faces.shape}, expected (F, 3)")
    if data.faces.size and (data.faces.min() < 0 or data.faces.max() >= v):
        raise BodyModelError("faces: vertex index out of range")
    if data.skinning_weights.shape != (v, j):
        raise BodyModelError(
            f"skinning_weights has shape {data.skinning_weights.shape}, expected ({v}, {j})"
        )
    if np.any(data.skinning_weights < -1e-12):
        raise BodyModelError("skinning_weights: negative weight")
    row_sums = data.skinning_weights.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise BodyModelError(
            f"skinning_weights: row {bad} sums to {row_sums[bad]:.8f}, expected 1"
        )
    for name in ("joint_regressor_native", "joint_regressor_keypoints"):
        reg = getattr(data, name)
        if reg.shape[1] != v:
            raise BodyModelError(f"{name} has {reg.shape[1]} columns, expected {v}")
        sums = reg.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise BodyModelError(f"{name}: row {bad} sums to {sums[bad]:.8f}, expected 1")
    if data.joint_regressor_native.shape[0] != j:
        raise BodyModelError("joint_regressor_native row count does not match joint count")
    if len(data.joint_names) != j:
        raise BodyModelError("joint_names length does not match joint count")

    parents = data.kinematic_parents
    roots = np.flatnonzero(parents == ROOT_PARENT)
    if len(roots) != 1:
        raise BodyModelError(f"kinematic_parents: expected exactly one root, found {len(roots)}")
    # Acyclicity: walking up from every joint must reach the root.
    for start in range(j):
        seen = set()
        node = start
        while node != ROOT_PARENT:
            if node in seen or not (0 <= node < j):
                raise BodyModelError(f"kinematic_parents: cycle or bad index at joint {start}")
            seen.add(node)
            node = int(parents[node])

    if data.shape_blendshapes is not None:
        if data.shape_blendshapes.shape[:2] != (v, 3):
            raise BodyModelError(
                f"shape_blendshapes has shape {data.shape_blendshapes.shape}, expected ({v}, 3, B)"
            )


def save_body_model(model: BodyModelData, path: str | Path) -> None:
    """Write ``model`` to the container format at ``path``."""
    _validate_model(model)
    buffers: list[tuple[str, np.ndarray]] = [
        ("template_vertices", model.template_vertices.astype(np.float64)),
        ("faces", model.faces.astype(np.int32)),
        ("skinning_weights", model.skinning_weights.astype(np.float64)),
        ("kinematic_parents", model.kinematic_parents.astype(np.int32)),
        ("joint_regressor_native", model.joint_regressor_native.astype(np.float64)),
        ("joint_regressor_keypoints", model.joint_regressor_keypoints.astype(np.float64)),
    ]
    if model.shape_blendshapes is not None:
        buffers.append(("shape_blendshapes", model.shape_blendshapes.astype(np.float64)))
    header = {
        "version": CONTAINER_VERSION,
        "joint_names": list(model.joint_names),
        "keypoint_skeleton": model.keypoint_skeleton,
        "buffers": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in buffers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for _, arr in buffers:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_body_model(path: str | Path) -> BodyModelData:
    """Load and validate a body model container.

    Any invariant violation is a :class:`BodyModelError` naming the failing
    field; a model that loads is safe to share across threads.
    """
    path = Path(path)
    if not path.is_file():
        raise BodyModelError(f"model file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise BodyModelError(f"{path}: not a body model container (bad magic)")
    off = len(MAGIC)
    hlen = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BodyModelError(f"{path}: malformed header ({exc})") from exc
    off += hlen
    if header.get("version") != CONTAINER_VERSION:
        raise BodyModelError(f"{path}: unsupported container version {header.get('version')}")

    arrays: dict[str, np.ndarray] = {}
    for spec in header.get("buffers", []):
        name, dtype, shape = spec["name"], spec["dtype"], tuple(spec["shape"])
        want = _REQUIRED_BUFFERS.get(name) or _OPTIONAL_BUFFERS.get(name)
        if want is None:
            raise BodyModelError(f"{path}: unknown buffer {name!r}")
        if dtype != want[0] or len(shape) != want[1]:
            raise BodyModelError(f"{path}: buffer {name!r} has dtype {dtype} shape {shape}")
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if off + nbytes > len(raw):
            raise BodyModelError(f"{path}: buffer {name!r} is truncated")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += nbytes

    missing = sorted(set(_REQUIRED_BUFFERS) - set(arrays))
    if missing:
        raise BodyModelError(f"{path}: missing buffers {missing}")
    model = BodyModelData(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"],
        skinning_weights=arrays["skinning_weights"],
        kinematic_parents=arrays["kinematic_parents"],
        joint_regressor_native=arrays["joint_regressor_native"],
        joint_regressor_keypoints=arrays["joint_regressor_keypoints"],
        joint_names=tuple(header.get("joint_names", [])),
        keypoint_skeleton=header.get("keypoint_skeleton", ""),
        shape_blendshapes=arrays.get("shape_blendshapes"),
    )
    _validate_model(model)
    return model


# ---------------------------------------------------------------------------
# Kinematics and skinning


def _topological_order(parents: np.ndarray) -> list[int]:
    order: list[int] = []
    placed = set()
    pending = list(range(len(parents)))
    while pending:
        rest = []
        for j in pending:
            p = int(parents[j])
            if p == ROOT_PARENT or p in placed:
                order.append(j)
                placed.add(j)
            else:
                rest.append(j)
        pending = rest
    return order


def forward_kinematics(model: BodyModelData, pose: Pose) -> np.ndarray:
    """Global rigid transform per joint, shape (J, 4, 4).

    Each transform maps rest-space points to posed world space: joint j's
    transform is its parent's composed with the local rotation about j's
    rest position. The root transform carries ``root_translation``, so the
    identity pose with zero translation yields identity matrices.
    """
    if pose.num_joints != model.num_joints:
        raise ValueError(
            f"pose has {pose.num_joints} joints, model has {model.num_joints}"
        )
    rest = model.rest_joints(pose.shape_coeffs)
    parents = model.kinematic_parents
    transforms = np.zeros((model.num_joints, 4, 4), dtype=np.float64)

    for j in _topological_order(parents):
        rot = pose.joint_rotations[j]
        local = np.eye(4)
        local[:3, :3] = rot
        local[:3, 3] = rest[j] - rot @ rest[j]  # rotation about the rest position
        p = int(parents[j])
        if p == ROOT_PARENT:
            trans = np.eye(4)
            trans[:3, 3] = pose.root_translation
            transforms[j] = trans @ local
        else:
            transforms[j] = transforms[p] @ local
    return transforms


def posed_joints(model: BodyModelData, pose: Pose) -> np.ndarray:
    """World-space positions of the native joints under ``pose``, shape (J, 3)."""
    transforms = forward_kinematics(model, pose)
    rest = model.rest_joints(pose.shape_coeffs)
    rest_h = np.concatenate([rest, np.ones((len(rest), 1))], axis=1)
    return np.einsum("jab,jb->ja", transforms, rest_h)[:, :3]


def skin_mesh(model: BodyModelData, pose: Pose) -> Mesh:
    """Linear blend skinning: vertices are weight-blends of joint transforms."""
    transforms = forward_kinematics(model, pose)
    blended = np.einsum("vj,jab->vab", model.skinning_weights, transforms)
    verts = model.shaped_template(pose.shape_coeffs)
    verts_h = np.concatenate([verts, np.ones((len(verts), 1))], axis=1)
    posed = np.einsum("vab,vb->va", blended, verts_h)[:, :3]
    return Mesh(vertices=posed, faces=model.faces)


def regress_joints(vertices: np.ndarray, regressor: np.ndarray) -> np.ndarray:
    """Matrix product ``regressor @ vertices`` mapping a mesh to joints."""
    vertices = np.asarray(vertices, dtype=np.float64)
    regressor = np.asarray(regressor, dtype=np.float64)
    if regressor.ndim != 2 or vertices.ndim != 2 or regressor.shape[1] != vertices.shape[0]:
        raise ValueError(
            f"regressor {regressor.shape} does not match vertices {vertices.shape}"
        )
    return regressor @ vertices


def canonical_semantic_colors(model: BodyModelData) -> np.ndarray:
    """Per-vertex RGB in [0,1]: template position normalized by its bounding box.

    Colors depend only on the template, so they are constant under any pose.
    """
    box_min = model.template_vertices.min(axis=0)
    box_max = model.template_vertices.max(axis=0)
    extent = box_max - box_min
    if np.any(extent <= 0):
        axis = int(np.argmax(extent <= 0))
        raise BodyModelError(f"degenerate template bounding box: zero extent on axis {axis}")
    return (model.template_vertices - box_min) / extent


# ---------------------------------------------------------------------------
# Converter from the public SMPL parameter layout


def _undo_lazy(arr) -> np.ndarray:
    # Some distributions store chumpy arrays; their .r attribute is the data.
    if hasattr(arr, "r"):
        arr = arr.r
    if hasattr(arr, "todense"):
        arr = np.asarray(arr.todense())
    return np.asarray(arr)


_SMPL_JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)


def convert_smpl_layout(
    src: str | Path,
    dst: str | Path,
    keypoint_regressor: np.ndarray | None = None,
    keypoint_skeleton: str = "openpose18",
    num_shape_coeffs: int | None = 10,
) -> BodyModelData:
    """Convert a public SMPL-layout parameter file (npz or pickle) to the container.

    When no keypoint regressor is supplied, a subset of the native regressor
    rows is used as a placeholder so the container validates; real keypoint
    filtering needs a proper regressor for the declared skeleton.
    """
    src = Path(src)
    if not src.is_file():
        raise BodyModelError(f"source file not found: {src}")
    if src.suffix == ".npz":
        with np.load(src, allow_pickle=True) as data:
            params = {k: data[k] for k in data.files}
    else:
        try:
            with open(src, "rb") as fh:
                params = pickle.load(fh, encoding="latin1")
        except Exception as exc:
            raise BodyModelError(
                f"{src}: cannot unpickle; convert to npz with the original tooling first ({exc})"
            ) from exc

    v_template = _undo_lazy(params["v_template"]).astype(np.float64)
    faces = _undo_lazy(params["f"]).astype(np.int32)
    weights = _undo_lazy(params["weights"]).astype(np.float64)
    j_regressor = _undo_lazy(params["J_regressor"]).astype(np.float64)
    kintree = _undo_lazy(params["kintree_table"]).astype(np.int64)
    parents = kintree[0].astype(np.int32)
    parents[0] = ROOT_PARENT

    blend = None
    if "shapedirs" in params and num_shape_coeffs:
        shapedirs = _undo_lazy(params["shapedirs"]).astype(np.float64)
        blend = shapedirs[:, :, :num_shape_coeffs]

    if keypoint_regressor is None:
        # Placeholder: body joints that roughly cover an 18-point skeleton.
        subset = [15, 12, 17, 19, 21, 16, 18, 20, 2, 5, 8, 1, 4, 7, 15, 15, 15, 15]
        keypoint_regressor = j_regressor[subset]

    n_joints = len(parents)
    names = _SMPL_JOINT_NAMES if n_joints == len(_SMPL_JOINT_NAMES) else tuple(
        f"joint_{i}" for i in range(n_joints)
    )
    model = BodyModelData(
        template_vertices=v_template,
        faces=faces,
        skinning_weights=weights,
        kinematic_parents=parents,
        joint_regressor_native=j_regressor,
        joint_regressor_keypoints=np.asarray(keypoint_regressor, dtype=np.float64),
        joint_names=names,
        keypoint_skeleton=keypoint_skeleton,
        shape_blendshapes=blend,
    )
    save_body_model(model, dst)
    return model
