"""Evaluation protocol: Procrustes alignment, MPJPE / PA-MPJPE, maximum joint
error, the degradation criterion, percentage of degraded poses, aggregation,
pose gap, and stability curves.

Joint positions are in meters internally; every reported error is converted
to millimeters at this boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .orchestrator import BenchmarkManifest, intersect_valid

MM = 1000.0


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    tau_mm: float = 50.0
    alignment: str = "similarity"  # or "rigid"
    root_joint: str = "pelvis"
    # prediction joint format name -> [[prediction index, gt joint name], ...]
    joint_maps: dict = field(default_factory=dict)
    stability_step: int = 50

    def __post_init__(self):
        if self.tau_mm < 0:
            raise EvalError("tau_mm must be nonnegative")
        if self.alignment not in ("similarity", "rigid"):
            raise EvalError(f"unknown alignment mode {self.alignment!r}")


@dataclass(frozen=True)
class EvalRecord:
    pose_id: str
    attribute_id: str
    maxje_base_mm: float
    maxje_att_mm: float
    degraded: bool
    mpjpe_base_mm: float
    mpjpe_att_mm: float
    pa_mpjpe_base_mm: float
    pa_mpjpe_att_mm: float
    tau_mm: float

    def __post_init__(self):
        errors = (
            self.maxje_base_mm, self.maxje_att_mm,
            self.mpjpe_base_mm, self.mpjpe_att_mm,
            self.pa_mpjpe_base_mm, self.pa_mpjpe_att_mm,
        )
        if any(e < 0 for e in errors):
            raise EvalError("joint errors must be nonnegative")
        if self.degraded != degraded(self.maxje_att_mm, self.maxje_base_mm, self.tau_mm):
            raise EvalError("degraded flag inconsistent with the stored errors")

    def to_record(self) -> dict:
        return {
            "pose_id": self.pose_id,
            "attribute_id": self.attribute_id,
            "maxje_base_mm": self.maxje_base_mm,
            "maxje_att_mm": self.maxje_att_mm,
            "degraded": self.degraded,
            "mpjpe_base_mm": self.mpjpe_base_mm,
            "mpjpe_att_mm": self.mpjpe_att_mm,
            "pa_mpjpe_base_mm": self.pa_mpjpe_base_mm,
            "pa_mpjpe_att_mm": self.pa_mpjpe_att_mm,
            "tau_mm": self.tau_mm,
        }


# ---------------------------------------------------------------------------
# Alignment


def procrustes_align(p_hat: np.ndarray, p: np.ndarray, mode: str = "similarity") -> np.ndarray:
    """Closed-form least-squares alignment of ``p_hat`` onto ``p``.

    Returns s * R @ p_hat + t with R a proper rotation (reflections are
    excluded via the determinant correction) and s > 0; ``rigid`` mode pins
    s = 1. Umeyama's solution: center both sets, factor the cross-covariance,
    and correct the sign of the smallest singular direction.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p_hat.shape != p.shape or p_hat.ndim != 2 or p_hat.shape[1] != 3:
        raise EvalError(f"point sets must both be (J, 3), got {p_hat.shape} and {p.shape}")
    if len(p) < 3:
        raise EvalError("alignment needs at least 3 points")
    mu_hat = p_hat.mean(axis=0)
    mu = p.mean(axis=0)
    x = p_hat - mu_hat
    y = p - mu
    norm_x2 = float((x * x).sum())
    if norm_x2 == 0.0:
        raise EvalError("degenerate configuration: all predicted points coincide")
    h = x.T @ y
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    corr = np.array([1.0, 1.0, d])
    rot = vt.T @ np.diag(corr) @ u.T
    scale = float((s * corr).sum()) / norm_x2 if mode == "similarity" else 1.0
    if mode == "similarity" and scale <= 0:
        scale = np.finfo(np.float64).tiny
    t = mu - scale * rot @ mu_hat
    return scale * p_hat @ rot.T + t


def mpjpe(p_hat: np.ndarray, p: np.ndarray, root_index: int = 0) -> float:
    """Mean per-joint error in mm after root alignment only."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    a = p_hat - p_hat[root_index]
    b = p - p[root_index]
    return float(np.mean(np.linalg.norm(a - b, axis=1))) * MM


def pa_mpjpe(p_hat: np.ndarray, p: np.ndarray, mode: str = "similarity") -> float:
    """Mean per-joint error in mm after full Procrustes alignment."""
    aligned = procrustes_align(p_hat, p, mode=mode)
    return float(np.mean(np.linalg.norm(aligned - np.asarray(p), axis=1))) * MM


def max_je(p_hat_aligned: np.ndarray, p: np.ndarray) -> float:
    """Largest per-joint error in mm; expects an already-aligned prediction."""
    diff = np.asarray(p_hat_aligned, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    return float(np.max(np.linalg.norm(diff, axis=1))) * MM


def degraded(maxje_att: float, maxje_base: float, tau: float) -> bool:
    """Attribute error exceeds base error by strictly more than tau (mm)."""
    return (maxje_att - maxje_base) > tau


def pdp(flags) -> float:
    """Percentage of degraded poses: 100 times the mean of the flags."""
    flags = list(flags)
    if not flags:
        raise EvalError("pdp needs at least one record")
    return (100.0 * sum(1 for f in flags if f)) / len(flags)


def category_pdp(attribute_pdps) -> float:
    values = list(attribute_pdps)
    if not values:
        raise EvalError("category_pdp needs at least one attribute")
    return sum(values) / len(values)


def overall_pdp(category_pdps) -> float:
    values = list(category_pdps)
    if not values:
        raise EvalError("overall_pdp needs at least one category")
    return sum(values) / len(values)


def pose_gap(real_errors_mm, synth_errors_mm) -> float:
    """Mean synthetic-set error minus mean real-set error (mm)."""
    real = list(real_errors_mm)
    synth = list(synth_errors_mm)
    if not real or not synth:
        raise EvalError("pose_gap needs nonempty error lists")
    return sum(synth) / len(synth) - sum(real) / len(real)


def stability_curve(flags, step: int) -> list[tuple[int, float]]:
    """Cumulative PDP over the first N records for N = step, 2*step, ..., total."""
    flags = [bool(f) for f in flags]
    if step < 1:
        raise EvalError("step must be >= 1")
    if not flags:
        raise EvalError("stability_curve needs at least one record")
    total = len(flags)
    points = list(range(step, total + 1, step))
    if not points or points[-1] != total:
        points.append(total)
    return [(n, pdp(flags[:n])) for n in points]


def stability_curve_records(records: list[EvalRecord], step: int) -> list[tuple[int, float]]:
    ordered = sorted(records, key=lambda r: r.pose_id)
    return stability_curve([r.degraded for r in ordered], step)


# ---------------------------------------------------------------------------
# Predictions store


@dataclass(frozen=True)
class Prediction:
    pose_id: str
    attribute_id: str
    role: str
    joints3d: np.ndarray
    joint_format: str


class PredictionsStore:
    """Line-delimited records keyed by (pose_id, attribute_id, role)."""

    def __init__(self):
        self._records: dict[tuple[str, str, str], Prediction] = {}

    def add(self, prediction: Prediction) -> None:
        self._records[(prediction.pose_id, prediction.attribute_id, prediction.role)] = prediction

    def get(self, pose_id: str, attribute_id: str, role: str) -> Prediction:
        key = (pose_id, attribute_id, role)
        if key not in self._records:
            raise EvalError(f"missing prediction for {key}")
        return self._records[key]

    def __len__(self) -> int:
        return len(self._records)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for key in sorted(self._records):
                pred = self._records[key]
                fh.write(json.dumps({
                    "record": "prediction",
                    "pose_id": pred.pose_id,
                    "attribute_id": pred.attribute_id,
                    "role": pred.role,
                    "joints3d": [[float(v) for v in p] for p in pred.joints3d],
                    "joint_format": pred.joint_format,
                }, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PredictionsStore":
        store = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("record") != "prediction":
                continue
            store.add(Prediction(
                pose_id=d["pose_id"],
                attribute_id=d["attribute_id"],
                role=d["role"],
                joints3d=np.asarray(d["joints3d"], dtype=np.float64),
                joint_format=d["joint_format"],
            ))
        return store


def map_prediction_joints(
    prediction: Prediction,
    gt_joints: np.ndarray,
    gt_joint_names: tuple[str, ...],
    eval_config: EvalConfig,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Map a prediction onto the ground-truth joint set.

    ``gt_native`` predictions map one-to-one; other formats need an explicit
    mapping table in the config. Returns (pred_subset, gt_subset, root_index
    within the subset).
    """
    fmt = prediction.joint_format
    if fmt == "gt_native":
        if len(prediction.joints3d) != len(gt_joints):
            raise EvalError(
                f"gt_native prediction has {len(prediction.joints3d)} joints, "
                f"ground truth has {len(gt_joints)}"
            )
        names = list(gt_joint_names)
        root = names.index(eval_config.root_joint) if eval_config.root_joint in names else 0
        return prediction.joints3d, gt_joints, root
    if fmt not in eval_config.joint_maps:
        raise EvalError(f"no joint map configured for prediction format {fmt!r}")
    pairs = eval_config.joint_maps[fmt]
    pred_idx = []
    gt_idx = []
    names = []
    for p_i, gt_name in pairs:
        if gt_name not in gt_joint_names:
            continue
        pred_idx.append(int(p_i))
        gt_idx.append(gt_joint_names.index(gt_name))
        names.append(gt_name)
    if len(pred_idx) < 3:
        raise EvalError(f"joint map for {fmt!r} covers fewer than 3 common joints")
    root = names.index(eval_config.root_joint) if eval_config.root_joint in names else 0
    return prediction.joints3d[pred_idx], gt_joints[gt_idx], root


# ---------------------------------------------------------------------------
# Manifest evaluation


@dataclass
class AttributeEval:
    attribute_id: str
    category: str
    pdp: float
    n_poses: int
    records: list[EvalRecord]
    stability: list[tuple[int, float]]


@dataclass
class CategoryEval:
    category: str
    pdp: float
    intersection_size: int
    attributes: list[AttributeEval]


@dataclass
class EvalSummary:
    categories: list[CategoryEval]
    overall_pdp: float
    base_mpjpe_mm: float
    base_pa_mpjpe_mm: float

    def attribute_evals(self) -> list[AttributeEval]:
        return [a for c in self.categories for a in c.attributes]


def _pair_errors(
    pred: Prediction,
    gt_joints: np.ndarray,
    gt_joint_names: tuple[str, ...],
    config: EvalConfig,
) -> tuple[float, float, float]:
    """(maxje, mpjpe, pa_mpjpe) for one prediction against ground truth."""
    p_hat, p, root = map_prediction_joints(pred, gt_joints, gt_joint_names, config)
    aligned = procrustes_align(p_hat, p, mode=config.alignment)
    return (
        max_je(aligned, p),
        mpjpe(p_hat, p, root_index=root),
        float(np.mean(np.linalg.norm(aligned - p, axis=1))) * MM,
    )


def evaluate_manifest(
    manifest: BenchmarkManifest,
    predictions: PredictionsStore,
    gt_lookup,
    categories: list[tuple[str, list[str]]],
    config: EvalConfig,
) -> EvalSummary:
    """Apply the degradation protocol over every category's intersection set.

    ``gt_lookup(pose_id)`` must return (joints3d (J, 3) in meters, joint
    names). Each prediction is Procrustes-aligned to ground truth
    independently, the degradation flag compares maximum joint errors at the
    configured threshold, and attribute percentages average into category and
    overall means. Base-set MPJPE / PA-MPJPE are averaged over every
    evaluated pair.
    """
    category_evals = []
    base_mpjpes = []
    base_pa_mpjpes = []
    for category_name, attribute_ids in categories:
        if not attribute_ids:
            raise EvalError(f"category {category_name!r} has no attributes")
        inter = sorted(intersect_valid(manifest, attribute_ids))
        attr_evals = []
        for attribute_id in attribute_ids:
            records = []
            for pose_id in inter:
                gt_joints, gt_names = gt_lookup(pose_id)
                base_pred = predictions.get(pose_id, attribute_id, "base")
                att_pred = predictions.get(pose_id, attribute_id, "att")
                maxje_b, mpjpe_b, pa_b = _pair_errors(base_pred, gt_joints, gt_names, config)
                maxje_a, mpjpe_a, pa_a = _pair_errors(att_pred, gt_joints, gt_names, config)
                records.append(EvalRecord(
                    pose_id=pose_id,
                    attribute_id=attribute_id,
                    maxje_base_mm=maxje_b,
                    maxje_att_mm=maxje_a,
                    degraded=degraded(maxje_a, maxje_b, config.tau_mm),
                    mpjpe_base_mm=mpjpe_b,
                    mpjpe_att_mm=mpjpe_a,
                    pa_mpjpe_base_mm=pa_b,
                    pa_mpjpe_att_mm=pa_a,
                    tau_mm=config.tau_mm,
                ))
                base_mpjpes.append(mpjpe_b)
                base_pa_mpjpes.append(pa_b)
            if not records:
                raise EvalError(
                    f"attribute {attribute_id!r}: empty intersection set for "
                    f"category {category_name!r}"
                )
            attr_evals.append(AttributeEval(
                attribute_id=attribute_id,
                category=category_name,
                pdp=pdp([r.degraded for r in records]),
                n_poses=len(records),
                records=records,
                stability=stability_curve_records(records, config.stability_step),
            ))
        category_evals.append(CategoryEval(
            category=category_name,
            pdp=category_pdp([a.pdp for a in attr_evals]),
            intersection_size=len(inter),
            attributes=attr_evals,
        ))
    if not category_evals:
        raise EvalError("no categories to evaluate")
    return EvalSummary(
        categories=category_evals,
        overall_pdp=overall_pdp([c.pdp for c in category_evals]),
        base_mpjpe_mm=float(np.mean(base_mpjpes)) if base_mpjpes else 0.0,
        base_pa_mpjpe_mm=float(np.mean(base_pa_mpjpes)) if base_pa_mpjpes else 0.0,
    )
