"""Quality filters for generated images: 2D keypoint alignment and VQA checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .services import KeypointResponse, VQARequest, VQAResponse, ServiceHub
from .skeletons import FILTER_KEYPOINT_NAMES


@dataclass(frozen=True)
class FilterConfig:
    threshold_px: float = 50.0
    selected_joints: tuple[str, ...] = FILTER_KEYPOINT_NAMES
    vqa_enabled: bool = True


@dataclass(frozen=True)
class FilterVerdict:
    passed: bool
    keypoint_errors: dict[str, float] = field(default_factory=dict)
    persons_detected: int = 0
    vqa_failures: tuple[str, ...] = ()
    vqa_checked: bool = False

    def to_record(self) -> dict:
        return {
            "pass": self.passed,
            "keypoint_errors": {k: float(v) for k, v in sorted(self.keypoint_errors.items())},
            "persons_detected": self.persons_detected,
            "vqa_failures": list(self.vqa_failures),
            "vqa_checked": self.vqa_checked,
        }

    @classmethod
    def from_record(cls, d: dict) -> "FilterVerdict":
        return cls(
            passed=bool(d["pass"]),
            keypoint_errors=dict(d.get("keypoint_errors", {})),
            persons_detected=int(d.get("persons_detected", 0)),
            vqa_failures=tuple(d.get("vqa_failures", [])),
            vqa_checked=bool(d.get("vqa_checked", False)),
        )


def keypoint_alignment_filter(
    detected: KeypointResponse,
    projected_gt: np.ndarray,
    gt_visibility: np.ndarray,
    joint_names: tuple[str, ...],
    config: FilterConfig,
) -> FilterVerdict:
    """Reject unless exactly one person is detected and every selected,
    ground-truth-visible keypoint lies within threshold of its projection.

    The comparison is strict: an error exactly at the threshold passes. A
    selected joint the detector reports with zero confidence while the
    ground truth says visible counts as a failure (distance +inf).
    """
    n_persons = len(detected.persons)
    if n_persons != 1:
        return FilterVerdict(passed=False, persons_detected=n_persons)

    person = detected.persons[0]
    if len(person.keypoints) != len(projected_gt):
        raise ValueError(
            f"skeleton mismatch: detector returned {len(person.keypoints)} joints, "
            f"projection has {len(projected_gt)}"
        )
    gt_visibility = np.asarray(gt_visibility, dtype=bool)
    errors: dict[str, float] = {}
    ok = True
    for j, name in enumerate(joint_names):
        if name not in config.selected_joints or not gt_visibility[j]:
            continue
        if person.confidence[j] <= 0.0:
            errors[name] = float("inf")
            ok = False
            continue
        dx = person.keypoints[j][0] - projected_gt[j][0]
        dy = person.keypoints[j][1] - projected_gt[j][1]
        dist = float(np.hypot(dx, dy))
        errors[name] = dist
        if dist > config.threshold_px:
            ok = False
    return FilterVerdict(passed=ok, keypoint_errors=errors, persons_detected=1)


def vqa_filter(response: VQAResponse, expected: list[tuple[str, str]]) -> FilterVerdict:
    """Case-insensitive match of each answer's leading token against the
    expected answer; any mismatch fails and is recorded."""
    if len(response.answers) != len(expected):
        raise ValueError(
            f"answer count {len(response.answers)} does not match "
            f"question count {len(expected)}"
        )
    failures = []
    for answer, (question, want) in zip(response.answers, expected):
        token = answer.strip().split()[0].lower().rstrip(".,!") if answer.strip() else ""
        if token != want.lower():
            failures.append(question)
    return FilterVerdict(
        passed=not failures,
        persons_detected=1,
        vqa_failures=tuple(failures),
        vqa_checked=True,
    )


def apply_filters(
    image_path: str,
    pose_id: str,
    projected_gt: np.ndarray,
    gt_visibility: np.ndarray,
    joint_names: tuple[str, ...],
    questions: list[tuple[str, str]],
    services: ServiceHub,
    config: FilterConfig,
    keypoint_request_factory,
) -> FilterVerdict:
    """Keypoint filter first; the VQA call is skipped when it already failed."""
    detected = services.keypoints(keypoint_request_factory(image_path, pose_id))
    kp = keypoint_alignment_filter(detected, projected_gt, gt_visibility, joint_names, config)
    if not kp.passed or not config.vqa_enabled:
        return kp
    vqa_resp = services.vqa(VQARequest(image_path=image_path, questions=tuple(q for q, _ in questions)))
    vq = vqa_filter(vqa_resp, questions)
    return FilterVerdict(
        passed=kp.passed and vq.passed,
        keypoint_errors=kp.keypoint_errors,
        persons_detected=kp.persons_detected,
        vqa_failures=vq.vqa_failures,
        vqa_checked=True,
    )
