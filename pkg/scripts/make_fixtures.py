#!/usr/bin/env python3
"""Regenerate the checked-in fixtures: toy body models, a small pose corpus,
the golden skeleton image, and the protocol golden files.

Deterministic: rerunning produces byte-identical outputs.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from stage_audit.body_model import save_body_model
from stage_audit.cond_render import render_skeleton_map
from stage_audit.fixtures import make_humanoid_corpus, make_humanoid_model, make_toy_model
from stage_audit.pose_sampling import save_pose_corpus
from stage_audit.services import (
    ConditioningRefs,
    EstimateRequest,
    GenerateRequest,
    KeypointRequest,
    MockServiceHub,
    MockServicesConfig,
    OracleInfo,
    VQARequest,
    mock_estimator,
    mock_keypointer,
    mock_vqa,
)
from stage_audit.skeletons import OPENPOSE18


def write_models(fixtures: Path) -> None:
    save_body_model(make_toy_model(), fixtures / "toy2.model")
    save_body_model(make_humanoid_model(), fixtures / "humanoid.model")
    print("wrote toy2.model, humanoid.model")


def write_corpus(fixtures: Path) -> None:
    save_pose_corpus(make_humanoid_corpus(20, seed=7), fixtures / "humanoid_corpus_20.txt")
    print("wrote humanoid_corpus_20.txt")


def golden_skeleton(fixtures: Path) -> None:
    # A fixed standing figure, all joints visible, at 512x512.
    pts = np.array([
        [256, 96], [256, 140],
        [300, 150], [330, 210], [350, 270],
        [212, 150], [182, 210], [162, 270],
        [286, 280], [290, 360], [294, 440],
        [226, 280], [222, 360], [218, 440],
        [270, 84], [242, 84], [284, 92], [228, 92],
    ], dtype=np.float64)
    vis = np.ones(18, dtype=bool)
    image = render_skeleton_map(pts, vis, OPENPOSE18, (512, 512))
    out = fixtures / "golden" / "skeleton_full.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(out)
    print(f"wrote {out} (nonzero px: {int(image.any(axis=2).sum())})")


def _fixture_oracle() -> OracleInfo:
    # Straight figure matching the humanoid's canonical pose geometry.
    joints2d = tuple((80.0 + 4.0 * i, 40.0 + 6.0 * i) for i in range(18))
    joints3d = tuple((0.05 * i, 1.0 + 0.02 * i, 4.0 + 0.01 * i) for i in range(16))
    return OracleInfo(
        joints3d_cam=joints3d,
        joints2d=joints2d,
        visibility=tuple([True] * 18),
        joint_names=OPENPOSE18.joint_names,
        keypoint_skeleton="openpose18",
    )


def protocol_goldens(fixtures: Path) -> None:
    out_dir = fixtures / "protocol"
    out_dir.mkdir(parents=True, exist_ok=True)
    oracle = _fixture_oracle()
    hub = MockServiceHub(MockServicesConfig(), workspace_root=out_dir)

    gen_req = GenerateRequest(
        prompt="Photo, caucasian young male wearing a t-shirt in the city center at daytime sunny day",
        negative_prompt="",
        noise_seed=42,
        conditioning=ConditioningRefs.zeroed(),
        image_size=(64, 64),
        output_path="images/fixture/generate-out.png",
        pose_id="pose0001",
        attribute_id="clothing:a-parka",
        role="att",
        attempt=0,
        oracle=None,
    )
    est_req = EstimateRequest(
        image_path="images/fixture/generate-out.png",
        pose_id="pose0001",
        role="att",
        oracle=oracle,
    )
    kp_req = KeypointRequest(
        image_path="images/fixture/generate-out.png",
        pose_id="pose0001",
        oracle=oracle,
    )
    vqa_req = VQARequest(
        image_path="images/fixture/generate-out.png",
        questions=("Is the person wearing a parka?", "Is it snow weather in the image?"),
    )

    pairs = {
        "generate": (gen_req, hub.generate(gen_req)),
        "estimate": (est_req, hub.estimate(est_req)),
        "keypoints": (kp_req, hub.keypoints(kp_req)),
        "vqa": (vqa_req, hub.vqa(vqa_req)),
    }
    for name, (req, resp) in pairs.items():
        (out_dir / f"{name}_request.json").write_text(
            json.dumps(req.to_wire(), sort_keys=True, indent=1) + "\n")
        (out_dir / f"{name}_response.json").write_text(
            json.dumps(resp.to_wire(), sort_keys=True, indent=1) + "\n")
    # The generated sample image itself is a scratch artifact, not a fixture.
    scratch = out_dir / "images"
    if scratch.exists():
        import shutil
        shutil.rmtree(scratch)
    print(f"wrote protocol goldens to {out_dir}")


def main() -> None:
    fixtures = REPO / "fixtures"
    fixtures.mkdir(exist_ok=True)
    write_models(fixtures)
    write_corpus(fixtures)
    golden_skeleton(fixtures)
    protocol_goldens(fixtures)


if __name__ == "__main__":
    main()
