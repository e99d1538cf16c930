"""Command-line entry point: the pipeline stages as separate subcommands.

Stages write their artifact plus a content hash under workspace/state/, so a
rerun with unchanged inputs is a no-op. Exit codes: 0 ok, 1 validation
failure, 2 service failure, 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import body_model as bm
from . import metrics as mt
from . import orchestrator as orch
from . import pose_sampling as ps
from . import report as rp
from .cond_render import RenderConfig, build_conditioning_bundle, bundle_paths, save_bundle
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .prompt_catalog import (
    expand_category,
    make_prompt_pair,
    render_prompt,
    slugify,
    vqa_questions_for,
)
from .services import (
    ConditioningRefs,
    EstimateRequest,
    OracleInfo,
    PROTOCOL_VERSION,
    ServiceProtocolError,
    ServiceTransportError,
)
from .skeletons import get_skeleton

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SERVICE = 2
EXIT_INTERNAL = 3


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _state_path(cfg: ExperimentConfig, stage: str) -> Path:
    return cfg.workspace / "state" / f"{stage}.json"


def _stage_done(cfg: ExperimentConfig, stage: str, inputs: dict) -> bool:
    state_file = _state_path(cfg, stage)
    if not state_file.is_file():
        return False
    try:
        state = json.loads(state_file.read_text())
    except json.JSONDecodeError:
        return False
    if state.get("config_hash") != cfg.config_hash() or state.get("inputs") != inputs:
        return False
    return all((cfg.workspace / p).exists() for p in state.get("outputs", []))


def _record_stage(cfg: ExperimentConfig, stage: str, inputs: dict, outputs: list[Path]) -> None:
    rel = [str(p.relative_to(cfg.workspace)) for p in outputs]
    content = {
        str(p.relative_to(cfg.workspace)): _sha256_file(p) for p in outputs if p.is_file()
    }
    state = {
        "config_hash": cfg.config_hash(),
        "inputs": inputs,
        "outputs": rel,
        "content_hashes": content,
    }
    path = _state_path(cfg, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state, sort_keys=True, indent=1) + "\n")


def _load_poses(cfg: ExperimentConfig) -> ps.PoseCorpus:
    poses_file = cfg.workspace / "poses.txt"
    if not poses_file.is_file():
        raise ConfigError([f"pose subset not found: {poses_file}; run sample-poses first"])
    return ps.load_pose_corpus(poses_file, num_joints=cfg.corpus_joints)


def _bundle_meta(cfg: ExperimentConfig, pose_id: str) -> dict:
    meta_path = bundle_paths(cfg.workspace / "bundles", pose_id)["meta"]
    if not meta_path.is_file():
        raise ConfigError([f"bundle missing for pose {pose_id}; run render-conditions first"])
    return json.loads(meta_path.read_text())


def _oracle_from_meta(meta: dict) -> OracleInfo:
    skeleton = get_skeleton(meta["keypoint_skeleton"])
    return OracleInfo(
        joints3d_cam=tuple(tuple(float(v) for v in p) for p in meta["joints3d_cam"]),
        joints2d=tuple(tuple(float(v) for v in p) for p in meta["keypoints2d"]),
        visibility=tuple(bool(v) for v in meta["keypoint_visibility"]),
        joint_names=skeleton.joint_names,
        keypoint_skeleton=meta["keypoint_skeleton"],
    )


def _conditioning_refs(pose_id: str) -> ConditioningRefs:
    return ConditioningRefs(
        depth=f"bundles/{pose_id}.depth.png",
        semantic=f"bundles/{pose_id}.semantic.png",
        skeleton=f"bundles/{pose_id}.skeleton.png",
    )


# ---------------------------------------------------------------------------
# Stage commands


def cmd_sample_poses(cfg: ExperimentConfig, dry_run: bool) -> int:
    model = bm.load_body_model(cfg.body_model)
    corpus = ps.load_pose_corpus(cfg.pose_corpus, num_joints=cfg.corpus_joints)
    inputs = {"corpus": _sha256_file(cfg.pose_corpus), "model": _sha256_file(cfg.body_model)}
    if _stage_done(cfg, "sample-poses", inputs):
        print("sample-poses: up to date, nothing to do")
        return EXIT_OK
    plan = (
        f"balance {cfg.sampling.per_label} per label over {cfg.sampling.labels}"
        if cfg.sampling.per_label
        else f"farthest-point order, keep {cfg.sampling.count or len(corpus)}"
    )
    print(f"sample-poses: {len(corpus)} corpus poses -> {plan}")
    if dry_run:
        return EXIT_OK
    if cfg.sampling.per_label:
        subset = ps.balance_by_label(corpus, cfg.sampling.per_label, model, labels=cfg.sampling.labels)
    else:
        order = ps.farthest_point_sample(corpus, cfg.sampling.count or len(corpus), model)
        subset = ps.PoseCorpus(
            poses=tuple(corpus.poses[i] for i in order), source_tag=corpus.source_tag
        )
    out = cfg.workspace / "poses.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    ps.save_pose_corpus(subset, out)
    _record_stage(cfg, "sample-poses", inputs, [out])
    print(f"sample-poses: wrote {len(subset)} poses to {out}")
    return EXIT_OK


def cmd_render_conditions(cfg: ExperimentConfig, dry_run: bool) -> int:
    model = bm.load_body_model(cfg.body_model)
    subset = _load_poses(cfg)
    inputs = {"poses": _sha256_file(cfg.workspace / "poses.txt"),
              "model": _sha256_file(cfg.body_model)}
    if _stage_done(cfg, "render-conditions", inputs):
        print("render-conditions: up to date, nothing to do")
        return EXIT_OK
    print(f"render-conditions: {len(subset)} poses at {cfg.render.image_size}")
    if dry_run:
        return EXIT_OK
    out_dir = cfg.workspace / "bundles"
    outputs: list[Path] = []
    for pose in subset.poses:
        bundle, meta = build_conditioning_bundle(model, pose, cfg.render)
        outputs.extend(save_bundle(bundle, meta, out_dir).values())
    _record_stage(cfg, "render-conditions", inputs, outputs)
    print(f"render-conditions: wrote {len(subset)} bundles to {out_dir}")
    return EXIT_OK


def _plan_cells(cfg: ExperimentConfig, subset: ps.PoseCorpus) -> list[orch.CellSpec]:
    if cfg.catalog is None:
        raise ConfigError(["config has no attribute catalog"])
    cells: list[orch.CellSpec] = []
    for category in cfg.catalog.categories:
        category_base = cfg.catalog.base_slots_for(category)
        for spec in expand_category(cfg.catalog, category):
            # A spec may override its own base value (body-shape style); the
            # base image is then specific to that attribute.
            base_slots = category_base.with_slot(spec.slot, spec.base_value)
            base_tag = (
                "base" if spec.base_value == getattr(category_base, spec.slot)
                else f"base-{slugify(spec.base_value)}"
            )
            pair = make_prompt_pair(base_slots, spec, cfg.catalog.template)
            att_slots = base_slots.with_slot(spec.slot, spec.attribute_value)
            base_questions = tuple(vqa_questions_for(base_slots))
            att_questions = tuple(vqa_questions_for(att_slots))
            for pose in subset.poses:
                meta = _bundle_meta(cfg, pose.pose_id)
                cells.append(orch.CellSpec(
                    pose_id=pose.pose_id,
                    attribute=spec,
                    base_prompt=pair.base_text,
                    att_prompt=pair.attribute_text,
                    base_questions=base_questions,
                    att_questions=att_questions,
                    conditioning=_conditioning_refs(pose.pose_id),
                    oracle=_oracle_from_meta(meta),
                    image_size=cfg.render.image_size,
                    negative_prompt=cfg.negative_prompt,
                    base_tag=base_tag,
                ))
    return cells


def _services_with_population(cfg: ExperimentConfig, pose_ids: list[str]):
    err = cfg.mock.estimator_error
    if err.degrade_fraction > 0 and not err.population and not err.population_path:
        cfg = dataclasses.replace(
            cfg,
            mock=dataclasses.replace(
                cfg.mock,
                estimator_error=dataclasses.replace(err, population=tuple(pose_ids)),
            ),
        )
    return cfg.make_services()


def cmd_generate(cfg: ExperimentConfig, dry_run: bool, resume: bool) -> int:
    subset = _load_poses(cfg)
    cells = _plan_cells(cfg, subset)
    manifest_path = cfg.workspace / "manifest.jsonl"
    print(f"generate: {len(cells)} cells "
          f"({len(subset)} poses x {len(cells) // max(len(subset), 1)} attributes)"
          f" -> {manifest_path}")
    if dry_run:
        return EXIT_OK
    services = _services_with_population(cfg, [p.pose_id for p in subset.poses])
    manifest = orch.build_benchmark(
        cells,
        manifest_path,
        cfg.experiment_seed,
        services,
        cfg.filters,
        config_hash=cfg.config_hash(),
        protocol_version=PROTOCOL_VERSION,
        parallelism=cfg.parallelism,
        resume=resume,
    )
    counts = manifest.footer["valid_counts"] if manifest.footer else {}
    print(f"generate: finalized manifest; valid pairs per attribute: {counts}")
    _record_stage(cfg, "generate", {"cells": len(cells)}, [manifest_path])
    return EXIT_OK


def cmd_predict(cfg: ExperimentConfig, dry_run: bool) -> int:
    manifest_path = cfg.workspace / "manifest.jsonl"
    if not manifest_path.is_file():
        raise ConfigError([f"manifest not found: {manifest_path}; run generate first"])
    manifest = orch.BenchmarkManifest.load(manifest_path)
    subset = _load_poses(cfg)
    services = _services_with_population(cfg, [p.pose_id for p in subset.poses])
    store = mt.PredictionsStore()

    jobs: list[tuple[str, str, str, str]] = []  # pose, attribute, role, image
    if manifest.mode == "replica":
        for pose_id, record in sorted(manifest.valid_replicas().items()):
            jobs.append((pose_id, "replica", "base", record["image"]))
    else:
        for attribute_id in manifest.attribute_ids():
            for pose_id, pair in sorted(manifest.valid_pairs(attribute_id).items()):
                jobs.append((pose_id, attribute_id, "base", pair.base_image_path))
                jobs.append((pose_id, attribute_id, "att", pair.attribute_image_path))
    print(f"predict: {len(jobs)} estimator calls")
    if dry_run:
        return EXIT_OK

    cache: dict[tuple[str, str, str], object] = {}
    for pose_id, attribute_id, role, image in jobs:
        key = (image, pose_id, role)
        if key not in cache:
            meta = _bundle_meta(cfg, pose_id)
            cache[key] = services.estimate(EstimateRequest(
                image_path=image,
                pose_id=pose_id,
                role=role,
                oracle=_oracle_from_meta(meta),
            ))
        resp = cache[key]
        store.add(mt.Prediction(
            pose_id=pose_id,
            attribute_id=attribute_id,
            role=role,
            joints3d=np.asarray(resp.joints3d, dtype=np.float64),
            joint_format=resp.joint_format,
        ))
    out = cfg.workspace / "predictions.jsonl"
    store.save(out)
    _record_stage(cfg, "predict", {"manifest": _sha256_file(manifest_path)}, [out])
    print(f"predict: wrote {len(store)} predictions to {out}")
    return EXIT_OK


def _gt_lookup(cfg: ExperimentConfig):
    cache: dict[str, tuple[np.ndarray, tuple[str, ...]]] = {}

    def lookup(pose_id: str):
        if pose_id not in cache:
            meta = _bundle_meta(cfg, pose_id)
            cache[pose_id] = (
                np.asarray(meta["joints3d_cam"], dtype=np.float64),
                tuple(meta["joint_names"]),
            )
        return cache[pose_id]

    return lookup


def cmd_evaluate(cfg: ExperimentConfig, dry_run: bool) -> int:
    manifest_path = cfg.workspace / "manifest.jsonl"
    predictions_path = cfg.workspace / "predictions.jsonl"
    for path, stage in ((manifest_path, "generate"), (predictions_path, "predict")):
        if not path.is_file():
            raise ConfigError([f"{path} not found; run {stage} first"])
    manifest = orch.BenchmarkManifest.load(manifest_path)
    out_dir = cfg.workspace / "reports" / cfg.estimator_name
    print(f"evaluate: manifest mode {manifest.mode!r} -> {out_dir}")
    if dry_run:
        return EXIT_OK
    predictions = mt.PredictionsStore.load(predictions_path)
    lookup = _gt_lookup(cfg)

    if manifest.mode == "replica":
        synth_mpjpe = []
        synth_pa = []
        for pose_id in sorted(manifest.valid_replicas()):
            pred = predictions.get(pose_id, "replica", "base")
            gt_joints, gt_names = lookup(pose_id)
            p_hat, p, root = mt.map_prediction_joints(pred, gt_joints, gt_names, cfg.eval)
            synth_mpjpe.append(mt.mpjpe(p_hat, p, root_index=root))
            synth_pa.append(mt.pa_mpjpe(p_hat, p, mode=cfg.eval.alignment))
        result = {
            "estimator": cfg.estimator_name,
            "n_valid": len(synth_mpjpe),
            "synth_mpjpe_mm": sum(synth_mpjpe) / len(synth_mpjpe),
            "synth_pa_mpjpe_mm": sum(synth_pa) / len(synth_pa),
            "fid": cfg.fid,
        }
        if cfg.replica.real_mpjpe_mm is not None:
            result["pose_gap_mpjpe_mm"] = mt.pose_gap([cfg.replica.real_mpjpe_mm], synth_mpjpe)
        if cfg.replica.real_pa_mpjpe_mm is not None:
            result["pose_gap_pa_mpjpe_mm"] = mt.pose_gap([cfg.replica.real_pa_mpjpe_mm], synth_pa)
        out_dir.mkdir(parents=True, exist_ok=True)
        out = out_dir / "replica_report.json"
        out.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        _record_stage(cfg, "evaluate", {"manifest": _sha256_file(manifest_path)}, [out])
        print(f"evaluate: wrote {out}")
        return EXIT_OK

    if cfg.catalog is None:
        raise ConfigError(["config has no attribute catalog"])
    categories = [
        (cat.name, [s.attribute_id for s in expand_category(cfg.catalog, cat)])
        for cat in cfg.catalog.categories
    ]
    summary = mt.evaluate_manifest(manifest, predictions, lookup, categories, cfg.eval)
    report = rp.summarize(summary, manifest, cfg.estimator_name, fid=cfg.fid)
    written = rp.emit(report, out_dir)
    _record_stage(
        cfg, "evaluate",
        {"manifest": _sha256_file(manifest_path), "predictions": _sha256_file(predictions_path)},
        [p for p in written.values() if p.is_file()],
    )
    print(f"evaluate: overall PDP {report.overall_pdp:.2f}% -> {out_dir}")
    for category, value in report.category_pdp.items():
        print(f"  {category}: {value:.2f}%")
    return EXIT_OK


def cmd_replica(cfg: ExperimentConfig, slots_path: str | None, dry_run: bool, resume: bool) -> int:
    slots_file = Path(slots_path) if slots_path else (
        Path(cfg.replica.slots_file) if cfg.replica.slots_file else None
    )
    if slots_file is None or not slots_file.is_file():
        raise ConfigError(["replica needs a per-pose slots file (--slots or replica.slots_file)"])
    if cfg.catalog is None:
        raise ConfigError(["config has no attribute catalog (for the prompt template)"])
    subset = _load_poses(cfg)
    per_pose: dict[str, dict] = {}
    for line in slots_file.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        per_pose[entry["pose_id"]] = entry.get("slots", {})

    cells = []
    for pose in subset.poses:
        if pose.pose_id not in per_pose:
            continue
        slots = cfg.catalog.base_slots
        for slot, value in sorted(per_pose[pose.pose_id].items()):
            slots = slots.with_slot(slot, value)
        meta = _bundle_meta(cfg, pose.pose_id)
        cells.append(orch.ReplicaCell(
            pose_id=pose.pose_id,
            prompt=render_prompt(slots, cfg.catalog.template),
            questions=tuple(vqa_questions_for(slots)),
            conditioning=_conditioning_refs(pose.pose_id),
            oracle=_oracle_from_meta(meta),
            image_size=cfg.render.image_size,
            negative_prompt=cfg.negative_prompt,
        ))
    manifest_path = cfg.workspace / "manifest.jsonl"
    print(f"replica: {len(cells)} poses with slot assignments -> {manifest_path}")
    if dry_run:
        return EXIT_OK
    services = _services_with_population(cfg, [c.pose_id for c in cells])
    manifest = orch.build_replica(
        cells,
        manifest_path,
        cfg.experiment_seed,
        services,
        cfg.filters,
        config_hash=cfg.config_hash(),
        protocol_version=PROTOCOL_VERSION,
        parallelism=cfg.parallelism,
        resume=resume,
    )
    n_valid = len(manifest.valid_replicas())
    _record_stage(cfg, "replica", {"slots": _sha256_file(slots_file)}, [manifest_path])
    print(f"replica: {n_valid}/{len(cells)} poses valid")
    return EXIT_OK


def cmd_convert_model(src: str, dst: str) -> int:
    model = bm.convert_smpl_layout(src, dst)
    print(
        f"convert-model: wrote {dst} "
        f"(V={model.num_vertices}, J={model.num_joints}, K={model.num_keypoints})"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stage-audit",
        description="Benchmark generation and sensitivity auditing for 3D human pose estimators",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_stage(name: str, help_text: str, resume: bool = False, slots: bool = False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--dry-run", action="store_true", help="print planned work only")
        if resume:
            p.add_argument("--resume", action="store_true", default=True,
                           help="skip completed cells (default)")
            p.add_argument("--no-resume", dest="resume", action="store_false")
        if slots:
            p.add_argument("--slots", help="per-pose slot values file (JSON lines)")
        return p

    add_stage("sample-poses", "select a diverse, balanced pose subset")
    add_stage("render-conditions", "render conditioning bundles for the subset")
    add_stage("generate", "generate paired images with retries and filters", resume=True)
    add_stage("predict", "run the pose estimator over all valid images")
    add_stage("evaluate", "compute degradation metrics and reports")
    add_stage("replica", "generate a single-image replica set from per-pose slots",
              resume=True, slots=True)

    conv = sub.add_parser("convert-model", help="convert a public SMPL-layout file to the container format")
    conv.add_argument("src")
    conv.add_argument("dst")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert-model":
            return cmd_convert_model(args.src, args.dst)
        cfg = load_experiment_config(args.config)
        cfg.workspace.mkdir(parents=True, exist_ok=True)
        if args.command == "sample-poses":
            return cmd_sample_poses(cfg, args.dry_run)
        if args.command == "render-conditions":
            return cmd_render_conditions(cfg, args.dry_run)
        if args.command == "generate":
            return cmd_generate(cfg, args.dry_run, args.resume)
        if args.command == "predict":
            return cmd_predict(cfg, args.dry_run)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.dry_run)
        if args.command == "replica":
            return cmd_replica(cfg, args.slots, args.dry_run, args.resume)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VALIDATION
    except (bm.BodyModelError, mt.EvalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except orch.OrchestrationAborted as exc:
        print(f"service failure: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (ServiceTransportError, ServiceProtocolError) as exc:
        print(f"service failure: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except Exception as exc:  # pragma: no cover
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
