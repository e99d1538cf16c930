"""Paired image generation with shared noise, retries, filtering, and a
resumable append-only manifest.

A cell is one (pose, attribute) pair. Per attempt both images are generated
from the same derived noise seed; the attempt passes only if both images pass
the filters, and a cell is rejected after 13 failed attempts. Base images and
their filter verdicts are produced once per (category, pose, attempt) and
shared across the category's attributes, which also share the base prompt.
"""

from __future__ import annotations

import json
import math
import os
import threading
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path

from .filters import FilterConfig, FilterVerdict, apply_filters
from .prompt_catalog import AttributeSpec
from .services import (
    ConditioningRefs,
    GenerateRequest,
    KeypointRequest,
    OracleInfo,
    ROLE_ATT,
    ROLE_BASE,
    ServiceHub,
    ServiceProtocolError,
    ServiceTransportError,
    hash64,
)

MAX_ATTEMPTS_PER_CELL = 13
MANIFEST_SCHEMA = "benchmark-manifest/1"


class OrchestrationAborted(RuntimeError):
    """A service failed unrecoverably; the manifest on disk stays resumable."""


def derive_seed(experiment_seed: int, pose_id: str, attempt_index: int) -> int:
    """Stable 64-bit noise seed; independent of the attribute so every
    attribute of a category shares the per-pose noise, distinct per attempt."""
    return hash64(f"seed:{experiment_seed}:{pose_id}:{attempt_index}")


@dataclass(frozen=True)
class CellSpec:
    """Everything needed to generate and filter one (pose, attribute) cell."""

    pose_id: str
    attribute: AttributeSpec
    base_prompt: str
    att_prompt: str
    base_questions: tuple[tuple[str, str], ...]
    att_questions: tuple[tuple[str, str], ...]
    conditioning: ConditioningRefs
    oracle: OracleInfo
    image_size: tuple[int, int]
    negative_prompt: str = ""
    base_tag: str = "base"  # distinguishes per-attribute base-prompt overrides

    @property
    def attribute_id(self) -> str:
        return self.attribute.attribute_id

    @property
    def category(self) -> str:
        return self.attribute.category


@dataclass(frozen=True)
class SamplePair:
    pose_id: str
    attribute_id: str
    noise_seed: int
    base_image_path: str
    attribute_image_path: str
    attempt_index: int
    base_verdict: FilterVerdict
    attribute_verdict: FilterVerdict
    valid: bool


@dataclass(frozen=True)
class Rejection:
    pose_id: str
    attribute_id: str
    attempts: int


def _attr_dir(attribute_id: str) -> str:
    return attribute_id.replace(":", "__").replace("/", "_")


def image_rel_path(pose_id: str, attribute_id: str, attempt: int, role: str) -> str:
    return f"images/{pose_id}/{_attr_dir(attribute_id)}/{role}-a{attempt:02d}.png"


class _BaseCache:
    """One base image + verdict per (category, pose, attempt), shared across
    the category's attributes and safe under concurrent cell execution."""

    def __init__(self):
        self._results: dict[tuple, tuple[str, FilterVerdict]] = {}
        self._locks: dict[tuple, threading.Lock] = {}
        self._guard = threading.Lock()

    def obtain(self, key: tuple, produce):
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._results:
                self._results[key] = produce()
            return self._results[key]


def _generate_and_filter(
    cell: CellSpec,
    prompt: str,
    questions,
    role: str,
    attempt: int,
    seed: int,
    services: ServiceHub,
    filter_config: FilterConfig,
) -> tuple[str, FilterVerdict]:
    attr_for_path = f"{cell.category}:{cell.base_tag}" if role == ROLE_BASE else cell.attribute_id
    out_path = image_rel_path(cell.pose_id, attr_for_path, attempt, role)
    response = services.generate(GenerateRequest(
        prompt=prompt,
        negative_prompt=cell.negative_prompt,
        noise_seed=seed,
        conditioning=cell.conditioning,
        image_size=cell.image_size,
        output_path=out_path,
        pose_id=cell.pose_id,
        attribute_id=attr_for_path,
        role=role,
        attempt=attempt,
        oracle=cell.oracle,
    ))
    verdict = apply_filters(
        image_path=response.image_path,
        pose_id=cell.pose_id,
        projected_gt=[list(p) for p in cell.oracle.joints2d],
        gt_visibility=list(cell.oracle.visibility),
        joint_names=cell.oracle.joint_names,
        questions=list(questions),
        services=services,
        config=filter_config,
        keypoint_request_factory=lambda path, pid: KeypointRequest(
            image_path=path, pose_id=pid, oracle=cell.oracle
        ),
    )
    return response.image_path, verdict


def generate_pair(
    cell: CellSpec,
    experiment_seed: int,
    services: ServiceHub,
    filter_config: FilterConfig,
    base_cache: _BaseCache | None = None,
    max_attempts: int = MAX_ATTEMPTS_PER_CELL,
) -> tuple[SamplePair | Rejection, list[dict]]:
    """Run the retry loop for one cell; returns the outcome and the attempt
    records destined for the manifest."""
    base_cache = base_cache or _BaseCache()
    records = []
    for attempt in range(max_attempts):
        seed = derive_seed(experiment_seed, cell.pose_id, attempt)
        base_key = (cell.category, cell.base_tag, cell.pose_id, attempt)
        base_image, base_verdict = base_cache.obtain(
            base_key,
            lambda: _generate_and_filter(
                cell, cell.base_prompt, cell.base_questions, ROLE_BASE,
                attempt, seed, services, filter_config,
            ),
        )
        att_image, att_verdict = _generate_and_filter(
            cell, cell.att_prompt, cell.att_questions, ROLE_ATT,
            attempt, seed, services, filter_config,
        )
        passed = base_verdict.passed and att_verdict.passed
        record = {
            "record": "attempt",
            "pose_id": cell.pose_id,
            "attribute_id": cell.attribute_id,
            "category": cell.category,
            "attempt": attempt,
            "noise_seed": seed,
            "base_image": base_image,
            "att_image": att_image,
            "base_verdict": base_verdict.to_record(),
            "att_verdict": att_verdict.to_record(),
            "valid": passed,
            "outcome": None,
        }
        records.append(record)
        if passed:
            record["outcome"] = "valid"
            pair = SamplePair(
                pose_id=cell.pose_id,
                attribute_id=cell.attribute_id,
                noise_seed=seed,
                base_image_path=base_image,
                attribute_image_path=att_image,
                attempt_index=attempt,
                base_verdict=base_verdict,
                attribute_verdict=att_verdict,
                valid=True,
            )
            return pair, records
    records[-1]["outcome"] = "rejected"
    return Rejection(cell.pose_id, cell.attribute_id, max_attempts), records


# ---------------------------------------------------------------------------
# Manifest


def _dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class ManifestWriter:
    """Append-only line-delimited JSON with whole-cell atomic appends."""

    def __init__(self, path: str | Path, config_hash: str, protocol_version: str,
                 mode: str = "pairs"):
        self.path = Path(path)
        self._lock = threading.Lock()
        if not self.path.exists():
            header = {
                "record": "header",
                "schema": MANIFEST_SCHEMA,
                "protocol_version": protocol_version,
                "config_hash": config_hash,
                "mode": mode,
            }
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(_dump_record(header) + "\n")

    def append_cell(self, records: list[dict]) -> None:
        blob = "".join(_dump_record(r) + "\n" for r in records)
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(blob)
                fh.flush()
                os.fsync(fh.fileno())


class BenchmarkManifest:
    """Parsed manifest: header plus every attempt record ever made."""

    def __init__(self, header: dict, attempts: list[dict], footer: dict | None = None):
        self.header = header
        self.attempts = attempts
        self.footer = footer

    @classmethod
    def load(cls, path: str | Path) -> "BenchmarkManifest":
        path = Path(path)
        header = None
        footer = None
        attempts = []
        lines = path.read_text().splitlines()
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                if i == len(lines) - 1:
                    continue  # torn final write; the cell will be redone
                raise
            kind = record.get("record")
            if kind == "header":
                header = record
            elif kind == "attempt":
                attempts.append(record)
            elif kind == "footer":
                footer = record
        if header is None:
            raise ValueError(f"{path}: manifest has no header record")
        return cls(header, attempts, footer)

    @property
    def finalized(self) -> bool:
        return bool(self.footer and self.footer.get("finalized"))

    @property
    def mode(self) -> str:
        return self.header.get("mode", "pairs")

    def completed_cells(self) -> set[tuple[str, str]]:
        return {
            (r["pose_id"], r["attribute_id"])
            for r in self.attempts
            if r.get("outcome") in ("valid", "rejected")
        }

    def attribute_ids(self) -> list[str]:
        seen = []
        for r in self.attempts:
            if r["attribute_id"] not in seen:
                seen.append(r["attribute_id"])
        return seen

    def attempts_for_cell(self, pose_id: str, attribute_id: str) -> list[dict]:
        cell = [
            r for r in self.attempts
            if r["pose_id"] == pose_id and r["attribute_id"] == attribute_id
        ]
        return sorted(cell, key=lambda r: r["attempt"])

    def valid_pairs(self, attribute_id: str) -> dict[str, SamplePair]:
        out = {}
        for r in self.attempts:
            if r["attribute_id"] == attribute_id and r.get("outcome") == "valid":
                out[r["pose_id"]] = SamplePair(
                    pose_id=r["pose_id"],
                    attribute_id=r["attribute_id"],
                    noise_seed=int(r["noise_seed"]),
                    base_image_path=r["base_image"],
                    attribute_image_path=r["att_image"],
                    attempt_index=int(r["attempt"]),
                    base_verdict=FilterVerdict.from_record(r["base_verdict"]),
                    attribute_verdict=FilterVerdict.from_record(r["att_verdict"]),
                    valid=True,
                )
        return out

    def valid_ids(self, attribute_id: str) -> set[str]:
        if self.mode == "replica":
            return {
                r["pose_id"] for r in self.attempts
                if r["attribute_id"] == attribute_id and r.get("outcome") == "valid"
            }
        return set(self.valid_pairs(attribute_id))

    def valid_replicas(self) -> dict[str, dict]:
        """pose_id -> final valid replica attempt record."""
        return {
            r["pose_id"]: r for r in self.attempts
            if r.get("outcome") == "valid" and "image" in r
        }


def intersect_valid(manifest: BenchmarkManifest, attribute_ids: list[str]) -> set[str]:
    """Pose ids valid for every listed attribute (their shared base images
    passed by construction of pair validity)."""
    known = set(manifest.attribute_ids())
    result: set[str] | None = None
    for attribute_id in attribute_ids:
        if attribute_id not in known:
            raise KeyError(f"attribute {attribute_id!r} not present in manifest")
        ids = manifest.valid_ids(attribute_id)
        result = ids if result is None else (result & ids)
    return result or set()


def finalize_manifest(path: str | Path) -> BenchmarkManifest:
    """Rewrite with canonical record order and a summary footer; running it
    again on the result is a no-op byte for byte."""
    path = Path(path)
    manifest = BenchmarkManifest.load(path)
    attempts = sorted(
        manifest.attempts,
        key=lambda r: (r["pose_id"], r["attribute_id"], r["attempt"]),
    )
    valid_counts: dict[str, int] = {}
    for r in attempts:
        if r.get("outcome") == "valid":
            valid_counts[r["attribute_id"]] = valid_counts.get(r["attribute_id"], 0) + 1
    footer = {
        "record": "footer",
        "finalized": True,
        "cells": len({(r["pose_id"], r["attribute_id"]) for r in attempts}),
        "valid_counts": dict(sorted(valid_counts.items())),
    }
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        fh.write(_dump_record(manifest.header) + "\n")
        for r in attempts:
            fh.write(_dump_record(r) + "\n")
        fh.write(_dump_record(footer) + "\n")
    tmp.replace(path)
    return BenchmarkManifest(manifest.header, attempts, footer)


# ---------------------------------------------------------------------------
# Replica generation (single image per pose, prompt from per-pose slots)


@dataclass(frozen=True)
class ReplicaCell:
    pose_id: str
    prompt: str
    questions: tuple[tuple[str, str], ...]
    conditioning: ConditioningRefs
    oracle: OracleInfo
    image_size: tuple[int, int]
    negative_prompt: str = ""


def generate_replica(
    cell: ReplicaCell,
    experiment_seed: int,
    services: ServiceHub,
    filter_config: FilterConfig,
    max_attempts: int = MAX_ATTEMPTS_PER_CELL,
) -> list[dict]:
    records = []
    for attempt in range(max_attempts):
        seed = derive_seed(experiment_seed, cell.pose_id, attempt)
        out_path = image_rel_path(cell.pose_id, "replica", attempt, ROLE_BASE)
        response = services.generate(GenerateRequest(
            prompt=cell.prompt,
            negative_prompt=cell.negative_prompt,
            noise_seed=seed,
            conditioning=cell.conditioning,
            image_size=cell.image_size,
            output_path=out_path,
            pose_id=cell.pose_id,
            attribute_id="replica",
            role=ROLE_BASE,
            attempt=attempt,
            oracle=cell.oracle,
        ))
        verdict = apply_filters(
            image_path=response.image_path,
            pose_id=cell.pose_id,
            projected_gt=[list(p) for p in cell.oracle.joints2d],
            gt_visibility=list(cell.oracle.visibility),
            joint_names=cell.oracle.joint_names,
            questions=list(cell.questions),
            services=services,
            config=filter_config,
            keypoint_request_factory=lambda path, pid: KeypointRequest(
                image_path=path, pose_id=pid, oracle=cell.oracle
            ),
        )
        record = {
            "record": "attempt",
            "pose_id": cell.pose_id,
            "attribute_id": "replica",
            "category": "replica",
            "attempt": attempt,
            "noise_seed": seed,
            "image": response.image_path,
            "verdict": verdict.to_record(),
            "valid": verdict.passed,
            "outcome": "valid" if verdict.passed else None,
        }
        records.append(record)
        if verdict.passed:
            return records
    records[-1]["outcome"] = "rejected"
    return records


def build_replica(
    cells: list[ReplicaCell],
    manifest_path: str | Path,
    experiment_seed: int,
    services: ServiceHub,
    filter_config: FilterConfig,
    config_hash: str,
    protocol_version: str = "1",
    parallelism: int = 1,
    resume: bool = True,
) -> BenchmarkManifest:
    manifest_path = Path(manifest_path)
    done: set[tuple[str, str]] = set()
    if manifest_path.exists():
        if not resume:
            manifest_path.unlink()
        else:
            existing = BenchmarkManifest.load(manifest_path)
            if existing.finalized:
                lines = [_dump_record(existing.header)] + [
                    _dump_record(r) for r in existing.attempts
                ]
                manifest_path.write_text("".join(l + "\n" for l in lines))
            done = existing.completed_cells()

    writer = ManifestWriter(manifest_path, config_hash, protocol_version, mode="replica")
    todo = [c for c in sorted(cells, key=lambda c: c.pose_id) if (c.pose_id, "replica") not in done]

    def run_cell(cell: ReplicaCell):
        writer.append_cell(generate_replica(cell, experiment_seed, services, filter_config))

    try:
        if parallelism <= 1:
            for cell in todo:
                run_cell(cell)
        else:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                for fut in [pool.submit(run_cell, c) for c in todo]:
                    fut.result()
    except (ServiceTransportError, ServiceProtocolError) as exc:
        raise OrchestrationAborted(
            f"service failure, manifest is resumable at {manifest_path}: {exc}"
        ) from exc
    return finalize_manifest(manifest_path)


# ---------------------------------------------------------------------------
# Full benchmark build


def build_benchmark(
    cells: list[CellSpec],
    manifest_path: str | Path,
    experiment_seed: int,
    services: ServiceHub,
    filter_config: FilterConfig,
    config_hash: str,
    protocol_version: str = "1",
    parallelism: int = 1,
    resume: bool = True,
) -> BenchmarkManifest:
    """Run every (pose, attribute) cell, skipping cells already completed in
    an existing manifest, and finalize deterministically.

    Cells are independent work units; manifest appends are serialized, and
    the finalized manifest does not depend on execution order.
    """
    manifest_path = Path(manifest_path)
    done: set[tuple[str, str]] = set()
    if manifest_path.exists():
        if not resume:
            manifest_path.unlink()
        else:
            existing = BenchmarkManifest.load(manifest_path)
            if existing.finalized:
                # Completed cells survive finalize; strip the footer so new
                # appends (if any) stay well-formed.
                lines = [
                    _dump_record(existing.header)
                ] + [_dump_record(r) for r in existing.attempts]
                manifest_path.write_text("".join(l + "\n" for l in lines))
            done = existing.completed_cells()

    writer = ManifestWriter(manifest_path, config_hash, protocol_version)
    base_cache = _BaseCache()
    todo = [
        c for c in sorted(cells, key=lambda c: (c.pose_id, c.attribute_id))
        if (c.pose_id, c.attribute_id) not in done
    ]

    def run_cell(cell: CellSpec):
        outcome, records = generate_pair(
            cell, experiment_seed, services, filter_config, base_cache=base_cache
        )
        writer.append_cell(records)
        return outcome

    if parallelism <= 1:
        try:
            for cell in todo:
                run_cell(cell)
        except (ServiceTransportError, ServiceProtocolError) as exc:
            raise OrchestrationAborted(
                f"service failure, manifest is resumable at {manifest_path}: {exc}"
            ) from exc
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(run_cell, c) for c in todo]
            done_set, _ = wait(futures, return_when=FIRST_EXCEPTION)
            failure = None
            for fut in done_set:
                exc = fut.exception()
                if exc is not None:
                    failure = exc
                    break
            if failure is not None:
                for fut in futures:
                    fut.cancel()
                if isinstance(failure, (ServiceTransportError, ServiceProtocolError)):
                    raise OrchestrationAborted(
                        f"service failure, manifest is resumable at {manifest_path}: {failure}"
                    ) from failure
                raise failure

    return finalize_manifest(manifest_path)
