"""Experiment configuration: one YAML file, environment overrides for
service endpoints only, and a content hash that identifies a run."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cond_render import RenderConfig
from .filters import FilterConfig
from .metrics import EvalConfig, EvalError
from .prompt_catalog import Catalog, catalog_from_dict, load_catalog
from .services import (
    EstimatorErrorModel,
    MockServicesConfig,
    MockServiceHub,
    RemoteServiceHub,
    ServiceEndpoints,
    ServiceHub,
)

ENDPOINT_ENV_VARS = {
    "generate": "STAGE_AUDIT_ENDPOINT_GENERATE",
    "estimate": "STAGE_AUDIT_ENDPOINT_ESTIMATE",
    "keypoints": "STAGE_AUDIT_ENDPOINT_KEYPOINTS",
    "vqa": "STAGE_AUDIT_ENDPOINT_VQA",
}

MOCK_ENDPOINT = "mock:"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


@dataclass
class SamplingConfig:
    count: int = 0  # 0 = keep all
    per_label: int = 0  # 0 = no balancing
    labels: tuple[str, ...] = ("male", "female")


@dataclass
class ReplicaConfig:
    slots_file: str | None = None
    real_mpjpe_mm: float | None = None
    real_pa_mpjpe_mm: float | None = None


@dataclass
class ExperimentConfig:
    experiment: str
    workspace: Path
    body_model: Path
    pose_corpus: Path
    experiment_seed: int = 0
    parallelism: int = 1
    corpus_joints: int = 24
    negative_prompt: str = ""
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    catalog: Catalog | None = None
    endpoints: dict[str, str] = field(default_factory=lambda: {
        "generate": MOCK_ENDPOINT,
        "estimate": MOCK_ENDPOINT,
        "keypoints": MOCK_ENDPOINT,
        "vqa": MOCK_ENDPOINT,
    })
    service_retries: int = 3
    service_backoff_s: float = 0.2
    mock: MockServicesConfig = field(default_factory=MockServicesConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    estimator_name: str = "estimator"
    fid: dict[str, float] = field(default_factory=dict)
    replica: ReplicaConfig = field(default_factory=ReplicaConfig)
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        """Hash of the canonical config content, excluding the workspace root
        so identical experiments in different locations compare equal."""
        stripped = {k: v for k, v in self.raw.items() if k != "workspace"}
        blob = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def make_services(self) -> ServiceHub:
        values = set(self.endpoints.values())
        if values == {MOCK_ENDPOINT}:
            return MockServiceHub(self.mock, self.workspace)
        if MOCK_ENDPOINT in values:
            raise ConfigError(["endpoints mix mock: with remote schemes; use one or the other"])
        return RemoteServiceHub(
            ServiceEndpoints(
                generate=self.endpoints["generate"],
                estimate=self.endpoints["estimate"],
                keypoints=self.endpoints["keypoints"],
                vqa=self.endpoints["vqa"],
            ),
            retries=self.service_retries,
            backoff_s=self.service_backoff_s,
        )


def _as_tuple_pairs(d: dict | None) -> tuple[tuple[str, float], ...]:
    return tuple((str(k), float(v)) for k, v in (d or {}).items())


def load_experiment_config(path: str | Path, env: dict | None = None) -> ExperimentConfig:
    """Parse, apply endpoint environment overrides, and validate.

    Validation reports every problem at once rather than stopping at the
    first.
    """
    env = dict(os.environ if env is None else env)
    path = Path(path)
    problems: list[str] = []
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    raw = yaml.safe_load(path.read_text()) or {}
    base_dir = path.parent

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (base_dir / p)

    for key in ("experiment", "workspace", "body_model", "pose_corpus"):
        if key not in raw:
            problems.append(f"missing required field {key!r}")
    if problems:
        raise ConfigError(problems)

    body_model = resolve(raw["body_model"])
    pose_corpus = resolve(raw["pose_corpus"])
    if not body_model.is_file():
        problems.append(f"body_model file does not exist: {body_model}")
    if not pose_corpus.is_file():
        problems.append(f"pose_corpus file does not exist: {pose_corpus}")

    catalog = None
    cat_raw = raw.get("catalog")
    if isinstance(cat_raw, str):
        cat_path = resolve(cat_raw)
        if not cat_path.is_file():
            problems.append(f"catalog file does not exist: {cat_path}")
        else:
            catalog = load_catalog(cat_path)
    elif isinstance(cat_raw, dict):
        try:
            catalog = catalog_from_dict(cat_raw)
        except Exception as exc:
            problems.append(f"catalog: {exc}")
    elif cat_raw is not None:
        problems.append("catalog must be a path or a mapping")

    parallelism = int(raw.get("parallelism", 1))
    if parallelism < 1:
        problems.append(f"parallelism must be >= 1, got {parallelism}")
    seed = int(raw.get("experiment_seed", 0))
    if not 0 <= seed < 2 ** 64:
        problems.append(f"experiment_seed must fit in 64 bits, got {seed}")

    render_raw = raw.get("render", {})
    try:
        size = render_raw.get("image_size", [512, 512])
        render = RenderConfig(
            image_size=(int(size[0]), int(size[1])),
            focal_normalized=float(render_raw.get("focal_normalized", 4.0)),
            margin=float(render_raw.get("margin", 0.1)),
            orient_frontal=bool(render_raw.get("orient_frontal", True)),
            orient_grid_deg=float(render_raw.get("orient_grid_deg", 5.0)),
            occlusion_tol_m=float(render_raw.get("occlusion_tol_m", 0.15)),
        )
        if render.image_size[0] <= 0 or render.image_size[1] <= 0:
            problems.append(f"render.image_size must be positive, got {render.image_size}")
        if render.focal_normalized <= 0:
            problems.append("render.focal_normalized must be positive")
        if render.margin < 0:
            problems.append("render.margin must be nonnegative")
    except (TypeError, ValueError, IndexError) as exc:
        problems.append(f"render section: {exc}")
        render = RenderConfig()

    filters_raw = raw.get("filters", {})
    filt = FilterConfig(
        threshold_px=float(filters_raw.get("threshold_px", 50.0)),
        selected_joints=tuple(filters_raw.get(
            "selected_joints", FilterConfig.selected_joints)),
        vqa_enabled=bool(filters_raw.get("vqa_enabled", True)),
    )
    if filt.threshold_px < 0:
        problems.append("filters.threshold_px must be nonnegative")

    eval_raw = raw.get("eval", {})
    try:
        eval_cfg = EvalConfig(
            tau_mm=float(eval_raw.get("tau_mm", 50.0)),
            alignment=eval_raw.get("alignment", "similarity"),
            root_joint=eval_raw.get("root_joint", "pelvis"),
            joint_maps={
                k: [(int(i), str(n)) for i, n in v]
                for k, v in (eval_raw.get("joint_maps") or {}).items()
            },
            stability_step=int(eval_raw.get("stability_step", 50)),
        )
    except (EvalError, TypeError, ValueError) as exc:
        problems.append(f"eval section: {exc}")
        eval_cfg = EvalConfig()

    services_raw = raw.get("services", {})
    endpoints = {}
    for name in ("generate", "estimate", "keypoints", "vqa"):
        value = services_raw.get(name, MOCK_ENDPOINT)
        override = env.get(ENDPOINT_ENV_VARS[name])
        if override:
            value = override
        if not (value == MOCK_ENDPOINT or value.startswith(("http://", "https://", "stdio:"))):
            problems.append(
                f"services.{name}: unsupported endpoint {value!r} "
                "(use mock:, http(s)://, or stdio:)"
            )
        endpoints[name] = value

    mock_raw = services_raw.get("mock", {})
    err_raw = mock_raw.get("estimator_error", {})
    pop_path = err_raw.get("population_path")
    if pop_path:
        pop_path = str(resolve(pop_path))
    mock = MockServicesConfig(
        estimator_error=EstimatorErrorModel(
            displacement_mm=float(err_raw.get("displacement_mm", 0.0)),
            joint_index=int(err_raw.get("joint_index", 0)),
            degrade_fraction=float(err_raw.get("degrade_fraction", 0.0)),
            selection_seed=int(err_raw.get("selection_seed", 0)),
            target_role=err_raw.get("target_role", "att"),
            population=tuple(err_raw.get("population", [])),
            population_path=pop_path,
        ),
        keypoint_noise_px=float(mock_raw.get("keypoint_noise_px", 0.0)),
        keypoint_noise_overrides=_as_tuple_pairs(mock_raw.get("keypoint_noise_overrides")),
        extra_person=bool(mock_raw.get("extra_person", False)),
        vqa_fail_on=mock_raw.get("vqa_fail_on"),
    )

    sampling_raw = raw.get("sampling", {})
    sampling = SamplingConfig(
        count=int(sampling_raw.get("count", 0)),
        per_label=int(sampling_raw.get("per_label", 0)),
        labels=tuple(sampling_raw.get("labels", ("male", "female"))),
    )
    if sampling.count < 0 or sampling.per_label < 0:
        problems.append("sampling counts must be nonnegative")

    replica_raw = raw.get("replica", {})
    replica = ReplicaConfig(
        slots_file=str(resolve(replica_raw["slots_file"])) if replica_raw.get("slots_file") else None,
        real_mpjpe_mm=replica_raw.get("real_mpjpe_mm"),
        real_pa_mpjpe_mm=replica_raw.get("real_pa_mpjpe_mm"),
    )

    if problems:
        raise ConfigError(problems)

    return ExperimentConfig(
        experiment=str(raw["experiment"]),
        workspace=resolve(raw["workspace"]),
        body_model=body_model,
        pose_corpus=pose_corpus,
        experiment_seed=seed,
        parallelism=parallelism,
        corpus_joints=int(raw.get("corpus_joints", 24)),
        negative_prompt=str(raw.get("negative_prompt", "")),
        sampling=sampling,
        render=render,
        catalog=catalog,
        endpoints=endpoints,
        service_retries=int(services_raw.get("retries", 3)),
        service_backoff_s=float(services_raw.get("backoff_s", 0.2)),
        mock=mock,
        filters=filt,
        eval=eval_cfg,
        estimator_name=str(raw.get("report", {}).get("estimator", "estimator")),
        fid={k: float(v) for k, v in (raw.get("report", {}).get("fid") or {}).items()},
        replica=replica,
        raw=raw,
    )
