"""Wire protocol for the four external model services, plus in-process mocks.

One JSON document per request and per response. Every document carries
``protocol_version``; a mismatch is a hard error. Image data never travels
inline: requests reference files by path relative to a workspace root shared
between harness and service. Deterministic mock backends make the whole
pipeline runnable without any ML runtime; every mock derivation is keyed by
sha256 so independent implementations of the protocol can reproduce it.
"""

from __future__ import annotations

import hashlib
import json
import math
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests as _requests
from PIL import Image

PROTOCOL_VERSION = "1"

ROLE_BASE = "base"
ROLE_ATT = "att"


class ServiceTransportError(RuntimeError):
    """Endpoint unreachable or persistently failing at the transport level."""


class ServiceProtocolError(RuntimeError):
    """Response violates the wire schema or the protocol version."""


def hash64(text: str) -> int:
    """First 8 bytes of sha256 as an unsigned big-endian integer."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def unit_fraction(text: str) -> float:
    """Deterministic value in [0, 1) derived from ``text``."""
    return hash64(text) / 2.0 ** 64


# ---------------------------------------------------------------------------
# Protocol types


@dataclass(frozen=True)
class ConditioningRefs:
    """Paths of the three conditioning images; None marks an input withheld
    from the generator (an all-background condition)."""

    depth: str | None
    semantic: str | None
    skeleton: str | None

    def to_wire(self) -> dict:
        return {"depth": self.depth, "semantic": self.semantic, "skeleton": self.skeleton}

    @classmethod
    def from_wire(cls, d: dict) -> "ConditioningRefs":
        return cls(depth=d.get("depth"), semantic=d.get("semantic"), skeleton=d.get("skeleton"))

    @classmethod
    def zeroed(cls) -> "ConditioningRefs":
        return cls(depth=None, semantic=None, skeleton=None)


@dataclass(frozen=True)
class OracleInfo:
    """Ground-truth joints attached to requests for mock backends.

    Real backends ignore this block; mock estimators and keypoint detectors
    perturb it deterministically.
    """

    joints3d_cam: tuple[tuple[float, float, float], ...]
    joints2d: tuple[tuple[float, float], ...]
    visibility: tuple[bool, ...]
    joint_names: tuple[str, ...]
    keypoint_skeleton: str

    def to_wire(self) -> dict:
        return {
            "joints3d_cam": [list(p) for p in self.joints3d_cam],
            "joints2d": [list(p) for p in self.joints2d],
            "visibility": list(self.visibility),
            "joint_names": list(self.joint_names),
            "keypoint_skeleton": self.keypoint_skeleton,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "OracleInfo":
        return cls(
            joints3d_cam=tuple(tuple(float(v) for v in p) for p in d["joints3d_cam"]),
            joints2d=tuple(tuple(float(v) for v in p) for p in d["joints2d"]),
            visibility=tuple(bool(v) for v in d["visibility"]),
            joint_names=tuple(d["joint_names"]),
            keypoint_skeleton=d["keypoint_skeleton"],
        )


@dataclass(frozen=True)
class GenerateRequest:
    prompt: str
    negative_prompt: str
    noise_seed: int
    conditioning: ConditioningRefs
    image_size: tuple[int, int]
    output_path: str
    pose_id: str
    attribute_id: str
    role: str
    attempt: int
    oracle: OracleInfo | None = None

    kind = "generate_request"

    def __post_init__(self):
        if not 0 <= self.noise_seed < 2 ** 64:
            raise ValueError("noise_seed must be an unsigned 64-bit integer")

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "prompt": self.prompt,
            "negative_prompt": self.negative_prompt,
            "noise_seed": self.noise_seed,
            "conditioning": self.conditioning.to_wire(),
            "image_size": [int(self.image_size[0]), int(self.image_size[1])],
            "output_path": self.output_path,
            "pose_id": self.pose_id,
            "attribute_id": self.attribute_id,
            "role": self.role,
            "attempt": self.attempt,
            "oracle": self.oracle.to_wire() if self.oracle else None,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "GenerateRequest":
        _check_wire(d, cls.kind)
        return cls(
            prompt=d["prompt"],
            negative_prompt=d.get("negative_prompt", ""),
            noise_seed=int(d["noise_seed"]),
            conditioning=ConditioningRefs.from_wire(d["conditioning"]),
            image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
            output_path=d["output_path"],
            pose_id=d["pose_id"],
            attribute_id=d["attribute_id"],
            role=d["role"],
            attempt=int(d["attempt"]),
            oracle=OracleInfo.from_wire(d["oracle"]) if d.get("oracle") else None,
        )


@dataclass(frozen=True)
class GenerateResponse:
    image_path: str

    kind = "generate_response"

    def to_wire(self) -> dict:
        return {"protocol_version": PROTOCOL_VERSION, "kind": self.kind, "image_path": self.image_path}

    @classmethod
    def from_wire(cls, d: dict) -> "GenerateResponse":
        _check_wire(d, cls.kind)
        return cls(image_path=d["image_path"])


@dataclass(frozen=True)
class EstimateRequest:
    image_path: str
    pose_id: str
    role: str
    oracle: OracleInfo | None = None

    kind = "estimate_request"

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "image_path": self.image_path,
            "pose_id": self.pose_id,
            "role": self.role,
            "oracle": self.oracle.to_wire() if self.oracle else None,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "EstimateRequest":
        _check_wire(d, cls.kind)
        return cls(
            image_path=d["image_path"],
            pose_id=d["pose_id"],
            role=d["role"],
            oracle=OracleInfo.from_wire(d["oracle"]) if d.get("oracle") else None,
        )


@dataclass(frozen=True)
class EstimateResponse:
    joints3d: tuple[tuple[float, float, float], ...]
    joint_format: str
    confidence: float | None = None

    kind = "estimate_response"

    def __post_init__(self):
        for p in self.joints3d:
            if not all(math.isfinite(v) for v in p):
                raise ValueError("joints3d must be finite")

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "joints3d": [list(p) for p in self.joints3d],
            "joint_format": self.joint_format,
            "confidence": self.confidence,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "EstimateResponse":
        _check_wire(d, cls.kind)
        return cls(
            joints3d=tuple(tuple(float(v) for v in p) for p in d["joints3d"]),
            joint_format=d["joint_format"],
            confidence=None if d.get("confidence") is None else float(d["confidence"]),
        )


@dataclass(frozen=True)
class DetectedPerson:
    keypoints: tuple[tuple[float, float], ...]
    confidence: tuple[float, ...]

    def to_wire(self) -> dict:
        return {"keypoints": [list(p) for p in self.keypoints], "confidence": list(self.confidence)}

    @classmethod
    def from_wire(cls, d: dict) -> "DetectedPerson":
        return cls(
            keypoints=tuple(tuple(float(v) for v in p) for p in d["keypoints"]),
            confidence=tuple(float(v) for v in d["confidence"]),
        )


@dataclass(frozen=True)
class KeypointRequest:
    image_path: str
    pose_id: str
    oracle: OracleInfo | None = None

    kind = "keypoint_request"

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "image_path": self.image_path,
            "pose_id": self.pose_id,
            "oracle": self.oracle.to_wire() if self.oracle else None,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "KeypointRequest":
        _check_wire(d, cls.kind)
        return cls(
            image_path=d["image_path"],
            pose_id=d["pose_id"],
            oracle=OracleInfo.from_wire(d["oracle"]) if d.get("oracle") else None,
        )


@dataclass(frozen=True)
class KeypointResponse:
    persons: tuple[DetectedPerson, ...]

    kind = "keypoint_response"

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "persons": [p.to_wire() for p in self.persons],
        }

    @classmethod
    def from_wire(cls, d: dict) -> "KeypointResponse":
        _check_wire(d, cls.kind)
        return cls(persons=tuple(DetectedPerson.from_wire(p) for p in d["persons"]))


@dataclass(frozen=True)
class VQARequest:
    image_path: str
    questions: tuple[str, ...]

    kind = "vqa_request"

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "image_path": self.image_path,
            "questions": list(self.questions),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "VQARequest":
        _check_wire(d, cls.kind)
        return cls(image_path=d["image_path"], questions=tuple(d["questions"]))


@dataclass(frozen=True)
class VQAResponse:
    answers: tuple[str, ...]

    kind = "vqa_response"

    def to_wire(self) -> dict:
        return {
            "protocol_version": PROTOCOL_VERSION,
            "kind": self.kind,
            "answers": list(self.answers),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "VQAResponse":
        _check_wire(d, cls.kind)
        return cls(answers=tuple(d["answers"]))


_RESPONSE_TYPES = {
    GenerateRequest.kind: GenerateResponse,
    EstimateRequest.kind: EstimateResponse,
    KeypointRequest.kind: KeypointResponse,
    VQARequest.kind: VQAResponse,
}

WIRE_TYPES = {
    cls.kind: cls
    for cls in (
        GenerateRequest, GenerateResponse, EstimateRequest, EstimateResponse,
        KeypointRequest, KeypointResponse, VQARequest, VQAResponse,
    )
}


def _check_wire(d: dict, kind: str) -> None:
    if d.get("protocol_version") != PROTOCOL_VERSION:
        raise ServiceProtocolError(
            f"protocol version mismatch: got {d.get('protocol_version')!r}, "
            f"expected {PROTOCOL_VERSION!r}"
        )
    if d.get("kind") != kind:
        raise ServiceProtocolError(f"expected kind {kind!r}, got {d.get('kind')!r}")


def canonical_json(wire: dict) -> str:
    return json.dumps(wire, sort_keys=True, separators=(",", ":"))


def parse_message(d: dict):
    if d.get("kind") == "error":
        err = d.get("error", {})
        raise ServiceProtocolError(
            f"service error {err.get('code', 'unknown')}: {err.get('message', '')}"
        )
    cls = WIRE_TYPES.get(d.get("kind", ""))
    if cls is None:
        raise ServiceProtocolError(f"unknown message kind {d.get('kind')!r}")
    return cls.from_wire(d)


# ---------------------------------------------------------------------------
# Transport


def call_service(
    endpoint: str,
    request,
    retries: int = 3,
    backoff_s: float = 0.2,
    timeout_s: float = 60.0,
):
    """POST one request document to ``endpoint`` and parse the response.

    ``http(s)://`` endpoints use HTTP POST; ``stdio:<command>`` runs the
    command once per request with JSON on stdin/stdout. Transport failures
    retry with exponential backoff; schema violations do not.
    """
    expected = _RESPONSE_TYPES[request.kind]
    payload = request.to_wire()
    last_exc: Exception | None = None
    for attempt in range(retries + 1):
        try:
            if endpoint.startswith(("http://", "https://")):
                resp = _requests.post(endpoint, json=payload, timeout=timeout_s)
                if resp.status_code != 200:
                    raise ServiceTransportError(
                        f"endpoint {endpoint}: HTTP {resp.status_code}"
                    )
                body = resp.json()
            elif endpoint.startswith("stdio:"):
                cmd = shlex.split(endpoint[len("stdio:"):])
                proc = subprocess.run(
                    cmd,
                    input=canonical_json(payload).encode("utf-8"),
                    capture_output=True,
                    timeout=timeout_s,
                )
                if proc.returncode != 0:
                    raise ServiceTransportError(
                        f"endpoint {endpoint}: exit code {proc.returncode}: "
                        f"{proc.stderr.decode('utf-8', 'replace')[:500]}"
                    )
                body = json.loads(proc.stdout.decode("utf-8"))
            else:
                raise ServiceProtocolError(f"unsupported endpoint scheme: {endpoint}")
        except (_requests.RequestException, subprocess.TimeoutExpired, OSError, ServiceTransportError) as exc:
            last_exc = exc
            if attempt < retries:
                time.sleep(backoff_s * (2 ** attempt))
                continue
            raise ServiceTransportError(
                f"endpoint {endpoint} failed after {retries + 1} attempts: {exc}"
            ) from exc
        except json.JSONDecodeError as exc:
            raise ServiceProtocolError(f"endpoint {endpoint}: malformed JSON response") from exc

        msg = parse_message(body)
        if not isinstance(msg, expected):
            raise ServiceProtocolError(
                f"endpoint {endpoint}: expected {expected.kind}, got {body.get('kind')!r}"
            )
        return msg
    raise ServiceTransportError(f"endpoint {endpoint}: {last_exc}")  # pragma: no cover


# ---------------------------------------------------------------------------
# Mock backends


@dataclass(frozen=True)
class EstimatorErrorModel:
    """Deterministic degradation injected by the mock pose estimator.

    A fixed fraction of pose ids (selected by ranking sha256 hashes, so the
    subset has exactly floor(fraction * N) members) receives a single-joint
    displacement on images of the target role.
    """

    displacement_mm: float = 0.0
    joint_index: int = 0
    degrade_fraction: float = 0.0
    selection_seed: int = 0
    target_role: str = ROLE_ATT
    population: tuple[str, ...] = ()
    population_path: str | None = None

    def population_ids(self) -> tuple[str, ...]:
        if self.population:
            return self.population
        if self.population_path:
            ids = []
            for line in Path(self.population_path).read_text().splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    ids.append(line.split()[0])
            return tuple(ids)
        return ()

    def degraded_ids(self) -> frozenset[str]:
        ids = self.population_ids()
        count = math.floor(self.degrade_fraction * len(ids))
        ranked = sorted(ids, key=lambda i: (hash64(f"{self.selection_seed}:{i}"), i))
        return frozenset(ranked[:count])

    def to_wire(self) -> dict:
        return {
            "displacement_mm": self.displacement_mm,
            "joint_index": self.joint_index,
            "degrade_fraction": self.degrade_fraction,
            "selection_seed": self.selection_seed,
            "target_role": self.target_role,
            "population": list(self.population),
            "population_path": self.population_path,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "EstimatorErrorModel":
        return cls(
            displacement_mm=float(d.get("displacement_mm", 0.0)),
            joint_index=int(d.get("joint_index", 0)),
            degrade_fraction=float(d.get("degrade_fraction", 0.0)),
            selection_seed=int(d.get("selection_seed", 0)),
            target_role=d.get("target_role", ROLE_ATT),
            population=tuple(d.get("population", [])),
            population_path=d.get("population_path"),
        )


@dataclass(frozen=True)
class MockServicesConfig:
    estimator_error: EstimatorErrorModel = EstimatorErrorModel()
    keypoint_noise_px: float = 0.0
    keypoint_noise_overrides: tuple[tuple[str, float], ...] = ()
    extra_person: bool = False
    vqa_fail_on: str | None = None

    def to_wire(self) -> dict:
        return {
            "estimator_error": self.estimator_error.to_wire(),
            "keypoint_noise_px": self.keypoint_noise_px,
            "keypoint_noise_overrides": [list(p) for p in self.keypoint_noise_overrides],
            "extra_person": self.extra_person,
            "vqa_fail_on": self.vqa_fail_on,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "MockServicesConfig":
        return cls(
            estimator_error=EstimatorErrorModel.from_wire(d.get("estimator_error", {})),
            keypoint_noise_px=float(d.get("keypoint_noise_px", 0.0)),
            keypoint_noise_overrides=tuple(
                (str(n), float(v)) for n, v in d.get("keypoint_noise_overrides", [])
            ),
            extra_person=bool(d.get("extra_person", False)),
            vqa_fail_on=d.get("vqa_fail_on"),
        )


def mock_generator(request: GenerateRequest, workspace_root: str | Path) -> np.ndarray:
    """Deterministic stand-in image: the semantic conditioning pasted over a
    seed-hashed flat background with seed-and-prompt-hashed jitter.

    Identical (seed, prompt, conditioning) always produce identical pixels;
    the prompt only affects the background, never the body support.
    """
    w, h = request.image_size
    bg_digest = hashlib.sha256(f"bg:{request.noise_seed}".encode()).digest()
    background = np.frombuffer(bg_digest[:3], dtype=np.uint8)
    image = np.tile(background, (h, w, 1))

    rng = np.random.default_rng(hash64(f"jitter:{request.noise_seed}:{request.prompt}"))
    jitter = rng.integers(-8, 9, size=(h, w, 3))
    image = np.clip(image.astype(np.int16) + jitter, 0, 255).astype(np.uint8)

    if request.conditioning.semantic:
        sem_path = Path(workspace_root) / request.conditioning.semantic
        if not sem_path.is_file():
            raise ServiceProtocolError(f"conditioning reference not resolvable: {sem_path}")
        semantic = np.asarray(Image.open(sem_path))
        if semantic.shape[:2] == (h, w):
            mask = semantic.any(axis=2)
            image[mask] = semantic[mask]
    return image


def mock_estimator(
    image_path: str,
    oracle_joints: np.ndarray,
    error_model: EstimatorErrorModel,
    pose_id: str,
    role: str,
) -> np.ndarray:
    """Oracle joints, displaced on one joint for the selected pose ids."""
    joints = np.array(oracle_joints, dtype=np.float64)
    if (
        error_model.displacement_mm > 0.0
        and role == error_model.target_role
        and pose_id in error_model.degraded_ids()
    ):
        joints[error_model.joint_index, 0] += error_model.displacement_mm / 1000.0
    return joints


def mock_keypointer(
    image_path: str,
    oracle_joints2d: np.ndarray,
    visibility: np.ndarray,
    joint_names: tuple[str, ...],
    config: MockServicesConfig,
    pose_id: str,
) -> list[DetectedPerson]:
    """Oracle 2D joints with bounded deterministic jitter; optionally a
    phantom second person shifted by a fixed offset."""
    pts = np.array(oracle_joints2d, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    overrides = dict(config.keypoint_noise_overrides)
    out = pts.copy()
    conf = np.where(vis, 1.0, 0.0)
    for j in range(len(pts)):
        if not vis[j]:
            out[j] = (0.0, 0.0)
            continue
        name = joint_names[j] if j < len(joint_names) else str(j)
        amount = overrides.get(name, config.keypoint_noise_px)
        if amount > 0.0:
            ux = unit_fraction(f"kpx:{pose_id}:{j}") * 2.0 - 1.0
            uy = unit_fraction(f"kpy:{pose_id}:{j}") * 2.0 - 1.0
            norm = math.sqrt(ux * ux + uy * uy)
            if norm > 0.0:
                out[j, 0] += amount * ux / norm
                out[j, 1] += amount * uy / norm
    persons = [DetectedPerson(
        keypoints=tuple((float(x), float(y)) for x, y in out),
        confidence=tuple(float(c) for c in conf),
    )]
    if config.extra_person:
        persons.append(DetectedPerson(
            keypoints=tuple((float(x) + 35.0, float(y) + 35.0) for x, y in out),
            confidence=tuple(float(c) for c in conf),
        ))
    return persons


def mock_vqa(questions: tuple[str, ...], fail_on: str | None) -> tuple[str, ...]:
    """Answers yes except for questions containing the fail_on substring."""
    return tuple(
        "no" if fail_on and fail_on in q else "yes" for q in questions
    )


# ---------------------------------------------------------------------------
# Service hubs


class ServiceHub:
    """Uniform facade over the four services used by the orchestrator."""

    def generate(self, request: GenerateRequest) -> GenerateResponse:
        raise NotImplementedError

    def estimate(self, request: EstimateRequest) -> EstimateResponse:
        raise NotImplementedError

    def keypoints(self, request: KeypointRequest) -> KeypointResponse:
        raise NotImplementedError

    def vqa(self, request: VQARequest) -> VQAResponse:
        raise NotImplementedError


class MockServiceHub(ServiceHub):
    """In-process mock backends writing artifacts under the workspace root."""

    def __init__(self, config: MockServicesConfig, workspace_root: str | Path):
        self.config = config
        self.workspace_root = Path(workspace_root)

    def generate(self, request: GenerateRequest) -> GenerateResponse:
        image = mock_generator(request, self.workspace_root)
        out = self.workspace_root / request.output_path
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image).save(out)
        return GenerateResponse(image_path=request.output_path)

    def estimate(self, request: EstimateRequest) -> EstimateResponse:
        if request.oracle is None:
            raise ServiceProtocolError("mock estimator needs an oracle block")
        joints = mock_estimator(
            request.image_path,
            np.array(request.oracle.joints3d_cam),
            self.config.estimator_error,
            request.pose_id,
            request.role,
        )
        return EstimateResponse(
            joints3d=tuple(tuple(float(v) for v in p) for p in joints),
            joint_format="gt_native",
            confidence=1.0,
        )

    def keypoints(self, request: KeypointRequest) -> KeypointResponse:
        if request.oracle is None:
            raise ServiceProtocolError("mock keypoint detector needs an oracle block")
        persons = mock_keypointer(
            request.image_path,
            np.array(request.oracle.joints2d),
            np.array(request.oracle.visibility),
            request.oracle.joint_names,
            self.config,
            request.pose_id,
        )
        return KeypointResponse(persons=tuple(persons))

    def vqa(self, request: VQARequest) -> VQAResponse:
        return VQAResponse(answers=mock_vqa(request.questions, self.config.vqa_fail_on))


@dataclass(frozen=True)
class ServiceEndpoints:
    generate: str
    estimate: str
    keypoints: str
    vqa: str


class RemoteServiceHub(ServiceHub):
    def __init__(self, endpoints: ServiceEndpoints, retries: int = 3, backoff_s: float = 0.2):
        self.endpoints = endpoints
        self.retries = retries
        self.backoff_s = backoff_s

    def _call(self, endpoint: str, request):
        return call_service(endpoint, request, retries=self.retries, backoff_s=self.backoff_s)

    def generate(self, request: GenerateRequest) -> GenerateResponse:
        return self._call(self.endpoints.generate, request)

    def estimate(self, request: EstimateRequest) -> EstimateResponse:
        return self._call(self.endpoints.estimate, request)

    def keypoints(self, request: KeypointRequest) -> KeypointResponse:
        return self._call(self.endpoints.keypoints, request)

    def vqa(self, request: VQARequest) -> VQAResponse:
        return self._call(self.endpoints.vqa, request)
