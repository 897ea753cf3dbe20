"""Feature records, the append-only feature store and external ingestion."""

from __future__ import annotations

import base64
import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .manifest import CONTEXTS


@dataclass(frozen=True)
class FeatureSpec:
    dims: int
    contexts: tuple[str, ...] = CONTEXTS
    external: bool = False


BUILTIN_FEATURES = {
    "color_hist": FeatureSpec(166),
    "edge_hist": FeatureSpec(64),
    "mslbp": FeatureSpec(236),
    "sc_rgb": FeatureSpec(1024),
    "sc_gray": FeatureSpec(1024),
    "caffe_fc6": FeatureSpec(4096, CONTEXTS, True),
    "drn_concepts": FeatureSpec(1000, ("WI",), True),
    "unet_shape": FeatureSpec(1024, ("WI",), True),
}


@dataclass(frozen=True)
class FeatureRecord:
    sample_id: str
    context: str
    feature_name: str
    vector: np.ndarray

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.sample_id, self.context, self.feature_name)

    def to_json(self) -> str:
        data = np.ascontiguousarray(self.vector, dtype="<f8").tobytes()
        return json.dumps({
            "sample_id": self.sample_id,
            "context": self.context,
            "feature_name": self.feature_name,
            "dims": int(self.vector.shape[0]),
            "vector": base64.b64encode(data).decode("ascii"),
        }, sort_keys=True)


def _parse_vector(raw, where: str) -> np.ndarray:
    if isinstance(raw, str):
        try:
            buf = base64.b64decode(raw, validate=True)
        except ValueError as exc:
            raise ValidationError(f"{where}: vector is not valid base64") from exc
        if len(buf) % 8:
            raise ValidationError(f"{where}: vector byte length {len(buf)} not a multiple of 8")
        return np.frombuffer(buf, dtype="<f8").astype(np.float64)
    if isinstance(raw, list):
        try:
            vec = np.asarray(raw, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"{where}: vector must contain numbers") from exc
        if vec.ndim != 1:
            raise ValidationError(f"{where}: vector must be flat")
        return vec
    raise ValidationError(f"{where}: vector must be a list of numbers or a base64 string")


def parse_record(line: str, where: str = "record") -> FeatureRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{where}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: record must be an object")
    for key in ("sample_id", "context", "feature_name", "vector"):
        if key not in obj:
            raise ValidationError(f"{where}: missing field {key!r}")
    vec = _parse_vector(obj["vector"], where)
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"{where}: vector contains non-finite values")
    return FeatureRecord(str(obj["sample_id"]), str(obj["context"]), str(obj["feature_name"]), vec)


def validate_record(rec: FeatureRecord, registry: dict[str, FeatureSpec], where: str = "record") -> None:
    spec = registry.get(rec.feature_name)
    if spec is None:
        raise ValidationError(f"{where}: unknown feature {rec.feature_name!r}")
    if rec.context not in CONTEXTS:
        raise ValidationError(f"{where}: unknown context {rec.context!r}")
    if rec.context not in spec.contexts:
        raise ValidationError(
            f"{where}: {rec.feature_name} is only defined for context(s) {', '.join(spec.contexts)}, got {rec.context}"
        )
    if rec.vector.shape[0] != spec.dims:
        raise ValidationError(
            f"{where}: {rec.feature_name} must have {spec.dims} dims, got {rec.vector.shape[0]}"
        )


def ingest_external_features(path, registry: dict[str, FeatureSpec] | None = None) -> list[FeatureRecord]:
    """Read newline-delimited JSON feature records and validate dims and contexts."""
    registry = BUILTIN_FEATURES if registry is None else registry
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            rec = parse_record(line, where)
            validate_record(rec, registry, where)
            if rec.key in seen:
                raise ValidationError(f"{where}: duplicate record {rec.key}")
            seen.add(rec.key)
            records.append(rec)
    return records


class FeatureStore:
    """Append-only newline-delimited store keyed by (sample, context, feature).

    One writer, many readers: appends are serialized with a lock, and a later
    record for the same key overrides earlier ones on load.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[tuple[str, str, str], np.ndarray] = {}
        if self.path.exists():
            self._load()

    def _load(self):
        with open(self.path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    rec = parse_record(line, f"{self.path}:{lineno}")
                    self._records[rec.key] = rec.vector

    def __contains__(self, key) -> bool:
        return tuple(key) in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, sample_id: str, context: str, feature_name: str) -> np.ndarray:
        try:
            return self._records[(sample_id, context, feature_name)]
        except KeyError:
            raise KeyError(f"no feature {feature_name}/{context} for sample {sample_id}") from None

    def put(self, rec: FeatureRecord) -> None:
        line = rec.to_json() + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(line)
            self._records[rec.key] = np.asarray(rec.vector, dtype=np.float64)

    def put_many(self, records) -> None:
        for rec in records:
            self.put(rec)

    def records(self):
        for (sid, ctx, name), vec in self._records.items():
            yield FeatureRecord(sid, ctx, name, vec)
