"""Binary tensor container and dataset/model bundle interchange.

The container format is deliberately tiny so that exporters in any language
can write it with a few lines of code:

* magic ``QPT1`` (4 bytes)
* rank as unsigned 32-bit little-endian, in [1, 4]
* one unsigned 32-bit little-endian extent per axis, each >= 1
* payload: float32 little-endian values in row-major (C) order

The byte length of a well-formed file is exactly
``8 + 4 * rank + 4 * prod(dims)``.  Trailing bytes, short payloads, bad magic
and out-of-range ranks are all rejected.

A *manifest* is a JSON document tying together one model bundle and a list of
sample bundles.  All tensor paths inside a manifest are relative to the
manifest's own directory.  Loading is total: structural problems raise
:class:`ManifestError`/:class:`FormatError`, semantic problems are collected
and raised as one :class:`ValidationError` naming every offending sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from protoscope.errors import (
    FormatError,
    IoError,
    ManifestError,
    ValidationError,
)

MAGIC = b"QPT1"
MAX_RANK = 4

MODEL_KINDS = ("explicit-class-specific", "explicit-shared", "indirect")
SALIENCY_METHODS = ("upscale", "provided")

#: |max-pool(map) - stored score| tolerated on ingest (float32 artifacts).
SCORE_CONSISTENCY_TOL = 1e-5
#: slot distribution sums may deviate from one by this much.
SLOT_SUM_TOL = 1e-5


# ---------------------------------------------------------------------------
# Tensor container
# ---------------------------------------------------------------------------

def read_tensor(path: str | Path) -> np.ndarray:
    """Read one tensor file; returns a float32 array in stored shape."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read tensor file {path}: {exc}") from exc
    return decode_tensor(blob, name=str(path))


def decode_tensor(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    """Decode container bytes (see module docstring for the layout)."""
    if len(blob) < 8:
        raise FormatError(f"{name}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{name}: rank {rank} outside [1, {MAX_RANK}]")
    header = 8 + 4 * rank
    if len(blob) < header:
        raise FormatError(f"{name}: truncated dimension list")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    if any(d < 1 for d in dims):
        raise FormatError(f"{name}: zero-sized axis in {dims}")
    count = 1
    for d in dims:
        count *= d
    expected = header + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{name}: payload length {len(blob)} != expected {expected} for dims {dims}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=header)
    return data.reshape(dims).copy()


def encode_tensor(array: np.ndarray) -> bytes:
    """Encode an array into container bytes (float32, row-major)."""
    arr = np.asarray(array)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ValidationError(f"tensor rank must be in [1, {MAX_RANK}], got {arr.ndim}")
    if arr.size == 0:
        raise ValidationError("refusing to encode an empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains non-finite values")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload.tobytes()


def write_tensor(array: np.ndarray, path: str | Path) -> None:
    """Write one tensor file (creating parent directories)."""
    blob = encode_tensor(array)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write tensor file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Bundle dataclasses
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Static model-side artifacts shared by every sample."""

    kind: str
    classifier_weights: np.ndarray          # (K, n) or (K, L) for slotted models
    prototypes: np.ndarray | None = None    # (n, D), explicit kinds only
    class_of_prototype: np.ndarray | None = None  # (n,), class-specific only
    slot_assignment: np.ndarray | None = None     # (K, L, n), shared only
    epsilon: float = 1e-4

    @property
    def class_count(self) -> int:
        return int(self.classifier_weights.shape[0])

    @property
    def prototype_count(self) -> int:
        if self.kind == "explicit-shared":
            return int(self.slot_assignment.shape[2])
        return int(self.classifier_weights.shape[1])


@dataclass
class PartPoint:
    part_id: int
    row: float
    col: float
    visible: bool


@dataclass
class PerturbedArtifacts:
    """Perturbed-side artifacts for one (sample, protocol[, prototype]).

    Either ``feature_map`` is present (the engine regenerates forward math)
    or the three regenerable tensors are pre-exported.
    """

    feature_map: np.ndarray | None = None
    similarity_maps: np.ndarray | None = None
    similarity_scores: np.ndarray | None = None
    output: np.ndarray | None = None
    saliency_maps: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def regenerable(self) -> bool:
        return self.feature_map is not None

    @property
    def pre_exported(self) -> bool:
        return self.similarity_maps is not None


@dataclass
class SampleBundle:
    """Everything exported for one test image."""

    sample_id: str
    labels: tuple[int, ...]
    image: np.ndarray                      # (Hi, Wi, 3), values in [0, 1]
    similarity_maps: np.ndarray            # (n, H, W)
    similarity_scores: np.ndarray          # (n,)
    output: np.ndarray                     # (K,)
    feature_map: np.ndarray | None = None  # (H, W, D)
    object_mask: np.ndarray | None = None  # (Hi, Wi), {0, 1}
    part_points: tuple[PartPoint, ...] | None = None
    saliency_maps: dict[int, np.ndarray] = field(default_factory=dict)
    perturbed_completeness: dict[int, PerturbedArtifacts] = field(default_factory=dict)
    perturbed_continuity: PerturbedArtifacts | None = None


@dataclass
class DatasetBundle:
    """Parsed manifest: one model plus its exported samples."""

    dataset_name: str
    class_count: int
    multilabel: bool
    part_vocabulary: tuple[int, ...]
    saliency_method: str
    model: ModelBundle
    samples: list[SampleBundle]
    root: Path


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

def _load_json(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")
    return doc


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ManifestError(f"{where}: missing required key '{key}'")
    return doc[key]


def _tensor_at(root: Path, rel: str, where: str) -> np.ndarray:
    path = root / rel
    if not path.is_file():
        raise ManifestError(f"{where}: referenced file does not exist: {rel}")
    try:
        return read_tensor(path)
    except FormatError as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def _parse_perturbed_entry(root: Path, doc: dict, where: str) -> PerturbedArtifacts:
    art = PerturbedArtifacts()
    if "feature_map" in doc:
        art.feature_map = _tensor_at(root, doc["feature_map"], where)
    if "similarity_maps" in doc:
        art.similarity_maps = _tensor_at(root, doc["similarity_maps"], where)
    if "similarity_scores" in doc:
        art.similarity_scores = _tensor_at(root, doc["similarity_scores"], where)
    if "output" in doc:
        art.output = _tensor_at(root, doc["output"], where)
    for key, rel in doc.get("saliency_maps", {}).items():
        art.saliency_maps[int(key)] = _tensor_at(root, rel, where)
    return art


def _parse_model(root: Path, doc: dict) -> ModelBundle:
    kind = _require(doc, "kind", "model")
    if kind not in MODEL_KINDS:
        raise ManifestError(f"model: unknown kind '{kind}' (expected one of {MODEL_KINDS})")
    weights = _tensor_at(root, _require(doc, "classifier_weights", "model"), "model")
    model = ModelBundle(kind=kind, classifier_weights=weights)
    if "epsilon" in doc:
        model.epsilon = float(doc["epsilon"])
    if "prototypes" in doc:
        model.prototypes = _tensor_at(root, doc["prototypes"], "model")
    if "class_of_prototype" in doc:
        model.class_of_prototype = np.asarray(doc["class_of_prototype"], dtype=np.int64)
    if "slot_assignment" in doc:
        model.slot_assignment = _tensor_at(root, doc["slot_assignment"], "model")
    return model


def _parse_sample(root: Path, doc: dict, index: int) -> SampleBundle:
    sid = doc.get("sample_id", f"<sample {index}>")
    where = f"sample {sid}"
    sample = SampleBundle(
        sample_id=str(_require(doc, "sample_id", where)),
        labels=tuple(int(v) for v in _require(doc, "labels", where)),
        image=_tensor_at(root, _require(doc, "image", where), where),
        similarity_maps=_tensor_at(root, _require(doc, "similarity_maps", where), where),
        similarity_scores=_tensor_at(root, _require(doc, "similarity_scores", where), where),
        output=_tensor_at(root, _require(doc, "output", where), where),
    )
    if "feature_map" in doc:
        sample.feature_map = _tensor_at(root, doc["feature_map"], where)
    if "object_mask" in doc:
        sample.object_mask = _tensor_at(root, doc["object_mask"], where)
    if "part_points" in doc:
        points = []
        for entry in doc["part_points"]:
            if len(entry) != 4:
                raise ManifestError(f"{where}: part point {entry} must be [id, row, col, visible]")
            points.append(
                PartPoint(int(entry[0]), float(entry[1]), float(entry[2]), bool(entry[3]))
            )
        sample.part_points = tuple(points)
    for key, rel in doc.get("saliency_maps", {}).items():
        sample.saliency_maps[int(key)] = _tensor_at(root, rel, where)
    pert = doc.get("perturbed", {})
    for key, sub in pert.get("completeness", {}).items():
        sample.perturbed_completeness[int(key)] = _parse_perturbed_entry(
            root, sub, f"{where} perturbed[completeness/{key}]"
        )
    if "continuity" in pert:
        sample.perturbed_continuity = _parse_perturbed_entry(
            root, pert["continuity"], f"{where} perturbed[continuity]"
        )
    return sample


def load_bundle(manifest_path: str | Path) -> DatasetBundle:
    """Load and fully validate a dataset manifest.

    Raises :class:`ManifestError` for structural problems (bad JSON, missing
    or corrupt tensor files), :class:`ValidationError` listing every semantic
    violation otherwise.
    """
    manifest_path = Path(manifest_path)
    doc = _load_json(manifest_path)
    root = manifest_path.parent
    class_count = int(_require(doc, "class_count", "manifest"))
    bundle = DatasetBundle(
        dataset_name=str(doc.get("dataset_name", manifest_path.stem)),
        class_count=class_count,
        multilabel=bool(doc.get("multilabel", False)),
        part_vocabulary=tuple(int(v) for v in doc.get("part_vocabulary", [])),
        saliency_method=str(doc.get("saliency_method", "upscale")),
        model=_parse_model(root, _require(doc, "model", "manifest")),
        samples=[
            _parse_sample(root, s, i)
            for i, s in enumerate(_require(doc, "samples", "manifest"))
        ],
        root=root,
    )
    violations = validate_bundle(bundle)
    if violations:
        raise ValidationError(
            "manifest failed validation:\n" + "\n".join(f"- {v}" for v in violations)
        )
    return bundle


# ---------------------------------------------------------------------------
# Semantic validation
# ---------------------------------------------------------------------------

def _validate_model(bundle: DatasetBundle, out: list[str]) -> None:
    model = bundle.model
    w = model.classifier_weights
    if w.ndim != 2:
        out.append(f"model: classifier_weights must be rank 2, got rank {w.ndim}")
        return
    if w.shape[0] != bundle.class_count:
        out.append(
            f"model: classifier_weights has {w.shape[0]} rows, expected class_count={bundle.class_count}"
        )
    if not 0.0 < model.epsilon < 1.0:
        out.append(f"model: epsilon {model.epsilon} outside (0, 1)")
    if model.kind == "explicit-class-specific":
        if model.class_of_prototype is None:
            out.append("model: explicit-class-specific requires class_of_prototype")
        if model.prototypes is None:
            out.append("model: explicit-class-specific requires prototypes")
        if model.slot_assignment is not None:
            out.append("model: slot_assignment is only valid for explicit-shared")
        if model.class_of_prototype is not None:
            cop = model.class_of_prototype
            if cop.shape[0] != w.shape[1]:
                out.append(
                    f"model: class_of_prototype length {cop.shape[0]} != weight columns {w.shape[1]}"
                )
            bad = [int(c) for c in cop if not 0 <= c < bundle.class_count]
            if bad:
                out.append(f"model: class_of_prototype contains out-of-range classes {bad}")
        if model.prototypes is not None and model.prototypes.shape[0] != w.shape[1]:
            out.append(
                f"model: prototypes rows {model.prototypes.shape[0]} != weight columns {w.shape[1]}"
            )
    elif model.kind == "explicit-shared":
        if model.class_of_prototype is not None:
            out.append("model: class_of_prototype is only valid for explicit-class-specific")
        if model.prototypes is None:
            out.append("model: explicit-shared requires prototypes")
        if model.slot_assignment is None:
            out.append("model: explicit-shared requires slot_assignment")
        else:
            sa = model.slot_assignment
            if sa.ndim != 3:
                out.append(f"model: slot_assignment must be rank 3, got {sa.ndim}")
            else:
                if sa.shape[0] != bundle.class_count or sa.shape[1] != w.shape[1]:
                    out.append(
                        f"model: slot_assignment shape {sa.shape} incompatible with weights {w.shape}"
                    )
                if model.prototypes is not None and sa.shape[2] != model.prototypes.shape[0]:
                    out.append(
                        f"model: slot_assignment prototype axis {sa.shape[2]} != prototypes rows {model.prototypes.shape[0]}"
                    )
                sums = sa.sum(axis=2, dtype=np.float64)
                if np.any(np.abs(sums - 1.0) > SLOT_SUM_TOL):
                    worst = float(np.abs(sums - 1.0).max())
                    out.append(
                        f"model: slot distributions must each sum to 1 (worst deviation {worst:.2e})"
                    )
                if np.any(sa < 0):
                    out.append("model: slot distributions contain negative mass")
    else:  # indirect
        if model.prototypes is not None:
            out.append("model: indirect models carry no explicit prototype vectors")
        if model.class_of_prototype is not None:
            out.append("model: class_of_prototype is only valid for explicit-class-specific")
        if model.slot_assignment is not None:
            out.append("model: slot_assignment is only valid for explicit-shared")
        if np.any(w < 0):
            out.append("model: this model family requires a nonnegative classifier head")


def _validate_perturbed(
    art: PerturbedArtifacts, n: int, k: int, where: str, out: list[str]
) -> None:
    if not art.regenerable and not art.pre_exported:
        out.append(f"{where}: needs either a feature_map or pre-exported similarity maps")
    if art.similarity_maps is not None:
        if art.similarity_maps.ndim != 3 or art.similarity_maps.shape[0] != n:
            out.append(f"{where}: perturbed similarity_maps shape {art.similarity_maps.shape} invalid")
        if art.similarity_scores is None or art.output is None:
            out.append(f"{where}: pre-exported artifacts must include scores and output")
    if art.similarity_scores is not None and art.similarity_scores.shape != (n,):
        out.append(f"{where}: perturbed scores shape {art.similarity_scores.shape} != ({n},)")
    if art.output is not None and art.output.shape != (k,):
        out.append(f"{where}: perturbed output shape {art.output.shape} != ({k},)")


def _validate_sample(bundle: DatasetBundle, sample: SampleBundle, out: list[str]) -> None:
    n = bundle.model.prototype_count
    k = bundle.class_count
    sid = sample.sample_id

    img = sample.image
    if img.ndim != 3 or img.shape[2] != 3:
        out.append(f"{sid}: image must be (H, W, 3), got {img.shape}")
    elif img.min() < 0.0 or img.max() > 1.0:
        out.append(f"{sid}: image values outside [0, 1] (min {img.min():.4g}, max {img.max():.4g})")

    maps = sample.similarity_maps
    if maps.ndim != 3:
        out.append(f"{sid}: similarity_maps must be rank 3, got rank {maps.ndim}")
        return
    if maps.shape[0] != n:
        out.append(f"{sid}: {maps.shape[0]} similarity maps != {n} prototypes")
        return
    if sample.similarity_scores.shape != (n,):
        out.append(f"{sid}: similarity_scores shape {sample.similarity_scores.shape} != ({n},)")
        return
    pooled = maps.reshape(n, -1).max(axis=1)
    err = np.abs(pooled - sample.similarity_scores)
    if np.any(err > SCORE_CONSISTENCY_TOL):
        worst = int(err.argmax())
        out.append(
            f"{sid}: stored score of prototype {worst} deviates from max-pooled map by {err[worst]:.2e}"
        )
    if sample.output.shape != (k,):
        out.append(f"{sid}: output shape {sample.output.shape} != ({k},)")

    if not sample.labels:
        out.append(f"{sid}: empty label set")
    else:
        bad = [c for c in sample.labels if not 0 <= c < k]
        if bad:
            out.append(f"{sid}: labels {bad} outside [0, {k})")
        if len(set(sample.labels)) != len(sample.labels):
            out.append(f"{sid}: duplicate labels {sample.labels}")
        if not bundle.multilabel and len(sample.labels) != 1:
            out.append(f"{sid}: single-label dataset but {len(sample.labels)} labels")

    if sample.feature_map is not None:
        fm = sample.feature_map
        if fm.ndim != 3:
            out.append(f"{sid}: feature_map must be rank 3, got rank {fm.ndim}")
        else:
            if fm.shape[:2] != maps.shape[1:]:
                out.append(
                    f"{sid}: feature_map grid {fm.shape[:2]} != similarity grid {maps.shape[1:]}"
                )
            proto = bundle.model.prototypes
            if proto is not None and fm.shape[2] != proto.shape[1]:
                out.append(
                    f"{sid}: feature depth {fm.shape[2]} != prototype depth {proto.shape[1]}"
                )
            if bundle.model.kind == "indirect" and fm.shape[2] != n:
                out.append(f"{sid}: indirect model needs feature depth {n}, got {fm.shape[2]}")

    if sample.object_mask is not None and img.ndim == 3:
        mask = sample.object_mask
        if mask.shape != img.shape[:2]:
            out.append(f"{sid}: object_mask shape {mask.shape} != image plane {img.shape[:2]}")
        elif not np.all((mask == 0) | (mask == 1)):
            out.append(f"{sid}: object_mask must be binary")

    if sample.part_points is not None and img.ndim == 3:
        vocab = set(bundle.part_vocabulary)
        for p in sample.part_points:
            if vocab and p.part_id not in vocab:
                out.append(f"{sid}: part id {p.part_id} not in the part vocabulary")
            if not (0 <= p.row < img.shape[0] and 0 <= p.col < img.shape[1]):
                out.append(f"{sid}: part {p.part_id} at ({p.row}, {p.col}) outside the image")

    for pid, sal in sample.saliency_maps.items():
        if not 0 <= pid < n:
            out.append(f"{sid}: saliency map for unknown prototype {pid}")
        elif img.ndim == 3 and sal.shape != img.shape[:2]:
            out.append(f"{sid}: saliency map {pid} shape {sal.shape} != image plane {img.shape[:2]}")
        elif sal.min() < 0:
            out.append(f"{sid}: saliency map {pid} has negative relevance")

    for pid, art in sample.perturbed_completeness.items():
        if not 0 <= pid < n:
            out.append(f"{sid}: perturbed artifacts for unknown prototype {pid}")
        _validate_perturbed(art, n, k, f"{sid} perturbed[completeness/{pid}]", out)
    if sample.perturbed_continuity is not None:
        _validate_perturbed(sample.perturbed_continuity, n, k, f"{sid} perturbed[continuity]", out)


def validate_bundle(bundle: DatasetBundle) -> list[str]:
    """Collect every semantic violation in the bundle (empty list = valid)."""
    out: list[str] = []
    if bundle.class_count < 2:
        out.append(f"manifest: class_count must be >= 2, got {bundle.class_count}")
    if bundle.saliency_method not in SALIENCY_METHODS:
        out.append(
            f"manifest: saliency_method '{bundle.saliency_method}' not in {SALIENCY_METHODS}"
        )
    _validate_model(bundle, out)
    if not out:  # sample checks need a structurally sound model
        seen: set[str] = set()
        for sample in bundle.samples:
            if sample.sample_id in seen:
                out.append(f"{sample.sample_id}: duplicate sample id")
            seen.add(sample.sample_id)
            _validate_sample(bundle, sample, out)
    return out
