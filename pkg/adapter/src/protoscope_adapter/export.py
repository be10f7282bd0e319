"""Bundle export: run a torch model over images and write interchange files.

The exporter is the only component that knows both sides: feature maps come
out of torch modules, everything downstream (similarity maps, scores, class
outputs, saliency) is recomputed here in float64 numpy from the float32
feature grid and cast to float32 at write time.  That mirrors how the engine
regenerates artifacts from a stored feature map, so exported bundles always
pass validation with zero violations: the stored score of a prototype is by
construction the max of its stored map (rounding to float32 is monotone, so
max and rounding commute).

All file writes happen sequentially on the calling thread; nothing here is
re-entrant and nothing needs a lock.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .interchange import AdapterError, read_tensor, write_tensor
from .models import MODEL_KINDS, BlobDataset

PERTURBATIONS_SCHEMA = "protoscope-perturbations/1"


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class AdapterConfig:
    """Everything the exporter needs to know about model and I/O behavior."""

    kind: str
    checkpoint: Path | None = None
    feature_layer: str = "backbone"
    saliency_method: str = "upsample"
    batch_size: int = 8
    device: str = "cpu"
    saliency_top: int = 5

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise AdapterError(
                f"unknown architecture kind '{self.kind}' (expected one of {MODEL_KINDS})"
            )
        if self.batch_size < 1:
            raise AdapterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.saliency_top < 1:
            raise AdapterError(f"saliency_top must be >= 1, got {self.saliency_top}")


# ---------------------------------------------------------------------------
# Saliency methods


SaliencyFn = Callable[[np.ndarray, int, int], np.ndarray]
"""Maps one similarity map (h, w) to a saliency map (out_h, out_w)."""

_SALIENCY_METHODS: dict[str, SaliencyFn] = {}


def register_saliency_method(name: str, fn: SaliencyFn) -> None:
    """Make ``fn`` available under ``name`` (e.g. a PRP backend wrapper)."""
    _SALIENCY_METHODS[name] = fn


def resolve_saliency_method(name: str, kind: str) -> SaliencyFn:
    """Look up a registered saliency method, or fail listing what would work."""
    if name in _SALIENCY_METHODS:
        return _SALIENCY_METHODS[name]
    pairs = ", ".join(
        f"({method}, {k})" for method in sorted(_SALIENCY_METHODS) for k in MODEL_KINDS
    )
    raise AdapterError(
        f"saliency method '{name}' is not available for architecture '{kind}'; "
        f"supported (method, architecture) pairs: {pairs}"
    )


def _cubic_gather(length_out: int, length_in: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Catmull-Rom tap indices and weights for one axis, half-pixel centers."""
    a = -0.5
    scale = length_in / length_out
    x = (torch.arange(length_out, dtype=torch.float64) + 0.5) * scale - 0.5
    base = torch.floor(x)
    t = x - base
    indices, weights = [], []
    for k in range(4):
        offset = k - 1
        s = (t - offset).abs()
        w = torch.where(
            s <= 1.0,
            (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0,
            torch.where(
                s < 2.0,
                a * (s**3 - 5.0 * s**2 + 8.0 * s - 4.0),
                torch.zeros_like(s),
            ),
        )
        indices.append((base + offset).clamp(0, length_in - 1).long())
        weights.append(w)
    return torch.stack(indices, dim=1), torch.stack(weights, dim=1)


def upsample_bicubic(map_hw: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bicubic upscale of one map with negative ringing clamped to zero."""
    src = torch.from_numpy(np.asarray(map_hw, dtype=np.float64))
    if src.ndim != 2:
        raise AdapterError(f"saliency upsampling expects a 2-D map, got shape {tuple(src.shape)}")
    col_idx, col_w = _cubic_gather(out_w, src.shape[1])
    row_idx, row_w = _cubic_gather(out_h, src.shape[0])
    horiz = (src[:, col_idx] * col_w).sum(dim=-1)  # (h_in, out_w)
    full = (horiz[row_idx, :] * row_w.unsqueeze(-1)).sum(dim=1)  # (out_h, out_w)
    return np.maximum(full.numpy(), 0.0).astype(np.float32)


register_saliency_method("upsample", upsample_bicubic)


def saliency_for_sample(
    maps: np.ndarray,
    image_hw: tuple[int, int],
    *,
    method: str,
    kind: str,
    top: int = 5,
) -> dict[int, np.ndarray]:
    """Saliency maps for the ``top`` highest-scoring prototypes of one sample.

    Whatever the method returns is clamped at zero before it can be exported,
    so the non-negativity invariant holds even for third-party backends.
    """
    fn = resolve_saliency_method(method, kind)
    scores = maps.max(axis=(1, 2))
    ranked = sorted(range(maps.shape[0]), key=lambda i: (-scores[i], i))
    out = {}
    for pid in ranked[: min(top, maps.shape[0])]:
        sal = np.asarray(fn(maps[pid], image_hw[0], image_hw[1]), dtype=np.float32)
        if sal.shape != image_hw:
            raise AdapterError(
                f"saliency method '{method}' returned shape {sal.shape}, expected {image_hw}"
            )
        out[pid] = np.maximum(sal, 0.0)
    return out


# ---------------------------------------------------------------------------
# Feature tap and canonical artifact math


def _resolve_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        available = ", ".join(sorted(k for k in modules if k))
        raise AdapterError(f"feature tap layer '{name}' not found; available layers: {available}")
    return modules[name]


def tap_features(model: nn.Module, images: torch.Tensor, config: AdapterConfig) -> torch.Tensor:
    """Batched inference collecting the configured layer's output, (N, D, h, w)."""
    layer = _resolve_layer(model, config.feature_layer)
    device = torch.device(config.device)
    model.to(device).eval()
    collected: list[torch.Tensor] = []

    def hook(_module, _inputs, output):
        collected.append(output.detach().cpu())

    handle = layer.register_forward_hook(hook)
    try:
        with torch.no_grad():
            for start in range(0, images.shape[0], config.batch_size):
                model(images[start : start + config.batch_size].to(device))
    finally:
        handle.remove()
    features = torch.cat(collected, dim=0)
    if features.shape[0] != images.shape[0]:
        raise AdapterError(
            f"feature tap layer '{config.feature_layer}' fired {features.shape[0]} "
            f"times for {images.shape[0]} inputs"
        )
    return features


def _check_head_shapes(kind: str, head: dict[str, np.ndarray], feature_depth: int) -> None:
    """Fail fast when checkpoint tensors disagree with the declared architecture."""
    weights = head["classifier_weights"]
    if weights.ndim != 2:
        raise AdapterError(f"classifier weights must be 2-D, got shape {weights.shape}")
    if kind == "indirect":
        forbidden = {"prototypes", "class_of_prototype", "slot_assignment"} & set(head)
        if forbidden:
            raise AdapterError(f"indirect checkpoint carries explicit-head tensors {sorted(forbidden)}")
        if feature_depth != weights.shape[1]:
            raise AdapterError(
                f"indirect architecture needs one feature channel per prototype; "
                f"feature depth {feature_depth} != weight columns {weights.shape[1]}"
            )
        return
    protos = head.get("prototypes")
    if protos is None:
        raise AdapterError(f"architecture '{kind}' declared but checkpoint has no prototypes")
    if protos.shape[1] != feature_depth:
        raise AdapterError(
            f"prototype depth {protos.shape[1]} != feature depth {feature_depth}"
        )
    if kind == "explicit-class-specific":
        owner = head.get("class_of_prototype")
        if owner is None:
            raise AdapterError("class-specific checkpoint has no class_of_prototype")
        if len(owner) != weights.shape[1] or len(owner) != protos.shape[0]:
            raise AdapterError(
                f"class_of_prototype length {len(owner)} does not match "
                f"{weights.shape[1]} weight columns / {protos.shape[0]} prototypes"
            )
    else:  # explicit-shared
        assignment = head.get("slot_assignment")
        if assignment is None:
            raise AdapterError("shared-slot checkpoint has no slot_assignment")
        expected = (weights.shape[0], weights.shape[1], protos.shape[0])
        if assignment.shape != expected:
            raise AdapterError(
                f"slot_assignment shape {assignment.shape} != {expected} "
                f"(classes, slots, prototypes)"
            )


def artifacts_from_features(
    feature_hwd: np.ndarray, head: dict[str, np.ndarray], kind: str, epsilon: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Similarity maps (n, h, w), scores (n,), and class output from one grid."""
    fm = np.asarray(feature_hwd, dtype=np.float64)
    weights = np.asarray(head["classifier_weights"], dtype=np.float64)
    if kind == "indirect":
        shifted = fm - fm.max(axis=2, keepdims=True)
        expo = np.exp(shifted)
        presence = expo / expo.sum(axis=2, keepdims=True)
        maps = np.transpose(presence, (2, 0, 1))
        scores = maps.max(axis=(1, 2))
        output = np.log((scores[None, :] * weights) ** 2 + 1.0).sum(axis=1)
        return maps, scores, output
    protos = np.asarray(head["prototypes"], dtype=np.float64)
    diff = fm[:, :, None, :] - protos[None, None, :, :]
    d2 = (diff * diff).sum(axis=-1)  # (h, w, n)
    maps = np.transpose(np.log((d2 + 1.0) / (d2 + epsilon)), (2, 0, 1))
    scores = maps.max(axis=(1, 2))
    if kind == "explicit-class-specific":
        output = weights @ scores
    else:
        focal = scores - maps.mean(axis=(1, 2))
        slot_scores = np.einsum("klm,m->kl", np.asarray(head["slot_assignment"], np.float64), focal)
        output = (slot_scores * weights).sum(axis=1)
    return maps, scores, output


# ---------------------------------------------------------------------------
# Bundle export


def export_bundle(
    model: nn.Module,
    data: BlobDataset,
    config: AdapterConfig,
    out_dir: Path | str,
    *,
    dataset_name: str = "blobs",
    sample_prefix: str = "blob",
) -> Path:
    """Export a full interchange bundle for ``data``; returns the manifest path."""
    if getattr(model, "kind", None) != config.kind:
        raise AdapterError(
            f"checkpoint architecture '{getattr(model, 'kind', None)}' does not match "
            f"declared kind '{config.kind}'"
        )
    resolve_saliency_method(config.saliency_method, config.kind)  # fail before any writes
    out = Path(out_dir)
    for sub in ("model", "images", "features", "maps", "scores", "outputs", "masks", "saliency"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    head = model.head_tensors()
    epsilon = float(getattr(model, "epsilon", 1e-4))
    images = data.torch_images
    features = tap_features(model, images, config)  # (N, D, h, w)
    _check_head_shapes(config.kind, head, features.shape[1])
    class_count = int(model.class_count)

    model_doc: dict = {"kind": config.kind, "epsilon": epsilon}
    write_tensor(head["classifier_weights"], out / "model" / "classifier_weights.qpt")
    model_doc["classifier_weights"] = "model/classifier_weights.qpt"
    if "prototypes" in head:
        write_tensor(head["prototypes"], out / "model" / "prototypes.qpt")
        model_doc["prototypes"] = "model/prototypes.qpt"
    if "class_of_prototype" in head:
        model_doc["class_of_prototype"] = [int(v) for v in head["class_of_prototype"]]
    if "slot_assignment" in head:
        write_tensor(head["slot_assignment"], out / "model" / "slot_assignment.qpt")
        model_doc["slot_assignment"] = "model/slot_assignment.qpt"

    samples = []
    image_hw = data.images.shape[1:3]
    for i in range(len(data)):
        sid = f"{sample_prefix}{i:03d}"
        fm_hwd = features[i].permute(1, 2, 0).numpy()  # (h, w, D) float32
        maps, scores, output = artifacts_from_features(fm_hwd, head, config.kind, epsilon)
        doc = {"sample_id": sid, "labels": [int(data.labels[i])]}
        for key, rel, tensor in (
            ("image", f"images/{sid}.qpt", data.images[i]),
            ("feature_map", f"features/{sid}.qpt", fm_hwd),
            ("similarity_maps", f"maps/{sid}.qpt", maps),
            ("similarity_scores", f"scores/{sid}.qpt", scores),
            ("output", f"outputs/{sid}.qpt", output),
            ("object_mask", f"masks/{sid}.qpt", data.masks[i]),
        ):
            write_tensor(tensor, out / rel)
            doc[key] = rel
        row, col = data.centers[i]
        doc["part_points"] = [[0, int(row), int(col), True]]
        saliency = saliency_for_sample(
            maps, image_hw, method=config.saliency_method, kind=config.kind,
            top=config.saliency_top,
        )
        doc["saliency_maps"] = {}
        for pid, sal in sorted(saliency.items()):
            rel = f"saliency/{sid}__p{pid}.qpt"
            write_tensor(sal, out / rel)
            doc["saliency_maps"][str(pid)] = rel
        samples.append(doc)

    manifest = {
        "dataset_name": dataset_name,
        "class_count": class_count,
        "saliency_method": "provided",
        "part_vocabulary": [0],
        "model": model_doc,
        "samples": samples,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Forwards on engine-generated perturbed images


@dataclass
class _PerturbJob:
    sample_id: str
    protocol: str
    prototype: int | None
    image_path: Path
    artifacts: dict = field(default_factory=dict)


def forward_on_perturbed(
    model: nn.Module,
    manifest_path: Path | str,
    perturbations_path: Path | str,
    config: AdapterConfig,
    *,
    out_manifest: Path | str | None = None,
) -> Path:
    """Forward every perturbed image and write a manifest with perturbed blocks.

    ``perturbations_path`` is the plan the engine wrote next to its perturbed
    images; image paths inside it are resolved relative to that file.  The new
    manifest lands next to the original (artifact files under ``perturbed/``),
    so all relative paths keep working.
    """
    manifest_path = Path(manifest_path)
    perturbations_path = Path(perturbations_path)
    if getattr(model, "kind", None) != config.kind:
        raise AdapterError(
            f"checkpoint architecture '{getattr(model, 'kind', None)}' does not match "
            f"declared kind '{config.kind}'"
        )
    resolve_saliency_method(config.saliency_method, config.kind)  # fail before any writes
    try:
        manifest = json.loads(manifest_path.read_text())
        plan = json.loads(perturbations_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AdapterError(f"cannot load manifest/perturbation plan: {exc}") from exc
    if plan.get("schema") != PERTURBATIONS_SCHEMA:
        raise AdapterError(
            f"unexpected perturbation plan schema {plan.get('schema')!r}, "
            f"wanted {PERTURBATIONS_SCHEMA!r}"
        )

    head = model.head_tensors()
    epsilon = float(getattr(model, "epsilon", 1e-4))
    prototype_count = (
        head["classifier_weights"].shape[1]
        if config.kind == "indirect"
        else head["prototypes"].shape[0]
    )
    sample_docs = {doc["sample_id"]: doc for doc in manifest["samples"]}

    jobs: list[_PerturbJob] = []
    seen: set[tuple[str, str, int | None]] = set()
    for entry in plan.get("entries", []):
        sid = entry["sample_id"]
        protocol = entry["protocol"]
        prototype = entry.get("prototype")
        if sid not in sample_docs:
            raise AdapterError(f"perturbation plan references unknown sample '{sid}'")
        if protocol not in ("continuity", "completeness"):
            raise AdapterError(f"unknown perturbation protocol '{protocol}' for sample {sid}")
        if protocol == "completeness":
            if prototype is None or not 0 <= int(prototype) < prototype_count:
                raise AdapterError(
                    f"perturbed forward requested for unknown prototype {prototype} "
                    f"of sample {sid} (model has {prototype_count})"
                )
            prototype = int(prototype)
        else:
            prototype = None
        key = (sid, protocol, prototype)
        if key in seen:
            raise AdapterError(f"duplicate perturbation entry {key}")
        seen.add(key)
        jobs.append(_PerturbJob(sid, protocol, prototype, perturbations_path.parent / entry["image"]))
    if not jobs:
        raise AdapterError("perturbation plan contains no entries")

    stacked = torch.from_numpy(
        np.stack([read_tensor(job.image_path) for job in jobs])
    ).permute(0, 3, 1, 2).contiguous()
    features = tap_features(model, stacked, config)
    if features.shape[0] != len(jobs):
        raise AdapterError(
            f"forwarded {features.shape[0]} perturbed images for {len(jobs)} plan entries"
        )

    out_manifest = Path(out_manifest) if out_manifest else manifest_path.with_name(
        "manifest-perturbed.json"
    )
    if out_manifest.parent != manifest_path.parent:
        raise AdapterError(
            "the perturbed manifest must sit next to the original so relative "
            f"tensor paths stay valid (got {out_manifest})"
        )
    artifact_dir = manifest_path.parent / "perturbed"
    artifact_dir.mkdir(parents=True, exist_ok=True)
    image_hw = None

    for job, fm in zip(jobs, features):
        fm_hwd = fm.permute(1, 2, 0).numpy()
        maps, scores, output = artifacts_from_features(fm_hwd, head, config.kind, epsilon)
        stem = (
            f"{job.sample_id}__continuity"
            if job.protocol == "continuity"
            else f"{job.sample_id}__completeness_p{job.prototype}"
        )
        entry_doc = {}
        for key, suffix, tensor in (
            ("feature_map", "feature_map", fm_hwd),
            ("similarity_maps", "maps", maps),
            ("similarity_scores", "scores", scores),
            ("output", "output", output),
        ):
            rel = f"perturbed/{stem}__{suffix}.qpt"
            write_tensor(tensor, manifest_path.parent / rel)
            entry_doc[key] = rel
        if job.protocol == "completeness":
            if image_hw is None:
                first_image = read_tensor(manifest_path.parent / sample_docs[job.sample_id]["image"])
                image_hw = first_image.shape[:2]
            saliency = saliency_for_sample(
                maps, image_hw, method=config.saliency_method, kind=config.kind,
                top=maps.shape[0],
            )
            if job.prototype in saliency:
                rel = f"perturbed/{stem}__saliency.qpt"
                write_tensor(saliency[job.prototype], manifest_path.parent / rel)
                entry_doc["saliency_maps"] = {str(job.prototype): rel}
        job.artifacts = entry_doc

    written = 0
    for job in jobs:
        doc = sample_docs[job.sample_id]
        pert = doc.setdefault("perturbed", {})
        if job.protocol == "continuity":
            pert["continuity"] = job.artifacts
        else:
            pert.setdefault("completeness", {})[str(job.prototype)] = job.artifacts
        written += 1
    if written != len(plan.get("entries", [])):
        raise AdapterError(
            f"wrote {written} perturbed artifact sets for {len(plan.get('entries', []))} plan entries"
        )

    out_manifest.write_text(json.dumps(manifest, indent=2) + "\n")
    return out_manifest
