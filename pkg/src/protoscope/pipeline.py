"""Suite orchestration: evaluate metric suites over a dataset bundle.

The runner walks every sample, evaluates the requested suites on the top-5
most-activated prototypes, and assembles a :class:`MetricReport` whose
entities appear in deterministic (sample, prototype) order.  Work is
distributed per sample across a thread pool; results are reduced in sample
order and all randomness is stream-keyed, so reports are identical at any
parallelism level.

Whenever a sample carries a feature map and the model math is available, the
engine regenerates similarity maps, scores and outputs for *both* the
original and the perturbed side through the same code path.  Identical
inputs therefore produce bit-identical artifacts, which is what makes the
identity law (neutral perturbation -> every change metric exactly zero) hold
end to end.

A metric that cannot be computed for one entity is recorded as a skip with
its reason rather than aborting the run; a suite whose required artifact
class is missing from every sample raises :class:`SuiteError` up front.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from protoscope import protolayer
from protoscope.errors import SuiteError, ValidationError
from protoscope.interchange import (
    DatasetBundle,
    ModelBundle,
    PerturbedArtifacts,
    SampleBundle,
    write_tensor,
)
from protoscope.metrics import change, contrast, grounding
from protoscope.perturb import (
    PerturbationConfig,
    derive_rng,
    occlude_outside,
    percentile_crop,
    photometric_suite,
    upscale_similarity,
)
from protoscope.report import MetricReport

SUITES = (
    "completeness",
    "continuity",
    "contrastivity",
    "complexity",
    "compactness",
    "performance",
)

PARALLELISM_ENV = "PROTOSCOPE_PARALLELISM"

#: preferred direction per metric key ("lower" or "higher" is better).
DIRECTIONS: dict[str, str] = {
    "completeness/vlc": "lower",
    "completeness/psc": "lower",
    "completeness/vac": "lower",
    "completeness/plc": "lower",
    "completeness/palc": "lower",
    "completeness/pac": "lower",
    "continuity/plc": "lower",
    "continuity/psc": "lower",
    "continuity/palc": "lower",
    "continuity/pac": "lower",
    "continuity/prc": "lower",
    "continuity/cac": "lower",
    "continuity/crc": "lower",
    "contrastivity/pairwise_plc": "higher",
    "contrastivity/pairwise_palc": "higher",
    "contrastivity/prototype_distance_intra": "higher",
    "contrastivity/prototype_distance_inter": "higher",
    "contrastivity/feature_distance_intra": "higher",
    "contrastivity/feature_distance_inter": "higher",
    "contrastivity/activation_entropy": "lower",
    "complexity/object_overlap": "lower",
    "complexity/background_overlap": "lower",
    "complexity/inside_outside_relevance": "higher",
    "complexity/consistency": "higher",
    "compactness/global_size": "lower",
    "compactness/sparsity": "higher",
    "compactness/negative_positive_ratio": "lower",
    "compactness/local_size": "lower",
    "performance/accuracy": "higher",
    "performance/top_k_accuracy": "higher",
    "performance/f1": "higher",
}

_COMPLETENESS_METRICS = ("vlc", "psc", "vac", "plc", "palc", "pac")
_CONTINUITY_PROTO_METRICS = ("plc", "psc", "palc", "pac", "prc")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteConfig:
    suites: tuple[str, ...] = SUITES
    top_k: int = 5
    percentile: float = 95.0
    weight_epsilon: float = grounding.WEIGHT_EPSILON
    local_size_threshold: float = grounding.LOCAL_SIZE_THRESHOLD
    entropy_bins: int = contrast.ENTROPY_BINS
    performance_top_k: int = 3
    seed: int = 0
    run_label: str = ""
    parallelism: int | None = None  # resolved via PROTOSCOPE_PARALLELISM, default 1
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)

    def resolve_parallelism(self) -> int:
        if self.parallelism is not None:
            return max(1, int(self.parallelism))
        env = os.environ.get(PARALLELISM_ENV, "").strip()
        if env:
            try:
                return max(1, int(env))
            except ValueError as exc:
                raise ValidationError(f"{PARALLELISM_ENV}={env!r} is not an integer") from exc
        return 1

    def to_dict(self) -> dict:
        doc = {
            "suites": list(self.suites),
            "top_k": self.top_k,
            "percentile": self.percentile,
            "weight_epsilon": self.weight_epsilon,
            "local_size_threshold": self.local_size_threshold,
            "entropy_bins": self.entropy_bins,
            "performance_top_k": self.performance_top_k,
            "seed": self.seed,
            "run_label": self.run_label,
            "perturbation": {
                "percentile": self.perturbation.percentile,
                "occlusion_sigma": self.perturbation.occlusion_sigma,
                "brightness": self.perturbation.brightness,
                "contrast": self.perturbation.contrast,
                "saturation": self.perturbation.saturation,
                "hue_shift": self.perturbation.hue_shift,
                "noise_sigma": self.perturbation.noise_sigma,
                "jpeg_quality": self.perturbation.jpeg_quality,
                "blur_kernel": self.perturbation.blur_kernel,
                "seed": self.perturbation.seed,
            },
        }
        return doc

    def config_hash(self) -> str:
        """Hash of the semantic settings (parallelism deliberately excluded)."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "SuiteConfig":
        doc = dict(doc)
        pert = doc.pop("perturbation", {})
        known = {
            "suites",
            "top_k",
            "percentile",
            "weight_epsilon",
            "local_size_threshold",
            "entropy_bins",
            "performance_top_k",
            "seed",
            "run_label",
            "parallelism",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "suites" in doc:
            doc["suites"] = tuple(doc["suites"])
        pert_known = {
            "percentile",
            "occlusion_sigma",
            "brightness",
            "contrast",
            "saturation",
            "hue_shift",
            "noise_sigma",
            "jpeg_quality",
            "blur_kernel",
            "seed",
        }
        bad = set(pert) - pert_known
        if bad:
            raise ValidationError(f"unknown perturbation keys: {sorted(bad)}")
        return cls(perturbation=PerturbationConfig(**pert), **doc)


def _validate_suites(suites) -> tuple[str, ...]:
    names = tuple(suites)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise ValidationError(f"unknown suites {unknown}; valid: {list(SUITES)}")
    if not names:
        raise ValidationError("no suite requested")
    return names


# ---------------------------------------------------------------------------
# Per-sample context
# ---------------------------------------------------------------------------

@dataclass
class _SampleContext:
    sample: SampleBundle
    maps: np.ndarray
    scores: np.ndarray
    output: np.ndarray
    top: list[int]
    shortfall: int


def _can_regenerate(model: ModelBundle) -> bool:
    return model.kind == "indirect" or model.prototypes is not None


def _original_context(model: ModelBundle, sample: SampleBundle, config: SuiteConfig) -> _SampleContext:
    if sample.feature_map is not None and _can_regenerate(model):
        maps, scores, output = protolayer.forward_artifacts(model, sample.feature_map)
    else:
        maps = np.asarray(sample.similarity_maps, dtype=np.float64)
        scores = np.asarray(sample.similarity_scores, dtype=np.float64)
        output = np.asarray(sample.output, dtype=np.float64)
    top, shortfall = contrast.top_prototypes(scores, config.top_k)
    return _SampleContext(sample, maps, scores, output, top, shortfall)


def _perturbed_forward(model: ModelBundle, art: PerturbedArtifacts):
    """(maps, scores, output) for one perturbed side, regenerating if possible."""
    if art.feature_map is not None and _can_regenerate(model):
        return protolayer.forward_artifacts(model, art.feature_map)
    if art.similarity_maps is None or art.similarity_scores is None or art.output is None:
        raise ValidationError("perturbed artifacts carry neither feature map nor full forward results")
    return (
        np.asarray(art.similarity_maps, dtype=np.float64),
        np.asarray(art.similarity_scores, dtype=np.float64),
        np.asarray(art.output, dtype=np.float64),
    )


def _saliency_for(
    bundle: DatasetBundle,
    sample: SampleBundle,
    maps: np.ndarray,
    pid: int,
    provided: dict[int, np.ndarray],
) -> np.ndarray | None:
    """Saliency map for one prototype, by the bundle's declared method."""
    if bundle.saliency_method == "provided":
        sal = provided.get(pid)
        return None if sal is None else np.asarray(sal, dtype=np.float64)
    h, w = sample.image.shape[:2]
    return upscale_similarity(maps[pid], h, w)


# ---------------------------------------------------------------------------
# Per-sample evaluation
# ---------------------------------------------------------------------------

@dataclass
class _SampleResult:
    sample_id: str
    records: list[tuple[str, str, float | None]] = field(default_factory=list)
    skips: list[tuple[str, str, str]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    # contrastivity accumulators
    top: list[int] = field(default_factory=list)
    labels: tuple[int, ...] = ()
    scores: np.ndarray | None = None
    nearest_features: dict[int, np.ndarray] = field(default_factory=dict)
    # complexity accumulators
    part_hits: dict[int, list[int]] = field(default_factory=dict)  # pid -> part ids hit
    parts_counted: list[int] = field(default_factory=list)          # pids with usable box+parts
    # performance accumulators
    output: np.ndarray | None = None


def _crop_or_none(saliency, percentile, entity, metric_keys, result):
    try:
        return percentile_crop(saliency, percentile)
    except ValidationError as exc:
        for key in metric_keys:
            result.skips.append((key, entity, str(exc)))
        return None


def _evaluate_sample(
    bundle: DatasetBundle, sample: SampleBundle, config: SuiteConfig, wanted: set[str]
) -> _SampleResult:
    model = bundle.model
    sid = sample.sample_id
    result = _SampleResult(sample_id=sid)
    ctx = _original_context(model, sample, config)
    result.top = ctx.top
    result.labels = sample.labels
    result.scores = ctx.scores
    result.output = ctx.output
    if ctx.shortfall:
        result.notes.append(
            f"{sid}: only {len(ctx.top)} prototypes available for top-{config.top_k}"
        )

    if "completeness" in wanted:
        _eval_completeness(bundle, ctx, config, result)
    if "continuity" in wanted:
        _eval_continuity(bundle, ctx, config, result)
    if "contrastivity" in wanted:
        _eval_contrastivity_sample(bundle, ctx, config, result)
    if "complexity" in wanted:
        _eval_complexity_sample(bundle, ctx, config, result)
    if "compactness" in wanted:
        try:
            value = grounding.local_size(ctx.scores, config.local_size_threshold)
            result.records.append(("compactness/local_size", sid, float(value)))
        except ValidationError as exc:
            result.skips.append(("compactness/local_size", sid, str(exc)))
    return result


def _eval_completeness(bundle, ctx, config, result) -> None:
    sample = ctx.sample
    sid = sample.sample_id
    keys = {m: f"completeness/{m}" for m in _COMPLETENESS_METRICS}
    for pid in ctx.top:
        entity = f"{sid}/p{pid}"
        art = sample.perturbed_completeness.get(pid)
        if art is None:
            for key in keys.values():
                result.skips.append((key, entity, "no perturbed artifacts for this prototype"))
            continue
        try:
            pmaps, pscores, _ = _perturbed_forward(bundle.model, art)
        except ValidationError as exc:
            for key in keys.values():
                result.skips.append((key, entity, str(exc)))
            continue
        for metric, fn in (
            ("plc", change.plc),
            ("palc", change.palc),
            ("pac", change.pac),
        ):
            try:
                result.records.append((keys[metric], entity, fn(ctx.maps[pid], pmaps[pid])))
            except ValidationError as exc:
                result.skips.append((keys[metric], entity, str(exc)))
        try:
            result.records.append((keys["psc"], entity, change.psc(ctx.scores[pid], pscores[pid])))
        except ValidationError as exc:
            result.skips.append((keys["psc"], entity, str(exc)))

        sal_o = _saliency_for(bundle, sample, ctx.maps, pid, sample.saliency_maps)
        sal_p = _saliency_for(bundle, sample, pmaps, pid, art.saliency_maps)
        if sal_o is None or sal_p is None:
            reason = "saliency map unavailable on one side (method=provided)"
            result.skips.append((keys["vlc"], entity, reason))
            result.skips.append((keys["vac"], entity, reason))
            continue
        crop_o = _crop_or_none(sal_o, config.percentile, entity, (keys["vlc"], keys["vac"]), result)
        if crop_o is None:
            continue
        crop_p = _crop_or_none(sal_p, config.percentile, entity, (keys["vlc"], keys["vac"]), result)
        if crop_p is None:
            continue
        cropped_o, _, box_o = crop_o
        cropped_p, _, box_p = crop_p
        try:
            result.records.append((keys["vlc"], entity, change.vlc(box_o, box_p)))
        except ValidationError as exc:
            result.skips.append((keys["vlc"], entity, str(exc)))
        try:
            result.records.append((keys["vac"], entity, change.vac(cropped_o, cropped_p)))
        except ValidationError as exc:
            result.skips.append((keys["vac"], entity, str(exc)))


def _eval_continuity(bundle, ctx, config, result) -> None:
    sample = ctx.sample
    sid = sample.sample_id
    art = sample.perturbed_continuity
    proto_keys = {m: f"continuity/{m}" for m in _CONTINUITY_PROTO_METRICS}
    if art is None:
        for pid in ctx.top:
            for key in proto_keys.values():
                result.skips.append((key, f"{sid}/p{pid}", "no perturbed artifacts for this sample"))
        result.skips.append(("continuity/cac", sid, "no perturbed artifacts for this sample"))
        result.skips.append(("continuity/crc", sid, "no perturbed artifacts for this sample"))
        return
    try:
        pmaps, pscores, pout = _perturbed_forward(bundle.model, art)
    except ValidationError as exc:
        for pid in ctx.top:
            for key in proto_keys.values():
                result.skips.append((key, f"{sid}/p{pid}", str(exc)))
        result.skips.append(("continuity/cac", sid, str(exc)))
        result.skips.append(("continuity/crc", sid, str(exc)))
        return
    for pid in ctx.top:
        entity = f"{sid}/p{pid}"
        for metric, fn in (
            ("plc", change.plc),
            ("palc", change.palc),
            ("pac", change.pac),
        ):
            try:
                result.records.append((proto_keys[metric], entity, fn(ctx.maps[pid], pmaps[pid])))
            except ValidationError as exc:
                result.skips.append((proto_keys[metric], entity, str(exc)))
        try:
            result.records.append(
                (proto_keys["psc"], entity, change.psc(ctx.scores[pid], pscores[pid]))
            )
        except ValidationError as exc:
            result.skips.append((proto_keys["psc"], entity, str(exc)))
        try:
            result.records.append(
                (proto_keys["prc"], entity, change.prc(ctx.scores, pscores, pid))
            )
        except ValidationError as exc:
            result.skips.append((proto_keys["prc"], entity, str(exc)))
    try:
        result.records.append(("continuity/cac", sid, change.cac(ctx.output, pout)))
    except ValidationError as exc:
        result.skips.append(("continuity/cac", sid, str(exc)))
    try:
        result.records.append(("continuity/crc", sid, change.crc(ctx.output, pout)))
    except ValidationError as exc:
        result.skips.append(("continuity/crc", sid, str(exc)))


def _eval_contrastivity_sample(bundle, ctx, config, result) -> None:
    sample = ctx.sample
    sid = sample.sample_id
    top_maps = [ctx.maps[pid] for pid in ctx.top]
    for key, fn in (
        ("contrastivity/pairwise_plc", contrast.pairwise_plc),
        ("contrastivity/pairwise_palc", contrast.pairwise_palc),
    ):
        try:
            result.records.append((key, sid, fn(top_maps)))
        except ValidationError as exc:
            result.skips.append((key, sid, str(exc)))
    if sample.feature_map is None:
        result.skips.append(
            ("contrastivity/feature_distance_inter", sid, "no feature map; sample excluded from feature sets")
        )
        return
    fm = np.asarray(sample.feature_map, dtype=np.float64)
    for pid in ctx.top:
        r, c = change.argmax_cell(ctx.maps[pid])
        result.nearest_features[pid] = fm[r, c, :]


def _eval_complexity_sample(bundle, ctx, config, result) -> None:
    sample = ctx.sample
    sid = sample.sample_id
    keys = (
        "complexity/object_overlap",
        "complexity/background_overlap",
        "complexity/inside_outside_relevance",
    )
    mask_available = sample.object_mask is not None
    for pid in ctx.top:
        entity = f"{sid}/p{pid}"
        sal = _saliency_for(bundle, sample, ctx.maps, pid, sample.saliency_maps)
        if sal is None:
            for key in keys:
                result.skips.append((key, entity, "saliency map unavailable (method=provided)"))
            continue
        cropped = _crop_or_none(sal, config.percentile, entity, keys, result)
        if cropped is None:
            continue
        cropped_map, mask95, box = cropped
        if mask_available:
            obj = np.asarray(sample.object_mask).astype(bool)
            try:
                result.records.append(
                    ("complexity/object_overlap", entity, grounding.object_overlap(mask95, obj))
                )
                result.records.append(
                    ("complexity/background_overlap", entity, grounding.background_overlap(mask95, obj))
                )
                result.records.append(
                    ("complexity/inside_outside_relevance", entity, grounding.iord(cropped_map, obj))
                )
            except ValidationError as exc:
                for key in keys:
                    result.skips.append((key, entity, str(exc)))
        else:
            for key in keys:
                result.skips.append((key, entity, "no object mask for this sample"))
        if sample.part_points is not None:
            r0, c0, r1, c1 = box
            hits = [
                p.part_id
                for p in sample.part_points
                if p.visible and r0 <= p.row < r1 and c0 <= p.col < c1
            ]
            result.part_hits[pid] = sorted(set(hits))
            result.parts_counted.append(pid)


# ---------------------------------------------------------------------------
# Whole-run evaluation
# ---------------------------------------------------------------------------

def _check_runnable(bundle: DatasetBundle, wanted: set[str]) -> None:
    if "completeness" in wanted and not any(s.perturbed_completeness for s in bundle.samples):
        raise SuiteError("completeness suite requested but no sample carries perturbed artifacts")
    if "continuity" in wanted and not any(s.perturbed_continuity for s in bundle.samples):
        raise SuiteError("continuity suite requested but no sample carries perturbed artifacts")
    if "complexity" in wanted and not any(
        s.object_mask is not None or s.part_points is not None for s in bundle.samples
    ):
        raise SuiteError(
            "complexity suite requested but no sample carries an object mask or part annotations"
        )
    if not bundle.samples:
        raise SuiteError("bundle contains no samples")


def _compactness_weight_matrix(model: ModelBundle) -> np.ndarray:
    """Matrix whose columns are prototypes, for the global-size count."""
    if model.kind == "explicit-shared":
        return protolayer.presence_matrix(model.slot_assignment)
    return np.asarray(model.classifier_weights, dtype=np.float64)


def run_suite(bundle: DatasetBundle, config: SuiteConfig | None = None) -> MetricReport:
    """Evaluate the configured suites over the bundle; returns the report."""
    config = config or SuiteConfig()
    wanted = set(_validate_suites(config.suites))
    _check_runnable(bundle, wanted)
    start = time.perf_counter()

    workers = config.resolve_parallelism()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda s: _evaluate_sample(bundle, s, config, wanted), bundle.samples)
            )
    else:
        results = [_evaluate_sample(bundle, s, config, wanted) for s in bundle.samples]

    report = MetricReport()
    notes: list[str] = []
    for res in results:
        notes.extend(res.notes)
        for key, entity, value in res.records:
            report.series_for(key, DIRECTIONS[key]).add(entity, value)
        for key, entity, reason in res.skips:
            report.series_for(key, DIRECTIONS[key]).skip(entity, reason)

    if "contrastivity" in wanted:
        _finish_contrastivity(bundle, config, results, report)
    if "complexity" in wanted:
        _finish_consistency(bundle, results, report)
    if "compactness" in wanted:
        _finish_compactness(bundle, config, report)
    if "performance" in wanted:
        _finish_performance(bundle, config, results, report)

    run = {
        "schema_version": 1,
        "engine_version": _engine_version(),
        "dataset_name": bundle.dataset_name,
        "multilabel": bundle.multilabel,
        "sample_count": len(bundle.samples),
        "suites": sorted(wanted),
        "seed": config.seed,
        "run_label": config.run_label,
        "config_hash": config.config_hash(),
        "kernel_backend": _kernel_backend(),
        "notes": notes,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "duration_seconds": round(time.perf_counter() - start, 6),
    }
    report.run = run
    return report


def _kernel_backend() -> str:
    from protoscope import kernels

    return kernels.BACKEND


def _engine_version() -> str:
    import protoscope

    return protoscope.__version__


def _finish_contrastivity(bundle, config, results, report) -> None:
    proto_sets: dict[int, list[int]] = {}
    feature_sets: dict[int, list[np.ndarray]] = {}
    used: set[int] = set()
    for res in results:
        used.update(res.top)
        for label in res.labels:
            ids = proto_sets.setdefault(label, [])
            for pid in res.top:
                if pid not in ids:
                    ids.append(pid)
            if res.nearest_features:
                feats = feature_sets.setdefault(label, [])
                for pid in res.top:
                    if pid in res.nearest_features:
                        feats.append(res.nearest_features[pid])

    classes = sorted(proto_sets)
    model = bundle.model

    intra_key = "contrastivity/prototype_distance_intra"
    inter_key = "contrastivity/prototype_distance_inter"
    if model.prototypes is None:
        reason = "explicit prototype vectors do not exist for this model kind"
        report.series_for(intra_key, DIRECTIONS[intra_key]).skip("model", reason)
        report.series_for(inter_key, DIRECTIONS[inter_key]).skip("model", reason)
    else:
        protos = np.asarray(model.prototypes, dtype=np.float64)
        sets = [protos[proto_sets[k]] for k in classes]
        ids = [proto_sets[k] for k in classes]
        series = report.series_for(intra_key, DIRECTIONS[intra_key])
        try:
            value, skipped = contrast.mean_cosine_distance_intra(sets)
            series.add("model", value)
            for pos in skipped:
                series.skip(f"class{classes[pos]}", "singleton prototype set for this class")
        except ValidationError as exc:
            series.skip("model", str(exc))
        series = report.series_for(inter_key, DIRECTIONS[inter_key])
        try:
            series.add("model", contrast.mean_cosine_distance_inter(sets, ids))
        except ValidationError as exc:
            series.skip("model", str(exc))

    fin_key = "contrastivity/feature_distance_intra"
    fout_key = "contrastivity/feature_distance_inter"
    fclasses = sorted(k for k, v in feature_sets.items() if v)
    if not fclasses:
        for key in (fin_key, fout_key):
            report.series_for(key, DIRECTIONS[key]).skip("model", "no feature maps available")
    else:
        fsets = [np.vstack(feature_sets[k]) for k in fclasses]
        series = report.series_for(fin_key, DIRECTIONS[fin_key])
        try:
            value, skipped = contrast.mean_cosine_distance_intra(fsets)
            series.add("model", value)
            for pos in skipped:
                series.skip(f"class{fclasses[pos]}", "singleton feature set for this class")
        except ValidationError as exc:
            series.skip("model", str(exc))
        series = report.series_for(fout_key, DIRECTIONS[fout_key])
        try:
            series.add("model", contrast.mean_cosine_distance_inter(fsets))
        except ValidationError as exc:
            series.skip("model", str(exc))

    ent_key = "contrastivity/activation_entropy"
    series = report.series_for(ent_key, DIRECTIONS[ent_key])
    score_rows = [res.scores for res in results if res.scores is not None]
    if score_rows:
        matrix = np.vstack(score_rows)
        for pid in sorted(used):
            try:
                series.add(f"p{pid}", contrast.activation_entropy(matrix[:, pid], config.entropy_bins))
            except ValidationError as exc:
                series.skip(f"p{pid}", str(exc))


def _finish_consistency(bundle, results, report) -> None:
    key = "complexity/consistency"
    series = report.series_for(key, DIRECTIONS[key])
    if not bundle.part_vocabulary:
        series.skip("model", "manifest declares no part vocabulary")
        return
    hits: dict[int, dict[int, int]] = {}
    counts: dict[int, int] = {}
    used: set[int] = set()
    for res in results:
        used.update(res.top)
        for pid in res.parts_counted:
            counts[pid] = counts.get(pid, 0) + 1
            bucket = hits.setdefault(pid, {})
            for part in res.part_hits.get(pid, []):
                bucket[part] = bucket.get(part, 0) + 1
    for pid in sorted(used):
        if counts.get(pid, 0) == 0:
            series.skip(f"p{pid}", "no annotated image covered this prototype")
            continue
        series.add(
            f"p{pid}",
            grounding.consistency(hits.get(pid, {}), bundle.part_vocabulary, counts[pid]),
        )


def _finish_compactness(bundle, config, report) -> None:
    model = bundle.model
    eps = config.weight_epsilon
    gkey = "compactness/global_size"
    series = report.series_for(gkey, DIRECTIONS[gkey])
    try:
        series.add("model", float(grounding.global_size(_compactness_weight_matrix(model), eps)))
    except ValidationError as exc:
        series.skip("model", str(exc))
    skey = "compactness/sparsity"
    series = report.series_for(skey, DIRECTIONS[skey])
    try:
        series.add("model", grounding.sparsity(model.classifier_weights, eps))
    except ValidationError as exc:
        series.skip("model", str(exc))
    nkey = "compactness/negative_positive_ratio"
    series = report.series_for(nkey, DIRECTIONS[nkey])
    try:
        value = grounding.npr(model.classifier_weights, eps)
        if value is None:
            series.add("model", None)
            series.skip("model", "undefined: negative weights present but no positive weight")
        else:
            series.add("model", value)
    except ValidationError as exc:
        series.skip("model", str(exc))


def _finish_performance(bundle, config, results, report) -> None:
    outputs = np.vstack([res.output for res in results])
    if bundle.multilabel:
        perf = grounding.performance_multi(outputs, [res.labels for res in results])
    else:
        perf = grounding.performance_single(
            outputs, [res.labels[0] for res in results], config.performance_top_k
        )
    for name, value in (
        ("accuracy", perf.accuracy),
        ("top_k_accuracy", perf.top_k_accuracy),
        ("f1", perf.f1),
    ):
        key = f"performance/{name}"
        series = report.series_for(key, DIRECTIONS[key])
        if value is None:
            series.add("model", None)
            series.skip("model", "top-k accuracy is undefined for multi-label outputs")
        else:
            series.add("model", value)


# ---------------------------------------------------------------------------
# Perturbation image generation (feeds the export adapter)
# ---------------------------------------------------------------------------

PERTURBATIONS_SCHEMA = "protoscope-perturbations/1"


def generate_perturbations(
    bundle: DatasetBundle, config: SuiteConfig, out_dir: str | Path
) -> dict:
    """Write perturbed images for both protocols plus a JSON manifest.

    For every sample the photometric chain produces one continuity image;
    for every (sample, top-5 prototype) the occlusion protocol produces one
    completeness image (skipping prototypes whose saliency is degenerate or
    unavailable, recorded in the manifest).  The returned manifest dict is
    also written to ``<out_dir>/perturbations.json``.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    pcfg = config.perturbation
    entries: list[dict] = []
    skipped: list[dict] = []
    for sample in bundle.samples:
        ctx = _original_context(bundle.model, sample, config)
        sid = sample.sample_id
        rng = derive_rng(pcfg.seed, sid, "photometric")
        photometric = photometric_suite(sample.image, pcfg, rng)
        rel = f"images/{sid}__continuity.qpt"
        write_tensor(photometric.astype(np.float32), out_dir / rel)
        entries.append({"sample_id": sid, "protocol": "continuity", "prototype": None, "image": rel})
        for pid in ctx.top:
            sal = _saliency_for(bundle, sample, ctx.maps, pid, sample.saliency_maps)
            if sal is None:
                skipped.append(
                    {"sample_id": sid, "prototype": pid, "reason": "saliency map unavailable"}
                )
                continue
            try:
                _, _, box = percentile_crop(sal, pcfg.percentile)
            except ValidationError as exc:
                skipped.append({"sample_id": sid, "prototype": pid, "reason": str(exc)})
                continue
            rng = derive_rng(pcfg.seed, sid, pid, "occlusion")
            occluded = occlude_outside(sample.image, box, pcfg.occlusion_sigma, rng)
            rel = f"images/{sid}__completeness_p{pid}.qpt"
            write_tensor(occluded.astype(np.float32), out_dir / rel)
            entries.append(
                {"sample_id": sid, "protocol": "completeness", "prototype": pid, "image": rel}
            )
    manifest = {
        "schema": PERTURBATIONS_SCHEMA,
        "dataset_name": bundle.dataset_name,
        "seed": pcfg.seed,
        "config": config.to_dict()["perturbation"],
        "entries": entries,
        "skipped": skipped,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "perturbations.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
