"""Suite orchestration: configuration, cardinality, skips, and perturbation output.

These tests run the full engine against the synthetic bundles from
``synth.py`` and check *structure* — which entities exist, what gets skipped
and why, and that parallel execution changes nothing.  Numeric acceptance
thresholds live in test_acceptance.py.
"""

import dataclasses
import json
import math
import re

import numpy as np
import pytest

from protoscope.errors import SuiteError, ValidationError
from protoscope.interchange import load_bundle
from protoscope.pipeline import (
    DIRECTIONS,
    PARALLELISM_ENV,
    SUITES,
    SuiteConfig,
    generate_perturbations,
    run_suite,
)
from protoscope.report import strip_volatile

from synth import BundleWriter, _memory_model, explicit_model
from protoscope import protolayer


@pytest.fixture(scope="module")
def identity_report(identity_manifest):
    return run_suite(load_bundle(identity_manifest))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestSuiteConfig:
    def test_dict_round_trip(self):
        cfg = SuiteConfig(suites=("continuity",), top_k=4, seed=9, run_label="x")
        assert SuiteConfig.from_dict(cfg.to_dict()) == cfg

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValidationError, match="unknown config keys"):
            SuiteConfig.from_dict({"topk": 3})
        with pytest.raises(ValidationError, match="unknown perturbation keys"):
            SuiteConfig.from_dict({"perturbation": {"sigma": 1}})

    def test_hash_ignores_parallelism_but_not_settings(self):
        base = SuiteConfig()
        assert dataclasses.replace(base, parallelism=8).config_hash() == base.config_hash()
        assert dataclasses.replace(base, seed=1).config_hash() != base.config_hash()
        assert re.fullmatch(r"[0-9a-f]{16}", base.config_hash())

    def test_parallelism_resolution(self, monkeypatch):
        monkeypatch.delenv(PARALLELISM_ENV, raising=False)
        assert SuiteConfig().resolve_parallelism() == 1
        assert SuiteConfig(parallelism=6).resolve_parallelism() == 6
        monkeypatch.setenv(PARALLELISM_ENV, "3")
        assert SuiteConfig().resolve_parallelism() == 3
        assert SuiteConfig(parallelism=2).resolve_parallelism() == 2  # explicit wins
        monkeypatch.setenv(PARALLELISM_ENV, "many")
        with pytest.raises(ValidationError):
            SuiteConfig().resolve_parallelism()

    def test_unknown_or_empty_suites_rejected(self, identity_manifest):
        bundle = load_bundle(identity_manifest)
        with pytest.raises(ValidationError, match="unknown suites"):
            run_suite(bundle, SuiteConfig(suites=("banana",)))
        with pytest.raises(ValidationError, match="no suite requested"):
            run_suite(bundle, SuiteConfig(suites=()))


# ---------------------------------------------------------------------------
# Full run over the identity bundle
# ---------------------------------------------------------------------------

class TestIdentityRun:
    def test_every_metric_key_reports(self, identity_report):
        assert set(identity_report.series) == set(DIRECTIONS)
        for key, series in identity_report.series.items():
            assert series.direction == DIRECTIONS[key]

    def test_completeness_cardinality(self, identity_report):
        for metric in ("vlc", "psc", "vac", "plc", "palc", "pac"):
            entities = identity_report.series[f"completeness/{metric}"].entities
            assert len(entities) == 100  # 20 samples x top-5
            assert all(re.fullmatch(r"s\d\d/p\d", e) for e in entities)

    def test_continuity_cardinality(self, identity_report):
        per_proto = identity_report.series["continuity/plc"].entities
        assert len(per_proto) == 100
        for metric in ("cac", "crc"):
            entities = identity_report.series[f"continuity/{metric}"].entities
            assert len(entities) == 20
            assert all(re.fullmatch(r"s\d\d", e) for e in entities)

    def test_identity_perturbation_scores_zero(self, identity_report):
        for metric in ("vlc", "psc", "vac", "plc", "palc", "pac"):
            series = identity_report.series[f"completeness/{metric}"]
            assert series.mean == 0.0 and series.std == 0.0
        for metric in ("plc", "psc", "palc", "pac", "prc", "cac", "crc"):
            series = identity_report.series[f"continuity/{metric}"]
            assert series.mean == 0.0 and series.std == 0.0

    def test_compactness_values(self, identity_report):
        assert identity_report.series["compactness/global_size"].entities["model"] == 6.0
        assert identity_report.series["compactness/sparsity"].entities["model"] == 0.0
        assert identity_report.series["compactness/negative_positive_ratio"].entities["model"] == 0.0
        assert len(identity_report.series["compactness/local_size"].entities) == 20

    def test_entropy_per_prototype(self, identity_report):
        entities = identity_report.series["contrastivity/activation_entropy"].entities
        assert set(entities) <= {f"p{i}" for i in range(6)}
        assert all(0.0 <= v <= math.log(10.0) + 1e-12 for v in entities.values())

    def test_consistency_per_prototype(self, identity_report):
        entities = identity_report.series["complexity/consistency"].entities
        assert entities
        # part 2 is never visible, so at most half the two-part vocabulary hits
        assert all(0.0 <= v <= 0.5 for v in entities.values())

    def test_performance_on_model_entity(self, identity_report):
        for metric in ("accuracy", "top_k_accuracy", "f1"):
            entities = identity_report.series[f"performance/{metric}"].entities
            assert set(entities) == {"model"}
            assert 0.0 <= entities["model"] <= 1.0

    def test_run_metadata(self, identity_report, identity_manifest):
        run = identity_report.run
        assert run["schema_version"] == 1
        assert run["dataset_name"] == "identity-synth"
        assert run["multilabel"] is False
        assert run["sample_count"] == 20
        assert run["suites"] == sorted(SUITES)
        assert run["config_hash"] == SuiteConfig().config_hash()
        assert run["kernel_backend"] in ("native", "python")
        assert run["notes"] == []
        assert "T" in run["created_utc"]
        assert run["duration_seconds"] >= 0

    def test_parallel_run_is_identical(self, identity_report, identity_manifest):
        parallel = run_suite(load_bundle(identity_manifest), SuiteConfig(parallelism=4))
        assert strip_volatile(parallel.to_dict()) == strip_volatile(identity_report.to_dict())

    def test_shortfall_recorded_when_top_k_exceeds_prototypes(self, identity_manifest):
        bundle = load_bundle(identity_manifest)
        report = run_suite(bundle, SuiteConfig(suites=("continuity",), top_k=8))
        assert len(report.run["notes"]) == 20
        assert all("top-8" in note for note in report.run["notes"])
        # all six prototypes evaluated instead
        assert len(report.series["continuity/plc"].entities) == 120


# ---------------------------------------------------------------------------
# Skip recording
# ---------------------------------------------------------------------------

def _forwarded(model, fm):
    maps, scores, output = protolayer.forward_artifacts(model, fm)
    maps32 = maps.astype(np.float32)
    return maps32, maps32.reshape(maps.shape[0], -1).max(axis=1), output


class TestSkips:
    def test_sample_without_object_mask_skips_mask_metrics(self, tmp_path):
        weights, prototypes, class_of = explicit_model(2, 1, 4, seed=1)
        model = _memory_model(weights, prototypes, class_of)
        writer = BundleWriter(
            tmp_path, class_count=2, part_vocabulary=(1,), saliency_method="upscale"
        )
        writer.set_model(
            "explicit-class-specific", weights, prototypes=prototypes, class_of=class_of
        )
        rng = np.random.default_rng(5)
        mask = np.zeros((8, 8), dtype=np.float32)
        mask[0:4, 0:4] = 1.0
        for sid, with_mask in (("a", True), ("b", False)):
            fm = rng.normal(size=(3, 3, 4)).astype(np.float32)
            maps32, scores32, output = _forwarded(model, fm)
            writer.add_sample(
                sid,
                [0],
                rng.uniform(size=(8, 8, 3)).astype(np.float32),
                maps32,
                scores32,
                output,
                object_mask=mask if with_mask else None,
                part_points=[[1, 1.0, 1.0, True]],
            )
        bundle = load_bundle(writer.write())
        report = run_suite(bundle, SuiteConfig(suites=("complexity",), top_k=2))
        overlap = report.series["complexity/object_overlap"]
        assert set(overlap.entities) == {"a/p0", "a/p1"}
        assert set(overlap.skipped) == {"b/p0", "b/p1"}
        assert all("no object mask" in r for r in overlap.skipped.values())
        # consistency still counts sample b through its part annotations
        assert set(report.series["complexity/consistency"].entities) == {"p0", "p1"}

    def test_missing_perturbed_prototype_is_skipped(self, tmp_path):
        weights, prototypes, class_of = explicit_model(2, 1, 4, seed=2)
        model = _memory_model(weights, prototypes, class_of)
        writer = BundleWriter(tmp_path, class_count=2, saliency_method="upscale")
        writer.set_model(
            "explicit-class-specific", weights, prototypes=prototypes, class_of=class_of
        )
        rng = np.random.default_rng(6)
        fm = rng.normal(size=(3, 3, 4)).astype(np.float32)
        maps32, scores32, output = _forwarded(model, fm)
        fm_rel = writer.tensor("a_fm", fm)
        writer.add_sample(
            "a",
            [0],
            rng.uniform(size=(8, 8, 3)).astype(np.float32),
            maps32,
            scores32,
            output,
            feature_map=fm_rel,
            completeness={0: {"feature_map": fm_rel}},  # prototype 1 missing
        )
        bundle = load_bundle(writer.write())
        report = run_suite(bundle, SuiteConfig(suites=("completeness",), top_k=2))
        series = report.series["completeness/plc"]
        assert set(series.entities) == {"a/p0"}
        assert set(series.skipped) == {"a/p1"}
        assert "no perturbed artifacts" in series.skipped["a/p1"]


# ---------------------------------------------------------------------------
# Suites that cannot run at all
# ---------------------------------------------------------------------------

class TestSuiteErrors:
    def test_completeness_needs_perturbed_artifacts(self, indirect_manifest):
        bundle = load_bundle(indirect_manifest)
        with pytest.raises(SuiteError, match="completeness suite"):
            run_suite(bundle, SuiteConfig(suites=("completeness",)))

    def test_continuity_needs_perturbed_artifacts(self, planted_manifest):
        bundle = load_bundle(planted_manifest)
        with pytest.raises(SuiteError, match="continuity suite"):
            run_suite(bundle, SuiteConfig(suites=("continuity",)))

    def test_complexity_needs_annotations(self, indirect_manifest):
        bundle = load_bundle(indirect_manifest)
        with pytest.raises(SuiteError, match="complexity suite"):
            run_suite(bundle, SuiteConfig(suites=("complexity",)))

    def test_empty_bundle(self, identity_manifest):
        bundle = dataclasses.replace(load_bundle(identity_manifest), samples=[])
        with pytest.raises(SuiteError, match="no samples"):
            run_suite(bundle, SuiteConfig(suites=("compactness",)))


# ---------------------------------------------------------------------------
# Other model families
# ---------------------------------------------------------------------------

class TestModelFamilies:
    def test_indirect_bundle_runs_applicable_suites(self, indirect_manifest):
        bundle = load_bundle(indirect_manifest)
        config = SuiteConfig(suites=("continuity", "contrastivity", "compactness", "performance"))
        report = run_suite(bundle, config)
        assert len(report.series["continuity/cac"].entities) == 6
        for key in (
            "contrastivity/prototype_distance_intra",
            "contrastivity/prototype_distance_inter",
        ):
            series = report.series[key]
            assert series.entities == {}
            assert "explicit prototype vectors" in series.skipped["model"]
        # feature maps exist, so feature distances do compute
        assert "model" in report.series["contrastivity/feature_distance_inter"].entities
        assert report.series["compactness/negative_positive_ratio"].entities["model"] == 0.0

    def test_shared_bundle_uses_presence_matrix_for_global_size(self, shared_manifest):
        bundle = load_bundle(shared_manifest)
        report = run_suite(bundle, SuiteConfig(suites=("continuity", "compactness")))
        # every prototype carries slot mass, so all 4 columns count
        assert report.series["compactness/global_size"].entities["model"] == 4.0
        assert report.series["compactness/sparsity"].entities["model"] == 0.0
        assert len(report.series["continuity/cac"].entities) == 5


# ---------------------------------------------------------------------------
# Perturbation image generation
# ---------------------------------------------------------------------------

class TestGeneratePerturbations:
    def test_writes_both_protocols(self, identity_manifest, tmp_path):
        bundle = load_bundle(identity_manifest)
        config = SuiteConfig()
        manifest = generate_perturbations(bundle, config, tmp_path / "run1")
        assert manifest["schema"] == "protoscope-perturbations/1"
        assert manifest["dataset_name"] == "identity-synth"
        assert manifest["skipped"] == []
        continuity = [e for e in manifest["entries"] if e["protocol"] == "continuity"]
        completeness = [e for e in manifest["entries"] if e["protocol"] == "completeness"]
        assert len(continuity) == 20
        assert len(completeness) == 100
        assert all(e["prototype"] is None for e in continuity)
        assert all(isinstance(e["prototype"], int) for e in completeness)
        images = sorted((tmp_path / "run1" / "images").glob("*.qpt"))
        assert len(images) == 120
        on_disk = json.loads((tmp_path / "run1" / "perturbations.json").read_text())
        assert on_disk == manifest
        assert manifest["config"] == config.to_dict()["perturbation"]

    def test_deterministic_across_runs(self, identity_manifest, tmp_path):
        bundle = load_bundle(identity_manifest)
        config = SuiteConfig()
        first = generate_perturbations(bundle, config, tmp_path / "a")
        second = generate_perturbations(bundle, config, tmp_path / "b")
        assert first == second
        for rel in ("images/s00__continuity.qpt", f"images/{first['entries'][1]['image'].rsplit('/', 1)[-1]}"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_degenerate_or_missing_saliency_is_skipped_and_recorded(self, tmp_path):
        weights, prototypes, class_of = explicit_model(2, 1, 4, seed=3)
        model = _memory_model(weights, prototypes, class_of)
        writer = BundleWriter(tmp_path / "src", class_count=2, saliency_method="provided")
        writer.set_model(
            "explicit-class-specific", weights, prototypes=prototypes, class_of=class_of
        )
        rng = np.random.default_rng(8)
        fm = rng.normal(size=(3, 3, 4)).astype(np.float32)
        maps32, scores32, output = _forwarded(model, fm)
        writer.add_sample(
            "a",
            [0],
            rng.uniform(size=(8, 8, 3)).astype(np.float32),
            maps32,
            scores32,
            output,
            # prototype 0: constant map (no percentile cut); prototype 1: absent
            saliency={0: np.full((8, 8), 0.5, dtype=np.float32)},
        )
        bundle = load_bundle(writer.write())
        manifest = generate_perturbations(
            bundle, SuiteConfig(top_k=2), tmp_path / "out"
        )
        assert [e["protocol"] for e in manifest["entries"]] == ["continuity"]
        reasons = {s["prototype"]: s["reason"] for s in manifest["skipped"]}
        assert "constant map" in reasons[0]
        assert "unavailable" in reasons[1]
