"""Container validation, binary feature files, manifests, folds, generator."""

import json
import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digebench.datastore import (Cohort, FeatureFileError, Magnification,
                                 ManifestError, PatchEmbedding, SlideBag,
                                 SurvivalRecord, SynthSpec,
                                 UnsatisfiableDesignError, assign_folds,
                                 fold_split, load_cohort, read_feature_file,
                                 synth_cohort, synth_cohort_with_truth,
                                 write_feature_file, write_manifest)


def make_patch(x=0, y=0, level=Magnification.X20, dim=4, fill=1.0):
    return PatchEmbedding(x, y, level, np.full(dim, fill, dtype=np.float32))


def make_bag(slide_id="s1", n=3, dim=4, label=0, **kw):
    patches = [make_patch(x=i, dim=dim, fill=float(i)) for i in range(n)]
    return SlideBag(slide_id=slide_id, patches=patches, label=label, **kw)


class TestContainers:
    def test_patch_rejects_negative_coords(self):
        with pytest.raises(ValueError):
            make_patch(x=-1)

    def test_patch_rejects_non_finite_features(self):
        with pytest.raises(ValueError):
            PatchEmbedding(0, 0, Magnification.X20,
                           np.array([1.0, np.nan], dtype=np.float32))

    def test_survival_record_validation(self):
        SurvivalRecord(time_days=10.0, event=1)
        with pytest.raises(ValueError):
            SurvivalRecord(time_days=0.0, event=1)
        with pytest.raises(ValueError):
            SurvivalRecord(time_days=5.0, event=2)

    def test_bag_rejects_empty(self):
        with pytest.raises(ValueError):
            SlideBag(slide_id="e", patches=[], label=0)

    def test_bag_rejects_mixed_dims(self):
        with pytest.raises(ValueError):
            SlideBag(slide_id="m", patches=[make_patch(dim=4), make_patch(x=1, dim=5)],
                     label=0)

    def test_bag_rejects_duplicate_positions(self):
        with pytest.raises(ValueError):
            SlideBag(slide_id="d", patches=[make_patch(), make_patch()], label=0)

    def test_bag_probs_length_and_range(self):
        with pytest.raises(ValueError):
            make_bag(roi_tumor_probs=np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            make_bag(roi_tumor_probs=np.array([0.5, 0.5, 1.5]))
        bag = make_bag(roi_tumor_probs=np.array([0.0, 0.5, 1.0]))
        assert bag.roi_tumor_probs.dtype == np.float64

    def test_feature_matrix_is_float64(self):
        m = make_bag().feature_matrix()
        assert m.dtype == np.float64
        assert m.shape == (3, 4)

    def test_cohort_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            Cohort(name="c", dim=4, class_names=["a", "b"],
                   slides=[make_bag("x"), make_bag("x")])

    def test_cohort_rejects_label_out_of_range(self):
        with pytest.raises(ValueError):
            Cohort(name="c", dim=4, class_names=["a"],
                   slides=[make_bag("x", label=1)])

    def test_magnification_labels(self):
        assert Magnification.X20.label == "20x"
        assert Magnification.X2_5.label == "2.5x"


class TestFeatureFile:
    def test_round_trip_bitwise(self, tmp_path):
        bag = make_bag(n=5, dim=7)
        path = tmp_path / "bag.dgpf"
        write_feature_file(bag, path)
        back = read_feature_file(path)
        assert len(back) == 5
        for orig, got in zip(bag.patches, back):
            assert (orig.x, orig.y, orig.level) == (got.x, got.y, got.level)
            assert orig.features.tobytes() == got.features.tobytes()

    def test_file_size_formula(self, tmp_path):
        n, dim = 5, 7
        path = tmp_path / "bag.dgpf"
        written = write_feature_file(make_bag(n=n, dim=dim), path)
        expect = 16 + 12 * n + 4 * n * dim
        assert written == expect
        assert path.stat().st_size == expect

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bag.dgpf"
        write_feature_file(make_bag(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FeatureFileError):
            read_feature_file(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "bag.dgpf"
        write_feature_file(make_bag(), path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FeatureFileError):
            read_feature_file(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bag.dgpf"
        write_feature_file(make_bag(), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FeatureFileError):
            read_feature_file(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bag.dgpf"
        write_feature_file(make_bag(), path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FeatureFileError):
            read_feature_file(path)

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_random_bags(self, n, dim, seed):
        rng = np.random.default_rng(seed)
        patches = [
            PatchEmbedding(i, i * 2, Magnification(int(rng.integers(0, 4))),
                           rng.normal(size=dim).astype(np.float32))
            for i in range(n)
        ]
        bag = SlideBag(slide_id="r", patches=patches, label=0)
        with tempfile.TemporaryDirectory() as tdir:
            path = Path(tdir) / "r.dgpf"
            write_feature_file(bag, path)
            back = read_feature_file(path)
        got = np.stack([p.features for p in back])
        assert got.tobytes() == np.stack([p.features for p in bag.patches]).tobytes()


class TestManifest:
    def _cohort(self):
        slides = [
            make_bag("a", label=0, site="s0",
                     roi_tumor_probs=np.array([0.1, 0.9, 0.4])),
            make_bag("b", label=1, site="s1",
                     survival=SurvivalRecord(120.0, 1)),
        ]
        return Cohort(name="mini", dim=4, class_names=["neg", "pos"], slides=slides)

    def test_round_trip(self, tmp_path):
        manifest = write_manifest(self._cohort(), tmp_path)
        back = load_cohort(manifest)
        assert [s.slide_id for s in back.slides] == ["a", "b"]
        assert back.slides[0].roi_tumor_probs is not None
        np.testing.assert_allclose(back.slides[0].roi_tumor_probs, [0.1, 0.9, 0.4])
        assert back.slides[1].survival.time_days == 120.0
        assert back.slides[1].survival.event == 1
        assert back.class_names == ["neg", "pos"]
        a = back.slides[0].feature_matrix()
        np.testing.assert_array_equal(a, self._cohort().slides[0].feature_matrix())

    def test_bad_json_line_numbered(self, tmp_path):
        manifest = write_manifest(self._cohort(), tmp_path)
        lines = manifest.read_text().splitlines()
        lines[1] = "{broken"
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="line 2"):
            load_cohort(manifest)

    def test_duplicate_id_rejected(self, tmp_path):
        manifest = write_manifest(self._cohort(), tmp_path)
        lines = manifest.read_text().splitlines()
        manifest.write_text("\n".join(lines + [lines[0]]) + "\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_cohort(manifest)

    def test_unknown_field_rejected(self, tmp_path):
        manifest = write_manifest(self._cohort(), tmp_path)
        lines = manifest.read_text().splitlines()
        row = json.loads(lines[0])
        row["surprise"] = 1
        lines[0] = json.dumps(row)
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="line 1"):
            load_cohort(manifest)


class TestFolds:
    def _cohort(self, n=30, n_classes=3):
        slides = [make_bag(f"s{i:03d}", label=i % n_classes) for i in range(n)]
        return Cohort(name="f", dim=4,
                      class_names=[f"c{j}" for j in range(n_classes)], slides=slides)

    def test_stratified_balance(self):
        cohort = assign_folds(self._cohort(30, 3), 5, seed=0)
        for label in range(3):
            counts = [0] * 5
            for s in cohort.slides:
                if s.label == label:
                    counts[s.fold] += 1
            assert max(counts) - min(counts) <= 1

    def test_deterministic(self):
        a = assign_folds(self._cohort(), 5, seed=3)
        b = assign_folds(self._cohort(), 5, seed=3)
        assert [s.fold for s in a.slides] == [s.fold for s in b.slides]

    def test_seed_changes_assignment(self):
        a = assign_folds(self._cohort(), 5, seed=3)
        b = assign_folds(self._cohort(), 5, seed=4)
        assert [s.fold for s in a.slides] != [s.fold for s in b.slides]

    def test_too_few_slides_per_class(self):
        with pytest.raises(UnsatisfiableDesignError):
            assign_folds(self._cohort(6, 3), 5, seed=0)

    def test_split_rule(self):
        cohort = assign_folds(self._cohort(30, 3), 5, seed=0)
        train, val, test = fold_split(cohort, 2)
        assert all(s.fold == 2 for s in test)
        assert all(s.fold == 3 for s in val)
        assert all(s.fold not in (2, 3) for s in train)
        assert len(train) + len(val) + len(test) == 30

    def test_split_wraps_last_fold(self):
        cohort = assign_folds(self._cohort(30, 3), 5, seed=0)
        _, val, test = fold_split(cohort, 4)
        assert all(s.fold == 4 for s in test)
        assert all(s.fold == 0 for s in val)

    def test_split_requires_folds(self):
        with pytest.raises(ValueError):
            fold_split(self._cohort(), 0)


class TestSynth:
    def test_deterministic_bitwise(self):
        spec = SynthSpec(n_slides=8, patches_per_slide=(4, 9), dim=6, n_classes=2,
                         class_mean_separation=2.0, signal_fraction=0.5, seed=12)
        a = synth_cohort(spec)
        b = synth_cohort(spec)
        for sa, sb in zip(a.slides, b.slides):
            assert sa.feature_matrix().tobytes() == sb.feature_matrix().tobytes()
            assert sa.roi_tumor_probs.tobytes() == sb.roi_tumor_probs.tobytes()

    def test_shapes_and_labels(self):
        spec = SynthSpec(n_slides=10, patches_per_slide=(4, 9), dim=6, n_classes=3,
                         class_mean_separation=2.0, signal_fraction=0.5, seed=1)
        cohort = synth_cohort(spec)
        assert len(cohort.slides) == 10
        assert cohort.dim == 6
        assert [s.label for s in cohort.slides] == [i % 3 for i in range(10)]
        for s in cohort.slides:
            assert 4 <= s.n_patches <= 9

    def test_truth_marks_high_probability_patches(self):
        spec = SynthSpec(n_slides=12, patches_per_slide=(6, 12), dim=6, n_classes=2,
                         class_mean_separation=3.0, signal_fraction=0.4, seed=3)
        cohort, truth = synth_cohort_with_truth(spec)
        for s in cohort.slides:
            signal = set(truth.signal_indices[s.slide_id].tolist())
            for j, p in enumerate(s.roi_tumor_probs):
                if j in signal:
                    assert p >= 0.65
                else:
                    assert p < 0.35
            if s.label == 0:
                assert not signal

    def test_zero_separation_allowed(self):
        spec = SynthSpec(n_slides=6, patches_per_slide=(4, 6), dim=4, n_classes=2,
                         class_mean_separation=0.0, signal_fraction=0.5, seed=2)
        cohort = synth_cohort(spec)
        assert len(cohort.slides) == 6

    def test_survival_cohort(self):
        spec = SynthSpec(n_slides=40, patches_per_slide=(4, 8), dim=5, n_classes=2,
                         class_mean_separation=2.0, signal_fraction=0.5,
                         censoring_rate=0.3, seed=4)
        cohort = synth_cohort(spec, task_kind="survival")
        assert cohort.task_kind == "survival"
        events = [s.survival.event for s in cohort.slides]
        assert all(s.survival.time_days > 0 for s in cohort.slides)
        assert all(s.label == s.survival.event for s in cohort.slides)
        # Censoring rate 0.3 over 40 slides: expect roughly 12 censored.
        assert 0.1 <= 1.0 - np.mean(events) <= 0.5

    def test_unknown_task_kind(self):
        spec = SynthSpec(n_slides=4, patches_per_slide=(4, 6), dim=4, n_classes=2,
                         class_mean_separation=1.0, signal_fraction=0.5, seed=0)
        with pytest.raises(ValueError):
            synth_cohort(spec, task_kind="regression")

    def test_grid_positions_unique(self):
        spec = SynthSpec(n_slides=5, patches_per_slide=(10, 20), dim=4, n_classes=2,
                         class_mean_separation=1.0, signal_fraction=0.5, seed=6)
        cohort = synth_cohort(spec)
        for s in cohort.slides:
            coords = {(p.x, p.y) for p in s.patches}
            assert len(coords) == s.n_patches
            width = max(1, math.ceil(math.sqrt(s.n_patches)))
            assert all(p.x < width for p in s.patches)
