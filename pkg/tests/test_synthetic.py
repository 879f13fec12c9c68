import io
import math

import numpy as np
import pytest

from cicmap import (
    EmptyModelError,
    MatchParams,
    PatchRef,
    SyntheticSpec,
    SyntheticSpecError,
    fit_model,
    sample_centers,
    shifted_companion_spec,
    synth_slide,
)


def _spec(**overrides):
    base = dict(
        n_clusters_p=2,
        n_clusters_n=2,
        cluster_separation=500.0,
        planted_rho=(0.9, 0.9, 0.1, 0.1),
        cols=4,
        rows=4,
        seed=11,
        patch_size_px=64,
        descriptors_per_patch=("uniform", 30, 60),
    )
    base.update(overrides)
    return SyntheticSpec(**base)


class TestSpecValidation:
    def test_rho_length_must_match_cluster_count(self):
        with pytest.raises(SyntheticSpecError):
            _spec(planted_rho=(0.9, 0.1))

    def test_separation_must_exceed_match_threshold(self):
        with pytest.raises(SyntheticSpecError):
            _spec(cluster_separation=300.0)

    def test_separation_beyond_box_diameter_is_infeasible(self):
        bad = _spec(cluster_separation=math.sqrt(128) * 255 + 1)
        with pytest.raises(SyntheticSpecError):
            sample_centers(bad)

    def test_rho_out_of_range_rejected(self):
        with pytest.raises(SyntheticSpecError):
            _spec(planted_rho=(1.5, 0.9, 0.1, 0.1))

    def test_bad_count_distribution_rejected(self):
        with pytest.raises(SyntheticSpecError):
            _spec(descriptors_per_patch=("poisson", 10))
        with pytest.raises(SyntheticSpecError):
            _spec(descriptors_per_patch=("uniform", 50, 10))

    def test_json_roundtrip(self):
        spec = _spec(cluster_weights=(1.0, 1.0, 1.0, 0.5), center_seed=3)
        buf = io.StringIO()
        spec.save(buf)
        back = SyntheticSpec.load(io.StringIO(buf.getvalue()))
        assert back == spec

    def test_unknown_json_field_rejected(self):
        doc = _spec().to_dict()
        doc["mystery"] = 1
        with pytest.raises(SyntheticSpecError):
            SyntheticSpec.from_dict(doc)


class TestCenters:
    def test_pairwise_separation_holds(self):
        spec = _spec(n_clusters_p=4, n_clusters_n=4,
                     planted_rho=(0.9,) * 4 + (0.1,) * 4)
        centers = sample_centers(spec)
        for i in range(len(centers)):
            for j in range(i):
                assert np.linalg.norm(centers[i] - centers[j]) >= spec.cluster_separation

    def test_extending_spec_keeps_center_prefix(self):
        small = _spec()
        big = _spec(
            n_clusters_p=3, n_clusters_n=3,
            planted_rho=(0.9, 0.9, 0.1, 0.1, 1.0, 0.0),
        )
        np.testing.assert_array_equal(sample_centers(small), sample_centers(big)[:4])

    def test_center_seed_overrides_token_seed(self):
        a = sample_centers(_spec(center_seed=99))
        b = sample_centers(_spec(seed=12345, center_seed=99))
        np.testing.assert_array_equal(a, b)


class TestSynthSlide:
    def test_seed_reproducibility(self):
        s1, l1 = synth_slide(_spec())
        s2, l2 = synth_slide(_spec())
        assert l1 == l2
        np.testing.assert_array_equal(s1.descriptors, s2.descriptors)
        np.testing.assert_array_equal(s1.xs, s2.xs)

    def test_label_layout_left_columns_are_cancer(self):
        _, labels = synth_slide(_spec(cols=6, rows=2, cancer_fraction=0.5))
        for (x, y), label in labels.items():
            assert label == ("cancer" if x < 3 else "normal")

    def test_tokens_stay_within_quarter_threshold_of_centers(self):
        spec = _spec()
        slide, _ = synth_slide(spec)
        centers = sample_centers(spec)
        d = np.linalg.norm(
            slide.descriptors[:, None, :].astype(np.float64) - centers[None, :, :], axis=2
        )
        assert np.all(d.min(axis=1) <= spec.match_threshold / 4 + 1e-9)

    def test_descriptor_value_contract(self):
        slide, _ = synth_slide(_spec())
        assert slide.descriptors.min() >= 0.0
        assert slide.descriptors.max() <= 255.0

    def test_fixed_count_distribution(self):
        slide, _ = synth_slide(_spec(descriptors_per_patch=("fixed", 25)))
        assert len(slide) == 25 * 16
        for y in range(4):
            for x in range(4):
                assert slide.patch_count(x, y) == 25

    def test_planted_rho_recovered_by_fit(self):
        spec = _spec(cols=6, rows=6, descriptors_per_patch=("uniform", 80, 120),
                     planted_rho=(0.9, 0.7, 0.3, 0.1))
        slide, labels = synth_slide(spec)
        pos = [PatchRef(slide, x, y) for (x, y), l in sorted(labels.items()) if l == "cancer"]
        neg = [PatchRef(slide, x, y) for (x, y), l in sorted(labels.items()) if l == "normal"]
        model = fit_model(pos, neg, MatchParams())
        fitted = sorted(f.rho_p for f in model.features)
        assert len(fitted) == 4
        for got, want in zip(fitted, sorted(spec.planted_rho)):
            assert abs(got - want) < 0.05
        for f in model.features:
            assert (f.polarity == "positive") == (f.rho_p > 0.5)

    def test_all_neutral_clusters_yield_empty_model(self):
        spec = _spec(planted_rho=(0.5, 0.5, 0.5, 0.5),
                     descriptors_per_patch=("fixed", 40))
        slide, labels = synth_slide(spec)
        pos = [PatchRef(slide, x, y) for (x, y), l in sorted(labels.items()) if l == "cancer"]
        neg = [PatchRef(slide, x, y) for (x, y), l in sorted(labels.items()) if l == "normal"]
        with pytest.raises(EmptyModelError):
            fit_model(pos, neg, MatchParams())

    def test_pure_cancer_clusters_recover_certainty(self):
        # Cancer-only slide plus an unrelated normal-only slide: every cluster
        # of the first appears exclusively on the cancer side.
        spec_p = _spec(planted_rho=(1.0, 1.0, 1.0, 1.0), cancer_fraction=1.0,
                       n_clusters_p=4, n_clusters_n=0, slide_id="pure-p",
                       descriptors_per_patch=("fixed", 30))
        spec_n = _spec(planted_rho=(0.0, 0.0, 0.0, 0.0), cancer_fraction=0.0,
                       n_clusters_p=0, n_clusters_n=4, slide_id="pure-n",
                       seed=77, descriptors_per_patch=("fixed", 30))
        slide_p, labels_p = synth_slide(spec_p)
        slide_n, labels_n = synth_slide(spec_n)
        pos = [PatchRef(slide_p, x, y) for (x, y) in sorted(labels_p)]
        neg = [PatchRef(slide_n, x, y) for (x, y) in sorted(labels_n)]
        model = fit_model(pos, neg, MatchParams())
        assert model.n_p == 4
        for f in model.positives:
            assert f.rho_p == 1.0

    def test_zero_emission_for_a_present_class_rejected(self):
        spec = _spec(planted_rho=(1.0, 1.0, 1.0, 1.0))  # normals cannot emit
        with pytest.raises(SyntheticSpecError):
            synth_slide(spec)


class TestShiftedCompanion:
    def test_companion_emits_only_new_clusters(self):
        base = _spec()
        comp = shifted_companion_spec(
            base, slide_id="shifted", seed=base.seed + 1,
            extra_rho=(1.0, 0.0), extra_is_positive=(True, False),
        )
        slide, labels = synth_slide(comp)
        centers = sample_centers(comp)
        d = np.linalg.norm(
            slide.descriptors[:, None, :].astype(np.float64) - centers[None, :, :], axis=2
        )
        nearest = d.argmin(axis=1)
        assert set(np.unique(nearest)) == {4, 5}
        # cancer patches draw the positive extra cluster, normal the negative
        for (x, y), label in labels.items():
            lo, hi = slide.bucket_bounds[(x, y)]
            want = 4 if label == "cancer" else 5
            assert set(np.unique(nearest[lo:hi])) == {want}

    def test_companion_shares_base_centers(self):
        base = _spec()
        comp = shifted_companion_spec(
            base, slide_id="shifted", seed=123,
            extra_rho=(0.0,), extra_is_positive=(False,),
        )
        np.testing.assert_array_equal(sample_centers(base), sample_centers(comp)[:4])
