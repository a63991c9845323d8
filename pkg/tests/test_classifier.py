import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from retinal_landmarks import InvalidInputError
from retinal_landmarks.classifier import (
    CLASS_NAMES,
    N_CLASSES,
    NeighborSet,
    classify,
    fuzzy_knn,
    validate_candidate,
)
from retinal_landmarks.saliency import CandidateRegion, Rect, region_windows


def line_set(xs, labels):
    pts = np.column_stack([np.asarray(xs, float), np.zeros(len(xs))])
    return NeighborSet.from_labels(pts, labels)


class TestFuzzyKnn:
    def test_single_neighbour_one_hot(self):
        train = line_set([0.0, 10.0], [2, 5])
        np.testing.assert_allclose(fuzzy_knn(np.array([1.0, 0.0]), train, k=1), np.eye(N_CLASSES)[2])

    def test_equidistant_split(self):
        train = line_set([-1.0, 1.0], [0, 5])
        u = fuzzy_knn(np.zeros(2), train, k=2)
        assert u[0] == pytest.approx(0.5) and u[5] == pytest.approx(0.5)

    def test_worked_example(self):
        # distances 1, 2, 2 with labels a, b, b and m = 2: weights 1, 1/4, 1/4
        train = line_set([1.0, 2.0, -2.0], [0, 1, 1])
        u = fuzzy_knn(np.zeros(2), train, k=3)
        assert u[0] == pytest.approx(2 / 3) and u[1] == pytest.approx(1 / 3)
        assert classify(np.zeros(2), train, k=3) == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(1.2, 4.0))
    def test_matches_scalar_oracle(self, seed, k, m):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(10, 4))
        labels = rng.integers(0, N_CLASSES, 10)
        q = rng.normal(size=4)
        d = np.linalg.norm(pts - q, axis=1)
        nearest = np.argsort(d, kind="stable")[:k]
        ref = oracles.fuzzy_knn_scalar(d[nearest].tolist(), labels[nearest].tolist(), N_CLASSES, m)
        np.testing.assert_allclose(fuzzy_knn(q, NeighborSet.from_labels(pts, labels), k, m), ref, atol=1e-12)

    def test_tie_goes_to_lowest_class(self):
        train = line_set([-1.0, 1.0], [4, 3])
        assert classify(np.zeros(2), train, k=2) == 3

    def test_scaling_all_distances_keeps_memberships(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(12, 3))
        labels = rng.integers(0, N_CLASSES, 12)
        q = rng.normal(size=3)
        a = fuzzy_knn(q, NeighborSet.from_labels(pts, labels), 5)
        b = fuzzy_knn(7.0 * q, NeighborSet.from_labels(7.0 * pts, labels), 5)
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("eps", [1e-3, 1e-6])
    def test_approaching_a_point_tends_to_its_label(self, eps):
        train = line_set([0.0, 1.0, 2.0], [1, 5, 5])
        u = fuzzy_knn(np.array([eps, 0.0]), train, k=3)
        assert u[1] >= 1.0 - 10 * eps**2

    def test_exact_match_returns_its_membership(self):
        train = line_set([0.0, 1.0, 2.0], [1, 5, 5])
        np.testing.assert_array_equal(fuzzy_knn(np.zeros(2), train, k=3), np.eye(N_CLASSES)[1])

    def test_sums_to_one(self, rng):
        train = NeighborSet.from_labels(rng.random((30, 15)), rng.integers(0, N_CLASSES, 30))
        for _ in range(20):
            u = fuzzy_knn(rng.random(15), train, k=9)
            assert u.sum() == pytest.approx(1.0) and np.all(u >= 0)

    @pytest.mark.parametrize("k,m", [(1, 1.0), (1, 0.5), (0, 2.0), (4, 2.0)])
    def test_bad_parameters(self, k, m):
        with pytest.raises(InvalidInputError):
            fuzzy_knn(np.zeros(2), line_set([0.0, 1.0, 2.0], [0, 1, 2]), k=k, m=m)


class TestNeighborSet:
    def test_round_trip(self, tmp_path, rng):
        ns = NeighborSet.from_labels(rng.random((7, 15)), rng.integers(0, N_CLASSES, 7))
        ns.save(tmp_path / "n.flkn")
        raw = (tmp_path / "n.flkn").read_bytes()
        assert raw[:4] == b"FLKN" and len(raw) == 20 + 8 * 7 * (15 + 6)
        back = NeighborSet.load(tmp_path / "n.flkn")
        assert back.points.tobytes() == ns.points.tobytes()
        assert back.memberships.tobytes() == ns.memberships.tobytes()

    def test_bad_files(self, tmp_path, rng):
        (tmp_path / "x").write_bytes(b"FLCB" + bytes(40))
        with pytest.raises(InvalidInputError):
            NeighborSet.load(tmp_path / "x")
        NeighborSet.from_labels(rng.random((3, 2)), [0, 1, 2]).save(tmp_path / "n")
        (tmp_path / "t").write_bytes((tmp_path / "n").read_bytes()[:-8])
        with pytest.raises(InvalidInputError):
            NeighborSet.load(tmp_path / "t")

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            NeighborSet(np.zeros((3, 2)), np.zeros((2, N_CLASSES)))

    def test_class_names(self):
        assert CLASS_NAMES[0] == "od_whole" and CLASS_NAMES[-1] == "non_od" and N_CLASSES == 6


def region_at(x, y, image):
    h, w = image.shape[:2]
    return CandidateRegion((x, y), Rect(int(x) - 5, int(y) - 5, int(x) + 5, int(y) + 5), 100, region_windows(x, y, w, h), 1.0)


class TestValidation:
    def test_disc_accepted_background_rejected(self, trained_synthetic, fundus_1000):
        a, cfg = trained_synthetic.artifacts, trained_synthetic.config
        t = fundus_1000.truth
        ok = validate_candidate(region_at(t.od_x, t.od_y, fundus_1000.image), fundus_1000.image, a.codebook, a.model, a.neighbors)
        assert ok.is_optic_disc and ok.aggregate_od_score >= cfg.tau
        assert len(ok.window_scores) == 6
        assert ok.class_memberships.sum() == pytest.approx(1.0)
        # a field position far from the disc, mirrored through the image centre
        bx, by = t.width - t.od_x, t.height - t.od_y
        bad = validate_candidate(region_at(bx, by, fundus_1000.image), fundus_1000.image, a.codebook, a.model, a.neighbors)
        assert not bad.is_optic_disc

    def test_zero_threshold_always_accepts(self, trained_synthetic, fundus_1000):
        a = trained_synthetic.artifacts
        region = region_at(300.0, 300.0, fundus_1000.image)
        v = validate_candidate(region, fundus_1000.image, a.codebook, a.model, a.neighbors, tau=0.0)
        assert v.is_optic_disc

    def test_no_windows_rejected(self, trained_synthetic, fundus_1000):
        a = trained_synthetic.artifacts
        region = CandidateRegion((0.0, 0.0), Rect(0, 0, 1, 1), 1, [Rect(5, 5, 5, 9)], 0.0)
        v = validate_candidate(region, fundus_1000.image, a.codebook, a.model, a.neighbors, tau=0.0)
        assert not v.is_optic_disc and v.best_window is None and v.window_scores == []
