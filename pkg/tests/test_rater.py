import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import kink_margins, relative_errors
from treeloop.config import RaterConfig
from treeloop.kde import kde_voxelize
from treeloop.rater import (RaterNet, Topology, augment_rotation_z,
                            class_weights, evaluate, load_rater, rate_points,
                            rater_forward, save_rater, train_rater)
from treeloop.synth import generate_rating_corpus


class TestClassWeights:
    def test_balanced_counts(self):
        assert class_weights([100, 100, 100]) == pytest.approx([1, 1, 1])

    def test_reported_imbalance(self):
        # Production-scale counts with heavy NonTree overrepresentation.
        w = class_weights([3790, 1448, 7985])
        assert w == pytest.approx([1.163, 3.044, 0.552], abs=5e-4)

    def test_tiny_counts(self):
        w = class_weights([1, 1, 2])
        assert w == pytest.approx([4 / 3, 4 / 3, 2 / 3])
        assert (w * [1, 1, 2]) == pytest.approx([4 / 3] * 3)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            class_weights([5, 0, 3])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 10_000_000), min_size=2, max_size=6))
    def test_weight_equation(self, counts):
        c = np.asarray(counts, dtype=float)
        w = class_weights(counts)
        total = c.sum()
        assert np.abs(w * c - total / len(c)).max() < 1e-9 * total
        assert (w * c).sum() == pytest.approx(total, rel=1e-12)


class TestRotation:
    def test_angle_zero_identity(self, rng):
        pts = rng.uniform(-5, 5, (40, 3))
        out = augment_rotation_z(pts, angle=0.0)
        np.testing.assert_allclose(out, pts, atol=1e-12)

    def test_half_turn(self):
        pts = np.array([[0.0, 0.0, 1.0], [2.0, 0.0, 3.0]])
        out = augment_rotation_z(pts, angle=np.pi)
        centroid = pts[:, :2].mean(axis=0)  # (1, 0)
        np.testing.assert_allclose(out[1, :2], centroid - (pts[1, :2] - centroid),
                                   atol=1e-9)
        np.testing.assert_allclose(out[:, 2], pts[:, 2])

    def test_pairwise_distances_preserved(self, rng):
        pts = rng.uniform(-4, 4, (30, 3))
        out = augment_rotation_z(pts, rng=rng)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=2)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_z_unchanged(self, rng):
        pts = rng.uniform(0, 10, (25, 3))
        out = augment_rotation_z(pts, rng=rng)
        np.testing.assert_allclose(out[:, 2], pts[:, 2], atol=0)


SMALL_TOPO = Topology(resolution=8, extent=5.0, channels=(4, 8),
                      head_channels=4, mlp_hidden=8)


class TestForward:
    def test_softmax_normalized_fresh_params(self, rng):
        net = RaterNet(SMALL_TOPO, seed=0)
        grid = kde_voxelize(rng.uniform(-2, 2, (50, 3)), 8, 5.0)
        proba = rater_forward(grid, net)
        assert proba.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(proba > 0)

    def test_infer_deterministic_and_stats_frozen(self):
        net = RaterNet(SMALL_TOPO, seed=0)
        zero = np.zeros((1, 8, 8, 8))
        a = net.predict_proba(zero)
        b = net.predict_proba(zero)
        np.testing.assert_array_equal(a, b)

    def test_resolution_mismatch_rejected(self, rng):
        net = RaterNet(SMALL_TOPO, seed=0)
        grid = kde_voxelize(rng.uniform(-2, 2, (10, 3)), 16, 5.0)
        with pytest.raises(ValueError):
            rater_forward(grid, net)


GRADCHECK_TOPO = Topology(resolution=4, extent=8.0, channels=(2, 3),
                          head_channels=2, mlp_hidden=4)
GRADCHECK_SEED = 14
KINK_MARGIN = 3e-3


def gradcheck_problem(seed=GRADCHECK_SEED):
    """Reduced 2-block topology on real KDE grids.

    Central differences are only meaningful while no relu sign or pool winner
    flips inside the probe interval, so the configuration is pinned to a seed
    whose switch margins are verified healthy (asserted below); any seed with
    margins above KINK_MARGIN behaves the same.
    """
    net = RaterNet(GRADCHECK_TOPO, seed=seed, dtype=np.float64)
    clusters, labels = generate_rating_corpus(1, seed=seed, density=10.0)
    grids = np.stack([kde_voxelize(c, GRADCHECK_TOPO.resolution,
                                   GRADCHECK_TOPO.extent).values
                      for c in clusters])
    weights = np.array([1.0, 1.4, 0.8])
    return net, grids, labels, weights


class TestGradients:
    def test_full_reduced_topology_gradcheck(self):
        net, x, y, weights = gradcheck_problem()
        relu_margin, pool_margin = kink_margins(net, x)
        assert min(relu_margin, pool_margin) > KINK_MARGIN, \
            "check input sits too close to a relu/pool switch for FD probing"
        errors = relative_errors(net, x, y, weights, eps=1e-3)
        worst = max(errors.values())
        assert worst < 1e-4, f"worst tensor rel err {worst}: {errors}"


def small_corpus(n=12, seed=0):
    clusters, labels = generate_rating_corpus(n, seed=seed, density=20.0)
    return clusters, labels


class TestTraining:
    def test_learns_separable_classes(self):
        clusters, labels = small_corpus(n=20, seed=1)
        cfg = RaterConfig(resolution=16, extent=20.0, channels=(6, 12, 24, 48),
                          epochs=10, batch_size=8, seed=3)
        net, history = train_rater(clusters, labels, cfg)
        assert history[-1]["val_accuracy"] >= 0.75
        # Loss non-increasing in at least 4 of the first 5 steps.
        losses = [h["train_loss"] for h in history[:6]]
        drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a + 1e-9)
        assert drops >= 4

    def test_missing_class_rejected(self):
        clusters, labels = small_corpus(n=4)
        mask = labels != 2
        with pytest.raises(Exception, match="class"):
            train_rater([c for c, m in zip(clusters, mask) if m],
                        labels[mask], RaterConfig(resolution=8, channels=(4, 8),
                                                  epochs=1))

    def test_deterministic_under_seed(self):
        clusters, labels = small_corpus(n=6, seed=2)
        cfg = RaterConfig(resolution=8, channels=(4, 8), epochs=2,
                          batch_size=4, seed=9)
        net1, hist1 = train_rater(clusters, labels, cfg)
        net2, hist2 = train_rater(clusters, labels, cfg)
        assert hist1 == hist2
        for a, b in zip(net1.params(), net2.params()):
            np.testing.assert_array_equal(a.value, b.value)


class TestPersistence:
    def test_ratr_roundtrip(self, tmp_path, rng):
        net = RaterNet(SMALL_TOPO, seed=4)
        net.forward_logits(np.abs(rng.standard_normal((2, 8, 8, 8))),
                           train=True, update_stats=True)
        path = save_rater(net, tmp_path / "rater.params")
        back = load_rater(path)
        assert back.topology.to_dict() == net.topology.to_dict()
        x = np.abs(rng.standard_normal((2, 8, 8, 8)))
        np.testing.assert_allclose(back.predict_proba(x), net.predict_proba(x),
                                   atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.params"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError):
            load_rater(path)


def test_rate_points_shapes(rng):
    net = RaterNet(SMALL_TOPO, seed=0)
    sets = [rng.uniform(-2, 2, (30, 3)) for _ in range(5)]
    labels, confidence = rate_points(net, sets)
    assert labels.shape == (5,)
    assert confidence.shape == (5,)
    assert np.all((confidence > 1 / 3) & (confidence <= 1.0))
    assert np.all((labels >= 0) & (labels < 3))
