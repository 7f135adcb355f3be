import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotadv import nn
from rotadv.errors import FormatError, InvalidInputError

SMALL = nn.Architecture(h1=8, h2=12, h3=6, n_classes=4)


def _cloud(seed, n=20):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 3))


def _tie_free(params, cloud, h):
    """True when no pooled argmax changes under +-h perturbation of any coordinate."""
    base = nn.pooled_argmax(params, cloud)
    for i in range(cloud.shape[0]):
        for k in range(3):
            for s in (h, -h):
                c = cloud.copy()
                c[i, k] += s
                if not np.array_equal(nn.pooled_argmax(params, c), base):
                    return False
    return True


def _fd_param(params, cloud, label, objective, name, index, h):
    out = []
    for s in (h, -h):
        t = {k: params[k].copy() for k in nn.PARAM_NAMES}
        t[name][index] += s
        out.append(nn.objective_values(params.replace(t), cloud, [label], objective)[0])
    return (out[0] - out[1]) / (2 * h)


class TestArchitecture:
    def test_default_shapes(self):
        shapes = nn.Architecture().shapes()
        assert shapes["w1"] == (3, 64)
        assert shapes["w2"] == (64, 128)
        assert shapes["w3"] == (128, 64)
        assert shapes["w4"] == (64, 8)

    @pytest.mark.parametrize("kw", [{"h1": 0}, {"n_classes": 1}, {"pooling": "mean"}])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(Exception):
            nn.Architecture(**kw)


class TestInit:
    def test_same_seed_same_params(self):
        assert nn.init_params(SMALL, 5).equals(nn.init_params(SMALL, 5))

    def test_different_seed_differs(self):
        assert not nn.init_params(SMALL, 5).equals(nn.init_params(SMALL, 6))

    def test_biases_zero(self):
        p = nn.init_params(SMALL, 0)
        assert all(not p[b].any() for b in ("b1", "b2", "b3", "b4"))


class TestForward:
    def test_single_and_batch_agree(self):
        p = nn.init_params(SMALL, 1)
        clouds = np.stack([_cloud(i) for i in range(3)])
        batch = nn.forward(p, clouds)
        for i in range(3):
            np.testing.assert_allclose(nn.forward(p, clouds[i]), batch[i], atol=1e-12)

    def test_permutation_invariant(self):
        p = nn.init_params(SMALL, 2)
        c = _cloud(3)
        perm = np.random.default_rng(0).permutation(len(c))
        np.testing.assert_allclose(nn.forward(p, c), nn.forward(p, c[perm]), atol=1e-12)

    def test_duplicating_points_leaves_logits_unchanged(self):
        p = nn.init_params(SMALL, 2)
        c = _cloud(4)
        np.testing.assert_allclose(nn.forward(p, c), nn.forward(p, np.concatenate([c, c[:5]])), atol=1e-12)

    def test_matches_naive_reference(self):
        # elementwise reference using log(1 + exp(x)) directly
        p = nn.init_params(SMALL, 3)
        c = _cloud(5)
        sp = lambda x: np.log1p(np.exp(x))
        h = sp(c @ p["w1"] + p["b1"])
        g = sp((h @ p["w2"] + p["b2"]).max(axis=0))
        expected = sp(g @ p["w3"] + p["b3"]) @ p["w4"] + p["b4"]
        np.testing.assert_allclose(nn.forward(p, c), expected, rtol=1e-12)

    def test_rejects_empty_cloud(self):
        with pytest.raises(InvalidInputError):
            nn.forward(nn.init_params(SMALL), np.zeros((0, 3)))

    def test_softplus_large_inputs_finite(self):
        x = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
        out = nn.softplus(x.copy())
        assert np.all(np.isfinite(out))
        assert out[-1] == 800.0 and out[2] == math.log(2)


class TestObjectives:
    def test_cross_entropy_uniform_logits(self):
        assert nn.cross_entropy(np.zeros(8), 3) == pytest.approx(math.log(8), rel=1e-15)

    def test_cw_margin_example(self):
        assert nn.cw_objective(np.array([2.0, 5.0, 1.0]), 0) == 3.0
        assert nn.cw_objective(np.array([7.0, 5.0, 1.0]), 0) == -2.0

    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=8), st.data())
    def test_cross_entropy_non_negative(self, logits, data):
        label = data.draw(st.integers(0, len(logits) - 1))
        assert nn.cross_entropy(np.array(logits), label) >= 0.0

    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=8), st.data())
    def test_cw_positive_iff_misclassified(self, logits, data):
        z = np.array(logits)
        label = data.draw(st.integers(0, len(z) - 1))
        others = np.delete(z, label)
        no_tie = others.max() != z[label]
        if no_tie:
            assert (nn.cw_objective(z, label) > 0) == (others.max() > z[label])

    def test_rejects_bad_label(self):
        with pytest.raises(InvalidInputError):
            nn.cross_entropy(np.zeros(4), 4)


class TestBackward:
    @pytest.mark.parametrize("objective", nn.OBJECTIVES)
    def test_param_gradients_match_finite_differences(self, objective):
        h = 1e-5
        p = nn.init_params(SMALL, 7)
        c, label = _cloud(11), 2
        assert _tie_free(p, c, 1e-4)
        res = nn.backward(p, c, label, objective)
        rng = np.random.default_rng(0)
        for name in nn.PARAM_NAMES:
            for _ in range(6):
                index = tuple(int(rng.integers(s)) for s in p[name].shape)
                fd = _fd_param(p, c, label, objective, name, index, h)
                an = res.param_grads[name][index]
                assert abs(an - fd) <= 1e-4 * max(abs(fd), 1e-3), (name, index, an, fd)

    @pytest.mark.parametrize("objective", nn.OBJECTIVES)
    def test_coordinate_gradients_match_finite_differences(self, objective):
        h = 1e-5
        p = nn.init_params(SMALL, 8)
        c, label = _cloud(12), 1
        assert _tie_free(p, c, 1e-4)
        res = nn.backward(p, c, label, objective)
        fd = np.zeros_like(c)
        for i in range(len(c)):
            for k in range(3):
                vals = []
                for s in (h, -h):
                    q = c.copy()
                    q[i, k] += s
                    vals.append(nn.objective_values(p, q, [label], objective)[0])
                fd[i, k] = (vals[0] - vals[1]) / (2 * h)
        np.testing.assert_allclose(res.coord_grads, fd, rtol=1e-4, atol=1e-4 * np.abs(fd).max())

    def test_only_pooled_points_receive_gradient(self):
        p = nn.init_params(SMALL, 9)
        c = _cloud(13, n=60)
        res = nn.backward(p, c, 0, "cross_entropy")
        routed = set(nn.pooled_argmax(p, c).tolist())
        silent = [i for i in range(len(c)) if i not in routed]
        assert silent and not res.coord_grads[silent].any()

    def test_tie_routes_to_first_point(self):
        p = nn.init_params(SMALL, 10)
        c = _cloud(14)
        c = np.concatenate([c, c])  # every point duplicated: each channel ties
        res = nn.backward(p, c, 0, "cw")
        assert not res.coord_grads[20:].any()
        assert np.all(nn.pooled_argmax(p, c) < 20)

    def test_batch_sum_and_mean(self):
        p = nn.init_params(SMALL, 11)
        clouds = np.stack([_cloud(20 + i) for i in range(4)])
        labels = np.array([0, 1, 2, 3])
        total = nn.backward(p, clouds, labels, reduction="sum")
        mean = nn.backward(p, clouds, labels, reduction="mean")
        singles = [nn.backward(p, clouds[i], labels[i]) for i in range(4)]
        for name in nn.PARAM_NAMES:
            summed = sum(s.param_grads[name] for s in singles)
            np.testing.assert_allclose(total.param_grads[name], summed, atol=1e-12)
            np.testing.assert_allclose(mean.param_grads[name], summed / 4, atol=1e-12)
        np.testing.assert_allclose(total.coord_grads[2], singles[2].coord_grads, atol=1e-12)

    def test_rejects_unknown_objective(self):
        with pytest.raises(InvalidInputError):
            nn.backward(nn.init_params(SMALL), _cloud(0), 0, "hinge")


class TestSgdStep:
    def test_moves_against_gradient(self):
        p = nn.init_params(SMALL, 0)
        grads = {k: np.ones_like(p[k]) for k in nn.PARAM_NAMES}
        q = nn.sgd_step(p, grads, 0.5)
        for k in nn.PARAM_NAMES:
            np.testing.assert_allclose(q[k], p[k] - 0.5)

    def test_does_not_mutate_input(self):
        p = nn.init_params(SMALL, 0)
        before = p.flat().copy()
        nn.sgd_step(p, {k: np.ones_like(p[k]) for k in nn.PARAM_NAMES}, 0.1)
        np.testing.assert_array_equal(p.flat(), before)

    def test_small_step_decreases_loss(self):
        p = nn.init_params(SMALL, 1)
        c = _cloud(30)
        res = nn.backward(p, c, 3)
        q = nn.sgd_step(p, res.param_grads, 1e-3)
        assert nn.objective_values(q, c, [3])[0] < res.loss

    @pytest.mark.parametrize("lr", [0.0, -0.1])
    def test_rejects_non_positive_lr(self, lr):
        p = nn.init_params(SMALL)
        with pytest.raises(InvalidInputError):
            nn.sgd_step(p, {k: np.zeros_like(p[k]) for k in nn.PARAM_NAMES}, lr)

    def test_rejects_shape_mismatch(self):
        p = nn.init_params(SMALL)
        grads = {k: np.zeros_like(p[k]) for k in nn.PARAM_NAMES}
        grads["w2"] = np.zeros((2, 2))
        with pytest.raises(InvalidInputError):
            nn.sgd_step(p, grads, 0.1)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        p = nn.init_params(SMALL, 4)
        nn.save_checkpoint(p, tmp_path / "m.ckpt", {"note": "x"})
        q, meta = nn.load_checkpoint(tmp_path / "m.ckpt", with_meta=True)
        assert q.equals(p) and q.arch == p.arch and meta == {"note": "x"}

    def test_bytes_deterministic(self, tmp_path):
        p = nn.init_params(SMALL, 4)
        nn.save_checkpoint(p, tmp_path / "a")
        nn.save_checkpoint(p, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_truncated(self, tmp_path):
        nn.save_checkpoint(nn.init_params(SMALL), tmp_path / "m")
        blob = (tmp_path / "m").read_bytes()
        (tmp_path / "m").write_bytes(blob[:-9])
        with pytest.raises(FormatError):
            nn.load_checkpoint(tmp_path / "m")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "m").write_bytes(b"not a checkpoint at all")
        with pytest.raises(FormatError):
            nn.load_checkpoint(tmp_path / "m")


class TestTraining:
    def test_trained_model_fits_small_dataset(self, small_dataset, small_trained):
        acc = (nn.predict(small_trained, small_dataset.test.points) == small_dataset.test.labels).mean()
        assert acc >= 0.9
