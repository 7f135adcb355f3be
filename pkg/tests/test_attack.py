import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rotadv import attack, geometry, nn
from rotadv.attack import AttackConfig
from rotadv.errors import ConfigurationError, InvalidInputError

grad_triples = st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3)
angle_triples = st.tuples(*[st.floats(-math.pi, math.pi)] * 3)


def _pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=-1)


class TestRandomAngles:
    def test_within_bound(self):
        rng = np.random.default_rng(0)
        a = np.stack([attack.random_angles(math.pi, rng) for _ in range(1000)])
        assert np.all(np.abs(a) <= math.pi)

    def test_same_seed_same_angles(self):
        assert np.array_equal(attack.random_angles(1.0, attack.sample_rng(3, 7)), attack.random_angles(1.0, attack.sample_rng(3, 7)))

    def test_statistics(self):
        rng = np.random.default_rng(1)
        a = np.stack([attack.random_angles(math.pi, rng) for _ in range(10_000)])
        assert np.all(np.abs(a.mean(axis=0)) < 0.05)
        assert np.all(a.min(axis=0) < 0) and np.all(a.max(axis=0) > 0)

    def test_zero_bound_rejected(self):
        with pytest.raises(InvalidInputError):
            attack.random_angles(0.0, np.random.default_rng())


class TestSteps:
    def test_axis_selection_example(self):
        out = attack.axis_wise_step(np.zeros(3), np.array([0.2, -0.5, 0.1]), 0.01, math.pi)
        np.testing.assert_array_equal(out, [0.0, -0.01, 0.0])

    def test_tie_prefers_x_then_y(self):
        np.testing.assert_array_equal(attack.axis_wise_step(np.zeros(3), [0.3, -0.3, 0.3], 0.1, math.pi), [0.1, 0, 0])
        np.testing.assert_array_equal(attack.axis_wise_step(np.zeros(3), [0.1, 0.3, -0.3], 0.1, math.pi), [0, 0.1, 0])

    def test_zero_gradient_no_move(self):
        a = np.array([0.1, 0.2, 0.3])
        np.testing.assert_array_equal(attack.axis_wise_step(a, np.zeros(3), 0.1, math.pi), a)

    def test_projection_at_bound(self):
        out = attack.axis_wise_step(np.array([0.0, 0.0, math.pi - 0.001]), [0, 0, 1.0], 0.01, math.pi)
        assert out[2] == math.pi

    @given(angle_triples, grad_triples, st.floats(1e-4, 0.5))
    def test_axis_wise_changes_at_most_one_component(self, a, g, alpha):
        a = np.array(a)
        out = attack.axis_wise_step(a, np.array(g), alpha, math.pi)
        changed = np.flatnonzero(out != a)
        assert len(changed) <= 1
        assert np.all(np.abs(out - a) <= alpha + 1e-15)
        assert np.all(np.abs(out) <= math.pi)

    @given(angle_triples, grad_triples, st.floats(1e-4, 0.5))
    def test_standard_moves_every_nonzero_axis(self, a, g, alpha):
        a, g = np.array(a), np.array(g)
        out = attack.standard_step(a, g, alpha, math.pi)
        unclamped = np.abs(a + alpha * np.sign(g)) <= math.pi
        moved = out != a
        assert np.all(moved[(g != 0) & unclamped])
        assert not np.any(moved[g == 0])

    def test_batched_step(self):
        g = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, -3.0]])
        out = attack.axis_wise_step(np.zeros((2, 3)), g, 0.5, math.pi)
        np.testing.assert_array_equal(out, [[0, 0.5, 0], [0, 0, -0.5]])


class TestConfig:
    @pytest.mark.parametrize(
        "kw", [{"steps": -1}, {"step_size": 0.0}, {"bound": 0.0}, {"bound": 4.0}, {"objective": "l2"}, {"restarts": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            AttackConfig(**kw)

    def test_defaults(self):
        cfg = AttackConfig()
        assert (cfg.steps, cfg.step_size, cfg.batch_size, cfg.bound) == (10, 0.01, 17, math.pi)


class TestAxisWiseAttack:
    def test_zero_steps_no_random_start_is_identity(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(0)
        out = attack.axis_wise_attack(small_trained, cloud, cloud.label, AttackConfig(steps=0, random_start=False))
        np.testing.assert_array_equal(out.angles, np.zeros(3))
        np.testing.assert_array_equal(out.cloud.points, cloud.points)

    def test_one_axis_per_step(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(1)
        a = np.zeros(3)
        cfg = AttackConfig(steps=1, random_start=False, step_size=0.05)
        for _ in range(5):
            start = a
            a, _ = attack.run_attack(small_trained, cloud.points[None], [cloud.label], start[None], cfg)
            a = a[0]
            assert np.count_nonzero(a != start) <= 1

    def test_rigid_rotation_of_input(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(2)
        out = attack.axis_wise_attack(small_trained, cloud, cloud.label, AttackConfig(steps=10), np.random.default_rng(0))
        assert np.abs(_pairwise(out.cloud.points) - _pairwise(cloud.points)).max() < 1e-9
        assert geometry.is_rotation(out.rotation, 1e-9)
        np.testing.assert_allclose(out.cloud.points, geometry.apply_rotation(geometry.compose(out.angles), cloud.points), atol=0)

    def test_bound_respected(self, small_trained, small_dataset):
        cfg = AttackConfig(steps=30, step_size=0.2, bound=math.pi / 4)
        angles, _ = attack.attack_split(small_trained, small_dataset.test, cfg, seed=1)
        assert np.all(np.abs(angles) <= math.pi / 4)

    def test_deterministic_without_random_start(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(3)
        cfg = AttackConfig(steps=5, random_start=False)
        a = attack.axis_wise_attack(small_trained, cloud, cloud.label, cfg, np.random.default_rng(1))
        b = attack.axis_wise_attack(small_trained, cloud, cloud.label, cfg, np.random.default_rng(2))
        assert np.array_equal(a.angles, b.angles)

    def test_trace_has_every_step(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(0)
        out = attack.axis_wise_attack(small_trained, cloud, cloud.label, AttackConfig(steps=7), np.random.default_rng(0))
        assert out.trace.shape == (8,)
        assert out.final_objective == pytest.approx(nn.cw_objective(nn.forward(small_trained, out.cloud.points), cloud.label))

    def test_large_steps_raise_objective(self, small_trained, small_dataset):
        # with a generous step the attack should beat its own random start on average
        cfg = AttackConfig(steps=10, step_size=0.1)
        _, traces = attack.attack_split(small_trained, small_dataset.test, cfg, seed=0)
        assert traces[:, -1].mean() > traces[:, 0].mean()


class TestStandardAttack:
    def test_zero_gradient_keeps_start(self, small_dataset):
        # zero output weights: all gradients vanish, so no step moves
        p = nn.init_params(nn.Architecture(h1=8, h2=8, h3=8), 0)
        p = p.replace({**p.tensors, "w4": np.zeros_like(p["w4"])})
        cloud = small_dataset.test.cloud(0)
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        out = attack.standard_attack(p, cloud, cloud.label, AttackConfig(steps=5), rng_a)
        np.testing.assert_array_equal(out.angles, attack.random_angles(math.pi, rng_b))


class TestRandomAttack:
    def test_bound(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(0)
        for s in range(20):
            out = attack.random_rotation_attack(small_trained, cloud, cloud.label, math.pi / 4, np.random.default_rng(s))
            assert np.all(np.abs(out.angles) <= math.pi / 4)

    def test_deterministic(self, small_trained, small_dataset):
        cloud = small_dataset.test.cloud(0)
        a = attack.random_rotation_attack(small_trained, cloud, cloud.label, rng=np.random.default_rng(4))
        b = attack.random_rotation_attack(small_trained, cloud, cloud.label, rng=np.random.default_rng(4))
        assert np.array_equal(a.angles, b.angles)

    def test_equals_attack_start(self, small_trained, small_dataset):
        a, _ = attack.attack_split(small_trained, small_dataset.test, AttackConfig(), seed=2, method="random")
        b, t = attack.attack_split(small_trained, small_dataset.test, AttackConfig(steps=0), seed=2)
        assert np.array_equal(a, b) and t.shape[1] == 1


class TestDatasetAttack:
    def test_one_record_per_sample(self, small_trained, small_dataset):
        recs = attack.attack_dataset(small_trained, small_dataset.test, AttackConfig(steps=2), seed=0)
        assert [r.sample_id for r in recs] == sorted(small_dataset.test.ids.tolist())
        labels = dict(zip(small_dataset.test.ids.tolist(), small_dataset.test.labels.tolist()))
        assert all(r.class_id == labels[r.sample_id] for r in recs)

    def test_rerun_identical(self, small_trained, small_dataset):
        cfg = AttackConfig(steps=3)
        a = attack.attack_dataset(small_trained, small_dataset.test, cfg, seed=4)
        b = attack.attack_dataset(small_trained, small_dataset.test, cfg, seed=4)
        assert all(np.array_equal(x.angles, y.angles) and x.final_objective == y.final_objective for x, y in zip(a, b))

    def test_batch_size_does_not_change_results(self, small_trained, small_dataset):
        a, ta = attack.attack_split(small_trained, small_dataset.test, AttackConfig(steps=3, batch_size=1), seed=4)
        b, tb = attack.attack_split(small_trained, small_dataset.test, AttackConfig(steps=3, batch_size=17), seed=4)
        np.testing.assert_allclose(a, b, atol=0)
        np.testing.assert_allclose(ta, tb, rtol=1e-12)

    def test_workers_do_not_change_results(self, small_trained, small_dataset):
        cfg = AttackConfig(steps=2)
        a, _ = attack.attack_split(small_trained, small_dataset.test, cfg, seed=4, workers=1)
        b, _ = attack.attack_split(small_trained, small_dataset.test, cfg, seed=4, workers=2)
        assert np.array_equal(a, b)

    def test_subset_matches_full_run(self, small_trained, small_dataset):
        cfg = AttackConfig(steps=2)
        full, _ = attack.attack_split(small_trained, small_dataset.test, cfg, seed=4)
        part, _ = attack.attack_split(small_trained, small_dataset.test.subset([5, 2]), cfg, seed=4)
        assert np.array_equal(part, full[[5, 2]])

    def test_records_csv_round_trip(self, tmp_path, small_trained, small_dataset):
        recs = attack.attack_dataset(small_trained, small_dataset.test, AttackConfig(steps=1), seed=0)
        attack.write_records_csv(recs, tmp_path / "r.csv", "abc")
        back = attack.read_records_csv(tmp_path / "r.csv")
        assert all(np.array_equal(a.angles, b.angles) and a.final_objective == b.final_objective for a, b in zip(recs, back))
        assert (tmp_path / "r.csv").read_text().splitlines()[0].endswith(",config_digest")
