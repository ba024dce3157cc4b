from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gae_oracle

from compound_ppo.rollout import (
    RewardScaler,
    RolloutBatch,
    RunningNorm,
    compute_gae,
    decode_frame,
    encode_frame,
    minibatches,
    normalize_advantages,
)


class TestGae:
    def test_single_terminal_step(self):
        adv, ret = compute_gae([1.0], [0.0], [1.0], 0.0, 0.99, 0.95)
        assert adv.tolist() == [1.0] and ret.tolist() == [1.0]

    def test_two_step_example(self):
        adv, _ = compute_gae([0.0, 1.0], [0.0, 0.0], [0, 1], 0.0, 0.99, 0.95)
        np.testing.assert_allclose(adv, [0.9405, 1.0], atol=1e-12)
        np.testing.assert_allclose(adv, gae_oracle([0.0, 1.0], [0.0, 0.0], [0, 1], 0.0, 0.99, 0.95), atol=1e-15)

    def test_td_consistent_values(self):
        gamma = 0.9
        rewards = np.array([1.0, 2.0, 0.5, -1.0])
        bootstrap = 3.0
        values = np.zeros(4)
        nxt = bootstrap
        for t in reversed(range(4)):
            values[t] = rewards[t] + gamma * nxt
            nxt = values[t]
        adv, ret = compute_gae(rewards, values, np.zeros(4), bootstrap, gamma, 0.7)
        np.testing.assert_allclose(adv, 0.0, atol=1e-12)
        np.testing.assert_allclose(ret, values, atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(
        seed=st.integers(0, 1_000_000),
        T=st.integers(1, 64),
        gamma=st.floats(0.0, 1.0),
        lam=st.floats(0.0, 1.0),
        p_done=st.floats(0.0, 0.5),
    )
    def test_matches_oracle(self, seed, T, gamma, lam, p_done):
        rng = np.random.default_rng(seed)
        r = rng.standard_normal(T)
        v = rng.standard_normal(T)
        d = (rng.random(T) < p_done).astype(float)
        b = float(rng.standard_normal())
        adv, ret = compute_gae(r, v, d, b, gamma, lam)
        np.testing.assert_allclose(adv, gae_oracle(r, v, d, b, gamma, lam), rtol=0, atol=1e-10)
        np.testing.assert_allclose(ret, adv + v, rtol=0, atol=1e-15)

    def test_lambda_one_is_discounted_return_minus_baseline(self):
        rng = np.random.default_rng(0)
        T, gamma = 30, 0.97
        r, v, b = rng.standard_normal(T), rng.standard_normal(T), 1.5
        adv, _ = compute_gae(r, v, np.zeros(T), b, gamma, 1.0)
        mc = np.array([sum(gamma ** (k - t) * r[k] for k in range(t, T)) + gamma ** (T - t) * b for t in range(T)])
        np.testing.assert_allclose(adv, mc - v, atol=1e-10)

    def test_terminal_step_advantage(self):
        r = np.array([0.3, -0.2, 1.1, 0.4])
        v = np.array([0.5, 0.1, 0.7, 0.2])
        d = np.array([0, 1, 0, 0])
        adv, _ = compute_gae(r, v, d, 9.0, 0.99, 0.95)
        assert adv[1] == r[1] - v[1]

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_gae([], [], [], 0.0, 0.99, 0.95)
        with pytest.raises(ValueError):
            compute_gae([1.0], [1.0, 2.0], [0], 0.0, 0.99, 0.95)
        with pytest.raises(ValueError):
            compute_gae([1.0], [1.0], [0], 0.0, 1.5, 0.95)


class TestNormalize:
    def test_constant(self):
        np.testing.assert_array_equal(normalize_advantages([3.0, 3.0, 3.0]), [0.0, 0.0, 0.0])

    def test_already_standard(self):
        np.testing.assert_allclose(normalize_advantages([1.0, -1.0]), [1.0, -1.0], atol=1e-15)

    def test_example(self):
        # mean 4, population std sqrt(8/3)
        expected = np.array([-2.0, 0.0, 2.0]) / np.sqrt(8.0 / 3.0)
        out = normalize_advantages([2.0, 4.0, 6.0])
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200).filter(lambda x: np.std(x) > 1e-3))
    def test_moments(self, xs):
        out = normalize_advantages(xs)
        assert abs(out.mean()) < 1e-10
        assert abs(out.std() - 1.0) < 1e-8


class TestMinibatches:
    def test_whole_batch(self):
        mbs = minibatches(8, 8, np.random.default_rng(0))
        assert len(mbs) == 1 and sorted(mbs[0]) == list(range(8))

    def test_partition(self):
        mbs = minibatches(8, 4, np.random.default_rng(0))
        assert len(mbs) == 2
        assert not set(mbs[0]) & set(mbs[1])
        assert sorted(np.concatenate(mbs)) == list(range(8))

    def test_uneven(self):
        mbs = minibatches(10, 4, np.random.default_rng(0))
        assert [len(m) for m in mbs] == [4, 4, 2]

    def test_deterministic(self):
        a = minibatches(20, 6, np.random.default_rng(5))
        b = minibatches(20, 6, np.random.default_rng(5))
        assert all((x == y).all() for x, y in zip(a, b))

    def test_errors(self):
        with pytest.raises(ValueError):
            minibatches(8, 0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            minibatches(8, 9, np.random.default_rng(0))


class TestRunningNorm:
    def test_first_observation_maps_to_zero(self):
        n = RunningNorm(3)
        x = np.array([1.0, -2.0, 5.0])
        n.update(x)
        np.testing.assert_array_equal(n.apply(x), np.zeros(3))

    def test_constant_stream(self):
        n = RunningNorm(2)
        for _ in range(50):
            n.update(np.array([4.0, -1.0]))
        np.testing.assert_allclose(n.apply(np.array([4.0, -1.0])), 0.0, atol=1e-12)

    def test_unit_gaussian_stream(self):
        n = RunningNorm(4)
        rng = np.random.default_rng(0)
        for _ in range(100):
            n.update(rng.standard_normal((1000, 4)))
        assert n.count == 100_000
        assert np.abs(n.mean).max() < 0.02
        assert np.abs(n.var - 1.0).max() < 0.05

    def test_streaming_matches_batch_moments(self):
        data = np.random.default_rng(1).normal(3.0, 2.0, size=(997, 3))
        n = RunningNorm(3)
        for chunk in np.array_split(data, 13):
            n.update(chunk)
        np.testing.assert_allclose(n.mean, data.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(n.var, data.var(axis=0), rtol=1e-10)

    def test_clip(self):
        n = RunningNorm(1)
        n.update(np.array([[0.0], [1.0]]))
        assert n.apply(np.array([1e6]))[0] == 10.0

    def test_state_round_trip(self):
        n = RunningNorm(2)
        n.update(np.random.default_rng(2).standard_normal((10, 2)))
        m = RunningNorm.from_state(n.state_dict())
        x = np.array([0.3, -0.4])
        np.testing.assert_array_equal(m.apply(x), n.apply(x))


def test_reward_scaler_divides_by_return_std():
    s = RewardScaler(1, 0.0)  # gamma 0: the "return" is the reward itself
    rng = np.random.default_rng(0)
    out = None
    for r in rng.normal(0.0, 4.0, 20_000):
        out = s(np.array([r]), np.array([False]))
    assert np.sqrt(s.stats.var) == pytest.approx(4.0, rel=0.05)
    assert out is not None


class TestRolloutBatch:
    def _batch(self):
        n = 5
        return RolloutBatch(np.zeros((n, 3)), np.zeros((n, 2), dtype=np.int64), np.zeros((n, 2)),
                            np.arange(n, dtype=float), np.zeros(n), np.zeros(n))

    def test_take_requires_advantages(self):
        with pytest.raises(ValueError):
            self._batch().take(np.array([0]))

    def test_take(self):
        b = self._batch()
        b.advantages = np.arange(5.0)
        b.returns = np.arange(5.0)
        sub = b.take(np.array([4, 1]))
        assert sub.rewards.tolist() == [4.0, 1.0] and len(sub) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            RolloutBatch(np.zeros((2, 3)), np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(2), np.zeros(2), np.zeros(2))


class TestFrames:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        arrays = {
            "obs": rng.standard_normal((7, 3, 5)),
            "actions": rng.integers(0, 5, (7, 3, 2)),
            "dones": rng.random((7, 3)) < 0.2,
            "bootstrap": rng.standard_normal(3),
            "empty": np.zeros(0),
        }
        version, out = decode_frame(encode_frame(42, arrays))
        assert version == 42
        assert list(out) == list(arrays)
        for k, a in arrays.items():
            assert out[k].dtype == a.dtype and out[k].shape == a.shape
            assert out[k].tobytes() == a.tobytes()

    def test_length_prefix(self):
        frame = encode_frame(1, {"x": np.ones(3)})
        assert int.from_bytes(frame[:4], "little") == len(frame) - 4
        with pytest.raises(ValueError):
            decode_frame(frame[:-1])

    def test_bad_magic(self):
        frame = bytearray(encode_frame(1, {"x": np.ones(3)}))
        frame[4] ^= 0xFF
        with pytest.raises(ValueError):
            decode_frame(bytes(frame))
