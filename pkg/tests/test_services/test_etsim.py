import math

import numpy as np
import pytest

from app.schemas.experiment import SimSettings
from app.schemas.simulation import InterEventRecord, IntegratorKind, SimConfig, UncertaintyKind, UncertaintyModel
from app.services.etsim import RK4, EventTriggeredSimulator, Euler
from app.services.lab import LabService
from app.core.exceptions import DimensionError, DomainError


class TestIntegrators:
    """固定ステップ積分器のテストクラス"""

    def test_exponential_decay(self):
        """ẋ = −x の1ステップの精度のテスト"""
        func = lambda t, x: -x
        x0 = np.array([1.0])
        h = 0.1
        exact = math.exp(-h)
        assert Euler(func).integration_step(0.0, x0, h)[0] == pytest.approx(0.9)
        assert abs(RK4(func).integration_step(0.0, x0, h)[0] - exact) < 1e-6


class TestUncertainty:
    """ゲイン不確かさモデルのテストクラス"""

    def test_sinusoid_within_bound(self):
        """正弦波の不確かさが各エージェントで δ 以下になるテスト"""
        delta_k = EventTriggeredSimulator.uncertainty_fn(
            UncertaintyModel(kind=UncertaintyKind.SINUSOID, bound=0.02), 6, 1, 2
        )
        for t in np.linspace(0.0, 10.0, 101):
            values = delta_k(float(t))
            assert values.shape == (6, 1, 2)
            norms = np.linalg.norm(values.reshape(6, -1), axis=1)
            assert np.all(norms <= 0.02 + 1e-15)
        assert np.allclose(np.linalg.norm(delta_k(math.pi / 2).reshape(6, -1), axis=1), 0.02)

    def test_random_directions_within_bound(self):
        """RANDOM の不確かさが δ 以下でシードに対して再現性を持つテスト"""
        model = UncertaintyModel(kind=UncertaintyKind.RANDOM, bound=0.05)
        delta_k = EventTriggeredSimulator.uncertainty_fn(model, 4, 1, 2, seed=3)
        for t in np.linspace(0.0, 10.0, 51):
            norms = np.linalg.norm(delta_k(float(t)).reshape(4, -1), axis=1)
            assert np.all(norms <= 0.05 + 1e-15)
        assert np.allclose(np.linalg.norm(delta_k(math.pi / 2).reshape(4, -1), axis=1), 0.05)

        same = EventTriggeredSimulator.uncertainty_fn(model, 4, 1, 2, seed=3)
        other = EventTriggeredSimulator.uncertainty_fn(model, 4, 1, 2, seed=4)
        np.testing.assert_array_equal(delta_k(1.0), same(1.0))
        assert not np.allclose(delta_k(1.0), other(1.0))

    def test_custom_exceeding_bound(self):
        """上界を超える CUSTOM 不確かさのエラーテスト"""
        model = UncertaintyModel(
            kind=UncertaintyKind.CUSTOM, bound=0.01, custom=lambda t, i: np.full((1, 2), 1.0)
        )
        delta_k = EventTriggeredSimulator.uncertainty_fn(model, 2, 1, 2)
        with pytest.raises(DomainError):
            delta_k(0.0)

    def test_none(self):
        """不確かさなしで0を返すテスト"""
        delta_k = EventTriggeredSimulator.uncertainty_fn(UncertaintyModel(), 3, 1, 2)
        np.testing.assert_array_equal(delta_k(1.0), np.zeros((3, 1, 2)))


class TestEventTriggeredSimulator:
    """EventTriggeredSimulatorのテストクラス"""

    def test_example_run_metrics(self, example_simulation):
        """例題のシミュレーションが収束し通信を大きく削減するテスト"""
        sim = example_simulation
        assert sim.converged
        assert sim.ST >= 90.0
        assert 8000 <= sim.TI <= 20000
        assert 35.0 <= sim.Ju <= 85.0
        assert sim.zeno_ok
        assert all(gap > 0.0 for gap in sim.min_interevent)
        assert all(count >= 1 for count in sim.trigger_counts)
        assert sim.ST == pytest.approx((1.0 - sim.AT / sim.TI) * 100.0)
        assert EventTriggeredSimulator.trigger_soundness(sim) <= 1e-12

    def test_example_run_envelope(self, example_simulation, example_synthesis):
        """例題の軌道が指数包絡線の内側に入るテスト"""
        ok, worst = EventTriggeredSimulator.check_envelope(example_simulation, example_synthesis.zeta, example_synthesis.c)
        assert ok
        assert worst <= 1.05

    def test_example_run_consensus_limit(self, example_simulation, example_bundle):
        """収束時のエージェント間距離が δ_c と σ_min(L̂) で抑えられるテスト"""
        final = example_simulation.final_states()
        sigma_min = np.linalg.svd(example_bundle.L_hat, compute_uv=False).min()
        spread = max(np.linalg.norm(final[i] - final[j]) for i in range(6) for j in range(6))
        # 保持値の広がりは 2√(N−1)δ_c/σ_min 以下、実状態との差は送信誤差分
        assert spread <= 2.0 * (math.sqrt(5.0) / sigma_min + 1.0) * example_simulation.delta_c

    def test_example_run_zeno_records(self, example_simulation, example_plant, example_synthesis):
        """記録したイベント間隔が Zeno 下界を満たすテスト"""
        cfg = LabService.sim_config(SimSettings(), example_plant, example_synthesis.phi, example_synthesis.delta)
        ok, violations = EventTriggeredSimulator.check_zeno(
            example_simulation, example_plant, example_synthesis.K, example_synthesis.phi, cfg
        )
        assert ok
        assert violations == []
        assert sum(len(records) for records in example_simulation.interevent) == sum(example_simulation.trigger_counts) - 6

    def test_identical_initial_states(self, example_plant, example_bundle, example_synthesis):
        """初期状態が一致していれば0ステップで収束するテスト"""
        settings_ = SimSettings(initial_states=[1.0, 0.0] * 6)
        sim = LabService.simulate(example_plant, example_bundle, example_synthesis, settings_)
        assert sim.converged
        assert sim.TI == 0
        assert sim.trigger_counts == [1] * 6
        assert sim.Ju == 0.0
        assert sim.ST == 0.0

    def test_zero_threshold_triggers_every_step(self, example_plant, example_bundle, example_synthesis):
        """φ = 0 で毎ステップ送信し AT = TI になるテスト"""
        sim = LabService.simulate(example_plant, example_bundle, example_synthesis, SimSettings(), phi=0.0)
        assert sim.converged
        assert sim.AT == sim.TI
        assert sim.ST == 0.0
        assert sim.zeno_ok

    def test_zero_gains_leave_envelope(self, example_plant, example_bundle, example_synthesis):
        """ゲインを0にすると包絡線の外に出るテスト"""
        cfg = LabService.sim_config(
            SimSettings(max_steps=5000, uncertainty=UncertaintyKind.NONE), example_plant, example_synthesis.phi, 0.0
        )
        sim = EventTriggeredSimulator.run(example_plant, example_bundle, [np.zeros((1, 2))] * 6, cfg)
        assert not sim.converged
        assert sim.TI == 5000
        ok, worst = EventTriggeredSimulator.check_envelope(sim, example_synthesis.zeta, example_synthesis.c)
        assert not ok
        assert worst > 1.05

    def test_rk4_matches_euler(self, pair_plant, pair_bundle):
        """RK4 とオイラーで同じ合意値付近に収束するテスト"""
        gains = [np.array([[-1.0, -2.0]])] * 2
        results = []
        for integrator in (IntegratorKind.EULER, IntegratorKind.RK4):
            cfg = SimConfig(phi=0.05, initial_states=[1.0, 0.0, -1.0, 0.0], integrator=integrator, max_steps=50000)
            results.append(EventTriggeredSimulator.run(pair_plant, pair_bundle, gains, cfg))
        for sim in results:
            assert sim.converged
            assert sim.trajectories.shape[1:] == (2, 2)
        # 対称な初期値なので合意位置は0付近
        for sim in results:
            assert np.all(np.abs(sim.final_states()[:, 0]) < 0.1)

    def test_dimension_errors(self, pair_plant, pair_bundle):
        """ゲインと初期状態の次元エラーテスト"""
        cfg = SimConfig(phi=0.1, initial_states=[1.0, 0.0, 0.0, 0.0])
        with pytest.raises(DimensionError):
            EventTriggeredSimulator.run(pair_plant, pair_bundle, [np.zeros((1, 2))], cfg)
        bad = SimConfig(phi=0.1, initial_states=[1.0, 0.0, 0.0])
        with pytest.raises(DimensionError):
            EventTriggeredSimulator.run(pair_plant, pair_bundle, [np.zeros((1, 2))] * 2, bad)

    def test_check_zeno_requires_two_agents(self, pair_plant, pair_bundle):
        """1エージェントの結果で Zeno 判定がエラーになるテスト"""
        cfg = SimConfig(phi=0.1, initial_states=[1.0, 0.0, 1.0, 0.0])
        sim = EventTriggeredSimulator.run(pair_plant, pair_bundle, [np.zeros((1, 2))] * 2, cfg)
        single = sim.model_copy(update={"trigger_counts": [1], "interevent": [[]]})
        with pytest.raises(DomainError):
            EventTriggeredSimulator.check_zeno(single, pair_plant, [np.zeros((1, 2))], 0.1, cfg)

    def test_check_zeno_uses_interval_start_norm(self, pair_plant, pair_bundle):
        """Zeno 判定が区間開始時の ‖X̂_i(t_k)‖ で下界と δ_c の判定を行うテスト"""
        cfg = SimConfig(phi=0.5, initial_states=[1.0, 0.0, -1.0, 0.0], T_s=0.01, delta_c=1e-3, max_steps=10)
        sim = EventTriggeredSimulator.run(pair_plant, pair_bundle, [np.zeros((1, 2))] * 2, cfg)
        # 開始時は大きく終了時は小さい区間: 下界 ln(6) より短いので違反
        shrinking = InterEventRecord(t_start=0.0, t_end=0.5, xhat_norm=0.0, xhat_norm_start=10.0, f_bar=1.0)
        # 開始時が δ_c 未満の区間は対象外
        growing = InterEventRecord(t_start=0.0, t_end=0.5, xhat_norm=10.0, xhat_norm_start=0.0, f_bar=1.0)
        gains = [np.zeros((1, 2))] * 2

        ok, violations = EventTriggeredSimulator.check_zeno(
            sim.model_copy(update={"interevent": [[shrinking], []]}), pair_plant, gains, 0.5, cfg
        )
        assert not ok
        assert violations == [(0, 0)]

        ok, violations = EventTriggeredSimulator.check_zeno(
            sim.model_copy(update={"interevent": [[growing], []]}), pair_plant, gains, 0.5, cfg
        )
        assert ok
        assert violations == []

    def test_envelope_rows(self, pair_plant, pair_bundle):
        """包絡線の行が (t, ‖x_r‖, 上界) になるテスト"""
        cfg = SimConfig(phi=0.1, initial_states=[1.0, 0.0, -1.0, 0.0], max_steps=100)
        sim = EventTriggeredSimulator.run(pair_plant, pair_bundle, [np.array([[-1.0, -2.0]])] * 2, cfg)
        rows = sim.envelope_rows(0.4, 2.0)
        assert rows[0][0] == 0.0
        assert rows[0][2] == pytest.approx(2.0 * rows[0][1])
        assert len(rows) == len(sim.times)
        x_r0 = np.linalg.norm(pair_bundle.L_hat_n() @ np.array([1.0, 0.0, -1.0, 0.0]))
        assert rows[0][1] == pytest.approx(x_r0)
