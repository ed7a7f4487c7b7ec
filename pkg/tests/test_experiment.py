import csv

import numpy as np
import pytest

from gpiqc import experiment, lti, sector
from gpiqc.experiment import ConfigError, ExperimentConfig


class TestConfig:
    def test_defaults_valid(self):
        cfg = ExperimentConfig()
        assert cfg.noise_std == 0.05
        assert cfg.reg == pytest.approx(0.0025)
        assert cfg.noise_bound == cfg.noise_std

    def test_variance_reading(self):
        cfg = ExperimentConfig(noise_interpretation="variance", noise_level=0.04)
        assert cfg.noise_std == pytest.approx(0.2)
        assert cfg.reg == pytest.approx(0.04)

    def test_zero_noise_keeps_regularization(self):
        assert ExperimentConfig(noise_level=0.0).reg > 0

    @pytest.mark.parametrize("kw", [
        dict(noise_interpretation="sd"), dict(delta=0.0), dict(delta=1.0), dict(n_data=0),
        dict(sizes=[10, 0]), dict(trials=0), dict(iterations=-1), dict(noise_level=-1.0),
        dict(phi_coeffs=[1.0]), dict(domain=[0.0, 1.0]), dict(prior_sector=[0.5, -0.5]),
        dict(loop_mode="forever"), dict(grid_points=2), dict(exclusion_radius=0.0),
        dict(sim_step=1.0, sim_horizon=0.5),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(seed=7, sizes=[10, 20], noise_interpretation="variance")
        cfg.save(tmp_path / "c.json")
        assert ExperimentConfig.load(tmp_path / "c.json") == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"seeds": 3})


class TestPlant:
    def test_static_gains(self):
        cfg = ExperimentConfig()
        g = experiment.build_distcol_plant(cfg).sys
        M = np.asarray(cfg.plant_gain)
        # y = r - G (u - p), q = u
        np.testing.assert_allclose(lti.freq_response(g.select(["u"], ["y"]), 0.0), -M,
                                   rtol=1e-12)
        np.testing.assert_allclose(lti.freq_response(g.select(["p"], ["y"]), 0.0), M,
                                   rtol=1e-12)
        np.testing.assert_allclose(lti.freq_response(g.select(["w"], ["y"]), 0.0), np.eye(2))
        np.testing.assert_array_equal(g.select(["u"], ["q"]).D, np.eye(2))
        assert g.n_states == 6

    def test_weights(self):
        cfg = ExperimentConfig()
        g = experiment.build_distcol_plant(cfg).sys
        We = lti.TransferFactory.first_order(*cfg.weight_e)
        Wu = lti.TransferFactory.first_order(*cfg.weight_u)
        for w in (0.01, 1.0, 30.0):
            zu = lti.freq_response(g.select(["u"], ["z"]), w)
            np.testing.assert_allclose(zu[2:], lti.freq_response(Wu, w)[0, 0] * np.eye(2),
                                       rtol=1e-10)
            zw = lti.freq_response(g.select(["w"], ["z"]), w)
            np.testing.assert_allclose(zw[:2], lti.freq_response(We, w)[0, 0] * np.eye(2),
                                       rtol=1e-10)

    def test_monitor_output(self):
        g = experiment.build_distcol_plant(monitor=True).sys
        assert g.width("e") == 2


class TestLearning:
    def test_ground_truth(self):
        cfg = ExperimentConfig()
        f = experiment.ground_truth(cfg)
        assert f.norm == pytest.approx(cfg.phi_norm)
        assert f(np.array([0.0]))[0] == 0.0

    def test_trial_streams(self):
        a = experiment.trial_rng(1, 2, 50).standard_normal(3)
        b = experiment.trial_rng(1, 2, 50).standard_normal(3)
        c = experiment.trial_rng(1, 3, 50).standard_normal(3)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_learn_sector(self):
        cfg = ExperimentConfig()
        a = experiment.learn_sector(cfg, 50, experiment.trial_rng(0))
        b = experiment.learn_sector(cfg, 50, experiment.trial_rng(0))
        assert a.sectors[0] == b.sectors[0]
        assert a.deltas == [cfg.delta / 2] * 2
        true = sector.scan_sector(experiment.ground_truth(cfg))
        assert a.sectors[0].contains(true)

    def test_shared_function_budget(self):
        cfg = ExperimentConfig(shared_function=True)
        ls = experiment.learn_sector(cfg, 50, experiment.trial_rng(0))
        assert ls.deltas == [cfg.delta]
        split = experiment.learn_sector(ExperimentConfig(), 50, experiment.trial_rng(0))
        assert split.sectors[0].contains(ls.sectors[0])


class TestRuns:
    def test_zero_sector_prior_is_nominal(self, tmp_path):
        cfg = ExperimentConfig(prior_sector=[0.0, 0.0], iterations=1)
        res = experiment.run_prior_experiment(cfg, tmp_path)
        assert res["status"] == "ok" and res["replay"]["ok"]
        assert res["gamma_tilde"] >= res["gamma0"] * (1 - 1e-3)
        assert res["gamma_tilde"] <= res["gamma0"] * 1.02
        assert (tmp_path / "prior_report.json").exists()
        assert (tmp_path / "controller.json").exists()

    def test_huge_sector_infeasible(self):
        res = experiment.run_prior_experiment(ExperimentConfig(prior_sector=[-2.0, 2.0],
                                                               iterations=1))
        assert res["status"] == "infeasible"

    def test_sign_violation(self):
        res = experiment.run_prior_experiment(ExperimentConfig(prior_sector=[0.1, 0.5]))
        assert res["status"] == "assumption_violated"

    def test_small_sweep(self, tmp_path):
        cfg = ExperimentConfig(sizes=[20, 80], trials=3, iterations=0)
        rows = experiment.run_tradeoff_sweep(cfg, tmp_path)
        assert [r["n"] for r in rows] == [20, 80]
        assert all(r["trials"] == 3 and r["averaged_sector"] for r in rows)
        with open(tmp_path / "sweep_trials.csv") as fh:
            trials = list(csv.DictReader(fh))
        assert len(trials) == 6
        again = experiment.run_tradeoff_sweep(cfg)
        assert [r["width_median"] for r in again] == [r["width_median"] for r in rows]
