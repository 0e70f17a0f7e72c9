"""
Tests for configuration loading, overrides and typed views
"""

import pytest
import yaml

from src.config import CONFIG_DIR, DEFAULT_CONFIG, Config, load_config, parse_override
from src.errors import ConfigError
from src.observables import make_basis


class TestConfig:
    """Test the configuration manager"""

    def test_defaults(self):
        config = Config()
        assert config.get("run.controller") == "sac"
        assert config.get("lqr.solver") == "finite"
        assert config.seeds == list(range(10))

    def test_defaults_are_not_shared(self):
        config = Config()
        config.set("run.ridge", 0.5)
        assert DEFAULT_CONFIG["run"]["ridge"] == 1e-6

    def test_shipped_configs_load(self):
        for name in ("arm_rkl_sac.yaml", "arm_rkl_lqr.yaml", "chain_linear.yaml"):
            config = Config(CONFIG_DIR / name)
            assert config.run_config().controller in ("sac", "lqr")

    def test_file_merges_over_defaults(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"run": {"controller": "lqr"}, "sac": {"rbar": [1.0, 2.0]}}))
        config = Config(path)
        assert config.get("controller") == "lqr"
        assert config.sac_config().rbar == (1.0, 2.0)
        assert config.get("env.u_max") == 0.5

    def test_unknown_file_key(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"run": {"speed": 3}}))
        with pytest.raises(ConfigError):
            Config(path)

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"plotting": {"dpi": 300}}))
        with pytest.raises(ConfigError):
            Config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            Config(tmp_path / "nope.yaml")

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("- just\n- a list\n")
        with pytest.raises(ConfigError):
            Config(path)

    def test_save_and_reload(self, tmp_path):
        config = Config(overrides=["episode_length=20"])
        path = config.save(tmp_path / "saved" / "cfg.yaml")
        assert Config(path).get("run.episode_length") == 20


class TestOverrides:
    """`--set key=value` handling"""

    def test_seed_list_from_commas(self):
        config = load_config(None, ["seeds=1,2,3"])
        assert config.seeds == [1, 2, 3]

    def test_yaml_list_value(self):
        config = load_config(None, ["sac.rbar=[5.0, 6.0]"])
        assert config.sac_config().rbar == (5.0, 6.0)

    def test_scalar_into_list(self):
        assert load_config(None, ["seeds=4"]).seeds == [4]

    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"run": {"episode_length": 100}}))
        assert load_config(path, ["episode_length=7"]).get("episode_length") == 7

    def test_later_override_wins(self):
        config = load_config(None, ["controller=lqr", "controller=sac"])
        assert config.get("controller") == "sac"

    def test_bare_key_prefers_run_section(self):
        config = load_config(None, ["seeds=2"])
        assert config.get("run.seeds") == [2]
        assert config.get("convergence.seeds") == list(range(10))

    def test_ambiguous_bare_key(self):
        with pytest.raises(ConfigError):
            load_config(None, ["dt=0.02"])

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            load_config(None, ["warp=9"])

    def test_get_unknown_returns_default(self):
        assert Config().get("warp", 3) == 3

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_override("no-equals-sign")
        with pytest.raises(ConfigError):
            parse_override("=3")

    def test_null_value(self):
        assert parse_override("initial_path=") == ("initial_path", None)


class TestTypedViews:
    """Dataclass views of config sections"""

    def test_arm_params(self):
        params = load_config(None, ["env.damping=0.0"]).arm_params()
        assert params.damping == 0.0
        assert params.u_max == 0.5

    def test_invalid_arm_params(self):
        with pytest.raises(ConfigError):
            load_config(None, ["env.l1=-1"]).arm_params()

    def test_non_numeric_value(self):
        with pytest.raises(ConfigError):
            load_config(None, ["env.l1=long"]).arm_params()

    def test_basis_specs(self):
        state, control = load_config(None, ["basis.state=polynomial", "basis.degree=2"]).basis_specs()
        assert (state.kind, state.degree, state.n_x) == ("polynomial", 2, 4)
        assert (control.kind, control.n_x) == ("identity", 2)

    def test_compact_polynomial_basis(self):
        overrides = ["basis.state=polynomial", "basis.degree=3", "basis.max_features=28"]
        state, _ = load_config(None, overrides).basis_specs()
        assert make_basis(state).n_z == 28

    def test_sac_backtrack(self):
        assert load_config(None).sac_config().backtrack == 8
        assert load_config(None, ["sac.backtrack=0"]).sac_config().backtrack == 0

    def test_rbf_grid_basis(self):
        state, _ = load_config(None, ["basis.state=gaussian_rbf"]).basis_specs()
        assert len(state.centers) == 81

    def test_rbf_grid_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            load_config(None, ["basis.state=gaussian_rbf", "basis.rbf_points=[3, 3]"]).basis_specs()

    def test_lqr_and_sac(self):
        config = Config()
        lqr = config.lqr_config()
        assert (lqr.weight_pos, lqr.weight_vel, lqr.weight_u) == (200.0, 30.0, 0.001)
        sac = config.sac_config()
        assert sac.steps == 16
        assert sac.nominal == lqr

    def test_invalid_solver(self):
        with pytest.raises(ConfigError):
            load_config(None, ["lqr.solver=exact"]).lqr_config()

    def test_run_config(self):
        cfg = load_config(None, ["seeds=1,2", "initial_steps=50"]).run_config()
        assert cfg.seeds == (1, 2)
        assert cfg.initial_dataset.steps == 50
        assert cfg.echo["run"]["seeds"] == [1, 2]

    def test_invalid_controller(self):
        with pytest.raises(ConfigError):
            load_config(None, ["controller=pid"]).run_config()

    def test_chain_spec(self):
        spec = Config(CONFIG_DIR / "chain_linear.yaml").chain_spec()
        assert spec.n == 2

    def test_unstable_chain(self):
        with pytest.raises(ConfigError):
            load_config(None, ["chain.A=[[1.5, 0.0], [0.0, 0.2]]"]).chain_spec()

    def test_convergence_and_bench_settings(self):
        config = Config()
        assert config.convergence_basis(2).kind == "identity"
        assert config.convergence_settings()["checkpoints"] == [1000, 10000, 100000]
        assert config.bench_settings()["dims"] == [10, 20, 30]

    def test_thread_cap_from_environment(self, monkeypatch):
        monkeypatch.setenv("RKL_THREADS", "3")
        assert Config().threads == 3
