import pytest

from subnetmarl.config import (
    ConfigError,
    EnvConfig,
    ExperimentSpec,
    TrainerConfig,
    apply_overrides,
    build_configs,
    desk_env,
    fingerprint,
    load_config,
)


def test_defaults():
    cfg = EnvConfig()
    assert cfg.snapshot_ms == 100.0
    assert cfg.off_level == 2 and cfg.max_level == 0
    assert cfg.n_actions == 9 and cfg.obs_dim == 11
    t = TrainerConfig()
    assert (t.lr_actor, t.lr_critic, t.gamma) == (1e-4, 1e-3, 0.9)


def test_fingerprint_ignores_seed_only():
    a = desk_env()
    assert fingerprint(a) == fingerprint(a.replace(seed=9))
    assert fingerprint(a) != fingerprint(a.replace(n_channels=2))


def test_overrides_dotted_and_bare():
    raw = apply_overrides({"env": {}}, ["env.n_channels=2", "episodes=5", "values=[4, 8]"])
    assert raw == {"env": {"n_channels": 2}, "trainer": {"episodes": 5}, "experiment": {"values": [4, 8]}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["nonsense=1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_desk_preset():
    env, trainer, exp = build_configs({"preset": "desk", "env": {"n_subnetworks": 8}})
    assert env.n_subnetworks == 8 and env.area_m == (24.0, 24.0) and env.excess_loss_db > 0
    with pytest.raises(ConfigError):
        build_configs({"preset": "galaxy", "env": {}})


def test_sweep_values_sorted_and_nonempty():
    with pytest.raises(ConfigError):
        ExperimentSpec(sweep="density", values=(8, 4))
    with pytest.raises(ConfigError):
        ExperimentSpec(sweep="bandwidth", values=())


def test_heterogeneous_payload_length_checked():
    with pytest.raises(ConfigError, match="payload_bits"):
        EnvConfig(n_subnetworks=3, payload_bits=(1, 2))


def test_load_config(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("env:\n  n_channels: 2\ntrainer:\n  ganet: {attention: no_hard}\n")
    (env, trainer, _), raw = load_config(p, ["trainer.alpha=0.1"])
    assert env.n_channels == 2 and trainer.ganet.attention == "no_hard" and trainer.alpha == 0.1
