import json
import time

import pytest
import yaml

from subnetmarl import cli, masac
from subnetmarl.cli import main


@pytest.fixture(autouse=True)
def run_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


def _config(tmp_path, **sections):
    raw = {"preset": "desk", "env": {"n_subnetworks": 2, "n_channels": 2, "episode_ttis": 30},
           "trainer": {"episodes": 2, "warmup_transitions": 20, "batch_size": 8}}
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def _train(tmp_path, out, *extra):
    return main(["train", "--config", _config(tmp_path), "--seed", "1", "--out", str(out), *extra])


def test_missing_required_section(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("trainer: {episodes: 1}\n")
    assert main(["train", "--config", str(path)]) == 1
    assert "'env'" in capsys.readouterr().err


def test_every_problem_listed(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("env: {n_channels: 0, turn_probs: [0.9, 0.9, 0.9]}\ntrainer: {gamma: 1.5, bogus: 3}\n")
    assert main(["train", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    for word in ("n_channels", "turn_probs", "bogus"):
        assert word in err


def test_train_smoke_under_a_minute(tmp_path):
    t0 = time.time()
    cfg = _config(tmp_path, env={"n_subnetworks": 4, "n_channels": 3, "episode_ttis": 100})
    assert main(["train", "--config", cfg, "--override", "episodes=1", "--out", str(tmp_path / "o")]) == 0
    assert time.time() - t0 < 60
    out = tmp_path / "o"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["trainer"]["episodes"] == 1 and manifest["seed"] == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1


def test_train_determinism_digest(tmp_path, capsys):
    digests = []
    for k in range(2):
        assert _train(tmp_path, tmp_path / f"r{k}") == 0
        digests.append(json.loads(capsys.readouterr().out)["metrics_digest"])
    assert digests[0] == digests[1]


def test_existing_run_dir_untouched(tmp_path):
    out = tmp_path / "r"
    assert _train(tmp_path, out) == 0
    snapshot = {p.name: p.read_bytes() for p in out.iterdir()}
    assert _train(tmp_path, out) == 1
    assert {p.name: p.read_bytes() for p in out.iterdir()} == snapshot


def test_nan_abort_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(masac.MASAC, "update", lambda self, b, generator=None: {"critic_loss": float("nan")})
    assert _train(tmp_path, tmp_path / "nan") == 2
    assert json.loads((tmp_path / "nan" / "completion.json").read_text())["status"] == "aborted"


def test_eval_report_and_errors(tmp_path, capsys):
    assert _train(tmp_path, tmp_path / "r") == 0
    capsys.readouterr()
    ckpt = str(tmp_path / "r" / "actor.pt")
    cfg = _config(tmp_path)
    args = ["eval", "--config", cfg, "--checkpoint", ckpt, "--episodes", "10", "--seed", "4"]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert 0 <= first["outage"] <= 1 and len(first["per_agent_outage"]) == 2
    assert main(args) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert main(args[:-4] + ["--episodes", "0"]) == 1
    assert main(args + ["--override", "env.n_channels=3"]) == 1
    err = capsys.readouterr().err
    assert err.count("fingerprint") >= 1 and len([w for w in err.split() if len(w) == 16]) >= 2


def test_sweep_and_plot(tmp_path, capsys, run_root):
    cfg = _config(tmp_path, experiment={"scenario": "dens", "sweep": "density", "values": [2, 3],
                                        "variants": ["random", "dga"], "episodes": 3, "seeds": [0]})
    assert main(["sweep", "--config", cfg]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    run = run_root / "dens"
    assert main(["plot", str(run), "--out", str(tmp_path / "p1")]) == 0
    assert main(["plot", str(run), "--out", str(tmp_path / "p2")]) == 0
    a, b = tmp_path / "p1" / "outage.png", tmp_path / "p2" / "outage.png"
    assert a.read_bytes() == b.read_bytes()
    rows = (tmp_path / "p1" / "outage.csv").read_text().strip().splitlines()
    assert len(rows) == 5
    # the sweep directory itself is left alone by plot
    assert sorted(p.name for p in run.iterdir()) == ["completion.json", "dga", "manifest.json", "random", "records.jsonl"]
    assert main(["sweep", "--config", cfg]) == 1


def test_plot_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["plot", str(tmp_path / "empty")]) == 0
    assert "nothing to plot" in capsys.readouterr().err


def test_plot_training_run_with_trace(tmp_path, capsys):
    assert _train(tmp_path, tmp_path / "r") == 0
    cfg = _config(tmp_path)
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "r" / "actor.pt"), "--episodes", "2",
                 "--trace", "--out", str(tmp_path / "r-eval")]) == 0
    assert main(["plot", str(tmp_path / "r-eval"), "--out", str(tmp_path / "pe")]) == 0
    assert (tmp_path / "pe" / "timeline.png").exists() and (tmp_path / "pe" / "payload.csv").exists()
    assert main(["plot", str(tmp_path / "r"), "--out", str(tmp_path / "pr")]) == 0
    assert (tmp_path / "pr" / "reward.png").exists()
