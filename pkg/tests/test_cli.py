"""Config schema and command-line behavior tests."""

import csv

import numpy as np
import pytest
import yaml

from nafbo.cli import main
from nafbo.config import ConfigError, load_config
from nafbo.nets import Mlp, save_checkpoint


def write_config(tmp_path, overrides=None, name="exp.yaml", **replace):
    cfg = {
        "family": {"base": "rhino1"},
        "gp": {"kernel": "matern52", "lengthscales": [0.1],
               "signal_variance": 1.0, "noise_variance": 1e-6},
        "budget": 3,
        "n_global": 16,
        "k": 2,
        "eval": {"n_runs": 4},
        "seed": 1,
    }
    cfg.update(replace)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def fake_checkpoint(path, include_x=False, dim=1, n_global=16, k=2):
    rng = np.random.default_rng(0)
    in_width = 4 + dim if include_x else 4
    meta = {"iteration": 1, "mean_reward": 0.0, "dim": dim, "include_x": include_x,
            "n_global": n_global, "n_local": n_global, "k": k, "big_t": 3,
            "reward_mode": "neg_regret", "family_base": "rhino1"}
    save_checkpoint(path, Mlp([in_width, 8, 1], rng, final_scale=0.01),
                    Mlp([2, 4, 1], rng), meta)
    return path


# ---------------------------------------------------------------------------
# config loading


def test_load_config_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.family.base == "rhino1"
    assert cfg.budget == 3
    assert cfg.n_global == 16 and cfg.k == 2
    assert cfg.n_local is None
    assert cfg.include_x is True
    assert cfg.reward_mode == "neg_regret"
    assert cfg.n_runs == 4
    assert cfg.ppo.batch_size == 1200  # untouched defaults
    assert cfg.gp.kernel.kind == "matern52"


def test_missing_sections_named(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"gp": {"kernel": "matern52", "lengthscales": [0.1]},
                                    "budget": 3}))
    with pytest.raises(ConfigError, match="family"):
        load_config(path)
    path.write_text(yaml.safe_dump({"family": {"base": "rhino1"}, "budget": 3}))
    with pytest.raises(ConfigError, match="gp"):
        load_config(path)
    path.write_text(yaml.safe_dump({"family": {"base": "rhino1"},
                                    "gp": {"kernel": "matern52", "lengthscales": [0.1]}}))
    with pytest.raises(ConfigError, match="budget"):
        load_config(path)


def test_unknown_keys_rejected_by_name(tmp_path):
    path = write_config(tmp_path, {"trian": {"n_iterations": 5}})
    with pytest.raises(ConfigError, match="unknown config keys: trian"):
        load_config(path)
    path = write_config(tmp_path, {"af": {"kind": "ei", "betaa": 3.0},
                                   "study": {"timing": {"afs": [], "foo": 1}}})
    with pytest.raises(ConfigError, match=r"af\.betaa, study\.timing\.foo"):
        load_config(path)


def test_unknown_af_and_reward_mode_list_options(tmp_path):
    with pytest.raises(ConfigError, match="random.*neural"):
        load_config(write_config(tmp_path, {"af": {"kind": "thompson"}}))
    with pytest.raises(ConfigError, match="neg_regret"):
        load_config(write_config(tmp_path, {"reward_mode": "sparse"}))


def test_family_and_ppo_validation_propagates(tmp_path):
    path = write_config(tmp_path, {"family": {"base": "rhino1",
                                              "translation_range": [-0.9, 0.9]}})
    with pytest.raises(ConfigError, match="family"):
        load_config(path)
    path = write_config(tmp_path, {"ppo": {"batch_size": 7, "n_minibatches": 2}})
    with pytest.raises(ConfigError, match="ppo"):
        load_config(path)


def test_train_section_parsing(tmp_path):
    cfg = load_config(write_config(
        tmp_path, {"train": {"n_iterations": 9, "source_pool": 4, "t_range": [2, 5]},
                   "ppo": {"batch_size": 20, "n_minibatches": 4}}))
    assert cfg.n_iterations == 9
    assert cfg.source_pool == 4
    assert cfg.t_range == (2, 5)
    assert cfg.ppo.batch_size == 20


# ---------------------------------------------------------------------------
# CLI plumbing


def test_dry_run_validates_without_executing(tmp_path, capsys):
    path = write_config(tmp_path, {"train": {"n_iterations": 3}})
    out = tmp_path / "never"
    code = main(["train", "--config", str(path), "--out", str(out), "--dry-run"])
    assert code == 0
    assert "config OK" in capsys.readouterr().out
    assert not out.exists()


def test_config_error_exits_2(tmp_path, capsys):
    path = write_config(tmp_path, {"af": {"kind": "thompson"}})
    code = main(["evaluate", "--config", str(path), "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "config error" in err and "taf-me" in err


def test_evaluate_writes_suite_and_fingerprint(tmp_path):
    path = write_config(tmp_path, {"af": {"kind": "ei"}})
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", str(path), "--out", str(out)]) == 0
    with open(out / "suite.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3  # one per step
    assert set(rows[0]) == {"step", "median", "p30", "p70"}
    import json

    meta = json.loads((out / "fingerprint.json").read_text())
    assert meta["seed"] == 1
    assert meta["version"]
    assert len(meta["config_sha256"]) == 64


def test_nonempty_out_dir_requires_overwrite(tmp_path, capsys):
    path = write_config(tmp_path, {"af": {"kind": "random"}})
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", str(path), "--out", str(out)]) == 0
    code = main(["evaluate", "--config", str(path), "--out", str(out)])
    assert code == 3
    assert "not empty" in capsys.readouterr().err
    assert main(["evaluate", "--config", str(path), "--out", str(out),
                 "--overwrite"]) == 0


def test_missing_out_dir_is_config_error(tmp_path, capsys):
    path = write_config(tmp_path, {"af": {"kind": "random"}})
    assert main(["evaluate", "--config", str(path)]) == 2
    assert "--out" in capsys.readouterr().err


def test_train_writes_checkpoints_and_identical_logs(tmp_path):
    path = write_config(
        tmp_path,
        {"budget": 2, "train": {"n_iterations": 2},
         "ppo": {"batch_size": 20, "n_minibatches": 4, "epochs": 1}})
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(path), "--out", str(out)]) == 0
        assert (out / "checkpoint_0001.ckpt").exists()
        assert (out / "checkpoint_0002.ckpt").exists()
        assert (out / "fingerprint.json").exists()
        with open(out / "training_log.csv") as fh:
            outs.append(list(csv.DictReader(fh)))
    for ra, rb in zip(*outs):
        for key in ("iteration", "mean_reward", "entropy", "value_loss"):
            assert ra[key] == rb[key]  # wall_s is the only varying column


def test_train_requires_iteration_count(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "t")]) == 2
    assert "n_iterations" in capsys.readouterr().err


def test_neural_requires_checkpoint(tmp_path, capsys):
    path = write_config(tmp_path, {"af": {"kind": "neural"}})
    assert main(["evaluate", "--config", str(path), "--out", str(tmp_path / "n")]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_dimension_agnostic_checkpoint_evaluates_across_dims(tmp_path):
    ckpt = fake_checkpoint(tmp_path / "p.ckpt", include_x=False)
    for base, ls in (("branin", [0.2, 0.2]), ("hartmann3", [0.3, 0.3, 0.3])):
        path = write_config(
            tmp_path, {"family": {"base": base},
                       "gp": {"kernel": "matern52", "lengthscales": ls},
                       "af": {"kind": "neural"}, "eval": {"n_runs": 2},
                       "budget": 2},
            name=f"{base}.yaml")
        out = tmp_path / f"eval-{base}"
        code = main(["evaluate", "--config", str(path), "--out", str(out),
                     "--checkpoint", str(ckpt)])
        assert code == 0
        assert (out / "suite.csv").exists()


def test_x_feature_checkpoint_rejects_other_dimension(tmp_path, capsys):
    ckpt = fake_checkpoint(tmp_path / "x.ckpt", include_x=True, dim=1)
    path = write_config(
        tmp_path, {"family": {"base": "branin"},
                   "gp": {"kernel": "matern52", "lengthscales": [0.2, 0.2]},
                   "af": {"kind": "neural"}, "budget": 2})
    code = main(["evaluate", "--config", str(path), "--out", str(tmp_path / "x"),
                 "--checkpoint", str(ckpt)])
    assert code == 3
    assert "x-feature" in capsys.readouterr().err


def test_study_timing_single_af(tmp_path):
    path = write_config(
        tmp_path, {"study": {"timing": {"afs": [{"kind": "ei"}], "n_episodes": 2}},
                   "budget": 2})
    out = tmp_path / "timing"
    assert main(["study", "timing", "--config", str(path), "--out", str(out)]) == 0
    lines = (out / "timing.csv").read_text().strip().splitlines()
    assert lines[0] == "af,params,mean_s,std_s"
    assert len(lines) == 2


def test_study_generalization_grid(tmp_path):
    path = write_config(
        tmp_path, {"af": {"kind": "ei"},
                   "study": {"generalization": {
                       "t_lows": [0.0, 0.1], "s_lows": [1.0, 1.1],
                       "t_width": 0.05, "s_width": 0.05,
                       "threshold": 1e9, "n_runs": 2}},
                   "budget": 2})
    out = tmp_path / "gen"
    assert main(["study", "generalization", "--config", str(path),
                 "--out", str(out)]) == 0
    lines = (out / "generalization.csv").read_text().strip().splitlines()
    assert lines[0] == "t_low,s_low,steps"
    assert len(lines) == 5  # 2x2 grid


def test_study_source_count_names_missing_m(tmp_path, capsys):
    ckpt = fake_checkpoint(tmp_path / "m1.ckpt")
    path = write_config(
        tmp_path, {"study": {"source_count": {
            "m_values": [1, 50], "checkpoints": {1: str(ckpt)},
            "threshold": 1e9, "n_runs": 2}}})
    code = main(["study", "source-count", "--config", str(path),
                 "--out", str(tmp_path / "sc")])
    assert code == 2
    assert "M = 50" in capsys.readouterr().err


def test_study_source_count_names_absent_files(tmp_path, capsys):
    path = write_config(
        tmp_path, {"study": {"source_count": {
            "m_values": [1], "checkpoints": {1: str(tmp_path / "nope.ckpt")},
            "threshold": 1e9}}})
    code = main(["study", "source-count", "--config", str(path),
                 "--out", str(tmp_path / "sc")])
    assert code == 2
    assert "nope.ckpt" in capsys.readouterr().err


def test_study_source_count_runs(tmp_path):
    ckpts = {m: str(fake_checkpoint(tmp_path / f"m{m}.ckpt")) for m in (1, 2)}
    path = write_config(
        tmp_path, {"study": {"source_count": {
            "m_values": [1, 2], "checkpoints": ckpts,
            "threshold": 1e9, "n_runs": 2}}, "budget": 2})
    out = tmp_path / "sc"
    assert main(["study", "source-count", "--config", str(path),
                 "--out", str(out)]) == 0
    lines = (out / "source_count.csv").read_text().strip().splitlines()
    assert lines[0] == "m,median_steps"
    assert lines[1] == "1,1.0"
    assert lines[2] == "2,1.0"
