import json

import numpy as np
import pytest
import yaml

from mcsforecast import cli, evalsim, labels, training


def _small(root, **data):
    cfg = cli.RunConfig()
    cfg.seed = 3
    cfg.data = cli.DataConfig(n_traces=1, trace_duration_s=60.0, sample_stride=64, **data)
    cfg.train = training.TrainConfig(epochs=2)
    cfg.eval.bench_iters = 100
    cfg.paths.root = str(root)
    return cfg


def _write(cfg, path):
    path.write_text(cfg.dump_yaml())
    return path


def test_config_round_trip(tmp_path):
    cfg = cli.RunConfig()
    cfg.data.allowed_pcis = [441, 387]
    again = cli.RunConfig.load(_write(cfg, tmp_path / "c.yaml"))
    assert again == cfg
    assert again.dump_yaml() == cfg.dump_yaml()


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        cli.RunConfig.from_dict({"train": {"learning_rate": 1}})
    with pytest.raises(ValueError):
        cli.RunConfig.from_dict({"optimizer": {}})
    with pytest.raises(ValueError):
        cli.RunConfig.from_dict({"data": {"split": [0.7, 0.2, 0.2]}})
    with pytest.raises(ValueError):
        cli.RunConfig.from_dict({"horizon": {"window_ms": 20}})


def test_fingerprint_tracks_settings_not_paths():
    a, b = cli.RunConfig(), cli.RunConfig()
    b.paths.root = "elsewhere"
    assert a.fingerprint() == b.fingerprint()
    b.train.lam = 1.0
    assert a.fingerprint() != b.fingerprint()


def test_horizon_slot_arithmetic():
    h = cli.HorizonConfig()
    assert h.seq_len == 40
    assert (h.spec().delay_dl_slots, h.spec().gop_dl_slots) == (160, 800)


def test_usage_errors_exit_1(capsys):
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["train", "--seed", "x"]) == cli.EXIT_USAGE


def test_missing_config_file_is_error(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "nope.yaml")]) != 0


def test_unwritable_output_is_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["generate", "--out", str(blocker / "sub")]) != 0


def test_evaluate_without_checkpoint_names_train(tmp_path, capsys):
    code = cli.main(["evaluate", "--out", str(tmp_path)])
    assert code == cli.EXIT_MISSING
    assert "cmd_preprocess" in capsys.readouterr().err
    cfg = _small(tmp_path)
    cfg_path = _write(cfg, tmp_path / "c.yaml")
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert cli.main(["preprocess", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", "--config", str(cfg_path)]) == cli.EXIT_MISSING
    assert "cmd_train" in capsys.readouterr().err


def test_numeric_failure_exit_3(tmp_path, monkeypatch):
    cfg_path = _write(_small(tmp_path), tmp_path / "c.yaml")
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    assert cli.main(["preprocess", "--config", str(cfg_path)]) == 0

    def boom(*a, **k):
        raise training.DivergenceError("validation loss became nan")
    monkeypatch.setattr(training, "train", boom)
    assert cli.main(["train", "--config", str(cfg_path)]) == cli.EXIT_NUMERIC


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _small(root)
    cfg_path = _write(cfg, root / "c.yaml")
    for cmd in cli.COMMANDS:
        assert cli.main([cmd, "--config", str(cfg_path)]) == 0, cmd
    return cfg, cfg_path


def test_generate_is_deterministic(small_run, tmp_path):
    cfg, _ = small_run
    other = _small(tmp_path)
    cli.cmd_generate(other)
    a = cli._trace_path(cfg, 0).read_bytes()
    assert a == cli._trace_path(other, 0).read_bytes()
    assert a.startswith(f"# config_fingerprint={cfg.fingerprint()}".encode())
    assert cfg.trace_seeds() == other.trace_seeds()
    other.seed = 4
    assert other.trace_seeds() != cfg.trace_seeds()


def test_preprocess_split(small_run):
    cfg, _ = small_run
    info = json.loads((cfg.paths.dir("data") / "split.json").read_text())
    assert sum(info["fractions"]) == pytest.approx(1.0)
    tr = info["traces"][0]
    assert tr["train_rows"][1] == tr["val_rows"][0] and tr["val_rows"][1] == tr["test_rows"][0]
    assert tr["test_rows"][1] == tr["rows"]
    guard = info["guard_slots"]
    assert guard == 960
    for name, (lo, hi) in (("val", tr["val_rows"]), ("test", tr["test_rows"])):
        ss = labels.load_samples(cfg.paths.dir("data") / f"{name}.bin")
        assert ss.meta["config_fingerprint"] == cfg.fingerprint()
        assert len(ss) > 0
        assert ss.anchor.min() >= lo + guard
        assert ss.anchor.max() + guard <= hi - 1
    train = labels.load_samples(cfg.paths.dir("data") / "train.bin")
    assert train.anchor.max() + guard <= tr["train_rows"][1] - 1


def test_stages_are_idempotent(small_run):
    cfg, cfg_path = small_run
    d = cfg.paths.dir("data")
    names = ["train.bin", "val.bin", "test.bin", "normalizer.txt", "split.json", "slots_000.csv"]
    before = {n: (d / n).read_bytes() for n in names}
    ckpt = cli._ckpt_path(cfg, "proposed").read_bytes()
    report = (cfg.paths.dir("reports") / "eval_report.csv").read_bytes()
    for cmd in ("preprocess", "train", "evaluate"):
        assert cli.main([cmd, "--config", str(cfg_path)]) == 0
    assert before == {n: (d / n).read_bytes() for n in names}
    assert ckpt == cli._ckpt_path(cfg, "proposed").read_bytes()
    assert report == (cfg.paths.dir("reports") / "eval_report.csv").read_bytes()


def test_report_outputs(small_run):
    cfg, _ = small_run
    rep_dir = cfg.paths.dir("reports")
    rep = evalsim.EvalReport.read_csv(rep_dir / "eval_report.csv")
    assert list(rep.rows) == list(evalsim.POLICY_ORDER)
    summary = (rep_dir / "summary.txt").read_text()
    for name in ("Proposed", "LRA", "MAW", "Deterministic", "MSE-T"):
        assert sum(line.startswith(name) for line in summary.splitlines()) == 1
    for f in ("loss_curve.png", "metrics.png", "summary.csv", "gop_decisions.csv", "bench.json"):
        assert (rep_dir / f).stat().st_size > 0
    for r in rep.rows.values():
        assert r.mae <= r.rmse + 1e-9 and abs(r.avg_bias) <= r.mae + 1e-9


def test_bench_prints_pct_of_tti(small_run, capsys):
    _, cfg_path = small_run
    assert cli.main(["bench", "--config", str(cfg_path)]) == 0
    assert "pct_of_tti" in capsys.readouterr().out


def test_every_artifact_carries_fingerprint(small_run):
    cfg, _ = small_run
    fp = cfg.fingerprint()
    text_files = [cli._trace_path(cfg, 0), cli._slots_path(cfg, 0), cfg.paths.dir("data") / "normalizer.txt",
                  cli._train_log_path(cfg, "proposed"), cfg.paths.dir("reports") / "eval_report.csv",
                  cfg.paths.dir("reports") / "gop_decisions.csv", cfg.paths.dir("data") / "split.json",
                  cfg.paths.dir("reports") / "bench.json", cfg.paths.dir("reports") / "summary.txt"]
    for f in text_files:
        assert fp in f.read_text()[:4000], f
    from mcsforecast.model import load_checkpoint
    assert load_checkpoint(cli._ckpt_path(cfg, "mse"))[1]["config_fingerprint"] == fp


def test_seed_and_out_overrides(tmp_path):
    cfg_path = _write(_small(tmp_path / "a"), tmp_path / "c.yaml")
    cfg = cli.resolve_config(cfg_path, seed=11, out=tmp_path / "b")
    assert cfg.seed == 11 and cfg.paths.root == str(tmp_path / "b")
    assert cfg.data.trace_duration_s == 60.0
