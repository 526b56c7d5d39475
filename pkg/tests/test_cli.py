import json

import pytest

from pimi.cli import main

SYNTH = """users=40
clusters=2
items_per_cluster=12
period_days=3,20
events_per_user=12
groups_per_cluster=2
seed=5
"""


def run_config(data, **extra):
    values = {
        "data": data, "min_count": 2, "d": 8, "n": 6, "K": 2, "L": 1, "p": 16, "dropout": 0.1, "lr": 0.01,
        "batch_size": 16, "max_iterations": 12, "eval_every": 4, "patience": 3, "topn": "5,10",
        "early_stop_metric": "recall@5", "seed": 1,
    }
    values.update(extra)
    return "".join(f"{k}={v}\n" for k, v in values.items())


@pytest.fixture
def dataset(tmp_path):
    cfg = tmp_path / "synth.cfg"
    cfg.write_text(SYNTH)
    out = tmp_path / "data" / "log.csv"
    assert main(["-q", "synth", "--config", str(cfg), "--out", str(out)]) == 0
    return out


@pytest.fixture
def config_file(tmp_path, dataset):
    path = tmp_path / "run.cfg"
    path.write_text(run_config(dataset))
    return path


def test_synth_writes_log_and_labels(dataset, capsys):
    assert dataset.read_text().startswith("user_id,item_id,timestamp\n")
    labels = dataset.with_suffix(".labels.tsv").read_text().splitlines()
    assert labels[0] == "item_id\tcluster\tgroup" and len(labels) == 25


def test_train_writes_run_directory(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    dump = tmp_path / "users.jsonl"
    assert main(["-q", "train", "--config", str(config_file), "--out", str(out), "--dump-users", str(dump)]) == 0
    stdout = capsys.readouterr().out
    assert "recall@5=" in stdout and "users=" in stdout
    for name in ("config.snapshot", "checkpoint.pimi", "train_log.jsonl", "summary.json", "metrics.txt",
                 "vocab.tsv", "test.csv"):
        assert (out / name).is_file(), name
    records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in records][:3] == [4, 8, 12]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["test"]["recall@5"] == float((out / "metrics.txt").read_text().split("\n")[0].split("=")[1])
    assert len(dump.read_text().splitlines()) == summary["test_users"]


def test_eval_reproduces_training_metrics(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    main(["-q", "train", "--config", str(config_file), "--out", str(out)])
    capsys.readouterr()
    code = main(["-q", "eval", "--checkpoint", str(out / "checkpoint.pimi"), "--data", str(out / "test.csv"),
                 "--config", str(out / "config.snapshot")])
    assert code == 0
    assert capsys.readouterr().out == (out / "metrics.txt").read_text()


def test_snapshot_replay_is_identical(tmp_path, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["-q", "train", "--config", str(config_file), "--out", str(a)])
    main(["-q", "train", "--config", str(a / "config.snapshot"), "--out", str(b)])
    for name in ("summary.json", "metrics.txt", "train_log.jsonl", "checkpoint.pimi"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_and_topn_overrides(tmp_path, config_file):
    out = tmp_path / "run"
    main(["-q", "train", "--config", str(config_file), "--out", str(out), "--seed", "9", "--topn", "5,7"])
    snapshot = (out / "config.snapshot").read_text()
    assert "seed=9\n" in snapshot and "topn=5,7\n" in snapshot


def test_ablate_prints_four_rows(tmp_path, dataset, capsys):
    cfg = tmp_path / "ablate.cfg"
    cfg.write_text(run_config(dataset, max_iterations=4, eval_every=4))
    assert main(["-q", "ablate", "--config", str(cfg), "--out", str(tmp_path / "abl")]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert [r.split("\t")[0] for r in rows] == ["variant", "PIMI", "PIMI-P", "PIMI-I", "PIMI-central_node"]
    assert (tmp_path / "abl" / "ablation.tsv").is_file()
    assert "disable_interactivity=true" in (tmp_path / "abl" / "PIMI-I" / "config.snapshot").read_text()


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path, dataset, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(run_config(dataset) + "learning_rate=3\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
        err = capsys.readouterr()
        assert "learning_rate" in err.err and err.out == ""

    def test_missing_data_is_config_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(run_config(tmp_path / "nope.csv"))
        assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2

    def test_bad_head_count_is_config_error(self, tmp_path, dataset):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(run_config(dataset, heads=3))
        assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, dataset):
        cfg = tmp_path / "hot.cfg"
        cfg.write_text(run_config(dataset, lr="1e300", max_iterations=30))
        assert main(["-q", "train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3

    def test_corrupt_checkpoint_exit_code(self, tmp_path, dataset):
        bad = tmp_path / "bad.pimi"
        bad.write_bytes(b"garbage")
        assert main(["-q", "eval", "--checkpoint", str(bad), "--data", str(dataset)]) == 4

    def test_argument_errors_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2
