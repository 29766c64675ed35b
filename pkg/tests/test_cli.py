import csv
import json

import pytest

from canonkit import cli, gradcheck
from canonkit.data import load_idx

TINY = {
    "setup": "equioptadapt",
    "epochs": 1,
    "batch_size": 16,
    "predictor": {"widths": [4, 4]},
    "canonicalizer": {"widths": [4, 4]},
    "canon": {"embed_dim": 8},
    "dataset": {"num_classes": 4, "n_train_per_class": 8, "n_test_per_class": 4},
}


def read_csv(path):
    lines = path.read_text(encoding="utf-8").split("\n")
    comments = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.reader(ln for ln in lines if ln and not ln.startswith("#")))
    return comments, rows


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    assert cli.main(["gen-data", "--data-dir", str(d), "--n-train-per-class", "8", "--n-test-per-class", "4"]) == 0
    return d


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_gen_data_files_and_determinism(data_dir, tmp_path):
    names = sorted(p.name for p in data_dir.iterdir())
    assert names == sorted([*(f for pair in cli.IDX_FILES.values() for f in pair), cli.META_FILE])
    meta = json.loads((data_dir / cli.META_FILE).read_text())
    assert meta["stabilizer"] == "trivial" and meta["num_classes"] == 4
    ds = load_idx(*(data_dir / f for f in cli.IDX_FILES["train"]))
    assert ds.images.shape == (32, 1, 16, 16)
    again = tmp_path / "again"
    cli.main(["gen-data", "--out-dir", str(again), "--n-train-per-class", "8", "--n-test-per-class", "4"])
    for f in names:
        assert (data_dir / f).read_bytes() == (again / f).read_bytes()


def test_gen_data_uses_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path / "env"))
    assert cli.main(["gen-data", "--n-train-per-class", "2", "--n-test-per-class", "1"]) == 0
    assert (tmp_path / "env" / cli.META_FILE).is_file()


def test_gen_data_without_dir(monkeypatch):
    monkeypatch.delenv(cli.DATA_ENV, raising=False)
    assert cli.main(["gen-data"]) == 2


def test_train_and_eval(data_dir, config, tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["train", "--config", str(config), "--data-dir", str(data_dir),
                   "--out-dir", str(out), "--set", "lr=0.002", "--set", "canon.tau=0.5"])
    assert rc == 0
    comments, rows = read_csv(out / "train_log.csv")
    assert comments[0] == "# setup=equioptadapt group=c4 seed=0"
    assert "# override lr=0.002" in comments and "# override canon.tau=0.5" in comments
    assert tuple(rows[0]) == cli.LOG_COLUMNS and len(rows) == 3
    assert b"\r" not in (out / "train_log.csv").read_bytes()

    ev = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(out / cli.CHECKPOINT_FILE),
                     "--data-dir", str(data_dir), "--out-dir", str(ev)]) == 0
    _, rows = read_csv(ev / "metrics.csv")
    rec = dict(zip(rows[0], rows[1]))
    assert tuple(rows[0]) == cli.METRIC_COLUMNS
    assert rec["acc"] == rec["g_avg_acc"]
    assert 0.0 <= float(rec["identity_metric"]) <= 1.0
    assert "g_avg_acc" in capsys.readouterr().out


def test_train_log_is_deterministic(data_dir, config, tmp_path):
    logs = []
    for name in ("a", "b"):
        cli.main(["train", "--config", str(config), "--data-dir", str(data_dir), "--out-dir", str(tmp_path / name)])
        _, rows = read_csv(tmp_path / name / "train_log.csv")
        wall = rows[0].index("wall_seconds")
        logs.append([r[:wall] + r[wall + 1:] for r in rows])
    assert logs[0] == logs[1]
    assert (tmp_path / "a" / cli.CHECKPOINT_FILE).read_bytes() == (tmp_path / "b" / cli.CHECKPOINT_FILE).read_bytes()


def test_train_errors(config, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(cli.DATA_ENV, raising=False)
    missing = tmp_path / "nowhere"
    assert cli.main(["train", "--config", str(config), "--data-dir", str(missing)]) == 2
    assert "dataset not found" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(config), "--set", "bogus=1"]) == 2
    assert cli.main(["train", "--config", str(config), "--set", "setup=ssl"]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "none.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["train", "--config", str(bad)]) == 2


def test_apply_override_resolution():
    raw = {}
    assert cli.apply_override(raw, "tau=0.3") == "canon.tau"
    assert cli.apply_override(raw, "epochs=3") == "epochs"
    assert cli.apply_override(raw, "n_train_per_class=5") == "dataset.n_train_per_class"
    assert cli.apply_override(raw, "predictor.widths=[2,3]") == "predictor.widths"
    assert raw == {"canon": {"tau": 0.3}, "epochs": 3, "dataset": {"n_train_per_class": 5},
                   "predictor": {"widths": [2, 3]}}


def test_eval_rejects_bad_checkpoint(tmp_path, data_dir):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage bytes")
    assert cli.main(["eval", "--checkpoint", str(bad), "--data-dir", str(data_dir)]) == 3
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def test_bench(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = cli.main(["bench", "--opt-widths", "4,8,8", "--gcnn-widths", "4,8", "--embed-dim", "16",
                   "--batch-size", "8", "--repeats", "3", "--out-dir", str(out)])
    assert rc == 0
    comments, rows = read_csv(out / "bench.csv")
    assert rows[0] == ["repeat", "opt_cnn_seconds", "direct_gcnn_seconds", "ratio"]
    assert len(rows) == 1 + 3 + 1 and rows[-1][0] == "median"
    assert all(float(v) > 0 for r in rows[1:] for v in r[1:])
    stdout = capsys.readouterr().out
    assert float(stdout.strip().splitlines()[-1].split()[1]) == float(rows[-1][3])


def test_bench_budget_mismatch(tmp_path, capsys):
    rc = cli.main(["bench", "--opt-widths", "16,32,32", "--gcnn-widths", "2,2", "--repeats", "1",
                   "--out-dir", str(tmp_path)])
    assert rc == 2 and "parameter counts" in capsys.readouterr().err
    assert cli.main(["bench", "--opt-widths", "a,b", "--out-dir", str(tmp_path)]) == 2


def test_threads_validation():
    assert cli.main(["gradcheck", "--threads", "0", "--only", "relu"]) == 2


def test_gradcheck_lists_every_entry_once(capsys):
    assert cli.main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    names = [ln.split()[0] for ln in lines]
    assert sorted(names) == sorted(gradcheck.REGISTRY) and len(names) == len(set(names))
    assert all(ln.split()[-1] == "ok" for ln in lines)


def test_gradcheck_reports_broken_gradient(monkeypatch, capsys):
    from canonkit import tensor as T

    def broken(rng):
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))

        def fn():
            return T.sum(T.mul(T.mul(x, x), T.Tensor(w)))

        def wrong():
            return [2.5 * x.data * w]

        return fn, [x], wrong

    monkeypatch.setitem(gradcheck.REGISTRY, "broken_square", broken)
    assert cli.main(["gradcheck", "--only", "relu", "broken_square"]) == 1
    captured = capsys.readouterr()
    assert "broken_square" in captured.err and "relu" not in captured.err
    assert cli.main(["gradcheck", "--only", "no_such_op"]) == 2
