import csv
import io

import numpy as np
import pytest

from lrtabl.cli import main, parse_ranks
from lrtabl.layers import flop_count
from lrtabl.model import structure_spec

TABLE_C = [1658, 2106, 2554, 2879, 3204, 3504, 3804, 4104, 4404, 4704, 4984, 5264, 5544, 5824, 6104, 6384, 6664,
           6944, 7224, 7504, 7784, 8064, 8344]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.toml"
    path.write_text("batch_size = 64\n")
    return path


def test_parse_ranks():
    assert parse_ranks("3") == [3]
    assert parse_ranks("1..4") == [1, 2, 3, 4]
    assert parse_ranks("1,2,5") == [1, 2, 5]


def test_count_table_c(capsys):
    code, out, _ = run(capsys, "count", "C", "lowrank", "1..23")
    assert code == 0
    got = rows(out)
    assert [int(r["total_params"]) for r in got] == TABLE_C
    assert [int(r["K"]) for r in got] == list(range(1, 24))
    for r in got:
        assert sum(int(r[f"layer_{i}"]) for i in (1, 2, 3)) == int(r["total_params"])


def test_count_flags_and_positionals(capsys):
    assert rows(run(capsys, "count", "A", "full")[1])[0]["total_params"] == "234"
    assert rows(run(capsys, "count", "--structure", "B", "--rank", "19")[1])[0]["total_params"] == "4144"


def test_count_rejects_bad_rank(capsys):
    code, _, err = run(capsys, "count", "A", "lowrank", "0")
    assert code == 2
    assert err.startswith("lrtabl: error[config_invalid]:")
    assert run(capsys, "count", "--structure", "A", "--variant", "full", "--rank", "2")[0] == 2


def test_train_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--structure", "A", "--synthetic", "--epochs", 10, "--out", out)
    assert code == 0
    history = (out / "history.csv").read_text().splitlines()
    assert len(history) == 11
    assert {p.name for p in out.iterdir()} == {"checkpoint.lrtabl", "history.csv", "metrics.csv", "config.toml"}
    assert not list(out.glob("*.tmp*"))


def test_missing_data_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LRTABL_DATA", raising=False)
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == 2
    assert err.startswith("lrtabl: error[data_not_found]:")
    assert len(err.strip().splitlines()) == 1


def test_same_seed_byte_identical_metrics(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", "--synthetic", "--epochs", 3, "--seed", 4, "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()


def test_config_file_reproduces_run(tmp_path, capsys):
    run(capsys, "train", "--synthetic", "--epochs", 3, "--seed", 2, "--rank", 2, "--out", tmp_path / "a")
    cfg = tmp_path / "a" / "config.toml"
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "b")[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('structure = "B"\nepochs = 1\n')
    run(capsys, "train", "--config", cfg, "--structure", "A", "--synthetic", "--out", tmp_path / "o")
    text = (tmp_path / "o" / "config.toml").read_text()
    assert 'structure = "A"' in text and "epochs = 1" in text


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("momentum = 0.9\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--synthetic", "--out", tmp_path / "o")
    assert code == 2 and "config_invalid" in err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert main(["train", "--structure", "A", "--synthetic", "--epochs", "5", "--out", str(out)]) == 0
    return out


def test_eval_reproduces_recorded_val_metrics(trained, capsys):
    recorded = {r["split"]: r for r in rows((trained / "metrics.csv").read_text())}
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "checkpoint.lrtabl", "--synthetic", "--split", "val")
    assert code == 0
    (got,) = rows(out)
    for key in ("accuracy", "precision", "recall", "f1"):
        assert abs(float(got[key]) - float(recorded["val"][key])) < 1e-6


def test_eval_confusion_sums_to_test_count(trained, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained / "checkpoint.lrtabl", "--synthetic")
    assert code == 0
    (got,) = rows(out)
    cm = sum(int(got[f"cm_{i}_{j}"]) for i in range(3) for j in range(3))
    assert cm == int(got["n"]) > 0


def test_eval_spec_mismatch_exit_3(trained, capsys):
    ckpt = trained / "checkpoint.lrtabl"
    code, _, err = run(capsys, "eval", "--checkpoint", ckpt, "--synthetic", "--structure", "C")
    assert code == 3 and "spec_mismatch" in err
    assert run(capsys, "eval", "--checkpoint", ckpt, "--synthetic", "--rank", 2)[0] == 3


def test_eval_data_shape_mismatch_exit_3(trained, tmp_path, capsys):
    layout = tmp_path / "layout.toml"
    layout.write_text("feature_row_range = [0, 20]\nlabel_rows = [20]\nhorizon_index = 0\n")
    data = tmp_path / "days"
    data.mkdir()
    rng = np.random.default_rng(0)
    for d in range(1, 11):
        m = rng.normal(size=(21, 14))
        m[20] = rng.integers(1, 4, size=14)
        np.savetxt(data / f"day_{d}.txt", m)
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "checkpoint.lrtabl", "--data", data, "--layout", layout)
    assert code == 3 and "spec_mismatch" in err


def test_corrupted_checkpoint_exit_3(trained, tmp_path, capsys):
    bad = tmp_path / "bad.lrtabl"
    raw = bytearray((trained / "checkpoint.lrtabl").read_bytes())
    raw[len(raw) // 3] ^= 0x01
    bad.write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", "--checkpoint", bad, "--synthetic")
    assert code == 3 and "checkpoint_invalid" in err


def fi_directory(path, n_events=16, seed=0):
    rng = np.random.default_rng(seed)
    path.mkdir()
    for d in range(1, 11):
        m = rng.normal(size=(149, n_events))
        m[144:] = rng.integers(1, 4, size=(5, n_events))
        np.savetxt(path / f"Train_Dst_day{d}.txt", m)
    return path


def test_fi_layout_directory_and_env_fallback(tmp_path, capsys, monkeypatch):
    data = fi_directory(tmp_path / "fi")
    code, _, _ = run(capsys, "train", "--data", data, "--epochs", 2, "--out", tmp_path / "a")
    assert code == 0
    monkeypatch.setenv("LRTABL_DATA", str(data))
    code, _, _ = run(capsys, "train", "--epochs", 2, "--out", tmp_path / "b")
    assert code == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    (test_row,) = [r for r in rows((tmp_path / "a" / "metrics.csv").read_text()) if r["split"] == "test"]
    assert int(test_row["n"]) == 3 * (16 - 9)


def test_invalid_labels_exit_2(tmp_path, capsys):
    data = fi_directory(tmp_path / "fi")
    m = np.loadtxt(data / "Train_Dst_day3.txt")
    m[147, 5] = 7
    np.savetxt(data / "Train_Dst_day3.txt", m)
    code, _, err = run(capsys, "train", "--data", data, "--epochs", 1, "--out", tmp_path / "o")
    assert code == 2 and "data_invalid" in err


def test_divergence_exit_4(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('optimizer = "sgd"\nlearning_rate = 1e30\nbatch_size = 16\n')
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--synthetic", "--epochs", 2, "--config", cfg, "--out", tmp_path / "o")
    assert code == 4 and "divergence" in err


def test_sweep_rows_and_param_consistency(tmp_path, capsys, fast_config):
    code, out, _ = run(capsys, "sweep", "--structure", "A", "--rank-range", "1..3", "--synthetic", "--epochs", 15,
                       "--config", fast_config, "--out", tmp_path / "s")
    assert code == 0
    got = rows(out)
    assert len(got) == 4
    assert got[0]["model"] == "TABL A" and got[0]["K"] == ""
    assert [r["K"] for r in got[1:]] == ["1", "2", "3"]
    count = rows(run(capsys, "count", "A", "lowrank", "1..3")[1])
    assert [r["params"] for r in got[1:]] == [r["total_params"] for r in count]
    assert got[0]["params"] == "234"
    assert (tmp_path / "s" / "sweep.csv").read_text() == out

    # F1 should rise with K on strong-signal data, allowing one inversion
    f1 = [float(r["f1"]) for r in got[1:]]
    inversions = sum(b < a for a, b in zip(f1, f1[1:]))
    assert inversions <= 1
    assert f1[-1] >= f1[0]


def test_bench_structure_a(capsys):
    code, out, _ = run(capsys, "bench", "--structure", "A", "--rank", 1, "--iterations", 200)
    assert code == 0
    got = {r["row"] + "/" + r["variant"]: r for r in rows(out)}
    full = got["layer_1/full"]
    assert (full["flops_xbar"], full["flops_e"], full["flops_y"]) == ("1200", "300", "30")
    low = got["layer_1/lowrank"]
    expected = flop_count(structure_spec("A", "lowrank", 1).layers[0])
    assert (int(low["flops_xbar"]), int(low["flops_e"]), int(low["flops_y"])) == (
        expected["xbar"], expected["e"], expected["y"])
    ratio = [r for r in rows(out) if r["row"] == "ratio"][0]
    assert float(ratio["flops_total"]) < 1
    for r in rows(out):
        if r["row"] == "total":
            assert float(r["median_us"]) > 0
            assert float(r["p95_us"]) >= float(r["median_us"])


def test_bench_rejects_few_iterations(capsys):
    assert run(capsys, "bench", "--iterations", 50)[0] == 2
