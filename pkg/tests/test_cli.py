import csv
import json
from pathlib import Path

import numpy as np
import pytest

from activeshift import cli, shift
from activeshift.data import CifarRecords, DatasetSpec, load_cifar, write_cifar_file
from activeshift.models import NetworkConfig, build
from activeshift.nn import checkpoint
from activeshift.train import RunConfig, train

GOLDEN = Path(__file__).parent / "golden" / "metrics_schema.json"
TINY = ["--depth", "8", "--width", "4", "--batch-size", "8", "--eval-every", "0", "--log-every", "0"]
TYPES = {"str": str, "int": int, "float": (float, int), "bool": bool, "list": list, "null": type(None)}


def run(*argv):
    return cli.main([str(a) for a in argv])


def train_tiny(tmp_path, root, *extra, name="run"):
    metrics = tmp_path / f"{name}.json"
    code = run("train", "--data-root", root, *TINY, "--metrics", metrics,
               "--checkpoint-dir", tmp_path / name, *extra)
    return code, metrics, tmp_path / name


@pytest.mark.parametrize("sub", [None, "train", "eval", "gradcheck", "oracle", "bench", "export-shifts"])
def test_help(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        run(*([sub] if sub else []), "--help")
    assert exc.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_exit_codes_are_stable():
    assert (cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_CHECKPOINT, cli.EXIT_SUITE) == (0, 1, 2, 3, 4)


def test_oracle_passes(capsys):
    assert run("oracle") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_gradcheck_passes(capsys):
    assert run("gradcheck") == 0
    lines = capsys.readouterr().out.splitlines()
    asl = next(l for l in lines if l.startswith("PASS asl-gradients"))
    assert float(asl.split("max error ")[1].split()[0]) < 1e-4


def test_gradcheck_catches_sign_error(monkeypatch, capsys):
    real = shift.asl_backward

    def flipped(grad_out, cache, need_theta=True):
        gx, gt = real(grad_out, cache, need_theta)
        if gt is not None:
            gt = gt.copy()
            gt[:, 0] *= -1
        return gx, gt

    monkeypatch.setattr(shift, "asl_backward", flipped)
    assert run("gradcheck", "--seed", "3") == 4
    out = capsys.readouterr().out
    assert "FAIL asl-gradients" in out and "seed=3 case=" in out


def test_train_zero_iters(tmp_path, fake_cifar):
    code, metrics, _ = train_tiny(tmp_path, fake_cifar, "--iters", "0")
    assert code == 0
    m = json.loads(metrics.read_text())
    assert m["iterations"] == 0 and m["final_loss"] is None and m["test_curve"] == []
    assert 0 <= m["test_top1"] <= m["test_top5"] <= 1


def test_metrics_schema_is_golden(tmp_path, fake_cifar):
    code, metrics, _ = train_tiny(tmp_path, fake_cifar, "--iters", "2")
    assert code == 0
    m = json.loads(metrics.read_text())
    golden = json.loads(GOLDEN.read_text())
    assert list(m) == list(golden)
    for key, kinds in golden.items():
        allowed = tuple(t for k in kinds.split("|") for t in np.atleast_1d(TYPES[k]))
        assert isinstance(m[key], allowed), key


def test_invalid_config(tmp_path, fake_cifar):
    assert train_tiny(tmp_path, fake_cifar, "--iters", "0", "--depth", "7")[0] == 1
    assert train_tiny(tmp_path, fake_cifar, "--iters", "-1")[0] == 1
    assert train_tiny(tmp_path, fake_cifar, "--milestones", "a,b")[0] == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("depth = 20\nshape = round\n")
    assert run("train", "--config", bad, "--data-root", fake_cifar, "--iters", "0") == 1


def test_unreadable_dataset(tmp_path, fake_cifar):
    assert train_tiny(tmp_path, tmp_path / "nowhere", "--iters", "0")[0] == 2
    broken = tmp_path / "broken"
    sub = broken / "cifar-10-batches-bin"
    sub.mkdir(parents=True)
    for f in (fake_cifar / "cifar-10-batches-bin").iterdir():
        (sub / f.name).write_bytes(f.read_bytes()[:-7])
    assert train_tiny(tmp_path, broken, "--iters", "0")[0] == 2


def test_resume_replays_bitwise(tmp_path, fake_cifar):
    data = load_cifar(DatasetSpec(path=str(fake_cifar)))
    cfg = NetworkConfig(depth=8, width=4)
    run_cfg = RunConfig(iterations=6, batch_size=8, milestones=(3,), checkpoint_dir=str(tmp_path / "a"),
                        checkpoint_every=3, eval_every=0, log_every=0)
    full = train(build(cfg, seed=1), data, data, run_cfg)
    resumed_cfg = RunConfig(**{**run_cfg.__dict__, "checkpoint_dir": str(tmp_path / "b")})
    resumed = train(build(cfg, seed=2), data, data, resumed_cfg, resume=tmp_path / "a" / "ckpt_000003.bin")
    assert resumed["losses"] == full["losses"][3:]
    a, _ = checkpoint.read_checkpoint(tmp_path / "a" / "final.bin")
    b, _ = checkpoint.read_checkpoint(tmp_path / "b" / "final.bin")
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_cli_resume(tmp_path, fake_cifar):
    code, m_full, ck = train_tiny(tmp_path, fake_cifar, "--iters", "4", "--checkpoint-every", "2", name="full")
    assert code == 0
    code, m_res, _ = train_tiny(tmp_path, fake_cifar, "--iters", "4", "--resume", ck / "ckpt_000002.bin", name="res")
    assert code == 0
    assert json.loads(m_full.read_text())["final_loss"] == json.loads(m_res.read_text())["final_loss"]


def test_resume_mismatch(tmp_path, fake_cifar):
    _, _, ck = train_tiny(tmp_path, fake_cifar, "--iters", "2", "--checkpoint-every", "2")
    code, _, _ = train_tiny(tmp_path, fake_cifar, "--iters", "4", "--width", "6", "--resume", ck / "ckpt_000002.bin",
                            name="other")
    assert code == 3


def export(ckpt, tmp_path):
    out = tmp_path / "shifts.csv"
    assert run("export-shifts", "--checkpoint", ckpt, "--output", out) == 0
    return list(csv.DictReader(out.open()))


def test_grouped_shift_flags(tmp_path, fake_cifar):
    code, metrics, ck = train_tiny(tmp_path, fake_cifar, "--iters", "3", "--width", "16",
                                   "--init", "grouped", "--freeze-shift")
    assert code == 0
    m = json.loads(metrics.read_text())
    assert m["init_mode"] == "grouped" and m["trainable_shift"] is False
    rows = export(ck / "final.bin", tmp_path)
    first = [r for r in rows if r["layer"] == "stage1.block0.body.asl"]
    assert len(first) == 16
    pairs = [(float(r["alpha"]), float(r["beta"])) for r in first]
    assert pairs[:9] == [(float(i), float(j)) for i in (-1, 0, 1) for j in (-1, 0, 1)]
    assert pairs[9:] == [(0.0, 0.0)] * 7
    for r in rows:
        assert float(r["alpha"]).is_integer() and float(r["beta"]).is_integer()


def test_export_shifts_columns(tmp_path, fake_cifar):
    _, _, ck = train_tiny(tmp_path, fake_cifar, "--iters", "1")
    rows = export(ck / "final.bin", tmp_path)
    assert list(rows[0]) == ["layer", "channel", "alpha", "beta"]
    assert len({r["layer"] for r in rows}) == 3
    assert run("export-shifts", "--checkpoint", tmp_path / "missing.bin") == 3


def test_eval(tmp_path, fake_cifar, capsys):
    _, _, ck = train_tiny(tmp_path, fake_cifar, "--iters", "2")
    capsys.readouterr()
    args = ["eval", "--checkpoint", ck / "final.bin", "--data-root", fake_cifar]
    assert run(*args) == 0
    first = json.loads(capsys.readouterr().out)
    assert run(*args) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert first["examples"] == 100 and first["top5"] >= first["top1"]


def test_eval_mismatch(tmp_path, fake_cifar):
    _, _, ck = train_tiny(tmp_path, fake_cifar, "--iters", "0")
    cfg = tmp_path / "wide.cfg"
    NetworkConfig(depth=8, width=6).save(cfg)
    assert run("eval", "--checkpoint", ck / "final.bin", "--config", cfg, "--data-root", fake_cifar) == 3
    assert run("eval", "--checkpoint", tmp_path / "nope.bin", "--data-root", fake_cifar) == 3
    assert run("eval", "--checkpoint", ck / "final.bin", "--data-root", tmp_path / "nowhere") == 2


def test_untrained_model_is_at_chance(tmp_path, capsys):
    # pure-noise images carry no label information, so any fixed classifier sits near 10%
    rng = np.random.default_rng(0)
    sub = tmp_path / "noise" / "cifar-10-batches-bin"
    sub.mkdir(parents=True)
    for name, n in [(f"data_batch_{i}.bin", 20) for i in range(1, 6)] + [("test_batch.bin", 2000)]:
        labels = np.arange(n) % 10
        write_cifar_file(sub / name, CifarRecords(rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8), labels))
    code, metrics, _ = train_tiny(tmp_path, tmp_path / "noise", "--iters", "0")
    assert code == 0
    assert abs(json.loads(metrics.read_text())["test_top1"] - 0.10) <= 0.02


def test_bench_cli(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert run("bench", "--layers", "relu,asl", "--channels", "4", "--size", "8", "--reps", "3",
               "--format", "csv", "--output", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["name"] for r in rows] == ["relu", "asl"]
    assert run("bench", "--layers", "relu", "--channels", "2", "--size", "4", "--reps", "2", "--format", "json") == 0
    assert json.loads(capsys.readouterr().out)["environment"]["threads"] == 1
    assert run("bench", "--format", "xml", "--reps", "1") == 1
    assert run("bench", "--threads", "2", "--reps", "1") == 1
    assert run("bench", "--layers", "conv7x7", "--reps", "1") == 1
