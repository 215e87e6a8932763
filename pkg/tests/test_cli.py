import subprocess
import sys

import pytest

from scaa.cli import run
from scaa.synth import OrganSpec, PhantomSpec, write_spec
from scaa.volume_io import read_attention, read_checkpoint, read_csv, read_header, read_volume

SMALL = PhantomSpec(shape=(64, 32, 32), organs=(OrganSpec("ellipsoid", (4.0, 7.0), (100.0, 130.0)),
                                                 OrganSpec("blob", (2.0, 3.0), (200.0, 250.0))), margin=1)


@pytest.fixture(scope="module")
def small_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    write_spec(SMALL, path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_ini):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", "--config", str(small_ini), "--n", "2", "--model", "micro", "--variant", "scaa",
            "--max-steps", "2", "--slices", "4", "--lr", "1e-3", "--checkpoint-every", "1", "--seed", "3",
            "--out", str(out)]
    assert run(argv) == 0
    return out, argv


def test_memest_unet2d_prints_estimate(capsys):
    assert run(["memest", "--arch", "unet2d", "--batch", "4"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# scaa memest --arch=unet2d --batch=4")
    gb = float(text.strip().splitlines()[-1].split()[1])
    assert abs(gb - 2.86) / 2.86 < 0.1


def test_memest_scaa_breakdown_and_note(capsys, tmp_path):
    assert run(["memest", "--arch", "scaa", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "3D encoder (batch 1)" in text and "accounts for the gap" in text
    rows = read_csv(tmp_path / "memest.csv")
    assert rows and (tmp_path / "memest.csv").read_text().startswith("# scaa memest --arch=scaa")


def test_memest_layer_file(tmp_path, capsys):
    path = tmp_path / "net.txt"
    path.write_text("input name=x shape=1,8,8\nconv name=c src=x out=2 k=3 dims=2\n")
    assert run(["memest", "--config", str(path), "--batch", "2"]) == 0
    assert "parameters 20" in capsys.readouterr().out


def test_usage_errors_exit_1(capsys):
    assert run(["memest", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["memest"]) == 1  # neither --arch nor --config
    assert run(["train", "--out", "x", "--slices", "0"]) == 1
    assert run(["infer", "--ckpt", "missing.bin", "--volume", "missing.json", "--out", "x"]) == 1
    assert run(["--help"]) == 0


def test_bad_thread_env_is_usage_error(monkeypatch):
    monkeypatch.setenv("SCAA_THREADS", "zero")
    assert run(["memest", "--arch", "unet2d"]) == 1
    monkeypatch.setenv("SCAA_THREADS", "1")
    assert run(["memest", "--arch", "unet2d"]) == 0


def test_runtime_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{ broken")
    assert run(["eval", "--pred", str(bad), "--gt", str(bad), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_gen_writes_volumes_with_flags(tmp_path, small_ini):
    assert run(["gen", "--config", str(small_ini), "--n", "2", "--seed", "4", "--out", str(tmp_path)]) == 0
    header = read_header(tmp_path / "phantom-4.json")
    assert header["meta"]["command"].startswith("scaa gen --config=")
    assert read_volume(tmp_path / "phantom-5.json").image.shape == (64, 32, 32)
    assert [r["id"] for r in read_csv(tmp_path / "dataset.csv")] == ["phantom-4", "phantom-5"]


def test_train_outputs(trained):
    out, _ = trained
    rows = read_csv(out / "train_log.csv")
    assert [r["step"] for r in rows] == ["0", "1"]
    ck = read_checkpoint(out / "final.bin")
    assert ck.step == 2 and ck.config["model"]["variant"] == "scaa"
    assert ck.meta["command"].startswith("scaa train ")
    assert (out / "ckpt_000001.bin").exists()
    assert (out / "train_log.csv").read_text().startswith("# scaa train ")


def test_train_resume_from_data_dir(tmp_path, small_ini, trained):
    out, _ = trained
    data = tmp_path / "data"
    assert run(["gen", "--config", str(small_ini), "--n", "2", "--seed", "3", "--out", str(data)]) == 0
    a = tmp_path / "a"
    argv = ["train", "--data", str(data), "--model", "micro", "--variant", "scaa", "--max-steps", "2",
            "--slices", "4", "--lr", "1e-3", "--seed", "3"]
    assert run(argv + ["--out", str(a)]) == 0
    # generated files and in-memory phantoms are the same data, so the logs agree
    assert read_csv(a / "train_log.csv") == read_csv(out / "train_log.csv")
    b = tmp_path / "b"
    assert run(argv + ["--resume", str(out / "ckpt_000001.bin"), "--out", str(b)]) == 0
    assert [r["step"] for r in read_csv(b / "train_log.csv")] == ["1"]
    assert read_checkpoint(b / "final.bin").params["head.bias"].tobytes() == \
        read_checkpoint(out / "final.bin").params["head.bias"].tobytes()


def test_infer_eval_and_attention_export(tmp_path, small_ini, trained):
    out, _ = trained
    assert run(["gen", "--config", str(small_ini), "--n", "1", "--seed", "9", "--out", str(tmp_path / "d")]) == 0
    vol = tmp_path / "d" / "phantom-9.json"
    assert run(["infer", "--ckpt", str(out / "final.bin"), "--volume", str(vol), "--batch", "20",
                "--out", str(tmp_path / "i")]) == 0
    pred = read_volume(tmp_path / "i" / "pred.json")
    assert pred.labels.shape == (64, 32, 32) and pred.labels.max() <= 2
    records = read_attention(tmp_path / "i" / "attention.csv")
    assert len(records) == 64 * 6  # micro SCAA has 2+1+2+1 heads
    assert run(["eval", "--pred", str(tmp_path / "i" / "pred.json"), "--gt", str(vol),
                "--out", str(tmp_path / "e")]) == 0
    assert [r["class"] for r in read_csv(tmp_path / "e" / "metrics.csv")] == ["1", "2"]
    assert run(["attn-export", "--ckpt", str(out / "final.bin"), "--config", str(small_ini),
                "--out", str(tmp_path / "x")]) == 0
    loc = read_csv(tmp_path / "x" / "locality.csv")
    assert [r["scale"] for r in loc] == ["2", "3", "4", "5"]


def test_attn_export_rejects_variant_without_attention(tmp_path, small_ini):
    out = tmp_path / "t"
    assert run(["train", "--config", str(small_ini), "--n", "1", "--model", "micro", "--variant", "ca",
                "--max-steps", "1", "--slices", "2", "--out", str(out)]) == 0
    assert run(["attn-export", "--ckpt", str(out / "final.bin"), "--config", str(small_ini),
                "--out", str(tmp_path / "x")]) == 2


def test_gradcheck_micro_exits_0(tmp_path, capsys):
    assert run(["gradcheck", "--model", "micro", "--coords", "1", "--out", str(tmp_path)]) == 0
    assert "max relative error" in capsys.readouterr().out
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert rows and all(r["status"] == "pass" for r in rows)


def test_ablate_small(tmp_path, small_ini):
    argv = ["ablate", "--config", str(small_ini), "--n", "1", "--n-test", "1", "--model", "micro",
            "--max-steps", "3", "--slices", "2", "--out", str(tmp_path)]
    assert run(argv) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert all(r["steps"] == "3" for r in rows)  # --max-steps, not one pass over the data, ends each run
    assert [r["variant"] for r in rows] == ["ca", "cca", "scaa", "scaa-star"]
    by = {r["variant"]: r for r in rows}
    assert by["ca"]["one_hot_fraction"] == ""
    assert float(by["cca"]["one_hot_fraction"]) == 1.0
    assert float(by["scaa"]["entropy_positive_fraction"]) == 1.0
    assert all((tmp_path / v / "final.bin").exists() for v in by)


def test_outputs_are_byte_identical_across_runs(tmp_path, small_ini):
    def go(sub, argv):
        out = tmp_path / sub
        assert run(argv + ["--out", str(out)]) == 0
        return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    argv = ["train", "--config", str(small_ini), "--n", "1", "--model", "micro", "--max-steps", "2",
            "--slices", "3", "--seed", "11", "--checkpoint-every", "1"]
    assert go("a", argv) == go("b", argv)


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "scaa", "memest", "--arch", "unet3d"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "GB" in res.stdout
    res = subprocess.run([sys.executable, "-m", "scaa", "nope"], capture_output=True, text=True)
    assert res.returncode == 1 and "usage" in res.stderr
