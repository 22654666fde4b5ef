import csv
import shutil
import time

import numpy as np
import pytest

from epcdiff import container
from epcdiff.autoencoder import AECheckpoint
from epcdiff.cli import CommandError, cmd_eval, cmd_verify, main
from epcdiff.config import load_config
from epcdiff.dataset import load_manifest
from epcdiff.diffusion import DiffusionCheckpoint
from epcdiff.nn import param_digest

TINY_TOML = """
seed = 2
[data]
size = 32
depth = 2
n_train = 2
n_test = 2
[ae]
base_width = 4
groups = 2
steps = 4
crop = 16
[diffusion]
base_width = 4
groups = 2
temb_dim = 8
epochs = 2
[loss]
eq_period = 1
[sample]
n_steps = 3
"""


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-data", "train-ae", "train-diff", "sample", "eval"):
        assert main([cmd, "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def test_pipeline_artifacts(run_dir):
    for rel in ("data/manifest.json", "ae/checkpoint.epcv", "ae/log.csv",
                "diffusion/checkpoint.epcv", "diffusion/log.csv", "diffusion/timing.csv",
                "samples/timing.csv", "eval/metrics.csv", "eval/baseline_metrics.csv",
                "eval/equivariance.csv"):
        assert (run_dir / rel).exists(), rel
    assert len(list((run_dir / "eval" / "diff").glob("*.epcv"))) == 2
    assert len(list((run_dir / "eval" / "profiles").glob("*.csv"))) == 2


def test_rerun_without_overwrite_refuses(run_dir, tiny_config, capsys):
    assert main(["gen-data", "--config", str(tiny_config), "--out", str(run_dir)]) == 2
    assert "overwrite" in capsys.readouterr().err
    assert main(["train-ae", "--config", str(tiny_config), "--out", str(run_dir)]) == 2


def test_ae_log_rows_and_config_echo(run_dir, tiny_config):
    rows = read_csv(run_dir / "ae" / "log.csv")
    assert rows[0] == ["step", "loss", "l1", "edge"] and len(rows) == 1 + 4
    ck = AECheckpoint.load(run_dir / "ae" / "checkpoint.epcv")
    assert ck.config == load_config(tiny_config).ae


def test_diffusion_log_and_checkpoint(run_dir, tiny_config):
    rows = read_csv(run_dir / "diffusion" / "log.csv")
    assert rows[0] == ["step", "epoch", "total", "ddpm", "l1", "edge", "lap", "eq"]
    body = rows[1:]
    assert len(body) == 2 * 1  # 2 epochs x (2 train pairs / batch 2)
    assert all(all(np.isfinite(float(v)) for v in r[2:]) for r in body)
    ck = DiffusionCheckpoint.load(run_dir / "diffusion" / "checkpoint.epcv")
    ae = AECheckpoint.load(run_dir / "ae" / "checkpoint.epcv")
    assert ck.ae_digest == param_digest(ae.params)
    assert ck.extra["config"] == load_config(tiny_config).to_dict()


def test_sample_is_operator_free_and_deterministic(run_dir, tiny_config, tmp_path):
    rows = read_csv(run_dir / "samples" / "timing.csv")
    assert rows[0] == ["id", "seconds", "projector_calls"]
    assert [r[2] for r in rows[1:]] == ["0", "0"]
    first = {p.name: p.read_bytes() for p in (run_dir / "samples").glob("*.epcv")}
    again = tmp_path / "again"
    for sub in ("data", "ae", "diffusion"):
        shutil.copytree(run_dir / sub, again / sub, dirs_exist_ok=True)
    assert main(["sample", "--config", str(tiny_config), "--out", str(again)]) == 0
    second = {p.name: p.read_bytes() for p in (again / "samples").glob("*.epcv")}
    assert first == second and len(first) == 2


def test_eval_aggregate_rows(run_dir):
    rows = read_csv(run_dir / "eval" / "metrics.csv")
    body = np.array([[float(v) for v in r[1:]] for r in rows[1:-2]])
    assert rows[-2][0] == "mean" and rows[-1][0] == "std"
    assert np.allclose([float(v) for v in rows[-2][1:]], body.mean(axis=0), rtol=1e-12)
    assert np.allclose([float(v) for v in rows[-1][1:]], body.std(axis=0, ddof=1), rtol=1e-12)
    prof = read_csv(next((run_dir / "eval" / "profiles").glob("*.csv")))
    assert prof[0] == ["column", "hu_ct", "hu_sct", "hu_cbct"] and len(prof) == 1 + 32


def test_eval_reference_against_itself(run_dir, tmp_path):
    preds = tmp_path / "preds"
    for f in (run_dir / "data" / "pairs").glob("*_test_*.epcv"):
        arrays, _ = container.load(f)
        container.save(preds / f.name, {"x_hat": arrays["x0"]})
    out = tmp_path / "selfeval"
    res = cmd_eval(load_config(None), out, pred_dir=preds, ref_dir=run_dir / "data")
    assert all(r.ssim == 1.0 and r.mae == 0.0 for r in res["reports"])
    for f in (out / "eval" / "diff").glob("*.epcv"):
        assert not np.any(container.load(f)[0]["abs_diff"])


def test_eval_count_mismatch_rejected(run_dir, tmp_path):
    preds = tmp_path / "one"
    f = next((run_dir / "samples").glob("*.epcv"))
    container.save(preds / f.name, container.load(f)[0])
    with pytest.raises(CommandError, match="predictions"):
        cmd_eval(load_config(None), tmp_path / "x", pred_dir=preds, ref_dir=run_dir / "data")


def test_missing_inputs_rejected(tmp_path, tiny_config, capsys):
    empty = tmp_path / "empty"
    for cmd in ("train-ae", "train-diff", "sample", "eval"):
        assert main([cmd, "--config", str(tiny_config), "--out", str(empty)]) == 2
        assert "missing" in capsys.readouterr().err


def test_invalid_config_key_reported(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[loss]\nweight = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "loss.weight" in err and "eq_period" in err


def test_mixed_config_has_two_domains(tmp_path):
    cfg = tmp_path / "mixed.toml"
    cfg.write_text('mixing = "mixed"\n[data]\ndomains = "mixed"\nsize = 32\ndepth = 2\n'
                   'n_train = 1\nn_test = 1\n')
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    manifest = load_manifest(tmp_path / "m" / "data")
    assert sorted(manifest["domains"]) == ["A", "B"]
    assert {p["domain"] for p in manifest["pairs"]} == {"A", "B"}


def test_default_config_generates_eight_two_split(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    pairs = load_manifest(tmp_path / "data")["pairs"]
    assert sum(p["split"] == "train" for p in pairs) == 8
    assert sum(p["split"] == "test" for p in pairs) == 2
    assert {p["domain"] for p in pairs} == {"A"}


def test_seed_flag_overrides_config(tmp_path, tiny_config):
    for seed, sub in ((5, "a"), (6, "b")):
        assert main(["gen-data", "--config", str(tiny_config), "--seed", str(seed),
                     "--out", str(tmp_path / sub)]) == 0
    a = load_manifest(tmp_path / "a" / "data")
    assert a["seed"] == 5 and load_manifest(tmp_path / "b" / "data")["seed"] == 6


def test_verify_quick_fast_and_machine_readable(tmp_path, capsys):
    t0 = time.perf_counter()
    assert cmd_verify("quick", tmp_path) == 0
    assert time.perf_counter() - t0 < 60.0
    rows = read_csv(tmp_path / "verify_quick.csv")
    assert rows[0][:4] == ["check", "value", "threshold", "passed"]
    names = {r[0] for r in rows[1:]}
    assert {"adjoint_gap", "equivariance_quarter_turns", "schedule_identities"} <= names
    assert all(r[3] == "1" for r in rows[1:])


def test_verify_full_includes_moments(tmp_path):
    assert main(["verify", "--level", "full", "--out", str(tmp_path)]) == 0
    names = {r[0] for r in read_csv(tmp_path / "verify_full.csv")[1:]}
    assert "forward_moments_max_z" in names and "equivariance_integer_steps" in names
