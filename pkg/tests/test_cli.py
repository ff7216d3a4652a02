import json

import numpy as np
import pytest

from kband import autodiff as ad
from kband import cli, data


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    code = cli.main(["dataset", "--shape", "16x16", "--n-train", "4", "--n-test", "2", "--r-band", "2",
                     "--r-vd", "2", "--calib", "4x4", "--seed", "3", "--out", str(root / "c")])
    assert code == 0
    return root / "c"


def test_dataset_counts_and_reproducible(tmp_path, capsys):
    args = ["dataset", "--shape", "64x64", "--n-train", "200", "--n-test", "40", "--r-band", "4",
            "--r-vd", "4", "--seed", "1", "--json"]
    code, out, _ = _run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0
    first = json.loads(out)
    assert first["records"] == 240 and len(data.Container(tmp_path / "a")) == 240
    code, out, _ = _run(capsys, *args, "--out", tmp_path / "b")
    assert json.loads(out)["crc32c"] == first["crc32c"]
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["seed"] == 1 and cfg["n_train"] == 200


def test_dataset_bad_args(tmp_path, capsys):
    code, _, err = _run(capsys, "dataset", "--r-band", "0.5", "--n-train", "1", "--n-test", "0",
                        "--shape", "8x8", "--out", tmp_path)
    assert code == 2 and "r_band" in err
    code, _, _ = _run(capsys, "dataset", "--shape", "notashape")
    assert code == 2
    code, _, _ = _run(capsys, "dataset", "--r-band", "4", "--r-vd", "8", "--matched-budget", "--out", tmp_path)
    assert code == 2


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"shape": "16x16", "n_train": 2, "n_test": 1, "r_band": 2, "seed": 9}))
    code, out, _ = _run(capsys, "dataset", "--config", cfg, "--n-train", "3", "--json", "--out", tmp_path / "o")
    assert code == 0
    man = data.Container(tmp_path / "o").manifest
    assert man.splits == {"train": 3, "test": 1} and man.seeds["base"] == 9
    cfg.write_text(json.dumps({"bogus": 1}))
    assert _run(capsys, "dataset", "--config", cfg)[0] == 2


def test_output_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("KBAND_OUTPUT_ROOT", str(tmp_path / "root"))
    code, _, _ = _run(capsys, "wmask", "--shape", "16x16", "--r-band", "1")
    assert code == 0 and (tmp_path / "root" / "wmask" / "weights.npy").exists()


def test_wmask_outputs(tmp_path, capsys):
    code, out, _ = _run(capsys, "wmask", "--shape", "16x16", "--r-band", "1", "--json", "--out", tmp_path / "a")
    s = json.loads(out)
    assert code == 0 and s["min"] == s["max"] == 1.0
    code, out, _ = _run(capsys, "wmask", "--shape", "64x64", "--r-band", "3", "--json", "--out", tmp_path / "b")
    s = json.loads(out)
    assert s["center"] == 1.0 and s["max"] > 1 and s["argmax"] != [0, 0] and s["zero_coverage"] == 0
    np.testing.assert_array_equal(np.load(tmp_path / "b" / "weights.npy").shape, (64, 64))
    header = (tmp_path / "b" / "profile.csv").read_text().splitlines()[0]
    assert header == "ky,column_weight,row_weight"


def test_wmask_zero_coverage_warning(tmp_path, capsys):
    code, _, err = _run(capsys, "wmask", "--shape", "32x32", "--r-band", "8", "--n-angles", "2",
                        "--out", tmp_path)
    assert code == 0 and "warning" in err


def test_train_lr_zero_and_eval(small_ds, tmp_path, capsys):
    code, out, _ = _run(capsys, "train", "--data", small_ds, "--strategy", "kband", "--lr", "0",
                        "--layers", "2", "--channels", "2", "--unrolls", "1", "--json", "--out", tmp_path / "t")
    assert code == 0
    s = json.loads(out)
    assert s["params_checksum"] == s["initial_checksum"]
    assert ad.load_checkpoint(tmp_path / "t" / "model.json").checksum() == s["initial_checksum"]
    for f in ("config.json", "train.jsonl", "metrics.csv", "eval.csv", "eval.json"):
        assert (tmp_path / "t" / f).exists()
    code, out, _ = _run(capsys, "eval", "--data", small_ds, "--checkpoint", tmp_path / "t" / "model.json",
                        "--unrolls", "1", "--json", "--out", tmp_path / "e")
    assert code == 0 and len(json.loads(out)["rows"]) == 2


def test_train_strategies_need_matching_data(small_ds, tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--data", small_ds, "--strategy", "kvertical", "--out", tmp_path)
    assert code == 2 and "vertical" in err
    code, _, _ = _run(capsys, "train", "--data", small_ds, "--r-band", "4", "--r-vd", "8",
                      "--matched-budget", "--out", tmp_path)
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_missing_and_divergent(small_ds, tmp_path, capsys):
    assert _run(capsys, "train", "--data", tmp_path / "missing", "--out", tmp_path / "x")[0] == 4
    code, _, err = _run(capsys, "train", "--data", small_ds, "--lr", "1e30", "--epochs", "3", "--loss", "l2",
                        "--init-scale", "1", "--out", tmp_path / "d")
    assert code == 5 and "non-finite" in err


def test_eval_identity_full_sampling(small_ds, tmp_path, capsys):
    code, out, _ = _run(capsys, "eval", "--data", small_ds, "--identity", "--r-vd", "1", "--json",
                        "--out", tmp_path)
    assert code == 0
    rows = json.loads(out)["rows"]
    assert all(r["nmse"] <= 1e-10 for r in rows)


def test_eval_corrupt(small_ds, tmp_path, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(small_ds, bad)
    blob = bytearray((bad / "records.kbnd").read_bytes())
    blob[-20] ^= 0xFF
    (bad / "records.kbnd").write_bytes(bytes(blob))
    code, _, err = _run(capsys, "eval", "--data", bad, "--identity", "--out", tmp_path / "e")
    assert code == 4 and "checksum" in err


def test_verify_pass_fail_json(tmp_path, capsys):
    code, out, _ = _run(capsys, "verify", "--out", tmp_path / "ok")
    assert code == 0 and out.count("PASS") == 3
    code, out, err = _run(capsys, "verify", "--no-weight-mask", "--out", tmp_path / "bad")
    assert code == 3 and "FAIL  unbiasedness_independent" in out and "relative_errors" in err
    code, out, _ = _run(capsys, "verify", "--json", "--out", tmp_path / "j")
    rep = json.loads(out)
    assert code == 0 and rep["passed"]
    assert rep == json.loads((tmp_path / "j" / "verify.json").read_text())


def test_phantom_roundtrip(tmp_path, capsys):
    code, _, _ = _run(capsys, "phantom", "--shape", "16x12", "--seed", "2", "--out", tmp_path)
    assert code == 0
    img = data.ingest_slice(tmp_path / "phantom.c64")
    ref = data.make_phantom(data.PhantomSpec((16, 12), seed=2))
    np.testing.assert_allclose(img, ref, atol=1e-5)
    code, out, _ = _run(capsys, "dataset", "--shape", "16x12", "--n-train", "1", "--n-test", "0",
                        "--r-band", "2", "--r-vd", "2", "--ingest", tmp_path / "phantom.c64",
                        "--json", "--out", tmp_path / "ds")
    assert code == 0 and json.loads(out)["records"] == 1
