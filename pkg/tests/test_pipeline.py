import json
import os

import numpy as np
import pytest
from PIL import Image

from ct3d import cli
from ct3d.config import RunConfig, load_config, parse_config
from ct3d.errors import ConfigError, IngestionError
from ct3d.formats import load_vox, save_vox
from ct3d.ingest import InconsistentSlicesWarning, content_key, ingest_case, ingest_hu, precompute
from ct3d.model import ModelConfig, build_model, checkpoint_2d_template, read_checkpoint, save_checkpoint, write_checkpoint
from ct3d.resample import spline_resample_volume
from ct3d.train_eval import LabeledCase, write_cases


def write_slices(directory, shapes, value=128, bits=8):
    os.makedirs(directory, exist_ok=True)
    for i, shape in enumerate(shapes):
        if bits == 8:
            arr = np.full(shape, value, np.uint8)
        else:
            arr = np.full(shape, value, np.uint16)
        Image.fromarray(arr).save(os.path.join(directory, f"slice{i:04d}.png"))


# ingestion

def test_ingest_166_slices(tmp_path):
    write_slices(tmp_path / "case", [(512, 512)] * 166, value=0)
    vol = ingest_case(str(tmp_path / "case"))
    assert vol.shape == (512, 512, 166)


def test_ingest_discards_odd_slice(tmp_path):
    shapes = [(16, 16)] * 10
    shapes[4] = (16, 12)
    write_slices(tmp_path / "case", shapes)
    with pytest.warns(InconsistentSlicesWarning, match=r"\[4\]"):
        vol = ingest_case(str(tmp_path / "case"))
    assert vol.shape == (16, 16, 9)


def test_ingest_lexicographic_order(tmp_path):
    d = tmp_path / "case"
    d.mkdir()
    for name, v in [("b.png", 20), ("a.png", 10), ("c.png", 30)]:
        Image.fromarray(np.full((4, 4), v, np.uint8)).save(d / name)
    vol = ingest_case(str(d))
    np.testing.assert_allclose(vol[0, 0], np.array([10, 20, 30]) / 255.0, atol=1e-7)


def test_ingest_16bit_hu_window(tmp_path):
    d = tmp_path / "case"
    write_slices(d, [(4, 4)] * 2, value=1024 - 300, bits=16)
    vol = ingest_case(str(d))
    np.testing.assert_allclose(vol, 0.5, atol=1e-6)


def test_ingest_errors(tmp_path):
    write_slices(tmp_path / "one", [(8, 8)])
    with pytest.raises(IngestionError, match="at least 2"):
        ingest_case(str(tmp_path / "one"))
    bad = tmp_path / "bad"
    write_slices(bad, [(8, 8)] * 2)
    (bad / "slice0009.png").write_bytes(b"not an image")
    with pytest.raises(IngestionError, match="slice0009.png"):
        ingest_case(str(bad))
    with pytest.raises(IngestionError):
        ingest_case(str(tmp_path / "missing.vox"))


def test_ingest_vox_roundtrip(tmp_path):
    write_slices(tmp_path / "case", [(8, 8)] * 3, value=77)
    vol = ingest_case(str(tmp_path / "case"))
    save_vox(tmp_path / "v.vox", vol)
    again = ingest_case(str(tmp_path / "v.vox"))
    assert again.tobytes() == vol.tobytes()


def test_ingest_hu_array():
    np.testing.assert_allclose(ingest_hu([-1500, -1000, 400, 1000]), [0, 0, 1, 1])


# precompute cache

def test_precompute_constant_and_cache_hit(tmp_path, monkeypatch):
    monkeypatch.setenv("CT3D_CACHE_DIR", str(tmp_path / "cache"))
    vol = np.full((10, 12, 9), 0.3, np.float32)
    paths, hits = precompute(vol, (16, 8))
    assert not any(hits.values())
    assert all(p.startswith(str(tmp_path / "cache")) for p in paths.values())
    np.testing.assert_allclose(load_vox(paths[16]), 0.3, atol=1e-6)
    np.testing.assert_allclose(load_vox(paths[8]), 0.3, atol=1e-6)
    mtime = os.stat(paths[16]).st_mtime_ns
    paths2, hits2 = precompute(vol.copy(), (16, 8))
    assert all(hits2.values()) and paths2 == paths
    assert os.stat(paths[16]).st_mtime_ns == mtime


def test_precompute_matches_direct_resample(tmp_path):
    vol = np.random.default_rng(0).random((20, 18, 22)).astype(np.float32)
    paths, _ = precompute(vol, (24,), tmp_path)
    direct = spline_resample_volume(vol.astype(np.float64), (24, 24, 24))
    np.testing.assert_allclose(load_vox(paths[24]), direct, atol=1e-5)


def test_content_key_tracks_content():
    a = np.zeros((3, 3, 3), np.float32)
    b = a.copy()
    b[1, 1, 1] = 1e-6
    assert content_key(a) == content_key(a.copy())
    assert content_key(a) != content_key(b)
    assert content_key(a) != content_key(a.reshape(27, 1, 1))


# config

def test_config_defaults_and_parse():
    cfg = parse_config("# comment\nmode = detection\nstage_depths = 1,1,1,1\nlr=0.5\naugment = false\n")
    assert cfg.num_classes == 2 and cfg.stage_depths == (1, 1, 1, 1) and cfg.lr == 0.5 and not cfg.augment
    assert RunConfig().ema_decay == 0.999 and RunConfig().k == 5
    assert parse_config(RunConfig().to_text()) == RunConfig()


@pytest.mark.parametrize("text", ["bogus = 1", "lr = fast", "mode = staging", "noequals", "lr=1\nlr=2",
                                  "inflation = 1g"])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")


# CLI

def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_error_is_one_json_line(capsys, tmp_path):
    code, _, err = run_cli(capsys, "eval", tmp_path / "none.tsv", tmp_path / "none2.tsv")
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["error"] == "io"
    code, _, err = run_cli(capsys, "folds")
    assert code != 0 and json.loads(err.strip())["error"] == "contract"


def test_cli_folds_62(capsys, tmp_path):
    cases = [LabeledCase(f"m{i:02d}", None, 1) for i in range(62)] + [LabeledCase(f"s{i}", None, 2) for i in range(9)]
    write_cases(tmp_path / "labels.tsv", cases)
    code, out, _ = run_cli(capsys, "folds", tmp_path / "labels.tsv", tmp_path / "folds.tsv", "--k", 5, "--seed", 4)
    assert code == 0
    row = dict(line.split("\t") for line in out.strip().splitlines())
    assert sorted(map(int, row["class1"].split(","))) == [12, 12, 12, 13, 13]
    assert len((tmp_path / "folds.tsv").read_text().splitlines()) == 71


def test_cli_eval_perfect(capsys, tmp_path):
    write_cases(tmp_path / "labels.tsv", [LabeledCase(f"c{i}", None, i % 3) for i in range(9)])
    (tmp_path / "pred.tsv").write_text("".join(f"c{i}\t{i % 3}\t0.1,0.2,0.7\n" for i in range(9)))
    code, out, _ = run_cli(capsys, "eval", tmp_path / "pred.tsv", tmp_path / "labels.tsv")
    assert code == 0
    metrics = dict(line.split("\t") for line in out.strip().splitlines())
    assert float(metrics["macro_f1"]) == 1.0


def test_cli_ingest(capsys, tmp_path):
    write_slices(tmp_path / "case", [(16, 16)] * 8, value=100)
    args = ["ingest", tmp_path / "case", tmp_path / "v.vox", "--sizes", 12, 8, "--cache-dir", tmp_path / "cache"]
    code, out, _ = run_cli(capsys, *args)
    assert code == 0 and "computed" in out
    assert load_vox(tmp_path / "v.vox").shape == (16, 16, 8)
    code, out, _ = run_cli(capsys, *args)
    assert code == 0 and out.count("hit") == 2


def test_cli_inflate(capsys, tmp_path):
    cfg = ModelConfig.toy()
    ck2 = checkpoint_2d_template(cfg, 0)
    write_checkpoint(ck2, tmp_path / "2d.ntc")
    code, out, _ = run_cli(capsys, "inflate", tmp_path / "2d.ntc", "1g", tmp_path / "3d.ntc")
    assert code == 0
    rows = [line.split("\t") for line in out.strip().splitlines()]
    assert rows and all(abs(float(a) - float(b)) <= 1e-5 * float(a) for _, a, b in rows)
    assert read_checkpoint(tmp_path / "3d.ntc").entries["stem.conv.weight"].shape == (1, 4, 4, 4, 4)


def _toy_cases(tmp_path, n=6):
    cases = []
    rng = np.random.default_rng(0)
    for i in range(n):
        path = tmp_path / f"case{i}.vox"
        save_vox(path, rng.random((20, 20, 20)).astype(np.float32))
        cases.append(LabeledCase(f"case{i}", str(path), i % 2))
    write_cases(tmp_path / "cases.tsv", cases)
    return tmp_path / "cases.tsv"


def test_cli_predict_idempotent_ensemble(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("CT3D_CACHE_DIR", str(tmp_path / "cache"))
    cases = _toy_cases(tmp_path, 3)
    model = build_model(ModelConfig.toy(num_classes=2), 0)
    write_checkpoint(save_checkpoint(model), tmp_path / "m.ntc")
    ck = str(tmp_path / "m.ntc")
    code, once, _ = run_cli(capsys, "predict", cases, "--ckpts", ck, "--size", 32)
    assert code == 0
    code, five, _ = run_cli(capsys, "predict", cases, "--ckpts", ",".join([ck] * 5), "--size", 32)
    assert code == 0 and once == five
    first = once.splitlines()[0].split("\t")
    assert first[0] == "case0" and len(first[2].split(",")) == 2


def test_cli_train_then_pseudolabel(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("CT3D_CACHE_DIR", str(tmp_path / "cache"))
    cases = _toy_cases(tmp_path, 6)
    (tmp_path / "run.cfg").write_text(
        f"mode = detection\ncases = {cases}\nout_dir = {tmp_path / 'run'}\nk = 3\n"
        "stage_depths = 1,1,1,1\nstage_channels = 4,8,16,32\nseg_channels = 8\n"
        "heads = classification,segmentation\npre_size = 40\ncrop_size = 32\nsteps = 2\nbatch = 2\nelastic_sigma = 4\n")
    code, out, err = run_cli(capsys, "train", "--config", tmp_path / "run.cfg", "--fold", 1)
    assert code == 0, err
    fold = tmp_path / "run" / "fold1"
    assert {"model.ntc", "ema.ntc", "loss.tsv", "config.txt"} <= set(os.listdir(fold))
    assert len((fold / "loss.tsv").read_text().splitlines()) == 2
    code, out, err = run_cli(capsys, "pseudolabel", cases, tmp_path / "masks", "--ckpt", fold / "ema.ntc", "--size", 32)
    assert code == 0, err
    mask = load_vox(tmp_path / "masks" / "case0.mask.vox")
    assert mask.shape == (20, 20, 20) and set(np.unique(mask)) <= {0.0, 1.0}
    assert (tmp_path / "masks" / "cases.tsv").exists()
    code, _, err = run_cli(capsys, "train", "--config", tmp_path / "run.cfg", "--fold", 7)
    assert code != 0 and json.loads(err.strip())["error"] == "contract"


def test_cli_selftest(capsys):
    code, out, _ = run_cli(capsys, "selftest")
    assert code == 0 and "FAIL" not in out and out.count("PASS") >= 10
