import csv
import json
import os

import numpy as np
import pytest

from posenorm.cli import main
from posenorm.metrics import pck
from posenorm.nnet import init_gaussian, load_net, net_to_bytes
from posenorm.refine import build_refine_net
from posenorm.skeleton import canonical_skeleton
from posenorm.synthdata import read_corpus

SMALL = {"canvas": [32, 32], "train": {"width": 4}}


def _config(tmp_path, values=SMALL, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(values))
    return str(path)


def _synth(tmp_path, n=6, seed=0, values=SMALL, name="corpus"):
    out = tmp_path / name
    assert main(["synth", "-n", str(n), "--seed", str(seed), "--config", _config(tmp_path, values),
                 "--out", str(out)]) == 0
    return str(out)


def _files(directory):
    return {f: open(os.path.join(directory, f), "rb").read() for f in sorted(os.listdir(directory))}


def test_synth_empty(tmp_path):
    out = _synth(tmp_path, n=0)
    anns, maps, meta = read_corpus(out)
    assert anns == [] and maps == []
    assert meta["config"]["seed"] == 0


def test_synth_is_deterministic(tmp_path):
    a = _synth(tmp_path, n=4, name="a")
    b = _synth(tmp_path, n=4, name="b")
    assert _files(a) == _files(b)
    c = _synth(tmp_path, n=4, seed=1, name="c")
    assert _files(a) != _files(c)


def test_synth_maps_and_annotations(tmp_path):
    anns, maps, _ = read_corpus(_synth(tmp_path, n=3))
    assert len(anns) == 3 and maps[0].shape == (15, 32, 32) and maps[0].dtype == np.float32
    assert anns[0].width == 32


def test_config_errors(tmp_path, capsys):
    bad = _config(tmp_path, {"train": {"epochs": 3}})
    assert main(["synth", "-n", "1", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert "epochs" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert main(["synth", "--config", str(tmp_path / "broken.json")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["synth", "--seed", "-1", "--out", str(tmp_path / "y")]) == 2
    assert main(["eval", "--out", str(tmp_path / "z")]) == 2


def test_missing_corpus_is_a_data_error(tmp_path):
    assert main(["eval", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


def test_train_zero_steps_writes_initialization(tmp_path):
    corpus = _synth(tmp_path, n=2)
    out = tmp_path / "t"
    assert main(["train", "--corpus", corpus, "--steps", "0", "--seed", "7", "--config", _config(tmp_path),
                 "--out", str(out)]) == 0
    fresh = init_gaussian(build_refine_net(14, 14, 4, dtype=np.float32), 0.001, seed=7)
    assert (out / "global.tnet").read_bytes() == net_to_bytes(fresh)


def test_train_lowers_loss_and_normalization_matters(tmp_path):
    corpus = _synth(tmp_path, n=6)
    cfg = _config(tmp_path)
    for name, extra in (("norm", []), ("raw", ["--no-normalize"])):
        assert main(["train", "--corpus", corpus, "--steps", "60", "--config", cfg,
                     "--out", str(tmp_path / name)] + extra) == 0
    losses = json.loads((tmp_path / "norm" / "global.loss.json").read_text())
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < np.mean(losses[:10])
    assert (tmp_path / "norm" / "global.tnet").read_bytes() != (tmp_path / "raw" / "global.tnet").read_bytes()


def test_train_limb_stage(tmp_path):
    corpus = _synth(tmp_path, n=2)
    cfg = _config(tmp_path)
    out = str(tmp_path / "t")
    assert main(["train", "--corpus", corpus, "--stage", "limb1", "--config", cfg, "--out", out]) == 2
    assert main(["train", "--corpus", corpus, "--steps", "0", "--config", cfg, "--out", out]) == 0
    assert main(["train", "--corpus", corpus, "--stage", "limb1", "--steps", "3", "--config", cfg,
                 "--global-net", os.path.join(out, "global.tnet"), "--out", out]) == 0
    net = load_net(os.path.join(out, "limb1.tnet"))
    assert net.output_shape((15, 32, 32)) == (3, 32, 32)
    assert main(["train", "--corpus", corpus, "--stage", "limb1", "--steps", "0", "--config", cfg,
                 "--global-net", os.path.join(out, "global.tnet"), "--out", str(tmp_path / "w")]) == 0
    from posenorm.refine import limb_net_from_global
    start = limb_net_from_global(load_net(os.path.join(out, "global.tnet")), canonical_skeleton().limb_defs[1])
    assert (tmp_path / "w" / "limb1.tnet").read_bytes() == net_to_bytes(start)


def test_divergence_exit_code(tmp_path, capsys):
    values = {"canvas": [32, 32], "train": {"width": 4, "lr": 1e8, "momentum": 0.0}}
    corpus = _synth(tmp_path, n=3, values=values)
    out = tmp_path / "t"
    with np.errstate(all="ignore"):
        code = main(["train", "--corpus", corpus, "--steps", "30", "--config", _config(tmp_path, values),
                     "--out", str(out)])
    assert code == 1
    assert "global.loss.json" in capsys.readouterr().err
    assert not np.isfinite(json.loads((out / "global.loss.json").read_text())[-1])
    assert not (out / "global.tnet").exists()


def test_eval_groundtruth_input_is_perfect(tmp_path, capsys):
    corpus = _synth(tmp_path, n=4)
    out = tmp_path / "e"
    capsys.readouterr()
    assert main(["eval", "--corpus", corpus, "--gt-input", "--config", _config(tmp_path),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"detector", "stage1_norm"}
    assert report["stage1_norm"]["total"] == 100.0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split()[0] for ln in lines[1:15]] == list(canonical_skeleton().joint_names)


def test_eval_report_matches_metrics(tmp_path):
    corpus = _synth(tmp_path, n=5)
    out = tmp_path / "e"
    assert main(["eval", "--corpus", corpus, "--no-normalize", "--config", _config(tmp_path),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    from posenorm.scoremap import extract_positions
    sk = canonical_skeleton()
    anns, maps, _ = read_corpus(corpus)
    want = pck([extract_positions(m, sk) for m in maps], [a.keypoints for a in anns], sk)
    assert report["detector"]["total"] == pytest.approx(want.total)
    assert report["detector"]["auc"] == pytest.approx(want.auc)
    per_joint = report["stage1_raw"]["per_joint"]
    assert sum(per_joint.values()) / 14 == pytest.approx(report["stage1_raw"]["total"])


def test_eval_rejects_wrong_channel_count(tmp_path):
    corpus = _synth(tmp_path, n=1)
    from posenorm.scoremap import write_smap
    write_smap(os.path.join(corpus, "000000.smap"), np.zeros((3, 32, 32), dtype=np.float32))
    assert main(["eval", "--corpus", corpus, "--out", str(tmp_path / "e")]) == 3


def test_compactness_outputs(tmp_path):
    values = {"canvas": [64, 64]}
    corpus = _synth(tmp_path, n=200, values=values)
    out = tmp_path / "c"
    stats = {}
    for stage in ("raw", "body_normalized"):
        assert main(["compactness", "--corpus", corpus, "--joint", "neck", "--ref", "r-hip", "--stage", stage,
                     "--out", str(out)]) == 0
        stats[stage] = json.loads((out / f"neck_r-hip_{stage}.json").read_text())
        with open(out / f"neck_r-hip_{stage}.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["dx", "dy"] and len(rows) == 201
    assert stats["body_normalized"]["cov_trace"] <= 0.1 * stats["raw"]["cov_trace"]


def test_compactness_needs_two_samples(tmp_path):
    corpus = _synth(tmp_path, n=1)
    assert main(["compactness", "--corpus", corpus, "--out", str(tmp_path / "c")]) == 3


def test_roundtrip(tmp_path, capsys):
    assert main(["roundtrip"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] warp adjoint" in out and "[info] smooth-map round-trip" in out


@pytest.mark.parametrize("fault, name", [("adjoint", "warp adjoint"), ("inverse", "point round-trip"),
                                         ("gradient", "softmax loss gradient")])
def test_roundtrip_fault_injection(capsys, fault, name):
    assert main(["roundtrip", "--inject-fault", fault]) == 4
    assert name in capsys.readouterr().err
