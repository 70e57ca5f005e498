import json
import os

import numpy as np
import pytest

from hoikit.cli import main
from hoikit.io_ingest import read_pfm, read_trajectory, write_mask, write_pfm, write_trajectory
from hoikit.synth_bench import SynthConfig, generate_sequence


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seq")
    generate_sequence(SynthConfig(n_frames=4, outlier_rate=0.0, seed=2), str(out))
    return out


def test_eval_identical_is_zero(seq_dir, tmp_path, capsys):
    gt = str(seq_dir / "gt.jsonl")
    code = main(["eval", "--pred", gt, "--gt", gt, "--manifest", str(seq_dir / "manifest.json"),
                 "--output", str(tmp_path)])
    assert code == 0
    rep = json.load(open(tmp_path / "report.json"))
    assert all(abs(rep[k]) < 1e-9 for k in ("cd_h", "cd_o", "cd_c", "acc_h", "acc_o"))
    assert "CD-H" in capsys.readouterr().out
    log = json.load(open(tmp_path / "run_log.json"))
    assert log["command"] == "eval" and len(log["config_hash"]) == 64 and "numpy" in log["versions"]


def test_missing_flag_is_usage_error(capsys):
    assert main(["eval", "--pred", "x.jsonl"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    assert main(["synth", "--output", "x", "--no-such-flag"]) == 1


def test_data_error_exit_code(seq_dir, tmp_path, capsys):
    code = main(["eval", "--pred", str(tmp_path / "missing.jsonl"), "--gt", str(seq_dir / "gt.jsonl"),
                 "--manifest", str(seq_dir / "manifest.json"), "--output", str(tmp_path)])
    assert code == 2
    assert json.load(open(tmp_path / "run_log.json"))["exit_code"] == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["optimize", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "3000" in text and "200.0" in text and "1200" in text
    for cmd in ("scale-search", "select", "align-depth", "align-human", "eval", "synth", "bench"):
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
    assert "0.5" in capsys.readouterr().out


def test_select_and_optimize(seq_dir, tmp_path):
    manifest = str(seq_dir / "manifest.json")
    assert main(["select", "--manifest", manifest, "--output", str(tmp_path / "sel")]) == 0
    sel = json.load(open(tmp_path / "sel" / "selection.json"))
    assert len(sel["frames"]) == 4 and all(f["provenance"] == "forward" for f in sel["frames"])
    code = main(["optimize", "--manifest", manifest, "--init", str(seq_dir / "gt.jsonl"), "--steps", "4",
                 "--penetration-last", "2", "--penetration-samples", "500", "--output", str(tmp_path / "opt")])
    assert code == 0
    tr = read_trajectory(str(tmp_path / "opt" / "refined.jsonl"), 4)
    assert tr.provenance == ["optimized"] * 4
    trace = json.load(open(tmp_path / "opt" / "loss_trace.json"))["trace"]
    assert len(trace["total"]) == 5


def test_inputs_not_mutated(seq_dir, tmp_path):
    before = {f: os.path.getmtime(os.path.join(r, f)) for r, _, fs in os.walk(seq_dir) for f in fs}
    main(["select", "--manifest", str(seq_dir / "manifest.json"), "--baseline", "top1",
          "--output", str(tmp_path)])
    after = {f: os.path.getmtime(os.path.join(r, f)) for r, _, fs in os.walk(seq_dir) for f in fs}
    assert before == after


def test_align_depth_and_human(tmp_path, rng):
    yy, xx = np.mgrid[:40, :50]
    pred = (1.0 + 0.01 * xx + 0.02 * yy).astype(np.float32)
    write_pfm(tmp_path / "p.pfm", pred)
    write_pfm(tmp_path / "r.pfm", 2 * pred + 0.5)
    write_mask(tmp_path / "m.png", np.ones(pred.shape, bool))
    out = tmp_path / "ad"
    assert main(["align-depth", "--pred", str(tmp_path / "p.pfm"), "--ref", str(tmp_path / "r.pfm"),
                 "--mask", str(tmp_path / "m.png"), "--no-preprocess", "--output", str(out)]) == 0
    doc = json.load(open(out / "alignment.json"))
    assert abs(doc["s"] - 2) < 1e-5 and abs(doc["t"] - 0.5) < 1e-5
    assert np.allclose(read_pfm(out / "aligned.pfm"), 2 * pred + 0.5, atol=1e-5)
    h = rng.normal(0, 0.2, (200, 3)) + [0, 0, 3]
    np.save(tmp_path / "h.npy", 1.1 * h)
    np.savetxt(tmp_path / "s.txt", h)
    assert main(["align-human", "--human", str(tmp_path / "h.npy"), "--scene", str(tmp_path / "s.txt"),
                 "--output", str(tmp_path / "ah")]) == 0
    assert abs(json.load(open(tmp_path / "ah" / "human_alignment.json"))["scale"] - 1 / 1.1) < 1e-3


def test_scale_search_small_grid(seq_dir, tmp_path):
    code = main(["scale-search", "--manifest", str(seq_dir / "manifest.json"), "--coarse-scales", "0.5", "1.0",
                 "2.0", "--top-k", "1", "--refine-count", "2", "--output", str(tmp_path)])
    assert code == 0
    doc = json.load(open(tmp_path / "scale.json"))
    assert len(doc["evaluations"]) == 5 and doc["scale"] > 0


def test_synth_occlusion_flag(tmp_path):
    assert main(["synth", "--frames", "3", "--occlusion", "bad", "--output", str(tmp_path)]) == 1
    assert main(["synth", "--frames", "3", "--occlusion", "1:1", "--output", str(tmp_path / "s")]) == 0
    assert os.path.exists(tmp_path / "s" / "manifest.json")
