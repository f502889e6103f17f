import json

import numpy as np
import pytest

from atunlearn import cli
from atunlearn.params import load_checkpoint

TINY = [
    "--pretrain-steps", "60",
    "--adapt-steps", "20",
    "--unlearn-steps", "20",
    "--gen-hidden", "8",
    "--disc-hidden", "8",
    "--fisher-samples", "100",
    "--eval-n", "500",
    "--reference-n", "500",
    "--data-n", "2000",
    "--feedback-n", "300",
    "--k", "2",
    "--log-every", "10",
]


def run(*args):
    return cli.main([*args])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    code = run("run-all", "--out", str(root), *TINY)
    assert code == 0
    return root


def test_run_all_writes_every_stage(pipeline_dir):
    for stage in ("pretrain", "feedback", "adapt", "unlearn", "evaluate"):
        manifest = json.loads((pipeline_dir / stage / "manifest.json").read_text())
        assert manifest["exit_code"] == 0 and manifest["status"] == "ok"
        assert manifest["command"] == stage
        assert set(manifest["config"]) >= {"gamma", "alpha", "repulsion", "seed"}
    assert len(list((pipeline_dir / "adapt").glob("adapted_*.atuc"))) == 2
    report = json.loads((pipeline_dir / "evaluate" / "report.json").read_text())
    assert sum(report["mode_histogram"]) == report["n"] == 500


def test_manifest_lists_outputs_and_input_digests(pipeline_dir):
    m = json.loads((pipeline_dir / "unlearn" / "manifest.json").read_text())
    assert str(pipeline_dir / "unlearn" / "generator.atuc") in m["outputs"]
    assert any(p.endswith("adapted_0.atuc") for p in m["inputs"])
    assert all(len(d) == 64 for d in m["inputs"].values())
    assert m["seeds"]["unlearn"] == 3000


def test_metrics_stream_records(pipeline_dir):
    lines = (pipeline_dir / "pretrain" / "metrics.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert recs and all(set(r) == {"run_id", "step", "name", "value"} for r in recs)
    run_id = json.loads((pipeline_dir / "pretrain" / "manifest.json").read_text())["run_id"]
    assert {r["run_id"] for r in recs} == {run_id}


def test_rerun_is_bit_identical(pipeline_dir, tmp_path):
    out = tmp_path / "unlearn2"
    code = run(
        "unlearn", "--out", str(out),
        "--pretrained", str(pipeline_dir / "pretrain"),
        "--feedback", str(pipeline_dir / "feedback"),
        "--adapted", str(pipeline_dir / "adapt"),
        *TINY,
    )
    assert code == 0
    assert (out / "generator.atuc").read_bytes() == (pipeline_dir / "unlearn" / "generator.atuc").read_bytes()
    a = json.loads((out / "manifest.json").read_text())
    b = json.loads((pipeline_dir / "unlearn" / "manifest.json").read_text())
    assert a["run_id"] == b["run_id"]


def test_none_repulsion_ignores_gamma(pipeline_dir, tmp_path):
    outs = []
    for gamma in ("0", "7"):
        out = tmp_path / f"g{gamma}"
        code = run(
            "unlearn", "--out", str(out), "--repulsion", "none", "--gamma", gamma,
            "--pretrained", str(pipeline_dir / "pretrain"),
            "--feedback", str(pipeline_dir / "feedback"),
            "--adapted", str(pipeline_dir / "adapt"),
            *TINY,
        )
        assert code == 0
        outs.append((out / "generator.atuc").read_bytes())
    assert outs[0] == outs[1]


def test_evaluate_twice_identical(pipeline_dir, tmp_path):
    reports = []
    for i in range(2):
        out = tmp_path / f"e{i}"
        code = run(
            "evaluate", "--out", str(out),
            "--generator", str(pipeline_dir / "unlearn" / "generator.atuc"),
            "--pretrained", str(pipeline_dir / "pretrain"),
            *TINY,
        )
        assert code == 0
        reports.append((out / "report.json").read_bytes())
    assert reports[0] == reports[1]


def test_extrapolate_and_plot(pipeline_dir, tmp_path):
    out = tmp_path / "ex"
    assert run("extrapolate", "--out", str(out), "--pretrained", str(pipeline_dir / "pretrain"),
               "--adapted", str(pipeline_dir / "adapt"), "--extrapolate-t", "1.5", *TINY) == 0
    ckpt = load_checkpoint(out / "generator.atuc")
    assert ckpt.meta.stage == "extrapolated"
    png = tmp_path / "plot.png"
    assert run("plot", "--generator", str(out / "generator.atuc"), "--output", str(png), "--n", "300", *TINY) == 0
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    png2 = tmp_path / "fb.png"
    assert run("plot", "--samples", str(pipeline_dir / "feedback" / "feedback.atuc"), "--output", str(png2)) == 0


def test_missing_input_exit_code(tmp_path):
    code = run("feedback", "--out", str(tmp_path / "f"), "--pretrained", str(tmp_path / "nowhere"))
    assert code == cli.EXIT_MISSING
    m = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert m["exit_code"] == cli.EXIT_MISSING


def test_unknown_config_key_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gamm = 1\n")
    with pytest.raises(SystemExit) as exc:
        run("pretrain", "--out", str(tmp_path / "p"), "--config", str(cfg))
    assert exc.value.code == cli.EXIT_USAGE


def test_bad_checkpoint_exit_code(pipeline_dir, tmp_path):
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "generator.atuc").write_bytes(b"XXXX0000")
    code = run("evaluate", "--out", str(tmp_path / "e"), "--generator", str(bad / "generator.atuc"),
               "--pretrained", str(pipeline_dir / "pretrain"), *TINY)
    assert code == cli.EXIT_BAD_CHECKPOINT


def test_degenerate_feedback_exit_code(pipeline_dir, tmp_path):
    # every label negative leaves no positives
    code = run("feedback", "--out", str(tmp_path / "f"), "--pretrained", str(pipeline_dir / "pretrain"),
               "--negative-modes", "0,1,2,3,4,5,6,7", *TINY)
    assert code == cli.EXIT_DEGENERATE


def test_divergence_exit_code(pipeline_dir, tmp_path):
    code = run(
        "unlearn", "--out", str(tmp_path / "u"), "--repulsion", "nl2", "--gamma", "1e300",
        "--pretrained", str(pipeline_dir / "pretrain"),
        "--feedback", str(pipeline_dir / "feedback"),
        "--adapted", str(pipeline_dir / "adapt"),
        *TINY,
    )
    assert code == cli.EXIT_DIVERGED


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        run("--help")
    out = capsys.readouterr().out
    for code in range(7):
        assert f"  {code}  " in out


def test_theory_command(tmp_path):
    code = run("theory", "--out", str(tmp_path / "t"), "--dims", "2,3", "--trials", "2", "--mc-samples", "20000")
    assert code == 0
    rec = json.loads((tmp_path / "t" / "theory.json").read_text())
    assert len(rec["closed_form"]) == 2 and len(rec["dpi"]) == 2


def test_image_track_end_to_end(tmp_path):
    from atunlearn.data import write_idx_images

    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 300)
    images = np.zeros((300, 4, 4), dtype=np.uint8)
    for i, lab in enumerate(labels):
        images[i, lab, :] = 255
    write_idx_images(tmp_path / "img", tmp_path / "lab", images, labels)
    img = ["--idx-images", str(tmp_path / "img"), "--idx-labels", str(tmp_path / "lab"),
           "--negative-modes", "0", "--classifier-epochs", "30", "--classifier-hidden", "16"]
    code = run("run-all", "--out", str(tmp_path / "r"), *TINY, *img)
    assert code == 0
    m = json.loads((tmp_path / "r" / "pretrain" / "manifest.json").read_text())
    assert m["classifier_test_accuracy"] > 0.9
    png = tmp_path / "grid.png"
    assert run("plot", "--generator", str(tmp_path / "r" / "unlearn" / "generator.atuc"), "--output", str(png),
               "--classifier", str(tmp_path / "r" / "pretrain" / "classifier.atuc"), *TINY, *img) == 0
