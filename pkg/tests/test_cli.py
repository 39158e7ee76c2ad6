import csv
import json

import pytest

from geosiam.cli import build_parser, main, resolve_config
from geosiam.pipeline import STAGES, Pipeline, PipelineError, cells, run_pipeline
from geosiam.config import RunConfig

TINY = {
    "seed": 3,
    "world": {"grid_u": 61, "grid_v": 16},
    "sampler": {"n_patches": 200, "n_pairs": 200, "n_test_pairs": 12, "n_labeled": 120, "n_labeled_train": 8},
    "siamese": {"epochs": 1, "loss_modes": ["dist_only", "combined"]},
    "segnet": {"phase1_iters": 4, "phase2_iters": 4, "milestones": [2]},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def finished_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    assert main(["run", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_every_stage_is_a_subcommand():
    parser = build_parser()
    for cmd in ("run",) + STAGES:
        assert parser.parse_args([cmd]).command == cmd


def test_run_writes_all_artifacts(finished_run):
    out = finished_run
    for rel in (
        "config.json", "version.txt", "seeds.txt", "world/world.json", "world/mesh.txt",
        "data/patches.gspatch", "data/labeled.gspatch", "data/patches.csv", "pairs/train.pairs",
        "pairs/test.pairs", "pretrain/combined_s3/model.ckpt", "pretrain/combined_s3/epoch000.ckpt",
        "pretrain/dist_only_s3/history.csv", "finetune/random_s3/model.ckpt",
        "finetune/from_siamese_combined_s3/model.ckpt", "eval/err_dist.csv", "eval/summary.csv",
        "eval/random_s3_metrics.csv", "borders/combined_s3_h0.csv", "borders/summary.csv", "report.csv",
    ):
        assert (out / rel).is_file(), rel
    assert (out / "seeds.txt").read_text() == "3\n"


def test_report_layout(finished_run):
    rows = _rows(finished_run / "report.csv")
    assert [r["experiment"] for r in rows] == ["siamese_dist_only", "siamese_combined", "random_init"]
    assert rows[-1]["err_dist"] == ""
    assert all(float(r["macro_dice"]) >= 0 for r in rows)
    metrics = _rows(finished_run / "eval" / "random_s3_metrics.csv")
    assert [r["class"] for r in metrics][-2:] == ["macro", "err_seg"]


def test_rerun_skips_current_stages(finished_run):
    cfg = RunConfig.from_dict(TINY)
    pipe = Pipeline(cfg, finished_run)
    assert all(pipe.is_current(s) for s in STAGES)
    assert not pipe.run_stage("pretrain")


def test_edited_artifact_invalidates_downstream(finished_run, tmp_path):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(finished_run, out)
    pipe = Pipeline(RunConfig.from_dict(TINY), out)
    (out / "eval" / "summary.csv").write_text("cell,seed,macro_dice,err_seg\n")
    assert not pipe.is_current("eval")
    assert not pipe.is_current("borders")
    assert pipe.is_current("finetune")


def test_stop_after(tiny_config, tmp_path):
    out = tmp_path / "partial"
    assert main(["run", "--config", str(tiny_config), "--out", str(out), "--stop-after", "pairs"]) == 0
    assert (out / "pairs" / "train.pairs").exists()
    assert not (out / "pretrain").exists()


def test_missing_inputs_exit_nonzero(tiny_config, tmp_path, capsys):
    rc = main(["report", "--config", str(tiny_config), "--out", str(tmp_path / "empty")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "[report]" in err and "eval/err_dist.csv" in err
    with pytest.raises(PipelineError, match=r"\[pairs\]"):
        Pipeline(RunConfig.from_dict(TINY), tmp_path / "empty").run_stage("pairs")


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"siamese": {"alpha": 1, "bogus": 2}}')
    assert main(["gen-world", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["run", "--loss-modes", "nope", "--out", str(tmp_path / "o")]) == 2


def test_overrides(tiny_config):
    args = build_parser().parse_args([
        "run", "--config", str(tiny_config), "--seed", "9", "--n-seeds", "2", "--lam", "0.01",
        "--alpha", "3", "--epochs", "2", "--init-modes", "random",
    ])
    cfg = resolve_config(args)
    assert cfg.seeds == [9, 10]
    assert cfg.siamese.lam == cfg.segnet.lam == 0.01
    assert cfg.siamese.alpha == 3 and cfg.siamese.epochs == 2
    assert [c[2] for c in cells(cfg)] == ["random"]
    assert cfg.sampler.n_patches == 200


def test_run_pipeline_rejects_unknown_stage(tmp_path):
    with pytest.raises(ValueError):
        run_pipeline(RunConfig.from_dict(TINY), tmp_path, stop_after="train")
