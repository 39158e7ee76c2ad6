"""End-to-end experiment pipeline with resumable, content-hashed stages.

Artifacts under the output directory::

    config.json  version.txt  seeds.txt
    world/      world.json mesh.txt
    data/       patches.gspatch labeled.gspatch patches.csv labeled.csv
    pairs/      train.pairs test.pairs
    pretrain/   <loss_mode>_s<seed>/ model.ckpt epochNNN.ckpt history.csv
    finetune/   <cell>_s<seed>/ model.ckpt history.csv
    eval/       err_dist.csv summary.csv <cell>_s<seed>_metrics.csv <cell>_s<seed>_confusion.csv
    borders/    <loss_mode>_s<seed>_h<h>.csv summary.csv
    report.csv
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from . import borders as bd
from . import segnet as sn
from . import siamese as sm
from .config import RunConfig, save_config
from .container import load_container, save_container
from .mesh_geo import save_mesh
from .sampler import TEST, TRAIN, annotate_distances, build_pairs, load_pairs, sample_patches, save_pairs
from .synthworld import build_world, load_manifest, save_manifest

logger = logging.getLogger(__name__)

STAGES = ("gen-world", "sample", "pairs", "pretrain", "finetune", "eval", "borders", "report")
_STAGE_DIRS = {
    "gen-world": "world",
    "sample": "data",
    "pairs": "pairs",
    "pretrain": "pretrain",
    "finetune": "finetune",
    "eval": "eval",
    "borders": "borders",
    "report": None,
}
STAMP_DIR = ".stages"
LABELED_SEED_OFFSET = 1000


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause):
        self.stage = stage
        super().__init__(f"[{stage}] {cause}")


def _fmt(x) -> str:
    return "" if x is None or not np.isfinite(x) else f"{x:.6f}"


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cells(config: RunConfig) -> list:
    """(init_mode, loss_mode or None, name) for every fine-tuning configuration."""
    out = []
    if sn.RANDOM in config.segnet.init_modes:
        out.append((sn.RANDOM, None, "random"))
    if sn.FROM_SIAMESE in config.segnet.init_modes:
        out += [(sn.FROM_SIAMESE, m, f"from_siamese_{m}") for m in config.siamese.loss_modes]
    return out


class Pipeline:
    def __init__(self, config: RunConfig, out):
        self.config = config.validate()
        self.root = Path(out)
        self._world = None

    # -- paths and bookkeeping ---------------------------------------------

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def stage_outputs(self, stage: str) -> list:
        if stage == "report":
            p = self.path("report.csv")
            return [p] if p.exists() else []
        d = self.path(_STAGE_DIRS[stage])
        return sorted(p for p in d.rglob("*") if p.is_file()) if d.exists() else []

    def _stage_key(self, stage: str) -> str:
        upstream = {}
        for s in STAGES[: STAGES.index(stage)]:
            for p in self.stage_outputs(s):
                upstream[p.relative_to(self.root).as_posix()] = _sha(p)
        blob = json.dumps(
            {"stage": stage, "version": __version__, "config": self.config.to_dict(), "inputs": upstream},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()

    def _stamp_path(self, stage: str) -> Path:
        return self.path(STAMP_DIR, f"{stage}.json")

    def is_current(self, stage: str) -> bool:
        stamp = self._stamp_path(stage)
        if not stamp.exists():
            return False
        rec = json.loads(stamp.read_text())
        if rec.get("key") != self._stage_key(stage):
            return False
        for rel, digest in rec.get("outputs", {}).items():
            p = self.path(rel)
            if not p.exists() or _sha(p) != digest:
                return False
        return True

    def _write_stamp(self, stage: str) -> None:
        outputs = {p.relative_to(self.root).as_posix(): _sha(p) for p in self.stage_outputs(stage)}
        stamp = self._stamp_path(stage)
        stamp.parent.mkdir(parents=True, exist_ok=True)
        stamp.write_text(json.dumps({"key": self._stage_key(stage), "outputs": outputs}, indent=1, sort_keys=True))

    def write_run_info(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.path("config.json"))
        self.path("version.txt").write_text(f"geosiam {__version__}\n")
        self.path("seeds.txt").write_text("\n".join(str(s) for s in self.config.seeds) + "\n")

    def _require(self, *paths) -> None:
        missing = [str(Path(p).relative_to(self.root)) for p in paths if not Path(p).exists()]
        if missing:
            raise FileNotFoundError("missing artifacts: " + ", ".join(missing))

    # -- shared loaders ------------------------------------------------------

    def world(self):
        if self._world is None:
            self._require(self.path("world", "world.json"))
            self._world = build_world(load_manifest(self.path("world", "world.json")))
        return self._world

    def siamese_dir(self, mode: str, seed: int) -> Path:
        return self.path("pretrain", f"{mode}_s{seed}")

    def finetune_dir(self, cell: str, seed: int) -> Path:
        return self.path("finetune", f"{cell}_s{seed}")

    def labeled_split(self, labeled):
        train = labeled.indices(TRAIN)[: self.config.sampler.n_labeled_train]
        return train, labeled.indices(TEST)

    # -- stages --------------------------------------------------------------

    def gen_world(self):
        d = self.path("world")
        d.mkdir(parents=True, exist_ok=True)
        spec = self.config.world
        save_manifest(spec, d / "world.json")
        mesh, world = build_world(spec)
        save_mesh(mesh, d / "mesh.txt")
        self._world = (mesh, world)

    def sample(self):
        mesh, world = self.world()
        sc = self.config.sampler
        d = self.path("data")
        d.mkdir(parents=True, exist_ok=True)
        ds = sample_patches(world, mesh, sc.n_patches, sc.split_fraction, self.config.seed, strip_mm=sc.strip_mm)
        save_container(ds, d / "patches.gspatch")
        lab = sample_patches(
            world, mesh, sc.n_labeled, sc.split_fraction, self.config.seed + LABELED_SEED_OFFSET,
            labeled=True, strip_mm=sc.strip_mm,
        )
        save_container(lab, d / "labeled.gspatch")
        for name, table in (("patches", ds), ("labeled", lab)):
            write_patch_manifest(table, d / f"{name}.csv")

    def pairs(self):
        mesh, _ = self.world()
        self._require(self.path("data", "patches.gspatch"))
        ds = load_container(self.path("data", "patches.gspatch"), mesh)
        sc = self.config.sampler
        d = self.path("pairs")
        d.mkdir(parents=True, exist_ok=True)
        for name, split, n, offset in (("train", TRAIN, sc.n_pairs, 0), ("test", TEST, sc.n_test_pairs, 1)):
            pl = build_pairs(ds, n, sc.gamma, self.config.seed + offset, subset=ds.indices(split))
            pl.validate(ds.hemisphere)
            save_pairs(annotate_distances(pl, ds, mesh), d / f"{name}.pairs")

    def pretrain(self):
        self._require(self.path("data", "patches.gspatch"), self.path("pairs", "train.pairs"), self.path("pairs", "test.pairs"))
        ds = load_container(self.path("data", "patches.gspatch"))
        tr = load_pairs(self.path("pairs", "train.pairs"))
        te = load_pairs(self.path("pairs", "test.pairs"))
        s = self.config.siamese
        for seed in self.config.seeds:
            for mode in s.loss_modes:
                cfg = sm.SiameseConfig(
                    alpha=s.alpha, lam=s.lam, epochs=s.epochs, batch_size=s.batch_size, lr=s.lr,
                    lr_decay=s.lr_decay, decay_every=s.decay_every, loss_mode=mode, seed=seed,
                )
                d = self.siamese_dir(mode, seed)
                d.mkdir(parents=True, exist_ok=True)
                t0 = time.perf_counter()
                params, scaling, hist = sm.train_siamese(
                    ds.images, tr.pairs, tr.y_dist, ds.y_coord, cfg,
                    eval_set=(ds.images, te.pairs, te.y_dist), checkpoint_dir=d,
                )
                sm.save_model(params, scaling, cfg, d / "model.ckpt")
                sm.write_history(hist, d / "history.csv")
                logger.info("pretrain %s seed %d: %.1fs", mode, seed, time.perf_counter() - t0)

    def finetune(self):
        self._require(self.path("data", "labeled.gspatch"))
        lab = load_container(self.path("data", "labeled.gspatch"))
        train, _ = self.labeled_split(lab)
        g = self.config.segnet
        for seed in self.config.seeds:
            for init_mode, mode, name in cells(self.config):
                cfg = sn.FinetuneConfig(
                    phase1_iters=g.phase1_iters, phase2_iters=g.phase2_iters, batch_size=g.batch_size,
                    phase1_lr=g.phase1_lr, phase2_lr=g.phase2_lr, lr_decay=g.lr_decay,
                    milestones=g.milestones, atlas_lr_mult=g.atlas_lr_mult, lam=g.lam,
                    init_mode=init_mode, seed=seed,
                )
                siamese = None
                if init_mode == sn.FROM_SIAMESE:
                    ckpt = self.siamese_dir(mode, seed) / "model.ckpt"
                    self._require(ckpt)
                    siamese = sm.load_model(ckpt)[0]
                t0 = time.perf_counter()
                params, hist = sn.train_seg(
                    lab.images[train], lab.label_images[train], lab.priors[train], cfg, siamese=siamese
                )
                d = self.finetune_dir(name, seed)
                d.mkdir(parents=True, exist_ok=True)
                sn.save_segnet(params, cfg, d / "model.ckpt")
                with open(d / "history.csv", "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["phase", "iter", "loss"])
                    for r in hist:
                        w.writerow([r["phase"], r["iter"], f"{r['loss']:.6f}"])
                logger.info("finetune %s seed %d: %.1fs", name, seed, time.perf_counter() - t0)

    def evaluate(self):
        self._require(self.path("data", "patches.gspatch"), self.path("data", "labeled.gspatch"), self.path("pairs", "test.pairs"))
        ds = load_container(self.path("data", "patches.gspatch"))
        te = load_pairs(self.path("pairs", "test.pairs"))
        lab = load_container(self.path("data", "labeled.gspatch"))
        _, test = self.labeled_split(lab)
        n_cls = lab.priors.shape[1]
        d = self.path("eval")
        d.mkdir(parents=True, exist_ok=True)
        dist_rows = []
        for seed in self.config.seeds:
            for mode in self.config.siamese.loss_modes:
                ckpt = self.siamese_dir(mode, seed) / "model.ckpt"
                self._require(ckpt)
                params, scaling, _ = sm.load_model(ckpt)
                emb = sm.embed(params, ds.images)
                pred = sm.predicted_sq_dist(emb, te.pairs) * scaling.dist_scale
                err = float(np.mean(np.abs(pred - te.y_dist)))
                rho = float(spearmanr(pred, te.y_dist)[0])
                dist_rows.append([mode, seed, _fmt(err), _fmt(rho)])
        _write_csv(d / "err_dist.csv", ["loss_mode", "seed", "err_dist", "spearman"], dist_rows)

        summary = []
        for seed in self.config.seeds:
            for _, _, name in cells(self.config):
                ckpt = self.finetune_dir(name, seed) / "model.ckpt"
                self._require(ckpt)
                params, _ = sn.load_segnet(ckpt)
                pred = sn.predict(params, lab.images[test], lab.priors[test])
                rep = sn.evaluate_segmentation(pred, lab.label_images[test], n_cls)
                write_metrics(rep, d / f"{name}_s{seed}_metrics.csv", d / f"{name}_s{seed}_confusion.csv")
                summary.append([name, seed, _fmt(rep.macro_dice), _fmt(rep.err_seg)])
        _write_csv(d / "summary.csv", ["cell", "seed", "macro_dice", "err_seg"], summary)

    def borders(self):
        mesh, world = self.world()
        b = self.config.borders
        d = self.path("borders")
        d.mkdir(parents=True, exist_ok=True)
        rows = []
        for seed in self.config.seeds:
            ckpt = self.siamese_dir(b.loss_mode, seed) / "model.ckpt"
            self._require(ckpt)
            params = sm.load_model(ckpt)[0]
            for h in (0, 1):
                trace = bd.trace_ribbon(world, h, b.spacing_mm)
                prof = bd.block_profile(params, world, trace, b.block)
                det = bd.detect_borders(prof, b.threshold_sigma)
                bd.write_profile_csv(prof, det, d / f"{b.loss_mode}_s{seed}_h{h}.csv")
                recall, fp = bd.match_borders(det, prof.planted_borders, b.tolerance_mm)
                rows.append([seed, h, len(prof.planted_borders), len(det), _fmt(recall), fp])
        _write_csv(d / "summary.csv", ["seed", "hemisphere", "n_planted", "n_detected", "recall", "false_positives"], rows)

    def report(self):
        write_report(self.root, self.config)

    # -- driver ----------------------------------------------------------------

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage unless its stamp is current; returns True if it ran."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if not force and self.is_current(stage):
            logger.info("stage %s is up to date", stage)
            return False
        fn = {
            "gen-world": self.gen_world, "sample": self.sample, "pairs": self.pairs,
            "pretrain": self.pretrain, "finetune": self.finetune, "eval": self.evaluate,
            "borders": self.borders, "report": self.report,
        }[stage]
        t0 = time.perf_counter()
        try:
            fn()
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        self._write_stamp(stage)
        logger.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
        return True


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_patch_manifest(ds, path) -> None:
    """Per-patch table that accompanies each binary container."""
    rows = [
        [int(v), int(h), int(r), f"{o:.2f}", int(sp), *(f"{c:.6f}" for c in yc)]
        for v, h, r, o, sp, yc in zip(ds.vertices, ds.hemisphere, ds.region, ds.obliqueness, ds.split, ds.y_coord)
    ]
    _write_csv(path, ["vertex", "hemisphere", "region", "obliqueness", "split", "y0", "y1", "y2"], rows)


def write_metrics(rep: sn.MetricsReport, metrics_path, confusion_path) -> None:
    cm = rep.confusion
    rows = [
        [c, _fmt(rep.per_class_dice[c]), int(cm[c].sum()), int(cm[:, c].sum())]
        for c in range(len(cm))
    ]
    rows.append(["macro", _fmt(rep.macro_dice), int(cm.sum()), int(cm.sum())])
    rows.append(["err_seg", _fmt(rep.err_seg), "", ""])
    _write_csv(metrics_path, ["class", "dice", "truth_pixels", "pred_pixels"], rows)
    _write_csv(confusion_path, ["truth"] + [f"pred_{j}" for j in range(len(cm))], [[i] + list(map(int, r)) for i, r in enumerate(cm)])


def _read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _median(values) -> float:
    vals = [float(v) for v in values if v != ""]
    return float(np.median(vals)) if vals else float("nan")


def write_report(root, config: RunConfig) -> Path:
    """Ablation table: one row per Siamese loss mode plus the random-init baseline."""
    root = Path(root)
    needed = [root / "eval" / "err_dist.csv", root / "eval" / "summary.csv"]
    missing = [str(p.relative_to(root)) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError("missing artifacts: " + ", ".join(missing))
    dist = _read_csv(needed[0])
    seg = _read_csv(needed[1])
    rows = []
    for mode in config.siamese.loss_modes:
        err = _median(r["err_dist"] for r in dist if r["loss_mode"] == mode)
        cell = [r for r in seg if r["cell"] == f"from_siamese_{mode}"]
        rows.append([
            f"siamese_{mode}", _fmt(err),
            _fmt(_median(r["macro_dice"] for r in cell)), _fmt(_median(r["err_seg"] for r in cell)),
        ])
    base = [r for r in seg if r["cell"] == "random"]
    if base:
        rows.append([
            "random_init", "",
            _fmt(_median(r["macro_dice"] for r in base)), _fmt(_median(r["err_seg"] for r in base)),
        ])
    out = root / "report.csv"
    _write_csv(out, ["experiment", "err_dist", "macro_dice", "err_seg"], rows)
    return out


def run_pipeline(config: RunConfig, out, stop_after=None, force: bool = False) -> Path:
    """Run every stage in order (skipping up-to-date ones); returns the output directory."""
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"unknown stage {stop_after!r}; choose from {', '.join(STAGES)}")
    pipe = Pipeline(config, out)
    pipe.write_run_info()
    for stage in STAGES:
        pipe.run_stage(stage, force=force)
        if stage == stop_after:
            break
    return pipe.root
