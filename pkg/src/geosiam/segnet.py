"""Area segmentation with a two-branch encoder-decoder network.

The texture branch has exactly the Siamese conv stack's parameter shapes, so it
can start from pretrained weights.  A second, smaller branch reads the atlas
prior maps.  The decoder upsamples the joined bottom features back to patch
resolution, concatenating skip features from both branches at every scale.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._validation import check_images, check_label_images
from .siamese import DEFAULT_CHANNELS, conv_stack, prepare_input

logger = logging.getLogger(__name__)

RANDOM = "random"
FROM_SIAMESE = "from_siamese"
INIT_MODES = (RANDOM, FROM_SIAMESE)

TEXTURE = "tex."
ATLAS = "atlas."
ATLAS_CHANNELS = (4, 8, 8, 8)
DECODER_WIDTH = 16


class TransferError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    """Two-phase schedule: phase 1 silences the atlas input, phase 2 feeds it."""

    phase1_iters: int = 800
    phase2_iters: int = 1000
    batch_size: int = 8
    phase1_lr: float = 0.01
    phase2_lr: float = 0.005
    lr_decay: float = 2.0
    milestones: tuple = (300, 500, 600)
    atlas_lr_mult: float = 10.0
    lam: float = 0.001
    init_mode: str = RANDOM
    channels: tuple = DEFAULT_CHANNELS
    atlas_channels: tuple = ATLAS_CHANNELS
    seed: int = 0

    def __post_init__(self):
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.atlas_lr_mult <= 0:
            raise ValueError("atlas_lr_mult must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        self.channels = tuple(int(c) for c in self.channels)
        self.atlas_channels = tuple(int(c) for c in self.atlas_channels)
        self.milestones = tuple(int(m) for m in self.milestones)

    def schedule(self, phase: int) -> ad.LrSchedule:
        lr = self.phase1_lr if phase == 1 else self.phase2_lr
        return ad.LrSchedule(lr, decay_factor=self.lr_decay, milestones=self.milestones)


# -- network -----------------------------------------------------------------


def _conv_init(params, rng, name, c_out, c_in, k=3):
    bound = np.sqrt(6.0 / (c_in * k * k))
    params.add(f"{name}.w", rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
    params.add(f"{name}.b", np.zeros(c_out))


def init_segnet(seed: int, n_classes: int, channels=DEFAULT_CHANNELS, atlas_channels=ATLAS_CHANNELS) -> ad.ParamStore:
    if len(atlas_channels) != len(channels):
        raise ValueError("atlas branch needs one stage per texture stage")
    rng = np.random.default_rng([seed, 7])
    params = ad.ParamStore()
    c_in = 1
    for i, c in enumerate(channels):
        _conv_init(params, rng, f"{TEXTURE}conv{i}", c, c_in)
        c_in = c
    c_in = n_classes
    for i, c in enumerate(atlas_channels):
        _conv_init(params, rng, f"{ATLAS}conv{i}", c, c_in)
        c_in = c
    width = channels[-1] + atlas_channels[-1]
    for lvl in range(len(channels) - 2, -1, -1):
        out = max(DECODER_WIDTH, channels[lvl])
        _conv_init(params, rng, f"dec{lvl}", out, width + channels[lvl] + atlas_channels[lvl])
        width = out
    _conv_init(params, rng, "dec_top", DECODER_WIDTH, width + n_classes)
    _conv_init(params, rng, "cls", n_classes, DECODER_WIDTH, k=1)
    return params


def texture_names(n_layers: int) -> list:
    return [f"{TEXTURE}conv{i}.{s}" for i in range(n_layers) for s in ("w", "b")]


def init_from_siamese(siamese, n_classes: int, seed: int = 0, atlas_channels=ATLAS_CHANNELS) -> ad.ParamStore:
    """Fresh SegNet whose texture branch copies a Siamese conv stack.

    ``siamese`` is a ParamStore, a fitted SiameseDistanceRegressor or a
    checkpoint path.  Embedding and coordinate heads are dropped.
    """
    if hasattr(siamese, "params_"):
        siamese = siamese.params_
    elif not isinstance(siamese, ad.ParamStore):
        siamese, _ = ad.load_checkpoint(siamese)
    n_layers = 0
    while f"conv{n_layers}.w" in siamese:
        n_layers += 1
    if n_layers == 0:
        raise TransferError("checkpoint has no conv stack")
    channels = tuple(int(siamese[f"conv{i}.w"].shape[0]) for i in range(n_layers))
    params = init_segnet(seed, n_classes, channels, atlas_channels)
    for i in range(n_layers):
        for s in ("w", "b"):
            src, dst = siamese[f"conv{i}.{s}"], params[f"{TEXTURE}conv{i}.{s}"]
            if src.shape != dst.shape:
                raise TransferError(f"conv{i}.{s}: checkpoint shape {src.shape} != {dst.shape}")
            dst.data[...] = src.data
    return params


def n_classes_of(params: ad.ParamStore) -> int:
    return int(params["cls.w"].shape[0])


def forward(params: ad.ParamStore, images, priors) -> ad.Tensor:
    """Per-pixel logits ``(n, n_classes, P, P)``."""
    x = prepare_input(images)
    a = ad.Tensor(np.asarray(priors, dtype=np.float32))
    tex = conv_stack(params, x, TEXTURE)
    atl = conv_stack(params, a, ATLAS)
    h = ad.concat_channels(tex[-1], atl[-1])
    for lvl in range(len(tex) - 2, -1, -1):
        h = ad.upsample2(h)
        h = ad.concat_channels(ad.concat_channels(h, tex[lvl]), atl[lvl])
        h = ad.relu(ad.conv2d(h, params[f"dec{lvl}.w"], params[f"dec{lvl}.b"]))
    h = ad.concat_channels(ad.upsample2(h), a)
    h = ad.relu(ad.conv2d(h, params["dec_top.w"], params["dec_top.b"]))
    return ad.conv2d(h, params["cls.w"], params["cls.b"])


def predict_proba(params: ad.ParamStore, images, priors, batch: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    priors = np.asarray(priors, dtype=np.float32)
    out = [
        ad.softmax(forward(params, images[i:i + batch], priors[i:i + batch]).data, axis=1)
        for i in range(0, len(images), batch)
    ]
    return np.concatenate(out)


def predict(params: ad.ParamStore, images, priors, batch: int = 64) -> np.ndarray:
    """Argmax label images; ``np.argmax`` keeps the lowest class id on ties."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    if single:
        images, priors = images[None], np.asarray(priors)[None]
    priors = np.asarray(priors, dtype=np.float32)
    n_cls = n_classes_of(params)
    if priors.shape != (len(images), n_cls) + images.shape[1:]:
        raise ValueError(f"priors shape {priors.shape} does not match images {images.shape} and {n_cls} classes")
    out = [
        forward(params, images[i:i + batch], priors[i:i + batch]).data.argmax(axis=1)
        for i in range(0, len(images), batch)
    ]
    labels = np.concatenate(out).astype(np.int64)
    return labels[0] if single else labels


# -- training ----------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


def _batches(n: int, batch: int, iters: int, seed: int, phase: int):
    """Iteration-indexed minibatches from successive seeded permutations."""
    sweep, order, pos = 0, None, n
    for _ in range(iters):
        if pos + batch > n:
            order = np.random.default_rng([seed, phase, sweep]).permutation(n)
            sweep, pos = sweep + 1, 0
        yield order[pos:pos + batch]
        pos += batch


def train_seg(images, labels, priors, config: FinetuneConfig, *, siamese=None, params=None):
    """Two-phase SGD on per-pixel cross-entropy; returns ``(params, history)``.

    ``history`` has one row per iteration: ``{phase, iter, loss}``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    priors = np.asarray(priors, dtype=np.float32)
    n_cls = priors.shape[1]
    if params is None:
        if config.init_mode == FROM_SIAMESE:
            if siamese is None:
                raise ValueError("init_mode='from_siamese' needs a Siamese model")
            params = init_from_siamese(siamese, n_cls, config.seed, config.atlas_channels)
        else:
            params = init_segnet(config.seed, n_cls, config.channels, config.atlas_channels)
    for name in params.names(ATLAS):
        params.param(name).lr_mult = config.atlas_lr_mult
    batch = min(config.batch_size, len(images))
    zeros = np.zeros((batch,) + priors.shape[1:], np.float32)
    history = []
    for phase, iters in ((1, config.phase1_iters), (2, config.phase2_iters)):
        schedule = config.schedule(phase)
        for it, b in enumerate(_batches(len(images), batch, iters, config.seed, phase)):
            params.zero_grad()
            logits = forward(params, images[b], zeros if phase == 1 else priors[b])
            loss = ad.softmax_ce_loss(logits, labels[b])
            value = loss.item() + config.lam * params.l2_penalty()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss in phase {phase}, iteration {it}")
            loss.backward()
            ad.sgd_step(params, schedule, it, weight_decay=config.lam)
            history.append({"phase": phase, "iter": it, "loss": float(value)})
        if iters:
            tail = [r["loss"] for r in history[-min(iters, 50):]]
            logger.info("phase %d done, recent loss %.4f", phase, float(np.mean(tail)))
    return params, history


def save_segnet(params, config: FinetuneConfig, path) -> None:
    ad.save_checkpoint(params, path, {"kind": "segnet", "config": asdict(config)})


def load_segnet(path):
    params, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "segnet":
        raise ValueError(f"{path} is not a segmentation checkpoint")
    return params, FinetuneConfig(**meta["config"])


# -- metrics -----------------------------------------------------------------


def _same_shape(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred.astype(np.int64), truth.astype(np.int64)


def confusion(pred, truth, n_classes: Optional[int] = None) -> np.ndarray:
    """Counts with truth along rows and prediction along columns."""
    pred, truth = _same_shape(pred, truth)
    if n_classes is None:
        n_classes = int(max(pred.max(initial=-1), truth.max(initial=-1))) + 1
    flat = truth.ravel() * n_classes + pred.ravel()
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def dice_from_confusion(cm) -> tuple:
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    per = np.full(len(cm), np.nan)
    present = denom > 0
    per[present] = 2 * tp[present] / denom[present]
    macro = float(np.mean(per[present])) if present.any() else float("nan")
    return per, macro


def dice(pred, truth, n_classes: Optional[int] = None) -> tuple:
    """Per-class Dice (NaN where a class is absent from both) and their mean."""
    return dice_from_confusion(confusion(pred, truth, n_classes))


def err_seg(pred, truth) -> float:
    """Distance-weighted misclassification rate per 100 pixels.

    A pixel predicted as ``c`` but labelled otherwise costs its Euclidean
    distance to the nearest truth pixel of class ``c``, or the image diagonal
    when ``c`` does not occur in the truth.
    """
    pred, truth = _same_shape(pred, truth)
    if pred.size == 0:
        return 0.0
    wrong = pred != truth
    if not wrong.any():
        return 0.0
    diag = float(np.sqrt(np.sum(np.square(truth.shape))))
    total = 0.0
    for c in np.unique(pred[wrong]):
        sel = wrong & (pred == c)
        mask = truth == c
        if mask.any():
            dist = ndimage.distance_transform_edt(~mask)
            total += float(dist[sel].sum())
        else:
            total += diag * int(sel.sum())
    return 100.0 * total / pred.size


@dataclass
class MetricsReport:
    per_class_dice: np.ndarray
    macro_dice: float
    err_seg: float
    confusion: np.ndarray
    err_dist: float = float("nan")
    extra: dict = field(default_factory=dict)


def evaluate_segmentation(pred, truth, n_classes: int, err_dist: float = float("nan")) -> MetricsReport:
    """Dice over the pooled confusion matrix; err_seg averaged per patch."""
    pred, truth = _same_shape(pred, truth)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    cm = confusion(pred, truth, n_classes)
    per, macro = dice_from_confusion(cm)
    es = float(np.mean([err_seg(p, t) for p, t in zip(pred, truth)])) if len(pred) else float("nan")
    return MetricsReport(per, macro, es, cm, err_dist)


# -- estimator ---------------------------------------------------------------


class PatchSegmenter(BaseEstimator):
    """Per-pixel area classifier over patches and atlas prior maps.

    ``fit(X, y, priors=...)`` with label images ``y``.  Pass ``init_mode=
    'from_siamese'`` and a fitted Siamese model (or checkpoint path) as
    ``siamese`` to start the texture branch from pretrained weights.
    """

    def __init__(
        self,
        init_mode=RANDOM,
        siamese=None,
        phase1_iters=800,
        phase2_iters=1000,
        batch_size=8,
        phase1_lr=0.01,
        phase2_lr=0.005,
        lr_decay=2.0,
        milestones=(300, 500, 600),
        atlas_lr_mult=10.0,
        lam=0.001,
        channels=DEFAULT_CHANNELS,
        atlas_channels=ATLAS_CHANNELS,
        random_state=0,
    ):
        self.init_mode = init_mode
        self.siamese = siamese
        self.phase1_iters = phase1_iters
        self.phase2_iters = phase2_iters
        self.batch_size = batch_size
        self.phase1_lr = phase1_lr
        self.phase2_lr = phase2_lr
        self.lr_decay = lr_decay
        self.milestones = milestones
        self.atlas_lr_mult = atlas_lr_mult
        self.lam = lam
        self.channels = channels
        self.atlas_channels = atlas_channels
        self.random_state = random_state

    def _config(self) -> FinetuneConfig:
        return FinetuneConfig(
            phase1_iters=self.phase1_iters, phase2_iters=self.phase2_iters, batch_size=self.batch_size,
            phase1_lr=self.phase1_lr, phase2_lr=self.phase2_lr, lr_decay=self.lr_decay,
            milestones=self.milestones, atlas_lr_mult=self.atlas_lr_mult, lam=self.lam,
            init_mode=self.init_mode, channels=self.channels, atlas_channels=self.atlas_channels,
            seed=int(self.random_state or 0),
        )

    def _check_priors(self, priors, X, n_classes=None):
        if priors is None:
            raise ValueError("atlas priors are required")
        priors = np.asarray(priors, dtype=np.float32)
        if priors.ndim != 4 or priors.shape[0] != len(X) or priors.shape[2:] != X.shape[1:]:
            raise ValueError(f"priors must have shape ({len(X)}, n_classes, {X.shape[1]}, {X.shape[2]}), got {priors.shape}")
        if n_classes is not None and priors.shape[1] != n_classes:
            raise ValueError(f"priors have {priors.shape[1]} classes, model has {n_classes}")
        if not np.all(np.isfinite(priors)):
            raise ValueError("priors contain non-finite values")
        return priors

    def fit(self, X, y, priors=None):
        X = check_images(X)
        priors = self._check_priors(priors, X)
        y = check_label_images(y, X.shape, priors.shape[1])
        self.params_, self.history_ = train_seg(X, y, priors, self._config(), siamese=self.siamese)
        self.n_classes_ = priors.shape[1]
        self.patch_px_ = X.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "PatchSegmenter":
        params, config = load_segnet(path)
        kw = asdict(config)
        kw["random_state"] = kw.pop("seed")
        est = cls(**kw)
        est.params_, est.history_ = params, []
        est.n_classes_ = n_classes_of(params)
        est.patch_px_ = None
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_segnet(self.params_, self._config(), path)

    def predict_proba(self, X, priors):
        check_is_fitted(self, "params_")
        X = check_images(X, self.patch_px_)
        return predict_proba(self.params_, X, self._check_priors(priors, X, self.n_classes_))

    def predict(self, X, priors):
        check_is_fitted(self, "params_")
        X = check_images(X, self.patch_px_)
        return predict(self.params_, X, self._check_priors(priors, X, self.n_classes_))

    def evaluate(self, X, y, priors, err_dist=float("nan")) -> MetricsReport:
        pred = self.predict(X, priors)
        y = check_label_images(y, pred.shape, self.n_classes_)
        return evaluate_segmentation(pred, y, self.n_classes_, err_dist)

    def score(self, X, y, priors):
        """Macro Dice over the pooled confusion matrix."""
        return self.evaluate(X, y, priors).macro_dice
