"""Self-supervised Siamese distance regression.

A convolutional branch ``f`` maps a patch to a 32-d embedding.  The squared
Euclidean distance between two embeddings regresses the geodesic distance
between the patches, and an extra dense head ``d`` regresses each patch's
(hemisphere-mirrored) inflated-surface coordinate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from ._validation import check_images, check_pairs

logger = logging.getLogger(__name__)

DIST_ONLY = "dist_only"
COORD_ONLY = "coord_only"
COMBINED = "combined"
LOSS_MODES = (DIST_ONLY, COORD_ONLY, COMBINED)

EMBED_DIM = 32
DEFAULT_CHANNELS = (8, 16, 32, 32)

# fixed affine map of [0, 1] intensities to roughly zero-mean inputs
INPUT_SHIFT = 0.7
INPUT_SCALE = 4.0

# coordinates are expressed in units this many times coarser than distances,
# which keeps the coordinate head small relative to the distance term
COORD_UNIT_FACTOR = 3.0


@dataclass
class SiameseConfig:
    alpha: float = 10.0
    lam: float = 0.001
    epochs: int = 5
    batch_size: int = 8
    lr: float = 0.005
    lr_decay: float = 2.0
    decay_every: int = 1
    loss_mode: str = COMBINED
    channels: tuple = DEFAULT_CHANNELS
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        self.channels = tuple(int(c) for c in self.channels)

    @property
    def schedule(self) -> ad.LrSchedule:
        return ad.LrSchedule(self.lr, decay_factor=self.lr_decay, decay_every=self.decay_every)

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.loss_mode == DIST_ONLY else self.alpha


# -- network -----------------------------------------------------------------


def conv_names(n_layers: int) -> list:
    return [name for i in range(n_layers) for name in (f"conv{i}.w", f"conv{i}.b")]


def init_branch(params: ad.ParamStore, rng, channels=DEFAULT_CHANNELS, in_channels=1, prefix=""):
    """Add a stride-2 3x3 conv stack (He-uniform weights, zero biases)."""
    c_in = in_channels
    for i, c in enumerate(channels):
        bound = np.sqrt(6.0 / (c_in * 9))
        params.add(f"{prefix}conv{i}.w", rng.uniform(-bound, bound, size=(c, c_in, 3, 3)))
        params.add(f"{prefix}conv{i}.b", np.zeros(c))
        c_in = c
    return params


def init_siamese(seed: int = 0, channels=DEFAULT_CHANNELS) -> ad.ParamStore:
    rng = np.random.default_rng(seed)
    params = init_branch(ad.ParamStore(), rng, channels)
    c = channels[-1]
    bound = np.sqrt(3.0 / c)
    params.add("embed.w", rng.uniform(-bound, bound, size=(c, EMBED_DIM)), exempt=True)
    params.add("embed.b", np.zeros(EMBED_DIM), exempt=True)
    bound = np.sqrt(3.0 / EMBED_DIM)
    params.add("coord.w", rng.uniform(-bound, bound, size=(EMBED_DIM, 3)), exempt=True)
    params.add("coord.b", np.zeros(3), exempt=True)
    return params


def prepare_input(images) -> ad.Tensor:
    x = (np.asarray(images, dtype=np.float32) - INPUT_SHIFT) * INPUT_SCALE
    return ad.Tensor(x[:, None])


def conv_stack(params: ad.ParamStore, x: ad.Tensor, prefix: str = "") -> list:
    """Activations after each ReLU of the stride-2 conv stack."""
    feats = []
    i = 0
    while f"{prefix}conv{i}.w" in params:
        x = ad.relu(ad.conv2d(x, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"], stride=2))
        feats.append(x)
        i += 1
    return feats


def embed_tensor(params: ad.ParamStore, images) -> ad.Tensor:
    x = images if isinstance(images, ad.Tensor) else prepare_input(images)
    top = conv_stack(params, x)[-1]
    return ad.dense(ad.global_avg_pool(top), params["embed.w"], params["embed.b"])


def coord_tensor(params: ad.ParamStore, f: ad.Tensor) -> ad.Tensor:
    return ad.dense(f, params["coord.w"], params["coord.b"])


def embed(params: ad.ParamStore, images, batch: int = 256) -> np.ndarray:
    """f(x) for a stack of patches, as a float32 ``(n, 32)`` array."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        return embed(params, images[None], batch)[0]
    out = [embed_tensor(params, images[i:i + batch]).data for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, EMBED_DIM), np.float32)


# -- losses ------------------------------------------------------------------


def dist_terms(f1: ad.Tensor, f2: ad.Tensor, y_dist) -> ad.Tensor:
    """Per-pair ``| ||f1 - f2||^2 - y |``."""
    sq = ad.tsum(ad.square(f1 - f2), axis=1)
    return ad.tabs(sq - np.asarray(y_dist, dtype=f1.dtype))


def coord_terms(pred: ad.Tensor, y_coord) -> ad.Tensor:
    """Per-sample L1 norm of the coordinate error."""
    return ad.tsum(ad.tabs(pred - np.asarray(y_coord, dtype=pred.dtype)), axis=1)


def loss_dist(f1, f2, y_dist) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    return float(abs(np.sum((f1 - f2) ** 2) - y_dist))


def loss_coord(f, head, y_coord) -> float:
    """L1 coordinate error of ``head``; ``head`` is a ParamStore with ``coord.*`` entries."""
    w = head["coord.w"].data.astype(np.float64)
    b = head["coord.b"].data.astype(np.float64)
    pred = np.asarray(f, dtype=np.float64) @ w + b
    return float(np.sum(np.abs(pred - np.asarray(y_coord, dtype=np.float64))))


def total_loss(params, x1, x2, y_dist, c1, c2, config: SiameseConfig, with_penalty: bool = True) -> ad.Tensor:
    """Batch-mean of distance and weighted coordinate terms, plus the L2 penalty.

    ``y_dist``, ``c1`` and ``c2`` must already be in network units.
    """
    n = len(x1)
    both = np.concatenate([np.asarray(x1, np.float32), np.asarray(x2, np.float32)])
    f = embed_tensor(params, both)
    f1, f2 = f[:n], f[n:]
    terms = None
    if config.loss_mode != COORD_ONLY:
        terms = dist_terms(f1, f2, y_dist)
    alpha = config.effective_alpha
    if alpha > 0:
        pred = coord_tensor(params, f)
        ct = coord_terms(pred[:n], c1) + coord_terms(pred[n:], c2)
        ct = ad.mul(ct, alpha)
        terms = ct if terms is None else terms + ct
    loss = ad.mean(terms)
    if with_penalty and config.lam > 0:
        pen = None
        for name, p in params.items():
            if p.trainable and not p.weight_decay_exempt:
                s = ad.tsum(ad.square(p.tensor))
                pen = s if pen is None else pen + s
        if pen is not None:
            loss = loss + ad.mul(pen, config.lam)
    return loss


# -- training ----------------------------------------------------------------


@dataclass
class Scaling:
    """Map between mm and network units: ``net = (mm - offset) / scale``."""

    dist_scale: float
    coord_offset: tuple
    coord_scale: float = 1.0

    def dist_to_net(self, y):
        return np.asarray(y, dtype=np.float64) / self.dist_scale

    def coord_to_net(self, c):
        return (np.asarray(c, dtype=np.float64) - np.asarray(self.coord_offset)) / self.coord_scale

    def coord_to_mm(self, c):
        return np.asarray(c, dtype=np.float64) * self.coord_scale + np.asarray(self.coord_offset)


def fit_scaling(y_dist, coords) -> Scaling:
    y = np.asarray(y_dist, dtype=np.float64)
    med = float(np.median(y[y > 0])) if np.any(y > 0) else 1.0
    offset = tuple(float(v) for v in np.mean(coords, axis=0)) if coords is not None else (0.0, 0.0, 0.0)
    return Scaling(med, offset, COORD_UNIT_FACTOR * med)


def predicted_sq_dist(emb, idx) -> np.ndarray:
    e = np.asarray(emb, dtype=np.float64)
    return np.sum((e[idx[:, 0]] - e[idx[:, 1]]) ** 2, axis=1)


def eval_err_dist(params, images, idx, y_dist, scaling: Scaling) -> float:
    """Mean absolute error (mm) between predicted and true pair distances."""
    idx = np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("empty test set")
    emb = embed(params, images)
    pred = predicted_sq_dist(emb, idx) * scaling.dist_scale
    return float(np.mean(np.abs(pred - np.asarray(y_dist))))


class TrainingError(RuntimeError):
    pass


def train_siamese(
    images,
    idx,
    y_dist,
    coords,
    config: SiameseConfig,
    *,
    eval_set=None,
    checkpoint_dir=None,
    params: Optional[ad.ParamStore] = None,
):
    """SGD over pairs; returns ``(params, scaling, history)``.

    ``eval_set`` is ``(images, idx, y_dist)`` for held-out err_dist per epoch.
    """
    images = np.asarray(images, dtype=np.float32)
    idx = np.asarray(idx, dtype=np.int64)
    y_dist = np.asarray(y_dist, dtype=np.float64)
    coords = np.zeros((len(images), 3)) if coords is None else np.asarray(coords, dtype=np.float64)
    scaling = fit_scaling(y_dist, coords)
    y_net = scaling.dist_to_net(y_dist)
    c_net = scaling.coord_to_net(coords)
    if params is None:
        params = init_siamese(config.seed, config.channels)
    schedule = config.schedule
    history = []
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(idx))
        losses = []
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            a_i, b_i = idx[b, 0], idx[b, 1]
            params.zero_grad()
            loss = total_loss(
                params, images[a_i], images[b_i], y_net[b], c_net[a_i], c_net[b_i], config, with_penalty=False
            )
            value = loss.item() + config.lam * params.l2_penalty()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            ad.sgd_step(params, schedule, epoch, weight_decay=config.lam)
            losses.append(value)
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "err_dist": float("nan")}
        if eval_set is not None:
            row["err_dist"] = eval_err_dist(params, eval_set[0], eval_set[1], eval_set[2], scaling)
        history.append(row)
        logger.info("epoch %d loss %.4f err_dist %.3f", epoch, row["train_loss"], row["err_dist"])
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_model(params, scaling, config, Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
    return params, scaling, history


def save_model(params, scaling: Scaling, config: SiameseConfig, path) -> None:
    meta = {"kind": "siamese", "scaling": asdict(scaling), "config": asdict(config)}
    ad.save_checkpoint(params, path, meta)


def load_model(path):
    params, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "siamese":
        raise ValueError(f"{path} is not a Siamese checkpoint")
    s = meta["scaling"]
    scaling = Scaling(s["dist_scale"], tuple(s["coord_offset"]), s["coord_scale"])
    return params, scaling, SiameseConfig(**meta["config"])


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "err_dist"])
        for row in history:
            w.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{row['err_dist']:.6f}"])


# -- estimator ---------------------------------------------------------------


class SiameseDistanceRegressor(TransformerMixin, BaseEstimator):
    """Embed patches so that squared embedding distances regress geodesic distances.

    ``fit`` takes a stack of patches, pairs ``(a, b, y_dist)`` indexing into it
    and optionally each patch's mirrored inflated coordinate.  ``transform``
    returns the 32-d embeddings.
    """

    def __init__(
        self,
        alpha=10.0,
        lam=0.001,
        loss_mode=COMBINED,
        epochs=5,
        batch_size=8,
        lr=0.005,
        lr_decay=2.0,
        decay_every=1,
        channels=DEFAULT_CHANNELS,
        random_state=0,
    ):
        self.alpha = alpha
        self.lam = lam
        self.loss_mode = loss_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.channels = channels
        self.random_state = random_state

    def _config(self) -> SiameseConfig:
        return SiameseConfig(
            alpha=self.alpha, lam=self.lam, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, lr_decay=self.lr_decay, decay_every=self.decay_every,
            loss_mode=self.loss_mode, channels=self.channels, seed=int(self.random_state or 0),
        )

    def fit(self, X, pairs, coords=None, *, eval_set=None, checkpoint_dir=None):
        X = check_images(X)
        idx, y = check_pairs(pairs, len(X))
        config = self._config()
        if coords is None and config.effective_alpha > 0:
            raise ValueError(f"loss_mode={config.loss_mode!r} needs coords")
        if coords is not None:
            coords = np.asarray(coords, dtype=np.float64)
            if coords.shape != (len(X), 3):
                raise ValueError(f"coords must have shape ({len(X)}, 3), got {coords.shape}")
        ev = None
        if eval_set is not None:
            Xe = check_images(eval_set[0], X.shape[1], name="eval_set images")
            ev = (Xe, *check_pairs(eval_set[1], len(Xe), name="eval_set pairs"))
        self.params_, self.scaling_, self.history_ = train_siamese(
            X, idx, y, coords, config, eval_set=ev, checkpoint_dir=checkpoint_dir
        )
        self.patch_px_ = X.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "SiameseDistanceRegressor":
        params, scaling, config = load_model(path)
        est = cls(
            alpha=config.alpha, lam=config.lam, loss_mode=config.loss_mode, epochs=config.epochs,
            batch_size=config.batch_size, lr=config.lr, lr_decay=config.lr_decay,
            decay_every=config.decay_every, channels=config.channels, random_state=config.seed,
        )
        est.params_, est.scaling_, est.history_ = params, scaling, []
        est.patch_px_ = None
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_model(self.params_, self.scaling_, self._config(), path)

    def transform(self, X):
        check_is_fitted(self, "params_")
        return embed(self.params_, check_images(X, self.patch_px_))

    def predict_coords(self, X):
        """Predicted inflated-surface coordinates in mm (right hemisphere mirrored)."""
        check_is_fitted(self, "params_")
        f = ad.Tensor(self.transform(X))
        return self.scaling_.coord_to_mm(coord_tensor(self.params_, f).data)

    def predict_distance(self, X1, X2):
        """Predicted geodesic distance in mm between aligned patch stacks."""
        e1, e2 = self.transform(X1).astype(np.float64), self.transform(X2).astype(np.float64)
        return np.sum((e1 - e2) ** 2, axis=1) * self.scaling_.dist_scale

    def err_dist(self, X, pairs) -> float:
        check_is_fitted(self, "params_")
        X = check_images(X, self.patch_px_)
        idx, y = check_pairs(pairs, len(X))
        return eval_err_dist(self.params_, X, idx, y, self.scaling_)

    def score(self, X, pairs):
        """Negative err_dist, so that larger is better."""
        return -self.err_dist(X, pairs)
