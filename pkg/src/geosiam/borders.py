"""Feature-distance profiles along the cortical ribbon and border detection.

Patches are embedded at evenly spaced points along the mid-line of a sheet.
Non-overlapping blocks of consecutive embeddings are averaged, and the squared
distance between neighbouring block means forms a profile whose peaks should
sit on area borders.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .mesh_geo import nearest_vertices
from .synthworld import WorldSpec, WorldState, render_at

# noise/rotation keys for trace patches live far above any vertex id
TRACE_KEY_BASE = 1 << 40


@dataclass(frozen=True)
class RibbonTrace:
    hemisphere: int
    u: np.ndarray
    v: float
    positions: np.ndarray
    vertices: np.ndarray
    spacing: float
    keys: np.ndarray
    flipped: bool = False

    def __len__(self):
        return len(self.u)

    def reversed(self) -> "RibbonTrace":
        """The same points walked from the other end, positions restarting at 0."""
        total = self.positions[-1]
        return replace(
            self, u=self.u[::-1], positions=total - self.positions[::-1],
            vertices=self.vertices[::-1], keys=self.keys[::-1], flipped=not self.flipped,
        )


@dataclass(frozen=True)
class BorderProfile:
    positions: np.ndarray
    values: np.ndarray
    planted_borders: np.ndarray
    block: int


def _arc_table(world: WorldState, n: int = 20001):
    lu = world.spec.sheet_size[0]
    uu = np.linspace(0.0, lu, n)
    speed = np.sqrt(1 + world.fold_dx(uu) ** 2)
    s = np.concatenate([[0.0], np.cumsum((speed[1:] + speed[:-1]) / 2 * np.diff(uu))])
    return uu, s


def trace_ribbon(world: WorldState, hemisphere: int, spacing: float = 0.2, v=None) -> RibbonTrace:
    """Points every ``spacing`` mm of arc length along the line ``v`` (default: mid-line)."""
    lu, lv = world.spec.sheet_size
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if spacing >= lu:
        raise ValueError(f"spacing {spacing} mm does not fit the {lu} mm sheet")
    v = lv / 2 if v is None else float(v)
    uu, s = _arc_table(world)
    pos = np.arange(0.0, s[-1] + 1e-9, spacing)
    u = np.interp(pos, s, uu)
    pts = world.surface_point(u, np.full_like(u, v), np.full(len(u), hemisphere))
    verts = nearest_vertices(world.mesh, pts)
    keys = TRACE_KEY_BASE + (int(hemisphere) << 20) + np.arange(len(u))
    return RibbonTrace(int(hemisphere), u, v, pos, verts, float(spacing), keys)


def planted_positions(world: WorldState) -> np.ndarray:
    """Arc-length positions of the planted region borders."""
    uu, s = _arc_table(world)
    return np.interp(world.region_borders(), uu, s)


def trace_images(world: WorldState, trace: RibbonTrace) -> np.ndarray:
    n = len(trace)
    imgs, _ = render_at(world, trace.u, np.full(n, trace.v), np.full(n, trace.hemisphere), trace.keys)
    return imgs


def profile_from_embeddings(emb, positions, block: int = 9) -> tuple:
    """``(positions, values)`` of squared distances between consecutive block means."""
    emb = np.asarray(emb, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if block < 1:
        raise ValueError("block must be >= 1")
    n_blocks = len(emb) // block
    if n_blocks < 2:
        raise ValueError(f"trace of {len(emb)} points is shorter than 2 blocks of {block}")
    means = emb[: n_blocks * block].reshape(n_blocks, block, -1).mean(axis=1)
    values = np.sum(np.diff(means, axis=0) ** 2, axis=1)
    edge = np.arange(1, n_blocks) * block
    pos = (positions[edge - 1] + positions[edge]) / 2
    return pos, values


def _embedder(model):
    if hasattr(model, "transform"):
        return model.transform
    if callable(model):
        return model
    from .siamese import embed

    return lambda X: embed(model, X)


def block_profile(model, world: WorldState, trace: RibbonTrace, block: int = 9) -> BorderProfile:
    """Embed the patch at every trace point and profile the block-mean distances.

    ``model`` is a fitted SiameseDistanceRegressor, a Siamese ParamStore or any
    callable mapping an image stack to embeddings.
    """
    emb = _embedder(model)(trace_images(world, trace))
    pos, values = profile_from_embeddings(emb, trace.positions, block)
    planted = planted_positions(world)
    if trace.flipped:
        planted = trace.positions[-1] - planted[::-1]
    return BorderProfile(pos, values, planted, block)


def detect_borders(profile: BorderProfile, threshold_sigma: float = 4.0) -> np.ndarray:
    """Positions of local maxima above ``median + threshold_sigma * MAD``."""
    v = np.asarray(profile.values, dtype=np.float64)
    if v.size == 0:
        return np.zeros(0)
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    thr = med + threshold_sigma * mad
    left = np.concatenate([[-np.inf], v[:-1]])
    right = np.concatenate([v[1:], [-np.inf]])
    # strict on the left so a plateau yields its first sample only
    peaks = (v > thr) & (v > left) & (v >= right)
    return np.asarray(profile.positions)[peaks]


def match_borders(detected, planted, tol_mm: float = 1.5) -> tuple:
    """``(recall, false_positives)`` for detections against planted borders."""
    detected = np.asarray(detected, dtype=np.float64)
    planted = np.asarray(planted, dtype=np.float64)
    if planted.size == 0:
        return float("nan"), int(detected.size)
    if detected.size == 0:
        return 0.0, 0
    d = np.abs(detected[:, None] - planted[None, :])
    recall = float(np.mean(d.min(axis=0) <= tol_mm))
    false_pos = int(np.sum(d.min(axis=1) > tol_mm))
    return recall, false_pos


def write_profile_csv(profile: BorderProfile, detected, path) -> None:
    """CSV ``position_mm,value,is_detected,is_planted_border``.

    A planted border is flagged on the profile row nearest to it.
    """
    pos = np.asarray(profile.positions)
    det = np.zeros(len(pos), dtype=bool)
    for d in np.atleast_1d(detected):
        det[np.argmin(np.abs(pos - d))] = True
    planted = np.zeros(len(pos), dtype=bool)
    for b in profile.planted_borders:
        planted[np.argmin(np.abs(pos - b))] = True
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position_mm", "value", "is_detected", "is_planted_border"])
        for p, v, a, b in zip(pos, profile.values, det, planted):
            w.writerow([f"{p:.4f}", f"{v:.8g}", int(a), int(b)])


def stress_world_spec(seed: int = 0) -> WorldSpec:
    """Tighter, deeper folds, where curvature alone produces profile peaks."""
    return WorldSpec(seed=seed, fold_amplitude=2.5, fold_frequency=4.0)
