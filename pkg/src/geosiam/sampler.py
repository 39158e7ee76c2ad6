"""Patch sampling from non-oblique cortex and power-law pair construction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .mesh_geo import SurfaceMesh, geodesic_distances, nearest_vertices, target_coordinates
from .synthworld import WorldState, atlas_priors, render_at

logger = logging.getLogger(__name__)

TRAIN = 0
TEST = 1

OBLIQUE_WINDOW = (45.0, 135.0)


class SamplingError(RuntimeError):
    pass


@dataclass(eq=False)
class PatchDataset:
    """Column-oriented patch table.

    ``images`` is ``(n, P, P)`` float32; ``label_images`` and ``priors`` are
    only present for labelled datasets.
    """

    vertices: np.ndarray
    hemisphere: np.ndarray
    region: np.ndarray
    obliqueness: np.ndarray
    split: np.ndarray
    y_coord: np.ndarray
    locations: np.ndarray
    images: Optional[np.ndarray] = None
    label_images: Optional[np.ndarray] = None
    priors: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.vertices)

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx)
        kw = {}
        for name in self.__dataclass_fields__:
            arr = getattr(self, name)
            kw[name] = None if arr is None else arr[idx]
        return PatchDataset(**kw)


@dataclass(eq=False)
class PairList:
    pairs: np.ndarray
    y_dist: np.ndarray
    degree: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, hemisphere=None) -> None:
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        if np.any(a == b):
            raise SamplingError("self-pair present")
        key = np.sort(self.pairs, axis=1)
        if len(np.unique(key, axis=0)) != len(key):
            raise SamplingError("duplicate unordered pair present")
        if hemisphere is not None and np.any(hemisphere[a] != hemisphere[b]):
            raise SamplingError("cross-hemisphere pair present")
        if np.any(self.y_dist[~np.isnan(self.y_dist)] < 0):
            raise SamplingError("negative distance")
        if self.degree is not None:
            used = np.bincount(self.pairs.ravel(), minlength=len(self.degree))
            if not np.array_equal(used, self.degree):
                raise SamplingError("degree array does not match pairs")


def split_by_strips(u, split_fraction: float, strip_mm: float) -> np.ndarray:
    """Tag whole u-strips as TEST so that a ``split_fraction`` share of strips is held out."""
    k = np.floor(np.asarray(u) / strip_mm).astype(np.int64)
    held = np.floor((k + 1) * split_fraction) > np.floor(k * split_fraction)
    return np.where(held, TEST, TRAIN).astype(np.int8)


def sample_patches(
    world: WorldState,
    mesh: SurfaceMesh,
    n: int,
    split_fraction: float = 1 / 12,
    seed: int = 0,
    *,
    labeled: bool = False,
    render: bool = True,
    strip_mm: float = 0.4,
    window=OBLIQUE_WINDOW,
) -> PatchDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = window
    ok = (world.obliqueness >= lo) & (world.obliqueness <= hi)
    candidates = np.flatnonzero(ok)
    if len(candidates) < n:
        raise SamplingError(
            f"obliqueness filter keeps {len(candidates)} vertices, {n} requested "
            f"(short by {n - len(candidates)})"
        )
    rng = np.random.default_rng(seed)
    verts = rng.choice(candidates, size=n, replace=False)
    uv = world.uv[verts]
    hemi = mesh.hemisphere[verts]
    images = labels = priors = None
    if render:
        images, labels = render_at(world, uv[:, 0], uv[:, 1], hemi, verts, labeled=labeled)
        if labeled:
            priors = atlas_priors(world, verts)
    return PatchDataset(
        vertices=verts.astype(np.int64),
        hemisphere=hemi.astype(np.int64),
        region=mesh.region[verts].astype(np.int64),
        obliqueness=world.obliqueness[verts].astype(np.float64),
        split=split_by_strips(uv[:, 0], split_fraction, strip_mm),
        y_coord=target_coordinates(mesh, verts),
        locations=mesh.vertices[verts].astype(np.float64),
        images=images,
        label_images=labels,
        priors=priors,
    )


# -- pair construction -------------------------------------------------------


def _largest_remainder(weights, total: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    real = weights / weights.sum() * total
    out = np.floor(real).astype(np.int64)
    rem = real - out
    order = np.argsort(-rem, kind="stable")
    out[order[: total - out.sum()]] += 1
    return out


def powerlaw_degrees(n: int, total: int, gamma: float, rng, dmax: Optional[int] = None) -> np.ndarray:
    """Degrees ``>= 1`` drawn from P(d) ~ d^-gamma and rescaled to sum to ``total``."""
    cap = max(1, n - 1)
    dmax = cap if dmax is None else max(1, min(dmax, cap))
    if total < n or total > n * cap:
        raise SamplingError(f"cannot give {n} nodes degrees summing to {total}")
    support = np.arange(1, dmax + 1)
    p = support.astype(float) ** -gamma
    d = rng.choice(support, size=n, p=p / p.sum())
    real = d * (total / d.sum())
    deg = np.clip(np.floor(real).astype(np.int64), 1, cap)
    frac = real - np.floor(real)
    diff = total - deg.sum()
    # largest-remainder rounding, skipping nodes already at the cap or floor
    while diff != 0:
        if diff > 0:
            order = np.lexsort((np.arange(n), -frac))
            order = order[deg[order] < cap]
            step = order[:diff]
            deg[step] += 1
        else:
            order = np.lexsort((np.arange(n), frac, -real))
            order = order[deg[order] > 1]
            step = order[:-diff]
            deg[step] -= 1
        if len(step) == 0:
            raise SamplingError("degree rescaling stalled")
        frac[step] = 0.0
        diff = total - deg.sum()
    return deg


def _match_group(nodes, deg, rng, max_tries: int) -> list:
    stubs = rng.permutation(np.repeat(nodes, deg))
    raw = stubs.reshape(-1, 2)
    good = []
    seen = set()
    bad = []
    for a, b in raw:
        key = (min(a, b), max(a, b))
        if a == b or key in seen:
            bad.append((int(a), int(b)))
        else:
            seen.add(key)
            good.append(key)

    # degree-preserving repair by swapping endpoints with accepted pairs
    tries = 0
    while bad and tries < max_tries and good:
        tries += 1
        x, y = bad[-1]
        j = int(rng.integers(len(good)))
        c, d = good[j]
        if rng.random() < 0.5:
            c, d = d, c
        k1 = (min(x, c), max(x, c))
        k2 = (min(y, d), max(y, d))
        if x == c or y == d or k1 == k2 or k1 in seen or k2 in seen:
            continue
        seen.discard(good[j])
        seen.add(k1)
        seen.add(k2)
        good[j] = k1
        good.append(k2)
        bad.pop()

    # last resort: keep one endpoint, re-draw the other
    node_list = np.asarray(nodes)
    for x, _ in bad:
        for _ in range(max_tries):
            z = int(node_list[rng.integers(len(node_list))])
            key = (min(x, z), max(x, z))
            if z != x and key not in seen:
                seen.add(key)
                good.append(key)
                break
        else:
            raise SamplingError(f"could not place a valid pair for patch {x}")
    return good


def build_pairs(
    dataset,
    n_pairs: int,
    gamma: float = 2.5,
    seed: int = 0,
    *,
    subset=None,
    max_tries: int = 10_000,
) -> PairList:
    """Configuration-model pairs within each hemisphere.

    ``dataset`` is a :class:`PatchDataset` or a per-patch hemisphere array.
    Only patches in ``subset`` (default: all) take part.
    """
    hemisphere = np.asarray(getattr(dataset, "hemisphere", dataset))
    n_total = len(hemisphere)
    if n_total == 0:
        raise SamplingError("empty dataset")
    idx = np.arange(n_total) if subset is None else np.asarray(subset, dtype=np.int64)
    if 2 * n_pairs < len(idx):
        raise SamplingError(f"{n_pairs} pairs cannot cover {len(idx)} patches")
    rng = np.random.default_rng(seed)

    groups = [idx[hemisphere[idx] == h] for h in np.unique(hemisphere[idx])]
    for g in groups:
        if len(g) < 2:
            raise SamplingError("a hemisphere with patches needs at least two of them")
    minimum = np.array([(len(g) + 1) // 2 for g in groups])
    extra = n_pairs - minimum.sum()
    alloc = minimum + (_largest_remainder([len(g) for g in groups], extra) if extra > 0 else 0)
    capacity = np.array([len(g) * (len(g) - 1) // 2 for g in groups])
    if n_pairs > capacity.sum():
        raise SamplingError(f"{n_pairs} distinct pairs impossible among {len(idx)} patches")
    # move any overflow of a small hemisphere to the one with most room
    while np.any(alloc > capacity):
        i = int(np.argmax(alloc - capacity))
        spill = alloc[i] - capacity[i]
        alloc[i] = capacity[i]
        alloc[int(np.argmax(capacity - alloc))] += spill

    pairs = []
    for g, p in zip(groups, alloc):
        dmax = int(np.sqrt(2 * p * len(g))) if len(g) > 2 else None
        deg = powerlaw_degrees(len(g), 2 * int(p), gamma, rng, dmax=dmax)
        pairs.extend(_match_group(g, deg, rng, max_tries))
    arr = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    degree = np.bincount(arr.ravel(), minlength=n_total)
    out = PairList(arr, np.full(len(arr), np.nan), degree)
    out.validate(hemisphere)
    if np.any(degree[idx] < 1):
        raise SamplingError("a patch was left without a partner")
    return out


def annotate_distances(pairs: PairList, dataset: PatchDataset, mesh: SurfaceMesh) -> PairList:
    """Fill ``y_dist`` with edge-graph geodesics between the snapped patch locations."""
    snapped = nearest_vertices(mesh, dataset.locations)
    a = snapped[pairs.pairs[:, 0]]
    b = snapped[pairs.pairs[:, 1]]
    y = geodesic_distances(mesh, a, b)
    return replace(pairs, y_dist=y)


def save_pairs(pairs: PairList, path) -> None:
    lines = [f"pairsv1 {len(pairs)}"]
    lines += [f"{int(a)} {int(b)} {float(y)!r}" for (a, b), y in zip(pairs.pairs, pairs.y_dist)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pairs(path, n_patches: Optional[int] = None) -> PairList:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "pairsv1":
        raise ValueError(f"not a pairs file: {lines[0]!r}")
    n = int(head[1])
    body = [ln.split() for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ValueError(f"header announces {n} pairs, file has {len(body)}")
    arr = np.array([[int(r[0]), int(r[1])] for r in body], dtype=np.int64).reshape(-1, 2)
    y = np.array([float(r[2]) for r in body])
    degree = None
    if n_patches is not None:
        degree = np.bincount(arr.ravel(), minlength=n_patches)
    return PairList(arr, y, degree)
