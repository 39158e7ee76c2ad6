"""``GSPATCH1`` binary patch container.

Layout, little-endian: ``b"GSPATCH1"``, uint32 count, uint16 patch_px,
uint8 flags (1 label images, 2 prior maps), uint8 n_classes, then ``count``
packed records::

    int64 vertex, uint8 hemisphere, int16 region, int32 obliqueness x 100,
    uint8 split, float32 y_coord[3], float32 image[P][P],
    [uint8 label[P][P]], [float32 prior[n_classes][P][P]]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .sampler import PatchDataset

MAGIC = b"GSPATCH1"
_HEADER = struct.Struct("<IHBB")
HAS_LABELS = 1
HAS_PRIORS = 2


class ContainerError(ValueError):
    pass


def record_dtype(patch_px: int, labels: bool, n_classes: int = 0) -> np.dtype:
    fields = [
        ("vertex", "<i8"),
        ("hemisphere", "u1"),
        ("region", "<i2"),
        ("obliqueness", "<i4"),
        ("split", "u1"),
        ("y_coord", "<f4", (3,)),
        ("image", "<f4", (patch_px, patch_px)),
    ]
    if labels:
        fields.append(("label", "u1", (patch_px, patch_px)))
    if n_classes:
        fields.append(("prior", "<f4", (n_classes, patch_px, patch_px)))
    return np.dtype(fields)


def dumps(ds: PatchDataset) -> bytes:
    if ds.images is None:
        raise ContainerError("dataset has no rendered images")
    n, P = len(ds), ds.images.shape[1]
    labels = ds.label_images is not None
    n_classes = 0 if ds.priors is None else ds.priors.shape[1]
    if labels and ds.label_images.size and ds.label_images.max() > 255:
        raise ContainerError("label ids above 255 do not fit the container")
    rec = np.zeros(n, dtype=record_dtype(P, labels, n_classes))
    rec["vertex"] = ds.vertices
    rec["hemisphere"] = ds.hemisphere
    rec["region"] = ds.region
    rec["obliqueness"] = np.rint(np.asarray(ds.obliqueness, dtype=np.float64) * 100)
    rec["split"] = ds.split
    rec["y_coord"] = ds.y_coord
    rec["image"] = ds.images
    if labels:
        rec["label"] = ds.label_images
    if n_classes:
        rec["prior"] = ds.priors
    flags = (HAS_LABELS if labels else 0) | (HAS_PRIORS if n_classes else 0)
    return MAGIC + _HEADER.pack(n, P, flags, n_classes) + rec.tobytes()


def loads(buf: bytes, mesh=None) -> PatchDataset:
    """Parse a container; ``mesh`` (optional) restores patch locations from vertex ids."""
    if buf[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a GSPATCH1 container")
    if len(buf) < len(MAGIC) + _HEADER.size:
        raise ContainerError("truncated header")
    n, P, flags, n_classes = _HEADER.unpack_from(buf, len(MAGIC))
    if bool(flags & HAS_PRIORS) != bool(n_classes):
        raise ContainerError("prior flag and class count disagree")
    dt = record_dtype(P, bool(flags & HAS_LABELS), n_classes)
    body = len(buf) - len(MAGIC) - _HEADER.size
    if body != n * dt.itemsize:
        raise ContainerError(f"header announces {n} records of {dt.itemsize} bytes, body has {body} bytes")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=len(MAGIC) + _HEADER.size)
    vertices = rec["vertex"].astype(np.int64)
    return PatchDataset(
        vertices=vertices,
        hemisphere=rec["hemisphere"].astype(np.int64),
        region=rec["region"].astype(np.int64),
        obliqueness=rec["obliqueness"].astype(np.float64) / 100.0,
        split=rec["split"].astype(np.int8),
        y_coord=rec["y_coord"].astype(np.float64),
        locations=None if mesh is None else mesh.vertices[vertices].astype(np.float64),
        images=np.array(rec["image"], dtype=np.float32),
        label_images=rec["label"].astype(np.int64) if flags & HAS_LABELS else None,
        priors=np.array(rec["prior"], dtype=np.float32) if n_classes else None,
    )


def save_container(ds: PatchDataset, path) -> None:
    Path(path).write_bytes(dumps(ds))


def load_container(path, mesh=None) -> PatchDataset:
    return loads(Path(path).read_bytes(), mesh)
