"""Dataset ingestion: IDX (MNIST-style), CSV and synthetic generators."""
from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import List, Mapping

import numpy as np

from ..federation import Task, split_support_query
from ..losses import CubicLoss, Dataset, QuadraticLoss
from ..numkit import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


def _read_idx(path, magic: int, ndims: int):
    blob = Path(path).read_bytes()
    header = 4 + 4 * ndims
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndims, blob[4:header])
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(blob) - header}")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header)
    return dims, data


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise IdxCountMismatchError(f"{n_img} images but {n_lab} labels")
    X = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64))


def load_csv(path) -> Dataset:
    """Numeric CSV, label in the last column; a non-numeric first row is a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            [float(x) for x in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    labels = arr[:, -1]
    if np.all(labels == np.round(labels)):
        labels = labels.astype(np.int64)
    return Dataset(arr[:, :-1], labels)


SYNTHETIC_KINDS = ("quadratic-mixture", "cubic-mixture", "gaussian-classes")


def generate_synthetic(kind: str, params: Mapping, seed: int):
    """Desk-scale problems.

    * ``quadratic-mixture`` / ``cubic-mixture`` return a list of :class:`Task`
      with per-node losses whose centres are ``center_offset + N(0, spread^2)``
      per coordinate.
    * ``gaussian-classes`` returns a labelled :class:`Dataset` of Gaussian blobs.
    """
    rng = RngStream(seed).child("synthetic", kind)
    if kind in ("quadratic-mixture", "cubic-mixture"):
        return _mixture(kind, dict(params), rng)
    if kind == "gaussian-classes":
        return _gaussian_classes(dict(params), rng)
    raise ValueError(f"unknown synthetic kind {kind!r}")


def _mixture(kind, p, rng) -> List[Task]:
    num_nodes = int(p.get("num_nodes", 4))
    dim = int(p.get("dim", 5))
    spread = float(p.get("spread", 1.0))
    lo, hi = int(p.get("size_low", 2)), int(p.get("size_high", 2))
    noise = float(p.get("offset_noise", 0.0))
    split = float(p.get("split_fraction", 0.5))
    curvature = p.get("curvature", 1.0)
    kappa = float(p.get("kappa", 1.0))
    offset = float(p.get("center_offset", 0.0))
    if num_nodes < 1 or dim < 1 or spread < 0 or noise < 0 or not 2 <= lo <= hi:
        raise ValueError("invalid mixture parameters")
    tasks = []
    for i in range(num_nodes):
        node_rng = rng.child("node", i)
        center = offset + spread * node_rng.generator.standard_normal(dim)
        size = int(node_rng.integers(lo, hi + 1))
        offsets = noise * node_rng.generator.standard_normal((size, dim))
        support, query = split_support_query(Dataset(offsets, np.zeros(size)), split, node_rng.child("split"))
        loss = QuadraticLoss(center, curvature) if kind == "quadratic-mixture" \
            else CubicLoss(center, curvature, kappa)
        tasks.append(Task(support, query, loss))
    return tasks


def _gaussian_classes(p, rng) -> Dataset:
    C = int(p.get("num_classes", 10))
    d = int(p.get("features", 10))
    N = int(p.get("samples", 2000))
    sep = float(p.get("class_sep", 3.0))
    noise = float(p.get("noise", 1.0))
    if C < 2 or d < 1 or N < C or sep < 0 or noise < 0:
        raise ValueError("invalid gaussian-classes parameters")
    means = sep * rng.child("means").generator.standard_normal((C, d))
    labels = np.arange(N) % C
    labels = labels[rng.child("order").permutation(N)]
    X = means[labels] + noise * rng.child("noise").generator.standard_normal((N, d))
    return Dataset(X, labels.astype(np.int64))


def class_means_min_distance(params: Mapping, seed: int) -> float:
    """Smallest pairwise distance between gaussian-classes means (fixture check)."""
    C = int(params.get("num_classes", 10))
    d = int(params.get("features", 10))
    sep = float(params.get("class_sep", 3.0))
    rng = RngStream(seed).child("synthetic", "gaussian-classes")
    means = sep * rng.child("means").generator.standard_normal((C, d))
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return float(dist[np.triu_indices(C, 1)].min())
