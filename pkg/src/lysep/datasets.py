"""Datasets for the three experiments.

* circle-in/out on ``[-1, 1]^2`` (radius ``sqrt(2/pi)``, so both classes
  cover half the square);
* interface labels from an Allen-Cahn solution on the periodic square
  ``[-0.5, 0.5]^2``;
* MNIST read from the original IDX files.

Features are stored column-wise (d x N) and labels as one-hot J x N
matrices. Generated data can be cached in a small binary container, see
:func:`save_dataset`.
"""

import gzip
import hashlib
import math
import os
import struct
import urllib.request
from dataclasses import dataclass, field
import numpy as np

from .rng import STREAM_DATA, STREAM_TEST, make_rng
from .softmax_ce import check_labels, one_hot

CIRCLE_RADIUS = math.sqrt(2.0 / math.pi)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray
    a: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.a = check_labels(self.a)
        if self.x.ndim != 2 or self.x.shape[1] != self.a.shape[1]:
            raise ValueError(f"features {self.x.shape} and labels {self.a.shape} disagree on N")
        self.meta["class_counts"] = [int(c) for c in self.a.sum(axis=1)]

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def dim(self):
        return self.x.shape[0]

    @property
    def n_classes(self):
        return self.a.shape[0]

    @property
    def labels(self):
        return np.argmax(self.a, axis=0)


# -- circle ---------------------------------------------------------------------


def circle_labels(points):
    """1 ("inside") where ``||x||_2 <= sqrt(2/pi)``, else 0."""
    return (np.linalg.norm(points, axis=0) <= CIRCLE_RADIUS).astype(np.int64)


def gen_circle(n_train, n_test, seed):
    if n_train < 1 or n_test < 1:
        raise ValueError("sample counts must be positive")
    out = []
    for n, stream, split in ((n_train, STREAM_DATA, "train"), (n_test, STREAM_TEST, "test")):
        pts = make_rng(seed, stream).uniform(-1.0, 1.0, size=(2, n))
        out.append(Dataset(pts, one_hot(circle_labels(pts), 2), {"source": "circle", "seed": seed, "split": split}))
    return out[0], out[1]


# -- Allen-Cahn interface ---------------------------------------------------------

AC_EPS = 0.02
AC_TIMES = (0.0, 0.001, 0.004, 0.015)


@dataclass
class AcField:
    """Solution snapshots on the periodic grid ``x_i = -0.5 + i h``, ``h = 1/n``."""

    values: dict  # time -> n x n array indexed [ix, iy]
    n: int
    eps: float

    @property
    def times(self):
        return sorted(self.values)

    @property
    def h(self):
        return 1.0 / self.n

    def grid(self):
        return -0.5 + self.h * np.arange(self.n)


def ac_initial(x, y, eps=AC_EPS):
    """Two tanh bumps of radius 0.19 centred at ``(0, +-0.2)``, -1 outside."""
    s = math.sqrt(2.0) * eps
    r1 = np.sqrt(x**2 + (y - 0.2) ** 2)
    r2 = np.sqrt(x**2 + (y + 0.2) ** 2)
    return -np.tanh((r1 - 0.19) / s) - np.tanh((r2 - 0.19) / s) + 1.0


def ac_max_dt(n, eps):
    h = 1.0 / n
    return 0.9 * min(h * h / 4.0, eps * eps / 2.0)


def ac_solve(n_grid=256, eps=AC_EPS, t_end=AC_TIMES[-1], dt=None, times=AC_TIMES, u0=None):
    """Forward-Euler / 5-point-Laplacian solution of ``u_t = Lap u + (u - u^3)/eps^2``.

    The boundary is periodic. Snapshots are stored at every requested time
    ``<= t_end``; the final step of each interval is shortened to land on the
    snapshot exactly. ``u0`` overrides the two-bump initial condition.
    """
    h = 1.0 / n_grid
    limit = ac_max_dt(n_grid, eps)
    if dt is None:
        dt = limit
    if dt <= 0 or dt > limit:
        raise ValueError(f"dt={dt:g} violates the stability bound {limit:g}")
    g = -0.5 + h * np.arange(n_grid)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    u = ac_initial(xx, yy, eps) if u0 is None else np.array(u0(xx, yy), dtype=np.float64)
    stops = sorted(t for t in times if t <= t_end + 1e-15)
    values = {}
    t = 0.0
    inv_h2 = 1.0 / (h * h)
    inv_eps2 = 1.0 / (eps * eps)
    for stop in stops:
        while t < stop - 1e-15:
            step = min(dt, stop - t)
            lap = (np.roll(u, 1, 0) + np.roll(u, -1, 0) + np.roll(u, 1, 1) + np.roll(u, -1, 1) - 4.0 * u) * inv_h2
            u = u + step * (lap + inv_eps2 * (u - u**3))
            t += step
            if not np.all(np.abs(u) <= 2.0):
                raise FloatingPointError(f"Allen-Cahn solve unstable at t={t:g} (max |u| = {np.abs(u).max():g})")
        values[stop] = u.copy()
    return AcField(values, n_grid, eps)


def ac_interpolate(field_, t, points):
    """Bilinear periodic interpolation of the snapshot at ``t`` (points: 2 x N)."""
    if t not in field_.values:
        raise KeyError(f"time {t} not stored; available {field_.times}")
    u = field_.values[t]
    n = field_.n
    fx = (np.asarray(points[0]) + 0.5) * n
    fy = (np.asarray(points[1]) + 0.5) * n
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    tx = fx - i0
    ty = fy - j0
    i0 %= n
    j0 %= n
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    return (
        (1 - tx) * (1 - ty) * u[i0, j0]
        + tx * (1 - ty) * u[i1, j0]
        + (1 - tx) * ty * u[i0, j1]
        + tx * ty * u[i1, j1]
    )


def ac_label(field_, t, n_train, n_test, seed):
    """Uniform points on the square, class 1 where ``u(x, y, t) >= 0``."""
    if t not in field_.values:
        raise KeyError(f"time {t} not stored; available {field_.times}")
    out = []
    for n, stream, split in ((n_train, STREAM_DATA, "train"), (n_test, STREAM_TEST, "test")):
        pts = make_rng(seed, stream).uniform(-0.5, 0.5, size=(2, n))
        lab = (ac_interpolate(field_, t, pts) >= 0.0).astype(np.int64)
        out.append(Dataset(pts, one_hot(lab, 2), {"source": "allen-cahn", "t": t, "seed": seed, "split": split}))
    return out[0], out[1]


# -- MNIST IDX files -----------------------------------------------------------------


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        data = fh.read()
    if head == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx_images(path):
    """``(count, rows, cols)`` uint8 array from an IDX image file."""
    data = _read_bytes(path)
    if len(data) < 16:
        raise IdxTruncatedError(f"{path}: header needs 16 bytes, file has {len(data)}")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{path}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    need = 16 + count * rows * cols
    if len(data) < need:
        raise IdxTruncatedError(f"{path}: expected {need} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(path):
    data = _read_bytes(path)
    if len(data) < 8:
        raise IdxTruncatedError(f"{path}: header needs 8 bytes, file has {len(data)}")
    magic, count = struct.unpack(">II", data[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{path}: label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(data) < 8 + count:
        raise IdxTruncatedError(f"{path}: expected {8 + count} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8)


def load_mnist(images_path, labels_path):
    """MNIST as a :class:`Dataset`: 784 x N pixels in [0, 1], 10 classes.

    Each image is vectorized row by row (single channel).
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IdxError("label value above 9")
    x = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    meta = {"source": "mnist", "image_shape": images.shape[1:], "path": str(images_path)}
    return Dataset(np.ascontiguousarray(x), one_hot(labels, 10), meta)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.size))
        fh.write(labels.tobytes())


# Published SHA-256 digests of the uncompressed MNIST files.
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


# -- subsampling ------------------------------------------------------------------------


def subsample(d, n, seed):
    """Uniform subset of ``n`` columns without replacement."""
    if n > d.n or n < 1:
        raise ValueError(f"cannot draw {n} samples from a dataset of {d.n}")
    idx = make_rng(seed, STREAM_DATA).permutation(d.n)[:n]
    return Dataset(d.x[:, idx], d.a[:, idx], {**d.meta, "subsample_seed": seed})


# -- binary cache ---------------------------------------------------------------------------
#
# Layout (little endian): b"LSDS", uint32 version, uint32 d, uint32 J,
# uint32 N, then d*N float64 of x in row-major order, then N uint8 class
# indices.

CACHE_MAGIC = b"LSDS"
CACHE_VERSION = 1


def save_dataset(path, d):
    header = CACHE_MAGIC + struct.pack("<IIII", CACHE_VERSION, d.dim, d.n_classes, d.n)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(d.x, dtype="<f8").tobytes())
        fh.write(d.labels.astype(np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a dataset cache file")
    version, dim, n_classes, n = struct.unpack("<IIII", data[4:20])
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    need = 20 + 8 * dim * n + n
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    x = np.frombuffer(data, dtype="<f8", count=dim * n, offset=20).reshape(dim, n).astype(np.float64)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=20 + 8 * dim * n)
    return Dataset(x, one_hot(labels, n_classes), {"source": "cache", "path": str(path)})



# -- fetching ---------------------------------------------------------------------------------

MNIST_FILES = tuple(MNIST_SHA256)


def verify_mnist(directory):
    """Names of MNIST files in ``directory`` that are missing or fail their digest."""
    bad = []
    for name, digest in MNIST_SHA256.items():
        path = os.path.join(directory, name)
        if not os.path.exists(path) or hashlib.sha256(_read_bytes(path)).hexdigest() != digest:
            bad.append(name)
    return bad


def fetch_mnist(directory, base_url):
    """Download ``<base_url>/<name>.gz`` for the four files, check digests, store uncompressed.

    Raises ``IdxError`` on a digest mismatch; nothing is written for a file
    that fails.
    """
    os.makedirs(directory, exist_ok=True)
    for name, digest in MNIST_SHA256.items():
        url = f"{base_url.rstrip('/')}/{name}.gz"
        with urllib.request.urlopen(url, timeout=60) as resp:
            raw = resp.read()
        data = gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw
        got = hashlib.sha256(data).hexdigest()
        if got != digest:
            raise IdxError(f"{url}: sha256 {got} does not match the published {digest}")
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(data)
