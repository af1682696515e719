"""Synthetic ground-truth generators, the patchwork image construction, and file formats.

Labels live only on :class:`MultiViewDataset`; estimation code receives the
:class:`UnlabeledViews` projection from :meth:`MultiViewDataset.unlabeled`,
which has no label field at all.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import InputError

BLOCK = 1024
DATASET_MAGIC = b"MVDS"
SEQUENCE_MAGIC = b"MVSQ"
FORMAT_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class UnlabeledViews(NamedTuple):
    """Three view arrays with a leading sample axis. Carries no labels."""

    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray

    @property
    def m(self):
        return int(np.shape(self.x0)[0])

    def subset(self, idx):
        return UnlabeledViews(*(x[idx] for x in self))


@dataclass
class MultiViewDataset:
    views: tuple
    labels: Optional[np.ndarray] = None
    k: int = 0
    descriptor: dict = field(default_factory=dict)

    @property
    def m(self):
        return int(np.shape(self.views[0])[0])

    @property
    def view_dims(self):
        return tuple(int(np.shape(x)[1]) for x in self.views)

    def unlabeled(self):
        return UnlabeledViews(*self.views)

    def subset(self, idx):
        return MultiViewDataset(tuple(x[idx] for x in self.views),
                                None if self.labels is None else self.labels[idx],
                                self.k, dict(self.descriptor))


def _check_simplex(pi, k=None):
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 1 or (k is not None and pi.size != k) or np.any(pi < 0) \
            or abs(pi.sum() - 1.0) > 1e-9:
        raise InputError(f"not a probability vector: {pi}")
    return pi


def _block_rngs(seed, m):
    """One generator per block of BLOCK sample indices; independent of worker layout."""
    for b, start in enumerate(range(0, m, BLOCK)):
        yield start, min(start + BLOCK, m), np.random.default_rng(np.random.SeedSequence([seed, b]))


# -- Gaussian multi-view generator ------------------------------------------------

@dataclass
class MultiViewGenerator:
    """y ~ pi; x_v | y ~ N(means[v][y], noise^2 I)."""

    pi: np.ndarray
    means: list
    noise: float

    @property
    def k(self):
        return int(self.pi.size)

    @property
    def view_dims(self):
        return tuple(int(mu.shape[1]) for mu in self.means)

    @classmethod
    def from_config(cls, config):
        k = int(config["k"])
        dims = config.get("view_dims", (3, 3, 3))
        pi = _check_simplex(config.get("pi", np.full(k, 1.0 / k)), k)
        if len(dims) != 3 or any(int(p) < 1 for p in dims):
            raise InputError("view_dims must be three positive ints")
        rng = np.random.default_rng(config.get("structure_seed", 0))
        scale = float(config.get("mean_scale", 1.0))
        means = [rng.standard_normal((k, int(p))) * scale for p in dims]
        return cls(pi, means, float(config.get("noise", 1.0)))

    def sample(self, m, seed):
        if m < 0:
            raise InputError("m must be non-negative")
        y = np.empty(m, dtype=int)
        views = [np.empty((m, p)) for p in self.view_dims]
        for a, b, rng in _block_rngs(seed, m):
            yb = rng.choice(self.k, size=b - a, p=self.pi)
            y[a:b] = yb
            for v in range(3):
                noise = rng.standard_normal((b - a, self.view_dims[v]))
                views[v][a:b] = self.means[v][yb] + self.noise * noise
        return MultiViewDataset(tuple(views), y, self.k, {
            "generator": "multiview", "pi": self.pi.tolist(), "noise": self.noise,
            "means": [mu.tolist() for mu in self.means]})


def gen_multiview(config, m, seed):
    return MultiViewGenerator.from_config(config).sample(m, seed)


@dataclass
class MediatedGenerator:
    """Views independent given a subclass z; the label is y = r(z)."""

    p_z: np.ndarray
    r: np.ndarray
    means: list
    noise: float

    @classmethod
    def from_config(cls, config):
        k = int(config["k"])
        per = int(config.get("subclasses", 2))
        kz = k * per
        p_z = _check_simplex(config.get("p_z", np.full(kz, 1.0 / kz)), kz)
        r = np.repeat(np.arange(k), per)
        dims = config.get("view_dims", (4, 4, 4))
        rng = np.random.default_rng(config.get("structure_seed", 0))
        scale = float(config.get("mean_scale", 1.0))
        means = [rng.standard_normal((kz, int(p))) * scale for p in dims]
        return cls(p_z, r, means, float(config.get("noise", 1.0)))

    def sample(self, m, seed):
        kz = self.p_z.size
        z = np.empty(m, dtype=int)
        views = [np.empty((m, mu.shape[1])) for mu in self.means]
        for a, b, rng in _block_rngs(seed, m):
            zb = rng.choice(kz, size=b - a, p=self.p_z)
            z[a:b] = zb
            for v in range(3):
                views[v][a:b] = self.means[v][zb] + self.noise * rng.standard_normal(
                    (b - a, self.means[v].shape[1]))
        ds = MultiViewDataset(tuple(views), self.r[z], int(self.r.max()) + 1,
                              {"generator": "mediated", "p_z": self.p_z.tolist(),
                               "r": self.r.tolist()})
        ds.descriptor["z"] = z
        return ds


# -- images ---------------------------------------------------------------------

def synthetic_digits(k, side, per_class, seed, blobs=3, noise=0.1):
    """Blob-prototype images in [0, 1], a stand-in for a small digit dataset."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    protos = []
    for _ in range(k):
        img = np.zeros((side, side))
        for _ in range(blobs):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            w = rng.uniform(0.08, 0.2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        protos.append(img / img.max())
    images, labels = [], []
    for c in range(k):
        for _ in range(per_class):
            gain = rng.uniform(0.7, 1.0)
            img = gain * protos[c] + noise * rng.standard_normal((side, side))
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    return np.asarray(images), np.asarray(labels)


def interleave(sources):
    """Composite whose flattened pixel p comes from sources[p % 3]."""
    sources = [np.asarray(s, dtype=float) for s in sources]
    shape = sources[0].shape
    flat = np.stack([s.reshape(-1) for s in sources])
    idx = np.arange(flat.shape[1])
    return flat[idx % 3, idx].reshape(shape)


def split_views(images):
    """View v holds the flattened pixels with index = v (mod 3)."""
    flat = np.asarray(images).reshape(len(images), -1)
    return tuple(flat[:, v::3] for v in range(3))


def merge_views(views, shape):
    n = views[0].shape[0]
    size = int(np.prod(shape))
    flat = np.empty((n, size))
    for v in range(3):
        flat[:, v::3] = views[v]
    return flat.reshape((n,) + tuple(shape))


def compose_patchwork(images, labels, m, seed, pi=None):
    """Sample a class, draw three of its images, interleave pixels mod 3."""
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels, dtype=int)
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    short = [int(c) for c, ix in by_class.items() if ix.size < 3]
    if short:
        raise InputError(f"classes {short} have fewer than 3 images")
    k = int(classes.max()) + 1
    pi = np.full(classes.size, 1.0 / classes.size) if pi is None else _check_simplex(pi)
    out = np.empty((m,) + images.shape[1:])
    y = np.empty(m, dtype=int)
    for a, b, rng in _block_rngs(seed, m):
        for i in range(a, b):
            c = classes[rng.choice(classes.size, p=pi)]
            pick = rng.choice(by_class[c], size=3, replace=False)
            out[i] = interleave(images[pick])
            y[i] = c
    return out, y, k


def radial_distance(shape):
    """Distance to the grid centre, normalized so the farthest pixel is at 1."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    r = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    return r / r.max() if r.max() > 0 else r


def dimming_factor(shape, a, convention="divide"):
    """Per-pixel intensity multiplier for shift a.

    ``divide``: pixels are divided by exp(a (r - 0.4)), darkening the border.
    ``multiply``: the literal multiplicative reading.
    """
    if a < 0:
        raise InputError("shift a must be >= 0")
    expo = a * (radial_distance(shape) - 0.4)
    if convention == "divide":
        return np.exp(-expo)
    if convention == "multiply":
        return np.exp(expo)
    raise InputError(f"unknown dimming convention {convention!r}")


def apply_dimming(image, a, convention="divide", max_intensity=1.0):
    image = np.asarray(image, dtype=float)
    if a == 0:
        return image.copy()
    factor = dimming_factor(image.shape[-2:], a, convention)
    return np.clip(image * factor, 0.0, max_intensity)


def patchwork_dataset(images, labels, m, a, seed, convention="divide"):
    comp, y, k = compose_patchwork(images, labels, m, seed)
    dimmed = apply_dimming(comp, a, convention)
    return MultiViewDataset(split_views(dimmed), y, k, {
        "generator": "patchwork", "a": float(a), "convention": convention,
        "shape": list(np.shape(images)[1:])})


# -- IDX ------------------------------------------------------------------------

def read_idx(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise InputError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    ndim = magic & 0xFF
    if magic >> 8 != 0x08 or ndim not in (1, 3):
        raise InputError(f"{path}: unsupported IDX magic {magic:#010x}")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise InputError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:head])
    size = int(np.prod(dims))
    if len(buf) < head + size:
        raise InputError(f"{path}: truncated IDX payload ({len(buf) - head} of {size} bytes)")
    data = np.frombuffer(buf[head:head + size], dtype=np.uint8).reshape(dims)
    return magic, data


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_idx(image_path, label_path=None):
    """Images scaled to [0, 1] and (optionally) integer labels from IDX files."""
    magic, images = read_idx(image_path)
    if magic != IDX_IMAGES:
        raise InputError(f"{image_path}: expected image magic {IDX_IMAGES:#010x}, got {magic:#010x}")
    images = images.astype(float) / 255.0
    if label_path is None:
        return images, None
    lmagic, labels = read_idx(label_path)
    if lmagic != IDX_LABELS:
        raise InputError(f"{label_path}: expected label magic {IDX_LABELS:#010x}, got {lmagic:#010x}")
    if labels.shape[0] != images.shape[0]:
        raise InputError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels.astype(int)


# -- HMM sequences --------------------------------------------------------------

@dataclass
class SequenceDataset:
    obs: np.ndarray                  # (m, T) ints or (m, T, p) floats
    labels: Optional[np.ndarray]     # (m, T)
    k: int
    emission: str                    # "discrete" | "gaussian"

    @property
    def m(self):
        return int(self.obs.shape[0])

    @property
    def T(self):
        return int(self.obs.shape[1])


def _check_stochastic(P, name):
    P = np.asarray(P, dtype=float)
    if np.any(P < 0) or not np.allclose(P.sum(axis=-1), 1.0, atol=1e-9):
        raise InputError(f"{name} rows must be probability vectors")
    return P


def gen_hmm_sequences(config, m, seed):
    """Label/observation sequences from a generating HMM."""
    k, T = int(config["k"]), int(config["T"])
    trans = _check_stochastic(config["transition"], "transition")
    init = _check_stochastic(config.get("initial", np.full(k, 1.0 / k)), "initial")
    em = config["emission"]
    etype = em["type"]
    if trans.shape != (k, k):
        raise InputError("transition must be k x k")
    if etype == "discrete":
        probs = _check_stochastic(em["probs"], "emission")
        obs = np.empty((m, T), dtype=int)
    elif etype == "gaussian":
        means = np.atleast_2d(np.asarray(em["means"], dtype=float))
        if means.shape[0] != k:
            means = means.T
        sd = np.broadcast_to(np.asarray(em.get("sd", 1.0), dtype=float), means.shape)
        obs = np.empty((m, T, means.shape[1]))
    else:
        raise InputError(f"unknown emission type {etype!r}")
    y = np.empty((m, T), dtype=int)
    cum = np.cumsum(trans, axis=1)
    for a, b, rng in _block_rngs(seed, m):
        n = b - a
        yb = np.empty((n, T), dtype=int)
        yb[:, 0] = rng.choice(k, size=n, p=init)
        u = rng.random((n, T))
        for t in range(1, T):
            yb[:, t] = np.minimum((u[:, t, None] > cum[yb[:, t - 1]]).sum(axis=1), k - 1)
        y[a:b] = yb
        if etype == "discrete":
            ce = np.cumsum(probs, axis=1)
            ue = rng.random((n, T))
            obs[a:b] = np.minimum((ue[..., None] > ce[yb]).sum(axis=-1), probs.shape[1] - 1)
        else:
            obs[a:b] = means[yb] + sd[yb] * rng.standard_normal((n, T, means.shape[1]))
    return SequenceDataset(obs, y, k, etype)


# -- binary dataset files -------------------------------------------------------

_DS_HEAD = "<I Q I 3I B"


def dataset_bytes(ds: MultiViewDataset, include_labels=True):
    has = include_labels and ds.labels is not None
    out = [DATASET_MAGIC, struct.pack(_DS_HEAD, FORMAT_VERSION, ds.m, ds.k, *ds.view_dims, int(has))]
    out += [np.ascontiguousarray(x, dtype="<f4").tobytes() for x in ds.views]
    if has:
        out.append(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())
    return b"".join(out)


def save_dataset(path, ds, include_labels=True):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds, include_labels))


def load_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    size = struct.calcsize(_DS_HEAD)
    if len(buf) < 4 + size or buf[:4] != DATASET_MAGIC:
        raise InputError(f"{path}: not a dataset file")
    version, m, k, p0, p1, p2, has = struct.unpack(_DS_HEAD, buf[4:4 + size])
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    pos = 4 + size
    views = []
    for p in (p0, p1, p2):
        n = m * p * 4
        if pos + n > len(buf):
            raise InputError(f"{path}: truncated view block")
        views.append(np.frombuffer(buf[pos:pos + n], dtype="<f4").reshape(m, p).astype(float))
        pos += n
    labels = None
    if has:
        if pos + 4 * m > len(buf):
            raise InputError(f"{path}: truncated label block")
        labels = np.frombuffer(buf[pos:pos + 4 * m], dtype="<i4").astype(int)
    return MultiViewDataset(tuple(views), labels, int(k), {"path": str(path)})


_SEQ_HEAD = "<I Q I I B I B"


def save_sequences(path, ds: SequenceDataset, include_labels=True):
    has = include_labels and ds.labels is not None
    p = 1 if ds.emission == "discrete" else int(ds.obs.shape[2])
    with open(path, "wb") as fh:
        fh.write(SEQUENCE_MAGIC)
        fh.write(struct.pack(_SEQ_HEAD, FORMAT_VERSION, ds.m, ds.T, ds.k,
                             0 if ds.emission == "discrete" else 1, p, int(has)))
        dtype = "<i4" if ds.emission == "discrete" else "<f4"
        fh.write(np.ascontiguousarray(ds.obs, dtype=dtype).tobytes())
        if has:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i4").tobytes())


def load_sequences(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    size = struct.calcsize(_SEQ_HEAD)
    if len(buf) < 4 + size or buf[:4] != SEQUENCE_MAGIC:
        raise InputError(f"{path}: not a sequence file")
    version, m, T, k, etype, p, has = struct.unpack(_SEQ_HEAD, buf[4:4 + size])
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    pos = 4 + size
    n = m * T * (1 if etype == 0 else p) * 4
    if len(buf) < pos + n:
        raise InputError(f"{path}: truncated observations")
    if etype == 0:
        obs = np.frombuffer(buf[pos:pos + n], dtype="<i4").reshape(m, T).astype(int)
    else:
        obs = np.frombuffer(buf[pos:pos + n], dtype="<f4").reshape(m, T, p).astype(float)
    pos += n
    labels = None
    if has:
        if len(buf) < pos + m * T * 4:
            raise InputError(f"{path}: truncated labels")
        labels = np.frombuffer(buf[pos:pos + m * T * 4], dtype="<i4").reshape(m, T).astype(int)
    return SequenceDataset(obs, labels, int(k), "discrete" if etype == 0 else "gaussian")
