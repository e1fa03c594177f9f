"""Manifests, images, preprocessing, config files and checkpoints.

Manifest CSV
    UTF-8, header ``path,label``. Relative paths resolve against the
    manifest's directory. Labels must appear in the label-space file (one
    class name per line, canonical order), by default ``labels.txt`` next to
    the manifest. Fields are not quoted; a path containing a comma is a
    parse error.

Features manifest
    First line ``features,dim=<d>``, then header ``path,label,f0,...``.
    ``path`` is only a row identifier.

Checkpoint
    ``MAGIC`` (8 bytes), format version (uint32 LE), header length
    (uint64 LE), a UTF-8 JSON header with sorted keys, then every parameter
    array as little-endian float64 in the header's ``parameters`` order.
"""

import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image
from .exceptions import CheckpointError, MissingFile, ParseError, UnknownLabel
from .model import Network
from .sampling import PRNG_ALGORITHM
from .stain_norm import MacenkoNormalizer

IMAGE_SUFFIXES = (".png", ".ppm")
MAGIC = b"SBALCKPT"
FORMAT_VERSION = 1


# --- images -------------------------------------------------------------


def read_image(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"image not found: {path}")
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image):
    """Write PNG, or binary PPM (P6) for a ``.ppm`` suffix."""
    path = Path(path)
    image = check_image(image)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    PILImage.fromarray(image, "RGB").save(path, format=fmt)


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# --- preprocessing ------------------------------------------------------


@dataclass
class PreprocessConfig:
    resize_to: int = 368  # None disables resizing
    crop_to: int = 224
    pool_to: int = 8
    normalize_stains: bool = False

    def __post_init__(self):
        if self.resize_to is not None and self.crop_to > self.resize_to:
            raise ValueError("crop_to must not exceed resize_to")
        if not 1 <= self.pool_to <= self.crop_to:
            raise ValueError("pool_to must lie in [1, crop_to]")

    @property
    def input_dim(self):
        return 3 * self.pool_to**2


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize with half-pixel centres.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in / out - 0.5``
    clamped to ``[0, in - 1]``; values are interpolated as ``a + f * (b - a)``
    so constant images stay exactly constant. Returns float64.
    """
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape[:2]

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(out_h, in_h)
    x0, x1, fx = axis(out_w, in_w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] + fx * (img[y0][:, x1] - img[y0][:, x0])
    bot = img[y1][:, x0] + fx * (img[y1][:, x1] - img[y1][:, x0])
    return top + fy[:, None, None] * (bot - top)


def center_crop(image, size):
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"cannot crop {size}x{size} from {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top : top + size, left : left + size]


def average_pool(image, pool_to):
    """Per-channel block means on a ``pool_to x pool_to`` grid.

    Block edges are ``floor(i * n / pool_to)`` so sizes that do not divide
    evenly get blocks differing by at most one pixel.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ye = (np.arange(pool_to + 1) * h) // pool_to
    xe = (np.arange(pool_to + 1) * w) // pool_to
    out = np.empty((pool_to, pool_to, img.shape[2]))
    for i in range(pool_to):
        for j in range(pool_to):
            block = img[ye[i] : ye[i + 1], xe[j] : xe[j + 1]]
            out[i, j] = block.sum(axis=(0, 1)) / (block.shape[0] * block.shape[1])
    return out


def prepare_image(image, config, normalizer=None):
    """Resize, center-crop and optionally stain-normalize; returns uint8."""
    image = check_image(image)
    if config.resize_to is not None:
        image = np.clip(np.round(resize_bilinear(image, config.resize_to, config.resize_to)), 0, 255)
        image = image.astype(np.uint8)
    image = center_crop(image, config.crop_to)
    if config.normalize_stains:
        if normalizer is None:
            normalizer = MacenkoNormalizer(on_error="passthrough").fit()
        image = normalizer.transform([image])[0]
    return image


def image_to_vector(image, pool_to):
    """Average-pool, scale to [0, 1] and flatten channel-major."""
    pooled = average_pool(image, pool_to) / 255.0
    return np.transpose(pooled, (2, 0, 1)).reshape(-1)


def preprocess(image, config, normalizer=None):
    return image_to_vector(prepare_image(image, config, normalizer), config.pool_to)


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Images in, ``(n, 3 * pool_to**2)`` feature matrix out."""

    def __init__(self, resize_to=368, crop_to=224, pool_to=8, normalize_stains=False, normalizer=None):
        self.resize_to = resize_to
        self.crop_to = crop_to
        self.pool_to = pool_to
        self.normalize_stains = normalize_stains
        self.normalizer = normalizer

    def fit(self, X=None, y=None):
        self.config_ = PreprocessConfig(self.resize_to, self.crop_to, self.pool_to, self.normalize_stains)
        if self.normalize_stains:
            self.normalizer_ = self.normalizer or MacenkoNormalizer(on_error="passthrough").fit()
        else:
            self.normalizer_ = None
        self.n_features_out_ = self.config_.input_dim
        return self

    def transform(self, X):
        return np.stack([preprocess(im, self.config_, self.normalizer_) for im in X])


# --- manifests ----------------------------------------------------------


@dataclass
class Manifest:
    paths: list
    labels: np.ndarray
    label_names: list
    kind: str = "image"  # or "features"
    features: np.ndarray = None
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.paths)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.root / p


def load_label_space(path):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"label-space file not found: {path}")
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise ParseError(f"duplicate class names in {path}")
    return names


def default_label_path(manifest_path):
    return Path(manifest_path).parent / "labels.txt"


def load_manifest(path, label_space=None, check_files=True):
    """Parse a manifest CSV.

    Args:
        path: manifest file.
        label_space: list of class names or path to a label-space file;
            defaults to ``labels.txt`` beside the manifest.
        check_files: raise :class:`MissingFile` for image paths that do not
            exist.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest not found: {path}")
    if label_space is None:
        label_space = default_label_path(path)
    names = label_space if isinstance(label_space, list) else load_label_space(label_space)
    index = {n: i for i, n in enumerate(names)}

    lines = path.read_text(encoding="utf-8").splitlines()
    kind, dim, start = "image", None, 0
    if lines and lines[0].startswith("features,"):
        kind, start = "features", 1
        try:
            key, value = lines[0].split(",", 1)[1].split("=")
            if key.strip() != "dim":
                raise ValueError
            dim = int(value)
        except ValueError:
            raise ParseError("expected 'features,dim=<d>'", line=1) from None
    if len(lines) <= start:
        raise ParseError("missing header", line=start + 1)
    header = lines[start].split(",")
    expected = ["path", "label"] + ([f"f{i}" for i in range(dim)] if kind == "features" else [])
    if header != expected:
        shown = ",".join(expected) if kind == "image" else f"path,label,f0..f{dim - 1}"
        raise ParseError(f"header must be '{shown}'", line=start + 1)

    paths, labels, feats = [], [], []
    for lineno, line in enumerate(lines[start + 1 :], start=start + 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(expected):
            raise ParseError(f"expected {len(expected)} fields, got {len(parts)}", line=lineno)
        p, lab = parts[0].strip(), parts[1].strip()
        if lab not in index:
            raise UnknownLabel(lab, line=lineno)
        if kind == "features":
            try:
                feats.append([float(v) for v in parts[2:]])
            except ValueError:
                raise ParseError("non-numeric feature value", line=lineno) from None
        paths.append(p)
        labels.append(index[lab])

    m = Manifest(paths, np.asarray(labels, dtype=np.int64), names, kind, root=path.parent)
    if kind == "features":
        m.features = np.asarray(feats, dtype=np.float64).reshape(len(paths), dim)
    elif check_files:
        for p in paths:
            if not m.resolve(p).exists():
                raise MissingFile(f"listed image not found: {p}")
    return m


def write_manifest(path, paths, labels, label_names):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("path,label\n")
        for p, y in zip(paths, labels):
            _check_field(p)
            f.write(f"{p},{label_names[y]}\n")


def write_features_manifest(path, ids, X, labels, label_names):
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"features,dim={X.shape[1]}\n")
        f.write(",".join(["path", "label"] + [f"f{i}" for i in range(X.shape[1])]) + "\n")
        for rid, row, y in zip(ids, X, labels):
            _check_field(rid)
            f.write(",".join([rid, label_names[y]] + [repr(float(v)) for v in row]) + "\n")


def write_label_space(path, names):
    for n in names:
        _check_field(n)
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def _check_field(value):
    if "," in value or "\n" in value:
        raise ParseError(f"field contains a comma or newline: {value!r}")


# --- config files -------------------------------------------------------


def read_key_values(path):
    """Flat ``key = value`` (or ``key: value``) file; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"config not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ParseError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = value
    return out


def _coerce(value, kind):
    if kind is bool:
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is tuple:
        return tuple(int(v) for v in value.replace(";", ",").split(",") if v.strip())
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    return value


def config_from_mapping(mapping, cls, aliases=None):
    """Build dataclass ``cls`` from string values, ignoring unknown keys.

    Returns ``(instance, unused_keys)``.
    """
    aliases = aliases or {}
    known = {f.name: f for f in fields(cls)}
    kwargs, unused = {}, []
    for key, value in mapping.items():
        name = aliases.get(key, key)
        if name not in known:
            unused.append(key)
            continue
        default = known[name].default
        kind = type(default) if default is not None else int
        if value.lower() == "none":
            kwargs[name] = None
        else:
            kwargs[name] = _coerce(value, kind)
    return cls(**kwargs), unused


# --- checkpoints --------------------------------------------------------


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(path, model, metadata=None):
    """Write ``model`` and JSON-serializable ``metadata`` atomically."""
    names = model.parameter_names()
    header = {
        "format": "stainbalance-checkpoint",
        "input_dim": model.input_dim,
        "hidden_sizes": list(model.hidden_sizes),
        "n_classes": model.n_classes,
        "trained_stage": model.trained_stage,
        "prng": PRNG_ALGORITHM,
        "parameters": [[n, list(model.get_parameter(n).shape)] for n in names],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(model.get_parameter(n), dtype="<f8").tobytes() for n in names)
    data = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + payload
    atomic_write_bytes(path, data)


def load_checkpoint(path):
    """Return ``(model, header)``; ``header["metadata"]`` holds the extras."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    model = Network(header["input_dim"], header["n_classes"], header["hidden_sizes"])
    offset = 20 + hlen
    for name, shape in header["parameters"]:
        n = int(np.prod(shape))
        chunk = data[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError("truncated checkpoint payload")
        model.set_parameter(name, np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64))
        offset += 8 * n
    if offset != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    model.trained_stage = header["trained_stage"]
    model.frozen = header["trained_stage"] >= 2
    return model, header
