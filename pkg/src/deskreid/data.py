"""Dataset ingestion and augmentation.

Manifests are CSV files with header ``path,identity,camera,split`` where
split is train, query, or gallery.  Images are binary PPM (P6) or PGM (P5),
8-bit.  The train-time augmentation recipe is: zero-pad each side, crop back
to the target size at a uniform-random offset, then flip left-right with the
configured probability.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "query", "gallery")


class ManifestError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image_path: str
    identity: int
    camera: int
    split: str


@dataclass
class DatasetManifest:
    samples: list
    class_of_identity: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_of_identity)

    def split(self, name):
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def train_labels(self):
        """Contiguous class index for each train sample, in manifest order."""
        return np.array([self.class_of_identity[s.identity] for s in self.split("train")],
                        dtype=np.int64)


def load_manifest(csv_path):
    """Parse a manifest CSV; identities are remapped to contiguous train classes.

    The remap covers train-split identities only (first-appearance order);
    query/gallery identities never contribute to the class count.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ManifestError(f"manifest not found: {csv_path}")
    samples = []
    seen_paths = set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "identity", "camera", "split"]:
            raise ManifestError(
                f"{csv_path}: expected header 'path,identity,camera,split', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{csv_path}:{lineno}: expected 4 fields, got {len(row)}")
            path, ident, camera, split = (f.strip() for f in row)
            try:
                ident = int(ident)
                camera = int(camera)
            except ValueError:
                raise ManifestError(
                    f"{csv_path}:{lineno}: identity and camera must be integers"
                ) from None
            if ident < 0 or camera < 0:
                raise ManifestError(f"{csv_path}:{lineno}: identity and camera must be >= 0")
            if split not in SPLITS:
                raise ManifestError(f"{csv_path}:{lineno}: unknown split {split!r}")
            if path in seen_paths:
                raise ManifestError(f"{csv_path}:{lineno}: duplicate path {path!r}")
            seen_paths.add(path)
            samples.append(Sample(path, ident, camera, split))
    if not samples:
        raise ManifestError(f"{csv_path}: manifest has no data rows")
    remap = {}
    for s in samples:
        if s.split == "train" and s.identity not in remap:
            remap[s.identity] = len(remap)
    return DatasetManifest(samples=samples, class_of_identity=remap)


def _read_token(fh):
    """Next whitespace-delimited token in a PNM header, skipping # comments."""
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ImageFormatError("truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_image(path):
    """Read an 8-bit binary PPM/PGM into a [C, H, W] float array in [0, 1].

    Grayscale (P5) images are replicated across 3 channels.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P6", b"P5"):
            raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
        width = int(_read_token(fh))
        height = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if maxval != 255:
            raise ImageFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
        channels = 3 if magic == b"P6" else 1
        count = width * height * channels
        payload = fh.read(count)
        if len(payload) < count:
            raise ImageFormatError(f"{path}: truncated payload "
                                   f"({len(payload)} of {count} bytes)")
    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        img = raw.reshape(height, width, 3).transpose(2, 0, 1)
    else:
        img = np.broadcast_to(raw.reshape(height, width), (3, height, width))
    return np.ascontiguousarray(img)


def write_ppm(path, image):
    """Write a [3, H, W] float array in [0, 1] as a binary P6 file."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got shape {image.shape}")
    byte_img = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[1], image.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(byte_img.transpose(1, 2, 0).tobytes())


def resize_bilinear(image, target_h, target_w):
    """Bilinear resize of a [C, H, W] array using half-pixel sample centers."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    if (h, w) == (target_h, target_w):
        return image.copy()
    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


@dataclass
class AugmentConfig:
    target_h: int
    target_w: int
    pad: int = 4
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")


def augment_train(image, cfg, rng):
    """Pad -> random crop -> random horizontal flip.

    The rng is consumed in a fixed order (row offset, column offset, flip
    draw) regardless of configuration, so identical streams give identical
    crops even when flipping is disabled.
    """
    image = np.asarray(image)
    c, h, w = image.shape
    if (h, w) != (cfg.target_h, cfg.target_w):
        raise ValueError(f"augment input must be {cfg.target_h}x{cfg.target_w}, "
                         f"got {h}x{w}")
    p = cfg.pad
    if p:
        padded = np.pad(image, ((0, 0), (p, p), (p, p)))
    else:
        padded = image
    dy = int(rng.integers(0, 2 * p + 1))
    dx = int(rng.integers(0, 2 * p + 1))
    out = padded[:, dy:dy + cfg.target_h, dx:dx + cfg.target_w]
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def standardize(images, mean=0.5, std=0.5):
    """Map [0,1] pixels to (x - mean) / std, per channel constant."""
    return (np.asarray(images) - mean) / std


def unstandardize(images, mean=0.5, std=0.5):
    return np.asarray(images) * std + mean


class ImageStore:
    """Loads and caches manifest images, resized to the target geometry."""

    def __init__(self, manifest, root, target_h, target_w):
        self.manifest = manifest
        self.root = Path(root)
        self.target_h = int(target_h)
        self.target_w = int(target_w)
        self._cache = {}

    def image_for(self, sample):
        key = sample.image_path
        if key not in self._cache:
            img = load_image(self.root / key)
            if img.shape[1:] != (self.target_h, self.target_w):
                img = resize_bilinear(img, self.target_h, self.target_w)
            self._cache[key] = img
        return self._cache[key]


def make_batches(samples, labels, store, batch_size, epoch, seed,
                 augment_cfg=None, mean=0.5, std=0.5):
    """Yield (images, labels) train batches for one epoch.

    Shuffling and per-sample augmentation draws derive from (seed, epoch)
    and (seed, epoch, sample index) seed sequences, so any epoch can be
    regenerated without replaying earlier ones.  Fixed-size batches only:
    the final short batch is dropped.
    """
    n = len(samples)
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(
        np.random.SeedSequence([seed, 2, epoch])).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        images = []
        for i in idx:
            img = store.image_for(samples[i])
            if augment_cfg is not None:
                rng = np.random.default_rng(np.random.SeedSequence([seed, 3, epoch, int(i)]))
                img = augment_train(img, augment_cfg, rng)
            images.append(img)
        batch = standardize(np.stack(images), mean, std)
        yield batch, labels[idx]


def eval_batches(samples, store, batch_size, mean=0.5, std=0.5):
    """Yield image batches in manifest order; the short tail batch is kept."""
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([store.image_for(s) for s in chunk])
        yield standardize(images, mean, std), chunk
