"""Seeded synthetic chest-slice phantoms with exact label maps.

Each slice has a bright body ellipse on a dark background, two dark lung
ellipses, and up to three ground-glass blobs and two consolidation blobs
inside the lungs. Consolidation is the brightest tissue and overrides
ground-glass where the two overlap. Intensity ranges per class are disjoint
before blurring and noise are applied.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from hseg.dataio import Manifest, Record, write_image, write_labels
from hseg.errors import ConfigError

NON_LUNG, HEALTHY, GGO, CON = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomConfig:
    n_volumes: int = 12
    slices_per_volume: int = 8
    image_size: int = 64
    seed: int = 0
    test_volumes: int = 4
    background_range: tuple = (0.0, 0.04)
    healthy_range: tuple = (0.05, 0.20)
    ggo_range: tuple = (0.35, 0.55)
    con_range: tuple = (0.65, 0.85)
    body_range: tuple = (0.90, 1.0)
    noise_sigma: float = 0.05
    blur_sigma: float = 0.6
    max_ggo_blobs: int = 3
    max_con_blobs: int = 2
    # fractions of image_size
    lung_half_width: tuple = (0.11, 0.15)
    lung_half_height: tuple = (0.22, 0.30)
    lung_offset: tuple = (0.18, 0.22)
    blob_radius: tuple = (0.07, 0.14)

    def __post_init__(self):
        for name in ("background_range", "healthy_range", "ggo_range", "con_range", "body_range",
                     "lung_half_width", "lung_half_height", "lung_offset", "blob_radius"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be an increasing (low, high) pair, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        ordered = [self.healthy_range, self.ggo_range, self.con_range]
        if not (ordered[0][1] < ordered[1][0] and ordered[1][1] < ordered[2][0]):
            raise ConfigError("intensity ranges must satisfy healthy < GGO < CON without overlap")
        if self.n_volumes < 1 or self.slices_per_volume < 1:
            raise ConfigError("n_volumes and slices_per_volume must be >= 1")
        if not 0 <= self.test_volumes <= self.n_volumes:
            raise ConfigError(f"test_volumes must lie in [0, n_volumes], got {self.test_volumes}")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("noise_sigma and blur_sigma must be nonnegative")
        if self.max_ggo_blobs < 0 or self.max_con_blobs < 0:
            raise ConfigError("blob counts must be nonnegative")
        s = self.image_size
        # smallest lung must still span a few pixels
        if s * self.lung_half_width[0] * 0.75 < 2.0 or s * self.blob_radius[0] < 1.0:
            raise ConfigError(f"image_size {s} is too small for the configured lung/blob geometry")
        reach = self.lung_offset[1] + self.lung_half_width[1]
        if reach >= 0.46 or self.lung_half_height[1] >= 0.38:
            raise ConfigError("lung ellipses do not fit inside the body ellipse")


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate_slice(rng, cfg, geometry, scale):
    """One image/label pair. ``scale`` shrinks the lungs toward the apex/base."""
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    mid = (n - 1) / 2.0

    labels = np.zeros((n, n), dtype=np.uint8)
    clean = np.full((n, n), rng.uniform(*cfg.background_range))

    body = _ellipse(yy, xx, mid, mid, geometry["body_ry"] * n, geometry["body_rx"] * n)
    clean[body] = rng.uniform(*cfg.body_range)

    lungs = np.zeros((n, n), dtype=bool)
    for side in (-1, 1):
        jitter = rng.uniform(0.95, 1.05, size=2)
        lungs |= _ellipse(yy, xx, mid + geometry["lung_dy"] * n,
                          mid + side * geometry["lung_dx"] * n,
                          geometry["lung_ry"] * n * scale * jitter[0],
                          geometry["lung_rx"] * n * scale * jitter[1],
                          side * geometry["tilt"])
    labels[lungs] = HEALTHY
    clean[lungs] = rng.uniform(*cfg.healthy_range)

    lung_pixels = np.argwhere(lungs)
    texture = gaussian_filter(rng.standard_normal((n, n)), 1.5)
    texture *= 0.03 / max(texture.std(), 1e-12)
    for label, count, rng_range in ((GGO, rng.integers(0, cfg.max_ggo_blobs + 1), cfg.ggo_range),
                                    (CON, rng.integers(0, cfg.max_con_blobs + 1), cfg.con_range)):
        for _ in range(int(count)):
            cy, cx = lung_pixels[rng.integers(len(lung_pixels))]
            ry, rx = rng.uniform(*cfg.blob_radius, size=2) * n
            blob = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, np.pi)) & lungs
            labels[blob] = label
            level = rng.uniform(*rng_range)
            clean[blob] = level + (texture[blob] if label == GGO else 0.0)

    image = gaussian_filter(clean, cfg.blur_sigma) if cfg.blur_sigma > 0 else clean
    image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def _volume_geometry(rng, cfg):
    return {
        "body_ry": rng.uniform(0.40, 0.46),
        "body_rx": rng.uniform(0.44, 0.48),
        "lung_dx": rng.uniform(*cfg.lung_offset),
        "lung_dy": rng.uniform(-0.03, 0.03),
        "lung_rx": rng.uniform(*cfg.lung_half_width),
        "lung_ry": rng.uniform(*cfg.lung_half_height),
        "tilt": rng.uniform(-0.15, 0.15),
    }


def generate_volume(rng, cfg):
    geometry = _volume_geometry(rng, cfg)
    k = cfg.slices_per_volume
    images, labels = [], []
    for s in range(k):
        # lungs are widest mid-volume
        scale = 0.75 + 0.25 * np.sin(np.pi * (s + 0.5) / k)
        img, lab = generate_slice(rng, cfg, geometry, scale)
        images.append(img)
        labels.append(lab)
    return np.stack(images), np.stack(labels)


def generate_arrays(cfg):
    """All volumes in memory: lists of ``([S,H,W] images, [S,H,W] labels)``."""
    rng = np.random.default_rng(cfg.seed)
    return [generate_volume(rng, cfg) for _ in range(cfg.n_volumes)]


def volume_name(v):
    return f"vol{v:03d}"


def generate_phantom_dataset(cfg, out_dir):
    """Write images, labels and ``manifest.tsv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    first_test = cfg.n_volumes - cfg.test_volumes
    for v, (imgs, labs) in enumerate(generate_arrays(cfg)):
        split = "test" if v >= first_test else "train"
        for s in range(len(imgs)):
            name = f"{volume_name(v)}_s{s:02d}.pgm"
            write_image(out / "images" / name, imgs[s])
            write_labels(out / "labels" / name, labs[s])
            records.append(Record(out / "images" / name, out / "labels" / name, split, volume_name(v), s))
    manifest = Manifest(records, root=out)
    manifest.write(out / "manifest.tsv")
    return manifest


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def perturb_boundaries(labels, rng, flip_prob=0.5):
    """Simulated second annotation: jitter label boundaries by one pixel.

    Every pixel looks at one random 8-neighbour and, with ``flip_prob``,
    takes that neighbour's label. Interior pixels are unchanged because
    their neighbours carry the same label.
    """
    labels = np.asarray(labels)
    padded = np.pad(labels, [(0, 0)] * (labels.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = labels.shape[-2:]
    shifted = np.stack([padded[..., 1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _NEIGHBOURS])
    choice = rng.integers(0, len(_NEIGHBOURS), size=labels.shape)
    neighbour = np.take_along_axis(shifted, choice[None], axis=0)[0]
    flip = rng.random(labels.shape) < flip_prob
    return np.where(flip, neighbour, labels).astype(labels.dtype)
