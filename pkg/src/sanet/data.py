"""Synthetic dermoscopy-like samples, photometric augmentation and image I/O."""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, UnsupportedVariantError
from .metrics import CLASS_NAMES
from .rsm import mix_seed
from .superpixel import SuperpixelMap, load_map, save_map, slic_segment

# reference dataset statistics, in CLASS_NAMES order
REFERENCE_BLANK_PCT = (41.0, 93.0, 74.0, 77.0, 96.0)
REFERENCE_RATIO_PCT = (13.70, 0.67, 1.27, 3.09, 0.42)


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    masks: np.ndarray  # (5, H, W) uint8 in {0, 1}
    map: SuperpixelMap
    id: str

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if self.masks.shape != (len(CLASS_NAMES), h, w):
            raise ConfigurationError(f"masks {self.masks.shape} do not match image {h}x{w}")
        if (self.map.height, self.map.width) != (h, w):
            raise ConfigurationError("superpixel map extents do not match image")


@dataclass(frozen=True)
class SynthConfig:
    count: int = 64
    height: int = 140
    width: int = 140
    seed: int = 0
    blank_pct: tuple = REFERENCE_BLANK_PCT
    ratio_pct: tuple = REFERENCE_RATIO_PCT
    regions: int = 196
    compactness: float = 10.0
    slic_iters: int = 10
    texture_period: int = 6
    id_prefix: str = "syn"

    def __post_init__(self):
        for name in ("blank_pct", "ratio_pct"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.blank_pct) != 5 or len(self.ratio_pct) != 5:
            raise ConfigurationError("blank_pct and ratio_pct need 5 values")
        if any(not 0 <= b <= 100 for b in self.blank_pct):
            raise ConfigurationError("blank percentages must lie in [0, 100]")
        if any(not 0 < r < 100 for r in self.ratio_pct):
            raise ConfigurationError("pixel-ratio targets must lie in (0, 100)")
        if self.count < 1 or self.height < 8 or self.width < 8:
            raise ConfigurationError("count must be >= 1 and extents >= 8")


# ---------------------------------------------------------------------------
# Texture stamping


def _disk(h, w, cy, cx, r):
    yy, xx = np.ogrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _grid_lines(h, w, period, width, phase):
    yy, xx = np.ogrid[0:h, 0:w]
    return (((yy + phase[0]) % period) < width) | (((xx + phase[1]) % period) < width)


class _Canvas:
    def __init__(self, rng, h, w, period):
        self.rng = rng
        self.h, self.w = h, w
        self.period = period
        skin = np.array([222, 184, 156]) + rng.uniform(-15, 15, 3)
        self.image = np.empty((h, w, 3), dtype=np.float64)
        self.image[:] = skin
        self.cy = h / 2 + rng.uniform(-0.06, 0.06) * h
        self.cx = w / 2 + rng.uniform(-0.06, 0.06) * w
        self.ay = rng.uniform(0.32, 0.42) * h
        self.ax = rng.uniform(0.32, 0.42) * w
        yy, xx = np.ogrid[0:h, 0:w]
        self.rho = np.sqrt(((yy - self.cy) / self.ay) ** 2 + ((xx - self.cx) / self.ax) ** 2)
        self.angle = np.arctan2((yy - self.cy) / self.ay, (xx - self.cx) / self.ax)
        self.lesion = self.rho <= 1.0
        base = np.array([150, 100, 70]) + rng.uniform(-20, 20, 3)
        self.image[self.lesion] = base

    def _inside_point(self, margin):
        """Random point whose disk of radius ``margin`` stays within the lesion."""
        r = np.sqrt(self.rng.uniform(0, 1))
        t = self.rng.uniform(0, 2 * np.pi)
        sy, sx = max(self.ay - margin, 0.0), max(self.ax - margin, 0.0)
        return self.cy + r * np.sin(t) * sy, self.cx + r * np.cos(t) * sx

    def patch_region(self, target_area, radius_range, occupied):
        """Union of lesion-bound disks grown until ``target_area`` pixels."""
        region = np.zeros((self.h, self.w), dtype=bool)
        for _ in range(60):
            if region.sum() >= target_area:
                break
            r = self.rng.uniform(*radius_range)
            best = None
            for _ in range(8):
                cy, cx = self._inside_point(r)
                disk = _disk(self.h, self.w, cy, cx, r) & self.lesion
                clash = np.count_nonzero(disk & occupied)
                if best is None or clash < best[0]:
                    best = (clash, disk)
            region |= best[1]
        return region

    def streak_region(self, target_area):
        """Annular sectors hugging the inner lesion boundary."""
        region = np.zeros((self.h, self.w), dtype=bool)
        for _ in range(20):
            if region.sum() >= target_area:
                break
            t0 = self.rng.uniform(-np.pi, np.pi)
            span = self.rng.uniform(0.5, 1.0)
            d = np.angle(np.exp(1j * (self.angle - t0)))
            region |= (np.abs(d) < span / 2) & (self.rho > 0.62) & self.lesion
        return region


def _stamp(canvas, k, area, occupied):
    rng, img, p = canvas.rng, canvas.image, canvas.period
    h, w = canvas.h, canvas.w
    phase = rng.integers(0, p, 2)
    if k == 0:  # pigment network: dark reticular lines
        region = canvas.patch_region(area, (10, 16), occupied)
        lines = _grid_lines(h, w, p, 2, phase)
        img[region] = (175, 125, 90)
        img[region & lines] = (60, 35, 22)
    elif k == 1:  # negative network: light lines on dark cells
        region = canvas.patch_region(area, (8, 13), occupied)
        lines = _grid_lines(h, w, p, 2, phase)
        img[region] = (85, 50, 35)
        img[region & lines] = (235, 215, 195)
    elif k == 2:  # milia like cyst: small bright disks
        region = canvas.patch_region(area, (6, 9), occupied)
        img[region] = (130, 90, 65)
        ys, xs = np.nonzero(region)
        for j in rng.choice(len(ys), size=max(1, len(ys) // 25), replace=False):
            img[_disk(h, w, ys[j], xs[j], 1.6) & region] = (250, 248, 240)
    elif k == 3:  # globules: medium dark blobs
        region = canvas.patch_region(area, (8, 14), occupied)
        img[region] = (120, 80, 55)
        ys, xs = np.nonzero(region)
        for j in rng.choice(len(ys), size=max(1, len(ys) // 30), replace=False):
            img[_disk(h, w, ys[j], xs[j], 2.4) & region] = (45, 25, 18)
    else:  # streaks: radial line segments from the inner boundary
        region = canvas.streak_region(area)
        spokes = (np.mod(canvas.angle * 40 / np.pi + phase[0], 2.0) < 0.8)
        img[region] = (165, 115, 80)
        img[region & spokes] = (40, 22, 15)
    return region


def generate_sample(config, index):
    rng = np.random.default_rng(mix_seed(config.seed, index))
    h, w = config.height, config.width
    canvas = _Canvas(rng, h, w, config.texture_period)
    masks = np.zeros((5, h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    present = rng.uniform(0, 100, 5) >= np.asarray(config.blank_pct)
    jitter = rng.uniform(0.7, 1.3, 5)
    for k in np.argsort([-r for r in config.ratio_pct], kind="stable"):
        if not present[k]:
            continue
        blank = config.blank_pct[k] / 100.0
        area = config.ratio_pct[k] / 100.0 / max(1.0 - blank, 1e-3) * h * w * jitter[k]
        region = _stamp(canvas, k, min(area, canvas.lesion.sum() * 0.8), occupied)
        masks[k] = region
        occupied |= region
    img = canvas.image + rng.normal(0, 3.0, canvas.image.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    spmap = slic_segment(img, config.regions, config.compactness, config.slic_iters)
    return Sample(img, masks, spmap, f"{config.id_prefix}{index:05d}")


def lesion_mask(config, index):
    """The lesion ellipse of sample ``index`` (regenerated from the seed)."""
    rng = np.random.default_rng(mix_seed(config.seed, index))
    return _Canvas(rng, config.height, config.width, config.texture_period).lesion


def worker_count():
    env = os.environ.get("SANET_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def generate_samples(config, threads=None):
    threads = threads or worker_count()
    if threads == 1:
        return [generate_sample(config, i) for i in range(config.count)]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda i: generate_sample(config, i), range(config.count)))


def synth_generate(config, out_dir, threads=None):
    """Generate ``config.count`` samples and write them under ``out_dir``."""
    samples = generate_samples(config, threads)
    save_dataset(out_dir, samples)
    return samples


# ---------------------------------------------------------------------------
# Augmentation (photometric only; masks and maps are never touched)


def add_gaussian_noise(image, sigma, rng):
    noisy = image.astype(np.float64) + rng.normal(0.0, sigma, image.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def adjust_contrast(image, factor):
    img = image.astype(np.float64)
    mean = img.mean()
    return np.clip(np.rint(mean + factor * (img - mean)), 0, 255).astype(np.uint8)


def gaussian_blur(image, sigma):
    img = image.astype(np.float64)
    out = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def unsharp_mask(image, amount, sigma=1.0):
    img = image.astype(np.float64)
    blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(np.rint(img + amount * (img - blurred)), 0, 255).astype(np.uint8)


def augment(sample, seed, probability=0.5):
    rng = np.random.default_rng(seed)
    img = sample.image
    if rng.uniform() < probability:
        img = add_gaussian_noise(img, rng.uniform(2.0, 12.0), rng)
    if rng.uniform() < probability:
        img = adjust_contrast(img, rng.uniform(0.7, 1.3))
    if rng.uniform() < probability:
        if rng.uniform() < 0.5:
            img = gaussian_blur(img, rng.uniform(0.5, 1.5))
        else:
            img = unsharp_mask(img, rng.uniform(0.3, 1.0))
    if img is sample.image:
        return sample
    return dataclasses.replace(sample, image=img)


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_header(blob, magic, expect_channels):
    if len(blob) < 2:
        raise FormatError("file too short for a netpbm header", 0)
    tag = blob[:2]
    if tag in (b"P1", b"P2", b"P3", b"P4"):
        raise UnsupportedVariantError(f"netpbm variant {tag.decode()} is not supported", 0)
    if tag != magic:
        raise FormatError(f"expected magic {magic.decode()}, found {tag!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b"#"):
            if blob[pos:pos + 1] == b"#":
                while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header field", start)
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedVariantError(f"maxval {maxval} is not supported (need 255)", pos)
    need = width * height * expect_channels
    if len(blob) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(blob) - pos}", len(blob))
    return width, height, pos


def load_ppm(path):
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P6", 3)
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()


def save_ppm(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ConfigurationError("PPM images must be (H, W, 3) uint8")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image).tobytes())


def load_pgm(path, binarize=True):
    blob = Path(path).read_bytes()
    w, h, pos = _read_header(blob, b"P5", 1)
    arr = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()
    return (arr > 127).astype(np.uint8) if binarize else arr


def save_pgm(path, mask):
    """Write a binary mask with foreground 255 (non-binary uint8 data is kept as is)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ConfigurationError("PGM masks must be 2-D")
    if mask.dtype == bool or mask.max(initial=0) <= 1:
        data = (mask > 0).astype(np.uint8) * 255
    else:
        data = mask.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(data).tobytes())


# ---------------------------------------------------------------------------
# Dataset layout: <id>.ppm, <id>.attr<k>.pgm, <id>.spx, manifest.txt


def save_sample(directory, sample):
    d = Path(directory)
    save_ppm(d / f"{sample.id}.ppm", sample.image)
    for k in range(len(CLASS_NAMES)):
        save_pgm(d / f"{sample.id}.attr{k}.pgm", sample.masks[k])
    save_map(d / f"{sample.id}.spx", sample.map)


def save_dataset(directory, samples):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(d, s)
    (d / "manifest.txt").write_text("".join(f"{s.id}\n" for s in samples))


def read_manifest(directory):
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise FormatError(f"missing manifest {path}", 0)
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_masks(directory, sample_id):
    d = Path(directory)
    return np.stack([load_pgm(d / f"{sample_id}.attr{k}.pgm") for k in range(len(CLASS_NAMES))])


def load_sample(directory, sample_id):
    d = Path(directory)
    return Sample(load_ppm(d / f"{sample_id}.ppm"), load_masks(d, sample_id),
                  load_map(d / f"{sample_id}.spx"), sample_id)


def load_dataset(directory):
    return [load_sample(directory, i) for i in read_manifest(directory)]


def image_to_array(image):
    """uint8 (H, W, 3) -> float (3, H, W), roughly zero-centred."""
    return (np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0 - 0.5) / 0.25
