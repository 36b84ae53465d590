"""Superpixel maps: SLIC segmentation, validation, pooling and the .spx format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

from .errors import ConfigurationError, FormatError
from .tensor import Tensor, _emit

SPX_MAGIC = b"SPXM"
SPX_VERSION = 1
_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class SuperpixelMap:
    labels: np.ndarray  # (H, W) integer grid
    region_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ConfigurationError("superpixel labels must be a 2-D grid")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))
        object.__setattr__(self, "region_count", int(self.region_count))

    @classmethod
    def from_labels(cls, labels):
        """Build a map whose region count is inferred from ``labels``."""
        labels = np.asarray(labels)
        return cls(labels, int(labels.max()) + 1 if labels.size else 0)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def region_sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.region_count)

    def __eq__(self, other):
        return (
            isinstance(other, SuperpixelMap)
            and self.region_count == other.region_count
            and np.array_equal(self.labels, other.labels)
        )


def compact_labels(labels):
    """Renumber labels to 0..K-1 in order of first appearance (row-major)."""
    flat = np.asarray(labels).ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[inverse].reshape(np.shape(labels))


# ---------------------------------------------------------------------------
# Validation


def validate_map(spmap, check_connectivity=False):
    """Return a list of violation strings; empty means the map is valid."""
    labels = spmap.labels
    k = spmap.region_count
    violations = []
    if k < 1:
        violations.append("region count must be positive")
        return violations
    if labels.size == 0:
        violations.append("map is empty")
        return violations
    lo, hi = int(labels.min()), int(labels.max())
    if lo < 0 or hi >= k:
        violations.append(f"label out of range [0, {k - 1}] (found {lo}..{hi})")
        inrange = labels[(labels >= 0) & (labels < k)]
    else:
        inrange = labels
    counts = np.bincount(inrange.ravel(), minlength=k)[:k]
    for empty in np.flatnonzero(counts == 0):
        violations.append(f"label {empty} empty")
    if check_connectivity and not violations:
        for region in range(k):
            _, ncomp = ndimage.label(labels == region, structure=_FOUR_CONN)
            if ncomp > 1:
                violations.append(f"region {region} has {ncomp} 4-connected components")
    return violations


# ---------------------------------------------------------------------------
# SLIC


def _to_lab(image):
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigurationError("SLIC expects an (H, W, 3) RGB image")
    rgb = img.astype(np.float64)
    if img.dtype == np.uint8 or rgb.max() > 1.0:
        rgb = rgb / 255.0
    # D65 white point, sRGB transfer
    return rgb2lab(np.clip(rgb, 0.0, 1.0), illuminant="D65")


def _grid_shape(h, w, target):
    step = np.sqrt(h * w / target)
    ny = int(min(h, max(1, round(h / step))))
    nx = int(min(w, max(1, int(np.ceil(target / ny)))))
    return ny, nx


def slic_initial_centers(lab, target_regions):
    """Grid-seeded centers as rows of (y, x, L, a, b), coordinates in pixel-centre units."""
    h, w = lab.shape[:2]
    ny, nx = _grid_shape(h, w, target_regions)
    sy, sx = h / ny, w / nx
    # squared gradient magnitude with edge replication
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    grad = (gy ** 2).sum(-1) + (gx ** 2).sum(-1)

    centers = []
    for iy in range(ny):
        for ix in range(nx):
            cy, cx = (iy + 0.5) * sy, (ix + 0.5) * sx
            py = min(int(np.floor(cy)), h - 1)
            px = min(int(np.floor(cx)), w - 1)
            best = grad[py, px]
            by, bx = py, px
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    qy, qx = py + dy, px + dx
                    if 0 <= qy < h and 0 <= qx < w and grad[qy, qx] < best:
                        best, by, bx = grad[qy, qx], qy, qx
            if (by, bx) != (py, px):
                cy, cx = by + 0.5, bx + 0.5
            centers.append([cy, cx, *lab[by, bx]])
    return np.array(centers, dtype=np.float64)


def slic_segment(image, target_regions=196, compactness=10.0, iterations=10,
                 enforce_connectivity=True):
    """SLIC superpixels; the returned region count may differ from the target."""
    lab = _to_lab(image)
    h, w = lab.shape[:2]
    if target_regions < 1 or target_regions > h * w:
        raise ConfigurationError(f"target_regions must lie in [1, {h * w}]")
    if compactness <= 0:
        raise ConfigurationError("compactness must be positive")
    step = np.sqrt(h * w / target_regions)
    centers = slic_initial_centers(lab, target_regions)
    if len(centers) == 1:
        return SuperpixelMap(np.zeros((h, w), dtype=np.int64), 1)

    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    spatial_weight = compactness / step
    labels = np.full((h, w), -1, dtype=np.int64)
    for _ in range(max(1, iterations)):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for k, (cy, cx, cl, ca, cb) in enumerate(centers):
            y0, y1 = max(int(np.floor(cy - step)), 0), min(int(np.ceil(cy + step)), h)
            x0, x1 = max(int(np.floor(cx - step)), 0), min(int(np.ceil(cx + step)), w)
            win = lab[y0:y1, x0:x1]
            dc = np.sqrt((win[..., 0] - cl) ** 2 + (win[..., 1] - ca) ** 2 + (win[..., 2] - cb) ** 2)
            ds = np.sqrt((ys[y0:y1] - cy) ** 2 + (xs[:, x0:x1] - cx) ** 2)
            d = dc + spatial_weight * ds
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        missing = labels < 0
        if missing.any():
            my, mx = np.nonzero(missing)
            d2 = (my[:, None] + 0.5 - centers[None, :, 0]) ** 2 + (mx[:, None] + 0.5 - centers[None, :, 1]) ** 2
            labels[my, mx] = np.argmin(d2, axis=1)
        centers = _update_centers(centers, labels, lab)

    if enforce_connectivity:
        labels = _enforce_connectivity(labels, (h * w / target_regions) / 4.0)
    else:
        labels = compact_labels(labels)
    return SuperpixelMap(labels, int(labels.max()) + 1)


def _update_centers(centers, labels, lab):
    k = len(centers)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    feats = [yy.ravel() + 0.5, xx.ravel() + 0.5] + [lab[..., c].ravel() for c in range(3)]
    new = centers.copy()
    nonempty = counts > 0
    for j, f in enumerate(feats):
        sums = np.bincount(flat, weights=f, minlength=k)
        new[nonempty, j] = sums[nonempty] / counts[nonempty]
    return new


def _enforce_connectivity(labels, min_size):
    """Split regions into 4-connected fragments; merge small fragments into
    their largest adjacent fragment."""
    h, w = labels.shape
    comp = np.zeros((h, w), dtype=np.int64)
    ncomp = 0
    for region in np.unique(labels):
        lab_r, n = ndimage.label(labels == region, structure=_FOUR_CONN)
        sel = lab_r > 0
        comp[sel] = lab_r[sel] + ncomp
        ncomp += n
    comp -= 1
    if ncomp == 1:
        return np.zeros_like(labels)

    # adjacency between fragments
    pairs = []
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    pairs = np.concatenate(pairs)
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)
    neighbours = [set() for _ in range(ncomp)]
    for a, b in pairs:
        neighbours[a].add(int(b))

    sizes = np.bincount(comp.ravel(), minlength=ncomp)
    parent = np.arange(ncomp)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    first_pixel = np.full(ncomp, h * w)
    np.minimum.at(first_pixel, comp.ravel(), np.arange(h * w))
    order = sorted(range(ncomp), key=lambda i: (sizes[i], first_pixel[i]))
    merged_size = sizes.astype(np.int64).copy()
    for frag in order:
        root = find(frag)
        if root != frag or merged_size[root] >= min_size:
            continue
        cands = {find(n) for n in neighbours[root]} - {root}
        if not cands:
            continue
        target = max(cands, key=lambda r: (merged_size[r], -r))
        parent[root] = target
        merged_size[target] += merged_size[root]
        neighbours[target] |= neighbours[root]
    roots = np.array([find(i) for i in range(ncomp)])
    return compact_labels(roots[comp])


# ---------------------------------------------------------------------------
# Differentiable pooling / unpooling


@dataclass(eq=False)
class SuperpixelRegionalFeatures:
    """Per-region means for one or more samples.

    ``values`` has shape (sum of K over samples, C); sample ``n`` owns rows
    ``offsets[n]:offsets[n + 1]``.
    """

    values: Tensor
    maps: tuple
    offsets: np.ndarray

    @property
    def region_count(self):
        return int(self.offsets[-1])

    @property
    def channels(self):
        return self.values.shape[1]

    def sample(self, n):
        return self.values.data[self.offsets[n]:self.offsets[n + 1]]


def _as_maps(maps, n):
    if isinstance(maps, SuperpixelMap):
        maps = (maps,)
    maps = tuple(maps)
    if len(maps) != n:
        raise ConfigurationError(f"{n} samples but {len(maps)} superpixel maps")
    return maps


def _global_labels(maps):
    offsets = np.zeros(len(maps) + 1, dtype=np.int64)
    for i, m in enumerate(maps):
        offsets[i + 1] = offsets[i] + m.region_count
    glabels = np.concatenate([m.labels.ravel() + offsets[i] for i, m in enumerate(maps)])
    return glabels, offsets


def _segment_sum(labels, values, total):
    """Sum rows of ``values`` (P, C) into ``total`` buckets; fixed reduction order."""
    return np.stack(
        [np.bincount(labels, weights=values[:, ch], minlength=total) for ch in range(values.shape[1])],
        axis=1,
    )


def _anchored_mean(labels, values, total, counts):
    """Per-region mean computed as ``anchor + sum(x - anchor) / n``.

    The anchor is each region's first pixel, which makes the mean of a
    region-constant input exact (a plain sum / n can be off by one ulp) and
    keeps the sum well conditioned.
    """
    _, first = np.unique(labels, return_index=True)
    anchor = values[first]  # every region is non-empty, so this is (total, C)
    return anchor + _segment_sum(labels, values - anchor[labels], total) / counts[:, None]


def sp_avg_pool(features, maps):
    """Mean of each channel over each superpixel, per sample."""
    n, c, h, w = features.shape
    maps = _as_maps(maps, n)
    for m in maps:
        if (m.height, m.width) != (h, w):
            raise ConfigurationError(f"feature extents {(h, w)} != map extents {(m.height, m.width)}")
    glabels, offsets = _global_labels(maps)
    total = int(offsets[-1])
    counts = np.bincount(glabels, minlength=total).astype(features.dtype)
    if np.any(counts == 0):
        raise ConfigurationError("superpixel map has an empty region")
    flat = features.data.transpose(0, 2, 3, 1).reshape(-1, c)  # (N*H*W, C)
    out = _anchored_mean(glabels, flat, total, counts).astype(features.dtype)

    def backward(g):
        per_pixel = (g / counts[:, None])[glabels]  # (N*H*W, C)
        return (per_pixel.reshape(n, h, w, c).transpose(0, 3, 1, 2),)

    values = _emit("sp_avg_pool", out, (features,), backward)
    return SuperpixelRegionalFeatures(values, maps, offsets)


def sp_unpool(regional, maps=None):
    """Broadcast each region's feature vector back onto its pixels."""
    maps = regional.maps if maps is None else _as_maps(maps, len(regional.maps))
    glabels, offsets = _global_labels(maps)
    if not np.array_equal(offsets, regional.offsets):
        raise ConfigurationError("regional features and maps disagree on region counts")
    n = len(maps)
    h, w = maps[0].height, maps[0].width
    c = regional.channels
    vals = regional.values
    out = vals.data[glabels].reshape(n, h, w, c).transpose(0, 3, 1, 2)
    total = int(offsets[-1])

    def backward(g):
        flat = g.transpose(0, 2, 3, 1).reshape(-1, c)
        return (_segment_sum(glabels, flat, total).astype(vals.dtype),)

    return _emit("sp_unpool", np.ascontiguousarray(out), (vals,), backward)


def sp_paint(values, spmap):
    """Paint per-region values (K, C) onto pixels, returning (C, H, W)."""
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != spmap.region_count:
        raise ConfigurationError(f"{values.shape[0]} region values for a map with K={spmap.region_count}")
    return np.ascontiguousarray(values[spmap.labels].transpose(2, 0, 1))


def region_means(pixels, spmap):
    """Non-differentiable mean of (C, H, W) pixel values per region -> (K, C)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    flat = spmap.labels.ravel()
    counts = np.bincount(flat, minlength=spmap.region_count)
    if np.any(counts == 0):
        raise ConfigurationError("superpixel map has an empty region")
    return _anchored_mean(flat, pixels.reshape(len(pixels), -1).T, spmap.region_count, counts)


# ---------------------------------------------------------------------------
# .spx serialization


def save_map(path, spmap):
    problems = validate_map(spmap)
    if problems:
        raise ConfigurationError("refusing to save invalid map: " + "; ".join(problems))
    header = SPX_MAGIC + struct.pack("<4I", SPX_VERSION, spmap.height, spmap.width, spmap.region_count)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(spmap.labels.astype("<u4").tobytes())


def load_map(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_map(blob)


def decode_map(blob):
    if len(blob) < 4 or blob[:4] != SPX_MAGIC:
        raise FormatError("bad magic, expected b'SPXM'", 0)
    if len(blob) < 20:
        raise FormatError("truncated header", len(blob))
    version, h, w, k = struct.unpack_from("<4I", blob, 4)
    if version != SPX_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    need = h * w * 4
    body = blob[20:]
    if len(body) < need:
        raise FormatError(f"truncated: header claims {h}x{w} labels, {len(body) // 4} present", 20 + len(body))
    if len(body) > need:
        raise FormatError("trailing bytes after label grid", 20 + need)
    labels = np.frombuffer(body, dtype="<u4").reshape(h, w).astype(np.int64)
    return SuperpixelMap(labels, k)
