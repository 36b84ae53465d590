"""Region shuffling: permute a G x G grid of image blocks among near neighbours."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .superpixel import SuperpixelMap, compact_labels

MASK64 = (1 << 64) - 1


def mix_seed(base, index):
    """SplitMix64 finalizer over (base, index); thread-schedule independent."""
    z = (int(base) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True, eq=False)
class ShufflePlan:
    grid: int
    neighborhood: int
    seed: int
    # source[r, c] is the flat index of the cell moved into (r, c)
    source: np.ndarray

    def displacements(self):
        g = self.grid
        src_r, src_c = np.divmod(self.source, g)
        rows, cols = np.mgrid[0:g, 0:g]
        return rows - src_r, cols - src_c

    def inverse(self):
        inv = np.empty(self.grid * self.grid, dtype=np.int64)
        inv[self.source.ravel()] = np.arange(self.grid * self.grid)
        return ShufflePlan(self.grid, self.neighborhood, self.seed, inv.reshape(self.grid, self.grid))

    def is_identity(self):
        return np.array_equal(self.source.ravel(), np.arange(self.grid * self.grid))


def make_shuffle_plan(grid=7, neighborhood=2, seed=0):
    """Jittered-sort shuffle: each row, then each column, is reordered by
    ``index + U(-k, k)`` keys."""
    if grid < 1 or neighborhood < 0:
        raise ConfigurationError("grid must be >= 1 and neighborhood >= 0")
    rng = np.random.default_rng(seed)
    k = neighborhood
    cells = np.arange(grid * grid).reshape(grid, grid)
    base = np.arange(grid)
    for r in range(grid):
        keys = base + rng.uniform(-k, k, size=grid) if k else base
        cells[r] = cells[r, np.argsort(keys, kind="stable")]
    for c in range(grid):
        keys = base + rng.uniform(-k, k, size=grid) if k else base
        cells[:, c] = cells[np.argsort(keys, kind="stable"), c]
    return ShufflePlan(grid, neighborhood, int(seed), cells)


def _permute_blocks(arr, plan, bh, bw):
    """Move (bh, bw) blocks of the trailing two axes according to ``plan``."""
    g = plan.grid
    lead = arr.shape[:-2]
    blocks = arr.reshape(*lead, g, bh, g, bw)
    blocks = np.moveaxis(blocks, (-4, -2), (-4, -3))  # (..., g, g, bh, bw)
    blocks = blocks.reshape(*lead, g * g, bh, bw)
    moved = blocks[..., plan.source.ravel(), :, :]
    moved = moved.reshape(*lead, g, g, bh, bw)
    moved = np.moveaxis(moved, -3, -2)  # (..., g, bh, g, bw)
    return np.ascontiguousarray(moved.reshape(arr.shape))


def shuffle_arrays(image, masks, labels, plan):
    """Apply ``plan`` to an (H, W, 3) image, (5, H, W) masks and (H, W) labels."""
    h, w = labels.shape
    g = plan.grid
    if h % g or w % g:
        raise ConfigurationError(f"extents {h}x{w} not divisible by grid {g}")
    bh, bw = h // g, w // g
    img = _permute_blocks(np.moveaxis(image, -1, 0), plan, bh, bw)
    img = np.ascontiguousarray(np.moveaxis(img, 0, -1))
    new_masks = _permute_blocks(masks, plan, bh, bw)
    # tag each label with its source block so grid-split regions stay distinct
    block_id = np.repeat(np.repeat(np.arange(g * g).reshape(g, g), bh, 0), bw, 1)
    tagged = labels.astype(np.int64) * (g * g) + block_id
    new_labels = compact_labels(_permute_blocks(tagged, plan, bh, bw))
    return img, new_masks, new_labels


def apply_shuffle(sample, plan):
    img, masks, labels = shuffle_arrays(sample.image, sample.masks, sample.map.labels, plan)
    return dataclasses.replace(
        sample,
        image=img,
        masks=masks,
        map=SuperpixelMap(labels, int(labels.max()) + 1),
        id=f"{sample.id}~shuf{plan.seed % 100000}",
    )


def mix_batch(batch, seed, grid=7, neighborhood=2):
    """Replace floor(B/2) randomly chosen samples by shuffled versions.

    Returns the new batch and the indices that were shuffled.
    """
    batch = list(batch)
    n_shuffled = len(batch) // 2
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(batch), size=n_shuffled, replace=False).tolist()) if n_shuffled else []
    out = list(batch)
    for i in chosen:
        plan = make_shuffle_plan(grid, neighborhood, mix_seed(seed, i))
        out[i] = apply_shuffle(batch[i], plan)
    return out, chosen
