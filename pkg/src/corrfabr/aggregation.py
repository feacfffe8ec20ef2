"""Paired radiology/pathology feature sets for fusion training.

Three regimes are supported:

* pixel-pixel: spatially aligned maps, one row per pixel, class balanced
  between cancer and non-cancer pixels;
* lesion-biopsy and lesion-section: one vector per lesion region (mean of a
  low-res map, or 95th percentile over high-res patch vectors) plus sampled
  normal regions, paired across randomly chosen radiology slices.

The two region regimes differ only in which pathology region was pooled
upstream, so both go through :func:`build_pairs_by_region`.
"""

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor_io import load_tensor, save_tensor

LESION = "lesion"
NORMAL = "normal"
MAX_WINDOW_ATTEMPTS = 10_000
PIXEL_CAP = 1_000_000


@dataclass
class PairedFeatureSet:
    rad: np.ndarray                  # [N, 64 * n]
    pat: np.ndarray                  # [N, 64]
    tags: list = field(default_factory=list)
    balanced: bool = True

    def __post_init__(self):
        self.rad = np.atleast_2d(np.asarray(self.rad, dtype=np.float64))
        self.pat = np.atleast_2d(np.asarray(self.pat, dtype=np.float64))
        if self.rad.shape[0] != self.pat.shape[0]:
            raise ValueError(f"row mismatch: {self.rad.shape[0]} radiology vs "
                             f"{self.pat.shape[0]} pathology")
        if not self.tags:
            self.tags = [LESION] * self.rad.shape[0]
        if len(self.tags) != self.rad.shape[0]:
            raise ValueError("one tag per row required")
        if not (np.all(np.isfinite(self.rad)) and np.all(np.isfinite(self.pat))):
            raise ValueError("non-finite feature rows")

    def __len__(self):
        return self.rad.shape[0]


def concat_pairs(sets, rng=None, cap=None):
    """Stack several sets; with ``cap`` rows are subsampled (seeded) to fit.

    When every input set is class balanced, the subsample takes ``cap // 2``
    rows of each tag so the result stays balanced.
    """
    sets = list(sets)
    if not sets:
        raise ValueError("no feature sets to concatenate")
    rad = np.concatenate([s.rad for s in sets])
    pat = np.concatenate([s.pat for s in sets])
    tags = [t for s in sets for t in s.tags]
    balanced = all(s.balanced for s in sets)
    if cap is not None and rad.shape[0] > cap:
        arr = np.array(tags)
        if balanced:
            keep = np.concatenate([rng.choice(np.flatnonzero(arr == t), cap // 2, replace=False)
                                   for t in (LESION, NORMAL)])
        else:
            keep = rng.choice(rad.shape[0], cap, replace=False)
        keep = np.sort(keep)
        rad, pat, tags = rad[keep], pat[keep], [tags[i] for i in keep]
    return PairedFeatureSet(rad, pat, tags, balanced)


def save_pairs(pairs: PairedFeatureSet, directory):
    os.makedirs(directory, exist_ok=True)
    save_tensor(pairs.rad, os.path.join(directory, "rad.cftn"))
    save_tensor(pairs.pat, os.path.join(directory, "pat.cftn"))
    with open(os.path.join(directory, "tags.json"), "w") as fh:
        json.dump({"tags": pairs.tags, "balanced": pairs.balanced}, fh)


def load_pairs(directory) -> PairedFeatureSet:
    with open(os.path.join(directory, "tags.json")) as fh:
        meta = json.load(fh)
    return PairedFeatureSet(load_tensor(os.path.join(directory, "rad.cftn")),
                            load_tensor(os.path.join(directory, "pat.cftn")),
                            meta["tags"], meta["balanced"])


# --------------------------------------------------------------------------
# Pixel-pixel
# --------------------------------------------------------------------------

def aggregate_pixel_pixel(rad, pat, cancer_mask, rng, cap=PIXEL_CAP):
    """One row per pixel of aligned maps.

    ``rad`` is a list of ``[H, W, 64]`` maps (one per radiology sequence),
    concatenated channel-wise.  Cancer and non-cancer rows are subsampled to
    equal counts, at most ``cap`` rows in total.  If one class is absent no
    balancing is possible: every row is kept (subject to ``cap``), a warning
    is issued and ``balanced`` is False.
    """
    rad = [np.asarray(r, dtype=np.float64) for r in rad]
    pat = np.asarray(pat, dtype=np.float64)
    cancer = np.asarray(cancer_mask) > 0
    h, w = cancer.shape
    for r in rad + [pat]:
        if r.shape[:2] != (h, w):
            raise ValueError(f"shape mismatch: {r.shape[:2]} vs mask {(h, w)}")
    rad_rows = np.concatenate(rad, axis=2).reshape(h * w, -1)
    pat_rows = pat.reshape(h * w, -1)
    flat = cancer.ravel()
    pos = np.flatnonzero(flat)
    neg = np.flatnonzero(~flat)
    if len(pos) == 0 or len(neg) == 0:
        warnings.warn("pixel-pixel aggregation: only one class present, rows not balanced")
        keep = np.arange(h * w)
        if len(keep) > cap:
            keep = np.sort(rng.choice(keep, cap, replace=False))
        balanced = False
    else:
        m = min(len(pos), len(neg), cap // 2)
        keep = np.sort(np.concatenate([rng.choice(pos, m, replace=False),
                                       rng.choice(neg, m, replace=False)]))
        balanced = True
    tags = [LESION if flat[i] else NORMAL for i in keep]
    return PairedFeatureSet(rad_rows[keep], pat_rows[keep], tags, balanced)


# --------------------------------------------------------------------------
# Region pooling
# --------------------------------------------------------------------------

def aggregate_region_mean(feat, mask):
    """Channel means of ``feat [H, W, C]`` over the pixels where ``mask`` is set."""
    feat = np.asarray(feat, dtype=np.float64)
    sel = np.asarray(mask) > 0
    if sel.shape != feat.shape[:2]:
        raise ValueError(f"mask {sel.shape} does not match map {feat.shape[:2]}")
    if not sel.any():
        raise ValueError("empty mask")
    return feat[sel].mean(axis=0)


def percentile_nearest_rank(values, q=95.0, axis=0):
    """Nearest-rank percentile: the ``ceil(q/100 * m)``-th smallest value."""
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[axis]
    if m == 0:
        raise ValueError("empty region")
    rank = max(1, math.ceil(q / 100.0 * m))
    return np.take(np.sort(values, axis=axis), rank - 1, axis=axis)


def _cells_mask(grid_shape, region):
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != tuple(grid_shape):
            raise ValueError(f"region mask {region.shape} does not match grid {grid_shape}")
        return region
    sel = np.zeros(grid_shape, dtype=bool)
    for r, c in region:
        sel[r, c] = True
    return sel


def aggregate_region_p95(patches, region=None):
    """Per-channel 95th percentile (nearest rank) over selected patch vectors.

    ``region`` is a boolean grid mask or an iterable of ``(row, col)`` cells;
    ``None`` selects the whole grid.
    """
    vectors = patches.vectors
    if region is None:
        sel = np.ones(vectors.shape[:2], dtype=bool)
    else:
        sel = _cells_mask(vectors.shape[:2], region)
    if not sel.any():
        raise ValueError("empty region")
    return percentile_nearest_rank(vectors[sel], 95.0, axis=0)


def tissue_cells(tissue_mask, patch=224, min_fraction=0.5):
    """Grid cells whose patch is at least ``min_fraction`` tissue."""
    tissue = np.asarray(tissue_mask) > 0
    rows, cols = tissue.shape[0] // patch, tissue.shape[1] // patch
    t = tissue[:rows * patch, :cols * patch].reshape(rows, patch, cols, patch)
    return t.mean(axis=(1, 3)) >= min_fraction


# --------------------------------------------------------------------------
# Normal regions
# --------------------------------------------------------------------------

def _window_sums(mask, size):
    integral = np.pad(np.cumsum(np.cumsum(mask.astype(np.int64), 0), 1), ((1, 0), (1, 0)))
    return (integral[size:, size:] - integral[:-size, size:]
            - integral[size:, :-size] + integral[:-size, :-size])


def sample_normal_windows(organ_mask, lesion_mask, size=20, count=1, rng=None,
                          max_attempts=MAX_WINDOW_ATTEMPTS):
    """Top-left corners of ``count`` ``size x size`` windows lying inside the
    organ and outside the lesion, drawn by seeded rejection sampling."""
    organ = np.asarray(organ_mask) > 0
    lesion = np.asarray(lesion_mask) > 0
    if organ.shape != lesion.shape:
        raise ValueError("organ and lesion masks must have the same shape")
    h, w = organ.shape
    if h < size or w < size:
        raise ValueError("no feasible window")
    ok = ((_window_sums(organ, size) == size * size)
          & (_window_sums(lesion, size) == 0))
    if not ok.any():
        raise ValueError("no feasible window")
    found = []
    for _ in range(max_attempts):
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        if ok[r, c]:
            found.append((r, c))
            if len(found) == count:
                return found
    raise ValueError(f"no feasible window: found {len(found)} of {count} "
                     f"in {max_attempts} attempts")


def window_mask(shape, corner, size):
    m = np.zeros(shape, dtype=bool)
    r, c = corner
    m[r:r + size, c:c + size] = True
    return m


def sample_normal_regions(feat, organ_mask, lesion_mask, size=20, count=1, rng=None):
    """Mean feature vectors of ``count`` random normal windows."""
    feat = np.asarray(feat, dtype=np.float64)
    corners = sample_normal_windows(organ_mask, lesion_mask, size, count, rng)
    return [feat[r:r + size, c:c + size].mean(axis=(0, 1)) for r, c in corners]


# --------------------------------------------------------------------------
# Region pairing
# --------------------------------------------------------------------------

def build_pairs_by_region(rad_lesion_vecs, rad_normal_vecs, pat_lesion_vecs,
                          pat_normal_vecs, rng, mode="random-slice"):
    """Pair region vectors across domains without spatial correspondence.

    Parameters
    ----------
    rad_lesion_vecs : list of arrays ``[slices_l, 64n]``, one per lesion.
    rad_normal_vecs : array ``[k_r, 64n]`` (may be empty).
    pat_lesion_vecs : list of arrays ``[m_l, 64]`` (or single vectors), one
        per lesion, in the same order as ``rad_lesion_vecs``.
    pat_normal_vecs : array ``[k, 64]`` (may be empty).
    mode : ``"random-slice"`` pairs every pathology lesion vector with one
        uniformly drawn slice of the same lesion; ``"all-slices"`` pairs it
        with every slice and ignores normal regions.

    Normal pathology vectors are each paired with a random radiology normal
    vector (without replacement while enough are available).
    """
    if len(rad_lesion_vecs) == 0 or len(pat_lesion_vecs) == 0:
        raise ValueError("no lesion vectors to pair")
    if len(rad_lesion_vecs) != len(pat_lesion_vecs):
        raise ValueError("one radiology entry per pathology lesion required")
    if mode not in ("random-slice", "all-slices"):
        raise ValueError(f"unknown pairing mode {mode!r}")
    rad_rows, pat_rows, tags = [], [], []
    for rv, pv in zip(rad_lesion_vecs, pat_lesion_vecs):
        rv = np.atleast_2d(np.asarray(rv, dtype=np.float64))
        pv = np.atleast_2d(np.asarray(pv, dtype=np.float64))
        for p in pv:
            if mode == "all-slices":
                picks = range(rv.shape[0])
            else:
                picks = [int(rng.integers(0, rv.shape[0]))]
            for s in picks:
                rad_rows.append(rv[s])
                pat_rows.append(p)
                tags.append(LESION)
    if mode == "random-slice":
        pn = np.asarray(pat_normal_vecs, dtype=np.float64).reshape(-1, pat_rows[0].size)
        rn = np.asarray(rad_normal_vecs, dtype=np.float64).reshape(-1, rad_rows[0].size)
        if len(pn) and not len(rn):
            raise ValueError("pathology normal vectors given without radiology normals")
        if len(pn):
            if len(rn) >= len(pn):
                idx = rng.permutation(len(rn))[:len(pn)]
            else:
                idx = rng.integers(0, len(rn), len(pn))
            for p, i in zip(pn, idx):
                rad_rows.append(rn[i])
                pat_rows.append(p)
                tags.append(NORMAL)
    return PairedFeatureSet(np.array(rad_rows), np.array(pat_rows), tags)
