"""Image preprocessing: lesion cropping, intensity normalization, tissue
segmentation, H&E stain normalization and aggressiveness labels."""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

INDOLENT = "indolent"
AGGRESSIVE = "aggressive"

# Reference H&E optical-density basis and 99th percentile concentrations
# commonly used as a normalization target.
REFERENCE_STAINS = np.array([[0.5626, 0.7201, 0.4062],
                             [0.2159, 0.8012, 0.5581]])
REFERENCE_MAX_CONC = np.array([1.9705, 1.0308])


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------

def label_aggressiveness(grade: int, necrosis: bool) -> str:
    """Aggressive when necrosis is present or the grade is 3 or 4."""
    if isinstance(grade, bool) or int(grade) != grade or not 1 <= grade <= 4:
        raise ValueError(f"grade must be an integer in 1..4, got {grade!r}")
    return AGGRESSIVE if (bool(necrosis) or grade >= 3) else INDOLENT


@dataclass
class LesionRecord:
    patient_id: str
    grade: int
    necrosis: bool
    slices: list = field(default_factory=list)  # [(slice_index, mask), ...]

    def __post_init__(self):
        label_aggressiveness(self.grade, self.necrosis)

    @property
    def label(self) -> str:
        return label_aggressiveness(self.grade, self.necrosis)


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------

def _bilinear_axis(n_in, n_out):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of the two leading axes of ``img``.

    Sample positions use the half-pixel-centre convention and are clamped at
    the borders, so a 1x1 input becomes a constant image.  Trailing axes
    (e.g. colour channels) are carried along unchanged.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    extra = (1,) * (img.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def mask_bbox(mask):
    """In-plane bounding box ``(r0, r1, c0, c1)`` (half-open) of a 2-D or 3-D
    mask; 3-D masks use the union over slices."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise ValueError("empty mask")
    plane = mask.any(axis=0) if mask.ndim == 3 else mask
    rows = np.flatnonzero(plane.any(axis=1))
    cols = np.flatnonzero(plane.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def crop_resize_lesion(volume, mask, out_size=224, return_mask=False):
    """Crop a ``[D, H, W]`` volume to the mask bounding box and resize every
    slice to ``out_size x out_size``.

    With ``return_mask=True`` the mask is carried through the same crop and
    resize (bilinear, then thresholded at 0.5) and returned as well.
    """
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask)
    if volume.ndim != 3 or mask.shape != volume.shape:
        raise ValueError(f"volume {volume.shape} and mask {mask.shape} must be equal [D,H,W]")
    r0, r1, c0, c1 = mask_bbox(mask)
    crop = volume[:, r0:r1, c0:c1].transpose(1, 2, 0)
    out = resize_bilinear(crop, out_size, out_size).transpose(2, 0, 1)
    if not return_mask:
        return out
    mcrop = (mask[:, r0:r1, c0:c1] > 0).astype(np.float64).transpose(1, 2, 0)
    mout = resize_bilinear(mcrop, out_size, out_size).transpose(2, 0, 1) >= 0.5
    return out, mout.astype(np.float64)


# --------------------------------------------------------------------------
# Intensity
# --------------------------------------------------------------------------

def zscore_normalize_lesion(volume, mask, min_std=1e-8):
    """Standardize ``volume`` with the mean and population std of the voxels
    under ``mask``.  A (near-)constant lesion yields all zeros."""
    volume = np.asarray(volume, dtype=np.float64)
    sel = np.asarray(mask) > 0
    if sel.shape != volume.shape:
        raise ValueError("mask shape must equal volume shape")
    if not sel.any():
        raise ValueError("empty mask")
    vals = volume[sel]
    mu = vals.mean()
    sigma = vals.std()
    if sigma < min_std:
        return np.zeros_like(volume)
    return (volume - mu) / sigma


def _bin_indices(gray, levels, value_range):
    lo, hi = value_range
    if hi <= lo:
        raise ValueError("constant image")
    idx = np.floor((gray - lo) / (hi - lo) * levels).astype(np.int64)
    return np.clip(idx, 0, levels - 1)


def otsu_threshold(gray, levels=256, foreground="dark", value_range=None):
    """Otsu's threshold over a ``levels``-bin histogram.

    Pixels are binned uniformly over ``value_range`` (default: the image's
    min and max).  A split at bin ``t`` puts bins ``< t`` in the dark class
    and bins ``>= t`` in the bright class; ``t`` runs over ``1..levels-1``.
    Between-class variance is compared in exact integer arithmetic and ties
    go to the smallest ``t``.

    Returns
    -------
    threshold : float
        Lower edge of bin ``t`` in gray-value units.
    mask : ndarray
        1.0 on the foreground class: the dark class when
        ``foreground="dark"`` (H&E tissue on a white background), else the
        bright class.
    """
    gray = np.asarray(gray, dtype=np.float64)
    if foreground not in ("dark", "bright"):
        raise ValueError("foreground must be 'dark' or 'bright'")
    if value_range is None:
        value_range = (float(gray.min()), float(gray.max()))
    if gray.min() == gray.max():
        raise ValueError("constant image")
    idx = _bin_indices(gray, levels, value_range)
    hist = np.bincount(idx.ravel(), minlength=levels)
    n = int(hist.sum())
    total = int(np.dot(np.arange(levels, dtype=np.int64), hist))
    cum_n = np.cumsum(hist)
    cum_s = np.cumsum(np.arange(levels, dtype=np.int64) * hist)

    # sigma_B^2 * n^2 = (S0*n - S*N0)^2 / (N0*N1); compare as fractions
    best_t, best = None, Fraction(-1)
    for t in range(1, levels):
        n0 = int(cum_n[t - 1])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = int(cum_s[t - 1]) * n - total * n0
        score = Fraction(num * num, n0 * n1)
        if score > best:
            best, best_t = score, t
    if best_t is None:
        raise ValueError("constant image")
    lo, hi = value_range
    threshold = lo + best_t * (hi - lo) / levels
    bright = idx >= best_t
    mask = ~bright if foreground == "dark" else bright
    return threshold, mask.astype(np.float64)


# --------------------------------------------------------------------------
# Stain normalization
# --------------------------------------------------------------------------

@dataclass
class StainBasis:
    """Two unit optical-density stain vectors and their 99th percentile
    concentrations.  Row 0 is the hematoxylin-like stain (larger red OD)."""

    stains: np.ndarray          # [2, 3]
    max_conc: np.ndarray        # [2]

    def __post_init__(self):
        self.stains = np.asarray(self.stains, dtype=np.float64).reshape(2, 3)
        self.max_conc = np.asarray(self.max_conc, dtype=np.float64).reshape(2)
        norms = np.linalg.norm(self.stains, axis=1)
        if np.any(self.stains < 0) or not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("stain vectors must be nonnegative unit vectors")
        if np.any(self.max_conc <= 0):
            raise ValueError("max concentrations must be positive")


REFERENCE_BASIS = StainBasis(REFERENCE_STAINS / np.linalg.norm(REFERENCE_STAINS, axis=1,
                                                                keepdims=True),
                             REFERENCE_MAX_CONC)


def rgb_to_od(rgb):
    return -np.log10((np.asarray(rgb, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od):
    return np.clip(256.0 * 10.0 ** (-od) - 1.0, 0.0, 255.0)


def nnls2(od, stains):
    """Per-row nonnegative least squares of ``od [N,3]`` on two stain rows.

    Closed form: the unconstrained solution if it is nonnegative, otherwise
    the better of the two single-stain projections clipped at zero.
    """
    a = stains.T                                   # [3, 2]
    gram = a.T @ a
    rhs = od @ a                                   # [N, 2]
    conc = np.linalg.solve(gram, rhs.T).T
    bad = np.any(conc < 0, axis=1)
    if bad.any():
        sub = od[bad]
        c1 = np.maximum(rhs[bad, 0] / gram[0, 0], 0.0)
        c2 = np.maximum(rhs[bad, 1] / gram[1, 1], 0.0)
        r1 = np.sum((sub - c1[:, None] * stains[0]) ** 2, axis=1)
        r2 = np.sum((sub - c2[:, None] * stains[1]) ** 2, axis=1)
        alt = np.zeros((bad.sum(), 2))
        use1 = r1 <= r2
        alt[use1, 0] = c1[use1]
        alt[~use1, 1] = c2[~use1]
        conc[bad] = alt
    return conc


def macenko_fit(rgb, beta=0.15, alpha=1.0, min_pixels=100, rank_tol=1e-3):
    """Estimate a :class:`StainBasis` from an RGB image with values in
    [0, 255].

    Pixels whose optical-density vector has Euclidean norm below ``beta``
    are treated as background.  The stain plane is spanned by the top two
    right singular vectors of the remaining OD cloud; the stain directions
    are the ``alpha`` and ``100 - alpha`` percentile angles inside it.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an [H, W, 3] image")
    od = rgb_to_od(rgb).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) >= beta]
    if tissue.shape[0] < min_pixels:
        raise ValueError(f"too few tissue pixels ({tissue.shape[0]} < {min_pixels})")
    _, s, vt = np.linalg.svd(tissue, full_matrices=False)
    if s[1] < rank_tol * s[0]:
        raise ValueError("degenerate optical-density cloud (rank < 2)")
    v1, v2 = vt[0], vt[1]
    if v1.sum() < 0:
        v1 = -v1
    proj = tissue @ np.stack([v1, v2], axis=1)
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    u_lo = np.cos(lo) * v1 + np.sin(lo) * v2
    u_hi = np.cos(hi) * v1 + np.sin(hi) * v2
    stains = []
    for u in (u_lo, u_hi):
        if u.sum() < 0:
            u = -u
        u = np.clip(u, 0.0, None)
        stains.append(u / np.linalg.norm(u))
    stains = np.array(stains)
    if stains[0, 0] < stains[1, 0]:
        stains = stains[::-1].copy()
    conc = nnls2(od, stains)
    max_conc = np.percentile(conc, 99, axis=0)
    if np.any(max_conc <= 0):
        raise ValueError("degenerate optical-density cloud (zero stain concentration)")
    return StainBasis(stains, max_conc)


def macenko_normalize(rgb, source: StainBasis, target: StainBasis = REFERENCE_BASIS):
    """Re-render ``rgb`` from the ``source`` stain basis into ``target``."""
    rgb = np.asarray(rgb, dtype=np.float64)
    od = rgb_to_od(rgb).reshape(-1, 3)
    conc = nnls2(od, source.stains)
    conc *= target.max_conc / source.max_conc
    out = od_to_rgb(conc @ target.stains)
    return out.reshape(rgb.shape)


def rgb_to_gray(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])
