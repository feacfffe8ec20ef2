"""Synthetic data with known ground truth.

``gen_two_view`` draws linear-Gaussian two-view data whose canonical
correlations are known in closed form.  ``gen_cohort`` builds a small image
cohort (radiology volumes, lesion masks, H&E-like pathology images) where the
class label only influences a latent shared by both modalities.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .tensor_io import make_rng, save_tensor


@dataclass
class TwoViewSpec:
    latent_dim: int = 5
    view_dims: tuple = (128, 64)
    noise_std: float = 1.0
    signal_std: float = 1.0
    n_samples: int = 5000
    seed: int = 0

    def true_correlations(self):
        s2 = self.signal_std ** 2
        return np.full(self.latent_dim, s2 / (s2 + self.noise_std ** 2))


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def gen_two_view(spec: TwoViewSpec):
    """``X = A z + e_x``, ``Y = B z + e_y`` with orthonormal-column ``A``, ``B``.

    With latent std ``s`` and noise std ``sigma`` each canonical pair is
    ``z_d`` plus independent noise of variance ``sigma^2`` in both views, so
    every canonical correlation equals ``s^2 / (s^2 + sigma^2)``.
    """
    dr, dp = spec.view_dims
    if not 1 <= spec.latent_dim <= min(dr, dp):
        raise ValueError("latent_dim must be between 1 and min(view_dims)")
    if spec.n_samples < 2 or spec.noise_std < 0 or spec.signal_std <= 0:
        raise ValueError("degenerate two-view spec")
    rng = make_rng(spec.seed)
    A = _orthonormal_columns(rng, dr, spec.latent_dim)
    B = _orthonormal_columns(rng, dp, spec.latent_dim)
    z = rng.standard_normal((spec.n_samples, spec.latent_dim)) * spec.signal_std
    X = z @ A.T + spec.noise_std * rng.standard_normal((spec.n_samples, dr))
    Y = z @ B.T + spec.noise_std * rng.standard_normal((spec.n_samples, dp))
    return X, Y, spec.true_correlations()


# --------------------------------------------------------------------------
# Image cohort
# --------------------------------------------------------------------------

H_STAIN = np.array([0.65, 0.70, 0.29])
E_STAIN = np.array([0.07, 0.99, 0.11])

# (cycles per image, orientation in degrees) of the texture components
RAD_SHARED = ((56, 0), (36, 60), (22, 120))
RAD_PRIVATE = ((46, 30), (30, 100), (64, 150), (16, 80),
               (40, 170), (52, 45), (26, 15), (60, 105))
PAT_SHARED = ((60, 20), (40, 80), (25, 140))
PAT_PRIVATE = ((50, 110), (18, 50))

# loadings of the shared latent onto the three shared texture components
SHARED_LOADINGS = np.array([[1.0, 0.5, -0.7],
                            [-1.0, 0.8, 0.4],
                            [0.5, -0.6, 1.0]])


@dataclass
class SyntheticCase:
    patient_id: str
    radiology: list                 # n sequences, each [D, S, S]
    lesion_mask: np.ndarray         # [D, S, S]
    grade: int
    necrosis: bool
    label: int                      # 0 indolent, 1 aggressive
    shared_latent: np.ndarray
    organ_mask: np.ndarray = None   # [D, S, S] (prostate mode)
    pathology: np.ndarray = None    # [h, w, 3] section image (kidney mode)
    pathology_aligned: np.ndarray = None       # [D, S, S, 3] (prostate mode)
    split: str = "train"


@dataclass
class SyntheticCohort:
    cases: list
    mode: str = "kidney"
    seed: int = 0

    def labels(self):
        return np.array([c.label for c in self.cases])

    def latents(self):
        return np.array([c.shared_latent for c in self.cases])


def _grating(size, cycles, angle_deg, phase):
    yy, xx = np.mgrid[0:size, 0:size] / size
    t = np.deg2rad(angle_deg)
    return np.sqrt(2.0) * np.cos(2 * np.pi * cycles * (np.cos(t) * xx + np.sin(t) * yy) + phase)


def _texture(rng, size, bank, amplitudes):
    out = np.zeros((size, size))
    for (cyc, ang), amp in zip(bank, amplitudes):
        out += amp * _grating(size, cyc, ang, rng.uniform(0, 2 * np.pi))
    return out


def _ellipse(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _grade_for(rng, aggressive):
    if aggressive:
        options = ((3, False), (4, False), (3, True), (4, True), (2, True))
    else:
        options = ((1, False), (2, False))
    return options[int(rng.integers(len(options)))]


def _render_he(rng, conc_h, conc_e, tissue):
    jitter = rng.normal(0, 0.03, (2, 3))
    h = np.clip(H_STAIN + jitter[0], 0.01, None)
    e = np.clip(E_STAIN + jitter[1], 0.01, None)
    h /= np.linalg.norm(h)
    e /= np.linalg.norm(e)
    od = (conc_h * tissue)[..., None] * h + (conc_e * tissue)[..., None] * e
    return np.clip(np.round(256.0 * 10.0 ** (-od) - 1.0), 0, 255)


def _pathology_texture(rng, size, a, private_amp, tissue):
    tex = _texture(rng, size, PAT_SHARED, a) + _texture(rng, size, PAT_PRIVATE, private_amp)
    tex /= np.sqrt(np.sum(np.square(a)) + np.sum(np.square(private_amp)))
    conc_h = np.clip(0.9 + 0.35 * tex + rng.normal(0, 0.05, tex.shape), 0.05, None)
    conc_e = np.clip(0.6 - 0.15 * tex + rng.normal(0, 0.05, tex.shape), 0.05, None)
    return _render_he(rng, conc_h, conc_e, tissue)


def gen_cohort(n_cases=100, class_balance=0.5, seed=0, mode="kidney", n_slices=3,
               size=224, pathology_size=224, class_shift=3.0, shared_gain=0.5,
               private_gain=1.5, white_noise=0.3, n_sequences=None, shared_dim=1):
    """Synthetic cohort with the class signal carried by a shared latent.

    Every case draws a shared latent ``z`` (``shared_dim`` <= 3 dims) whose first coordinate
    is shifted by ``+-class_shift / 2`` according to the label, plus private
    latents for each modality.  Lesion texture is a mix of oriented
    gratings with amplitudes ``exp(gain * latent)``: the shared gratings
    (different ones in each modality) follow ``z``, the private ones follow
    modality-specific latents that carry no class information.

    ``mode="kidney"`` gives one CT-like sequence and one pathology section
    image per case.  ``mode="prostate-sim"`` gives two sequences, an organ
    mask with the lesion inside it, and pathology aligned with every slice.
    """
    if n_cases < 10:
        raise ValueError("n_cases must be >= 10")
    if mode not in ("kidney", "prostate-sim"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 1 <= shared_dim <= 3:
        raise ValueError("shared_dim must be 1, 2 or 3")
    rng = make_rng(seed)
    n_seq = n_sequences or (1 if mode == "kidney" else 2)
    n_pos = int(round(n_cases * class_balance))
    labels = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(n_cases - n_pos, int)])
    cases = []
    for i, label in enumerate(labels):
        z = rng.standard_normal(shared_dim)
        z[0] += class_shift / 2 if label else -class_shift / 2
        a = np.exp(shared_gain * SHARED_LOADINGS[:, :shared_dim] @ z)
        grade, necrosis = _grade_for(rng, bool(label))
        c = size / 2
        if mode == "kidney":
            ry, rx = rng.uniform(90, 100, 2)
        else:
            ry, rx = rng.uniform(30, 42, 2)
        cy, cx = c + rng.uniform(-8, 8, 2)
        lesion = np.zeros((n_slices, size, size))
        organ = np.zeros((n_slices, size, size)) if mode == "prostate-sim" else None
        seqs = [np.zeros((n_slices, size, size)) for _ in range(n_seq)]
        aligned = np.zeros((n_slices, size, size, 3)) if mode == "prostate-sim" else None
        normal_a = np.exp(shared_gain * SHARED_LOADINGS[:, :shared_dim]
                          @ rng.standard_normal(shared_dim))
        for d in range(n_slices):
            shrink = 1.0 - 0.12 * abs(d - (n_slices - 1) / 2)
            les = _ellipse(size, cy, cx, ry * shrink, rx * shrink)
            lesion[d] = les
            if organ is not None:
                org = _ellipse(size, c, c, 100, 105)
                organ[d] = org
            for s in range(n_seq):
                u = rng.standard_normal(len(RAD_PRIVATE))
                b = np.exp(private_gain * u)
                tex = _texture(rng, size, RAD_SHARED, a) + _texture(rng, size, RAD_PRIVATE, b)
                tex /= np.sqrt(np.sum(a ** 2) + np.sum(b ** 2))
                img = white_noise * rng.standard_normal((size, size))
                if organ is not None:
                    ntex = _texture(rng, size, RAD_SHARED, normal_a)
                    ntex /= np.sqrt(np.sum(normal_a ** 2))
                    img += np.where(org & ~les, 0.5 + ntex, 0.0)
                img += np.where(les, 1.0 + tex, 0.0)
                seqs[s][d] = img
            if aligned is not None:
                p_les = _pathology_texture(rng, size, a, np.exp(rng.standard_normal(2)), 1.0)
                p_nrm = _pathology_texture(rng, size, normal_a * 0.5,
                                           np.exp(rng.standard_normal(2)), 1.0)
                white = np.full((size, size, 3), 255.0)
                aligned[d] = np.where(les[..., None], p_les,
                                      np.where(org[..., None], p_nrm, white))
        pathology = None
        if mode == "kidney":
            ps = pathology_size
            tissue = _ellipse(ps, ps / 2, ps / 2, 0.42 * ps, 0.45 * ps).astype(float)
            pathology = _pathology_texture(rng, ps, a, np.exp(rng.standard_normal(2)), tissue)
        cases.append(SyntheticCase(
            patient_id=f"case{i:03d}", radiology=seqs, lesion_mask=lesion,
            grade=grade, necrosis=necrosis, label=int(label), shared_latent=z,
            organ_mask=organ, pathology=pathology, pathology_aligned=aligned))
    return SyntheticCohort(cases, mode, seed)


def write_cohort(cohort: SyntheticCohort, directory, dtype="f64"):
    """Write ``cohort`` as CFTN files plus ``manifest.json`` under
    ``directory`` and return the manifest path.

    Paths in the manifest are relative to the manifest's directory.  Every
    patient entry has ``id``, ``radiology`` (one file per sequence),
    ``lesion_mask``, ``pathology``, ``grade`` and ``necrosis``, plus
    ``organ_mask`` in prostate mode.
    """
    os.makedirs(directory, exist_ok=True)
    patients = []
    for c in cohort.cases:
        rel = c.patient_id
        os.makedirs(os.path.join(directory, rel), exist_ok=True)

        def put(name, arr, dt=dtype):
            path = f"{rel}/{name}.cftn"
            save_tensor(arr, os.path.join(directory, path), dtype=dt)
            return path

        entry = {"id": c.patient_id,
                 "radiology": [put(f"rad{s}", v) for s, v in enumerate(c.radiology)],
                 "lesion_mask": put("lesion_mask", c.lesion_mask, "f32"),
                 "grade": int(c.grade), "necrosis": bool(c.necrosis)}
        if c.organ_mask is not None:
            entry["organ_mask"] = put("organ_mask", c.organ_mask, "f32")
        pathology = c.pathology if c.pathology is not None else c.pathology_aligned
        entry["pathology"] = put("pathology", pathology, "f32")
        patients.append(entry)
    manifest = {"mode": cohort.mode, "seed": cohort.seed, "patients": patients}
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path
