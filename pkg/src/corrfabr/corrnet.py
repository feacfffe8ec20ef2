"""Two-view correlational autoencoder (CorrNet) with linear activations.

Encoders share one bias::

    hR = R W^T + b          hP = P V^T + b
    R' = hR Wp^T + bp_r     P' = hP Vp^T + bp_p

Training minimizes ``L_recon - lambda * L_corr`` where ``L_recon`` is the
batch mean of the per-sample MSE of both views and ``L_corr`` is the sum over
latent dimensions of the batch Pearson correlation between ``hR`` and
``hP``.  Minimizing the negative correlation term is what makes the latent
codes correlated.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor_io import load_tensor, make_rng, save_tensor

PARAMS = ("W", "V", "b", "Wp", "bp_r", "Vp", "bp_p")
CORR_EPS = 1e-8


@dataclass
class CorrNetModel:
    W: np.ndarray      # [k, Dr]
    V: np.ndarray      # [k, Dp]
    b: np.ndarray      # [k]
    Wp: np.ndarray     # [Dr, k]
    bp_r: np.ndarray   # [Dr]
    Vp: np.ndarray     # [Dp, k]
    bp_p: np.ndarray   # [Dp]
    lam: float = 2.0
    history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        for name in PARAMS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k, dr = self.W.shape
        dp = self.V.shape[1]
        expected = {"V": (k, dp), "b": (k,), "Wp": (dr, k), "bp_r": (dr,),
                    "Vp": (dp, k), "bp_p": (dp,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def k(self):
        return self.W.shape[0]

    @property
    def rad_dim(self):
        return self.W.shape[1]

    @property
    def pat_dim(self):
        return self.V.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in PARAMS}

    def copy(self, **changes):
        p = {name: getattr(self, name).copy() for name in PARAMS}
        p["lam"] = self.lam
        p.update(changes)
        return CorrNetModel(**p)


def init_corrnet(rad_dim, pat_dim, k=5, lam=2.0, rng=None):
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    rng = rng if rng is not None else make_rng(0)

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    return CorrNetModel(W=u((k, rad_dim), rad_dim), V=u((k, pat_dim), pat_dim),
                        b=np.zeros(k), Wp=u((rad_dim, k), k), bp_r=np.zeros(rad_dim),
                        Vp=u((pat_dim, k), k), bp_p=np.zeros(pat_dim), lam=lam)


def corrnet_forward(m: CorrNetModel, R, P):
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if R.shape[1] != m.rad_dim or P.shape[1] != m.pat_dim:
        raise ValueError(f"input widths {R.shape[1]}, {P.shape[1]} do not match model "
                         f"({m.rad_dim}, {m.pat_dim})")
    if R.shape[0] != P.shape[0]:
        raise ValueError("R and P must have the same batch size")
    hR = R @ m.W.T + m.b
    hP = P @ m.V.T + m.b
    return hR, hP, hR @ m.Wp.T + m.bp_r, hP @ m.Vp.T + m.bp_p


def _corr_terms(hR, hP, eps):
    x = hR - hR.mean(0)
    y = hP - hP.mean(0)
    s = (x * y).sum(0)
    a = (x * x).sum(0)
    c = (y * y).sum(0)
    d = np.sqrt(a * c + eps)
    return x, y, s, a, c, d


def corr_loss(hR, hP, eps=CORR_EPS):
    """Sum over latent dimensions of the batch Pearson correlation."""
    hR = np.asarray(hR, dtype=np.float64)
    hP = np.asarray(hP, dtype=np.float64)
    if hR.ndim == 1:
        hR, hP = hR[:, None], hP[:, None]
    if hR.shape != hP.shape:
        raise ValueError("hR and hP must have the same shape")
    if hR.shape[0] < 2:
        raise ValueError("correlation needs a batch of at least 2")
    _, _, s, _, _, d = _corr_terms(hR, hP, eps)
    return float((s / d).sum())


def recon_loss(R, Rrec, P, Prec):
    return float(((R - Rrec) ** 2).mean(1).mean() + ((P - Prec) ** 2).mean(1).mean())


def total_loss(m: CorrNetModel, R, P, eps=CORR_EPS):
    """``(objective, L_recon, L_corr)`` with objective ``L_recon - lam * L_corr``."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    hR, hP, Rrec, Prec = corrnet_forward(m, R, P)
    lr = recon_loss(R, Rrec, P, Prec)
    lc = corr_loss(hR, hP, eps)
    return lr - m.lam * lc, lr, lc


def _loss_and_grad(m, R, P, eps=CORR_EPS):
    bsz, dr = R.shape
    dp = P.shape[1]
    hR = R @ m.W.T + m.b
    hP = P @ m.V.T + m.b
    Rrec = hR @ m.Wp.T + m.bp_r
    Prec = hP @ m.Vp.T + m.bp_p
    eR = Rrec - R
    eP = Prec - P
    l_recon = (eR * eR).sum() / (bsz * dr) + (eP * eP).sum() / (bsz * dp)
    x, y, s, a, c, d = _corr_terms(hR, hP, eps)
    l_corr = (s / d).sum()

    gR = eR * (2.0 / (bsz * dr))
    gP = eP * (2.0 / (bsz * dp))
    d3 = d ** 3
    # derivative of s/d w.r.t. centred codes; centring drops out because
    # x and y already sum to zero over the batch
    dcorr_hR = y / d - x * (s * c / d3)
    dcorr_hP = x / d - y * (s * a / d3)
    ghR = gR @ m.Wp - m.lam * dcorr_hR
    ghP = gP @ m.Vp - m.lam * dcorr_hP
    grads = {
        "W": ghR.T @ R,
        "V": ghP.T @ P,
        "b": ghR.sum(0) + ghP.sum(0),
        "Wp": gR.T @ hR,
        "bp_r": gR.sum(0),
        "Vp": gP.T @ hP,
        "bp_p": gP.sum(0),
    }
    return l_recon - m.lam * l_corr, l_recon, l_corr, grads


def corrnet_grad(m: CorrNetModel, R, P, eps=CORR_EPS):
    """Analytic gradient of ``L_recon - lam * L_corr`` for every parameter."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if R.shape[0] < 2:
        raise ValueError("correlation needs a batch of at least 2")
    corrnet_forward(m, R[:1], P[:1])  # shape validation
    return _loss_and_grad(m, R, P, eps)[3]


@dataclass
class FusionTrainConfig:
    epochs: int = 1000
    learning_rate: float = 0.5e-4
    batch_size: int = 50
    seed: int = 0
    k: int = 5
    lam: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.k < 1:
            raise ValueError("epochs, batch_size and k must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_fusion(pairs, cfg: FusionTrainConfig = None, init: CorrNetModel = None):
    """Fit a CorrNet on a :class:`PairedFeatureSet` with minibatch Adam.

    Rows are reshuffled every epoch from a generator seeded by ``cfg.seed``;
    a trailing batch with fewer than two rows is dropped since correlation is
    undefined on it.  The final-epoch model is returned and
    ``model.history`` holds per-epoch averages of the objective and both loss
    components.
    """
    cfg = cfg or FusionTrainConfig()
    R, P = pairs.rad, pairs.pat
    n = R.shape[0]
    if n == 0:
        raise ValueError("empty feature set")
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    rng = make_rng(cfg.seed)
    model = init.copy() if init is not None else init_corrnet(
        R.shape[1], P.shape[1], cfg.k, cfg.lam, rng)
    params = model.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        tot = np.zeros(3)
        nb = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            obj, lr_, lc, grads = _loss_and_grad(model, R[idx], P[idx])
            opt.step(grads)
            tot += (obj, lr_, lc)
            nb += 1
        tot /= nb
        history.append({"epoch": epoch + 1, "L": float(tot[0]),
                        "L_recon": float(tot[1]), "L_corr": float(tot[2])})
        if not np.all(np.isfinite(tot)):
            raise FloatingPointError(f"training diverged at epoch {epoch + 1}")
    model.history = history
    return model


def encode_vectors(m: CorrNetModel, rad_rows):
    """Radiology-encoder codes ``rows @ W^T + b``."""
    rad_rows = np.asarray(rad_rows, dtype=np.float64)
    if rad_rows.shape[-1] != m.rad_dim:
        raise ValueError(f"expected {m.rad_dim} channels, got {rad_rows.shape[-1]}")
    return rad_rows @ m.W.T + m.b


def encode_radiology(m: CorrNetModel, feat):
    """CorrFeat map ``[H, W, k]`` from a radiology feature map ``[H, W, Dr]``.

    Only the radiology encoder is used.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 3:
        raise ValueError("expected an [H, W, C] feature map")
    h, w, c = feat.shape
    return encode_vectors(m, feat.reshape(h * w, c)).reshape(h, w, m.k)


def save_corrnet(m: CorrNetModel, directory, seed=None, epoch=None, n_sequences=None):
    os.makedirs(directory, exist_ok=True)
    for name in PARAMS:
        save_tensor(getattr(m, name), os.path.join(directory, name + ".cftn"))
    header = {"k": m.k, "rad_dim": m.rad_dim, "pat_dim": m.pat_dim, "lambda": m.lam,
              "n": n_sequences, "seed": seed,
              "epoch": epoch if epoch is not None else len(m.history)}
    with open(os.path.join(directory, "header.json"), "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
    with open(os.path.join(directory, "training.jsonl"), "w") as fh:
        for row in m.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_corrnet(directory) -> CorrNetModel:
    with open(os.path.join(directory, "header.json")) as fh:
        header = json.load(fh)
    p = {name: load_tensor(os.path.join(directory, name + ".cftn")) for name in PARAMS}
    return CorrNetModel(**p, lam=header["lambda"])
