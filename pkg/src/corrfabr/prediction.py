"""Region classifier, dense class maps, majority vote and fold ensembling.

The classifier keeps the branch structure of a multi-input segmentation
network: every input group (each radiology sequence, the CorrFeat maps) has
its own linear branch, the branch outputs are concatenated and a final
linear layer produces class logits.  It consumes region-aggregated feature
vectors (one per lesion slice, or per normal window) instead of images.

Class ids: kidney mode uses ``0 = indolent, 1 = aggressive``; prostate mode
uses ``0 = normal, 1 = indolent, 2 = aggressive``.  The highest id is always
"aggressive".
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .corrnet import Adam
from .tensor_io import load_tensor, make_rng, save_tensor

KIDNEY_CLASSES = ("indolent", "aggressive")
PROSTATE_CLASSES = ("normal", "indolent", "aggressive")


@dataclass
class PredictorTrainConfig:
    max_epochs: int = 100
    learning_rate: float = 0.001
    batch_size: int = 8
    lr_decay: float = 0.1
    lr_patience: int = 10
    early_stopping_patience: int = 20
    branch_width: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "lr_patience",
                     "early_stopping_patience", "branch_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("learning_rate must be positive and lr_decay in (0, 1]")


@dataclass
class RegionClassifier:
    branch_weights: list        # [width, d_b] per branch
    branch_biases: list         # [width] per branch
    head_weight: np.ndarray     # [n_classes, width * n_branches]
    head_bias: np.ndarray       # [n_classes]
    means: list                 # input standardization per branch
    scales: list
    history: list = field(default_factory=list, repr=False, compare=False)
    stopped_epoch: int = 0

    @property
    def n_branches(self):
        return len(self.branch_weights)

    @property
    def n_classes(self):
        return self.head_weight.shape[0]

    def logits(self, branches):
        branches = _as_branches(branches)
        if len(branches) != self.n_branches:
            raise ValueError(f"model has {self.n_branches} branches, got {len(branches)}")
        hidden = []
        for x, w, b, mu, sd in zip(branches, self.branch_weights, self.branch_biases,
                                   self.means, self.scales):
            if x.shape[1] != w.shape[1]:
                raise ValueError(f"branch width {x.shape[1]} != expected {w.shape[1]}")
            hidden.append(((x - mu) / sd) @ w.T + b)
        return np.concatenate(hidden, axis=1) @ self.head_weight.T + self.head_bias


def _as_branches(branches):
    if isinstance(branches, np.ndarray):
        branches = [branches]
    return [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in branches]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_slice(c: RegionClassifier, branches):
    """Class probabilities ``[N, n_classes]`` for rows of branch features."""
    return softmax(c.logits(branches))


def _xent(model, xs, y):
    p = predict_slice(model, xs)
    return float(-np.mean(np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None))))


def _grads(model, xs, y):
    zs = [((x - mu) / sd) for x, mu, sd in zip(xs, model.means, model.scales)]
    hidden = [z @ w.T + b for z, w, b in zip(zs, model.branch_weights, model.branch_biases)]
    hcat = np.concatenate(hidden, axis=1)
    p = softmax(hcat @ model.head_weight.T + model.head_bias)
    g = p.copy()
    g[np.arange(len(y)), y] -= 1.0
    g /= len(y)
    grads = {"head_weight": g.T @ hcat, "head_bias": g.sum(0)}
    gh = g @ model.head_weight
    width = model.branch_weights[0].shape[0]
    for i, z in enumerate(zs):
        gb = gh[:, i * width:(i + 1) * width]
        grads[f"w{i}"] = gb.T @ z
        grads[f"b{i}"] = gb.sum(0)
    return grads


def train_predictor(train, val, cfg: PredictorTrainConfig = None, n_classes=None):
    """Train a :class:`RegionClassifier` with minibatch Adam on cross-entropy.

    ``train`` and ``val`` are ``(branches, labels)`` pairs where ``branches``
    is a list of ``[N, d_b]`` arrays.  The learning rate is multiplied by
    ``lr_decay`` after ``lr_patience`` epochs without a new best validation
    loss, and training stops after ``early_stopping_patience`` such epochs.
    The model from the last epoch run is returned (not the best one).
    """
    cfg = cfg or PredictorTrainConfig()
    xs, y = _as_branches(train[0]), np.asarray(train[1], dtype=np.int64)
    vxs, vy = _as_branches(val[0]), np.asarray(val[1], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain at least two classes")
    n_classes = n_classes or int(max(y.max(), vy.max() if len(vy) else 0)) + 1
    rng = make_rng(cfg.seed)
    width = cfg.branch_width
    means = [x.mean(0) for x in xs]
    scales = [np.where(x.std(0) > 1e-12, x.std(0), 1.0) for x in xs]
    fan_head = width * len(xs)
    model = RegionClassifier(
        branch_weights=[rng.uniform(-1, 1, (width, x.shape[1])) / np.sqrt(x.shape[1])
                        for x in xs],
        branch_biases=[np.zeros(width) for _ in xs],
        head_weight=rng.uniform(-1, 1, (n_classes, fan_head)) / np.sqrt(fan_head),
        head_bias=np.zeros(n_classes),
        means=means, scales=scales)
    params = {"head_weight": model.head_weight, "head_bias": model.head_bias}
    for i in range(len(xs)):
        params[f"w{i}"] = model.branch_weights[i]
        params[f"b{i}"] = model.branch_biases[i]
    opt = Adam(params, cfg.learning_rate)
    n = len(y)
    best = np.inf
    since_best = 0
    since_decay = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.step(_grads(model, [x[idx] for x in xs], y[idx]))
        train_loss = _xent(model, xs, y)
        val_loss = _xent(model, vxs, vy) if len(vy) else train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "lr": opt.lr})
        if val_loss < best:
            best, since_best, since_decay = val_loss, 0, 0
        else:
            since_best += 1
            since_decay += 1
            if since_decay >= cfg.lr_patience:
                opt.lr *= cfg.lr_decay
                since_decay = 0
            if since_best >= cfg.early_stopping_patience:
                break
    model.history = history
    model.stopped_epoch = epoch
    return model


def save_classifier(c: RegionClassifier, directory, meta=None):
    os.makedirs(directory, exist_ok=True)
    for i in range(c.n_branches):
        save_tensor(c.branch_weights[i], os.path.join(directory, f"branch{i}_weight.cftn"))
        save_tensor(c.branch_biases[i], os.path.join(directory, f"branch{i}_bias.cftn"))
        save_tensor(c.means[i], os.path.join(directory, f"branch{i}_mean.cftn"))
        save_tensor(c.scales[i], os.path.join(directory, f"branch{i}_scale.cftn"))
    save_tensor(c.head_weight, os.path.join(directory, "head_weight.cftn"))
    save_tensor(c.head_bias, os.path.join(directory, "head_bias.cftn"))
    header = {"n_branches": c.n_branches, "n_classes": c.n_classes,
              "stopped_epoch": c.stopped_epoch, **(meta or {})}
    with open(os.path.join(directory, "header.json"), "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)


def load_classifier(directory) -> RegionClassifier:
    with open(os.path.join(directory, "header.json")) as fh:
        header = json.load(fh)

    def t(name):
        return load_tensor(os.path.join(directory, name + ".cftn"))

    nb = header["n_branches"]
    return RegionClassifier(
        branch_weights=[np.atleast_2d(t(f"branch{i}_weight")) for i in range(nb)],
        branch_biases=[t(f"branch{i}_bias") for i in range(nb)],
        head_weight=np.atleast_2d(t("head_weight")), head_bias=t("head_bias"),
        means=[t(f"branch{i}_mean") for i in range(nb)],
        scales=[t(f"branch{i}_scale") for i in range(nb)],
        stopped_epoch=header["stopped_epoch"])


# --------------------------------------------------------------------------
# Dense outputs
# --------------------------------------------------------------------------

def dense_probabilities(slice_probs, lesion_mask):
    """Broadcast per-slice class probabilities ``[D, C]`` onto the lesion
    pixels of ``lesion_mask [D, H, W]``; background pixels get zeros.
    Returns ``[D, H, W, C]``."""
    slice_probs = np.asarray(slice_probs, dtype=np.float64)
    sel = (np.asarray(lesion_mask) > 0)[..., None]
    return sel * slice_probs[:, None, None, :]


def class_map(dense_probs, lesion_mask):
    """Per-pixel argmax class; ``-1`` outside the lesion."""
    ids = np.argmax(dense_probs, axis=-1)
    return np.where(np.asarray(lesion_mask) > 0, ids, -1)


def majority_vote(segmentation, mask=None, n_classes=None):
    """Most frequent class id among the pixels inside ``mask``.

    ``segmentation`` holds class ids; when ``mask`` is omitted every pixel
    with a non-negative id counts.  Ties go to the highest class id, so a
    tie involving "aggressive" is always resolved as aggressive.
    """
    seg = np.asarray(segmentation)
    sel = seg >= 0 if mask is None else (np.asarray(mask) > 0)
    if sel.shape != seg.shape:
        raise ValueError("mask shape must equal segmentation shape")
    vals = seg[sel].astype(np.int64)
    if vals.size == 0:
        raise ValueError("empty region")
    if vals.min() < 0:
        raise ValueError("negative class id inside the region")
    counts = np.bincount(vals, minlength=n_classes or 0)
    return int(np.flatnonzero(counts == counts.max())[-1])


def ensemble_average(predictions):
    """Element-wise mean of equally shaped probability arrays."""
    arrs = [np.asarray(p, dtype=np.float64) for p in predictions]
    if not arrs:
        raise ValueError("nothing to average")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("shape mismatch between ensemble members")
    return np.mean(arrs, axis=0)


def lesion_prediction(slice_probs, lesion_mask):
    """Lesion-level outcome from per-slice probabilities.

    Returns ``(voted_class, score, class_map)`` where ``score`` is the mean
    aggressive probability over lesion pixels.
    """
    dense = dense_probabilities(slice_probs, lesion_mask)
    cmap = class_map(dense, lesion_mask)
    n_classes = dense.shape[-1]
    voted = majority_vote(cmap, lesion_mask, n_classes)
    sel = np.asarray(lesion_mask) > 0
    score = float(dense[..., -1][sel].mean())
    return voted, score, cmap
