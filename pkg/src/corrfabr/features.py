"""Two-stage 3x3 convolutional feature extractor.

The extractor mirrors the first two convolution layers of VGG16 (3x3
kernels, stride 1, zero "same" padding, ReLU after each layer, 64 output
channels).  Weights are either generated from a seed or loaded from CFTN
files laid out as

    stage1_weight  [64, C, 3, 3]   (out, in, row, col)
    stage1_bias    [64]
    stage2_weight  [64, 64, 3, 3]
    stage2_bias    [64]

Kernels are applied as cross-correlation, the usual deep-learning
convention.
"""

import os
from dataclasses import dataclass

import numpy as np

from .tensor_io import load_tensor, make_rng, save_tensor

N_FEATURES = 64
PATCH = 224

_FILES = ("stage1_weight", "stage1_bias", "stage2_weight", "stage2_bias")


def conv3x3(x, weight, bias):
    """'Same' 3x3 cross-correlation of ``x [H, W, C]`` with
    ``weight [O, C, 3, 3]``; returns ``[H, W, O]``."""
    h, w, c = x.shape
    o = weight.shape[0]
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    # stack horizontal taps so each kernel row is one contiguous matmul
    cols = np.stack([p[:, j:j + w, :] for j in range(3)], axis=2).reshape(h + 2, w * 3 * c)
    out = np.zeros((h * w, o))
    for i in range(3):
        wi = weight[:, :, i, :].transpose(2, 1, 0).reshape(3 * c, o)
        out += cols[i:i + h].reshape(h * w, 3 * c) @ wi
    out += bias
    return out.reshape(h, w, o)


@dataclass
class FeatureExtractor:
    stage1_weight: np.ndarray
    stage1_bias: np.ndarray
    stage2_weight: np.ndarray
    stage2_bias: np.ndarray

    def __post_init__(self):
        for name in _FILES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        o1, c, kh, kw = self.stage1_weight.shape
        if (kh, kw) != (3, 3) or self.stage2_weight.shape != (o1, o1, 3, 3):
            raise ValueError("expected 3x3 kernels with stage2 shape [O, O, 3, 3]")
        if self.stage1_bias.shape != (o1,) or self.stage2_bias.shape != (o1,):
            raise ValueError("bias shapes must match output channels")

    @property
    def in_channels(self):
        return self.stage1_weight.shape[1]

    @property
    def out_channels(self):
        return self.stage1_weight.shape[0]

    def __call__(self, image):
        """Apply both stages to an ``[H, W]`` or ``[H, W, C]`` image of any size."""
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.shape[2] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[2]}")
        x = np.maximum(conv3x3(x, self.stage1_weight, self.stage1_bias), 0.0)
        return np.maximum(conv3x3(x, self.stage2_weight, self.stage2_bias), 0.0)


def make_builtin_extractor(seed=0, in_channels=3, out_channels=N_FEATURES):
    """Deterministic extractor with weights and biases drawn from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = make_rng(seed)
    fan1 = in_channels * 9
    fan2 = out_channels * 9
    b1 = 1.0 / np.sqrt(fan1)
    b2 = 1.0 / np.sqrt(fan2)
    return FeatureExtractor(
        stage1_weight=rng.uniform(-b1, b1, (out_channels, in_channels, 3, 3)),
        stage1_bias=rng.uniform(-b1, b1, out_channels),
        stage2_weight=rng.uniform(-b2, b2, (out_channels, out_channels, 3, 3)),
        stage2_bias=rng.uniform(-b2, b2, out_channels),
    )


def save_extractor(fx: FeatureExtractor, directory):
    os.makedirs(directory, exist_ok=True)
    for name in _FILES:
        save_tensor(getattr(fx, name), os.path.join(directory, name + ".cftn"))


def load_extractor(directory) -> FeatureExtractor:
    return FeatureExtractor(**{name: load_tensor(os.path.join(directory, name + ".cftn"))
                               for name in _FILES})


def extract_lowres(image, fx: FeatureExtractor, size=PATCH):
    """Feature map ``[224, 224, 64]`` of a 224x224 image."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (size, size):
        raise ValueError(f"expected a {size}x{size} image, got {image.shape}")
    return fx(image)


@dataclass
class PatchGridFeatures:
    """Per-patch mean feature vectors laid out on the patch grid.

    ``vectors[r, c]`` is the patch covering image rows ``r*224:(r+1)*224``
    and columns ``c*224:(c+1)*224``.
    """

    vectors: np.ndarray   # [rows, cols, 64]

    @property
    def grid_shape(self):
        return self.vectors.shape[:2]


def extract_highres_patches(wsi, fx: FeatureExtractor, patch=PATCH):
    """Tile ``wsi [h, w, C]`` into non-overlapping ``patch``-sized squares from
    the top-left (ragged margins are dropped) and average each patch's
    feature map over space."""
    wsi = np.asarray(wsi, dtype=np.float64)
    h, w = wsi.shape[:2]
    rows, cols = h // patch, w // patch
    if rows < 1 or cols < 1:
        raise ValueError(f"image {wsi.shape[:2]} is smaller than one {patch}x{patch} patch")
    out = np.empty((rows, cols, fx.out_channels))
    for r in range(rows):
        for c in range(cols):
            tile = wsi[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch]
            out[r, c] = fx(tile).mean(axis=(0, 1))
    return PatchGridFeatures(out)
