"""Per-pixel segmentation model and the warm-up discriminator.

The model maps each pixel's raw feature vector through a small MLP encoder,
then a linear projection into the alignment space (where category anchors
live), then a linear classifier over categories. Pixels are independent, so
a whole grid is one [N, D] batch.

Checkpoints are little-endian "CAGM" files holding the layer dimensions and
raw float64 parameters in declaration order; a round trip is bit-exact.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

from .domains import make_rng
from .tensor import Tensor, bias_add, leaky_relu, matmul, no_grad, relu, softmax, tensor

CKPT_MAGIC = b"CAGM"
CKPT_VERSION = 1

# stream tags keep init draws apart from every data/training stream
TAG_MODEL_INIT = 0x6D6F6465
TAG_DISC_INIT = 0x64697363


_PARAM_NAMES = ("enc1_w", "enc1_b", "enc2_w", "enc2_b",
                "proj_w", "proj_b", "cls_w", "cls_b")


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _linear_params(rng, fan_in, fan_out):
    w = tensor(xavier_uniform(rng, fan_in, fan_out), requires_grad=True)
    b = tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


class ForwardResult(NamedTuple):
    projected: Tensor   # [N, F] alignment-space features
    logits: Tensor      # [N, C]
    probs: Tensor       # [N, C] softmax rows


class SegModel:
    """Encoder -> projection -> linear classifier, all per pixel.

    Layer stack: linear(D, hidden) / relu / linear(hidden, E) / relu /
    linear(E, F) projection / linear(F, C) classifier. Weights are Xavier-
    uniform, biases zero, drawn from a dedicated init stream of `seed`.
    """

    def __init__(self, D: int = 8, C: int = 6, hidden: int = 32,
                 E: int = 16, F: int = 16, seed: int = 0,
                 _skip_init: bool = False):
        if min(D, C, hidden, E, F) < 1:
            raise ValueError("all layer dimensions must be positive")
        self.D, self.C, self.hidden, self.E, self.F = D, C, hidden, E, F
        if _skip_init:
            self.enc1_w = self.enc1_b = None
            self.enc2_w = self.enc2_b = None
            self.proj_w = self.proj_b = None
            self.cls_w = self.cls_b = None
            return
        rng = make_rng(seed, TAG_MODEL_INIT)
        self.enc1_w, self.enc1_b = _linear_params(rng, D, hidden)
        self.enc2_w, self.enc2_b = _linear_params(rng, hidden, E)
        self.proj_w, self.proj_b = _linear_params(rng, E, F)
        self.cls_w, self.cls_b = _linear_params(rng, F, C)

    def parameters(self) -> list[Tensor]:
        return [self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b,
                self.proj_w, self.proj_b, self.cls_w, self.cls_b]

    def project(self, x: Tensor) -> Tensor:
        """Alignment-space features for a [N, D] input batch."""
        h = relu(bias_add(matmul(x, self.enc1_w), self.enc1_b))
        h = relu(bias_add(matmul(h, self.enc2_w), self.enc2_b))
        return bias_add(matmul(h, self.proj_w), self.proj_b)

    def classify(self, projected: Tensor) -> Tensor:
        return bias_add(matmul(projected, self.cls_w), self.cls_b)

    def forward(self, features: np.ndarray) -> ForwardResult:
        x = tensor(np.asarray(features, dtype=np.float64))
        proj = self.project(x)
        logits = self.classify(proj)
        return ForwardResult(proj, logits, softmax(logits))

    def project_np(self, features: np.ndarray) -> np.ndarray:
        """Alignment features with no graph attached (anchor construction)."""
        with no_grad():
            return self.project(tensor(np.asarray(features, dtype=np.float64))).data

    def predict_labels(self, features: np.ndarray) -> np.ndarray:
        """Argmax category per pixel; ties resolve to the lowest index."""
        with no_grad():
            logits = self.classify(self.project(
                tensor(np.asarray(features, dtype=np.float64))))
        return np.argmax(logits.data, axis=1).astype(np.int64)

    def clone(self) -> "SegModel":
        """Independent copy with identical parameter values."""
        m = SegModel(self.D, self.C, self.hidden, self.E, self.F,
                     _skip_init=True)
        for name in _PARAM_NAMES:
            src = getattr(self, name)
            setattr(m, name, tensor(src.data.copy(), requires_grad=True))
        return m

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise CheckpointError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch: {a.shape} vs {p.data.shape}")
            p.data = np.array(a, dtype=np.float64)


class Discriminator:
    """Per-pixel domain discriminator over alignment-space features.

    linear(F, hidden) / leaky_relu(0.2) / linear(hidden, 1). One logit per
    pixel; label 1 means "looks like source".
    """

    def __init__(self, F: int = 16, hidden: int = 32, seed: int = 0,
                 slope: float = 0.2):
        self.F, self.hidden, self.slope = F, hidden, slope
        rng = make_rng(seed, TAG_DISC_INIT)
        self.w1, self.b1 = _linear_params(rng, F, hidden)
        self.w2, self.b2 = _linear_params(rng, hidden, 1)

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, feat: Tensor) -> Tensor:
        h = leaky_relu(bias_add(matmul(feat, self.w1), self.b1), self.slope)
        return bias_add(matmul(h, self.w2), self.b2)

    def forward_frozen(self, feat: Tensor) -> Tensor:
        """Same map with the discriminator weights held constant, so the
        gradient of a fooling loss flows only into `feat`."""
        h = leaky_relu(bias_add(matmul(feat, self.w1.detach()), self.b1.detach()),
                       self.slope)
        return bias_add(matmul(h, self.w2.detach()), self.b2.detach())


# -- checkpoint format ---------------------------------------------------------
#
# magic "CAGM" | version u16 | D u16 | hidden u16 | E u16 | F u16 | C u16 |
# then each parameter tensor's float64 values, declaration order, row-major.

_CKPT_HEADER = struct.Struct("<4sHHHHHH")


def save_model(model: SegModel, path) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.D,
                                  model.hidden, model.E, model.F, model.C))
        for a in model.state_arrays():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> SegModel:
    with open(path, "rb") as f:
        raw = f.read(_CKPT_HEADER.size)
        if len(raw) != _CKPT_HEADER.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, D, hidden, E, F, C = _CKPT_HEADER.unpack(raw)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        model = SegModel(D=D, C=C, hidden=hidden, E=E, F=F, _skip_init=True)
        shapes = [(D, hidden), (hidden,), (hidden, E), (E,),
                  (E, F), (F,), (F, C), (C,)]
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            raw = f.read(n * 8)
            if len(raw) != n * 8:
                raise CheckpointError("truncated checkpoint parameters")
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        if f.read(1):
            raise CheckpointError("trailing data in checkpoint")
    for name, a in zip(_PARAM_NAMES, arrays):
        setattr(model, name, tensor(a, requires_grad=True))
    return model
