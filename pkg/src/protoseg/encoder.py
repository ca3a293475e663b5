"""Student/Teacher encoder: a 3-layer 3D conv stack with per-voxel embeddings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .volume import Volume

DEFAULT_CHANNELS = (1, 8, 16, 16)
MAX_SPATIAL = 64  # per-axis budget for encode()


@dataclass
class EncoderNet:
    """conv(1->8)+relu, conv(8->16)+relu, conv(16->d); weights in layer order."""

    kernels: list  # (Cout, Cin, 3, 3, 3) float64 arrays
    biases: list  # (Cout,) float64 arrays

    @property
    def embed_dim(self) -> int:
        return self.kernels[-1].shape[0]

    @property
    def channels(self) -> tuple[int, ...]:
        return (self.kernels[0].shape[1],) + tuple(k.shape[0] for k in self.kernels)


def init_encoder(rng: np.random.Generator, channels=DEFAULT_CHANNELS) -> EncoderNet:
    kernels, biases = [], []
    for cin, cout in zip(channels[:-1], channels[1:]):
        std = np.sqrt(2.0 / (cin * 27))
        kernels.append(rng.normal(0.0, std, size=(cout, cin, 3, 3, 3)))
        biases.append(np.zeros(cout))
    return EncoderNet(kernels=kernels, biases=biases)


@dataclass
class SegModel:
    """Encoder + linear classifier head (+ shared prototype bank, set later)."""

    encoder: EncoderNet
    linear_w: np.ndarray  # (C, d)
    bank: object | None = None

    @property
    def num_classes(self) -> int:
        return self.linear_w.shape[0]


def init_model(rng: np.random.Generator, num_classes: int, channels=DEFAULT_CHANNELS) -> SegModel:
    enc = init_encoder(rng, channels)
    w = rng.normal(0.0, 0.1, size=(num_classes, enc.embed_dim))
    return SegModel(encoder=enc, linear_w=w)


def clone_model(model: SegModel) -> SegModel:
    enc = EncoderNet(
        kernels=[k.copy() for k in model.encoder.kernels],
        biases=[b.copy() for b in model.encoder.biases],
    )
    return SegModel(encoder=enc, linear_w=model.linear_w.copy(), bank=model.bank)


def _check_budget(dims) -> None:
    if any(d > MAX_SPATIAL for d in dims):
        raise ValueError(f"volume dims {dims} exceed the {MAX_SPATIAL}^3 encode budget")


def encoder_forward(net: EncoderNet, x: np.ndarray):
    """x: (1, H, W, D) -> (embeddings (H, W, D, d), cache for backward)."""
    from .conv import conv3d_forward_cols

    n_layers = len(net.kernels)
    pre_acts, in_shapes, col_list = [], [], []
    h = np.asarray(x, dtype=np.float64)
    for i, (k, b) in enumerate(zip(net.kernels, net.biases)):
        in_shapes.append(h.shape)
        z, cols = conv3d_forward_cols(h, k, b)
        col_list.append(cols)
        pre_acts.append(z)
        h = ops.relu_forward(z) if i < n_layers - 1 else z
    emb = np.moveaxis(h, 0, -1)  # (H, W, D, d)
    ops.check_finite("encoder output", emb)
    return emb, (in_shapes, col_list, pre_acts)


def encoder_backward(net: EncoderNet, cache, gemb: np.ndarray):
    """gemb: (H, W, D, d) -> (kernel grads, bias grads) per layer."""
    from .conv import conv3d_backward_cols

    in_shapes, col_list, pre_acts = cache
    n_layers = len(net.kernels)
    gh = np.moveaxis(gemb, -1, 0)
    gks = [None] * n_layers
    gbs = [None] * n_layers
    for i in reversed(range(n_layers)):
        gz = gh if i == n_layers - 1 else ops.relu_backward(pre_acts[i], gh)
        gh, gks[i], gbs[i] = conv3d_backward_cols(
            col_list[i], net.kernels[i], gz, in_shapes[i], need_gx=i > 0
        )
    return gks, gbs


def encode(model: SegModel, vol: Volume, with_cache: bool = False):
    """Per-voxel embedding field (H, W, D, d) for a scalar volume."""
    _check_budget(vol.dims)
    x = np.asarray(vol.data, dtype=np.float64)[None]
    emb, cache = encoder_forward(model.encoder, x)
    return (emb, cache) if with_cache else emb


def model_tensors(model: SegModel) -> dict[str, np.ndarray]:
    out = {}
    for i, (k, b) in enumerate(zip(model.encoder.kernels, model.encoder.biases)):
        out[f"encoder.layer{i}.kernel"] = k
        out[f"encoder.layer{i}.bias"] = b
    out["linear.weights"] = model.linear_w
    if model.bank is not None:
        out["prototypes"] = model.bank.vectors
    return out


def model_from_tensors(tensors: dict[str, np.ndarray], eta: float = 0.999) -> SegModel:
    """Rebuild a SegModel (and bank, when present) from checkpoint tensors."""
    kernels, biases = [], []
    i = 0
    while f"encoder.layer{i}.kernel" in tensors:
        kernels.append(np.asarray(tensors[f"encoder.layer{i}.kernel"], dtype=np.float64))
        biases.append(np.asarray(tensors[f"encoder.layer{i}.bias"], dtype=np.float64))
        i += 1
    if not kernels or "linear.weights" not in tensors:
        raise ValueError("checkpoint is missing encoder or linear tensors")
    model = SegModel(
        encoder=EncoderNet(kernels=kernels, biases=biases),
        linear_w=np.asarray(tensors["linear.weights"], dtype=np.float64),
    )
    if "prototypes" in tensors:
        from .prototypes import PrototypeBank

        model.bank = PrototypeBank(vectors=tensors["prototypes"], eta=eta)
    return model


def model_checksum(model: SegModel, include_bank: bool = True) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model_tensors(model).items()):
        if not include_bank and name == "prototypes":
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def ema_update(teacher: SegModel, student: SegModel, decay: float) -> SegModel:
    """In-place: teacher <- decay * teacher + (1 - decay) * student."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("EMA decay must be in [0, 1)")
    tk, sk = teacher.encoder.kernels, student.encoder.kernels
    tb, sb = teacher.encoder.biases, student.encoder.biases
    if len(tk) != len(sk) or any(a.shape != b.shape for a, b in zip(tk, sk)):
        raise ValueError("teacher/student encoder architectures differ")
    if teacher.linear_w.shape != student.linear_w.shape:
        raise ValueError("teacher/student linear head shapes differ")
    for t, s in zip(tk + tb, sk + sb):
        t *= decay
        t += (1.0 - decay) * s
    teacher.linear_w *= decay
    teacher.linear_w += (1.0 - decay) * student.linear_w
    return teacher
