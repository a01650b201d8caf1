"""Patch-classification network: topology, batched passes, GHSM model files.

The network maps 5x5xB reflectance patches to a built-up probability for the
central pixel:

    conv 2x2 (f_a, linear) -> conv 2x2 (f_a, tanh) -> BN -> dropout
    -> conv 2x2 (f_b, linear) -> conv 2x2 (f_b, tanh) -> BN -> dropout
    -> flatten -> dense (hidden, tanh) -> dense (1, sigmoid)

Spatial extent shrinks 5 -> 4 -> 3 -> 2 -> 1 across the four convolutions,
so the flatten width equals f_b.

GHSM model file: magic "GHSM", u32 little-endian JSON header length, UTF-8
JSON header, then float32 little-endian parameter blobs in build order
(conv kernels laid out [out][in][kh][kw], dense weights [out][in]).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import nncore
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .nncore import (
    AdamState,
    BatchNorm,
    ConvLayer,
    DenseLayer,
    adam_step,
    bce_loss,
    dropout,
    dropout_backward,
)

GHSM_MAGIC = b"GHSM"
GHSM_VERSION = 1


@dataclass(frozen=True)
class ArchitectureConfig:
    patch_size: int = 5
    bands: int = 4
    block_filters: tuple = (32, 64)
    hidden_units: int = 128
    dropout_rate: float = 0.1
    normalization_divisor: float = 10000.0

    def validate(self) -> None:
        if self.patch_size != 5:
            raise ConfigError(f"patch_size must be 5, got {self.patch_size}")
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        if len(self.block_filters) != 2 or min(self.block_filters) < 1:
            raise ConfigError(f"block_filters must be two counts >= 1, "
                              f"got {self.block_filters}")
        if self.hidden_units < 1:
            raise ConfigError(f"hidden_units must be >= 1, got {self.hidden_units}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), "
                              f"got {self.dropout_rate}")
        if self.normalization_divisor <= 0:
            raise ConfigError("normalization_divisor must be positive")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "bands": self.bands,
            "block_filters": list(self.block_filters),
            "hidden_units": self.hidden_units,
            "dropout_rate": self.dropout_rate,
            "normalization_divisor": self.normalization_divisor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        cfg = cls(patch_size=d["patch_size"], bands=d["bands"],
                  block_filters=tuple(d["block_filters"]),
                  hidden_units=d["hidden_units"],
                  dropout_rate=d["dropout_rate"],
                  normalization_divisor=d["normalization_divisor"])
        cfg.validate()
        return cfg


PRESETS = {
    "desk": ArchitectureConfig(),
    "paper": ArchitectureConfig(block_filters=(128, 256), hidden_units=512),
}


def preset(name: str, divisor: Optional[float] = None,
           bands: Optional[int] = None) -> ArchitectureConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if divisor is not None:
        cfg = replace(cfg, normalization_divisor=divisor)
    if bands is not None:
        cfg = replace(cfg, bands=bands)
    return cfg


def count_params(arch: ArchitectureConfig):
    """Closed-form (trainable, non_trainable) parameter counts."""
    arch.validate()
    f_a, f_b = arch.block_filters
    k2 = nncore.KERNEL_SIZE ** 2

    def conv(cin, cout):
        return (k2 * cin + 1) * cout

    trainable = (
        conv(arch.bands, f_a) + conv(f_a, f_a) + 2 * f_a
        + conv(f_a, f_b) + conv(f_b, f_b) + 2 * f_b
        + (f_b + 1) * arch.hidden_units
        + (arch.hidden_units + 1) * 1
    )
    non_trainable = 2 * f_a + 2 * f_b
    return trainable, non_trainable


class Model:
    """Built network plus identity metadata; immutable once training ends."""

    def __init__(self, arch: ArchitectureConfig, zone_id: str = "",
                 seed: int = 0, epochs_trained: int = 0):
        arch.validate()
        self.arch = arch
        self.zone_id = zone_id
        self.seed = seed
        self.epochs_trained = epochs_trained
        self.conv1: ConvLayer = None
        self.conv2: ConvLayer = None
        self.bn1: BatchNorm = None
        self.conv3: ConvLayer = None
        self.conv4: ConvLayer = None
        self.bn2: BatchNorm = None
        self.dense1: DenseLayer = None
        self.dense2: DenseLayer = None

    # -- parameter bookkeeping -------------------------------------------

    def trainable_arrays(self):
        """Trainable parameter arrays in build order."""
        return [
            self.conv1.kernel, self.conv1.bias,
            self.conv2.kernel, self.conv2.bias,
            self.bn1.gamma, self.bn1.beta,
            self.conv3.kernel, self.conv3.bias,
            self.conv4.kernel, self.conv4.bias,
            self.bn2.gamma, self.bn2.beta,
            self.dense1.weights, self.dense1.bias,
            self.dense2.weights, self.dense2.bias,
        ]

    def non_trainable_arrays(self):
        return [
            self.bn1.moving_mean, self.bn1.moving_var,
            self.bn2.moving_mean, self.bn2.moving_var,
        ]

    def serialization_arrays(self):
        """All parameter blobs in the GHSM build order."""
        return [
            self.conv1.kernel, self.conv1.bias,
            self.conv2.kernel, self.conv2.bias,
            self.bn1.gamma, self.bn1.beta, self.bn1.moving_mean, self.bn1.moving_var,
            self.conv3.kernel, self.conv3.bias,
            self.conv4.kernel, self.conv4.bias,
            self.bn2.gamma, self.bn2.beta, self.bn2.moving_mean, self.bn2.moving_var,
            self.dense1.weights, self.dense1.bias,
            self.dense2.weights, self.dense2.bias,
        ]

    def flat_trainable(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.trainable_arrays()])

    def set_flat_trainable(self, vec: np.ndarray) -> None:
        pos = 0
        for a in self.trainable_arrays():
            n = a.size
            a[...] = vec[pos:pos + n].reshape(a.shape)
            pos += n
        if pos != vec.size:
            raise ShapeError(f"flat vector length {vec.size} != {pos}")

    def astype(self, dtype) -> "Model":
        """Copy of the model with every parameter array cast to dtype."""
        clone = Model(self.arch, self.zone_id, self.seed, self.epochs_trained)
        clone.conv1 = ConvLayer(self.conv1.kernel.astype(dtype),
                                self.conv1.bias.astype(dtype), "linear")
        clone.conv2 = ConvLayer(self.conv2.kernel.astype(dtype),
                                self.conv2.bias.astype(dtype), "tanh")
        clone.bn1 = BatchNorm(self.bn1.gamma.astype(dtype),
                              self.bn1.beta.astype(dtype),
                              self.bn1.moving_mean.astype(dtype),
                              self.bn1.moving_var.astype(dtype))
        clone.conv3 = ConvLayer(self.conv3.kernel.astype(dtype),
                                self.conv3.bias.astype(dtype), "linear")
        clone.conv4 = ConvLayer(self.conv4.kernel.astype(dtype),
                                self.conv4.bias.astype(dtype), "tanh")
        clone.bn2 = BatchNorm(self.bn2.gamma.astype(dtype),
                              self.bn2.beta.astype(dtype),
                              self.bn2.moving_mean.astype(dtype),
                              self.bn2.moving_var.astype(dtype))
        clone.dense1 = DenseLayer(self.dense1.weights.astype(dtype),
                                  self.dense1.bias.astype(dtype), "tanh")
        clone.dense2 = DenseLayer(self.dense2.weights.astype(dtype),
                                  self.dense2.bias.astype(dtype), "sigmoid")
        return clone

    # -- passes -----------------------------------------------------------

    def _check_patches(self, patches: np.ndarray) -> None:
        p = self.arch.patch_size
        if patches.ndim != 4 or patches.shape[1:] != (p, p, self.arch.bands):
            raise ShapeError(
                f"patches must be (N, {p}, {p}, {self.arch.bands}), "
                f"got {patches.shape}"
            )

    def forward(self, patches: np.ndarray) -> np.ndarray:
        """Inference pass: moving BN statistics, no dropout. Returns (N,)."""
        self._check_patches(patches)
        h = self.conv1.forward(patches)
        h = self.conv2.forward(h)
        h = self.bn1.forward_infer(h)
        h = self.conv3.forward(h)
        h = self.conv4.forward(h)
        h = self.bn2.forward_infer(h)
        h = h.reshape(h.shape[0], -1)
        h = self.dense1.forward(h)
        h = self.dense2.forward(h)
        return h[:, 0]

    def forward_train(self, patches: np.ndarray, rng: np.random.Generator,
                      update_running: bool = True):
        """Training pass: batch BN statistics and fresh dropout masks."""
        self._check_patches(patches)
        rate = self.arch.dropout_rate
        caches = {}
        h, caches["conv1"] = self.conv1.forward_train(patches)
        h, caches["conv2"] = self.conv2.forward_train(h)
        h, caches["bn1"] = self.bn1.forward_train(h, update_running=update_running)
        h, caches["drop1"] = dropout(h, rate, rng, train=True)
        h, caches["conv3"] = self.conv3.forward_train(h)
        h, caches["conv4"] = self.conv4.forward_train(h)
        h, caches["bn2"] = self.bn2.forward_train(h, update_running=update_running)
        h, caches["drop2"] = dropout(h, rate, rng, train=True)
        shape4 = h.shape
        h = h.reshape(shape4[0], -1)
        caches["flatten"] = shape4
        h, caches["dense1"] = self.dense1.forward_train(h)
        h, caches["dense2"] = self.dense2.forward_train(h)
        return h[:, 0], caches

    def backward(self, dprobs: np.ndarray, caches):
        """Gradients for every trainable array, aligned with trainable_arrays()."""
        d = dprobs[:, None]
        d, dw2, db2 = self.dense2.backward(d, caches["dense2"])
        d, dw1, db1 = self.dense1.backward(d, caches["dense1"])
        d = d.reshape(caches["flatten"])
        d = dropout_backward(d, caches["drop2"])
        d, dg2, dbeta2 = self.bn2.backward(d, caches["bn2"])
        d, dk4, dc4 = self.conv4.backward(d, caches["conv4"])
        d, dk3, dc3 = self.conv3.backward(d, caches["conv3"])
        d = dropout_backward(d, caches["drop1"])
        d, dg1, dbeta1 = self.bn1.backward(d, caches["bn1"])
        d, dk2, dc2 = self.conv2.backward(d, caches["conv2"])
        _, dk1, dc1 = self.conv1.backward(d, caches["conv1"])
        return [dk1, dc1, dk2, dc2, dg1, dbeta1, dk3, dc3, dk4, dc4,
                dg2, dbeta2, dw1, db1, dw2, db2]


def build_model(arch: ArchitectureConfig, seed: int = 0, zone_id: str = "",
                rng: Optional[np.random.Generator] = None) -> Model:
    """Initialize all layers; conv/dense weights and biases uniform on
    [-0.1065, 0.1065], BN at gamma=1, beta=0, moving mean 0 / var 1."""
    arch.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    f_a, f_b = arch.block_filters
    k = nncore.KERNEL_SIZE
    model = Model(arch, zone_id=zone_id, seed=seed)

    def conv(cin, cout, act):
        return ConvLayer(nncore.init_uniform(rng, (cout, cin, k, k)),
                         nncore.init_uniform(rng, (cout,)), act)

    def bn(ch):
        return BatchNorm(np.ones(ch, dtype=np.float32),
                         np.zeros(ch, dtype=np.float32),
                         np.zeros(ch, dtype=np.float32),
                         np.ones(ch, dtype=np.float32))

    model.conv1 = conv(arch.bands, f_a, "linear")
    model.conv2 = conv(f_a, f_a, "tanh")
    model.bn1 = bn(f_a)
    model.conv3 = conv(f_a, f_b, "linear")
    model.conv4 = conv(f_b, f_b, "tanh")
    model.bn2 = bn(f_b)
    model.dense1 = DenseLayer(nncore.init_uniform(rng, (arch.hidden_units, f_b)),
                              nncore.init_uniform(rng, (arch.hidden_units,)),
                              "tanh")
    model.dense2 = DenseLayer(nncore.init_uniform(rng, (1, arch.hidden_units)),
                              nncore.init_uniform(rng, (1,)), "sigmoid")
    return model


def forward_batch(model: Model, patches: np.ndarray) -> np.ndarray:
    """One probability per patch, order-preserving, inference mode."""
    return model.forward(np.ascontiguousarray(patches, dtype=np.float32))


def train_step(model: Model, patches: np.ndarray, labels: np.ndarray,
               state: AdamState, rng: np.random.Generator) -> float:
    """Forward/backward/Adam over one optimizer batch; returns the batch
    loss measured before the update."""
    probs, caches = model.forward_train(patches, rng)
    loss, dprobs = bce_loss(labels.astype(np.float32), probs)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")
    grads = model.backward(dprobs, caches)
    flat = model.flat_trainable()
    gflat = np.concatenate([g.reshape(-1) for g in grads])
    adam_step(flat, gflat, state)
    model.set_flat_trainable(flat)
    return loss


# -- GHSM serialization ----------------------------------------------------

def _header_dict(model: Model) -> dict:
    return {
        "version": GHSM_VERSION,
        "arch": model.arch.to_dict(),
        "zone_id": model.zone_id,
        "seed": model.seed,
        "epochs_trained": model.epochs_trained,
    }


def save_model(model: Model, path) -> None:
    header = json.dumps(_header_dict(model), sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(GHSM_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for arr in model.serialization_arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_model_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4 or magic != GHSM_MAGIC:
            raise FormatError(f"bad magic {magic!r} at offset 0")
        raw_len = f.read(4)
        if len(raw_len) < 4:
            raise FormatError("truncated header length at offset 4")
        (hlen,) = struct.unpack("<I", raw_len)
        header = f.read(hlen)
        if len(header) < hlen:
            raise FormatError(f"truncated header at offset {8 + len(header)}")
    try:
        parsed = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"undecodable header at offset 8: {exc}") from exc
    if parsed.get("version") != GHSM_VERSION:
        raise FormatError(f"unsupported model version {parsed.get('version')}")
    return parsed


def load_model(path) -> Model:
    hdr = read_model_header(path)
    arch = ArchitectureConfig.from_dict(hdr["arch"])
    model = build_model(arch, seed=hdr["seed"], zone_id=hdr["zone_id"])
    model.epochs_trained = hdr["epochs_trained"]
    with open(path, "rb") as f:
        f.seek(4)
        (hlen,) = struct.unpack("<I", f.read(4))
        offset = 8 + hlen
        f.seek(offset)
        blob = f.read()
    arrays = model.serialization_arrays()
    need = sum(a.size for a in arrays) * 4
    if len(blob) != need:
        raise FormatError(
            f"truncated parameter payload at offset {offset + len(blob)}: "
            f"expected {offset + need} bytes total"
        )
    flat = np.frombuffer(blob, dtype="<f4")
    pos = 0
    for a in arrays:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return model
