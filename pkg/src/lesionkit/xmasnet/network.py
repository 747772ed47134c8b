"""The XmasNet architecture: four conv/BN/ReLU blocks, two poolings, three FC layers."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..errors import ShapeMismatch
from . import layers as L


@dataclass(frozen=True)
class NetworkConfig:
    """Fixed topology; widths default to the published layer table.

    conv1 -> conv2 -> pool -> conv3 -> conv4 -> pool -> fc1 -> fc2 -> 2-way softmax,
    every conv followed by BN and ReLU, fc1/fc2 followed by ReLU.
    """

    in_channels: int = 3
    input_size: int = 32
    conv_channels: tuple[int, int, int, int] = (32, 32, 64, 64)
    fc_units: tuple[int, int] = (1024, 256)
    n_classes: int = 2

    def __post_init__(self):
        if self.input_size % 4:
            raise ValueError("input_size must be divisible by 4 (two 2x2 poolings)")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "fc_units", tuple(self.fc_units))

    @property
    def flat_features(self) -> int:
        return self.conv_channels[3] * (self.input_size // 4) ** 2

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-layer output shape as (H, W, C) for spatial layers and (units,) for FC."""
        s, c = self.input_size, self.conv_channels
        return [
            ("conv1", (s, s, c[0])),
            ("conv2", (s, s, c[1])),
            ("pool1", (s // 2, s // 2, c[1])),
            ("conv3", (s // 2, s // 2, c[2])),
            ("conv4", (s // 2, s // 2, c[3])),
            ("pool2", (s // 4, s // 4, c[3])),
            ("fc1", (self.fc_units[0],)),
            ("fc2", (self.fc_units[1],)),
            ("softmax", (self.n_classes,)),
        ]

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        c_in = (self.in_channels,) + self.conv_channels[:3]
        shapes = OrderedDict()
        for i, (ci, co) in enumerate(zip(c_in, self.conv_channels), start=1):
            shapes[f"conv{i}.weight"] = (co, ci, 3, 3)
            shapes[f"conv{i}.bias"] = (co,)
            shapes[f"bn{i}.gamma"] = (co,)
            shapes[f"bn{i}.beta"] = (co,)
        dims = (self.flat_features,) + self.fc_units + (self.n_classes,)
        for i in range(3):
            shapes[f"fc{i + 1}.weight"] = (dims[i + 1], dims[i])
            shapes[f"fc{i + 1}.bias"] = (dims[i + 1],)
        return shapes

    def buffer_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        shapes = OrderedDict()
        for i, co in enumerate(self.conv_channels, start=1):
            shapes[f"bn{i}.running_mean"] = (co,)
            shapes[f"bn{i}.running_var"] = (co,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["fc_units"] = list(self.fc_units)
        return d


class XmasNet:
    """Parameters, running statistics and the forward/backward pass."""

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, shape in config.param_shapes().items():
            if name.endswith("weight"):
                fan_in = int(np.prod(shape[1:]))
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name.endswith("gamma"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            self.params[name] = value.astype(self.dtype)
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, (np.ones(shape) if name.endswith("var") else np.zeros(shape)).astype(self.dtype))
            for name, shape in config.buffer_shapes().items()
        )
        self._caches: Optional[list] = None

    # --- state -----------------------------------------------------------------------

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(list(self.params.items()) + list(self.buffers.items()))

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.state().items())

    def load_state(self, state) -> None:
        for k in self.params:
            self.params[k] = np.array(state[k], dtype=self.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.dtype)

    # --- passes ------------------------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False, shapes: Optional[list] = None) -> np.ndarray:
        """Logits (N, n_classes). In train mode caches activations for ``backward``."""
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatch(f"XmasNet expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        p, buf = self.params, self.buffers
        h = x.astype(self.dtype, copy=False)
        caches = []

        def record(name, t):
            if shapes is not None:
                shapes.append((name, t.shape[2:] + t.shape[1:2] if t.ndim == 4 else t.shape[1:]))

        for i in range(1, 5):
            h, c_conv = L.conv3x3_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            h, c_bn = L.batchnorm_forward(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                          buf[f"bn{i}.running_mean"], buf[f"bn{i}.running_var"], train)
            h, c_relu = L.relu_forward(h)
            caches.append(("conv", i, c_conv, c_bn, c_relu))
            record(f"conv{i}", h)
            if i in (2, 4):
                h, c_pool = L.maxpool2x2_forward(h)
                caches.append(("pool", i, c_pool))
                record(f"pool{i // 2}", h)
        flat_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        caches.append(("flatten", flat_shape))
        for i in (1, 2):
            h, c_fc = L.fc_forward(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            h, c_relu = L.relu_forward(h)
            caches.append(("fc", i, c_fc, c_relu))
            record(f"fc{i}", h)
        logits, c_out = L.fc_forward(h, p["fc3.weight"], p["fc3.bias"])
        caches.append(("head", c_out))
        record("softmax", logits)
        self._caches = caches if train else None
        return logits

    def backward(self, dlogits: np.ndarray, need_input_grad: bool = True):
        """Gradients w.r.t. the input (None unless requested) and every parameter."""
        if self._caches is None:
            raise RuntimeError("backward needs a preceding forward(..., train=True)")
        grads = OrderedDict()
        d = dlogits.astype(self.dtype, copy=False)
        for entry in reversed(self._caches):
            kind = entry[0]
            if kind == "head":
                d, grads["fc3.weight"], grads["fc3.bias"] = L.fc_backward(d, entry[1])
            elif kind == "fc":
                _, i, c_fc, c_relu = entry
                d = L.relu_backward(d, c_relu)
                d, grads[f"fc{i}.weight"], grads[f"fc{i}.bias"] = L.fc_backward(d, c_fc)
            elif kind == "flatten":
                d = d.reshape(entry[1])
            elif kind == "pool":
                d = L.maxpool2x2_backward(d, entry[2])
            else:
                _, i, c_conv, c_bn, c_relu = entry
                d = L.relu_backward(d, c_relu)
                d, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = L.batchnorm_backward(d, c_bn)
                d, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = L.conv3x3_backward(
                    d, c_conv, need_dx=need_input_grad or i > 1)
        self._caches = None
        return d, OrderedDict((k, grads[k]) for k in self.params)

    def loss_and_grads(self, x, labels):
        logits = self.forward(x, train=True)
        loss, probs = L.softmax_xent(logits, labels)
        _, grads = self.backward(L.softmax_xent_backward(probs, labels), need_input_grad=False)
        return loss, grads

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference-mode softmax probabilities (N, n_classes)."""
        out = []
        for s in range(0, x.shape[0], batch_size):
            logits = self.forward(x[s:s + batch_size], train=False).astype(np.float64)
            _, probs = L.softmax_xent(logits, np.zeros(logits.shape[0], dtype=np.int64))
            out.append(probs)
        if not out:
            return np.zeros((0, self.config.n_classes))
        return np.concatenate(out)

    def output_shapes(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        shapes: list = []
        cfg = self.config
        self.forward(np.zeros((batch, cfg.in_channels, cfg.input_size, cfg.input_size), self.dtype), shapes=shapes)
        return shapes
