"""Backbone, label-wise embedding encoder and per-class classifier.

A model maps a batch of NHWC grids to a feature map ``[b, s, c]`` (backbone),
then cross-attends one learned query per class over the spatial positions to
get label-wise embeddings ``[b, q, d_e]`` (encoder), then applies a separate
linear head per class to get logits ``[b, q]`` (classifier).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from l2d import serialize
from l2d.tensor import (
    ShapeError,
    Tensor,
    avg_pool2x2,
    conv3x3,
    matmul,
    relu,
    sigmoid,
    softmax_lastdim,
)

TEACHER_WIDTHS = (32, 64, 128)
STUDENT_WIDTHS = (8, 16, 32)


@dataclass
class ModelConfig:
    input_size: tuple[int, int, int] = (32, 32, 3)
    widths: tuple[int, ...] = STUDENT_WIDTHS
    embed_dim: int = 32
    num_heads: int = 2
    num_classes: int = 8
    capacity: str = "student"
    seed: int = 0
    ffn_mult: int = 2
    positional_encoding: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.widths = tuple(int(v) for v in self.widths)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ValueError("backbone widths must be non-empty and positive")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.capacity not in ("teacher", "student"):
            raise ValueError(f"unknown capacity tag {self.capacity!r}")
        H, W, _ = self.input_size
        stride = 2 ** len(self.widths)
        if H % stride or W % stride:
            raise ValueError(f"input {H}x{W} not divisible by total stride {stride}")

    @property
    def num_positions(self) -> int:
        H, W, _ = self.input_size
        stride = 2 ** len(self.widths)
        return (H // stride) * (W // stride)

    @classmethod
    def teacher(cls, **kw) -> "ModelConfig":
        kw.setdefault("widths", TEACHER_WIDTHS)
        return cls(capacity="teacher", **kw)

    @classmethod
    def student(cls, **kw) -> "ModelConfig":
        kw.setdefault("widths", STUDENT_WIDTHS)
        return cls(capacity="student", **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


class Predictions(NamedTuple):
    logits: Tensor
    probs: Tensor


class ForwardOutput(NamedTuple):
    features: Tensor
    embeddings: Tensor
    predictions: Predictions


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator; adding parameters never shifts the others."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _uniform(seed, name, shape, fan_in, gain, dtype):
    bound = gain * np.sqrt(3.0 / fan_in)
    return param_rng(seed, name).uniform(-bound, bound, size=shape).astype(dtype)


def sinusoidal_positions(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


class MultiLabelNet:
    """Backbone f, label-wise encoder g and classifier h with named parameters."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _init_params(self) -> None:
        cfg = self.cfg
        dt = np.dtype(cfg.dtype)
        seed = cfg.seed
        relu_gain = np.sqrt(2.0)
        cin = cfg.input_size[2]
        for i, cout in enumerate(cfg.widths):
            fan = 9 * cin
            self._add(f"backbone.{i}.weight", _uniform(seed, f"backbone.{i}.weight", (3, 3, cin, cout), fan, relu_gain, dt))
            self._add(f"backbone.{i}.bias", np.zeros(cout, dtype=dt))
            cin = cout
        d = cfg.embed_dim
        q = cfg.num_classes
        self._add("encoder.queries", (param_rng(seed, "encoder.queries").normal(0.0, 0.02, size=(q, d))).astype(dt))
        for nm, fan_in in (("wq", d), ("wk", cin), ("wv", cin), ("wo", d)):
            shape = (fan_in, d)
            self._add(f"encoder.{nm}", _uniform(seed, f"encoder.{nm}", shape, fan_in, 1.0, dt))
        self._add("encoder.bo", np.zeros(d, dtype=dt))
        hidden = cfg.ffn_mult * d
        self._add("encoder.ffn1.weight", _uniform(seed, "encoder.ffn1.weight", (d, hidden), d, relu_gain, dt))
        self._add("encoder.ffn1.bias", np.zeros(hidden, dtype=dt))
        self._add("encoder.ffn2.weight", _uniform(seed, "encoder.ffn2.weight", (hidden, d), hidden, 1.0, dt))
        self._add("encoder.ffn2.bias", np.zeros(d, dtype=dt))
        self._add("head.weight", _uniform(seed, "head.weight", (q, d), d, 1.0, dt))
        self._add("head.bias", np.zeros(q, dtype=dt))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "MultiLabelNet":
        """Return a copy whose parameters are cast to ``dtype``."""
        cfg = dataclasses.replace(self.cfg, dtype=np.dtype(dtype).name)
        other = MultiLabelNet.__new__(MultiLabelNet)
        other.cfg = cfg
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                        for k, v in self.params.items()}
        return other

    def copy(self) -> "MultiLabelNet":
        return self.astype(self.cfg.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype).copy()

    # -- forward ------------------------------------------------------------

    def backbone(self, x) -> Tensor:
        """[b, H, W, C] grids -> feature map [b, s, c]."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.dtype))
        if x.ndim != 4 or tuple(x.shape[1:]) != self.cfg.input_size:
            raise ShapeError(f"expected input [b, {', '.join(map(str, self.cfg.input_size))}], got {x.shape}")
        h = x
        for i in range(len(self.cfg.widths)):
            h = conv3x3(h, self.params[f"backbone.{i}.weight"], self.params[f"backbone.{i}.bias"])
            h = avg_pool2x2(relu(h))
        b, hh, ww, c = h.shape
        return h.reshape(b, hh * ww, c)

    def attend(self, fm: Tensor, queries: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Multi-head cross-attention of class queries over positions.

        Returns ``(attended [b, q, d], weights [b, heads, q, s])``; the
        attended values are pre output-projection.
        """
        p = self.params
        cfg = self.cfg
        if queries is None:
            queries = p["encoder.queries"]
        b, s, c = fm.shape
        if cfg.positional_encoding:
            fm = fm + sinusoidal_positions(s, c, fm.dtype)
        d, nh = cfg.embed_dim, cfg.num_heads
        dh = d // nh
        nq = queries.shape[0]
        qh = matmul(queries, p["encoder.wq"]).reshape(nq, nh, dh).transpose(1, 0, 2)      # [h, q, dh]
        kh = matmul(fm, p["encoder.wk"]).reshape(b, s, nh, dh).transpose(0, 2, 3, 1)      # [b, h, dh, s]
        vh = matmul(fm, p["encoder.wv"]).reshape(b, s, nh, dh).transpose(0, 2, 1, 3)      # [b, h, s, dh]
        scores = matmul(qh, kh) * (1.0 / np.sqrt(dh))                                     # [b, h, q, s]
        weights = softmax_lastdim(scores)
        att = matmul(weights, vh)                                                         # [b, h, q, dh]
        return att.transpose(0, 2, 1, 3).reshape(b, nq, d), weights

    def encode(self, fm: Tensor) -> Tensor:
        """Feature map [b, s, c] -> label-wise embeddings [b, q, d_e]."""
        p = self.params
        att, _ = self.attend(fm)
        x = p["encoder.queries"] + matmul(att, p["encoder.wo"]) + p["encoder.bo"]
        hidden = relu(matmul(x, p["encoder.ffn1.weight"]) + p["encoder.ffn1.bias"])
        return x + matmul(hidden, p["encoder.ffn2.weight"]) + p["encoder.ffn2.bias"]

    def classify(self, embs: Tensor) -> Predictions:
        """Per-class linear heads: logit_k = <w_k, e_k> + b_k."""
        w = self.params["head.weight"]
        if embs.ndim != 3 or embs.shape[1:] != w.shape:
            raise ShapeError(f"embeddings {embs.shape} do not match head {w.shape}")
        logits = (embs * w).sum(axis=-1) + self.params["head.bias"]
        return Predictions(logits, sigmoid(logits))

    def forward(self, x) -> ForwardOutput:
        fm = self.backbone(x)
        embs = self.encode(fm)
        return ForwardOutput(fm, embs, self.classify(embs))

    __call__ = forward

    # -- persistence --------------------------------------------------------

    def save(self, path_bin: str | Path, path_json: str | Path | None = None) -> None:
        serialize.save_tensors(self.state_dict(), path_bin, path_json,
                               header={"model_config": self.cfg.to_dict()})

    @classmethod
    def load(cls, path_bin: str | Path, path_json: str | Path | None = None) -> "MultiLabelNet":
        tensors, header = serialize.load_tensors(path_bin, path_json)
        cfg = ModelConfig.from_dict(header["model_config"])
        model = cls(cfg)
        model.load_state_dict(tensors)
        return model


def checksum(model: MultiLabelNet) -> str:
    """Stable digest of all parameter bytes, in name order."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


def describe(model: MultiLabelNet) -> str:
    n = sum(p.size for p in model.parameters())
    return json.dumps({"capacity": model.cfg.capacity, "widths": list(model.cfg.widths), "parameters": int(n)})

