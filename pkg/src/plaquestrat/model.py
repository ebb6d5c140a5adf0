"""The six-conv / three-pool / two-FC classifier: construction, forward pass,
L2 penalty and the PQS1 binary format."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"PQS1"
FORMAT_VERSION = 1
KERNEL_SIZE = 5
POOL_SIZE = 3


@dataclass(frozen=True)
class ModelConfig:
    filters: tuple[int, ...] = (8, 8, 16, 16, 32, 32)
    fc_width: int = 64
    conv_dropout: float = 0.1
    fc_dropout: float = 0.3
    l2_lambda: float = 1e-3
    input_size: tuple[int, int] = (96, 96)

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.filters) != 6 or min(self.filters) < 1:
            raise ConfigError(f"filters must be 6 positive ints, got {self.filters}")
        if self.fc_width < 1:
            raise ConfigError(f"fc_width must be >= 1, got {self.fc_width}")
        for name in ("conv_dropout", "fc_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be two extents >= 1, got {self.input_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["input_size"] = list(self.input_size)
        return d


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | flatten | dense
    name: str
    stage: str  # features | classifier
    activation: str | None = None


def layer_plan(config: ModelConfig) -> list[LayerSpec]:
    layers = []
    for block in range(3):
        for j in range(2):
            idx = 2 * block + j + 1
            layers.append(LayerSpec("conv", f"conv{idx}", "features", "relu"))
        layers.append(LayerSpec("pool", f"pool{block + 1}", "features"))
    layers.append(LayerSpec("flatten", "flatten", "classifier"))
    layers.append(LayerSpec("dense", "fc1", "classifier", "relu"))
    layers.append(LayerSpec("dense", "fc2", "classifier", "softmax"))
    return layers


def pooled_size(n: int, times: int = 3) -> int:
    for _ in range(times):
        n = -(-n // POOL_SIZE)
    return n


def feature_dim(config: ModelConfig) -> int:
    h, w = config.input_size
    return pooled_size(h) * pooled_size(w) * config.filters[-1]


@dataclass
class CnnModel:
    config: ModelConfig
    layers: list[LayerSpec]
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def feature_params(self) -> list[str]:
        return [k for k in self.params if k.startswith("conv")]

    @property
    def classifier_params(self) -> list[str]:
        return [k for k in self.params if k.startswith("fc")]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, list(self.layers), {k: v.copy() for k, v in self.params.items()})


def build_model(config: ModelConfig, rng: np.random.Generator) -> CnnModel:
    """He-uniform (fan-in) weights drawn from ``rng`` in layer order, zero biases."""
    params: dict[str, np.ndarray] = {}
    cin = 1
    for i, cout in enumerate(config.filters, start=1):
        fan_in = KERNEL_SIZE * KERNEL_SIZE * cin
        limit = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-limit, limit, (KERNEL_SIZE, KERNEL_SIZE, cin, cout))
        params[f"conv{i}.bias"] = np.zeros(cout)
        cin = cout
    n_in = feature_dim(config)
    for name, n_out in (("fc1", config.fc_width), ("fc2", 2)):
        limit = np.sqrt(6.0 / n_in)
        params[f"{name}.weight"] = rng.uniform(-limit, limit, (n_out, n_in))
        params[f"{name}.bias"] = np.zeros(n_out)
        n_in = n_out
    return CnnModel(config, layer_plan(config), params)


def _check_images(model: CnnModel, images: np.ndarray) -> tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    expected = (*model.config.input_size, 1)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"image shape {images.shape[-3:] if images.ndim >= 3 else images.shape} "
                         f"does not match model input {expected}")
    return batch, single


def parameter_tensors(model: CnnModel, names=None, requires_grad: bool = False) -> dict[str, nn.Tensor]:
    trainable = set(model.params if names is None else names)
    return {k: nn.Tensor(v, requires_grad=requires_grad and k in trainable) for k, v in model.params.items()}


def extract_features(model: CnnModel, x, tensors: dict[str, nn.Tensor], mode: str, rng=None) -> nn.Tensor:
    """Run the conv/pool stage; returns flattened (N, feature_dim) features."""
    rate = model.config.conv_dropout
    for layer in model.layers:
        if layer.kind == "conv":
            x = nn.conv2d(x, tensors[f"{layer.name}.weight"], tensors[f"{layer.name}.bias"])
            x = nn.dropout(nn.relu(x), rate, mode, rng)
        elif layer.kind == "pool":
            x = nn.avg_pool(x, POOL_SIZE)
        elif layer.kind == "flatten":
            x = nn.flatten(x)
    return x


def classify(model: CnnModel, features, tensors: dict[str, nn.Tensor], mode: str, rng=None) -> nn.Tensor:
    """FC-ReLU-dropout then FC-softmax. Returns (N, 2) probabilities."""
    h = nn.dense(features, tensors["fc1.weight"], tensors["fc1.bias"])
    h = nn.dropout(nn.relu(h), model.config.fc_dropout, mode, rng)
    return nn.softmax(nn.dense(h, tensors["fc2.weight"], tensors["fc2.bias"]))


def forward_graph(model: CnnModel, images, tensors, mode: str = nn.INFER, rng=None) -> nn.Tensor:
    batch, _ = _check_images(model, images)
    feats = extract_features(model, nn.Tensor(batch), tensors, mode, rng)
    return classify(model, feats, tensors, mode, rng)


def forward(model: CnnModel, images, mode: str = nn.INFER, rng=None) -> np.ndarray:
    """Class probabilities for one image (H, W, 1) -> (2,) or a batch -> (N, 2).

    Column 1 is the positive (symptomatic) class.
    """
    batch, single = _check_images(model, images)
    probs = forward_graph(model, batch, parameter_tensors(model), mode, rng).data
    return probs[0] if single else probs


def predict_proba(model: CnnModel, images, batch_size: int = 64) -> np.ndarray:
    """Positive-class probability for each image in a batch, inference mode."""
    images = np.asarray(images, dtype=np.float64)
    out = [forward(model, images[i : i + batch_size])[:, 1] for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def l2_penalty(model: CnnModel, tensors: dict[str, nn.Tensor] | None = None) -> nn.Tensor:
    """``l2_lambda * sum(w**2)`` over the two FC weight matrices only."""
    tensors = tensors if tensors is not None else parameter_tensors(model)
    total = nn.Tensor(0.0)
    for name in ("fc1.weight", "fc2.weight"):
        total = total + nn.sum_squares(tensors[name])
    return total * model.config.l2_lambda


# ---------------------------------------------------------------- serialization


def _pack_tensor(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def model_to_bytes(model: CnnModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps({"kind": "model", "config": model.config.to_dict(),
                      "params": list(model.params)}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for arr in model.params.values():
        _pack_tensor(buf, arr)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int, field_name: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated while reading {field_name} "
                              f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, field_name: str) -> int:
        return struct.unpack("<I", self.take(4, field_name))[0]

    def u64(self, field_name: str) -> int:
        return struct.unpack("<Q", self.take(8, field_name))[0]

    def header(self, kind: str) -> dict:
        magic = self.take(4, "magic")
        if magic != MAGIC:
            raise FormatError(f"{self.what}: bad magic {magic!r}, expected {MAGIC!r}")
        version = self.u32("version")
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.what}: unsupported version {version} (this build reads {FORMAT_VERSION})")
        raw = self.take(self.u32("header length"), "header")
        try:
            meta = json.loads(raw)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.what}: corrupt header ({exc})") from None
        if meta.get("kind") != kind:
            raise FormatError(f"{self.what}: header kind {meta.get('kind')!r}, expected {kind!r}")
        return meta


def model_from_bytes(data: bytes, what: str = "model") -> CnnModel:
    rd = _Reader(data, what)
    meta = rd.header("model")
    try:
        config = ModelConfig(**meta["config"])
        names = list(meta["params"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{what}: invalid config in header ({exc})") from None
    count = rd.u32("tensor count")
    if count != len(names):
        raise FormatError(f"{what}: tensor count {count} does not match {len(names)} names")
    reference = build_model(config, np.random.default_rng(0))
    params = {}
    for name in names:
        ndim = rd.u32(f"{name} ndim")
        shape = struct.unpack(f"<{ndim}I", rd.take(4 * ndim, f"{name} shape"))
        expected = reference.params.get(name)
        if expected is None or expected.shape != shape:
            raise FormatError(f"{what}: tensor {name} has shape {shape}, "
                              f"expected {None if expected is None else expected.shape}")
        size = int(np.prod(shape))
        params[name] = np.frombuffer(rd.take(8 * size, f"{name} data"), dtype="<f8").astype(np.float64).reshape(shape)
    if rd.pos != len(data):
        raise FormatError(f"{what}: {len(data) - rd.pos} trailing bytes")
    return CnnModel(config, layer_plan(config), params)


def save_model(model: CnnModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> CnnModel:
    return model_from_bytes(Path(path).read_bytes(), what=str(path))


def with_config(model: CnnModel, **changes) -> CnnModel:
    """Copy of ``model`` with non-structural config fields replaced."""
    return CnnModel(replace(model.config, **changes), list(model.layers),
                    {k: v.copy() for k, v in model.params.items()})
