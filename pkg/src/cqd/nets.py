"""Small sequential CNN classifiers standing in for the teacher and student.

A network is a stack of ``conv -> relu [-> 2x2 maxpool]`` blocks, one hidden
fully connected layer, and a linear classifier producing logits.  Images are
fed channels-last, ``(B, H, W, C)`` in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
import numpy as np

from . import tensor as T
from .errors import (CheckpointError, CheckpointFormatError, CheckpointPayloadError, CheckpointVersionError,
                     ContractError)

CLASSIFIER_PREFIX = "classifier."


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int = 3
    stride: int = 1
    pool: bool = True


@dataclass(frozen=True)
class ArchSpec:
    name: str
    blocks: tuple[ConvBlock, ...]
    hidden_dim: int = 128
    input_size: tuple[int, int, int] = (64, 64, 3)
    depth_class: str = "shallow"

    def __post_init__(self):
        if not self.blocks:
            raise ContractError("an architecture needs at least one conv block")
        if self.depth_class not in ("shallow", "deep"):
            raise ContractError(f"unknown depth class {self.depth_class!r}")
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.blocks))
        object.__setattr__(self, "input_size", tuple(self.input_size))

    def feature_shape(self) -> tuple[int, int, int]:
        """Spatial size and channels after the last conv block."""
        h, w, c = self.input_size
        for b in self.blocks:
            pad = (b.kernel - 1) // 2
            h = T.conv_output_size(h, b.kernel, b.stride, pad)
            w = T.conv_output_size(w, b.kernel, b.stride, pad)
            if h < 1 or w < 1:
                raise ContractError(f"architecture {self.name!r} collapses spatial size below 1")
            if b.pool:
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ContractError(f"architecture {self.name!r} pools spatial size below 1")
            c = b.filters
        return h, w, c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(name=d["name"], blocks=tuple(ConvBlock(**b) for b in d["blocks"]),
                   hidden_dim=d["hidden_dim"], input_size=tuple(d["input_size"]),
                   depth_class=d["depth_class"])


def shallow_arch(side: int = 64) -> ArchSpec:
    return ArchSpec("shallow", (ConvBlock(16, 4, 2, True), ConvBlock(32, 3, 1, True),
                                ConvBlock(64, 3, 1, True)),
                    hidden_dim=128, input_size=(side, side, 3), depth_class="shallow")


def deep_arch(side: int = 64) -> ArchSpec:
    return ArchSpec("deep", (ConvBlock(16, 4, 2, False), ConvBlock(32, 3, 1, True),
                             ConvBlock(32, 3, 1, False), ConvBlock(64, 3, 1, True),
                             ConvBlock(64, 3, 1, False), ConvBlock(64, 3, 1, True)),
                    hidden_dim=128, input_size=(side, side, 3), depth_class="deep")


ARCHS = {"shallow": shallow_arch, "deep": deep_arch}


def _he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _classifier_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


class Model:
    """A feed-forward classifier: named float32 parameters plus its arch."""

    def __init__(self, arch: ArchSpec, params: dict[str, T.Tensor], num_classes: int, seed: int):
        self.arch = arch
        self.params = params
        self.num_classes = num_classes
        self.seed = seed

    # parameters ---------------------------------------------------------
    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> "Model":
        params = {k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.arch, params, self.num_classes, self.seed)

    # forward ------------------------------------------------------------
    def _input(self, x) -> T.Tensor:
        if isinstance(x, T.Tensor):
            return x
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.arch.input_size):
            raise ContractError(f"model expects inputs of shape {self.arch.input_size}, got {x.shape[1:]}")
        return T.Tensor(x)

    def features(self, x) -> T.Tensor:
        """Hidden-layer activations feeding the classifier."""
        h = self._input(x)
        p = self.params
        for i, b in enumerate(self.arch.blocks):
            h = T.conv2d_nhwc(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"],
                              stride=b.stride, pad=(b.kernel - 1) // 2)
            h = T.relu(h)
            if b.pool:
                h = T.maxpool2d_nhwc(h, 2)
        h = T.flatten(h)
        return T.relu(T.linear(h, p["hidden.weight"], p["hidden.bias"]))

    def forward(self, x) -> T.Tensor:
        """Logits of shape ``(B, num_classes)``."""
        h = self.features(x)
        return T.linear(h, self.params[CLASSIFIER_PREFIX + "weight"],
                        self.params[CLASSIFIER_PREFIX + "bias"])

    __call__ = forward

    def predict_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Inference without recording a graph, batched."""
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i:i + batch_size]).data)
        if not out:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        return np.concatenate(out)


def build_model(arch: ArchSpec, num_classes: int, seed: int) -> Model:
    """Deterministically initialized model (He-uniform weights, zero biases)."""
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    fh, fw, fc = arch.feature_shape()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    params: dict[str, T.Tensor] = {}
    cin = arch.input_size[2]
    for i, b in enumerate(arch.blocks):
        fan_in = cin * b.kernel * b.kernel
        params[f"conv{i}.weight"] = T.Tensor(_he_uniform(rng, (b.filters, cin, b.kernel, b.kernel), fan_in),
                                             requires_grad=True)
        params[f"conv{i}.bias"] = T.Tensor(np.zeros(b.filters, np.float32), requires_grad=True)
        cin = b.filters
    flat = fh * fw * fc
    params["hidden.weight"] = T.Tensor(_he_uniform(rng, (arch.hidden_dim, flat), flat), requires_grad=True)
    params["hidden.bias"] = T.Tensor(np.zeros(arch.hidden_dim, np.float32), requires_grad=True)
    params.update(_classifier_params(_classifier_rng(seed), arch.hidden_dim, num_classes))
    return Model(arch, params, num_classes, seed)


def _classifier_params(rng, hidden: int, k: int) -> dict[str, T.Tensor]:
    return {
        CLASSIFIER_PREFIX + "weight": T.Tensor(_he_uniform(rng, (k, hidden), hidden), requires_grad=True),
        CLASSIFIER_PREFIX + "bias": T.Tensor(np.zeros(k, np.float32), requires_grad=True),
    }


def reinit_classifier(model: Model, k: int, seed: int) -> Model:
    """Copy of ``model`` with a freshly initialized ``k``-way final layer."""
    if k < 2:
        raise ContractError(f"need at least 2 classes, got {k}")
    params = {name: T.Tensor(p.data.copy(), requires_grad=True)
              for name, p in model.params.items() if not name.startswith(CLASSIFIER_PREFIX)}
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    params.update(_classifier_params(rng, model.arch.hidden_dim, k))
    return Model(model.arch, params, k, seed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CQDC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")  # magic, version, header byte length


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    table = []
    offset = 0
    payload = io.BytesIO()
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        payload.write(arr.tobytes())
        offset += arr.nbytes
    header = {
        "arch": model.arch.to_dict(),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "dtype": "<f4",
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload.getvalue()


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(checkpoint_bytes(model, extra))
    os.replace(tmp, path)


def read_checkpoint_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError("file too short for a checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointPayloadError("truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unparseable header: {e}") from e
    return header, start + hlen


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    header, base = read_checkpoint_header(blob)
    try:
        return _model_from_blob(header, memoryview(blob)[base:])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint header: {e!r}") from e


def _model_from_blob(header: dict, payload) -> Model:
    params = {}
    expected_end = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != nbytes:
            raise CheckpointPayloadError(
                f"tensor {entry['name']!r}: header declares {entry['nbytes']} bytes, shape needs {nbytes}")
        lo = entry["offset"]
        if lo != expected_end:
            raise CheckpointPayloadError(f"tensor {entry['name']!r} is not contiguous with its predecessor")
        if lo + nbytes > len(payload):
            raise CheckpointPayloadError(f"payload truncated inside tensor {entry['name']!r}")
        arr = np.frombuffer(payload[lo:lo + nbytes], dtype="<f4").reshape(shape)
        params[entry["name"]] = T.Tensor(arr.astype(np.float32), requires_grad=True)
        expected_end = lo + nbytes
    if expected_end != len(payload):
        raise CheckpointPayloadError(
            f"payload has {len(payload) - expected_end} trailing bytes beyond the declared tensors")
    arch = ArchSpec.from_dict(header["arch"])
    model = Model(arch, params, header["num_classes"], header["seed"])
    _check_param_shapes(model)
    return model


def _check_param_shapes(model: Model) -> None:
    ref = build_model(model.arch, model.num_classes, 0)
    if set(ref.params) != set(model.params):
        raise CheckpointPayloadError("parameter names do not match the architecture")
    for name, p in ref.params.items():
        if p.shape != model.params[name].shape:
            raise CheckpointPayloadError(f"parameter {name!r} has shape {model.params[name].shape}, "
                                         f"architecture needs {p.shape}")


def param_digest(model: Model) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()
