"""Post-LN transformer encoder with an MLM head and an optional classifier."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .data import Batch
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    SequenceTooLongError,
)
from .tensor import Tensor

_NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_attention_heads: int = 2
    ffn_dim: int = 256
    vocab_size: int = 64
    max_position: int = 128
    dropout_rate: float = 0.0
    tie_embeddings: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_attention_heads", "ffn_dim", "vocab_size", "max_position"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_attention_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by {self.num_attention_heads} heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_attention_heads

    def replace(self, **changes) -> "EncoderConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


# Full-scale rows are for reference (parameter accounting); desk rows are the runnable ones.
PRESETS: dict[str, EncoderConfig] = {
    "bert": EncoderConfig(12, 768, 12, 3072, vocab_size=30522, max_position=512, dropout_rate=0.1),
    "bertlet": EncoderConfig(4, 512, 8, 2048, vocab_size=30522, max_position=512, dropout_rate=0.1),
    "desk": EncoderConfig(2, 64, 2, 256, vocab_size=1024, max_position=128),
    "tiny": EncoderConfig(1, 32, 2, 64, vocab_size=64, max_position=64),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


def parameter_shapes(config: EncoderConfig, num_classes: int | None = None) -> dict[str, tuple]:
    """Name -> shape for every parameter; a pure function of the config."""
    h, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple] = {
        "embeddings.token": (v, h),
        "embeddings.position": (config.max_position, h),
        "embeddings.norm.gamma": (h,),
        "embeddings.norm.beta": (h,),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attention.{proj}.weight"] = (h, h)
            shapes[p + f"attention.{proj}.bias"] = (h,)
        shapes[p + "attention.norm.gamma"] = (h,)
        shapes[p + "attention.norm.beta"] = (h,)
        shapes[p + "ffn.up.weight"] = (h, f)
        shapes[p + "ffn.up.bias"] = (f,)
        shapes[p + "ffn.down.weight"] = (f, h)
        shapes[p + "ffn.down.bias"] = (h,)
        shapes[p + "ffn.norm.gamma"] = (h,)
        shapes[p + "ffn.norm.beta"] = (h,)
    shapes["mlm.transform.weight"] = (h, h)
    shapes["mlm.transform.bias"] = (h,)
    shapes["mlm.norm.gamma"] = (h,)
    shapes["mlm.norm.beta"] = (h,)
    if not config.tie_embeddings:
        shapes["mlm.decoder.weight"] = (h, v)
    shapes["mlm.decoder.bias"] = (v,)
    if num_classes is not None:
        shapes["classifier.weight"] = (h, num_classes)
        shapes["classifier.bias"] = (num_classes,)
    return shapes


def parameter_count(config: EncoderConfig, num_classes: int | None = None) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config, num_classes).values()))


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def _init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("gamma"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith("bias") or name.endswith("beta"):
        return np.zeros(shape, dtype=np.float32)
    return _truncated_normal(rng, shape)


class EncoderModel:
    """Parameter container plus forward passes.

    ``params`` maps stable names to float32 tensors. The classifier head is
    optional and added with :meth:`attach_classifier`.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0, num_classes: int | None = None):
        self.config = config
        self.num_classes: int | None = None
        rng = np.random.default_rng([seed, 101])
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_param(name, shape, rng), requires_grad=True, name=name)
            for name, shape in parameter_shapes(config).items()
        }
        if num_classes is not None:
            self.attach_classifier(num_classes, seed=seed)

    # parameter management ----------------------------------------------

    def attach_classifier(self, num_classes: int, seed: int = 0) -> None:
        if num_classes < 2:
            raise ConfigError("a classifier needs at least two classes")
        rng = np.random.default_rng([seed, 202])
        h = self.config.hidden_dim
        self.params["classifier.weight"] = Tensor(
            _truncated_normal(rng, (h, num_classes)), requires_grad=True, name="classifier.weight")
        self.params["classifier.bias"] = Tensor(
            np.zeros(num_classes, dtype=np.float32), requires_grad=True, name="classifier.bias")
        self.num_classes = num_classes

    def detach_classifier(self) -> None:
        self.params.pop("classifier.weight", None)
        self.params.pop("classifier.bias", None)
        self.num_classes = None

    @property
    def has_classifier(self) -> bool:
        return "classifier.weight" in self.params

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def head_parameter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("classifier.")]

    def body_parameter_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("classifier.")]

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise CheckpointShapeError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, arr in state.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise CheckpointShapeError(
                    f"{name}: checkpoint shape {tuple(arr.shape)} vs model {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=np.float32)

    def copy(self) -> "EncoderModel":
        clone = EncoderModel.__new__(EncoderModel)
        clone.config = self.config
        clone.num_classes = self.num_classes
        clone.params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        return clone

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # forward ------------------------------------------------------------

    def _check_input(self, ids: np.ndarray) -> None:
        if ids.shape[1] > self.config.max_position:
            raise SequenceTooLongError(
                f"sequence length {ids.shape[1]} exceeds max_position {self.config.max_position}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ConfigError(f"token id outside model vocabulary of {self.config.vocab_size}")

    def encode(self, ids: np.ndarray, attention_mask: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Final hidden states, shape (batch, length, hidden)."""
        ids = np.asarray(ids, dtype=np.int64)
        attention_mask = np.asarray(attention_mask, dtype=bool)
        self._check_input(ids)
        cfg, p = self.config, self.params
        rate = cfg.dropout_rate
        b, n = ids.shape
        x = ops.add(ops.embedding(p["embeddings.token"], ids),
                    ops.index(p["embeddings.position"], slice(0, n)))
        x = ops.layer_norm(x, p["embeddings.norm.gamma"], p["embeddings.norm.beta"], cfg.layer_norm_eps)
        x = ops.dropout(x, rate, rng, train)
        bias = np.where(attention_mask, 0.0, _NEG_INF)[:, None, None, :]
        for i in range(cfg.num_layers):
            x = self._layer(x, f"layers.{i}.", bias, b, n, train, rng)
        return x

    def _layer(self, x, prefix, bias, b, n, train, rng):
        cfg, p = self.config, self.params
        heads, hd, rate = cfg.num_attention_heads, cfg.head_dim, cfg.dropout_rate

        def split(t):
            return ops.transpose(ops.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

        a = prefix + "attention."
        q = split(ops.linear(x, p[a + "query.weight"], p[a + "query.bias"]))
        k = split(ops.linear(x, p[a + "key.weight"], p[a + "key.bias"]))
        v = split(ops.linear(x, p[a + "value.weight"], p[a + "value.bias"]))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        weights = ops.softmax(ops.add(scores, bias), axis=-1)
        weights = ops.dropout(weights, rate, rng, train)
        ctx = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (b, n, cfg.hidden_dim))
        attn = ops.linear(ctx, p[a + "output.weight"], p[a + "output.bias"])
        x = ops.layer_norm(ops.add(x, ops.dropout(attn, rate, rng, train)),
                           p[a + "norm.gamma"], p[a + "norm.beta"], cfg.layer_norm_eps)
        f = prefix + "ffn."
        hidden = ops.gelu(ops.linear(x, p[f + "up.weight"], p[f + "up.bias"]))
        out = ops.linear(hidden, p[f + "down.weight"], p[f + "down.bias"])
        return ops.layer_norm(ops.add(x, ops.dropout(out, rate, rng, train)),
                              p[f + "norm.gamma"], p[f + "norm.beta"], cfg.layer_norm_eps)

    def mlm_head(self, hidden: Tensor) -> Tensor:
        p, cfg = self.params, self.config
        t = ops.gelu(ops.linear(hidden, p["mlm.transform.weight"], p["mlm.transform.bias"]))
        t = ops.layer_norm(t, p["mlm.norm.gamma"], p["mlm.norm.beta"], cfg.layer_norm_eps)
        if cfg.tie_embeddings:
            decoder = ops.transpose(p["embeddings.token"], (1, 0))
        else:
            decoder = p["mlm.decoder.weight"]
        return ops.linear(t, decoder, p["mlm.decoder.bias"])

    def forward_mlm(self, batch: Batch | np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None, attention_mask: np.ndarray | None = None) -> Tensor:
        """Logits of shape (batch, padded_len, |V|).

        ``batch`` may be a :class:`Batch` or a raw id matrix with ``attention_mask``.
        """
        ids, att = _unpack(batch, attention_mask)
        return self.mlm_head(self.encode(ids, att, train, rng))

    def classify_hidden(self, hidden: Tensor) -> Tensor:
        if not self.has_classifier:
            raise ConfigError("model has no classification head; call attach_classifier first")
        cls_state = ops.index(hidden, (slice(None), 0))
        return ops.linear(cls_state, self.params["classifier.weight"], self.params["classifier.bias"])

    def forward_classify(self, batch: Batch | np.ndarray, train: bool = False,
                         rng: np.random.Generator | None = None, attention_mask: np.ndarray | None = None) -> Tensor:
        """Class logits (batch, num_classes) from the cls-position hidden state."""
        if not self.has_classifier:
            raise ConfigError("model has no classification head; call attach_classifier first")
        ids, att = _unpack(batch, attention_mask)
        return self.classify_hidden(self.encode(ids, att, train, rng))


def _unpack(batch, attention_mask):
    if isinstance(batch, Batch):
        return batch.ids, batch.attention_mask
    ids = np.asarray(batch, dtype=np.int64)
    if attention_mask is None:
        attention_mask = np.ones(ids.shape, dtype=bool)
    return ids, attention_mask


def forward_mlm(model: EncoderModel, batch: Batch, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    return model.forward_mlm(batch, train_mode, rng)


def forward_classify(model: EncoderModel, batch: Batch, train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    return model.forward_classify(batch, train_mode, rng)


# checkpoints --------------------------------------------------------------

MAGIC = b"ENTMASK\x00"
FORMAT_VERSION = 1


def save_checkpoint(model: EncoderModel, path, meta: dict | None = None) -> Path:
    """Write magic, version, JSON header (config + meta), then named float32 LE records."""
    path = Path(path)
    header = json.dumps({"config": model.config.to_dict(), "num_classes": model.num_classes,
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.path}: checkpoint truncated at byte {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[EncoderConfig, int | None, dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (config, num_classes, meta, arrays) without building a model."""
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if len(r.buf) < len(MAGIC) or r.buf[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an entmask checkpoint (bad magic bytes)")
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = EncoderConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header ({exc})") from exc
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes after last record")
    return config, header.get("num_classes"), header.get("meta", {}), arrays


def load_checkpoint(path, expected_config: EncoderConfig | None = None) -> EncoderModel:
    """Rebuild a model from ``path``.

    With ``expected_config`` the stored tensors must fit that config's shapes,
    otherwise :class:`CheckpointShapeError` is raised.
    """
    config, num_classes, _meta, arrays = read_checkpoint(path)
    target = expected_config or config
    shapes = parameter_shapes(target, num_classes)
    for name, shape in shapes.items():
        if name in arrays and tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointShapeError(
                f"{path}: {name} has shape {tuple(arrays[name].shape)}, config expects {tuple(shape)}")
    model = EncoderModel.__new__(EncoderModel)
    model.config = target
    model.num_classes = num_classes
    model.params = {n: Tensor(np.zeros(s, dtype=np.float32), requires_grad=True, name=n)
                    for n, s in shapes.items()}
    model.load_state_dict(arrays)
    return model


def checkpoint_meta(path) -> dict:
    return read_checkpoint(path)[2]
