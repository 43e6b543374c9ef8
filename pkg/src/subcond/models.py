"""Desk-scale reference networks in the four comparison conditions.

``agnostic``            one model of plain layers trained on pooled data
``specific``            one plain model per subject
``lora``                one adapter-only low-rank model per subject
``subject_conditioned`` one model whose hidden layers are subject-conditioned

The classification head is a plain shared linear layer in every mode.
"""
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, UsageError
from .layers import (
    UNKNOWN,
    Conv2d,
    Linear,
    LowRankConv2d,
    LowRankLinear,
    Module,
    SUBJECT_LAYERS,
    SubjectConditionedConv2d,
    SubjectConditionedLinear,
)
from .tensor import Tensor

MODES = ("agnostic", "specific", "lora", "subject_conditioned")
ARCHITECTURES = ("mlp", "cnn")


@dataclass
class ModelConfig:
    architecture: str = "mlp"
    mode: str = "subject_conditioned"
    input_shape: tuple = (16,)
    n_classes: int = 4
    n_subjects: int = 6
    hidden: tuple = (64, 32)
    channels: tuple = (8, 16)
    temporal_kernel: int = 9
    rank: int = 4
    alpha: float = 1.0
    activation: str = "elu"
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_classes < 2 or self.n_subjects < 1:
            raise ConfigError(f"need >= 2 classes and >= 1 subject, got {self.n_classes}, {self.n_subjects}")
        if any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input shape must be positive, got {self.input_shape}")
        if self.rank < 1 or self.alpha < 0:
            raise ConfigError(f"rank must be >= 1 and alpha >= 0, got {self.rank}, {self.alpha}")
        if self.architecture == "mlp":
            if len(self.hidden) != 2 or min(self.hidden) < 1:
                raise ConfigError(f"mlp needs two positive hidden sizes, got {self.hidden}")
            dims = [(int(np.prod(self.input_shape)), self.hidden[0]), (self.hidden[0], self.hidden[1])]
            limit = min(min(d) for d in dims)
        else:
            if len(self.input_shape) != 2:
                raise ConfigError(f"cnn input must be (channels, time), got {self.input_shape}")
            if len(self.channels) != 2 or min(self.channels) < 1:
                raise ConfigError(f"cnn needs two positive channel counts, got {self.channels}")
            if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
                raise ConfigError(f"temporal kernel must be odd and positive, got {self.temporal_kernel}")
            f1, f2 = self.channels
            c = self.input_shape[0]
            limit = min(min(self.temporal_kernel, f1), min(f1 * c, f2))
        if self.mode in ("lora", "subject_conditioned") and self.rank > limit:
            raise ConfigError(f"rank {self.rank} exceeds the smallest adapted dimension {limit}")

    def to_dict(self):
        d = asdict(self)
        for key in ("input_shape", "hidden", "channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**data)


def _variant_linear(cfg, n_in, n_out, name, seed):
    act = cfg.activation
    if cfg.mode in ("agnostic", "specific"):
        return Linear(n_in, n_out, cfg.bias, act, seed, name)
    if cfg.mode == "lora":
        return LowRankLinear(n_in, n_out, cfg.rank, cfg.alpha, cfg.bias, act, seed, name)
    return SubjectConditionedLinear(n_in, n_out, cfg.rank, cfg.n_subjects, cfg.alpha, cfg.bias, act, seed, name)


def _variant_conv(cfg, c_in, c_out, kernel, padding, name, seed):
    act = cfg.activation
    if cfg.mode in ("agnostic", "specific"):
        return Conv2d(c_in, c_out, kernel, 1, padding, cfg.bias, act, seed, name)
    if cfg.mode == "lora":
        return LowRankConv2d(c_in, c_out, kernel, cfg.rank, cfg.alpha, 1, padding, cfg.bias, act, seed, name)
    return SubjectConditionedConv2d(c_in, c_out, kernel, cfg.rank, cfg.n_subjects, cfg.alpha, 1, padding,
                                    cfg.bias, act, seed, name)


class _Network(Module):
    """Shared plumbing of the MLP and CNN: variant body, plain head."""

    config: ModelConfig

    @property
    def layers(self):
        return [self.layer1, self.layer2, self.head]

    @property
    def subject_layers(self):
        return [l for l in self.layers if isinstance(l, SUBJECT_LAYERS)]

    @property
    def subjects(self):
        sl = self.subject_layers
        return sl[0].subjects if sl else []

    def _call_layer(self, layer, x, ids):
        if isinstance(layer, SUBJECT_LAYERS):
            return layer(x, ids)
        return layer(x)

    def _ids(self, x, subject_ids):
        if subject_ids is None:
            return np.full(x.shape[0], UNKNOWN, dtype=np.int64)
        return np.asarray(subject_ids, dtype=np.int64).reshape(-1)

    def forward(self, x, subject_ids=None):
        return self.forward_with_taps(x, subject_ids, taps=False)[0]

    def add_subject(self, subject):
        for layer in self.subject_layers:
            layer.add_subject(subject)

    def adapter_parameters(self, subject):
        out = {}
        for layer in self.subject_layers:
            out.update(layer.adapter_parameters(subject))
        return out


class MLP(_Network):
    """flatten -> variant(h1) -> act -> variant(h2) -> act -> plain head(K)."""

    def __init__(self, cfg, name_prefix=""):
        self.config = cfg
        n_in = int(np.prod(cfg.input_shape))
        h1, h2 = cfg.hidden
        self.layer1 = _variant_linear(cfg, n_in, h1, name_prefix + "layer1", cfg.seed)
        self.layer2 = _variant_linear(cfg, h1, h2, name_prefix + "layer2", cfg.seed)
        self.head = Linear(h2, cfg.n_classes, True, "identity", cfg.seed, name_prefix + "head")

    def forward_with_taps(self, x, subject_ids=None, taps=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        ids = self._ids(x, subject_ids)
        h = T.reshape(x, (x.shape[0], -1))
        h = self._call_layer(self.layer1, h, ids)
        tap = None
        if taps and isinstance(self.layer2, SUBJECT_LAYERS):
            general, adapter = self.layer2.parts(h, ids)
            fused = general + adapter
            tap = (general.data, adapter.data, fused.data)
            h = T.activation(fused, self.config.activation)
        else:
            h = self._call_layer(self.layer2, h, ids)
        return self.head(h), tap


class CNN(_Network):
    """temporal conv (1 x k, same) -> act -> spatial conv (C x 1) -> act -> time mean -> head.

    Input trials are ``C x T``; they enter the network as ``1 x C x T`` images.
    The embedding tap is the spatial-conv pre-activation averaged over time.
    """

    def __init__(self, cfg, name_prefix=""):
        self.config = cfg
        c, _ = cfg.input_shape
        f1, f2 = cfg.channels
        k = cfg.temporal_kernel
        self.layer1 = _variant_conv(cfg, 1, f1, (1, k), (0, k // 2), name_prefix + "layer1", cfg.seed)
        self.layer2 = _variant_conv(cfg, f1, f2, (c, 1), 0, name_prefix + "layer2", cfg.seed)
        self.head = Linear(f2, cfg.n_classes, True, "identity", cfg.seed, name_prefix + "head")

    def forward_with_taps(self, x, subject_ids=None, taps=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        ids = self._ids(x, subject_ids)
        c, t = self.config.input_shape
        h = T.reshape(x, (x.shape[0], 1, c, t))
        h = self._call_layer(self.layer1, h, ids)
        tap = None
        if taps and isinstance(self.layer2, SUBJECT_LAYERS):
            general, adapter = self.layer2.parts(h, ids)
            fused = general + adapter
            tap = tuple(p.data.mean(axis=(2, 3)) for p in (general, adapter, fused))
            h = T.activation(fused, self.config.activation)
        else:
            h = self._call_layer(self.layer2, h, ids)
        h = T.mean(h, axis=(2, 3))
        return self.head(h), tap


class SubjectEnsemble:
    """Independent per-subject models (``specific`` and ``lora`` modes)."""

    def __init__(self, cfg, members):
        self.config = cfg
        self.members = members

    @property
    def subjects(self):
        return list(self.members)

    def parameters(self):
        out = {}
        for s, m in self.members.items():
            out.update({f"s{s}.{k}": v for k, v in m.named_parameters()})
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def forward(self, x, subject_ids):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if subject_ids is None:
            raise UsageError(f"{self.config.mode} models need subject ids")
        ids = np.asarray(subject_ids, dtype=np.int64).reshape(-1)
        foreign = sorted(set(ids.tolist()) - set(self.members))
        if foreign:
            raise UsageError(f"{self.config.mode} ensemble has no model for subjects {foreign}")
        present = [s for s in self.members if np.any(ids == s)]
        rows = [np.flatnonzero(ids == s) for s in present]
        parts = [self.members[s](T.take_rows(x, ix)) for s, ix in zip(present, rows)]
        return T.scatter_rows(parts, rows, ids.size, (self.config.n_classes,))

    __call__ = forward


def build_model(cfg):
    """Build the network(s) a config describes.

    Returns a single network for ``agnostic``/``subject_conditioned`` and a
    :class:`SubjectEnsemble` of ``n_subjects`` parameter-disjoint networks
    for ``specific``/``lora``.
    """
    cfg.validate()
    cls = MLP if cfg.architecture == "mlp" else CNN
    if cfg.mode in ("agnostic", "subject_conditioned"):
        return cls(cfg)
    return SubjectEnsemble(cfg, {s: cls(cfg, name_prefix=f"subject{s}.") for s in range(cfg.n_subjects)})


def is_ensemble(model):
    return isinstance(model, SubjectEnsemble)


def logits(model, X, subject_ids=None):
    return model.forward(Tensor(X), subject_ids).data


def predict(model, X, subject_ids=None):
    """Class indices by argmax of the logits; ties go to the lowest index.

    ``subject_ids`` may contain ``UNKNOWN`` (or be ``None``) for
    subject-conditioned models, which then use the shared path only.
    """
    return np.argmax(logits(model, X, subject_ids), axis=1)


def forward_with_taps(model, X, subject_ids):
    """Logits plus (general, adapter, fused) penultimate pre-activation embeddings."""
    if is_ensemble(model) or not model.subject_layers:
        raise UsageError("embedding taps need a subject_conditioned model")
    out, tap = model.forward_with_taps(Tensor(X), subject_ids, taps=True)
    return out.data, tap


def count_params(model):
    """Total and active parameter counts.

    ``total = shared + N * adapter`` and ``active = shared + adapter``, where
    ``adapter`` is the parameter count one subject adds. An ensemble of
    independent per-subject models has no shared part.
    """
    if is_ensemble(model):
        sizes = {sum(p.size for p in m.parameters().values()) for m in model.members.values()}
        (per_model,) = sizes
        n = len(model.members)
        return {"shared": 0, "adapter": per_model, "n_subjects": n,
                "total": n * per_model, "active": per_model}
    shared = adapter = 0
    for layer in model.layers:
        c = layer.param_counts()
        shared += c["shared"]
        adapter += c["adapter"]
    n = len(model.subjects) if adapter else 0
    return {"shared": shared, "adapter": adapter, "n_subjects": n,
            "total": shared + n * adapter, "active": shared + adapter}


# ---------------------------------------------------------------- persistence


def state_dict(model):
    return {k: v.data.copy() for k, v in model.parameters().items()}


def save_model(model, path):
    """Write config, subject list and parameters to an ``.npz`` archive."""
    meta = {"config": model.config.to_dict(), "subjects": [int(s) for s in model.subjects]}
    arrays = {f"param:{k}": v for k, v in state_dict(model).items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)


def load_model(path):
    with np.load(path) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode())
        arrays = {k[len("param:"):]: archive[k] for k in archive.files if k.startswith("param:")}
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_model(cfg)
    if not is_ensemble(model):
        for s in meta["subjects"]:
            if s not in model.subjects:
                model.add_subject(s)
    params = model.parameters()
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise InputError(f"model file {path} lacks parameters {missing[:3]}")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise InputError(f"parameter {k} has shape {arrays[k].shape}, expected {p.shape}")
        p.data = arrays[k].astype(np.float64)
    return model
