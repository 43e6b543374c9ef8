"""Subject-conditioned layers and their plain / low-rank counterparts.

A subject-conditioned layer keeps one full-rank weight shared by every
subject and, per subject ``s``, a rank-``r`` correction ``A_s B_s`` scaled by
``alpha / r``. Rows of a batch are routed to their subject's correction by
the subject ids that travel with the batch; rows flagged ``UNKNOWN`` only see
the shared weight.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .rng import derive_rng
from .tensor import Tensor

UNKNOWN = -1


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes, child ``Module`` attributes, or
    dicts of either; frozen parameters have ``requires_grad`` cleared. Names are dotted paths in
    attribute insertion order, so iteration order is deterministic.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, prefix + key)

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path):
    if isinstance(value, Tensor):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")


def _param(data, name):
    return Tensor(data, requires_grad=True, name=name)


def _bias(seed, name, size, fan_in):
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)); nonzero so stacked B=0 adapters are not a dead saddle
    bound = 1.0 / np.sqrt(fan_in)
    return _param(derive_rng(seed, name, "bias").uniform(-bound, bound, size), f"{name}.bias")


def _check_activation(kind):
    if kind not in T.ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {T.ACTIVATIONS}")


# ---------------------------------------------------------------- routing


@dataclass
class SubjectMask:
    """Row selections of a batch, one per known subject.

    ``rows[s]`` lists the batch rows of subject ``s`` in batch order;
    ``unknown`` lists rows whose subject has no adapter.
    """

    n_rows: int
    rows: dict = field(default_factory=dict)
    unknown: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))

    def active(self):
        """Subjects with at least one row, in ascending id order."""
        return [s for s, ix in self.rows.items() if ix.size]

    def matrix(self, subject):
        """Dense ``n_rows x n_rows`` binary diagonal mask for ``subject``."""
        m = np.zeros((self.n_rows, self.n_rows))
        ix = self.rows.get(subject, np.empty(0, dtype=np.intp))
        m[ix, ix] = 1.0
        return m

    def gather(self, x):
        return {s: T.take_rows(x, self.rows[s]) for s in self.active()}

    def scatter(self, parts, tail_shape):
        subjects = list(parts)
        return T.scatter_rows([parts[s] for s in subjects], [self.rows[s] for s in subjects],
                              self.n_rows, tail_shape)


def route(subject_ids, subjects):
    """Build the per-subject row selection for a batch.

    ``subjects`` is either a subject count ``N`` (ids ``0..N-1``) or an
    iterable of known ids. ``UNKNOWN`` (-1) rows select no subject.
    """
    ids = np.asarray(subject_ids, dtype=np.int64).reshape(-1)
    known = range(int(subjects)) if np.isscalar(subjects) else sorted(int(s) for s in subjects)
    rows = {int(s): np.flatnonzero(ids == s) for s in known}
    unknown = np.flatnonzero(ids == UNKNOWN)
    covered = unknown.size + sum(ix.size for ix in rows.values())
    if covered != ids.size:
        stray = sorted(set(ids.tolist()) - set(rows) - {UNKNOWN})
        raise InputError(f"subject ids {stray} have no adapter; use {UNKNOWN} for unknown subjects")
    return SubjectMask(n_rows=ids.size, rows=rows, unknown=unknown)


# ---------------------------------------------------------------- linear family


class Linear(Module):
    """Plain dense layer ``act(x W^T + b)`` with ``W`` of shape ``out x in``."""

    def __init__(self, in_features, out_features, bias=True, activation="identity", seed=0, name="linear"):
        _check_activation(activation)
        self.in_features, self.out_features = in_features, out_features
        self._activation = activation
        rng = derive_rng(seed, name, "weight")
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features)),
                             f"{name}.weight")
        self.bias = _bias(seed, name, out_features, in_features) if bias else None

    def pre_activation(self, x):
        _check_features(x, self.in_features)
        out = x @ self.weight.T
        return out + self.bias if self.bias is not None else out

    def forward(self, x, subject_ids=None):
        return T.activation(self.pre_activation(x), self._activation)

    def param_counts(self):
        n = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return {"shared": n, "adapter": 0}


def _check_features(x, n):
    if x.ndim != 2 or x.shape[1] != n:
        raise DimensionError(f"expected input of shape (B, {n}), got {x.shape}")
    if x.shape[0] == 0:
        raise InputError("empty batch")


class LowRankLinear(Module):
    """Adapter-only layer ``act((alpha/r) x A B + b)`` with no full-rank weight."""

    def __init__(self, in_features, out_features, rank, alpha=1.0, bias=True, activation="identity",
                 seed=0, name="lowrank"):
        _check_activation(activation)
        if not 1 <= rank <= min(in_features, out_features):
            raise ConfigError(f"rank {rank} outside [1, {min(in_features, out_features)}]")
        self.in_features, self.out_features, self.rank, self.alpha = in_features, out_features, rank, alpha
        self._activation = activation
        rng = derive_rng(seed, name, "A")
        self.A = _param(rng.normal(0.0, np.sqrt(1.0 / in_features), (in_features, rank)), f"{name}.A")
        self.B = _param(np.zeros((rank, out_features)), f"{name}.B")
        self.bias = _bias(seed, name, out_features, in_features) if bias else None

    def pre_activation(self, x):
        _check_features(x, self.in_features)
        out = T.scale((x @ self.A) @ self.B, self.alpha / self.rank)
        return out + self.bias if self.bias is not None else out

    def forward(self, x, subject_ids=None):
        return T.activation(self.pre_activation(x), self._activation)

    def param_counts(self):
        n = self.A.size + self.B.size + (self.bias.size if self.bias is not None else 0)
        return {"shared": n, "adapter": 0}


def low_rank_linear_forward(A, B, x, alpha, bias=None, activation="identity"):
    """Functional form of :class:`LowRankLinear`."""
    rank = A.shape[1]
    out = T.scale((x @ A) @ B, alpha / rank)
    if bias is not None:
        out = out + bias
    return T.activation(out, activation)


class SubjectConditionedLinear(Module):
    """Shared dense weight plus one scaled low-rank correction per subject.

    ``forward`` computes ``act(x W^T + b + sum_s M_s x (alpha/r) A_s B_s)``
    by gathering each subject's rows, applying its adapter and scattering
    the results back in batch order.
    """

    def __init__(self, in_features, out_features, rank, n_subjects, alpha=1.0, bias=True,
                 activation="identity", seed=0, name="sclinear"):
        _check_activation(activation)
        if not 1 <= rank <= min(in_features, out_features):
            raise ConfigError(f"rank {rank} outside [1, {min(in_features, out_features)}]")
        if n_subjects < 1:
            raise ConfigError(f"need at least one subject, got {n_subjects}")
        self.in_features, self.out_features = in_features, out_features
        self.rank, self.alpha = rank, alpha
        self._activation, self._seed, self._name = activation, seed, name
        rng = derive_rng(seed, name, "weight")
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features)),
                             f"{name}.weight")
        self.bias = _bias(seed, name, out_features, in_features) if bias else None
        self.A, self.B = {}, {}
        for s in range(n_subjects):
            self.add_subject(s)

    @property
    def subjects(self):
        return list(self.A)

    @property
    def n_subjects(self):
        return len(self.A)

    def add_subject(self, subject):
        """Create a fresh adapter for ``subject``: ``A ~ N(0, 1/in)``, ``B = 0``."""
        if subject in self.A:
            raise ConfigError(f"subject {subject} already has an adapter")
        rng = derive_rng(self._seed, self._name, "adapter", subject)
        n, m, r = self.in_features, self.out_features, self.rank
        self.A[subject] = _param(rng.normal(0.0, np.sqrt(1.0 / n), (n, r)), f"{self._name}.A.{subject}")
        self.B[subject] = _param(np.zeros((r, m)), f"{self._name}.B.{subject}")

    def adapter_parameters(self, subject):
        return {f"{self._name}.A.{subject}": self.A[subject], f"{self._name}.B.{subject}": self.B[subject]}

    def correction(self, subject):
        """Effective correction ``(alpha/r) A_s B_s`` as an ``in x out`` array."""
        return (self.alpha / self.rank) * (self.A[subject].data @ self.B[subject].data)

    def parts(self, x, subject_ids):
        """Return the shared-path and adapter-path pre-activations."""
        _check_features(x, self.in_features)
        mask = route(subject_ids, self.subjects)
        if mask.n_rows != x.shape[0]:
            raise DimensionError(f"{mask.n_rows} subject ids for a batch of {x.shape[0]}")
        general = x @ self.weight.T
        if self.bias is not None:
            general = general + self.bias
        coef = self.alpha / self.rank
        parts = {s: T.scale((xs @ self.A[s]) @ self.B[s], coef) for s, xs in mask.gather(x).items()}
        if parts:
            adapter = mask.scatter(parts, (self.out_features,))
        else:
            adapter = Tensor(np.zeros((x.shape[0], self.out_features)))
        return general, adapter

    def pre_activation(self, x, subject_ids):
        general, adapter = self.parts(x, subject_ids)
        return general + adapter

    def forward(self, x, subject_ids):
        return T.activation(self.pre_activation(x, subject_ids), self._activation)

    def param_counts(self):
        shared = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return {"shared": shared, "adapter": self.rank * (self.in_features + self.out_features)}


# ---------------------------------------------------------------- convolution family


def _conv_fan_in(c_in, kernel):
    return c_in * kernel[0] * kernel[1]


def _kernel_pair(kernel_size):
    if isinstance(kernel_size, (tuple, list)):
        return int(kernel_size[0]), int(kernel_size[1])
    return int(kernel_size), int(kernel_size)


class _ConvBase(Module):
    def _setup(self, in_channels, out_channels, kernel_size, stride, padding, activation):
        _check_activation(activation)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = _kernel_pair(kernel_size)
        self.stride, self.padding = stride, padding
        self._activation = activation

    def _add_bias(self, out):
        if self.bias is None:
            return out
        return out + T.reshape(self.bias, (1, self.out_channels, 1, 1))

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"expected input (B, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[0] == 0:
            raise InputError("empty batch")


class Conv2d(_ConvBase):
    """Plain convolution ``act(x * K + b)``."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True,
                 activation="identity", seed=0, name="conv"):
        self._setup(in_channels, out_channels, kernel_size, stride, padding, activation)
        kh, kw = self.kernel_size
        fan_in = _conv_fan_in(in_channels, self.kernel_size)
        rng = derive_rng(seed, name, "weight")
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / fan_in), (out_channels, in_channels, kh, kw)),
                             f"{name}.weight")
        self.bias = _bias(seed, name, out_channels, fan_in) if bias else None

    def pre_activation(self, x):
        self._check_input(x)
        return self._add_bias(T.conv2d(x, self.weight, self.stride, self.padding))

    def forward(self, x, subject_ids=None):
        return T.activation(self.pre_activation(x), self._activation)

    def param_counts(self):
        n = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return {"shared": n, "adapter": 0}


def _conv_rank_limit(in_channels, out_channels, kernel):
    return min(_conv_fan_in(in_channels, kernel), out_channels)


class LowRankConv2d(_ConvBase):
    """Adapter-only convolution: channel reduction to ``r`` then a 1x1 projection."""

    def __init__(self, in_channels, out_channels, kernel_size, rank, alpha=1.0, stride=1, padding=0,
                 bias=True, activation="identity", seed=0, name="lowrankconv"):
        self._setup(in_channels, out_channels, kernel_size, stride, padding, activation)
        limit = _conv_rank_limit(in_channels, out_channels, self.kernel_size)
        if not 1 <= rank <= limit:
            raise ConfigError(f"rank {rank} outside [1, {limit}]")
        self.rank, self.alpha = rank, alpha
        kh, kw = self.kernel_size
        fan_in = _conv_fan_in(in_channels, self.kernel_size)
        rng = derive_rng(seed, name, "A")
        self.A = _param(rng.normal(0.0, np.sqrt(1.0 / fan_in), (rank, in_channels, kh, kw)), f"{name}.A")
        self.B = _param(np.zeros((out_channels, rank, 1, 1)), f"{name}.B")
        self.bias = _bias(seed, name, out_channels, fan_in) if bias else None

    def pre_activation(self, x):
        self._check_input(x)
        reduced = T.conv2d(x, self.A, self.stride, self.padding)
        return self._add_bias(T.scale(T.conv2d(reduced, self.B), self.alpha / self.rank))

    def forward(self, x, subject_ids=None):
        return T.activation(self.pre_activation(x), self._activation)

    def param_counts(self):
        n = self.A.size + self.B.size + (self.bias.size if self.bias is not None else 0)
        return {"shared": n, "adapter": 0}


class SubjectConditionedConv2d(_ConvBase):
    """Shared kernel plus a per-subject factorized correction.

    The correction for subject ``s`` is two convolutions: ``A_s``
    (``r x C_in x kh x kw``, same stride/padding as the shared kernel) then
    the 1x1 projection ``B_s`` (``C_out x r x 1 x 1``), scaled by ``alpha/r``.
    """

    def __init__(self, in_channels, out_channels, kernel_size, rank, n_subjects, alpha=1.0, stride=1,
                 padding=0, bias=True, activation="identity", seed=0, name="scconv"):
        self._setup(in_channels, out_channels, kernel_size, stride, padding, activation)
        limit = _conv_rank_limit(in_channels, out_channels, self.kernel_size)
        if not 1 <= rank <= limit:
            raise ConfigError(f"rank {rank} outside [1, {limit}]")
        if n_subjects < 1:
            raise ConfigError(f"need at least one subject, got {n_subjects}")
        self.rank, self.alpha = rank, alpha
        self._seed, self._name = seed, name
        kh, kw = self.kernel_size
        fan_in = _conv_fan_in(in_channels, self.kernel_size)
        rng = derive_rng(seed, name, "weight")
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / fan_in), (out_channels, in_channels, kh, kw)),
                             f"{name}.weight")
        self.bias = _bias(seed, name, out_channels, fan_in) if bias else None
        self.A, self.B = {}, {}
        for s in range(n_subjects):
            self.add_subject(s)

    @property
    def subjects(self):
        return list(self.A)

    @property
    def n_subjects(self):
        return len(self.A)

    def add_subject(self, subject):
        if subject in self.A:
            raise ConfigError(f"subject {subject} already has an adapter")
        kh, kw = self.kernel_size
        fan_in = _conv_fan_in(self.in_channels, self.kernel_size)
        rng = derive_rng(self._seed, self._name, "adapter", subject)
        self.A[subject] = _param(rng.normal(0.0, np.sqrt(1.0 / fan_in), (self.rank, self.in_channels, kh, kw)),
                                 f"{self._name}.A.{subject}")
        self.B[subject] = _param(np.zeros((self.out_channels, self.rank, 1, 1)), f"{self._name}.B.{subject}")

    def adapter_parameters(self, subject):
        return {f"{self._name}.A.{subject}": self.A[subject], f"{self._name}.B.{subject}": self.B[subject]}

    def correction(self, subject):
        """Composed dense kernel ``(alpha/r) sum_rho B[o, rho] A[rho, c]``."""
        b = self.B[subject].data[:, :, 0, 0]
        return (self.alpha / self.rank) * np.einsum("or,rcij->ocij", b, self.A[subject].data)

    def parts(self, x, subject_ids):
        self._check_input(x)
        mask = route(subject_ids, self.subjects)
        if mask.n_rows != x.shape[0]:
            raise DimensionError(f"{mask.n_rows} subject ids for a batch of {x.shape[0]}")
        general = self._add_bias(T.conv2d(x, self.weight, self.stride, self.padding))
        coef = self.alpha / self.rank
        parts = {}
        for s, xs in mask.gather(x).items():
            reduced = T.conv2d(xs, self.A[s], self.stride, self.padding)
            parts[s] = T.scale(T.conv2d(reduced, self.B[s]), coef)
        if parts:
            adapter = mask.scatter(parts, general.shape[1:])
        else:
            adapter = Tensor(np.zeros(general.shape))
        return general, adapter

    def pre_activation(self, x, subject_ids):
        general, adapter = self.parts(x, subject_ids)
        return general + adapter

    def forward(self, x, subject_ids):
        return T.activation(self.pre_activation(x, subject_ids), self._activation)

    def param_counts(self):
        shared = self.weight.size + (self.bias.size if self.bias is not None else 0)
        kh, kw = self.kernel_size
        return {"shared": shared, "adapter": self.rank * self.in_channels * kh * kw + self.out_channels * self.rank}


SUBJECT_LAYERS = (SubjectConditionedLinear, SubjectConditionedConv2d)


# ---------------------------------------------------------------- diagnostics


def adapter_similarity(layer):
    """Cosine similarity between the subjects' effective corrections.

    Entry ``(s, t)`` is the Frobenius cosine of ``correction(s)`` and
    ``correction(t)``; pairs involving an all-zero correction score 0.
    Rows and columns follow ``layer.subjects``.
    """
    subjects = layer.subjects
    if not subjects:
        raise InputError("layer has no adapters")
    flat = np.stack([layer.correction(s).reshape(-1) for s in subjects])
    norms = np.linalg.norm(flat, axis=1)
    gram = flat @ flat.T
    denom = np.outer(norms, norms)
    sim = np.divide(gram, denom, out=np.zeros_like(gram), where=denom > 0)
    return np.clip(sim, -1.0, 1.0)


def params_from_totals(shared, total, n_subjects):
    """Recover per-subject adapter size and active count from table totals.

    Returns ``(adapter, active)`` where ``adapter = (total - shared) / N`` and
    ``active = shared + adapter``. Raises if the split is not integral.
    """
    extra = total - shared
    if n_subjects < 1 or extra < 0 or extra % n_subjects:
        raise ConfigError(f"total {total} - shared {shared} not divisible by {n_subjects} subjects")
    adapter = extra // n_subjects
    return adapter, shared + adapter
