"""Synthetic multi-subject benchmark and the SCND trial file format.

Each subject ``s`` sees the same class prototypes through its own
low-rank-perturbed linear map ``T_s = I + gamma U_s V_s^T``:

    x = T_s (mu_y + eps),   mu_k ~ N(0, I_d),   eps ~ N(0, noise_std^2 I_d)

Optionally every trial is pushed through one fixed random lift
``L: R^d -> R^{C x T}`` shared by all subjects, giving CNN-shaped inputs.
"""
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .rng import derive_rng

MAGIC = b"SCND"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIII")
_TRIAL_HEAD = struct.Struct("<II")


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 6
    n_classes: int = 4
    latent_dim: int = 16
    shift_rank: int = 2
    shift_strength: float = 1.0
    noise_std: float = 1.0
    n_train: int = 100
    n_test: int = 200
    lift: tuple = None
    seed: int = 1

    def __post_init__(self):
        if self.lift is not None:
            object.__setattr__(self, "lift", tuple(int(v) for v in self.lift))
        self.validate()

    def validate(self):
        if min(self.n_subjects, self.n_classes, self.latent_dim, self.shift_rank) < 1:
            raise ConfigError("subject, class, latent and shift-rank counts must be positive")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("trial counts must be non-negative")
        if self.shift_rank > self.latent_dim:
            raise ConfigError(f"shift rank {self.shift_rank} exceeds latent dim {self.latent_dim}")
        if self.shift_strength < 0 or self.noise_std < 0:
            raise ConfigError("shift strength and noise std must be non-negative")
        if self.lift is not None and (len(self.lift) != 2 or min(self.lift) < 1):
            raise ConfigError(f"lift must be (channels, time), got {self.lift}")

    @property
    def feature_shape(self):
        return self.lift if self.lift is not None else (self.latent_dim,)

    def to_dict(self):
        d = asdict(self)
        d["lift"] = list(self.lift) if self.lift is not None else None
        return d

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown benchmark keys: {', '.join(unknown)}")
        return cls(**data)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class Dataset:
    """Immutable trial collection: ``X[i]`` with label ``y[i]`` from subject ``subjects[i]``."""

    X: np.ndarray
    y: np.ndarray
    subjects: np.ndarray
    n_subjects: int
    n_classes: int
    shape: tuple
    split: str = ""

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64).reshape((-1,) + tuple(self.shape))
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        s = np.asarray(self.subjects, dtype=np.int64).reshape(-1)
        if not (X.shape[0] == y.size == s.size):
            raise InputError(f"{X.shape[0]} trials, {y.size} labels, {s.size} subject ids")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if s.size and (s.min() < 0 or s.max() >= self.n_subjects):
            raise InputError(f"subject ids must lie in [0, {self.n_subjects})")
        for a in (X, y, s):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "subjects", s)
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    def __len__(self):
        return self.y.size

    @property
    def trial_counts(self):
        """Trials per subject id, indexed ``0..n_subjects-1``."""
        return np.bincount(self.subjects, minlength=self.n_subjects)

    @property
    def present_subjects(self):
        return sorted(set(self.subjects.tolist()))

    def subset(self, mask, split=None):
        return Dataset(self.X[mask], self.y[mask], self.subjects[mask], self.n_subjects, self.n_classes,
                       self.shape, self.split if split is None else split)

    def for_subject(self, subject):
        return self.subset(self.subjects == subject)


class _Generator:
    """Materialized latent structure of a spec: prototypes, transforms, lift."""

    def __init__(self, spec):
        d, q = spec.latent_dim, spec.shift_rank
        self.prototypes = derive_rng(spec.seed, "prototypes").normal(0.0, 1.0, (spec.n_classes, d))
        # entry variance 1/sqrt(d q)
        std = (d * q) ** -0.25
        self.transforms = []
        for s in range(spec.n_subjects):
            rng = derive_rng(spec.seed, "subject", s, "shift")
            U = rng.normal(0.0, std, (d, q))
            V = rng.normal(0.0, std, (d, q))
            self.transforms.append(np.eye(d) + spec.shift_strength * U @ V.T)
        self.lift = None
        if spec.lift is not None:
            c, t = spec.lift
            self.lift = derive_rng(spec.seed, "lift").normal(0.0, 1.0 / np.sqrt(d), (c * t, d))


def _balanced_labels(n, k, rng):
    labels = np.arange(n) % k
    return labels[rng.permutation(n)]


def gen_synthetic(spec):
    """Generate the ``(train, test)`` pair a spec describes; a pure function of the spec."""
    spec.validate()
    g = _Generator(spec)
    out = []
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        xs, ys, ss = [], [], []
        for s in range(spec.n_subjects):
            rng = derive_rng(spec.seed, split, s)
            y = _balanced_labels(n, spec.n_classes, rng)
            eps = rng.normal(0.0, spec.noise_std, (n, spec.latent_dim)) if n else np.empty((0, spec.latent_dim))
            z = (g.prototypes[y] + eps) @ g.transforms[s].T
            if g.lift is not None:
                z = z @ g.lift.T
            xs.append(z)
            ys.append(y)
            ss.append(np.full(n, s))
        X = np.concatenate(xs).reshape((-1,) + spec.feature_shape)
        out.append(Dataset(X, np.concatenate(ys), np.concatenate(ss), spec.n_subjects, spec.n_classes,
                           spec.feature_shape, split))
    return tuple(out)


def oracle_accuracy(spec, dataset):
    """Nearest-prototype accuracy with every subject's transform known and inverted.

    Lifted trials are first mapped back to latent space by least squares.
    This is a reference ceiling for learned models, not a learned model.
    """
    g = _Generator(spec)
    if len(dataset) == 0:
        raise InputError("empty dataset")
    Z = dataset.X.reshape(len(dataset), -1)
    if g.lift is not None:
        Z = np.linalg.lstsq(g.lift, Z.T, rcond=None)[0].T
    correct = 0
    for s in dataset.present_subjects:
        Ts = g.transforms[s]
        if np.linalg.cond(Ts) > 1e12:
            raise ConfigError(f"subject {s} transform is numerically singular")
        rows = dataset.subjects == s
        latent = np.linalg.solve(Ts, Z[rows].T).T
        d2 = ((latent[:, None, :] - g.prototypes[None]) ** 2).sum(axis=2)
        correct += int((np.argmin(d2, axis=1) == dataset.y[rows]).sum())
    return correct / len(dataset)


def split_by_subject(dataset, held_out):
    """Partition into (all other subjects, ``held_out`` only)."""
    if held_out not in dataset.present_subjects:
        raise InputError(f"subject {held_out} not in dataset")
    mask = dataset.subjects == held_out
    return dataset.subset(~mask), dataset.subset(mask)


# ---------------------------------------------------------------- SCND file format


def write_dataset(dataset, path):
    """Serialize to SCND v1 (little-endian, see README for the layout)."""
    shape = tuple(dataset.shape)
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(dataset), dataset.n_subjects, dataset.n_classes, len(shape)),
             struct.pack(f"<{len(shape)}I", *shape)]
    feats = dataset.X.reshape(len(dataset), int(np.prod(shape))).astype("<f8")
    for i in range(len(dataset)):
        parts.append(_TRIAL_HEAD.pack(int(dataset.subjects[i]), int(dataset.y[i])))
        parts.append(feats[i].tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc.strerror}") from exc


def read_dataset(path, split=""):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_dataset(buf, split)


def decode_dataset(buf, split=""):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    _, version, n_trials, n_subjects, n_classes, rank = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}", 4)
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise FormatError("truncated shape dims", len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    n_feat = int(np.prod(shape)) if rank else 1
    rec = _TRIAL_HEAD.size + 8 * n_feat
    need = off + n_trials * rec
    if len(buf) < need:
        bad = off + ((len(buf) - off) // rec) * rec
        raise FormatError(f"truncated trial records: expected {n_trials} of {rec} bytes", bad)
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after last trial", need)
    rec_dtype = np.dtype([("subject", "<u4"), ("label", "<u4"), ("x", "<f8", (n_feat,))])
    recs = np.frombuffer(buf, dtype=rec_dtype, count=n_trials, offset=off)
    subjects = recs["subject"].astype(np.int64)
    labels = recs["label"].astype(np.int64)
    for name, arr, limit in (("subject", subjects, n_subjects), ("label", labels, n_classes)):
        bad = np.flatnonzero(arr >= limit)
        if bad.size:
            raise FormatError(f"{name} {arr[bad[0]]} out of range [0, {limit})", off + int(bad[0]) * rec)
    X = recs["x"].astype(np.float64).reshape((n_trials,) + tuple(shape))
    return Dataset(X, labels, subjects, n_subjects, n_classes, shape, split)
