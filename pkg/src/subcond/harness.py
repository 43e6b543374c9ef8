"""Training, evaluation, the four-condition comparison and diagnostics."""
import copy
import csv
import hashlib
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .datagen import gen_synthetic, split_by_subject
from .errors import ConfigError, InputError, NonFiniteError, UsageError
from .layers import UNKNOWN
from .models import (
    MODES,
    ModelConfig,
    build_model,
    count_params,
    forward_with_taps,
    is_ensemble,
    predict,
)
from .optim import AdamWState, adamw_step
from .rng import derive_rng
from .tensor import Tensor

logger = logging.getLogger(__name__)

RESULTS_HEADER = ["condition", "seed", "subject", "split", "accuracy", "total_params", "active_params"]
AGGREGATE_HEADER = ["condition", "mean_accuracy", "std_accuracy"]
EMBED_PATHS = ("general", "adapter", "fused")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_epochs: int = 0
    seeds: tuple = (1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup must be >= 0 and batch size >= 1")
        if not self.seeds:
            raise ConfigError("seed list is empty")

    def to_dict(self):
        d = asdict(self)
        d["betas"], d["seeds"] = list(self.betas), list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown train keys: {', '.join(unknown)}")
        return cls(**data)

    def lr_at(self, epoch):
        if self.warmup_epochs and epoch < self.warmup_epochs:
            return self.lr * (epoch + 1) / self.warmup_epochs
        return self.lr


# ---------------------------------------------------------------- training


def _fit(model, params, dataset, cfg, seed, tag):
    """Minimize mean cross-entropy of ``model`` over ``dataset`` w.r.t. ``params``."""
    if len(dataset) == 0:
        raise InputError(f"no training trials for {tag}")
    state = AdamWState(lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    history = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = derive_rng(seed, "shuffle", tag, epoch).permutation(n)
        lr = cfg.lr_at(epoch)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            ix = order[start : start + cfg.batch_size]
            model.zero_grad()
            try:
                loss = T.softmax_cross_entropy(model.forward(Tensor(dataset.X[ix]), dataset.subjects[ix]),
                                               dataset.y[ix])
            except NonFiniteError as exc:
                raise NonFiniteError(f"{tag}: epoch {epoch} batch {b}: {exc}") from exc
            loss.backward()
            adamw_step(params, state, lr=lr)
            total += loss.item() * ix.size
        history.append(total / n)
    return history


def train(model, dataset, cfg, seed=None):
    """Train in place; returns the per-epoch mean loss history.

    Ensembles train each member only on its own subject's trials and return
    ``{subject: history}``.
    """
    seed = cfg.seeds[0] if seed is None else seed
    if is_ensemble(model):
        return {s: _fit(m, m.parameters(), dataset.for_subject(s), cfg, seed, f"subject{s}")
                for s, m in model.members.items()}
    return _fit(model, model.parameters(), dataset, cfg, seed, "model")


def evaluate(model, dataset, unknown=False):
    """Per-subject accuracy plus the trial-weighted ``"overall"`` mean.

    ``unknown=True`` evaluates a subject-conditioned model through its
    shared path only, as for subjects it has never seen.
    """
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    if unknown:
        if is_ensemble(model):
            raise UsageError("shared-path fallback needs a single shared model")
        ids = np.full(len(dataset), UNKNOWN)
    else:
        ids = dataset.subjects
        if is_ensemble(model):
            foreign = sorted(set(dataset.present_subjects) - set(model.subjects))
            if foreign:
                raise UsageError(f"{model.config.mode} model has no member for subjects {foreign}")
    pred = predict(model, dataset.X, ids)
    hit = pred == dataset.y
    out = {s: float(hit[dataset.subjects == s].mean()) for s in dataset.present_subjects}
    out["overall"] = float(hit.mean())
    return out


# ---------------------------------------------------------------- new-subject fine-tuning


def params_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def finetune_new_subject(model, dataset, cfg, subject, seed=None):
    """Return a copy of ``model`` with a fresh adapter for ``subject`` trained on ``dataset``.

    Every pre-existing parameter is frozen: only the new subject's adapter
    pairs enter the optimizer.
    """
    if is_ensemble(model) or not model.subject_layers:
        raise UsageError("fine-tuning a new adapter needs a subject_conditioned model")
    if subject in model.subjects:
        raise UsageError(f"subject {subject} already has an adapter")
    foreign = sorted(set(dataset.present_subjects) - {subject})
    if foreign:
        raise InputError(f"fine-tuning data contains other subjects {foreign}")
    tuned = copy.deepcopy(model)
    tuned.add_subject(subject)
    new = tuned.adapter_parameters(subject)
    new_ids = {id(p) for p in new.values()}
    for p in tuned.parameters().values():
        if id(p) not in new_ids:
            p.requires_grad = False
    seed = cfg.seeds[0] if seed is None else seed
    if cfg.epochs:
        _fit(tuned, new, dataset, cfg, seed, f"finetune{subject}")
    for p in tuned.parameters().values():
        p.requires_grad = True
        p.grad = None
    return tuned


# ---------------------------------------------------------------- embeddings


def embeddings(model, dataset):
    """``{path: (n, D) array}`` of penultimate embeddings for every trial."""
    _, tap = forward_with_taps(model, dataset.X, dataset.subjects)
    return dict(zip(EMBED_PATHS, tap))


def embeddings_csv(model, dataset):
    emb = embeddings(model, dataset)
    dim = emb["fused"].shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "subject", "label"] + [f"e{i}" for i in range(dim)])
    for path in EMBED_PATHS:
        for i in range(len(dataset)):
            w.writerow([path, int(dataset.subjects[i]), int(dataset.y[i])] + [repr(float(v)) for v in emb[path][i]])
    return buf.getvalue()


def export_embeddings(model, dataset, path):
    text = embeddings_csv(model, dataset)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc.strerror}") from exc
    return path


def silhouette(points, labels):
    """Mean silhouette coefficient under Euclidean distance.

    Points alone in their cluster score 0.
    """
    X = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != labels.size:
        raise InputError(f"{X.shape[0]} points but {labels.size} labels")
    uniq, inv = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise InputError("silhouette needs at least two distinct labels")
    sq = (X * X).sum(axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0))
    np.fill_diagonal(D, 0.0)
    onehot = np.eye(uniq.size)[inv]
    sizes = onehot.sum(axis=0)
    sums = D @ onehot
    own = sizes[inv]
    a = np.divide(sums[np.arange(len(inv)), inv], own - 1, out=np.zeros(len(inv)), where=own > 1)
    mean_other = sums / sizes
    mean_other[np.arange(len(inv)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(len(inv)), where=denom > 0)
    s[own <= 1] = 0.0
    return float(s.mean())


def silhouette_diagnostics(model, dataset):
    emb = embeddings(model, dataset)
    return {
        "subject_general": silhouette(emb["general"], dataset.subjects),
        "subject_adapter": silhouette(emb["adapter"], dataset.subjects),
        "subject_fused": silhouette(emb["fused"], dataset.subjects),
        "class_general": silhouette(emb["general"], dataset.y),
        "class_adapter": silhouette(emb["adapter"], dataset.y),
        "class_fused": silhouette(emb["fused"], dataset.y),
    }


# ---------------------------------------------------------------- comparison


@dataclass
class RunReport:
    """Per-(condition, seed, subject) accuracies and their aggregation."""

    rows: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    embeddings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def seed_means(self, condition):
        """Subject-mean test accuracy for each seed of ``condition``."""
        by_seed = {}
        for r in self.rows:
            if r["condition"] == condition:
                by_seed.setdefault(r["seed"], []).append(r["accuracy"])
        return {s: float(np.mean(v)) for s, v in sorted(by_seed.items())}

    def aggregate(self):
        out = {}
        for cond in dict.fromkeys(r["condition"] for r in self.rows):
            vals = np.array(list(self.seed_means(cond).values()))
            out[cond] = (float(vals.mean()), float(vals.std(ddof=0)))
        return out

    def results_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in self.rows:
            w.writerow([r["condition"], r["seed"], r["subject"], r["split"], repr(r["accuracy"]),
                        r["total_params"], r["active_params"]])
        return buf.getvalue()

    def aggregate_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for cond, (m, s) in self.aggregate().items():
            w.writerow([cond, repr(m), repr(s)])
        return buf.getvalue()

    def diagnostics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = sorted({k for d in self.diagnostics.values() for k in d})
        w.writerow(["seed"] + keys)
        for seed, d in sorted(self.diagnostics.items()):
            w.writerow([seed] + [repr(d[k]) for k in keys])
        return buf.getvalue()


def model_config_for(spec, base, mode, seed):
    """Bind a model template to a benchmark's shapes, a condition and a seed."""
    return replace(base, mode=mode, input_shape=spec.feature_shape, n_classes=spec.n_classes,
                   n_subjects=spec.n_subjects, seed=seed)


def _run_cell(args):
    spec, base, cfg, mode, seed = args
    train_ds, test_ds = gen_synthetic(replace(spec, seed=seed))
    model = build_model(model_config_for(spec, base, mode, seed))
    train(model, train_ds, cfg, seed)
    acc = evaluate(model, test_ds)
    counts = count_params(model)
    extra = {}
    if mode == "subject_conditioned":
        extra["embeddings"] = embeddings_csv(model, test_ds)
        extra["diagnostics"] = silhouette_diagnostics(model, test_ds)
    return mode, seed, acc, counts, extra


def compare(spec, cfg, base=None, modes=MODES, jobs=1):
    """Train and test every condition on the same per-seed benchmark data.

    The dataset for seed ``k`` is ``gen_synthetic(spec with seed=k)``;
    models and batch order are also seeded with ``k``.
    """
    base = base or ModelConfig()
    cells = [(spec, base, cfg, mode, seed) for seed in cfg.seeds for mode in modes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    report = RunReport()
    results.sort(key=lambda r: (modes.index(r[0]), r[1]))
    for mode, seed, acc, counts, extra in results:
        report.params[mode] = counts
        for subject in sorted(k for k in acc if k != "overall"):
            report.rows.append({"condition": mode, "seed": seed, "subject": subject, "split": "test",
                                "accuracy": acc[subject], "total_params": counts["total"],
                                "active_params": counts["active"]})
        if extra:
            report.embeddings[seed] = extra["embeddings"]
            report.diagnostics[seed] = extra["diagnostics"]
        logger.info("%s seed %d: mean accuracy %.4f", mode, seed, np.mean([acc[s] for s in acc if s != "overall"]))
    return report


def heldout_workflow(spec, cfg, base=None, seed=1, held_out=None, finetune_trials=None):
    """Train a subject-conditioned model without one subject, then adapt to it.

    Returns a dict with fallback and fine-tuned accuracy on the held-out
    subject's test trials plus digests of the frozen parameters.
    """
    base = base or ModelConfig()
    held_out = spec.n_subjects - 1 if held_out is None else held_out
    if held_out != spec.n_subjects - 1:
        raise ConfigError("held-out subject must be the last id so remaining ids stay contiguous")
    train_ds, test_ds = gen_synthetic(replace(spec, seed=seed))
    seen_train, new_train = split_by_subject(train_ds, held_out)
    _, new_test = split_by_subject(test_ds, held_out)
    if finetune_trials is not None:
        new_train = new_train.subset(np.arange(len(new_train)) < finetune_trials)
    mcfg = replace(model_config_for(spec, base, "subject_conditioned", seed), n_subjects=spec.n_subjects - 1)
    model = build_model(mcfg)
    train(model, seen_train, cfg, seed)
    before = params_digest(model.parameters())
    tuned = finetune_new_subject(model, new_train, cfg, held_out, seed)
    frozen_after = {k: v for k, v in tuned.parameters().items() if k not in _adapter_paths(tuned, held_out)}
    return {
        "fallback_accuracy": evaluate(model, new_test, unknown=True)["overall"],
        "finetuned_accuracy": evaluate(tuned, new_test)["overall"],
        "frozen_digest_before": before,
        "frozen_digest_after": params_digest(frozen_after),
        "model": model,
        "tuned": tuned,
    }


def _adapter_paths(model, subject):
    ids = {id(p) for p in model.adapter_parameters(subject).values()}
    return {k for k, v in model.parameters().items() if id(v) in ids}
