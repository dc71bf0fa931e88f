"""Second-order factorization machine for binary malware classification.

The model scores a binary vector ``x`` as::

    h(x) = w0 + sum_i w_i x_i + sum_{i<j} <v_i, v_j> x_i x_j

and the malware probability is ``sigmoid(h(x))``. Pairwise weights are never
materialised: per sample the latent rows of the active features are summed
(per feature category) and the pair term follows from the identity
``sum_{i<j} <v_i,v_j> = 1/2 (|sum_i v_i|^2 - sum_i |v_i|^2)``. Restricting
interactions to chosen category pairs ("partial FM") applies the same
identity per category pair.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels, modelio
from .errors import DegenerateLabelsError, DimensionMismatchError, ModelFormatError
from .features import FeatureCategory, LabeledDataset, SparseVector, Vocabulary

logger = logging.getLogger(__name__)

_NCAT = len(FeatureCategory)


def sigmoid(h):
    h = np.asarray(h, dtype=np.float64)
    e = np.exp(-np.abs(h))
    out = np.where(h >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


# -- interaction masks --------------------------------------------------------


def _pair(a: FeatureCategory, b: FeatureCategory) -> tuple:
    return (a, b) if a.code <= b.code else (b, a)


def parse_category_pair(text: str) -> tuple:
    """``"used_perm:perm"`` -> normalised pair of categories."""
    a, sep, b = text.partition(":")
    if not sep:
        raise ValueError(f"category pair {text!r} must look like 'catA:catB'")
    return _pair(FeatureCategory.from_tag(a.strip()), FeatureCategory.from_tag(b.strip()))


class InteractionMask:
    """Which feature pairs may interact.

    A ``full`` mask allows every pair. A ``partial`` mask only allows pairs
    whose categories form one of ``allowed_pairs``; an empty set of pairs
    turns the model into a purely linear one.
    """

    def __init__(self, mode="full", allowed_pairs=(), category_of_index=None):
        if mode not in ("full", "partial"):
            raise ValueError(f"unknown mask mode {mode!r}")
        self.mode = mode
        if mode == "full":
            if allowed_pairs:
                raise ValueError("a full mask takes no allowed pairs")
            self.allowed_pairs = frozenset()
            self.category_of_index = None
            return
        if category_of_index is None:
            raise ValueError("a partial mask needs the category of every feature index")
        self.allowed_pairs = frozenset(_pair(*p) for p in allowed_pairs)
        cats = np.asarray(category_of_index, dtype=np.int64)
        if cats.ndim != 1 or (cats.size and (cats.min() < 0 or cats.max() >= _NCAT)):
            raise ValueError("category codes out of range")
        self.category_of_index = cats

    @classmethod
    def full(cls) -> "InteractionMask":
        return cls("full")

    @classmethod
    def partial(cls, allowed_pairs, categories) -> "InteractionMask":
        """``categories`` is a :class:`Vocabulary` or an array of category codes."""
        if isinstance(categories, Vocabulary):
            categories = categories.categories()
        return cls("partial", allowed_pairs, categories)

    def __eq__(self, other):
        if not isinstance(other, InteractionMask):
            return NotImplemented
        if self.mode != other.mode or self.allowed_pairs != other.allowed_pairs:
            return False
        if self.category_of_index is None:
            return other.category_of_index is None
        return other.category_of_index is not None and np.array_equal(
            self.category_of_index, other.category_of_index
        )

    def __repr__(self):
        if self.mode == "full":
            return "InteractionMask.full()"
        pairs = sorted(f"{a.tag}:{b.tag}" for a, b in self.allowed_pairs)
        return f"InteractionMask.partial({pairs}, n={self.category_of_index.size})"

    def check_dim(self, n):
        if self.mode == "partial" and self.category_of_index.size != n:
            raise DimensionMismatchError(
                f"mask covers {self.category_of_index.size} features, model has {n}"
            )

    def allows(self, i, j) -> bool:
        if self.mode == "full":
            return True
        ci = FeatureCategory.from_code(int(self.category_of_index[i]))
        cj = FeatureCategory.from_code(int(self.category_of_index[j]))
        return _pair(ci, cj) in self.allowed_pairs

    def layout(self, n):
        """``(cat, allowed)`` arrays consumed by the kernels."""
        if self.mode == "full":
            return np.zeros(n, dtype=np.int64), np.ones((1, 1), dtype=np.uint8)
        allowed = np.zeros((_NCAT, _NCAT), dtype=np.uint8)
        for a, b in self.allowed_pairs:
            allowed[a.code, b.code] = allowed[b.code, a.code] = 1
        return np.ascontiguousarray(self.category_of_index, dtype=np.int64), allowed

    def to_header(self):
        return {
            "mode": self.mode,
            "allowed": sorted([a.tag, b.tag] for a, b in self.allowed_pairs),
        }

    @classmethod
    def from_header(cls, header, categories):
        pairs = [_pair(FeatureCategory.from_tag(a), FeatureCategory.from_tag(b)) for a, b in header["allowed"]]
        if header["mode"] == "full":
            return cls.full()
        return cls("partial", pairs, categories)


# -- model --------------------------------------------------------------------


class FmModel:
    def __init__(self, w0, w, V, mask=None):
        self.w0 = float(w0)
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.V = np.ascontiguousarray(V, dtype=np.float64)
        self.mask = mask if mask is not None else InteractionMask.full()
        n = self.w.shape[0]
        if self.w.ndim != 1 or self.V.ndim != 2 or self.V.shape[0] != n:
            raise ValueError(f"inconsistent shapes w={self.w.shape}, V={self.V.shape}")
        if n < 1 or self.V.shape[1] < 1:
            raise ValueError("model needs n >= 1 and k >= 1")
        if not (np.isfinite(self.w0) and np.isfinite(self.w).all() and np.isfinite(self.V).all()):
            raise ValueError("model parameters must be finite")
        self.mask.check_dim(n)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.V.shape[1]

    @property
    def parameter_count(self) -> int:
        return 1 + self.w.size + self.V.size

    def __repr__(self):
        return f"FmModel(dim={self.dim}, k={self.k}, mask={self.mask!r})"


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings.

    ``l2_w``/``l2_v`` penalise only the parameters a sample touches, scaled per
    occurrence. ``weight_decay_w``/``weight_decay_v`` add a dense L2 term on
    the mean batch loss; that one keeps rarely seen latent vectors small, which
    stops the model memorising background pairs.
    """

    epochs: int = 200
    batch_size: int = 200
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    init_scale: float = 0.01
    seed: int = 0
    l2_w: float = 1e-6
    l2_v: float = 1e-6
    k: int = 10
    weight_decay_w: float = 0.1
    weight_decay_v: float = 0.01

    def __post_init__(self):
        for name in ("epochs", "batch_size", "k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("learning_rate", "adam_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        for name in ("init_scale", "l2_w", "l2_v", "weight_decay_w", "weight_decay_v"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _seed_words(seed):
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def init_model(n, k, seed=0, init_scale=0.01, mask=None) -> FmModel:
    if n < 1 or k < 1:
        raise ValueError("init_model needs n >= 1 and k >= 1")
    rng = np.random.default_rng([_seed_words(seed), 0])
    V = rng.normal(0.0, init_scale, size=(n, k)) if init_scale > 0 else np.zeros((n, k))
    return FmModel(0.0, np.zeros(n), V, mask)


# -- scoring ------------------------------------------------------------------


def _check_vector(model, x: SparseVector):
    if x.dim != model.dim:
        raise DimensionMismatchError(f"vector has dim {x.dim}, model expects {model.dim}")


def _one_row(x: SparseVector):
    return kernels.as_csr([0, len(x.indices)], x.indices)


def predict_raw(model: FmModel, x: SparseVector, backend=None) -> float:
    _check_vector(model, x)
    cat, allowed = model.mask.layout(model.dim)
    indptr, indices = _one_row(x)
    return float(kernels.get(backend).scores(indptr, indices, model.w0, model.w, model.V, cat, allowed)[0])


def decision_scores(model: FmModel, ds: LabeledDataset, backend=None) -> np.ndarray:
    """``h(x)`` for every sample of ``ds``."""
    if ds.dim != model.dim:
        raise DimensionMismatchError(f"dataset has dim {ds.dim}, model expects {model.dim}")
    cat, allowed = model.mask.layout(model.dim)
    indptr, indices = kernels.as_csr(*ds.csr)
    return kernels.get(backend).scores(indptr, indices, model.w0, model.w, model.V, cat, allowed)


def predict_proba(model: FmModel, x: SparseVector) -> float:
    return sigmoid(predict_raw(model, x))


def predict_proba_dataset(model, ds, backend=None) -> np.ndarray:
    return sigmoid(decision_scores(model, ds, backend))


def classify(probabilities, threshold=0.5):
    """+1 where the probability strictly exceeds ``threshold``, else -1."""
    p = np.asarray(probabilities)
    return np.where(p > threshold, 1, -1)


@dataclass(frozen=True)
class CrossingOracle:
    """Explicit pairwise-weight model: ``w0 + w.x + sum_{i<j} W_ij x_i x_j``."""

    w0: float
    w: np.ndarray
    W: np.ndarray

    @classmethod
    def from_fm(cls, model: FmModel) -> "CrossingOracle":
        n = model.dim
        W = model.V @ model.V.T
        for i in range(n):
            for j in range(n):
                if i == j or not model.mask.allows(i, j):
                    W[i, j] = 0.0
        return cls(model.w0, model.w.copy(), W)

    def predict(self, x: SparseVector) -> float:
        act = x.indices
        h = self.w0 + sum(float(self.w[i]) for i in act)
        for a in range(len(act)):
            for b in range(a + 1, len(act)):
                h += float(self.W[act[a], act[b]])
        return h


def predict_bruteforce(model: FmModel, x: SparseVector) -> float:
    """Reference score by explicit double loop over feature pairs."""
    _check_vector(model, x)
    act = x.indices
    h = model.w0 + sum(float(model.w[i]) for i in act)
    for a in range(len(act)):
        i = act[a]
        for b in range(a + 1, len(act)):
            j = act[b]
            if model.mask.allows(i, j):
                h += sum(float(p) * float(q) for p, q in zip(model.V[i], model.V[j]))
    return h


# -- loss and gradient ----------------------------------------------------------


@dataclass
class FmGradient:
    """Gradient restricted to the parameters a sample touches."""

    loss: float
    w0: float
    indices: np.ndarray
    w: np.ndarray
    V: np.ndarray


def loss_and_gradient(model: FmModel, x: SparseVector, y: int, l2_w=0.0, l2_v=0.0, backend=None) -> FmGradient:
    """Logistic loss ``log(1 + exp(-y h(x)))`` plus L2 on the active
    parameters, and its gradient."""
    if y not in (1, -1):
        raise ValueError(f"label must be +1 or -1, got {y!r}")
    _check_vector(model, x)
    cat, allowed = model.mask.layout(model.dim)
    indptr, indices = _one_row(x)
    gw = np.zeros(model.dim)
    gV = np.zeros_like(model.V)
    loss, g0 = kernels.get(backend).accumulate_gradient(
        indptr, indices, np.zeros(1, dtype=np.int64), np.array([float(y)]),
        model.w0, model.w, model.V, cat, allowed, float(l2_w), float(l2_v), gw, gV,
    )
    act = np.asarray(x.indices, dtype=np.int64)
    return FmGradient(loss, g0, act, gw[act], gV[act])


# -- training -------------------------------------------------------------------


def check_labels(ds: LabeledDataset):
    if len(ds) == 0:
        raise DegenerateLabelsError("dataset is empty")
    if len(set(ds.labels)) < 2:
        raise DegenerateLabelsError("degenerate labels: training needs both classes")


class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)


def fit_parameters(ds: LabeledDataset, cfg: TrainConfig, k, mask, backend=None, on_epoch=None):
    """Mini-batch Adam on the mean logistic loss.

    ``k == 0`` trains the linear part only. Initialisation and shuffling use
    separate streams derived from ``cfg.seed`` so a model with and without
    latent factors sees the same batch order.
    """
    check_labels(ds)
    n = ds.dim
    mask = mask if mask is not None else InteractionMask.full()
    mask.check_dim(n)
    kern = kernels.get(backend)
    cat, allowed = mask.layout(n)
    indptr, indices = kernels.as_csr(*ds.csr)
    y = ds.y

    seed = _seed_words(cfg.seed)
    init_rng = np.random.default_rng([seed, 0])
    shuffle_rng = np.random.default_rng([seed, 1])
    if k and cfg.init_scale > 0:
        V = init_rng.normal(0.0, cfg.init_scale, size=(n, k))
    else:
        V = np.zeros((n, k))
    w0 = np.zeros(1)
    w = np.zeros(n)
    gw0 = np.zeros(1)
    gw = np.zeros(n)
    gV = np.zeros((n, k))
    opt = _Adam([(1,), (n,), (n, k)], cfg)

    N = len(ds)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(N).astype(np.int64)
        epoch_loss = 0.0
        for start in range(0, N, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            gw.fill(0.0)
            gV.fill(0.0)
            loss, g0 = kern.accumulate_gradient(
                indptr, indices, rows, y, float(w0[0]), w, V, cat, allowed,
                cfg.l2_w, cfg.l2_v, gw, gV,
            )
            scale = 1.0 / len(rows)
            gw0[0] = g0 * scale
            gw *= scale
            gV *= scale
            if cfg.weight_decay_w:
                gw += cfg.weight_decay_w * w
            if cfg.weight_decay_v:
                gV += cfg.weight_decay_v * V
            opt.step([w0, w, V], [gw0, gw, gV])
            epoch_loss += loss
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss / N)
        logger.debug("epoch %d loss %.6f", epoch + 1, epoch_loss / N)
    if not (np.isfinite(w0).all() and np.isfinite(w).all() and np.isfinite(V).all()):
        raise FloatingPointError("training diverged to non-finite parameters")
    return float(w0[0]), w, V


def train(ds: LabeledDataset, cfg: TrainConfig = TrainConfig(), mask=None, backend=None, on_epoch=None) -> FmModel:
    mask = mask if mask is not None else InteractionMask.full()
    w0, w, V = fit_parameters(ds, cfg, cfg.k, mask, backend, on_epoch)
    return FmModel(w0, w, V, mask)


# -- persistence ----------------------------------------------------------------


def save_model(model: FmModel, path) -> None:
    floats = np.concatenate([[model.w0], model.w, model.V.ravel()])
    meta = {"dim": model.dim, "k": model.k, "mask": model.mask.to_header()}
    cats = model.mask.category_of_index if model.mask.mode == "partial" else None
    modelio.write_container(path, "fm", meta, floats, cats)


def load_model(path) -> FmModel:
    header, floats, cats = modelio.read_container(path, expect_type="fm")
    try:
        n, k = int(header["dim"]), int(header["k"])
        mask_header = header["mask"]
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(f"{path}: incomplete fm header ({exc})") from None
    if floats.size != 1 + n + n * k:
        raise ModelFormatError(f"{path}: parameter count {floats.size} does not match dim={n}, k={k}")
    if mask_header["mode"] == "partial" and (cats is None or cats.size != n):
        raise ModelFormatError(f"{path}: partial mask without per-feature categories")
    mask = InteractionMask.from_header(mask_header, cats)
    return FmModel(floats[0], floats[1 : 1 + n], floats[1 + n :].reshape(n, k), mask)
