"""First-order reference classifiers: logistic regression and Bernoulli naive Bayes.

Neither model can weigh a pair of features jointly; they exist to show how
far a linear score gets on the same data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fm, modelio
from .errors import DimensionMismatchError, ModelFormatError
from .features import LabeledDataset, SparseVector


@dataclass
class LinearModel:
    w0: float
    w: np.ndarray

    def __post_init__(self):
        self.w0 = float(self.w0)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if not (np.isfinite(self.w0) and np.isfinite(self.w).all()):
            raise ValueError("linear model parameters must be finite")

    @property
    def dim(self):
        return self.w.size

    def decision_function(self, ds: LabeledDataset) -> np.ndarray:
        _check_dim(self.dim, ds.dim)
        indptr, indices = ds.csr
        lengths = np.diff(indptr)
        rows = np.repeat(np.arange(len(ds)), lengths)
        return self.w0 + np.bincount(rows, weights=self.w[indices], minlength=len(ds))

    def predict_raw(self, x: SparseVector) -> float:
        _check_dim(self.dim, x.dim)
        return self.w0 + float(self.w[list(x.indices)].sum())

    def predict_proba(self, x: SparseVector) -> float:
        return fm.sigmoid(self.predict_raw(x))

    def predict_proba_dataset(self, ds):
        return fm.sigmoid(self.decision_function(ds))


def _check_dim(expected, got):
    if expected != got:
        raise DimensionMismatchError(f"input has dim {got}, model expects {expected}")


def train_logistic(ds: LabeledDataset, cfg: fm.TrainConfig = fm.TrainConfig(), backend=None) -> LinearModel:
    """Same optimiser, batches and seeding as :func:`fmdroid.fm.train`, without latent factors."""
    w0, w, _ = fm.fit_parameters(ds, cfg, 0, fm.InteractionMask.full(), backend)
    return LinearModel(w0, w)


@dataclass
class BernoulliNbModel:
    """Per-class log prior and log feature probabilities; row 0 is clean (-1), row 1 malware (+1)."""

    log_prior: np.ndarray
    log_theta: np.ndarray
    log_one_minus_theta: np.ndarray
    alpha: float

    @property
    def dim(self):
        return self.log_theta.shape[1]

    def joint_log_likelihood(self, ds: LabeledDataset) -> np.ndarray:
        _check_dim(self.dim, ds.dim)
        base = self.log_prior + self.log_one_minus_theta.sum(axis=1)
        delta = self.log_theta - self.log_one_minus_theta
        indptr, indices = ds.csr
        rows = np.repeat(np.arange(len(ds)), np.diff(indptr))
        out = np.empty((len(ds), 2))
        for c in range(2):
            out[:, c] = base[c] + np.bincount(rows, weights=delta[c, indices], minlength=len(ds))
        return out

    def posterior(self, ds: LabeledDataset) -> np.ndarray:
        """``(n_samples, 2)`` class posteriors, columns clean then malware."""
        jll = self.joint_log_likelihood(ds)
        norm = np.logaddexp(jll[:, 0], jll[:, 1])
        return np.exp(jll - norm[:, None])

    def predict_proba_dataset(self, ds):
        jll = self.joint_log_likelihood(ds)
        # P(malware) = sigmoid(log-odds), stable at both extremes
        return fm.sigmoid(jll[:, 1] - jll[:, 0])

    def predict_proba(self, x: SparseVector) -> float:
        return float(self.predict_proba_dataset(LabeledDataset([x], [1], x.dim))[0])


def train_bernoulli_nb(ds: LabeledDataset, alpha=1.0) -> BernoulliNbModel:
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    fm.check_labels(ds)
    y = np.asarray(ds.labels)
    indptr, indices = ds.csr
    rows = np.repeat(np.arange(len(ds)), np.diff(indptr))
    counts = np.zeros((2, ds.dim))
    class_counts = np.zeros(2)
    for c, label in enumerate((-1, 1)):
        in_class = y[rows] == label
        counts[c] = np.bincount(indices[in_class], minlength=ds.dim)
        class_counts[c] = np.count_nonzero(y == label)
    theta = (counts + alpha) / (class_counts[:, None] + 2.0 * alpha)
    return BernoulliNbModel(
        np.log(class_counts / class_counts.sum()), np.log(theta), np.log1p(-theta), float(alpha)
    )


def save_baseline(model, path):
    if isinstance(model, LinearModel):
        floats = np.concatenate([[model.w0], model.w])
        modelio.write_container(path, "logistic", {"dim": model.dim}, floats)
    elif isinstance(model, BernoulliNbModel):
        floats = np.concatenate([model.log_prior, model.log_theta.ravel(), model.log_one_minus_theta.ravel()])
        modelio.write_container(path, "bernoulli_nb", {"dim": model.dim, "alpha": model.alpha}, floats)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")


def load_baseline(path):
    header, floats, _ = modelio.read_container(path)
    n = int(header.get("dim", -1))
    if header["type"] == "logistic":
        if floats.size != 1 + n:
            raise ModelFormatError(f"{path}: bad logistic payload size")
        return LinearModel(floats[0], floats[1:])
    if header["type"] == "bernoulli_nb":
        if floats.size != 2 + 4 * n:
            raise ModelFormatError(f"{path}: bad naive Bayes payload size")
        return BernoulliNbModel(
            floats[:2], floats[2 : 2 + 2 * n].reshape(2, n), floats[2 + 2 * n :].reshape(2, n), header["alpha"]
        )
    raise ModelFormatError(f"{path}: not a baseline model (type {header['type']!r})")
