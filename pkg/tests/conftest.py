from pathlib import Path

import numpy as np
import pytest

from fmdroid import fm, kernels
from fmdroid.features import FeatureCategory, SparseVector

FIXTURES = Path(__file__).parent / "fixtures"
BUNDLES = FIXTURES / "bundles"

NCAT = len(FeatureCategory)


def random_model(rng, n, k, mask_mode="full", scale=0.5):
    """Random FM; partial masks get random categories and a random pair set."""
    if mask_mode == "full":
        mask = fm.InteractionMask.full()
    else:
        cats = rng.integers(0, NCAT, size=n)
        pairs = []
        for a in range(NCAT):
            for b in range(a, NCAT):
                if rng.random() < 0.3:
                    pairs.append((FeatureCategory.from_code(a), FeatureCategory.from_code(b)))
        mask = fm.InteractionMask.partial(pairs, cats)
    return fm.FmModel(
        rng.normal(0, scale), rng.normal(0, scale, n), rng.normal(0, scale, (n, k)), mask
    )


def random_vector(rng, n, density=None):
    p = rng.uniform(0.05, 0.9) if density is None else density
    return SparseVector(tuple(np.flatnonzero(rng.random(n) < p).tolist()), n)


def numeric_gradient(model, x, y, eps, l2_w, l2_v):
    """Central differences of the loss w.r.t. w0 and the active rows of w and V."""

    def loss_with(w0=None, w=None, V=None):
        m = fm.FmModel(model.w0 if w0 is None else w0, model.w if w is None else w, model.V if V is None else V, model.mask)
        return fm.loss_and_gradient(m, x, y, l2_w, l2_v).loss

    d0 = (loss_with(w0=model.w0 + eps) - loss_with(w0=model.w0 - eps)) / (2 * eps)
    dw, dV = [], []
    for i in x.indices:
        wp, wm = model.w.copy(), model.w.copy()
        wp[i] += eps
        wm[i] -= eps
        dw.append((loss_with(w=wp) - loss_with(w=wm)) / (2 * eps))
        row = []
        for f in range(model.V.shape[1]):
            Vp, Vm = model.V.copy(), model.V.copy()
            Vp[i, f] += eps
            Vm[i, f] -= eps
            row.append((loss_with(V=Vp) - loss_with(V=Vm)) / (2 * eps))
        dV.append(row)
    return d0, np.array(dw), np.array(dV).reshape(len(x.indices), model.V.shape[1])


def relative_error(a, b, floor=1e-6):
    # |a-b| / max(|a|, |b|, floor), worst entry
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return request.param


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def acceptance(request):
    """``record(number, passed, detail)``: remembered for the end-of-run summary."""
    table = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, passed, detail):
        table[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_ACCEPTANCE_KEY, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(table):
        passed, detail = table[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
