import filecmp
import logging

import numpy as np
import pytest

from fmdroid import corpus, extraction
from fmdroid.corpus import CorpusSpec, MaliceRule
from fmdroid.errors import InfeasibleSpecError
from fmdroid.features import FeatureToken, build_vocabulary, encode

T = FeatureToken.parse


def best_single_feature_accuracy(ds):
    """Best accuracy of any rule ``malware iff x_j`` (or its negation, or a constant)."""
    y = np.asarray(ds.labels)
    indptr, indices = ds.csr
    rows = np.repeat(np.arange(len(ds)), np.diff(indptr))
    on_pos = np.bincount(indices[y[rows] == 1], minlength=ds.dim)
    on_neg = np.bincount(indices[y[rows] == -1], minlength=ds.dim)
    n_neg = np.count_nonzero(y == -1)
    correct = on_pos + (n_neg - on_neg)
    best = max(correct.max(), len(y) - correct.min(), n_neg, len(y) - n_neg)
    return best / len(y)


def pair_oracle_accuracy(truth, rules, labels):
    hits = [any(a in toks and b in toks for a, b in (r.pair for r in rules)) for toks in truth.tokens]
    return np.mean([(1 if h else -1) == y for h, y in zip(hits, labels)])


@pytest.fixture(scope="module")
def default_corpus():
    return corpus.generate_dataset(CorpusSpec())


def test_default_corpus_hides_signal_in_pairs(default_corpus):
    ds, truth, _ = default_corpus
    assert best_single_feature_accuracy(ds) <= 0.75
    assert pair_oracle_accuracy(truth, CorpusSpec().rules, truth.clean_labels) >= 0.99


def test_default_corpus_sparsity(default_corpus):
    ds, _, vocab = default_corpus
    mean_active = np.mean([len(x.indices) for x in ds.vectors])
    assert abs(mean_active - 73) <= 0.15 * 73
    assert len(vocab) == ds.dim and 900 <= ds.dim <= 1500


def test_rule_token_marginals_match(default_corpus):
    ds, truth, _ = default_corpus
    spec = CorpusSpec()
    y = np.array(truth.clean_labels)
    for rule in spec.rules:
        for tok in rule.pair:
            has = np.array([tok in t for t in truth.tokens])
            gap = abs(has[y == 1].mean() - has[y == -1].mean())
            # expected gap is zero; 2000 apps leave a few points of sampling noise
            assert gap <= spec.marginal_margin


def test_ground_truth_consistent(default_corpus):
    ds, truth, _ = default_corpus
    rules = {r.family: r for r in CorpusSpec().rules}
    flips = 0
    for y, clean, fam, toks in zip(truth.labels, truth.clean_labels, truth.families, truth.tokens):
        flips += y != clean
        if fam != "clean":
            a, b = rules[fam].pair
            assert clean == 1 and a in toks and b in toks
    assert 0 < flips < 0.03 * len(ds)


def test_single_rule():
    rule = MaliceRule((T("perm::p.A"), T("perm::p.B")), "Solo")
    gen = corpus.simulate(CorpusSpec(n_apps=200, rules=(rule,), noise_rate=0.0, marginal_margin=1.0))
    mal = [a for a in gen.apps if a.label == 1]
    assert mal and all(set(rule.pair) <= a.tokens for a in mal)
    assert all(not set(rule.pair) <= a.tokens for a in gen.apps if a.label == -1)


def test_single_rule_warns_about_marginals(caplog):
    rule = MaliceRule((T("perm::p.A"), T("perm::p.B")), "Solo")
    with caplog.at_level(logging.WARNING, logger="fmdroid.corpus"):
        gen = corpus.simulate(CorpusSpec(n_apps=20, rules=(rule,)))
    assert gen.marginal_gap == 0.5 and "marginals" in caplog.text


def test_no_rules_all_clean():
    gen = corpus.simulate(CorpusSpec(n_apps=100, rules=(), noise_rate=0.0))
    assert {a.label for a in gen.apps} == {-1}


def test_rule_tokens_appear_in_clean_apps(default_corpus):
    _, truth, _ = default_corpus
    clean = [t for t, y in zip(truth.tokens, truth.clean_labels) if y == -1]
    for rule in CorpusSpec().rules:
        for tok in rule.pair:
            assert any(tok in t for t in clean)


def test_infeasible_pools():
    with pytest.raises(InfeasibleSpecError):
        corpus.simulate(CorpusSpec(n_apps=10, vocab_pools={c: 5 for c in corpus.DEFAULT_POOLS}))


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_apps=0), dict(malware_fraction=1.0), dict(noise_rate=1.5), dict(base_activation=2.0)],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        CorpusSpec(**kwargs)


def test_rule_validation():
    with pytest.raises(ValueError):
        MaliceRule((T("perm::a"), T("perm::a")), "X")
    with pytest.raises(ValueError):
        MaliceRule((T("perm::a"), T("api_restr::La;->b")), "X")
    with pytest.raises(ValueError):
        MaliceRule((T("perm::a"), T("perm::b")), "clean")
    shared = MaliceRule((T("perm::a"), T("perm::b")), "X")
    with pytest.raises(ValueError, match="more than one rule"):
        CorpusSpec(rules=(shared, MaliceRule((T("perm::a"), T("perm::c")), "Y")))


def test_spec_dict_round_trip(tmp_path):
    spec = CorpusSpec(n_apps=50, seed=9)
    assert CorpusSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError, match="unknown"):
        CorpusSpec.from_dict({"apps": 3})


def test_same_seed_same_bundle_bytes(tmp_path):
    spec = CorpusSpec(n_apps=15, seed=4)
    corpus.generate_bundles(spec, tmp_path / "a")
    corpus.generate_bundles(spec, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def identical(c):
        same = not (c.left_only or c.right_only or c.diff_files or c.funny_files)
        return same and all(identical(sub) for sub in c.subdirs.values())

    assert identical(cmp)
    a, b = (tmp_path / d / "app00003" / "AndroidManifest.xml" for d in "ab")
    assert a.read_bytes() == b.read_bytes()


def test_round_trip_small(tmp_path):
    spec = CorpusSpec(n_apps=30, seed=5)
    gen = corpus.simulate(spec)
    corpus.write_corpus(gen, tmp_path)
    perm_map, lists = extraction.load_dictionaries(tmp_path / "dicts")
    vocab = build_vocabulary(a.tokens for a in gen.apps)
    for app in gen.apps:
        got = extraction.extract_bundle(extraction.load_bundle(tmp_path / app.app_id), perm_map, lists)
        assert got == app.tokens
        assert encode(got, vocab)[0] == encode(app.tokens, vocab)[0]
    labels = corpus.read_labels(tmp_path / "labels.csv")
    assert labels["app00000"] == (gen.apps[0].label, gen.apps[0].family)


def test_app_without_api_tokens_has_empty_smali(tmp_path):
    spec = CorpusSpec(
        n_apps=3, rules=(), vocab_pools={corpus.C.PERMISSION: 200, corpus.C.HARDWARE: 40}, target_active_mean=10
    )
    corpus.generate_bundles(spec, tmp_path)
    for i in range(3):
        smali = tmp_path / f"app{i:05d}" / "smali"
        assert smali.is_dir() and not any(smali.iterdir())
