"""Synthetic app corpora whose labels depend only on feature pairs.

Each :class:`MaliceRule` names two tokens. An app is malware when both
tokens of some rule are present and the rule fires. A clean app gets decoys
instead: one token from each of two different rules. Every app then holds
two rule tokens and, with two or more rules, each rule token is equally
common in both classes. Only whether the two tokens belong to the same rule
tells the classes apart, which a first-order classifier cannot see.

Besides the rule tokens every app activates background tokens drawn
independently with one calibrated probability so the expected number of
active features matches ``target_active_mean``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping
from xml.sax.saxutils import quoteattr

import numpy as np

from .errors import InfeasibleSpecError
from .extraction import ApiCall, ApiLists, derive_code_features, write_dictionaries
from .features import FeatureCategory, FeatureToken, LabeledDataset, build_vocabulary, encode

logger = logging.getLogger(__name__)

C = FeatureCategory

#: categories a rule token may come from: each yields exactly one token
RULE_CATEGORIES = frozenset({C.COMPONENT, C.HARDWARE, C.PERMISSION, C.INTENT_FILTER, C.SUSPICIOUS_API})

DEFAULT_POOLS = {
    C.COMPONENT: 300,
    C.HARDWARE: 40,
    C.PERMISSION: 250,
    C.INTENT_FILTER: 150,
    C.RESTRICTED_API: 150,
    C.SUSPICIOUS_API: 110,
}

@dataclass(frozen=True)
class MaliceRule:
    pair: tuple
    family: str
    fire_probability: float = 1.0

    def __post_init__(self):
        a, b = self.pair
        object.__setattr__(self, "pair", (a, b))
        if a == b:
            raise ValueError("rule tokens must be distinct")
        for tok in (a, b):
            if tok.category not in RULE_CATEGORIES or tok.missing_permission:
                raise ValueError(f"rule token {tok} must come from {sorted(c.tag for c in RULE_CATEGORIES)}")
        if not 0 < self.fire_probability <= 1:
            raise ValueError("fire_probability must lie in (0, 1]")
        if not self.family or self.family == "clean" or any(ch.isspace() for ch in self.family):
            raise ValueError(f"invalid family name {self.family!r}")


def default_rules():
    t = FeatureToken.parse
    return (
        MaliceRule((t("hw::android.hardware.location.gps"), t("perm::android.permission.SEND_SMS")), "FakeInstaller"),
        MaliceRule((t("perm::android.permission.BLUETOOTH"), t("perm::android.permission.CHANGE_WIFI_STATE")), "Airpush"),
        MaliceRule(
            (t("intent::android.intent.action.BOOT_COMPLETED"), t("api_susp::Ljavax/crypto/Cipher;->doFinal")), "Kuguo"
        ),
    )


@dataclass(frozen=True)
class CorpusSpec:
    n_apps: int = 2000
    malware_fraction: float = 0.5
    vocab_pools: Mapping = field(default_factory=lambda: dict(DEFAULT_POOLS))
    rules: tuple = field(default_factory=default_rules)
    base_activation: float | None = None
    noise_rate: float = 0.01
    target_active_mean: float = 73.0
    marginal_margin: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if self.n_apps < 1:
            raise ValueError("n_apps must be positive")
        if not 0 < self.malware_fraction < 1:
            raise ValueError("malware_fraction must lie in (0, 1)")
        for name in ("noise_rate", "marginal_margin"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.base_activation is not None and not 0 <= self.base_activation <= 1:
            raise ValueError("base_activation must lie in [0, 1]")
        for cat, size in self.vocab_pools.items():
            if cat is C.USED_PERMISSION:
                raise ValueError("used permissions are derived, they have no pool")
            if size < 0:
                raise ValueError("pool sizes must be nonnegative")
        seen = set()
        for rule in self.rules:
            for tok in rule.pair:
                if tok in seen:
                    raise ValueError(f"token {tok} used by more than one rule")
                seen.add(tok)

    def to_dict(self):
        return {
            "n_apps": self.n_apps,
            "malware_fraction": self.malware_fraction,
            "vocab_pools": {c.tag: n for c, n in self.vocab_pools.items()},
            "rules": [
                {"pair": [str(a), str(b)], "family": r.family, "fire_probability": r.fire_probability}
                for r in self.rules
                for a, b in [r.pair]
            ],
            "base_activation": self.base_activation,
            "noise_rate": self.noise_rate,
            "target_active_mean": self.target_active_mean,
            "marginal_margin": self.marginal_margin,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "vocab_pools" in data:
            data["vocab_pools"] = {C.from_tag(k): int(v) for k, v in data["vocab_pools"].items()}
        if "rules" in data:
            data["rules"] = tuple(
                MaliceRule(
                    tuple(FeatureToken.parse(t) for t in r["pair"]), r["family"], float(r.get("fire_probability", 1.0))
                )
                for r in data["rules"]
            )
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class SyntheticApp:
    app_id: str
    components: frozenset
    hardware: frozenset
    permissions: frozenset
    intents: frozenset
    calls: frozenset
    tokens: frozenset
    label: int
    clean_label: int
    family: str
    fired: tuple


@dataclass
class GroundTruth:
    labels: tuple
    clean_labels: tuple  # before label noise
    families: tuple
    fired: tuple
    tokens: tuple
    activation: float
    marginal_gap: float  # largest expected class-conditional gap of a rule token


@dataclass
class SyntheticCorpus:
    spec: CorpusSpec
    apps: list
    perm_map: dict
    lists: ApiLists
    activation: float
    marginal_gap: float

    def ground_truth(self) -> GroundTruth:
        a = self.apps
        return GroundTruth(
            tuple(x.label for x in a),
            tuple(x.clean_label for x in a),
            tuple(x.family for x in a),
            tuple(x.fired for x in a),
            tuple(x.tokens for x in a),
            self.activation,
            self.marginal_gap,
        )


# -- universe of background tokens --------------------------------------------------

_POOL_NAMES = {
    C.COMPONENT: "com.synth.app.Component{:04d}",
    C.HARDWARE: "com.synth.hardware.feature{:03d}",
    C.PERMISSION: "com.synth.permission.P{:04d}",
    C.INTENT_FILTER: "com.synth.intent.action.EVENT{:03d}",
    C.RESTRICTED_API: "Lcom/synth/api/Restricted{:04d};->invoke",
    C.SUSPICIOUS_API: "Lcom/synth/api/Suspicious{:04d};->invoke",
}


def _pools(spec):
    reserved = {tok.value for rule in spec.rules for tok in rule.pair}
    pools = {}
    for cat, pattern in _POOL_NAMES.items():
        size = int(spec.vocab_pools.get(cat, 0))
        pools[cat] = [v for v in (pattern.format(j) for j in range(size)) if v not in reserved]
    if len(pools[C.RESTRICTED_API]) > len(pools[C.PERMISSION]):
        raise InfeasibleSpecError("restricted API pool larger than permission pool")
    perm_map = {api: frozenset([perm]) for api, perm in zip(pools[C.RESTRICTED_API], pools[C.PERMISSION])}
    suspicious = set(pools[C.SUSPICIOUS_API])
    suspicious.update(tok.value for rule in spec.rules for tok in rule.pair if tok.category is C.SUSPICIOUS_API)
    return pools, perm_map, ApiLists(frozenset(perm_map), frozenset(suspicious))


def _rule_marginals(n_rules):
    """Expected ``(malware, clean)`` frequency of each rule token.

    Malware carries exactly its family's pair. With two or more rules a clean
    app carries one token from each of two different rules, so both classes
    hold exactly two rule tokens and each token has marginal ``1/R`` in both.
    A lone rule cannot be balanced: clean apps get one of its two tokens.
    """
    if n_rules == 0:
        return 0.0, 0.0
    if n_rules == 1:
        return 1.0, 0.5
    return 1.0 / n_rules, 1.0 / n_rules


def _calibrate(spec, pools):
    mal_marginal, clean_marginal = _rule_marginals(len(spec.rules))
    pi = spec.malware_fraction
    rule_tokens = len(spec.rules) * 2 * (pi * mal_marginal + (1 - pi) * clean_marginal)
    if spec.base_activation is not None:
        return spec.base_activation
    plain = sum(len(pools[c]) for c in (C.COMPONENT, C.HARDWARE, C.PERMISSION, C.INTENT_FILTER, C.SUSPICIOUS_API))
    n_restr = len(pools[C.RESTRICTED_API])
    need = spec.target_active_mean - rule_tokens
    if need <= 0:
        raise InfeasibleSpecError("rule tokens alone exceed target_active_mean")
    # each active restricted API adds its own token, its used permission and,
    # when that permission is not declared (prob 1 - p), a noperm token:
    # need = p * plain + n_restr * p * (3 - p)
    if n_restr == 0:
        p = need / plain if plain else math.inf
    else:
        b = plain + 3 * n_restr
        disc = b * b - 4 * n_restr * need
        p = math.inf if disc < 0 else (b - math.sqrt(disc)) / (2 * n_restr)
    if not 0 < p <= 1:
        raise InfeasibleSpecError(
            f"token pools too small to reach {spec.target_active_mean} active features per app"
        )
    return p


def _simulate_app(i, spec, pools, perm_map, lists, p):
    rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFFFFFFFFFF, i])
    rules = spec.rules
    intended_malware = bool(rules) and rng.random() < spec.malware_fraction
    family_rule = int(rng.integers(len(rules))) if intended_malware else -1

    if intended_malware:
        present = list(rules[family_rule].pair)
        coactive = [family_rule]
    else:
        # decoys: one token each from two different rules
        decoys = rng.choice(len(rules), size=min(2, len(rules)), replace=False) if rules else ()
        present = [rules[s].pair[int(rng.random() < 0.5)] for s in sorted(int(s) for s in decoys)]
        coactive = []
    fired = tuple(s for s in coactive if rng.random() < rules[s].fire_probability)

    chosen = {}
    for cat in _POOL_NAMES:
        pool = pools[cat]
        draws = rng.random(len(pool))
        chosen[cat] = {v for v, d in zip(pool, draws) if d < p}
    for tok in present:
        chosen[tok.category].add(tok.value)

    calls = frozenset(ApiCall.parse(v) for v in chosen[C.RESTRICTED_API] | chosen[C.SUSPICIOUS_API])
    manifest = {
        cat: frozenset(FeatureToken(cat, v) for v in chosen[cat])
        for cat in (C.COMPONENT, C.HARDWARE, C.PERMISSION, C.INTENT_FILTER)
    }
    code = derive_code_features(calls, chosen[C.PERMISSION], perm_map, lists)
    tokens = frozenset().union(*manifest.values(), code.tokens())

    clean_label = 1 if fired else -1
    label = -clean_label if rng.random() < spec.noise_rate else clean_label
    return SyntheticApp(
        app_id=f"app{i:05d}",
        components=manifest[C.COMPONENT],
        hardware=manifest[C.HARDWARE],
        permissions=manifest[C.PERMISSION],
        intents=manifest[C.INTENT_FILTER],
        calls=calls,
        tokens=tokens,
        label=label,
        clean_label=clean_label,
        family=rules[fired[0]].family if fired else "clean",
        fired=fired,
    )


def simulate(spec: CorpusSpec = CorpusSpec()) -> SyntheticCorpus:
    pools, perm_map, lists = _pools(spec)
    p = _calibrate(spec, pools)
    apps = [_simulate_app(i, spec, pools, perm_map, lists, p) for i in range(spec.n_apps)]
    mal_marginal, clean_marginal = _rule_marginals(len(spec.rules))
    gap = abs(mal_marginal - clean_marginal)
    if gap > spec.marginal_margin:
        logger.warning("rule token marginals differ by %.3f between classes", gap)
    return SyntheticCorpus(spec, apps, perm_map, lists, p, gap)


def generate_dataset(spec: CorpusSpec = CorpusSpec()) -> tuple:
    """``(dataset, ground_truth, vocabulary)`` for a freshly simulated corpus."""
    corpus = simulate(spec)
    ds, vocab = dataset_from_corpus(corpus)
    return ds, corpus.ground_truth(), vocab


def dataset_from_corpus(corpus: SyntheticCorpus) -> tuple:
    """``(dataset, vocabulary)``; families come from the noise-free ground truth."""
    vocab = build_vocabulary(app.tokens for app in corpus.apps)
    vectors = [encode(app.tokens, vocab)[0] for app in corpus.apps]
    ds = LabeledDataset(vectors, [a.label for a in corpus.apps], len(vocab), [a.family for a in corpus.apps])
    return ds, vocab


# -- decompiled bundle layout -------------------------------------------------------

_COMPONENT_TAGS = ("activity", "service", "receiver", "provider")


def _component_tag(name):
    return _COMPONENT_TAGS[zlib.crc32(name.encode("utf-8")) % 4]


def render_manifest(app: SyntheticApp) -> str:
    package = f"com.synth.{app.app_id}"
    out = [
        '<?xml version="1.0" encoding="utf-8"?>',
        f'<manifest xmlns:android="http://schemas.android.com/apk/res/android" package={quoteattr(package)}>',
    ]
    out += [f"    <uses-permission android:name={quoteattr(t.value)}/>" for t in sorted(app.permissions)]
    out += [f"    <uses-feature android:name={quoteattr(t.value)}/>" for t in sorted(app.hardware)]
    out.append(f"    <application android:label={quoteattr(app.app_id)}>")
    out += [f"        <{_component_tag(t.value)} android:name={quoteattr(t.value)}/>" for t in sorted(app.components)]
    if app.intents:
        # activity-alias is not one of the four component kinds, so it adds no token
        out.append(f"        <activity-alias android:name={quoteattr(package + '.Entry')}>")
        out.append("            <intent-filter>")
        out += [f"                <action android:name={quoteattr(t.value)}/>" for t in sorted(app.intents)]
        out.append("            </intent-filter>")
        out.append("        </activity-alias>")
    out.append("    </application>")
    out.append("</manifest>")
    return "\n".join(out) + "\n"


def render_smali(app: SyntheticApp) -> dict:
    """Relative path -> smali text; calls are spread over two classes."""
    calls = sorted(app.calls, key=str)
    files = {}
    for part in range(2):
        chunk = calls[part::2]
        if not chunk:
            continue
        cls = f"Lcom/synth/{app.app_id}/Payload{part};"
        lines = [
            f".class public {cls}",
            ".super Ljava/lang/Object;",
            f'.source "Payload{part}.java"',
            "",
            ".method public static run()V",
            "    .locals 2",
            "",
        ]
        for j, call in enumerate(chunk):
            if j % 2 == 0:
                lines.append(f"    invoke-virtual {{v0, v1}}, {call}()V")
            else:
                lines.append(f"    invoke-static/range {{v0 .. v1}}, {call}()V")
            lines.append("    move-result-object v0")
        lines += ["", "    return-void", ".end method", ""]
        files[f"smali/com/synth/{app.app_id}/Payload{part}.smali"] = "\n".join(lines)
    return files


def write_corpus(corpus: SyntheticCorpus, out_dir) -> list:
    """Write one bundle directory per app, ``labels.csv`` and ``dicts/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dirs = []
    for app in corpus.apps:
        root = out / app.app_id
        try:
            (root / "smali").mkdir(parents=True, exist_ok=True)
            (root / "AndroidManifest.xml").write_text(render_manifest(app), encoding="utf-8", newline="\n")
            for rel, text in render_smali(app).items():
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(text, encoding="utf-8", newline="\n")
        except OSError as exc:
            raise OSError(f"{app.app_id}: cannot write bundle: {exc}") from exc
        dirs.append(root)
    write_labels(out / "labels.csv", [(a.app_id, a.label, a.family) for a in corpus.apps])
    write_dictionaries(out / "dicts", corpus.perm_map, corpus.lists)
    return dirs


def generate_bundles(spec: CorpusSpec, out_dir) -> list:
    return write_corpus(simulate(spec), out_dir)


def write_labels(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["app_id", "label", "family"])
        for app_id, label, family in rows:
            w.writerow([app_id, f"{label:+d}", family or ""])


def read_labels(path) -> dict:
    """app_id -> (label, family or None)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["app_id"]] = (int(row["label"]), row.get("family") or None)
    return out
