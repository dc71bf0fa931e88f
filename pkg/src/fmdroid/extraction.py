"""Static feature extraction from decompiled app bundles.

A bundle is the directory layout produced by a decompiler: a decoded
``AndroidManifest.xml`` next to a ``smali/`` tree. The manifest yields
components, hardware features, requested permissions and intent filters;
the smali code yields the API calls from which restricted/suspicious API
usage and actually-used permissions are derived.
"""

from __future__ import annotations

import logging
import os
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DictionaryError, ManifestParseError
from .features import FeatureCategory, FeatureToken

logger = logging.getLogger(__name__)

ANDROID_NS = "http://schemas.android.com/apk/res/android"
_NAME = f"{{{ANDROID_NS}}}name"

_COMPONENT_TAGS = ("activity", "service", "receiver", "provider")

# invoke-<kind>[/range] {regs}, Lpkg/Cls;->method(args)ret [, proto]
_INVOKE_RE = re.compile(
    r"^invoke-[a-z-]+(?:/range)?\s+\{[^}]*\}\s*,\s*"
    r"(L[^;\s]+;)->([^\s(]+)\(([^)]*)\)(\S+)"
    r"(?:\s*,\s*\S.*)?$"
)


@dataclass(frozen=True, order=True)
class ApiCall:
    class_descriptor: str
    method_name: str

    def __post_init__(self):
        d = self.class_descriptor
        if not (len(d) > 2 and d.startswith("L") and d.endswith(";")):
            raise ValueError(f"bad class descriptor {d!r}")
        if not self.method_name:
            raise ValueError("empty method name")

    def __str__(self):
        return f"{self.class_descriptor}->{self.method_name}"

    @classmethod
    def parse(cls, text: str) -> "ApiCall":
        cls_desc, sep, method = text.strip().partition("->")
        if not sep:
            raise ValueError(f"{text!r} is not of the form Lcls;->method")
        return cls(cls_desc, method)


@dataclass(frozen=True)
class ApiLists:
    restricted: frozenset = frozenset()
    suspicious: frozenset = frozenset()


@dataclass
class ExtractionStats:
    """Warning counters accumulated while extracting one or more bundles."""

    manifest_skipped: int = 0
    smali_skipped: int = 0

    def merge(self, other: "ExtractionStats") -> None:
        self.manifest_skipped += other.manifest_skipped
        self.smali_skipped += other.smali_skipped


@dataclass
class ManifestFeatures:
    components: set = field(default_factory=set)
    hardware: set = field(default_factory=set)
    permissions: set = field(default_factory=set)
    intent_filters: set = field(default_factory=set)
    skipped: int = 0

    def tokens(self) -> set:
        return self.components | self.hardware | self.permissions | self.intent_filters


@dataclass
class CodeFeatures:
    restricted: set = field(default_factory=set)
    suspicious: set = field(default_factory=set)
    used_permissions: set = field(default_factory=set)

    def tokens(self) -> set:
        return self.restricted | self.suspicious | self.used_permissions


@dataclass(frozen=True)
class AppBundle:
    manifest_text: str
    smali_files: tuple = ()

    def __post_init__(self):
        if not self.manifest_text:
            raise ValueError("manifest text is empty")
        paths = [p for p, _ in self.smali_files]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate smali paths in bundle")


# -- manifest ----------------------------------------------------------------


def _byte_offset(text: str, line: int, column: int) -> int:
    lines = text.splitlines(keepends=True)
    head = "".join(lines[: max(line - 1, 0)])
    tail = lines[line - 1][:column] if 0 < line <= len(lines) else ""
    return len((head + tail).encode("utf-8"))


def _token(category, value, stats):
    try:
        return FeatureToken(category, value)
    except ValueError:
        stats.skipped += 1
        return None


def parse_manifest(manifest_text: str) -> ManifestFeatures:
    """Collect the four manifest feature kinds.

    Elements without ``android:name`` (or with a name that cannot form a token)
    are skipped and counted in ``skipped``.
    """
    try:
        root = ET.fromstring(manifest_text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ManifestParseError(f"malformed manifest XML: {exc}", _byte_offset(manifest_text, line, col)) from None

    out = ManifestFeatures()

    def add(target, category, elem):
        name = elem.get(_NAME)
        if name is None:
            out.skipped += 1
            return
        tok = _token(category, name.strip(), out)
        if tok is not None:
            target.add(tok)

    for elem in root.iter():
        tag = elem.tag
        if tag in _COMPONENT_TAGS:
            add(out.components, FeatureCategory.COMPONENT, elem)
        elif tag == "uses-feature":
            add(out.hardware, FeatureCategory.HARDWARE, elem)
        elif tag == "uses-permission":
            add(out.permissions, FeatureCategory.PERMISSION, elem)
        elif tag == "intent-filter":
            for child in elem:
                if child.tag in ("action", "category"):
                    add(out.intent_filters, FeatureCategory.INTENT_FILTER, child)
    return out


# -- smali -------------------------------------------------------------------


@dataclass
class SmaliScan:
    calls: set
    warnings: int


def scan_smali(smali_text: str) -> SmaliScan:
    calls = set()
    warnings = 0
    for raw in smali_text.splitlines():
        line = raw.strip()
        if not line.startswith("invoke-"):
            continue
        m = _INVOKE_RE.match(line)
        if m is None:
            warnings += 1
            continue
        calls.add(ApiCall(m.group(1), m.group(2)))
    return SmaliScan(calls, warnings)


def parse_smali_calls(smali_text: str) -> set:
    """API methods referenced by ``invoke-*`` instructions."""
    return scan_smali(smali_text).calls


# -- derived code features ---------------------------------------------------


def derive_code_features(
    calls: Iterable[ApiCall],
    declared_permissions: Iterable,
    perm_map: Mapping[str, frozenset],
    lists: ApiLists,
) -> CodeFeatures:
    """Restricted APIs, suspicious APIs and used permissions for a set of calls.

    ``declared_permissions`` may hold permission tokens or bare permission
    names. A restricted call whose required permissions are not all declared
    yields an extra ``api_restr_noperm`` token besides the plain one.
    """
    declared = {p.value if isinstance(p, FeatureToken) else p for p in declared_permissions}
    out = CodeFeatures()
    for call in calls:
        key = str(call)
        if key in lists.suspicious:
            out.suspicious.add(FeatureToken(FeatureCategory.SUSPICIOUS_API, key))
        required = perm_map.get(key, frozenset())
        if key in lists.restricted:
            out.restricted.add(FeatureToken(FeatureCategory.RESTRICTED_API, key))
            if not required <= declared:
                out.restricted.add(
                    FeatureToken(FeatureCategory.RESTRICTED_API, key, missing_permission=True)
                )
        for perm in required:
            out.used_permissions.add(FeatureToken(FeatureCategory.USED_PERMISSION, perm))
    return out


def extract_bundle(bundle: AppBundle, perm_map, lists: ApiLists, stats: ExtractionStats | None = None) -> frozenset:
    """All seven feature kinds for one bundle."""
    manifest = parse_manifest(bundle.manifest_text)
    calls = set()
    smali_warnings = 0
    for _, text in bundle.smali_files:
        scan = scan_smali(text)
        calls |= scan.calls
        smali_warnings += scan.warnings
    code = derive_code_features(calls, manifest.permissions, perm_map, lists)
    if stats is not None:
        stats.manifest_skipped += manifest.skipped
        stats.smali_skipped += smali_warnings
    return frozenset(manifest.tokens() | code.tokens())


def load_bundle(path) -> AppBundle:
    """Read ``<dir>/AndroidManifest.xml`` and every ``<dir>/smali/**/*.smali``."""
    root = Path(path)
    manifest_path = root / "AndroidManifest.xml"
    try:
        manifest_text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"{manifest_path}: no AndroidManifest.xml in bundle") from None
    smali_dir = root / "smali"
    files = []
    if smali_dir.is_dir():
        for p in sorted(smali_dir.rglob("*.smali")):
            files.append((p.relative_to(root).as_posix(), p.read_text(encoding="utf-8", errors="replace")))
    return AppBundle(manifest_text, tuple(files))


# -- dictionaries ------------------------------------------------------------


def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().splitlines()
    except FileNotFoundError:
        raise DictionaryError(f"dictionary file not found: {os.fspath(path)}") from None


def load_perm_map(path) -> dict:
    """Parse ``Lcls;->method<TAB>PERM_A[,PERM_B...]`` lines."""
    out = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        api, sep, perms = line.partition("\t")
        if not sep:
            raise DictionaryError(f"{path}:{lineno}: expected a tab between API and permissions")
        try:
            key = str(ApiCall.parse(api))
        except ValueError as exc:
            raise DictionaryError(f"{path}:{lineno}: {exc}") from None
        names = frozenset(p.strip() for p in perms.split(","))
        if not names or "" in names:
            raise DictionaryError(f"{path}:{lineno}: empty permission name")
        out[key] = out.get(key, frozenset()) | names
    return out


def load_api_list(path) -> frozenset:
    out = set()
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            out.add(str(ApiCall.parse(line)))
        except ValueError as exc:
            raise DictionaryError(f"{path}:{lineno}: {exc}") from None
    return frozenset(out)


def load_api_lists(restricted_path, suspicious_path, perm_map=None) -> ApiLists:
    lists = ApiLists(load_api_list(restricted_path), load_api_list(suspicious_path))
    if perm_map is not None:
        check_dictionaries(perm_map, lists)
    return lists


def check_dictionaries(perm_map, lists: ApiLists) -> None:
    missing = sorted(lists.restricted - perm_map.keys())
    if missing:
        raise DictionaryError(f"restricted APIs without a permission entry: {', '.join(missing[:5])}")


PERM_MAP_FILE = "api_permissions.tsv"
RESTRICTED_FILE = "restricted_apis.txt"
SUSPICIOUS_FILE = "suspicious_apis.txt"


def load_dictionaries(directory=None) -> tuple:
    """``(perm_map, lists)`` from ``directory`` or the packaged defaults."""
    if directory is None:
        base = resources.files("fmdroid") / "data"
        with resources.as_file(base) as d:
            return load_dictionaries(d)
    d = Path(directory)
    perm_map = load_perm_map(d / PERM_MAP_FILE)
    lists = load_api_lists(d / RESTRICTED_FILE, d / SUSPICIOUS_FILE, perm_map)
    return perm_map, lists


def write_dictionaries(directory, perm_map, lists: ApiLists) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / PERM_MAP_FILE, "w", encoding="utf-8", newline="\n") as fh:
        for api in sorted(perm_map):
            fh.write(f"{api}\t{','.join(sorted(perm_map[api]))}\n")
    for name, entries in ((RESTRICTED_FILE, lists.restricted), (SUSPICIOUS_FILE, lists.suspicious)):
        with open(d / name, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{api}\n" for api in sorted(entries))
