"""COVIDx-style manifests and the three train/test configurations."""

from __future__ import annotations

import csv
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import ManifestError

logger = logging.getLogger(__name__)

CLASS_NAMES = ("Normal", "Pneumonia", "Covid19")
# on-disk spelling, indexed by class id
LABEL_STRINGS = ("normal", "pneumonia", "covid-19")
SPLITS = ("train", "test")
HEADER = ("image_path", "label", "split")
DATA_ROOT_ENV = "ACCOVIDNET_DATA_ROOT"

NORMAL, PNEUMONIA, COVID19 = 0, 1, 2

_LABEL_IDS = {s: i for i, s in enumerate(LABEL_STRINGS)}


def parse_label(text: str) -> int:
    """Class id for a label string; trims whitespace and ignores case."""
    key = text.strip().casefold()
    if key not in _LABEL_IDS:
        raise ManifestError(f"unknown label {text!r}; expected one of {LABEL_STRINGS}")
    return _LABEL_IDS[key]


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    label: int
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.entries == other.entries

    def select(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image_path

    def counts(self) -> dict[int, dict[str, int]]:
        """``{class_id: {"train": n, "test": m}}``."""
        c = Counter((e.label, e.split) for e in self.entries)
        return {k: {s: c[(k, s)] for s in SPLITS} for k in range(len(CLASS_NAMES))}

    def summary(self) -> str:
        parts = []
        for k, per in self.counts().items():
            parts.append(f"{CLASS_NAMES[k]} train={per['train']}, test={per['test']}")
        return "; ".join(parts)


@dataclass(frozen=True)
class SplitConfig:
    """Expected per-class ``(train, test)`` counts."""

    name: str
    expected_counts: dict[int, tuple[int, int]]

    @classmethod
    def covidx(cls, version: str, swap_normal_pneumonia: bool = False) -> SplitConfig:
        """Counts for ``v1``, ``v2`` or ``v3`` (also accepts ``covidx_v1`` etc.).

        ``swap_normal_pneumonia`` exchanges the Normal and Pneumonia totals, for
        datasets assembled under the alternative class labeling.
        """
        key = version.lower().removeprefix("covidx_").removeprefix("covidx-")
        if key not in _COVIDX:
            raise ManifestError(f"unknown COVIDx version {version!r}; expected v1, v2 or v3")
        counts = dict(_COVIDX[key])
        if swap_normal_pneumonia:
            counts[NORMAL], counts[PNEUMONIA] = counts[PNEUMONIA], counts[NORMAL]
        return cls(name=f"covidx_{key}", expected_counts=counts)

    @classmethod
    def custom(cls, expected_counts: dict[int, tuple[int, int]]) -> SplitConfig:
        return cls(name="custom", expected_counts=dict(expected_counts))


#                  Normal         Pneumonia      Covid19
_COVIDX = {
    "v1": {NORMAL: (5475, 100), PNEUMONIA: (7966, 100), COVID19: (517, 100)},
    "v2": {NORMAL: (5425, 150), PNEUMONIA: (7916, 150), COVID19: (467, 150)},
    "v3": {NORMAL: (5375, 200), PNEUMONIA: (7866, 200), COVID19: (417, 200)},
}


def _as_split_config(version: str | SplitConfig) -> SplitConfig:
    return version if isinstance(version, SplitConfig) else SplitConfig.covidx(version)


def count_mismatches(manifest: Manifest, split_config: SplitConfig) -> list[str]:
    found = manifest.counts()
    problems = []
    for k in sorted(split_config.expected_counts):
        exp_train, exp_test = split_config.expected_counts[k]
        got = found[k]
        for split, exp in (("train", exp_train), ("test", exp_test)):
            if got[split] != exp:
                problems.append(
                    f"{CLASS_NAMES[k]} {split}: expected {exp}, found {got[split]}"
                )
    return problems


def validate_counts(manifest: Manifest, split_config: SplitConfig, strict: bool = True) -> None:
    problems = count_mismatches(manifest, split_config)
    if not problems:
        return
    msg = f"manifest does not match {split_config.name}: " + "; ".join(problems)
    if strict:
        raise ManifestError(msg)
    logger.warning(msg)


def parse_manifest(text: str, root: str | os.PathLike = "") -> Manifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("no entries") from None
    if tuple(h.strip().casefold() for h in header) != HEADER:
        raise ManifestError(f"manifest header must be {','.join(HEADER)}, got {','.join(header)}")
    entries, seen = [], set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"line {lineno}: expected 3 fields, got {len(row)}")
        path, label_text, split = (c.strip() for c in row)
        try:
            label = parse_label(label_text)
        except ManifestError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        if label_text != LABEL_STRINGS[label]:
            logger.info("line %d: label %r canonicalized to %r", lineno, label_text, LABEL_STRINGS[label])
        split = split.casefold()
        if split not in SPLITS:
            raise ManifestError(f"line {lineno}: unknown split {split!r}")
        if path in seen:
            raise ManifestError(f"line {lineno}: duplicate image_path {path!r}")
        seen.add(path)
        entries.append(ManifestEntry(path, label, split))
    if not entries:
        raise ManifestError("no entries")
    return Manifest(entries, Path(root))


def format_manifest(manifest: Manifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for e in manifest.entries:
        writer.writerow((e.image_path, LABEL_STRINGS[e.label], e.split))
    return buf.getvalue()


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(format_manifest(manifest), encoding="utf-8")
    return path


def resolve_root(manifest_path: str | os.PathLike, root: str | os.PathLike | None = None) -> Path:
    """Dataset root: explicit argument, then the environment variable, then the manifest's folder."""
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path(manifest_path).resolve().parent


def load_manifest(
    path: str | os.PathLike,
    split_config: SplitConfig | str | None = None,
    strict: bool = False,
    root: str | os.PathLike | None = None,
    check_paths: bool = True,
) -> Manifest:
    """Parse and validate a manifest file.

    With ``strict`` the per-class counts must equal ``split_config`` exactly;
    otherwise mismatches are logged.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    manifest = parse_manifest(text, resolve_root(path, root))
    if check_paths:
        missing = [e.image_path for e in manifest.entries if not manifest.resolve(e).exists()]
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise ManifestError(f"{len(missing)} image path(s) missing under {manifest.root}: {shown}")
    logger.info("manifest %s: %s", path, manifest.summary())
    if split_config is not None:
        validate_counts(manifest, _as_split_config(split_config), strict=strict)
    return manifest


def derive_split(
    base: Manifest,
    from_version: str | SplitConfig,
    to_version: str | SplitConfig,
) -> Manifest:
    """Move training images into the test split to turn one configuration into another.

    Per class, the last ``k`` training entries in path-sorted order are moved,
    so successive derivations v1 -> v2 -> v3 grow the test sets as supersets.
    """
    src, dst = _as_split_config(from_version), _as_split_config(to_version)
    validate_counts(base, src, strict=True)
    moved: set[str] = set()
    for k in sorted(dst.expected_counts):
        src_train, src_test = src.expected_counts[k]
        dst_train, dst_test = dst.expected_counts[k]
        if src_train + src_test != dst_train + dst_test:
            raise ManifestError(
                f"{CLASS_NAMES[k]}: {src.name} and {dst.name} have different totals"
            )
        n_move = src_train - dst_train
        if n_move < 0:
            raise ManifestError(
                f"{CLASS_NAMES[k]}: {dst.name} needs {dst_train} training images but "
                f"only {src_train} are available"
            )
        if n_move == 0:
            continue
        train_paths = sorted(e.image_path for e in base.entries if e.label == k and e.split == "train")
        moved.update(train_paths[len(train_paths) - n_move:])
    entries = [replace(e, split="test") if e.image_path in moved else e for e in base.entries]
    out = Manifest(entries, base.root)
    validate_counts(out, dst, strict=True)
    return out
