"""Manifest ingestion, MOS aggregation, stratified folds and nested subsamples."""

from __future__ import annotations

import csv
import json
import re
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    IntegrityError,
    ManifestParseError,
    MissingAudioError,
    StratificationError,
    SubsampleSizeError,
)

DIMENSIONS = ("mi", "ta")
REQUIRED_COLUMNS = ("clip_id", "audio_path", "system_id", "prompt_text")
_RATING_COLUMN = re.compile(r"^(mi|ta)_(\d+)$")


@dataclass(frozen=True)
class ClipAnnotation:
    clip_id: str
    audio_path: str
    system_id: str
    ratings_mi: tuple[int, ...]
    ratings_ta: tuple[int, ...]
    prompt_text: str = ""

    def ratings(self, dim: str) -> tuple[int, ...]:
        return self.ratings_mi if dim == "mi" else self.ratings_ta


@dataclass(frozen=True)
class MosTarget:
    clip_id: str
    mi: float
    ta: float

    def __getitem__(self, dim: str) -> float:
        return getattr(self, dim)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "fold": self.fold_index,
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        return cls(
            fold_index=int(d["fold"]),
            train_ids=tuple(d["train"]),
            val_ids=tuple(d["val"]),
            test_ids=tuple(d["test"]),
            seed=int(d.get("seed", 0)),
        )


def _parse_rating(raw: str, column: str, line: int) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise ManifestParseError(f"{column}={raw!r} is not an integer rating", line) from None
    if not 1 <= value <= 5:
        raise ManifestParseError(f"{column}={raw!r} outside rating range [1,5]", line)
    return value


def _rating_columns(header: Sequence[str], dim: str) -> list[str]:
    cols = []
    for name in header:
        m = _RATING_COLUMN.match(name.strip())
        if m and m.group(1) == dim:
            cols.append((int(m.group(2)), name))
    return [name for _, name in sorted(cols)]


def load_manifest(path: str | Path, check_audio: bool = True) -> list[ClipAnnotation]:
    """Parse a manifest CSV into annotations.

    ``audio_path`` is resolved relative to the manifest's directory. With
    ``check_audio`` every missing file is collected and reported in one
    :class:`MissingAudioError` rather than skipped.
    """
    path = Path(path)
    base = path.parent
    annotations: list[ClipAnnotation] = []
    seen: dict[str, int] = {}
    missing: list[tuple[str, str]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestParseError("empty manifest (no header row)", 1) from None
        absent = [c for c in REQUIRED_COLUMNS if c not in header]
        if absent:
            raise ManifestParseError(f"header missing columns {absent}", 1)
        mi_cols, ta_cols = _rating_columns(header, "mi"), _rating_columns(header, "ta")
        if not mi_cols or not ta_cols:
            raise ManifestParseError("header needs mi_1.. and ta_1.. rating columns", 1)
        index = {name: i for i, name in enumerate(header)}

        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ManifestParseError(
                    f"expected {len(header)} fields, found {len(row)}", line
                )
            cell = {name: row[i].strip() for name, i in index.items()}
            clip_id = cell["clip_id"]
            if not clip_id:
                raise ManifestParseError("empty clip_id", line)
            if not cell["system_id"]:
                raise ManifestParseError("empty system_id", line)
            if clip_id in seen:
                raise IntegrityError(
                    f"duplicate clip_id {clip_id!r} on lines {seen[clip_id]} and {line}"
                )
            seen[clip_id] = line

            ratings = {}
            for dim, cols in (("mi", mi_cols), ("ta", ta_cols)):
                values = []
                gap = False
                for col in cols:
                    raw = cell[col]
                    if not raw:
                        gap = True
                        continue
                    if gap:
                        raise ManifestParseError(f"{col} follows an empty rating cell", line)
                    values.append(_parse_rating(raw, col, line))
                if not values:
                    raise ManifestParseError(f"no {dim} ratings (first cell empty)", line)
                ratings[dim] = tuple(values)

            audio = cell["audio_path"]
            resolved = str(base / audio) if audio else ""
            if check_audio and (not audio or not Path(resolved).is_file()):
                missing.append((clip_id, audio))
            annotations.append(
                ClipAnnotation(
                    clip_id=clip_id,
                    audio_path=resolved,
                    system_id=cell["system_id"],
                    prompt_text=cell["prompt_text"],
                    ratings_mi=ratings["mi"],
                    ratings_ta=ratings["ta"],
                )
            )
    if missing:
        raise MissingAudioError(missing)
    return annotations


def write_manifest(path: str | Path, annotations: Iterable[ClipAnnotation], n_ratings: int = 5) -> None:
    """Write annotations back in manifest CSV form (paths relative to ``path``'s dir)."""
    path = Path(path)
    header = list(REQUIRED_COLUMNS)
    header += [f"mi_{i}" for i in range(1, n_ratings + 1)]
    header += [f"ta_{i}" for i in range(1, n_ratings + 1)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a in annotations:
            audio = a.audio_path
            try:
                audio = str(Path(audio).relative_to(path.parent))
            except ValueError:
                pass
            pad = lambda r: [str(v) for v in r] + [""] * (n_ratings - len(r))  # noqa: E731
            w.writerow([a.clip_id, audio, a.system_id, a.prompt_text, *pad(a.ratings_mi), *pad(a.ratings_ta)])


def aggregate_targets(annotations: Iterable[ClipAnnotation]) -> list[MosTarget]:
    targets = [
        MosTarget(
            clip_id=a.clip_id,
            mi=float(np.mean(a.ratings_mi)),
            ta=float(np.mean(a.ratings_ta)),
        )
        for a in annotations
    ]
    return sorted(targets, key=lambda t: t.clip_id)


def _system_rng(seed: int, system_id: str, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(system_id.encode("utf-8")), salt])


def _by_system(annotations: Iterable[ClipAnnotation]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = defaultdict(list)
    for a in annotations:
        groups[a.system_id].append(a.clip_id)
    return {s: sorted(ids) for s, ids in sorted(groups.items())}


def make_folds(
    annotations: Sequence[ClipAnnotation],
    n_folds: int = 5,
    val_fraction: float = 0.15,
    seed: int = 42,
) -> list[FoldSplit]:
    """Stratified k-fold split.

    Per system the clips are shuffled with a seed derived from ``(seed,
    system_id)`` and dealt round-robin into test buckets. The dealing offset
    carries over between systems so bucket totals stay within one clip of
    each other. Validation ids are carved per system from what is left.
    """
    if n_folds < 2:
        raise StratificationError(f"n_folds must be >= 2, got {n_folds}")
    if not 0.0 <= val_fraction < 1.0:
        raise StratificationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    groups = _by_system(annotations)
    small = {s: len(ids) for s, ids in groups.items() if len(ids) < n_folds}
    if small:
        raise StratificationError(
            f"systems with fewer than n_folds={n_folds} clips: {small}"
        )

    test: list[list[str]] = [[] for _ in range(n_folds)]
    val: list[list[str]] = [[] for _ in range(n_folds)]
    train: list[list[str]] = [[] for _ in range(n_folds)]
    offset = 0
    for system, ids in groups.items():
        rng = _system_rng(seed, system)
        order = [ids[i] for i in rng.permutation(len(ids))]
        buckets: list[list[str]] = [[] for _ in range(n_folds)]
        for k, cid in enumerate(order):
            buckets[(k + offset) % n_folds].append(cid)
        offset = (offset + len(order)) % n_folds
        for f in range(n_folds):
            test[f].extend(buckets[f])
            held = set(buckets[f])
            rest = [cid for cid in order if cid not in held]
            n_val = int(round(val_fraction * len(rest)))
            val[f].extend(rest[:n_val])
            train[f].extend(rest[n_val:])

    return [
        FoldSplit(
            fold_index=f,
            train_ids=tuple(sorted(train[f])),
            val_ids=tuple(sorted(val[f])),
            test_ids=tuple(sorted(test[f])),
            seed=seed,
        )
        for f in range(n_folds)
    ]


def _priority_order(
    train_ids: Sequence[str], system_of: dict[str, str], seed: int
) -> list[str]:
    """Global pick order whose every prefix is proportionally stratified.

    Each step takes the next clip from the system with the largest deficit
    ``(k + 1) * share_s - taken_s``. The order does not depend on the
    requested size, so prefixes nest.
    """
    groups: dict[str, list[str]] = defaultdict(list)
    for cid in sorted(train_ids):
        groups[system_of[cid]].append(cid)
    systems = sorted(groups)
    queues = {}
    for s in systems:
        ids = groups[s]
        rng = _system_rng(seed, s, salt=1)
        queues[s] = [ids[i] for i in rng.permutation(len(ids))]
    total = len(train_ids)
    share = np.array([len(groups[s]) / total for s in systems])
    taken = np.zeros(len(systems))
    order = []
    for k in range(total):
        deficit = (k + 1) * share - taken
        deficit[taken >= share * total - 0.5] = -np.inf  # exhausted systems
        j = int(np.argmax(deficit))
        order.append(queues[systems[j]][int(taken[j])])
        taken[j] += 1
    return order


def subsample_train(
    fold: FoldSplit,
    n: int,
    seed: int,
    system_of: dict[str, str],
) -> FoldSplit:
    """Keep ``n`` training clips, proportionally stratified by system.

    Samples for different ``n`` under the same seed are nested.
    """
    if n < 0 or n > len(fold.train_ids):
        raise SubsampleSizeError(
            f"requested {n} training clips but fold {fold.fold_index} has {len(fold.train_ids)}"
        )
    if n == len(fold.train_ids):
        return fold
    order = _priority_order(fold.train_ids, system_of, seed)
    return FoldSplit(
        fold_index=fold.fold_index,
        train_ids=tuple(sorted(order[:n])),
        val_ids=fold.val_ids,
        test_ids=fold.test_ids,
        seed=fold.seed,
    )


def system_map(annotations: Iterable[ClipAnnotation]) -> dict[str, str]:
    return {a.clip_id: a.system_id for a in annotations}


def save_folds(folds: Sequence[FoldSplit], path: str | Path) -> None:
    Path(path).write_text(json.dumps([f.to_dict() for f in folds], indent=1), encoding="utf-8")


def load_folds(path: str | Path) -> list[FoldSplit]:
    return [FoldSplit.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def folds_fingerprint(folds: Sequence[FoldSplit]) -> str:
    """Stable digest of the test partition, used to check report comparability."""
    payload = json.dumps([[f.fold_index, list(f.test_ids)] for f in folds]).encode("utf-8")
    return f"{zlib.crc32(payload):08x}"
