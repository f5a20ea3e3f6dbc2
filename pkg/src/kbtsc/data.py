"""UCR/UEA-style dataset loading, normalization and few-shot splitting."""

from __future__ import annotations

import json
import math
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    EmptyDataset,
    FormatError,
    InsufficientSamples,
    MissingValueError,
    ParseError,
)

# (train size, test size, classes, length, channels) of archive datasets the
# loader is expected to reproduce.
KNOWN_SHAPES = {
    "ArrowHead": (36, 175, 3, 251, 1),
    "DodgerLoopGame": (137, 138, 2, 288, 1),
    "ECG200": (100, 100, 2, 96, 1),
    "GesturePebbleZ1": (132, 172, 4, 207, 1),
    "Lightning7": (70, 73, 7, 319, 1),
    "UMD": (36, 144, 3, 150, 1),
    "Worms": (181, 77, 5, 900, 1),
    "DiatomSizeReduction": (16, 306, 4, 345, 1),
    "DistalPhalanxTW": (400, 139, 6, 80, 1),
    "Fish": (175, 175, 7, 463, 1),
    "RacketSports": (151, 152, 4, 30, 6),
    "SelfRegulationSCP1": (268, 293, 6, 896, 4),
}


def natural_key(text: str):
    """Sort key that orders embedded integers numerically ("s:4" < "s:10")."""
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", text)]


@dataclass(frozen=True, eq=False)
class TimeSeriesSample:
    values: np.ndarray  # (m channels, w steps), read-only
    label: str
    sample_id: str

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise FormatError(f"sample {self.sample_id}: values must be a non-empty m x w matrix")
        if not np.all(np.isfinite(arr)):
            raise MissingValueError(f"sample {self.sample_id}: non-finite value")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "label", str(self.label))

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.sample_id == other.sample_id
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def __hash__(self):
        return hash((self.sample_id, self.label, self.values.shape))

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "label": self.label, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeSeriesSample":
        return cls(values=d["values"], label=d["label"], sample_id=d["sample_id"])


@dataclass(frozen=True)
class Dataset:
    name: str
    samples: tuple
    label_set: tuple
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        if len(set(self.label_set)) != len(self.label_set):
            raise FormatError("label_set contains duplicates")
        known = set(self.label_set)
        for s in self.samples:
            if s.label not in known:
                raise FormatError(f"sample {s.sample_id} has label {s.label!r} outside label_set")
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate sample_id in dataset")

    @classmethod
    def from_samples(cls, name, samples, description=""):
        return cls(name, tuple(samples), labels_in_order(samples), description)

    def __len__(self):
        return len(self.samples)

    @property
    def shape(self):
        """(n samples, channels, length) of the first sample."""
        if not self.samples:
            return (0, 0, 0)
        m, w = self.samples[0].values.shape
        return (len(self.samples), m, w)

    def by_class(self) -> dict:
        groups = {lab: [] for lab in self.label_set}
        for s in self.samples:
            groups[s.label].append(s)
        return groups

    def to_json(self) -> str:
        doc = {
            "name": self.name,
            "description": self.description,
            "label_set": list(self.label_set),
            "samples": [s.to_dict() for s in self.samples],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        samples = [TimeSeriesSample.from_dict(d) for d in doc["samples"]]
        return cls(doc["name"], tuple(samples), tuple(doc["label_set"]), doc.get("description", ""))


@dataclass(frozen=True)
class FewShotSplit:
    train: tuple
    val: tuple
    test: tuple
    k: int
    seed: int
    label_set: tuple = field(default=())

    @property
    def pool(self) -> tuple:
        """Labeled samples available to contrast retrieval (train + val)."""
        return self.train + self.val


def labels_in_order(samples: Iterable[TimeSeriesSample]) -> tuple:
    """Distinct labels in order of first appearance."""
    seen = {}
    for s in samples:
        seen.setdefault(s.label, None)
    return tuple(seen)


def _split_line(line: str) -> list[str]:
    if "\t" in line:
        return [t.strip() for t in line.split("\t")]
    if "," in line:
        return [t.strip() for t in line.split(",")]
    return line.split()


def _parse_rows(path: Path):
    """Yield (line number, label, float values) for every non-empty line."""
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = _split_line(line)
            label, rest = tokens[0], tokens[1:]
            if not rest:
                raise FormatError("row has a label but no values", lineno)
            values = []
            for tok in rest:
                try:
                    v = float(tok)
                except ValueError:
                    raise ParseError(f"non-numeric token {tok!r}", lineno) from None
                if not math.isfinite(v):
                    raise MissingValueError(f"missing or non-finite value {tok!r}", lineno)
                values.append(v)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise FormatError(f"expected {width} values, found {len(values)}", lineno)
            yield lineno, label, values


def load_ucr_tsv(path, name: str | None = None, description: str = "") -> Dataset:
    path = Path(path)
    stem = path.stem
    samples = [
        TimeSeriesSample(values=[vals], label=label, sample_id=f"{stem}:{i}")
        for i, (_, label, vals) in enumerate(_parse_rows(path))
    ]
    if not samples:
        raise EmptyDataset(f"{path}: no samples")
    return Dataset.from_samples(name or stem, samples, description)


def dump_ucr_tsv(dataset: Dataset, path) -> None:
    """Write a univariate dataset back out in the archive's tab-separated layout."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            if s.n_channels != 1:
                raise FormatError("dump_ucr_tsv only writes univariate datasets")
            fh.write("\t".join([s.label, *(repr(float(v)) for v in s.values[0])]) + "\n")


def _channel_files(directory: Path, name: str, split: str) -> list[Path]:
    pattern = re.compile(rf"^{re.escape(name)}Dimension(\d+)_{re.escape(split)}\.(tsv|csv|txt)$")
    found = []
    for p in directory.iterdir():
        m = pattern.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [p for _, p in sorted(found)]


def load_multivariate(directory, name: str, description: str = "", split: str = "TRAIN") -> Dataset:
    """Load `<name>Dimension<i>_<split>.tsv` channel files and stack them per sample."""
    directory = Path(directory)
    files = _channel_files(directory, name, split)
    if not files:
        raise EmptyDataset(f"no channel files for {name} {split} in {directory}")
    channels = [list(_parse_rows(p)) for p in files]
    n = len(channels[0])
    if n == 0:
        raise EmptyDataset(f"{files[0]}: no samples")
    for p, rows in zip(files, channels):
        if len(rows) != n:
            raise AlignmentError(f"{p.name} has {len(rows)} samples, expected {n}")
    samples = []
    for i in range(n):
        labels = [rows[i][1] for rows in channels]
        if len(set(labels)) != 1:
            raise AlignmentError(f"sample {i}: labels differ across channel files: {labels}")
        widths = {len(rows[i][2]) for rows in channels}
        if len(widths) != 1:
            raise AlignmentError(f"sample {i}: channel lengths differ: {sorted(widths)}")
        samples.append(
            TimeSeriesSample(
                values=[rows[i][2] for rows in channels],
                label=labels[0],
                sample_id=f"{name}_{split}:{i}",
            )
        )
    return Dataset.from_samples(name, samples, description)


def check_known_shape(dataset: Dataset, split: str = "TRAIN") -> None:
    """Raise FormatError if `dataset` disagrees with the archive's published shape."""
    if dataset.name not in KNOWN_SHAPES:
        return
    n_train, n_test, n_cls, length, channels = KNOWN_SHAPES[dataset.name]
    n_expected = n_train if split.upper() == "TRAIN" else n_test
    n, m, w = dataset.shape
    got = (n, len(dataset.label_set), w, m)
    want = (n_expected, n_cls, length, channels)
    if split.upper() != "TRAIN":
        # the test split need not contain every class
        got, want = (n, w, m), (n_expected, length, channels)
    if got != want:
        raise FormatError(f"{dataset.name} {split}: shape {got} != published {want}")


def few_shot_split(dataset: Dataset, k: int, seed: int, test: Dataset | Sequence | None = None) -> FewShotSplit:
    """Draw 2k samples per class from `dataset` (the archive train portion).

    The first k of each class' seeded permutation go to train, the next k to
    val. `test` (the archive test portion) is passed through untouched.
    """
    if k < 1:
        raise ValueError("k must be positive")
    groups = dataset.by_class()
    train, val = [], []
    for label in dataset.label_set:
        members = sorted(groups[label], key=lambda s: natural_key(s.sample_id))
        if len(members) < 2 * k:
            raise InsufficientSamples(label, len(members), 2 * k)
        # one independent stream per class, so adding a class never perturbs another
        rng = random.Random(f"{seed}:{label}")
        chosen = rng.sample(members, 2 * k)
        train.extend(chosen[:k])
        val.extend(chosen[k:])
    if test is None:
        test_samples = ()
    elif isinstance(test, Dataset):
        test_samples = test.samples
    else:
        test_samples = tuple(test)
    used = {s.sample_id for s in train} | {s.sample_id for s in val}
    clash = used & {s.sample_id for s in test_samples}
    if clash:
        raise AlignmentError(f"test split shares sample ids with train: {sorted(clash)[:3]}")
    return FewShotSplit(tuple(train), tuple(val), tuple(test_samples), k, seed, dataset.label_set)


def z_normalize(sample: TimeSeriesSample) -> TimeSeriesSample:
    """Per-channel zero mean / unit population std; constant channels become zeros."""
    x = sample.values
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    out = np.where(constant, 0.0, (x - mean) / np.where(constant, 1.0, std))
    return TimeSeriesSample(values=out, label=sample.label, sample_id=sample.sample_id)


def group_by_label(samples: Iterable[TimeSeriesSample]) -> dict:
    groups = defaultdict(list)
    for s in samples:
        groups[s.label].append(s)
    return dict(groups)
