"""Bags: synthetic generation, BAGF file ingestion, stratified k-fold splits."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mining import ceil_count
from .params_io import atomic_write_bytes, atomic_write_text

BAGF_MAGIC = b"BAGF"
BAGF_VERSION = 1
_BAGF_HEAD = struct.Struct("<4sBBHII")


class BagFileError(IOError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class SplitError(ValueError):
    pass


@dataclass
class Bag:
    id: str
    features: np.ndarray  # N x D_in
    label: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.id!r} needs at least one instance row")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class SyntheticSpec:
    n_bags: int = 200
    min_instances: int = 128
    max_instances: int = 384
    d_in: int = 64
    pos_ratio: float = 0.05
    separation: float = 2.0
    noise_ratio: float = 0.1
    positive_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.pos_ratio < 1.0:
            raise ValueError("pos_ratio must be in (0, 1)")
        if not 0.0 <= self.noise_ratio < 1.0:
            raise ValueError("noise_ratio must be in [0, 1)")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ValueError("instance count range is invalid")


class SyntheticData(NamedTuple):
    bags: list[Bag]
    # instance-level ground truth, for diagnostics only; never passed to training
    planted: dict[str, np.ndarray]


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def generate(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Rare-positive Gaussian bags.

    Background instances ~ N(0, I).  Positive bags replace ``ceil(rho*N)``
    instances with N(delta*u, I).  Both classes carry ``ceil(noise*N)``
    distractors ~ N(3*delta*w, 4I) with ``w`` orthogonal to ``u``.
    """
    rng = np.random.default_rng(seed)
    d = spec.d_in
    u = _unit(rng, d)
    w = _unit(rng, d)
    if d > 1:
        w = w - (w @ u) * u
        w /= np.linalg.norm(w)
    mu_pos = spec.separation * u
    mu_noise = 3.0 * spec.separation * w

    n_pos_bags = int(round(spec.n_bags * spec.positive_fraction))
    labels = rng.permutation(np.r_[np.ones(n_pos_bags, int), np.zeros(spec.n_bags - n_pos_bags, int)])
    width = len(str(max(spec.n_bags - 1, 1)))
    bags, planted = [], {}
    for b, y in enumerate(labels):
        n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        x = rng.standard_normal((n, d))
        order = rng.permutation(n)
        n_noise = ceil_count(spec.noise_ratio, n)
        n_pos = ceil_count(spec.pos_ratio, n) if y == 1 else 0
        n_pos = min(n_pos, n - n_noise)
        noise_idx = order[:n_noise]
        pos_idx = order[n_noise:n_noise + n_pos]
        x[noise_idx] = mu_noise + 2.0 * x[noise_idx]
        x[pos_idx] += mu_pos
        inst = np.zeros(n, dtype=np.int64)
        inst[pos_idx] = 1
        bag_id = f"bag_{b:0{width}d}"
        bags.append(Bag(bag_id, x, int(y)))
        planted[bag_id] = inst
    return SyntheticData(bags, planted)


# ---------------------------------------------------------------------------
# BAGF


def dump_bagfile(bag: Bag) -> bytes:
    if not 0 <= bag.label <= 255:
        raise ValueError("BAGF labels are single bytes")
    feats = np.ascontiguousarray(bag.features, dtype="<f4")
    n, d = feats.shape
    return _BAGF_HEAD.pack(BAGF_MAGIC, BAGF_VERSION, bag.label, 0, n, d) + feats.tobytes()


def parse_bagfile(data: bytes, bag_id: str = "") -> Bag:
    if len(data) < _BAGF_HEAD.size:
        raise BagFileError("truncated header", len(data))
    magic, version, label, reserved, n, d = _BAGF_HEAD.unpack_from(data, 0)
    if magic != BAGF_MAGIC:
        raise BagFileError(f"bad magic {magic!r}", 0)
    if version != BAGF_VERSION:
        raise BagFileError(f"unsupported version {version}", 4)
    if reserved != 0:
        raise BagFileError("reserved field is not zero", 6)
    if n == 0:
        raise BagFileError("bag declares zero instances", 8)
    if d == 0:
        raise BagFileError("bag declares zero feature columns", 12)
    need = _BAGF_HEAD.size + 4 * n * d
    if len(data) < need:
        raise BagFileError(f"truncated payload, expected {need} bytes", len(data))
    if len(data) > need:
        raise BagFileError(f"{len(data) - need} trailing bytes", need)
    vals = np.frombuffer(data, dtype="<f4", count=n * d, offset=_BAGF_HEAD.size)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise BagFileError("non-finite feature value", _BAGF_HEAD.size + 4 * int(bad[0]))
    return Bag(bag_id, vals.astype(np.float64).reshape(n, d), int(label))


def write_bagfile(path, bag: Bag) -> None:
    atomic_write_bytes(path, dump_bagfile(bag))


def load_bagfile(path, bag_id: str | None = None) -> Bag:
    path = Path(path)
    return parse_bagfile(path.read_bytes(), bag_id if bag_id is not None else path.stem)


def write_dataset(directory, bags: list[Bag], planted: dict[str, np.ndarray] | None = None) -> Path:
    """One BAGF per bag plus ``manifest.csv``; planted labels go to a separate CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bag_id", "path", "label"])
    for bag in bags:
        name = f"{bag.id}.bagf"
        write_bagfile(directory / name, bag)
        w.writerow([bag.id, name, bag.label])
    manifest = directory / "manifest.csv"
    atomic_write_text(manifest, buf.getvalue())
    if planted:
        pbuf = io.StringIO()
        pw = csv.writer(pbuf, lineterminator="\n")
        pw.writerow(["bag_id", "instance_idx", "planted_label"])
        for bag_id, lab in planted.items():
            for i, v in enumerate(lab):
                pw.writerow([bag_id, i, int(v)])
        atomic_write_text(directory / "planted.csv", pbuf.getvalue())
    return manifest


def load_dataset(manifest) -> list[Bag]:
    manifest = Path(manifest)
    bags = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            bag = load_bagfile(manifest.parent / row["path"], row["bag_id"])
            if int(row["label"]) != bag.label:
                raise BagFileError(f"manifest label {row['label']} disagrees with file label "
                                   f"{bag.label} for {row['bag_id']}", 5)
            bags.append(bag)
    return bags


def load_planted(manifest) -> dict[str, np.ndarray]:
    path = Path(manifest).parent / "planted.csv"
    if not path.exists():
        return {}
    rows: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["bag_id"], []).append(int(row["planted_label"]))
    return {k: np.asarray(v, dtype=np.int64) for k, v in rows.items()}


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    k: int
    seed: int
    train: list[list[str]] = field(default_factory=list)
    test: list[list[str]] = field(default_factory=list)

    def __iter__(self):
        return iter(zip(self.train, self.test))


def kfold(bags: list[Bag], k: int, seed: int, strict: bool = True) -> FoldSplit:
    """Stratified k-fold split.

    Each class is shuffled and dealt round-robin across folds, continuing
    the deal where the previous class stopped, so every fold's class ratio
    is within one bag of the global ratio.  ``strict`` demands at least
    ``k`` bags per class so that every test fold holds both classes.
    """
    if k < 2:
        raise SplitError("k must be at least 2")
    if k > len(bags):
        raise SplitError(f"cannot make {k} folds from {len(bags)} bags")
    by_class: dict[int, list[str]] = {}
    for bag in bags:
        by_class.setdefault(bag.label, []).append(bag.id)
    if strict:
        for label, ids in sorted(by_class.items()):
            if len(ids) < k:
                raise SplitError(f"class {label} has {len(ids)} bags, fewer than k={k}")
    rng = np.random.default_rng(seed)
    test: list[list[str]] = [[] for _ in range(k)]
    slot = 0
    for label in sorted(by_class):
        ids = by_class[label]
        for j in rng.permutation(len(ids)):
            test[slot % k].append(ids[j])
            slot += 1
    order = {bag.id: i for i, bag in enumerate(bags)}
    test = [sorted(t, key=order.__getitem__) for t in test]
    train = [[b.id for b in bags if b.id not in set(t)] for t in test]
    return FoldSplit(k, seed, train, test)
