"""Multimodal samples, synthetic data and client partitioning."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MODALITIES = ("A", "B")
MISSING = "∅"


class PartitionError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MultimodalSample:
    id: int
    label: int
    x_a: np.ndarray | None = None
    x_b: np.ndarray | None = None

    def __post_init__(self):
        if self.x_a is None and self.x_b is None:
            raise ValueError(f"sample {self.id} carries no modality")

    def features(self, modality: str) -> np.ndarray | None:
        return self.x_a if modality == "A" else self.x_b

    def has(self, modality: str) -> bool:
        return self.features(modality) is not None

    @property
    def is_multimodal(self) -> bool:
        return self.x_a is not None and self.x_b is not None

    def only(self, modality: str) -> "MultimodalSample":
        if modality == "A":
            return MultimodalSample(self.id, self.label, x_a=self.x_a)
        return MultimodalSample(self.id, self.label, x_b=self.x_b)

    def __eq__(self, other):
        if not isinstance(other, MultimodalSample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and _same(self.x_a, other.x_a) and _same(self.x_b, other.x_b))

    __hash__ = None


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass
class ClientDataset:
    client_id: int
    paired: list = field(default_factory=list)
    fragmented_a: list = field(default_factory=list)
    fragmented_b: list = field(default_factory=list)
    partial_a: list = field(default_factory=list)
    partial_b: list = field(default_factory=list)

    def fragmented(self, modality: str) -> list:
        return self.fragmented_a if modality == "A" else self.fragmented_b

    def partial(self, modality: str) -> list:
        return self.partial_a if modality == "A" else self.partial_b

    def unimodal(self, modality: str, include_fragmented: bool = True) -> list:
        """Single-modality samples used to train the unimodal head."""
        out = list(self.partial(modality))
        if include_fragmented:
            out += self.fragmented(modality)
        return out

    def holds(self, modality: str) -> bool:
        return bool(self.paired or self.fragmented(modality) or self.partial(modality))

    @property
    def modalities(self) -> tuple:
        return tuple(m for m in MODALITIES if self.holds(m))

    def records(self) -> list:
        return self.paired + self.fragmented_a + self.fragmented_b + self.partial_a + self.partial_b

    def __len__(self):
        return len(self.records())

    def ids(self) -> list:
        return [s.id for s in self.records()]

    def find(self, sample_id: int, modality: str) -> MultimodalSample | None:
        for s in itertools.chain(self.paired, self.fragmented(modality), self.partial(modality)):
            if s.id == sample_id:
                return s
        return None

    def check(self) -> None:
        ids = self.ids()
        if len(ids) != len(set(ids)):
            raise IntegrityError(f"client {self.client_id} holds a sample id twice")


# -- synthetic data ----------------------------------------------------------

def _class_means(n_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    means = rng.normal(size=(n_classes, dim))
    d = min(np.linalg.norm(means[i] - means[j])
            for i, j in itertools.combinations(range(n_classes), 2))
    return means * (separation / d)


def generate_synthetic(spec) -> list[MultimodalSample]:
    """Gaussian class clusters seen through two independent noisy views.

    ``spec`` is a ``SyntheticSpec``.  Means of different classes are at least
    ``class_separation`` apart in each modality; labels are balanced.
    """
    rng = np.random.default_rng(spec.seed)
    mean_a = _class_means(spec.n_classes, spec.dim_a, spec.class_separation, rng)
    mean_b = _class_means(spec.n_classes, spec.dim_b, spec.class_separation, rng)
    labels = rng.permutation(np.arange(spec.n_samples) % spec.n_classes)
    xa = mean_a[labels] + spec.noise_std * rng.normal(size=(spec.n_samples, spec.dim_a))
    xb = mean_b[labels] + spec.noise_std * rng.normal(size=(spec.n_samples, spec.dim_b))
    return [MultimodalSample(i, int(labels[i]), xa[i], xb[i]) for i in range(spec.n_samples)]


# -- partitioning ------------------------------------------------------------

def partition(samples: Sequence[MultimodalSample], n_clients: int, paired_fraction: float,
              fragmented_fraction: float, seed, layout: str = "round_robin",
              label_skew: float | None = None) -> list[ClientDataset]:
    """Distribute samples over clients as paired, fragmented and partial data.

    ``layout="round_robin"`` spreads every kind evenly; ``layout="figure1"``
    reproduces the three-hospital picture: client 0 holds the paired data,
    client 1 the modality-A side and client 2 the modality-B side of the rest.

    ``label_skew`` (round robin only) replaces the even client cycle with a
    per-class Dirichlet(label_skew) draw, giving non-IID label mixes.
    """
    n = len(samples)
    if not (0.0 <= paired_fraction <= 1.0 and 0.0 <= fragmented_fraction <= 1.0):
        raise PartitionError("fractions must lie in [0, 1]")
    if paired_fraction + fragmented_fraction > 1.0 + 1e-12:
        raise PartitionError("paired_fraction + fragmented_fraction must not exceed 1")
    if n_clients < 1:
        raise PartitionError("need at least one client")
    if fragmented_fraction > 0 and n_clients < 2:
        raise PartitionError("fragmented data needs at least two clients")
    if any(not s.is_multimodal for s in samples):
        raise PartitionError("partition expects samples carrying both modalities")
    if layout == "figure1" and n_clients != 3:
        raise PartitionError("figure1 layout is defined for exactly 3 clients")
    if layout not in ("round_robin", "figure1"):
        raise PartitionError(f"unknown layout {layout!r}")

    rng = np.random.default_rng(seed)
    order = [samples[i] for i in rng.permutation(n)]
    n_paired = math.floor(paired_fraction * n + 1e-9)
    n_frag = math.floor(fragmented_fraction * n + 1e-9)
    paired, frag, partial = order[:n_paired], order[n_paired:n_paired + n_frag], order[n_paired + n_frag:]

    clients = [ClientDataset(i) for i in range(n_clients)]
    if layout == "figure1":
        clients[0].paired.extend(paired)
        for s in frag:
            clients[1].fragmented_a.append(s.only("A"))
            clients[2].fragmented_b.append(s.only("B"))
        for j, s in enumerate(partial):
            if j % 2 == 0:
                clients[1].partial_a.append(s.only("A"))
            else:
                clients[2].partial_b.append(s.only("B"))
    else:
        if label_skew is not None:
            if label_skew <= 0:
                raise PartitionError("label_skew must be positive")
            classes = sorted({s.label for s in samples})
            mix = {c: rng.dirichlet(np.full(n_clients, label_skew)) for c in classes}
            pick = lambda s, _: int(rng.choice(n_clients, p=mix[s.label]))
        else:
            pick = lambda s, k: k % n_clients
        cursor = 0
        for s in paired:
            clients[pick(s, cursor)].paired.append(s)
            cursor += 1
        if frag:
            pairs = [p for p in itertools.permutations(range(n_clients), 2)]
            pairs = [pairs[i] for i in rng.permutation(len(pairs))]
            for j, s in enumerate(frag):
                if label_skew is not None:
                    ca = pick(s, j)
                    cb = (ca + 1 + int(rng.integers(n_clients - 1))) % n_clients
                else:
                    ca, cb = pairs[j % len(pairs)]
                clients[ca].fragmented_a.append(s.only("A"))
                clients[cb].fragmented_b.append(s.only("B"))
        for j, s in enumerate(partial):
            m = MODALITIES[j % 2]
            clients[pick(s, cursor)].partial(m).append(s.only(m))
            cursor += 1

    for c in clients:
        if len(c) == 0:
            raise PartitionError(f"client {c.client_id} received no data ({n} samples, {n_clients} clients)")
        c.check()
    return clients


def intersect_fragmented(clients: Iterable[ClientDataset]) -> dict[int, tuple[int, int]]:
    """Id alignment of fragmented records: ``id -> (client holding A, client holding B)``.

    Plain identifier intersection; ids present on only one side are dropped.
    """
    side = {"A": {}, "B": {}}
    for c in clients:
        for m in MODALITIES:
            for s in c.fragmented(m):
                prev = side[m].get(s.id)
                if prev is not None and prev != c.client_id:
                    raise IntegrityError(f"fragmented {m} record {s.id} held by clients {prev} and {c.client_id}")
                side[m][s.id] = c.client_id
    table = {}
    for sid in sorted(side["A"].keys() & side["B"].keys()):
        ca, cb = side["A"][sid], side["B"][sid]
        if ca == cb:
            raise IntegrityError(f"sample {sid}: both fragments at client {ca}")
        table[sid] = (ca, cb)
    return table


def holdout_split(samples: Sequence[MultimodalSample], val_fraction: float, test_fraction: float,
                  seed) -> tuple[list, list, list]:
    """Label-stratified train/validation/test split.

    Split sizes are ``round(fraction * n)``; per-class quotas use largest
    remainders so each class is within one sample of its global proportion.
    """
    if val_fraction <= 0 or test_fraction <= 0 or val_fraction + test_fraction >= 1:
        raise StratificationError("fractions must be positive and sum to less than 1")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    classes = sorted(by_class)
    for c in classes:
        if len(by_class[c]) < 3:
            raise StratificationError(f"class {c} has {len(by_class[c])} samples, fewer than the 3 splits")
    counts = np.array([len(by_class[c]) for c in classes])
    n_val = _quotas(counts, val_fraction)
    n_test = _quotas(counts, test_fraction)
    train, val, test = [], [], []
    for c, nv, nt in zip(classes, n_val, n_test):
        group = by_class[c]
        group = [group[i] for i in rng.permutation(len(group))]
        val += group[:nv]
        test += group[nv:nv + nt]
        train += group[nv + nt:]
    key = lambda s: s.id
    return sorted(train, key=key), sorted(val, key=key), sorted(test, key=key)


def _quotas(counts: np.ndarray, fraction: float) -> list[int]:
    exact = counts * fraction
    base = np.floor(exact).astype(int)
    missing = int(round(fraction * counts.sum())) - base.sum()
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:max(missing, 0)]:
        base[i] += 1
    return [int(b) for b in base]


# -- text format -------------------------------------------------------------

def _fmt_vec(v) -> str:
    return MISSING if v is None else ",".join(repr(float(x)) for x in v)


def _parse_vec(text: str):
    text = text.strip()
    if text in (MISSING, ""):
        return None
    return np.array([float(t) for t in text.split(",")])


def format_sample(s: MultimodalSample) -> str:
    label = "" if s.label is None else str(s.label)
    return "\t".join([str(s.id), label, _fmt_vec(s.x_a), _fmt_vec(s.x_b)])


def write_samples(path, samples: Iterable[MultimodalSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(format_sample(s) + "\n")


def read_samples(path) -> list[MultimodalSample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        sid, label, xa, xb = parts
        try:
            out.append(MultimodalSample(int(sid), int(label) if label.strip() else None,
                                        _parse_vec(xa), _parse_vec(xb)))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
