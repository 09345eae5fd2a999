"""Synthetic classification tasks with controllable relatedness.

Every sequence starts with CLS followed by a body of filler tokens with task
markers inserted. Task kinds:

* ``keyword`` - each class owns a set of marker tokens; the label is the class
  whose markers appear.
* ``parity``  - the label is the parity of how often the task's marker occurs.
* ``order``   - two markers ``a`` and ``b`` appear once each; the label is
  whether ``a`` comes first.
* ``clone``   - a fresh draw from a linked task's distribution.

Links carry an overlap coefficient in [0, 1]: the fraction of each class's
markers copied from the linked task (same class index). Filler tokens never
coincide with any task's markers.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .backbone import CLS, NUM_RESERVED, PAD, RESERVED_TOKENS
from .errors import ConfigError, DataError
from .rng import generator

KINDS = ("keyword", "parity", "order", "clone")
SPLITS = ("train", "dev", "test")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)

Instance = tuple  # (tokens: tuple[int, ...], label: int)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "keyword"
    num_classes: int = 2
    markers_per_class: int = 4
    size: int = 1000
    min_len: int = 6
    max_len: int = 12
    markers_per_seq: int = 1
    links: tuple = ()  # ((task name, overlap), ...)
    markers: tuple | None = None  # explicit per-class marker tuples
    fractions: tuple = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind in ("parity", "order") and self.num_classes != 2:
            raise ConfigError(f"{self.kind} tasks are binary")
        if self.num_classes < 2 or self.markers_per_class < 1 or self.size < 1:
            raise ConfigError("num_classes >= 2, markers_per_class >= 1 and size >= 1 required")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        links = tuple((str(n), float(w)) for n, w in (self.links.items() if isinstance(self.links, Mapping) else self.links))
        for n, w in links:
            if not 0.0 <= w <= 1.0:
                raise ConfigError(f"overlap to {n!r} must be in [0, 1]")
        object.__setattr__(self, "links", links)
        if self.kind == "clone" and not links:
            raise ConfigError("clone task needs a link to its source")
        if self.markers is not None:
            object.__setattr__(self, "markers", tuple(tuple(int(t) for t in c) for c in self.markers))
        object.__setattr__(self, "fractions", tuple(self.fractions))

    @property
    def marker_groups(self) -> int:
        """Number of marker groups this kind uses."""
        return {"keyword": self.num_classes, "parity": 1, "order": 2}.get(self.kind, self.num_classes)

    @property
    def group_size(self) -> int:
        return self.markers_per_class if self.kind == "keyword" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["links"] = [list(x) for x in self.links]
        d["markers"] = None if self.markers is None else [list(c) for c in self.markers]
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task spec keys: {sorted(unknown)}")
        d = dict(d)
        if "links" in d and isinstance(d["links"], list):
            d["links"] = tuple(tuple(x) for x in d["links"])
        return cls(**d)


@dataclass
class Split:
    kind: str
    instances: list

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.instances], dtype=np.int64)

    @property
    def sequences(self) -> list:
        return [s for s, _ in self.instances]


@dataclass
class TaskDataset:
    spec: TaskSpec
    markers: tuple  # resolved per-group marker tuples
    kind: str  # resolved kind (clones report their source kind)
    train: Split
    dev: Split
    test: Split

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def split(self, kind: str) -> Split:
        if kind not in SPLITS:
            raise DataError(f"unknown split {kind!r}")
        return getattr(self, kind)

    def all_markers(self) -> set:
        return {t for g in self.markers for t in g}


@dataclass
class Suite:
    tasks: list[TaskDataset]
    corpus: list
    vocab_size: int

    def __getitem__(self, name: str) -> TaskDataset:
        for t in self.tasks:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]


# ---------------------------------------------------------------------------
# marker allocation


def _resolve(specs: Sequence[TaskSpec]) -> dict[str, TaskSpec]:
    by_name: dict[str, TaskSpec] = {}
    for s in specs:
        if s.name in by_name:
            raise ConfigError(f"duplicate task name {s.name!r}")
        by_name[s.name] = s
    for s in specs:
        for n, _ in s.links:
            if n not in by_name:
                raise ConfigError(f"task {s.name!r} links to unknown task {n!r}")
    return by_name


def _source_kind(spec: TaskSpec, by_name: Mapping[str, TaskSpec]) -> TaskSpec:
    seen = set()
    while spec.kind == "clone":
        if spec.name in seen:
            raise ConfigError(f"clone cycle through {spec.name!r}")
        seen.add(spec.name)
        spec = by_name[spec.links[0][0]]
    return spec


def allocate_markers(specs: Sequence[TaskSpec], vocab_size: int, seed: int) -> dict[str, tuple]:
    by_name = _resolve(specs)
    rng = generator(seed, "markers")
    free = [t for t in rng.permutation(np.arange(NUM_RESERVED, vocab_size)).tolist()]
    taken: set[int] = set()
    for s in specs:
        if s.markers is not None:
            bad = set(t for g in s.markers for t in g) & set(RESERVED_TOKENS)
            if bad:
                raise ConfigError(f"task {s.name!r} uses reserved tokens {sorted(bad)} as markers")
            if any(t >= vocab_size for g in s.markers for t in g):
                raise ConfigError(f"task {s.name!r} has markers outside the vocabulary")
            taken.update(t for g in s.markers for t in g)
    free = [t for t in free if t not in taken]
    resolved: dict[str, tuple] = {}
    pending = list(specs)
    while pending:
        progressed = False
        for s in list(pending):
            deps = [n for n, _ in s.links]
            if any(n not in resolved for n in deps if n != s.name):
                continue
            if s.markers is not None:
                resolved[s.name] = s.markers
            elif s.kind == "clone":
                resolved[s.name] = resolved[s.links[0][0]]
            else:
                groups = []
                for g in range(s.marker_groups):
                    chosen: list[int] = []
                    for n, w in s.links:
                        src = resolved[n]
                        if g < len(src):
                            k = int(round(w * s.group_size))
                            chosen.extend(t for t in src[g][:k] if t not in chosen)
                    while len(chosen) < s.group_size:
                        if not free:
                            raise ConfigError(f"vocabulary of {vocab_size} too small for the suite's markers")
                        chosen.append(free.pop())
                    groups.append(tuple(chosen[: s.group_size]))
                resolved[s.name] = tuple(groups)
            pending.remove(s)
            progressed = True
        if not progressed:
            raise ConfigError("cyclic task links")
    return resolved


# ---------------------------------------------------------------------------
# sequence sampling


def _sample_body(kind: str, label: int, markers: tuple, spec: TaskSpec, filler: np.ndarray, rng) -> list[int]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    body = filler[rng.integers(0, len(filler), size=n)].tolist()
    if kind == "keyword":
        k = min(spec.markers_per_seq, n)
        pos = rng.choice(n, size=k, replace=False)
        group = markers[label]
        for p in pos:
            body[p] = group[int(rng.integers(len(group)))]
    elif kind == "parity":
        counts = [c for c in range(1, min(n, 4) + 1) if c % 2 == label]
        if not counts:
            counts = [2] if label == 0 else [1]
        c = int(rng.choice(counts))
        for p in rng.choice(n, size=min(c, n), replace=False):
            body[p] = markers[0][0]
    elif kind == "order":
        if n < 2:
            n = 2
            body = filler[rng.integers(0, len(filler), size=n)].tolist()
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        a, b = markers[0][0], markers[1][0]
        body[i], body[j] = (a, b) if label == 1 else (b, a)
    return [CLS] + body


def label_of(kind: str, tokens: Sequence[int], markers: tuple) -> int | None:
    """Ground-truth labelling rule, or None if the sequence is outside the task."""
    body = list(tokens[1:])
    if kind == "keyword":
        hits = [g for g, grp in enumerate(markers) if any(t in grp for t in body)]
        return hits[0] if len(hits) == 1 else None
    if kind == "parity":
        return body.count(markers[0][0]) % 2
    if kind == "order":
        a, b = markers[0][0], markers[1][0]
        if a not in body or b not in body:
            return None
        return int(body.index(a) < body.index(b))
    return None


def split(instances: Sequence[Instance], fractions: Sequence[float], seed: int = 0,
          num_classes: int | None = None) -> tuple[Split, Split, Split]:
    """Label-stratified split into train, dev and test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    labels = sorted({y for _, y in instances})
    c = num_classes or len(labels)
    rng = generator(seed, "split")
    parts: list[list] = [[], [], []]
    for y in labels:
        group = [inst for inst in instances if inst[1] == y]
        order = rng.permutation(len(group))
        n = len(group)
        n_dev = int(math.floor(n * fractions[1] + 1e-9))
        n_test = int(math.floor(n * fractions[2] + 1e-9))
        n_train = n - n_dev - n_test
        cuts = (n_train, n_train + n_dev)
        for i, idx in enumerate(order):
            part = 0 if i < cuts[0] else (1 if i < cuts[1] else 2)
            parts[part].append(group[idx])
    for kind, part in zip(SPLITS, parts):
        if len(part) < c:
            raise DataError(f"{kind} split has {len(part)} instances, fewer than {c} classes")
    out = []
    for kind, part in zip(SPLITS, parts):
        order = rng.permutation(len(part))
        out.append(Split(kind, [part[i] for i in order]))
    return tuple(out)


def generate_task(spec: TaskSpec, markers: tuple, kind: str, filler: np.ndarray, seed: int,
                  exclude: set | None = None) -> TaskDataset:
    rng = generator(seed, "task", spec.name)
    labels = np.arange(spec.size) % spec.num_classes
    labels = labels[rng.permutation(spec.size)]
    seen: set = set(exclude or ())
    instances = []
    for y in labels.tolist():
        for _ in range(1000):
            seq = tuple(_sample_body(kind, y, markers, spec, filler, rng))
            if seq not in seen:
                break
        else:
            raise DataError(f"task {spec.name!r}: could not draw {spec.size} distinct sequences")
        seen.add(seq)
        instances.append((seq, int(y)))
    train, dev, test = split(instances, spec.fractions, seed=int(rng.integers(2**31)), num_classes=spec.num_classes)
    return TaskDataset(spec, markers, kind, train, dev, test)


def bigram_corpus(n: int, vocab_size: int, seed: int, length: tuple = (8, 16), stickiness: float = 0.8,
                  tokens: Sequence[int] | None = None) -> list:
    """Sequences from a fixed random successor map: with probability
    ``stickiness`` the next token is ``succ[prev]``, otherwise uniform."""
    rng = generator(seed, "bigram")
    pool = np.array(tokens if tokens is not None else range(NUM_RESERVED, vocab_size))
    succ = dict(zip(pool.tolist(), rng.permutation(pool).tolist()))
    out = []
    for _ in range(n):
        m = int(rng.integers(length[0], length[1] + 1))
        seq = [int(rng.choice(pool))]
        for _ in range(m - 1):
            seq.append(succ[seq[-1]] if rng.random() < stickiness else int(rng.choice(pool)))
        out.append([CLS] + seq)
    return out


def generate_suite(specs: Sequence[TaskSpec], vocab_size: int, seed: int, corpus_size: int = 2000,
                   include_task_text: bool = False) -> Suite:
    """Generate every task plus a pretraining corpus.

    The corpus is bigram text over all non-reserved tokens. Task training
    sequences are appended only with ``include_task_text``; leaving them out
    keeps the pretrained backbone ignorant of the marker classes, so any
    task knowledge has to come from adapters.
    """
    by_name = _resolve(specs)
    markers = allocate_markers(specs, vocab_size, seed)
    used = {t for groups in markers.values() for g in groups for t in g}
    filler = np.array([t for t in range(NUM_RESERVED, vocab_size) if t not in used], dtype=np.int64)
    if len(filler) < 2:
        raise ConfigError("vocabulary leaves fewer than 2 filler tokens")
    for s in specs:
        if s.kind == "order" and s.min_len < 2:
            raise ConfigError(f"order task {s.name!r} needs min_len >= 2")
    datasets = []
    for s in specs:
        src = _source_kind(s, by_name)
        gen_spec = s if s.kind != "clone" else _clone_view(s, src)
        datasets.append(generate_task(gen_spec, markers[s.name], src.kind, filler, seed))
    lengths = (min(s.min_len for s in specs), max(s.max_len for s in specs))
    corpus = bigram_corpus(corpus_size, vocab_size, seed, length=lengths)
    if include_task_text:
        corpus += [list(seq) for d in datasets for seq in d.train.sequences]
    return Suite(datasets, corpus, vocab_size)


def _clone_view(clone: TaskSpec, src: TaskSpec) -> TaskSpec:
    """The clone's own name, size and fractions over the source's distribution."""
    d = src.__dict__.copy()
    d.update(name=clone.name, size=clone.size, fractions=clone.fractions, links=clone.links, kind="clone")
    return TaskSpec(**d)


# ---------------------------------------------------------------------------
# batching


def pad_sequences(seqs: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    w = max(len(s) for s in seqs) if width is None else width
    out = np.full((len(seqs), w), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def batches(split_: Split, batch_size: int, seed: int | None = None, epoch: int = 0,
            shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield padded ``(tokens, labels)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(split_)
    order = generator(seed or 0, "batches", epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        seqs = [split_.instances[i][0] for i in idx]
        yield pad_sequences(seqs), np.array([split_.instances[i][1] for i in idx], dtype=np.int64)


def num_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


# ---------------------------------------------------------------------------
# analysis helpers


def bag_of_markers(seqs: Sequence[Sequence[int]], markers: tuple) -> list[tuple]:
    """Per-sequence presence vector over a task's marker groups."""
    return [tuple(int(any(t in g for t in s)) for g in markers) for s in seqs]


def mutual_information_bits(features: Sequence, labels: Sequence[int]) -> float:
    """Plug-in estimate of I(features; labels) in bits."""
    n = len(labels)
    if n == 0:
        return 0.0
    joint = Counter(zip(features, labels))
    fx = Counter(features)
    fy = Counter(labels)
    mi = 0.0
    for (x, y), c in joint.items():
        mi += c / n * math.log2(c * n / (fx[x] * fy[y]))
    return max(mi, 0.0)


def label_histogram(split_: Split, num_classes: int) -> np.ndarray:
    return np.bincount(split_.labels, minlength=num_classes) / max(len(split_), 1)


# ---------------------------------------------------------------------------
# JSONL import/export


def export_jsonl(dataset: TaskDataset, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind in SPLITS:
        p = directory / f"{dataset.name}.{kind}.jsonl"
        with p.open("w") as fh:
            for seq, y in dataset.split(kind).instances:
                fh.write(json.dumps({"tokens": list(seq), "label": int(y)}) + "\n")
        paths.append(p)
    return paths


def import_jsonl(path: str | Path, kind: str) -> Split:
    instances = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                instances.append((tuple(int(t) for t in rec["tokens"]), int(rec["label"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
    return Split(kind, instances)


def default_suite_specs() -> list[TaskSpec]:
    """Six tasks in three size tiers: two with 4000, two with 1000, two with 200 instances."""
    return [
        TaskSpec("large_a", "keyword", num_classes=4, markers_per_class=4, markers_per_seq=3, size=4000),
        TaskSpec("large_b", "keyword", num_classes=3, markers_per_class=4, markers_per_seq=3, size=4000),
        TaskSpec("medium_a", "order", size=1000),
        TaskSpec("medium_b", "keyword", num_classes=2, markers_per_class=4, markers_per_seq=3, size=1000,
                 links=(("large_a", 0.5),)),
        TaskSpec("small_a", "clone", size=200, links=(("large_a", 1.0),)),
        TaskSpec("small_b", "parity", size=200),
    ]
