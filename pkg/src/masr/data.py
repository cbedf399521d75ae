"""Samples, datasets and the seeded synthetic corpus generator.

A dataset joins mined annotations with precomputed features by image id.
Feature files are tab-separated with a header row::

    image_id  category  f0  f1 ...
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import DetectionRecord, DetectorSource, binarize, dump_sources, write_detections
from .errors import ConfigError, ParseError, SchemaError


@dataclass
class Sample:
    image_id: str
    feature: np.ndarray
    category: int
    scores: np.ndarray
    ahat: np.ndarray


@dataclass
class Dataset:
    image_ids: list
    X: np.ndarray
    y: np.ndarray
    A: np.ndarray
    Ahat: np.ndarray
    category_names: tuple
    attribute_labels: tuple = ()

    def __post_init__(self):
        n = len(self.image_ids)
        if not (self.X.shape[0] == self.y.shape[0] == self.A.shape[0] == self.Ahat.shape[0] == n):
            raise SchemaError("dataset arrays disagree on the number of samples")
        if self.A.shape != self.Ahat.shape:
            raise SchemaError("scores and binary labels differ in shape")
        if n and (self.y.min() < 0 or self.y.max() >= len(self.category_names)):
            raise SchemaError("category index outside the category list")

    def __len__(self):
        return len(self.image_ids)

    def __getitem__(self, i):
        return Sample(self.image_ids[i], self.X[i], int(self.y[i]), self.A[i], self.Ahat[i])

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def m(self):
        return self.A.shape[1]

    @property
    def K(self):
        return len(self.category_names)

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            [self.image_ids[i] for i in index],
            self.X[index],
            self.y[index],
            self.A[index],
            self.Ahat[index],
            self.category_names,
            self.attribute_labels,
        )


def build_dataset(annotations, features, xi=0.8, category_names=None, attribute_labels=()):
    """Join annotations with ``features`` ({image_id: (category, vector)}).

    Only images present in ``features`` are kept, in feature-file order.
    Binary attribute labels are ``scores > xi``.
    """
    by_id = {a.image_id: a for a in annotations}
    ids = list(features)
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise SchemaError(f"no annotation for image {missing[0]!r} ({len(missing)} missing)")
    if not ids:
        raise SchemaError("empty dataset")
    if category_names is None:
        category_names = tuple(sorted({features[i][0] for i in ids}))
    cat_index = {c: k for k, c in enumerate(category_names)}
    y = []
    for i in ids:
        cat = features[i][0]
        if cat != by_id[i].category:
            raise SchemaError(f"image {i!r}: feature category {cat!r} != annotation category {by_id[i].category!r}")
        if cat not in cat_index:
            raise SchemaError(f"image {i!r}: unknown category {cat!r}")
        y.append(cat_index[cat])
    X = np.stack([features[i][1] for i in ids])
    A = np.stack([by_id[i].scores for i in ids])
    y = np.asarray(y, dtype=np.int64)
    return Dataset(ids, X, y, A, binarize(A, xi), tuple(category_names), tuple(attribute_labels))


def write_features(path, image_ids, categories, X, prefix="f"):
    X = np.asarray(X, dtype=np.float64)
    cols = "\t".join(f"{prefix}{j}" for j in range(X.shape[1]))
    lines = [f"image_id\tcategory\t{cols}\n"]
    for i, c, row in zip(image_ids, categories, X):
        lines.append("\t".join([i, c, *(repr(float(x)) for x in row)]) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_features(path):
    """Return ``{image_id: (category, vector)}`` preserving file order."""
    out = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("image_id\tcategory"):
            raise ParseError(path, 1, "missing 'image_id<TAB>category<TAB>...' header")
        width = len(header.rstrip("\n").split("\t")) - 2
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width + 2:
                raise ParseError(path, lineno, f"expected {width + 2} fields, got {len(parts)}")
            try:
                vec = np.array([float(x) for x in parts[2:]])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError(path, lineno, "non-finite feature value")
            if parts[0] in out:
                raise ParseError(path, lineno, f"duplicate image id {parts[0]!r}")
            out[parts[0]] = (parts[1], vec)
    return out


# --- synthetic corpora -----------------------------------------------------


@dataclass
class SynthSpec:
    """Planted-structure corpus description.

    ``attribute_probs[k][j]`` is the chance that attribute ``j`` is truly
    present in an image of class ``k``.  Present attributes get a detector
    score drawn from ``score_range``; absent ones are spuriously detected
    with probability ``spurious_rate`` and a score from ``spurious_range``.
    Features are ``feature_separation * class_mean + feature_noise * N(0, I)``
    with unit-norm random class means.
    """

    K: int
    m: int
    d: int
    attribute_probs: list
    images_per_class: int = 60
    test_images_per_class: int = 20
    feature_noise: float = 1.0
    feature_separation: float = 0.0
    score_range: tuple = (0.6, 1.0)
    spurious_rate: float = 0.05
    spurious_range: tuple = (0.05, 0.7)
    n_sources: int = 2

    def validate(self):
        if self.K < 2:
            raise ConfigError("synthetic corpus needs K >= 2 (the attribute regularizer is undefined for K = 1)")
        if self.m < 1 or self.d < 1:
            raise ConfigError("m and d must be positive")
        probs = np.asarray(self.attribute_probs, dtype=np.float64)
        if probs.shape != (self.K, self.m):
            raise ConfigError(f"attribute_probs must be {self.K} x {self.m}, got {probs.shape}")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ConfigError("attribute_probs must lie in [0, 1]")
        if self.images_per_class < 1 or self.test_images_per_class < 0:
            raise ConfigError("images_per_class must be positive")
        if self.feature_noise < 0 or self.feature_separation < 0:
            raise ConfigError("feature_noise and feature_separation must be non-negative")
        for name in ("score_range", "spurious_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= 1.0:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.spurious_rate <= 1.0:
            raise ConfigError("spurious_rate must lie in [0, 1]")
        if not 1 <= self.n_sources <= self.m:
            raise ConfigError("n_sources must lie in 1..m")

    @classmethod
    def from_dict(cls, data):
        try:
            spec = cls(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid synthetic spec: {exc}") from None
        spec.score_range = tuple(spec.score_range)
        spec.spurious_range = tuple(spec.spurious_range)
        spec.validate()
        return spec

    @classmethod
    def signature(cls, K, m, d, on=0.9, off=0.02, per_class=None, **kw):
        """Each class owns a disjoint block of attributes (wrapping if m < K)."""
        per_class = per_class or max(1, m // K)
        probs = np.full((K, m), off)
        for k in range(K):
            for i in range(per_class):
                probs[k, (k * per_class + i) % m] = on
        return cls(K=K, m=m, d=d, attribute_probs=probs.tolist(), **kw)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    sources: list
    records: list
    categories: dict
    train_ids: list
    test_ids: list
    features: dict  # image_id -> (category, vector)
    class_means: np.ndarray
    present: dict  # image_id -> sorted indices of truly present attributes


def generate_corpus(spec, seed):
    spec.validate()
    rng = np.random.default_rng(seed)
    probs = np.asarray(spec.attribute_probs, dtype=np.float64)
    bounds = np.linspace(0, spec.m, spec.n_sources + 1).round().astype(int)
    sources, owner = [], np.zeros(spec.m, dtype=int)
    for s in range(spec.n_sources):
        labels = [f"attr{j:03d}" for j in range(bounds[s], bounds[s + 1])]
        sources.append(DetectorSource(f"source{s}", labels))
        owner[bounds[s]:bounds[s + 1]] = s
    names = [f"class{k:02d}" for k in range(spec.K)]

    means = rng.normal(size=(spec.K, spec.d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    records, categories, features, present = [], {}, {}, {}
    train_ids, test_ids = [], []
    per_class = spec.images_per_class + spec.test_images_per_class
    for k in range(spec.K):
        for i in range(per_class):
            image_id = f"img_{k:02d}_{i:04d}"
            split = train_ids if i < spec.images_per_class else test_ids
            split.append(image_id)
            categories[image_id] = names[k]
            truth = rng.random(spec.m) < probs[k]
            spurious = (~truth) & (rng.random(spec.m) < spec.spurious_rate)
            scores = np.zeros(spec.m)
            scores[truth] = rng.uniform(*spec.score_range, size=int(truth.sum()))
            scores[spurious] = rng.uniform(*spec.spurious_range, size=int(spurious.sum()))
            present[image_id] = np.flatnonzero(truth).tolist()
            for s, src in enumerate(sources):
                dets = tuple((f"attr{j:03d}", float(scores[j])) for j in np.flatnonzero((owner == s) & (scores > 0)))
                records.append(DetectionRecord(image_id, src.source_id, dets, names[k]))
            feat = spec.feature_separation * means[k] + spec.feature_noise * rng.normal(size=spec.d)
            features[image_id] = (names[k], feat)
    return SynthCorpus(spec, sources, records, categories, train_ids, test_ids, features, means, present)


def write_corpus(corpus, out_dir):
    """Write the corpus in the miner's input formats plus the planted truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(corpus.records, out / "detections.jsonl")
    dump_sources(corpus.sources, out / "sources.json")
    (out / "categories.tsv").write_text(
        "".join(f"{i}\t{c}\n" for i, c in corpus.categories.items()), encoding="utf-8"
    )
    for name, ids in (("features_train.tsv", corpus.train_ids), ("features_test.tsv", corpus.test_ids)):
        write_features(out / name, ids, [corpus.features[i][0] for i in ids], [corpus.features[i][1] for i in ids])
    planted = {
        "spec": {**corpus.spec.__dict__, "score_range": list(corpus.spec.score_range),
                 "spurious_range": list(corpus.spec.spurious_range)},
        "class_means": corpus.class_means.tolist(),
        "present": corpus.present,
    }
    (out / "planted.json").write_text(json.dumps(planted, sort_keys=True) + "\n", encoding="utf-8")
    return out
