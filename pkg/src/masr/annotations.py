"""Mining scene-attribute annotations from object-detector outputs.

Pipeline: merge the per-source detections of every image into one score
vector over the union vocabulary, zero scores not strictly above ``xi``,
then, per scene category, zero attributes found in fewer than ``beta``
images.  Scores are kept dense; 0.0 means "not detected".
"""

import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CollisionError,
    ConfigError,
    IngestionError,
    ParseError,
    ReportError,
    SchemaError,
)

DEFAULT_XI = 0.8
DEFAULT_BETA = 20
COLLISION_POLICIES = ("error", "max")

VOCAB_FILE = "vocabulary.tsv"
ANNOTATION_FILE = "annotations.tsv"


class EmptyCategoryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DetectorSource:
    source_id: str
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        dups = [label for label, n in Counter(self.labels).items() if n > 1]
        if dups:
            raise ConfigError(f"source {self.source_id!r} lists label {dups[0]!r} more than once")


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    source_id: str
    detections: tuple  # of (label, score)
    category: str = None


@dataclass(frozen=True)
class AttributeVocabulary:
    labels: tuple
    origins: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "origins", tuple(self.origins))
        if len(self.labels) != len(self.origins):
            raise SchemaError("vocabulary labels and origins differ in length")
        if len(set(self.labels)) != len(self.labels):
            raise SchemaError("vocabulary labels must be unique")

    @property
    def m(self):
        return len(self.labels)

    def index(self, label):
        return self.labels.index(label)


@dataclass
class AttributeAnnotation:
    image_id: str
    category: str
    scores: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, AttributeAnnotation):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.category == other.category
            and self.scores.shape == other.scores.shape
            and np.array_equal(self.scores, other.scores)
        )


@dataclass
class CategoryAttributeProfile:
    category: str
    n_images: int
    count_nonzero: np.ndarray
    min_score: np.ndarray
    avg_score: np.ndarray
    max_score: np.ndarray
    retained: np.ndarray

    @property
    def retained_indices(self):
        return tuple(int(j) for j in np.flatnonzero(self.retained))


def _check_xi(xi):
    if not (isinstance(xi, (int, float)) and 0.0 <= xi < 1.0):
        raise ConfigError(f"score threshold xi must lie in [0, 1), got {xi!r}")


def _check_beta(beta):
    if isinstance(beta, bool) or not isinstance(beta, (int, np.integer)) or beta < 0:
        raise ConfigError(f"frequency threshold beta must be a non-negative integer, got {beta!r}")


# --- merging ---------------------------------------------------------------


def merge_predictions(records, sources, collision_policy="error"):
    """Union the detector outputs of every image into one score vector.

    Returns ``(vocabulary, {image_id: scores})``.  The vocabulary is the
    concatenation of the source label sets in declaration order.  Under the
    ``max`` policy a label shared by several sources keeps its first origin
    and the largest score.  Vectors are not renormalised.
    """
    if collision_policy not in COLLISION_POLICIES:
        raise ConfigError(f"collision_policy must be one of {COLLISION_POLICIES}, got {collision_policy!r}")
    source_ids = [s.source_id for s in sources]
    if len(set(source_ids)) != len(source_ids):
        raise ConfigError("source ids must be unique")

    labels, origins, owners = [], [], {}
    for src in sources:
        for label in src.labels:
            if label in owners:
                if collision_policy == "error":
                    raise CollisionError(label, [owners[label], src.source_id])
                continue
            owners[label] = src.source_id
            labels.append(label)
            origins.append(src.source_id)
    vocab = AttributeVocabulary(labels, origins)
    index = {label: j for j, label in enumerate(labels)}
    by_id = {s.source_id: s for s in sources}
    label_sets = {s.source_id: set(s.labels) for s in sources}

    vectors = {}
    for rec in records:
        if rec.source_id not in by_id:
            raise IngestionError(f"image {rec.image_id!r}: unknown source {rec.source_id!r}")
        vec = vectors.get(rec.image_id)
        if vec is None:
            vec = vectors[rec.image_id] = np.zeros(vocab.m)
        for label, score in rec.detections:
            if label not in label_sets[rec.source_id]:
                raise IngestionError(
                    f"image {rec.image_id!r}: label {label!r} is not in source {rec.source_id!r}"
                )
            score = float(score)
            if not 0.0 <= score <= 1.0:
                raise IngestionError(f"image {rec.image_id!r}: score {score!r} for {label!r} outside [0, 1]")
            j = index[label]
            # duplicates within a source and collisions across sources both keep the max
            if score > vec[j]:
                vec[j] = score
    return vocab, {k: vectors[k] for k in sorted(vectors)}


# --- filtering -------------------------------------------------------------


def filter_by_score(scores, xi=DEFAULT_XI):
    """Keep entries strictly greater than ``xi``; zero the rest."""
    _check_xi(xi)
    scores = np.asarray(scores, dtype=np.float64)
    return np.where(scores > xi, scores, 0.0)


def binarize(scores, xi=DEFAULT_XI):
    """0/1 float vector marking entries strictly greater than ``xi``."""
    _check_xi(xi)
    return (np.asarray(scores, dtype=np.float64) > xi).astype(np.float64)


def _score_stats(matrix):
    present = matrix > 0
    counts = present.sum(axis=0).astype(np.int64)
    m = matrix.shape[1]
    lo = np.zeros(m)
    avg = np.zeros(m)
    hi = np.zeros(m)
    for j in np.flatnonzero(counts):
        vals = matrix[present[:, j], j]
        lo[j] = vals.min()
        avg[j] = math.fsum(vals) / vals.size
        hi[j] = vals.max()
    return counts, lo, avg, hi


def filter_by_frequency(annotations, beta=DEFAULT_BETA, m=None, category=""):
    """Frequency-filter the (already score-filtered) annotations of one category.

    An attribute is retained when it is non-zero in at least ``beta`` images.
    Returns ``(profile, filtered_annotations)``; the inputs are not mutated.
    """
    _check_beta(beta)
    annotations = sorted(annotations, key=lambda a: a.image_id)
    if not annotations:
        if m is None:
            raise ConfigError("empty category needs an explicit attribute count m")
        warnings.warn("frequency filter called on an empty category", EmptyCategoryWarning, stacklevel=2)
        counts = np.zeros(m, dtype=np.int64)
        zeros = np.zeros(m)
        profile = CategoryAttributeProfile(
            category, 0, counts, zeros, zeros.copy(), zeros.copy(), counts >= beta
        )
        return profile, []
    categories = {a.category for a in annotations}
    if len(categories) != 1:
        raise ConfigError(f"annotations span several categories: {sorted(categories)}")
    matrix = np.stack([a.scores for a in annotations])
    counts, lo, avg, hi = _score_stats(matrix)
    retained = counts >= beta
    profile = CategoryAttributeProfile(
        annotations[0].category, len(annotations), counts, lo, avg, hi, retained
    )
    filtered = [
        AttributeAnnotation(a.image_id, a.category, np.where(retained, a.scores, 0.0))
        for a in annotations
    ]
    return profile, filtered


def group_by_category(annotations):
    groups = defaultdict(list)
    for a in annotations:
        groups[a.category].append(a)
    return {c: sorted(groups[c], key=lambda a: a.image_id) for c in sorted(groups)}


@dataclass
class MiningResult:
    vocabulary: AttributeVocabulary
    raw: list
    score_filtered: list
    annotations: list
    profiles: dict = field(default_factory=dict)


def mine(records, sources, categories=None, xi=DEFAULT_XI, beta=DEFAULT_BETA, collision_policy="error"):
    """Run merge, score filter and frequency filter over a whole corpus.

    ``categories`` maps image id to scene category; records carrying their
    own ``category`` field fill in any image missing from it.
    """
    _check_xi(xi)
    _check_beta(beta)
    records = list(records)
    vocab, vectors = merge_predictions(records, sources, collision_policy)
    if not vectors:
        raise ReportError("empty corpus: no detection records")
    cats = {}
    for rec in records:
        if rec.category is not None:
            prev = cats.setdefault(rec.image_id, rec.category)
            if prev != rec.category:
                raise IngestionError(f"image {rec.image_id!r} has conflicting categories {prev!r} and {rec.category!r}")
    if categories:
        cats.update(categories)
    missing = [i for i in vectors if i not in cats]
    if missing:
        raise IngestionError(f"no scene category for image {missing[0]!r} ({len(missing)} images missing)")

    raw = [AttributeAnnotation(i, cats[i], v) for i, v in vectors.items()]
    scored = [AttributeAnnotation(a.image_id, a.category, filter_by_score(a.scores, xi)) for a in raw]
    final, profiles = [], {}
    for cat, group in group_by_category(scored).items():
        profile, filtered = filter_by_frequency(group, beta)
        profiles[cat] = profile
        final.extend(filtered)
    final.sort(key=lambda a: a.image_id)
    return MiningResult(vocab, raw, scored, final, profiles)


# --- statistics ------------------------------------------------------------


@dataclass
class CorpusStatistics:
    n_images: int
    histogram: dict  # nonzero attribute count -> number of images
    mean_attributes: float
    attribute_min: np.ndarray
    attribute_avg: np.ndarray
    attribute_max: np.ndarray
    attribute_count: np.ndarray
    categories: dict  # category -> (n_att, removed_by_score, removed_by_frequency, used)


def _distinct(annotations):
    if not annotations:
        return set()
    return set(np.flatnonzero(np.any(np.stack([a.scores for a in annotations]) > 0, axis=0)).tolist())


def compute_statistics(annotations, raw=None, score_filtered=None):
    """Corpus report: attributes-per-image histogram, per-attribute score
    range, and the per-category (#Att, removed by score, removed by
    frequency, #Used) quadruple.

    ``raw`` and ``score_filtered`` are the earlier pipeline stages; when
    omitted they default to ``annotations`` and nothing counts as removed.
    """
    annotations = sorted(annotations, key=lambda a: a.image_id)
    if not annotations:
        raise ReportError("empty corpus")
    raw = annotations if raw is None else raw
    score_filtered = annotations if score_filtered is None else score_filtered

    matrix = np.stack([a.scores for a in annotations])
    per_image = (matrix > 0).sum(axis=1)
    histogram = {}
    for c in per_image.tolist():
        histogram[c] = histogram.get(c, 0) + 1
    counts, lo, avg, hi = _score_stats(matrix)

    staged = [group_by_category(s) for s in (raw, score_filtered, annotations)]
    table = {}
    for cat in staged[2]:
        seen = _distinct(staged[0].get(cat, []))
        after_score = _distinct(staged[1].get(cat, []))
        used = _distinct(staged[2][cat])
        table[cat] = (len(seen), len(seen - after_score), len(after_score - used), len(used))
    return CorpusStatistics(
        n_images=len(annotations),
        histogram=dict(sorted(histogram.items())),
        mean_attributes=math.fsum(per_image.tolist()) / len(annotations),
        attribute_min=lo,
        attribute_avg=avg,
        attribute_max=hi,
        attribute_count=counts,
        categories=table,
    )


def format_statistics(stats, vocabulary):
    lines = [f"images: {stats.n_images}", f"mean attributes per image: {stats.mean_attributes:.3f}", ""]
    lines.append("attributes-per-image histogram")
    for k, v in stats.histogram.items():
        lines.append(f"  {k:4d}  {v}")
    lines += ["", f"{'category':<28} {'#Att':>6} {'#Score':>7} {'#Freq':>6} {'#Used':>6}"]
    for cat, (n_att, rm3, rm4, used) in stats.categories.items():
        lines.append(f"{cat:<28} {n_att:>6} {rm3:>7} {rm4:>6} {used:>6}")
    lines += ["", f"{'attribute':<28} {'count':>6} {'min':>7} {'avg':>7} {'max':>7}"]
    order = sorted(range(vocabulary.m), key=lambda j: (-stats.attribute_count[j], j))
    for j in order:
        if stats.attribute_count[j] == 0:
            continue
        lines.append(
            f"{vocabulary.labels[j]:<28} {stats.attribute_count[j]:>6} "
            f"{stats.attribute_min[j]:>7.3f} {stats.attribute_avg[j]:>7.3f} {stats.attribute_max[j]:>7.3f}"
        )
    return "\n".join(lines) + "\n"


def statistics_rows(stats, vocabulary):
    """Machine-readable ``key<TAB>value`` rows for the stats report."""
    rows = [("images", stats.n_images), ("mean_attributes", repr(stats.mean_attributes))]
    rows += [(f"histogram/{k}", v) for k, v in stats.histogram.items()]
    for cat, quad in stats.categories.items():
        for name, val in zip(("att", "removed_score", "removed_frequency", "used"), quad):
            rows.append((f"category/{cat}/{name}", val))
    for j, label in enumerate(vocabulary.labels):
        if stats.attribute_count[j]:
            rows.append((f"attribute/{label}/count", int(stats.attribute_count[j])))
            rows.append((f"attribute/{label}/min", repr(float(stats.attribute_min[j]))))
            rows.append((f"attribute/{label}/avg", repr(float(stats.attribute_avg[j]))))
            rows.append((f"attribute/{label}/max", repr(float(stats.attribute_max[j]))))
    return "".join(f"{k}\t{v}\n" for k, v in rows)


# --- file formats ----------------------------------------------------------


def _check_field(value, what):
    if not value or any(ch in value for ch in "\t\n\r"):
        raise SchemaError(f"{what} {value!r} must be non-empty and free of tabs/newlines")


def emit_annotations(annotations, vocabulary, out_dir):
    """Write ``vocabulary.tsv`` and ``annotations.tsv`` under ``out_dir``.

    Scores are written with ``repr`` so that loading is bit-exact.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_lines = []
    for j, (label, origin) in enumerate(zip(vocabulary.labels, vocabulary.origins)):
        _check_field(label, "label")
        _check_field(origin, "origin")
        vocab_lines.append(f"{j}\t{label}\t{origin}\n")
    ann_lines = []
    for a in annotations:
        _check_field(a.image_id, "image id")
        _check_field(a.category, "category")
        if a.scores.shape != (vocabulary.m,):
            raise SchemaError(f"image {a.image_id!r}: {a.scores.shape[0]} scores for {vocabulary.m} attributes")
        if np.any(a.scores < 0) or np.any(a.scores > 1):
            raise SchemaError(f"image {a.image_id!r}: scores outside [0, 1]")
        pairs = [f"{j}:{float(a.scores[j])!r}" for j in np.flatnonzero(a.scores)]
        ann_lines.append("\t".join([a.image_id, a.category, *pairs]) + "\n")
    vocab_path = out / VOCAB_FILE
    ann_path = out / ANNOTATION_FILE
    vocab_path.write_text("".join(vocab_lines), encoding="utf-8")
    ann_path.write_text("".join(ann_lines), encoding="utf-8")
    return vocab_path, ann_path


def load_vocabulary(path):
    labels, origins = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected index<TAB>label<TAB>origin, got {len(parts)} fields")
            try:
                idx = int(parts[0])
            except ValueError:
                raise ParseError(path, lineno, f"bad index {parts[0]!r}") from None
            if idx != len(labels):
                raise SchemaError(f"{path}:{lineno}: index {idx} out of order (expected {len(labels)})")
            labels.append(parts[1])
            origins.append(parts[2])
    return AttributeVocabulary(labels, origins)


def load_annotations(in_dir):
    """Inverse of :func:`emit_annotations`; returns ``(annotations, vocabulary)``."""
    in_dir = Path(in_dir)
    vocab = load_vocabulary(in_dir / VOCAB_FILE)
    path = in_dir / ANNOTATION_FILE
    annotations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(path, lineno, "expected image_id<TAB>category[<TAB>index:score...]")
            scores = np.zeros(vocab.m)
            for pair in parts[2:]:
                idx, sep, val = pair.partition(":")
                if not sep:
                    raise ParseError(path, lineno, f"malformed pair {pair!r}")
                try:
                    j, s = int(idx), float(val)
                except ValueError:
                    raise ParseError(path, lineno, f"malformed pair {pair!r}") from None
                if not 0 <= j < vocab.m:
                    raise SchemaError(f"{path}:{lineno}: attribute index {j} outside vocabulary of size {vocab.m}")
                if not 0.0 <= s <= 1.0:
                    raise SchemaError(f"{path}:{lineno}: score {s!r} outside [0, 1]")
                scores[j] = s
            annotations.append(AttributeAnnotation(parts[0], parts[1], scores))
    return annotations, vocab


def load_sources(path):
    """Read a JSON list of ``{"source_id": ..., "labels": [...]}`` objects."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
    if not isinstance(data, list) or not data:
        raise ConfigError(f"{path}: expected a non-empty list of sources")
    try:
        return [DetectorSource(d["source_id"], d["labels"]) for d in data]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed source entry ({exc})") from None


def dump_sources(sources, path):
    data = [{"source_id": s.source_id, "labels": list(s.labels)} for s in sources]
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def read_detections(path):
    """Parse line-delimited detection records.

    One JSON object per line: ``{"image_id", "source_id", "detections":
    [{"label", "score"}, ...]}`` with an optional ``"category"``.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                dets = tuple((str(d["label"]), float(d["score"])) for d in obj["detections"])
                rec = DetectionRecord(str(obj["image_id"]), str(obj["source_id"]), dets, obj.get("category"))
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise ParseError(path, lineno, f"malformed detection record ({exc!r})") from None
            for label, score in dets:
                if not 0.0 <= score <= 1.0:
                    raise ParseError(path, lineno, f"score {score!r} for {label!r} outside [0, 1]")
            records.append(rec)
    return records


def write_detections(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"image_id": rec.image_id, "source_id": rec.source_id}
            if rec.category is not None:
                obj["category"] = rec.category
            obj["detections"] = [{"label": l, "score": s} for l, s in rec.detections]
            fh.write(json.dumps(obj) + "\n")


def read_categories(path):
    """``image_id<TAB>category`` lines."""
    cats = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, "expected image_id<TAB>category")
            cats[parts[0]] = parts[1]
    return cats
