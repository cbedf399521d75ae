"""Scene top@k accuracy, attribute precision and embedding export."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_features
from .errors import ConfigError, ShapeError
from .model import attribute_forward, forward

REPORT_KS = (1, 2, 5)
ATTRIBUTE_THRESHOLD = 0.5


def topk_hits(logits, truths, k):
    """Boolean hit per sample; ties rank the lower class index first."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    truths = np.asarray(truths, dtype=np.int64)
    n, K = logits.shape
    if truths.shape != (n,):
        raise ShapeError(f"{truths.shape[0]} truths for {n} logit rows")
    if not 1 <= k <= K:
        raise ConfigError(f"k must lie in 1..{K}, got {k}")
    # stable sort of the negated scores keeps ascending index order among ties
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.any(ranked == truths[:, None], axis=1)


def topk_accuracy(logits, truths, k):
    hits = topk_hits(logits, truths, k)
    return float(hits.sum()) / hits.shape[0] if hits.shape[0] else 0.0


def attribute_precision(predictions, truth, threshold=ATTRIBUTE_THRESHOLD):
    """Per-attribute TP / (TP + FP); NaN where nothing was predicted positive.

    ``predictions`` are probabilities (or 0/1), positive when ``> threshold``.
    """
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if predictions.shape != truth.shape:
        raise ShapeError(f"predictions {predictions.shape} and ground truth {truth.shape} differ in shape")
    pos = predictions > threshold
    tp = np.sum(pos & (truth == 1), axis=0)
    predicted = pos.sum(axis=0)
    out = np.full(truth.shape[1], np.nan)
    defined = predicted > 0
    out[defined] = tp[defined] / predicted[defined]
    return out


def mean_precision(precisions):
    vals = [float(p) for p in precisions if not math.isnan(p)]
    return math.fsum(vals) / len(vals) if vals else float("nan")


@dataclass
class EvalReport:
    topk: dict
    per_attribute: list  # (label, precision or None)
    attribute_ap: float
    n_samples: int


def evaluate(params, dataset, mode="joint", ks=REPORT_KS):
    """Report top@k for every ``k`` in ``ks`` not exceeding K, plus attribute precision."""
    logits = forward(params, dataset.X, dataset.A, mode).logits
    topk = {k: topk_accuracy(logits, dataset.y, k) for k in ks if k <= dataset.K}
    probs = attribute_forward(dataset.X, params)
    prec = attribute_precision(probs, dataset.Ahat)
    labels = dataset.attribute_labels or tuple(f"attr{j}" for j in range(dataset.m))
    per_attr = [(label, None if math.isnan(p) else float(p)) for label, p in zip(labels, prec)]
    return EvalReport(topk, per_attr, mean_precision(prec), len(dataset))


def format_report(report):
    lines = [f"samples: {report.n_samples}", ""]
    lines += [f"top@{k:<3} {100 * acc:6.2f}%" for k, acc in report.topk.items()]
    ap = "undefined" if math.isnan(report.attribute_ap) else f"{100 * report.attribute_ap:6.2f}%"
    lines += ["", f"attribute AP: {ap}", "", f"{'attribute':<28} precision"]
    for label, p in report.per_attribute:
        lines.append(f"{label:<28} {'-' if p is None else f'{100 * p:6.2f}%'}")
    return "\n".join(lines) + "\n"


def report_rows(report):
    rows = [("n_samples", report.n_samples)]
    rows += [(f"top@{k}", repr(acc)) for k, acc in report.topk.items()]
    rows.append(("attribute_ap", repr(report.attribute_ap)))
    rows += [(f"precision/{label}", "nan" if p is None else repr(p)) for label, p in report.per_attribute]
    return "".join(f"{k}\t{v}\n" for k, v in rows)


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report), encoding="utf-8")
    (out / "report.tsv").write_text(report_rows(report), encoding="utf-8")


def embeddings(params, dataset):
    """The vectors the scene head reads: ``concat(feature, v)`` per sample."""
    fw = forward(params, dataset.X, dataset.A, "joint")
    return np.concatenate([fw.F, fw.V], axis=1)


def export_embeddings(dataset, params, path):
    H = embeddings(params, dataset)
    d = params.shape.d
    cats = [dataset.category_names[k] for k in dataset.y]
    cols = [f"f{j}" for j in range(d)] + [f"v{j}" for j in range(params.shape.m)]
    lines = ["image_id\tcategory\t" + "\t".join(cols) + "\n"]
    for i, c, row in zip(dataset.image_ids, cats, H):
        lines.append("\t".join([i, c, *(repr(float(x)) for x in row)]) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_embeddings(path):
    return read_features(path)
