"""Independent reference computations used as test oracles.

Plain Python loops over dicts; nothing here shares code with the package.
"""

import math


def brute_force_mine(records, source_labels, categories, xi, beta):
    """Enumerate every (image, attribute) pair.

    ``source_labels`` is ``[(source_id, [labels...]), ...]`` with disjoint
    label sets.  Returns ``(final, retained)`` where ``final[image][label]``
    is the surviving score (absent = 0) and ``retained[category]`` the set
    of labels kept for it.
    """
    best = {}
    for rec in records:
        for label, score in rec.detections:
            key = (rec.image_id, label)
            best[key] = max(best.get(key, 0.0), score)
    images = sorted({rec.image_id for rec in records})
    labels = [l for _, ls in source_labels for l in ls]
    kept = {}
    for image in images:
        for label in labels:
            s = best.get((image, label), 0.0)
            if s > xi:
                kept[(image, label)] = s
    retained = {}
    for cat in sorted(set(categories[i] for i in images)):
        members = [i for i in images if categories[i] == cat]
        retained[cat] = set()
        for label in labels:
            count = 0
            for image in members:
                if (image, label) in kept:
                    count += 1
            if count >= beta:
                retained[cat].add(label)
    final = {}
    for image in images:
        final[image] = {}
        for label in labels:
            if (image, label) in kept and label in retained[categories[image]]:
                final[image][label] = kept[(image, label)]
    return final, retained


def sorted_topk_hit(row, truth, k):
    order = sorted(range(len(row)), key=lambda c: (-row[c], c))
    return truth in order[:k]


def recount_precision(pred, truth, threshold=0.5):
    """Confusion-matrix recount; None where nothing was predicted positive."""
    m = len(pred[0])
    out = []
    for j in range(m):
        tp = fp = 0
        for i in range(len(pred)):
            if pred[i][j] > threshold:
                if truth[i][j] == 1:
                    tp += 1
                else:
                    fp += 1
        out.append(None if tp + fp == 0 else tp / (tp + fp))
    return out


def eq8_mean(probs, labels, eps=1e-7):
    """Unweighted multi-label cross entropy, averaged over attributes."""
    total = 0.0
    for p, t in zip(probs, labels):
        p = min(max(p, eps), 1 - eps)
        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / len(probs)
