import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from masr.annotations import DetectionRecord, DetectorSource, mine  # noqa: E402
from masr.data import SynthSpec, build_dataset, generate_corpus  # noqa: E402


def random_corpus(rng, n_images=60, n_categories=3, xi=0.8, beta=5, n_sources=2, labels_per_source=5):
    """Random detections with scores landing exactly on ``xi`` and duplicate
    detections mixed in, so both filter boundaries get exercised."""
    sources = [
        DetectorSource(f"src{s}", [f"s{s}_l{j}" for j in range(labels_per_source)]) for s in range(n_sources)
    ]
    categories = {f"im{i:04d}": f"cat{int(rng.integers(n_categories))}" for i in range(n_images)}
    pool = np.array([0.0, xi, xi, 1.0, 0.5, 0.95, 0.81, 0.3])
    records = []
    for image in categories:
        for src in sources:
            dets = []
            for label in src.labels:
                roll = rng.random()
                if roll < 0.35:
                    continue
                score = float(rng.choice(pool)) if roll < 0.6 else float(rng.uniform(0, 1))
                dets.append((label, score))
                if rng.random() < 0.1:
                    dets.append((label, float(rng.uniform(0, 1))))
            records.append(DetectionRecord(image, src.source_id, tuple(dets)))
    return sources, records, categories


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def synth_split(spec, seed, xi=0.8, beta=20):
    """Mine a synthetic corpus and return ``(train, test)`` datasets."""
    corpus = generate_corpus(spec, seed)
    result = mine(corpus.records, corpus.sources, corpus.categories, xi, beta)
    names = tuple(sorted(set(corpus.categories.values())))
    split = []
    for ids in (corpus.train_ids, corpus.test_ids):
        if not ids:
            split.append(None)
            continue
        feats = {i: corpus.features[i] for i in ids}
        split.append(build_dataset(result.annotations, feats, xi, names, result.vocabulary.labels))
    return tuple(split)


def gain_spec():
    return SynthSpec.signature(5, 12, 16, feature_noise=1.0, feature_separation=0.0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module and module.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in module.VERDICTS:
            terminalreporter.write_line(line)
