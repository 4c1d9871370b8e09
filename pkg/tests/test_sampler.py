import numpy as np
import pytest

from debias.dataset import SEAFLOOR
from debias.sampler import NoNegativeAvailable, NoPositiveAvailable, SamplerError, TripletSampler


def labels_for(counts):
    return {f"c{c}_{i:03d}": c for c, n in enumerate(counts) for i in range(n)}


def test_triplet_membership():
    sampler = TripletSampler(labels_for([4, 4, 4, 6, 5]))
    rng = np.random.default_rng(0)
    ships = {sid for sid, y in sampler.labels.items() if y == 4}
    for _ in range(50):
        a, p, n = sampler.sample_triplet("c4_003", rng)
        assert a == "c4_003"
        assert p in ships - {"c4_003"}
        assert sampler.labels[n] == SEAFLOOR


def test_no_seafloor_raises():
    sampler = TripletSampler(labels_for([3, 3, 3, 0, 3]))
    with pytest.raises(NoNegativeAvailable):
        sampler.sample_triplet("c0_000", np.random.default_rng(0))


def test_singleton_class_raises():
    sampler = TripletSampler(labels_for([1, 3, 3, 3, 3]))
    with pytest.raises(NoPositiveAvailable):
        sampler.sample_triplet("c0_000", np.random.default_rng(0))


def test_seafloor_anchor_rejected():
    sampler = TripletSampler(labels_for([3, 3, 3, 3, 3]))
    with pytest.raises(SamplerError):
        sampler.sample_triplet("c3_000", np.random.default_rng(0))


def test_triplets_reproduce_with_fixed_rng():
    sampler = TripletSampler(labels_for([5, 5, 5, 5, 5]))
    anchors = sorted(sid for sid, y in sampler.labels.items() if y != SEAFLOOR)[:10]
    a = [sampler.sample_triplet(x, np.random.default_rng(42)) for x in anchors]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    seq1 = [sampler.sample_triplet(x, r1) for x in anchors]
    seq2 = [sampler.sample_triplet(x, r2) for x in anchors]
    assert seq1 == seq2
    assert a == [sampler.sample_triplet(x, np.random.default_rng(42)) for x in anchors]


def test_positive_is_uniform_over_others():
    sampler = TripletSampler(labels_for([4, 2, 2, 2, 2]))
    rng = np.random.default_rng(1)
    seen = {}
    for _ in range(3000):
        _, p, _ = sampler.sample_triplet("c0_001", rng)
        seen[p] = seen.get(p, 0) + 1
    assert set(seen) == {"c0_000", "c0_002", "c0_003"}
    assert all(abs(k / 3000 - 1 / 3) < 0.04 for k in seen.values())


def test_epoch_batch_count():
    sampler = TripletSampler(labels_for([100, 100, 100, 50, 100]))
    batches = list(sampler.triplet_epoch(16, np.random.default_rng(0)))
    assert len(batches) == 25
    assert all(len(b) == 16 for b in batches)


def test_batch_larger_than_data():
    sampler = TripletSampler(labels_for([3, 3, 3, 3, 3]))
    batches = list(sampler.triplet_epoch(100, np.random.default_rng(0)))
    assert len(batches) == 1 and len(batches[0]) == 12


def test_epoch_coverage_and_constraints():
    labels = labels_for([30, 25, 20, 40, 15])
    sampler = TripletSampler(labels)
    anchors, negs = [], []
    for b in sampler.triplet_epoch(16, np.random.default_rng(3)):
        anchors += b.anchors
        negs += b.negatives
        for a, p, n, y in zip(b.anchors, b.positives, b.negatives, b.anchor_labels):
            assert labels[p] == labels[a] == y != SEAFLOOR
            assert p != a
            assert labels[n] == SEAFLOOR
    assert sorted(anchors) == sorted(s for s, y in labels.items() if y != SEAFLOOR)
    assert len(anchors) == len(set(anchors))


def test_bad_batch_size():
    sampler = TripletSampler(labels_for([3, 3, 3, 3, 3]))
    with pytest.raises(SamplerError):
        next(sampler.triplet_epoch(0, np.random.default_rng(0)))


def test_stream_continues_across_epochs():
    sampler = TripletSampler(labels_for([3, 3, 3, 3, 3]))
    stream = sampler.stream(5, np.random.default_rng(0))
    got = [next(stream) for _ in range(7)]
    # 12 anchors per epoch in batches of 5 -> 5, 5, 2, then a fresh epoch
    assert [len(b) for b in got] == [5, 5, 2, 5, 5, 2, 5]
