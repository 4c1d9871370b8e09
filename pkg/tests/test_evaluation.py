import numpy as np
import pytest

from debias.dataset import CLASSES, SEAFLOOR, SynthSpec, generate_synthetic
from debias.evaluation import (
    EvalError,
    background_swap_eval,
    classification_report,
    confusion_matrix,
    embeddings_csv,
    make_swapped,
    pca_project,
    seafloor_silhouette,
    swap_background,
)


def test_table_supports_and_perfect_predictor():
    support = [97, 80, 84, 101, 89]
    labels = np.repeat(np.arange(5), support)
    cm = confusion_matrix(labels, labels)
    rep = classification_report(cm)
    assert rep.support == support
    assert rep.accuracy == 1.0
    assert rep.precision == rep.recall == rep.f1 == [1.0] * 5
    assert rep.flags == []


def test_degenerate_constant_predictor():
    support = [97, 80, 84, 101, 89]
    labels = np.repeat(np.arange(5), support)
    cm = confusion_matrix(np.full(len(labels), SEAFLOOR), labels)
    rep = classification_report(cm)
    assert rep.accuracy == pytest.approx(101 / 451)
    assert rep.recall[SEAFLOOR] == 1.0
    assert rep.precision[SEAFLOOR] == pytest.approx(101 / 451)
    for c in range(5):
        if c != SEAFLOOR:
            assert rep.precision[c] == rep.recall[c] == rep.f1[c] == 0.0
            assert f"precision_undefined:{CLASSES[c]}" in rep.flags


def test_confusion_counting_oracle():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 5, 300)
    true = rng.integers(0, 5, 300)
    cm = confusion_matrix(pred, true).counts
    for i in range(5):
        for j in range(5):
            assert cm[i, j] == sum(1 for p, t in zip(pred, true) if t == i and p == j)
    assert cm.sum() == 300


def test_binary_worked_example():
    # rows = truth: [[8, 2], [1, 9]]
    true = [0] * 10 + [1] * 10
    pred = [0] * 8 + [1] * 2 + [0] + [1] * 9
    cm = confusion_matrix(pred, true, n_classes=2)
    assert cm.counts.tolist() == [[8, 2], [1, 9]]
    rep = classification_report(cm)
    assert rep.precision == pytest.approx([8 / 9, 9 / 11])
    assert rep.recall == pytest.approx([0.8, 0.9])
    p, r = 8 / 9, 0.8
    assert rep.f1[0] == pytest.approx(2 * p * r / (p + r))
    assert rep.accuracy == 0.85


def test_confusion_input_errors():
    with pytest.raises(EvalError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(EvalError):
        confusion_matrix([5], [0])
    with pytest.raises(EvalError):
        classification_report(confusion_matrix([], []))


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SynthSpec(n_per_class=8, bias_strength=1.0, seed=5))


def test_swap_changes_texture_and_keeps_object(synth):
    rng = np.random.default_rng(0)
    for s in synth:
        sw = swap_background(s, rng)
        assert sw.texture_id != s.texture_id
        assert sw.label == s.label and sw.sample_id == s.sample_id
        assert np.array_equal(sw.object_mask, s.object_mask)
        assert sw.pixels.shape == s.pixels.shape


def test_texture_lookup_oracle_collapses_under_swap(synth):
    # predicts the class whose correlated texture is present: perfect on the
    # confounded data, wrong on every swapped object image
    def lookup(samples):
        return np.array([s.texture_id for s in samples])

    objects = [s for s in synth if s.label != SEAFLOOR]
    res = background_swap_eval(lookup, objects, seed=1)
    assert res.in_distribution == 1.0
    assert res.swapped == 0.0
    assert res.gap == 1.0


def test_shape_oracle_is_swap_invariant(synth):
    # classifies by IoU of the object mask with per-class reference masks
    refs = {}
    for s in synth:
        refs.setdefault(s.label, s.object_mask)

    def shape(samples):
        out = []
        for s in samples:
            best = max(refs, key=lambda c: (s.object_mask & refs[c]).sum() / max((s.object_mask | refs[c]).sum(), 1))
            out.append(SEAFLOOR if not s.object_mask.any() else best)
        return np.array(out)

    swapped = make_swapped(synth, seed=2)
    a = background_swap_eval(shape, synth, swapped=swapped)
    b = background_swap_eval(shape, synth, seed=2)
    assert a.swapped == a.in_distribution
    assert a.gap == 0.0
    assert b.swapped == a.swapped


def test_swap_is_seeded(synth):
    a = make_swapped(synth[:5], seed=3)
    b = make_swapped(synth[:5], seed=3)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_pca_identity_and_centering():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2)) * [5.0, 1.0] + [10.0, -3.0]
    res = pca_project(X, 2)
    assert np.allclose(res.coords.mean(axis=0), 0, atol=1e-10)
    assert np.allclose(np.abs(res.components), np.eye(2), atol=0.05)
    assert res.eigenvalues[0] > res.eigenvalues[1]
    # full-rank projection reconstructs the table exactly
    assert np.allclose(res.coords @ res.components + res.mean, X, atol=1e-10)


def test_pca_matches_svd_oracle():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 6)) @ rng.normal(size=(6, 6))
    res = pca_project(X, 2)
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    assert np.allclose(res.eigenvalues, s[:2] ** 2 / 49)
    for i in range(2):
        assert abs(abs(res.components[i] @ vt[i]) - 1) < 1e-9
        v = res.components[i]
        assert v[np.argmax(np.abs(v))] > 0


def test_pca_rejects_small_tables():
    with pytest.raises(EvalError):
        pca_project(np.zeros((1, 5)), 2)


def test_silhouette_direction():
    rng = np.random.default_rng(0)
    labels = np.array([SEAFLOOR] * 30 + [0] * 30)
    tight = np.vstack([rng.normal(size=(30, 4)) * 0.1, rng.normal(size=(30, 4)) * 0.1 + 3])
    loose = np.vstack([rng.normal(size=(30, 4)), rng.normal(size=(30, 4)) + 0.5])
    assert seafloor_silhouette(tight, labels) > 0.9
    assert seafloor_silhouette(tight, labels) > seafloor_silhouette(loose, labels)


def test_embeddings_csv_layout():
    text = embeddings_csv(["a", "b"], [0, 3], np.array([[1.0, 2.0], [3.0, 4.5]]))
    lines = text.splitlines()
    assert lines[0] == "sample_id,label,e_1,e_2"
    assert lines[2] == "b,seafloor,3.0,4.5"


def test_pca_reconstruction_error_matches_eigen_oracle():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(50, 8)) @ rng.normal(size=(8, 8))
    res = pca_project(X, 2)
    err = ((X - (res.coords @ res.components + res.mean)) ** 2).sum() / 49
    vals = np.linalg.eigvalsh(np.cov(X, rowvar=False))
    assert err == pytest.approx(vals[:-2].sum(), abs=1e-8)
