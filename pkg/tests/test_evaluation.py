import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lma.data import build_handle, make_synthetic_manifold
from lma.embedding import EmbeddingMatrix, build_encoder
from lma.evaluation import (LARS, EvaluationError, InvarianceReport, LinearProbeConfig, avg_pairwise_cosine,
                            evaluate_shifted, fit_linear_probe, frechet_distance, frechet_from_moments,
                            invariance_report, mahalanobis_invariance, topk_accuracy, train_linear_probe)
from lma.rng import RngStream


def emb(values, ids=None):
    values = np.asarray(values, dtype=np.float64)
    return EmbeddingMatrix(values, list(ids) if ids is not None else list(range(len(values))))


# ---------------------------------------------------------------- cosine

def brute_cosine(x):
    tot, n = 0.0, 0
    for a in range(len(x)):
        for b in range(a + 1, len(x)):
            tot += float(np.dot(x[a], x[b]) / (np.linalg.norm(x[a]) * np.linalg.norm(x[b])))
            n += 1
    return tot / n


def test_cosine_trivial_groups():
    v = np.array([[1.0, 2.0, 3.0]] * 4 + [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = avg_pairwise_cosine(emb(v), {"same": [0, 1, 2, 3], "orth": [4, 5]})
    assert out["per_group"]["same"] == pytest.approx(1.0, abs=1e-12)
    assert out["per_group"]["orth"] == 0.0


def test_cosine_matches_double_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(25, 8))
    groups = [list(range(5 * g, 5 * g + 5)) for g in range(5)]
    out = avg_pairwise_cosine(emb(x), groups)
    for g, ids in enumerate(groups):
        assert abs(out["per_group"][g] - brute_cosine(x[ids])) < 1e-9
    assert abs(out["overall"] - np.mean([brute_cosine(x[ids]) for ids in groups])) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(seed, scale):
    x = np.random.default_rng(seed).normal(size=(12, 4))
    groups = [[0, 1, 2], [3, 4, 5, 6], [7, 8, 9, 10, 11]]
    a = avg_pairwise_cosine(emb(x), groups)["overall"]
    b = avg_pairwise_cosine(emb(x * scale), groups)["overall"]
    assert abs(a - b) < 1e-9


def test_cosine_singleton_group():
    with pytest.raises(EvaluationError):
        avg_pairwise_cosine(emb(np.eye(3)), [[0, 1], [2]])


# ---------------------------------------------------------------- Mahalanobis

def test_mahalanobis_three_points_hand_computed():
    x = np.array([[1.0, 2.0], [3.0, 1.0], [0.0, -1.0]])
    # sample covariance by hand, then the regulariser 1e-6 * trace / d
    mu = x.mean(axis=0)
    c = sum(np.outer(r - mu, r - mu) for r in x) / 2
    c = c + 1e-6 * (c[0, 0] + c[1, 1]) / 2 * np.eye(2)
    det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    inv = np.array([[c[1, 1], -c[0, 1]], [-c[1, 0], c[0, 0]]]) / det
    groups = {"ab": [0, 1], "c": [2]}
    expect = {}
    for key, ids in groups.items():
        gm = x[ids].mean(axis=0)
        expect[key] = np.mean([math.sqrt((x[i] - gm) @ inv @ (x[i] - gm)) for i in ids])
    out = mahalanobis_invariance(emb(x), groups)
    for key in groups:
        assert abs(out["per_group"][key] - expect[key]) < 1e-9
    assert out["per_group"]["c"] == 0.0


def test_mahalanobis_five_groups_eight_dims():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 8)) @ rng.normal(size=(8, 8))
    groups = [list(range(8 * g, 8 * g + 8)) for g in range(5)]
    cov = np.cov(x, rowvar=False)
    cov = cov + 1e-6 * np.trace(cov) / 8 * np.eye(8)
    inv = np.linalg.inv(cov)
    want = []
    for ids in groups:
        gm = x[ids].mean(axis=0)
        want.append(np.mean([math.sqrt((x[i] - gm) @ inv @ (x[i] - gm)) for i in ids]))
    out = mahalanobis_invariance(emb(x), groups)
    assert np.allclose([out["per_group"][g] for g in range(5)], want, rtol=0, atol=1e-9)
    assert abs(out["overall"] - np.mean(want)) < 1e-9


def test_mahalanobis_identical_members_and_identity_covariance():
    x = np.array([[1.0, 1.0]] * 3 + [[0.0, 2.0], [2.0, 0.0]])
    out = mahalanobis_invariance(emb(x), [[0, 1, 2], [3, 4]], covariance=np.eye(2))
    assert out["per_group"][0] == 0.0
    assert out["per_group"][1] == pytest.approx(math.sqrt(2), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mahalanobis_affine_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 4))
    a = rng.normal(size=(4, 4)) + 3 * np.eye(4)
    groups = [list(range(0, 10)), list(range(10, 20)), list(range(20, 30))]
    base = mahalanobis_invariance(emb(x), groups, reg=0)["overall"]
    moved = mahalanobis_invariance(emb(x @ a.T + rng.normal(size=4)), groups, reg=0)["overall"]
    assert abs(base - moved) < 1e-6


def test_mahalanobis_singular():
    x = np.zeros((5, 3))
    with pytest.raises(EvaluationError, match="singular"):
        mahalanobis_invariance(emb(x), [[0, 1], [2, 3, 4]])


def test_invariance_report_records():
    rng = np.random.default_rng(2)
    m = emb(rng.normal(size=(12, 3)))
    rep = invariance_report({"hue": (m, [[0, 1, 2, 3], [4, 5, 6, 7]]), "rotation": (m, [[8, 9, 10, 11]])},
                            encoder_id="enc")
    assert rep.group_counts == {"hue": 2, "rotation": 1} and rep.group_sizes["hue"] == [4, 4]
    recs = rep.records("cfg")
    assert len(recs) == 4 and all(r["config_hash"] == "cfg" and r["encoder_id"] == "enc" for r in recs)
    with pytest.raises(EvaluationError):
        InvarianceReport({"x": 1.5}, {"x": 0.0}, {}, {})
    with pytest.raises(EvaluationError):
        InvarianceReport({"x": 0.5}, {"x": -1.0}, {}, {})


# ---------------------------------------------------------------- Frechet

def test_frechet_identical_sets():
    x = np.random.default_rng(3).normal(size=(500, 6))
    assert frechet_distance(x, x) < 1e-6


def test_frechet_one_dimensional_closed_form():
    for mu_a, s_a, mu_b, s_b in [(0.0, 1.0, 1.0, 2.0), (3.5, 0.25, -1.25, 4.0), (2.0, 3.0, 2.0, 3.0)]:
        assert frechet_from_moments(mu_a, s_a**2, mu_b, s_b**2) == (mu_a - mu_b) ** 2 + (s_a - s_b) ** 2
    rng = np.random.default_rng(4)
    a, b = rng.normal(1.0, 2.0, size=(1000, 1)), rng.normal(-0.5, 0.7, size=(700, 1))
    closed = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2
    assert frechet_distance(a, b) == pytest.approx(closed, rel=1e-12)


def _gauss_closed_form(mu_a, ca, mu_b, cb):
    from scipy.linalg import sqrtm

    s = sqrtm(ca @ cb).real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca + cb - 2 * s))


def test_frechet_sampled_gaussians_four_dims():
    rng = np.random.default_rng(5)
    la, lb = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    ca, cb = la @ la.T + 0.5 * np.eye(4), lb @ lb.T + 0.5 * np.eye(4)
    mu_a, mu_b = rng.normal(size=4), rng.normal(size=4) + 1.0
    exact = _gauss_closed_form(mu_a, ca, mu_b, cb)
    n = 100_000
    a = rng.multivariate_normal(mu_a, ca, size=n)
    b = rng.multivariate_normal(mu_b, cb, size=n)
    assert abs(frechet_distance(a, b) - exact) / exact < 0.02
    # moments-only path agrees with scipy's general square root
    assert frechet_from_moments(mu_a, ca, mu_b, cb) == pytest.approx(exact, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_frechet_symmetric_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(40, 3)) * 2 + 1
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0 and abs(ab - ba) < 1e-9 * max(1.0, ab)


def test_frechet_zero_iff_moments_match():
    x = np.random.default_rng(6).normal(size=(200, 3))
    # same first two moments, different samples: an orthogonal reflection about the mean
    mu = x.mean(axis=0)
    y = 2 * mu - x
    assert frechet_distance(x, y) < 1e-9
    assert frechet_distance(x, x + 0.1) > 1e-3


def test_frechet_errors():
    with pytest.raises(EvaluationError, match="dimension"):
        frechet_distance(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(EvaluationError):
        frechet_distance(np.zeros((1, 2)), np.zeros((5, 2)))


# ---------------------------------------------------------------- probe

def test_lars_step_matches_formula():
    torch.manual_seed(0)
    w = torch.nn.Parameter(torch.randn(3, 4))
    b = torch.nn.Parameter(torch.randn(3))
    opt = LARS([w, b], lr=0.5, weight_decay=0.1, momentum=0.9, trust_coefficient=0.02)
    w0, b0 = w.detach().clone(), b.detach().clone()
    gw, gb = torch.randn(3, 4), torch.randn(3)
    w.grad, b.grad = gw.clone(), gb.clone()
    opt.step()
    dw = gw + 0.1 * w0
    trust = 0.02 * w0.norm() / dw.norm()
    assert torch.allclose(w.detach(), w0 - 0.5 * trust * dw, atol=1e-7)
    # biases skip adaptation and decay
    assert torch.allclose(b.detach(), b0 - 0.5 * gb, atol=1e-7)


def test_separable_toy_gets_full_accuracy():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(400, 5))
    y = (x @ np.array([1.0, -2.0, 0.5, 0.0, 1.0]) > 0).astype(int)
    margin = np.abs(x @ np.array([1.0, -2.0, 0.5, 0.0, 1.0])) > 0.3
    x, y = x[margin], y[margin]
    probe = fit_linear_probe(x[:250], y[:250], x, y, 2, LinearProbeConfig(epochs=60, batch_size=64, base_lr=1.0))
    assert probe.top1 == 100.0 and probe.top5 == 100.0


def test_topk_definition():
    logits = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.1], [0.3, 0.3, 0.4]])
    labels = np.array([1, 2, 0])
    assert topk_accuracy(logits, labels, 1) == pytest.approx(100 / 3)
    assert topk_accuracy(logits, labels, 2) == pytest.approx(200 / 3)
    assert topk_accuracy(logits, labels, 5) == 100.0


@pytest.fixture(scope="module")
def probe_setup():
    ds = make_synthetic_manifold(10, 100, {"rotation"}, 16, seed=5, holdout_fraction=0.5)
    enc = build_encoder("oracle-linear", 64, 16, normalize_output=False, seed=1)
    probe = train_linear_probe(enc, ds, LinearProbeConfig(epochs=40))
    return ds, enc, probe


def test_probe_freeze_and_topk(probe_setup):
    ds, enc, probe = probe_setup
    assert probe.backbone_hash == enc.param_hash()
    assert probe.top1 <= probe.top5
    assert probe.top1 > 50


def test_probe_rejects_unlabeled():
    px = np.zeros((4, 8, 8, 3), dtype=np.float32)
    ds = build_handle("u", 8, 2, [("train", dict(count=4, pixels=px)), ("val", dict(count=4, pixels=px))])
    with pytest.raises(EvaluationError, match="unlabeled"):
        train_linear_probe(build_encoder("oracle-linear", 4, 8), ds)


def _relabel(ds, labels):
    store = ds.stores["val"]
    return build_handle("shifted", ds.resolution, ds.num_classes,
                        [("val", dict(count=store.count, pixels=store.pixels, labels=labels))])


def test_shifted_equal_to_val_reproduces_probe(probe_setup):
    ds, enc, probe = probe_setup
    assert evaluate_shifted(enc, probe, ds) == probe.top1


def test_shifted_label_permutation_is_chance(probe_setup):
    ds, enc, probe = probe_setup
    labels = ds.labels(ds.ids("val"))
    perm = RngStream("perm", 0).permutation(labels)
    acc = evaluate_shifted(enc, probe, _relabel(ds, perm))
    n = len(labels)
    assert abs(acc - 10.0) < 3 * 100 * math.sqrt(0.1 * 0.9 / n)


def test_shifted_label_space_errors(probe_setup):
    ds, enc, probe = probe_setup
    n = ds.splits["val"]
    with pytest.raises(EvaluationError, match="no labels"):
        evaluate_shifted(enc, probe, _relabel(ds, np.full(n, 50)))
    with pytest.raises(EvaluationError, match="outside"):
        evaluate_shifted(enc, probe, _relabel(ds, np.arange(n) % 12))
