import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from lma.data import LATENT_DIM
from lma.embedding import EmbeddingMatrix, build_encoder, embed_batch, embed_dataset
from lma.generators import (ConditionBank, GeneratorError, KnnBackend, LatentPrior, OracleManifoldBackend,
                            TraversalBackend, build_mlp_backend, load_generator_checkpoint,
                            make_traversal_perturbation, restrict_prior_to_finite, sample_view)
from lma.neighbors import build_index, query_knn
from lma.rng import RngStream


def test_oracle_views_stay_in_orbit(tiny_manifold):
    spec = tiny_manifold.synthetic
    backend = OracleManifoldBackend(spec)
    prior = LatentPrior()
    rng = RngStream("orbit", 0)
    rec = tiny_manifold.record(13)
    for _ in range(10_000):
        z = prior.sample(rng)
        assert backend.concept_for(z, rec.orbit_id) == rec.orbit_id
    assert np.array_equal(sample_view(backend, rec, prior, rng=RngStream("v", 1)),
                          sample_view(backend, rec, prior, rng=RngStream("v", 1)))


def test_oracle_renders_match_orbit_render(tiny_manifold):
    spec = tiny_manifold.synthetic
    backend = OracleManifoldBackend(spec)
    z = np.random.default_rng(0).normal(size=LATENT_DIM)
    for c in range(len(spec.concepts)):
        assert np.array_equal(backend.generate(z, c), spec.render(c, z))


def test_oracle_corruption_rate(tiny_manifold):
    backend = OracleManifoldBackend(tiny_manifold.synthetic, corruption_rate=0.3)
    rng = RngStream("corrupt", 0)
    n = 20_000
    wrong = sum(backend.concept_for(rng.normal(size=LATENT_DIM), 2) != 2 for _ in range(n))
    assert abs(wrong / n - 0.3) < 3 * np.sqrt(0.3 * 0.7 / n)


def test_oracle_degradations_keep_pixel_range(tiny_manifold):
    backend = OracleManifoldBackend(tiny_manifold.synthetic, coverage=0.5, artifact_strength=0.8)
    rng = np.random.default_rng(0)
    for _ in range(50):
        img = backend.generate(rng.normal(size=LATENT_DIM) * 3, 1)
        assert img.min() >= 0 and img.max() <= 1
    with pytest.raises(GeneratorError):
        OracleManifoldBackend(tiny_manifold.synthetic, coverage=0.0)
    with pytest.raises(GeneratorError):
        OracleManifoldBackend(tiny_manifold.synthetic, corruption_rate=1.5)


def test_oracle_rejects_bad_inputs(tiny_manifold):
    backend = OracleManifoldBackend(tiny_manifold.synthetic)
    with pytest.raises(GeneratorError):
        backend.generate(np.zeros(3), 0)
    with pytest.raises(GeneratorError):
        backend.generate(np.zeros(LATENT_DIM), 99)


def test_prior_statistics():
    draws = np.stack([LatentPrior().sample(RngStream("prior", 0).child(i)) for i in range(2000)])
    big = RngStream("prior-bulk", 0).normal(size=(100_000, LATENT_DIM))
    for x in (draws, big):
        n = len(x)
        assert np.all(np.abs(x.mean(0)) < 3 / np.sqrt(n))
        # std of the sample std is about 1/sqrt(2n)
        assert np.all(np.abs(x.std(0) - 1) < 3 / np.sqrt(2 * n))


def test_traversal_perturbation():
    assert np.array_equal(make_traversal_perturbation(8, 0.0, RngStream("e", 0)), np.zeros(8))
    with pytest.raises(GeneratorError):
        make_traversal_perturbation(8, -0.1, RngStream("e", 0))
    rng = RngStream("eps", 3)
    eps = np.stack([make_traversal_perturbation(4, 0.2, rng) for _ in range(100_000)])
    se = 0.2 / np.sqrt(2 * len(eps))
    assert np.all(np.abs(eps.std(0) - 0.2) < 3 * se)


def test_traversal_zero_sigma_is_identity(tiny_manifold):
    base = OracleManifoldBackend(tiny_manifold.synthetic)
    backend = TraversalBackend(base, sigma=0.0)
    rec = tiny_manifold.record(3)
    out = sample_view(backend, rec, rng=RngStream("t", 0))
    assert np.array_equal(out, base.generate(rec.latent, rec.orbit_id))
    assert np.array_equal(out, rec.pixels)


def test_traversal_requires_stored_latent(tiny_manifold):
    from dataclasses import replace

    rec = replace(tiny_manifold.record(3), latent=None)
    with pytest.raises(GeneratorError, match="latent"):
        sample_view(TraversalBackend(OracleManifoldBackend(tiny_manifold.synthetic)), rec, rng=RngStream("t", 0))


def test_finite_prior_cardinality_and_uniformity(tiny_manifold):
    backend = OracleManifoldBackend(tiny_manifold.synthetic)
    rec = tiny_manifold.record(0)
    for n in (1, 7):
        prior = restrict_prior_to_finite(LATENT_DIM, n, RngStream("finite", n))
        assert prior.kind == "finite-set" and prior.size == n
        outs = [sample_view(backend, rec, prior, rng=RngStream("fv", 0).child(i)).tobytes() for i in range(10 * n)]
        assert len(set(outs)) <= n
    with pytest.raises(GeneratorError):
        restrict_prior_to_finite(LATENT_DIM, 0, RngStream("finite", 0))


def test_mlp_backend_determinism_and_dims(tmp_path):
    backend = build_mlp_backend(8, 6, 16, seed=0)
    z, h = np.random.default_rng(0).normal(size=8), np.random.default_rng(1).normal(size=6)
    a, b = backend.generate(z, h), backend.generate(z, h)
    assert np.array_equal(a, b) and a.shape == (16, 16, 3) and 0 <= a.min() and a.max() <= 1
    with pytest.raises(GeneratorError):
        backend.generate(z, np.zeros(5))
    path = backend.save(tmp_path / "g.pt")
    loaded = load_generator_checkpoint(path, "instance-conditioned")
    assert np.array_equal(loaded.generate(z, h), a)
    with pytest.raises(GeneratorError):
        loaded.generate(z, np.zeros(7))


def test_generator_checkpoint_errors(tmp_path, tiny_manifold):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"junk")
    with pytest.raises(GeneratorError, match="corrupt"):
        load_generator_checkpoint(bad, "instance-conditioned")
    with pytest.raises(GeneratorError):
        load_generator_checkpoint(bad, "knn")
    uncond = build_mlp_backend(8, 0, 16).save(tmp_path / "u.pt")
    with pytest.raises(GeneratorError):
        load_generator_checkpoint(uncond, "instance-conditioned")
    assert load_generator_checkpoint(uncond, "traversal", sigma=0.1).kind == "traversal"


def test_oracle_loads_from_manifest(tmp_path, tiny_manifold):
    from lma.data import save_synthetic

    save_synthetic(tiny_manifold, tmp_path)
    backend = load_generator_checkpoint(tmp_path, "oracle-manifold")
    z = np.zeros(LATENT_DIM)
    assert np.array_equal(backend.generate(z, 1), tiny_manifold.synthetic.render(1, z))


def test_instance_conditioned_uses_embedding_and_bank(tiny_manifold):
    embedder = build_encoder("oracle-linear", 6, 16, normalize_output=True)
    backend = build_mlp_backend(LATENT_DIM, 6, 16, seed=1)
    prior = LatentPrior()
    rec = tiny_manifold.record(5)
    a = sample_view(backend, rec, prior, embedder, RngStream("ic", 0))
    z = prior.sample(RngStream("ic", 0))
    h = embed_batch(embedder, [rec]).values[0]
    assert np.array_equal(a, backend.generate(z, h))
    bank = ConditionBank(embed_dataset(embedder, tiny_manifold, "train"))
    # the bank was embedded in one batch, so agreement is up to float rounding
    assert np.allclose(sample_view(backend, rec, prior, None, RngStream("ic", 0), bank), a, atol=1e-5)
    with pytest.raises(GeneratorError):
        sample_view(backend, rec, prior, None, RngStream("ic", 0))
    wrong = build_encoder("oracle-linear", 5, 16)
    with pytest.raises(GeneratorError, match="condition dim"):
        sample_view(backend, rec, prior, wrong, RngStream("ic", 0))


def test_knn_backend_returns_neighbour_pixels(tiny_manifold):
    emb = embed_dataset(build_encoder("oracle-linear", 8, 16), tiny_manifold, "train")
    index = build_index(emb, 4)
    backend = KnnBackend(index, tiny_manifold)
    rec = tiny_manifold.record(9)
    members = {i for i, _ in query_knn(index, 9, 4)}
    rng = RngStream("k", 0)
    for _ in range(100):
        out = sample_view(backend, rec, rng=rng)
        assert any(np.array_equal(out, tiny_manifold.record(m).pixels) for m in members)


def test_resolution_mismatch(tiny_manifold, small_manifold):
    backend = OracleManifoldBackend(tiny_manifold.synthetic)
    with pytest.raises(GeneratorError, match="resolution"):
        sample_view(backend, small_manifold.record(0), LatentPrior(), rng=RngStream("r", 0))


def test_finite_draw_frequencies_uniform():
    prior = restrict_prior_to_finite(LATENT_DIM, 50, RngStream("finite", 0))
    rng = RngStream("freq", 0)
    counts = np.bincount([prior.sample_index(rng) for _ in range(5000)], minlength=50)
    assert chisquare(counts).pvalue > 0.01
