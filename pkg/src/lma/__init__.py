"""Local manifold augmentation for siamese self-supervised learning."""

from .augment import HcaConfig, LmaPolicy, ViewPair, apply_hca, make_view_pair
from .data import DatasetHandle, ImageRecord, load_dataset, make_synthetic_manifold, sample_minibatch
from .embedding import EmbeddingMatrix, EncoderSpec, build_encoder, embed_batch, load_encoder_checkpoint
from .evaluation import (LinearProbeConfig, avg_pairwise_cosine, evaluate_shifted, frechet_distance,
                         mahalanobis_invariance, train_linear_probe)
from .generators import (GeneratorBackend, LatentPrior, load_generator_checkpoint, make_traversal_perturbation,
                         restrict_prior_to_finite, sample_view)
from .neighbors import NeighborIndex, build_index, query_knn, sample_knn_view
from .rng import RngStream
from .ssl import SiameseModel, TrainConfig, cosine_lr, mocov2_step, pretrain, scaled_lr, simsiam_step

__version__ = "0.1.0"

__all__ = [
    "HcaConfig", "LmaPolicy", "ViewPair", "apply_hca", "make_view_pair",
    "DatasetHandle", "ImageRecord", "load_dataset", "make_synthetic_manifold", "sample_minibatch",
    "EmbeddingMatrix", "EncoderSpec", "build_encoder", "embed_batch", "load_encoder_checkpoint",
    "LinearProbeConfig", "avg_pairwise_cosine", "evaluate_shifted", "frechet_distance", "mahalanobis_invariance",
    "train_linear_probe",
    "GeneratorBackend", "LatentPrior", "load_generator_checkpoint", "make_traversal_perturbation",
    "restrict_prior_to_finite", "sample_view",
    "NeighborIndex", "build_index", "query_knn", "sample_knn_view",
    "RngStream",
    "SiameseModel", "TrainConfig", "cosine_lr", "mocov2_step", "pretrain", "scaled_lr", "simsiam_step",
]
