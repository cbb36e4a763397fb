from .records import SPLITS, DatasetError, DatasetHandle, ImageRecord, SplitStore, build_handle, check_pixels
from .sampling import epoch_permutation, iterate_epoch, sample_minibatch
from .standard import EXPECTED_SPLITS, load_dataset
from .synthetic import (FACTORS, LATENT_DIM, Concept, SyntheticSpec, load_synthetic, make_synthetic_manifold,
                        render_concept, save_synthetic)

__all__ = [
    "SPLITS", "DatasetError", "DatasetHandle", "ImageRecord", "SplitStore", "build_handle", "check_pixels",
    "epoch_permutation", "iterate_epoch", "sample_minibatch", "EXPECTED_SPLITS", "load_dataset",
    "FACTORS", "LATENT_DIM", "Concept", "SyntheticSpec", "load_synthetic", "make_synthetic_manifold",
    "render_concept", "save_synthetic",
]
