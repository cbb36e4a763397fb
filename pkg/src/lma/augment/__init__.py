from .hca import HcaConfig, apply_hca, gaussian_blur, grayscale, resize, sample_crop_box
from .lma import MODES, LmaPolicy, ViewPair, make_view_pair

__all__ = ["HcaConfig", "apply_hca", "gaussian_blur", "grayscale", "resize", "sample_crop_box",
           "MODES", "LmaPolicy", "ViewPair", "make_view_pair"]
