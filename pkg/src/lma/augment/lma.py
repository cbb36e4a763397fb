"""Probabilistic composition of local-manifold sampling with handcrafted augmentation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..data.records import ImageRecord
from ..embedding import EncoderSpec
from ..generators import ConditionBank, GeneratorBackend, LatentPrior, sample_view
from ..rng import RngStream
from .hca import HcaConfig, apply_hca

MODES = ("lma", "mix", "off")


@dataclass
class LmaPolicy:
    """How often, and how, generated images enter the two training views.

    ``lma``: each view independently swaps its base image for a generated
    one with probability ``alpha``.  ``mix``: one coin per instance; on
    heads a single generated image becomes the shared base of both views
    (``mix_shared_base=False`` flips one coin per view but still shares the
    one generated image).  ``off``: plain handcrafted views.
    """

    alpha: float = 0.3
    mode: str = "lma"
    backend: GeneratorBackend | None = None
    prior: LatentPrior | None = None
    bank: ConditionBank | None = None
    mix_shared_base: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.mode == "off" else self.alpha


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    source_flags: tuple[bool, bool]
    trace: dict | None = None


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(arr).tobytes()).hexdigest()


def make_view_pair(x_i: ImageRecord, policy: LmaPolicy, cfg: HcaConfig, embedder: EncoderSpec | None,
                   rng: RngStream, trace: bool = False) -> ViewPair:
    """Build the two training views of ``x_i``.

    Coins, generator draws and each view's handcrafted parameters come from
    separate substreams of ``rng``, so the handcrafted part is unaffected
    by whether (or how often) the generator fired.
    """
    coin_rng = rng.child("lma-coin")
    alpha = policy.effective_alpha
    bases = [x_i.pixels, x_i.pixels]
    flags = [False, False]
    generated: list[np.ndarray | None] = [None, None]

    def draw(tag) -> np.ndarray:
        if policy.backend is None:
            raise ValueError("LMA fired but the policy has no backend")
        return sample_view(policy.backend, x_i, policy.prior, embedder, rng.child("lma-sample", tag), policy.bank)

    if policy.mode == "lma":
        coins = coin_rng.uniform(size=2)
        for v in (0, 1):
            if coins[v] < alpha:
                generated[v] = bases[v] = draw(v)
                flags[v] = True
    elif policy.mode == "mix":
        coins = coin_rng.uniform(size=1 if policy.mix_shared_base else 2)
        heads = [coins[0] < alpha] * 2 if policy.mix_shared_base else [c < alpha for c in coins]
        if any(heads):
            shared = draw("shared")
            for v in (0, 1):
                if heads[v]:
                    generated[v] = bases[v] = shared
                    flags[v] = True

    traces = [{} if trace else None, {} if trace else None]
    views = [apply_hca(bases[v], cfg, rng.child("hca", v), traces[v]) for v in (0, 1)]
    record = None
    if trace:
        record = {"coins": flags, "views": []}
        for v in (0, 1):
            entry = dict(traces[v])
            entry["hca_input"] = _digest(bases[v])
            entry["lma_output"] = None if generated[v] is None else _digest(generated[v])
            record["views"].append(entry)
    return ViewPair(views[0], views[1], (flags[0], flags[1]), record)
