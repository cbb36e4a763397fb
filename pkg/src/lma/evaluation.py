"""Linear probing, representation-invariance metrics and Frechet distance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data.records import DatasetHandle
from .embedding import EmbeddingMatrix, EncoderSpec, embed_array
from .ssl import cosine_lr, deterministic, scaled_lr


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- LARS

class LARS(torch.optim.Optimizer):
    """SGD with layer-wise trust ratios; 1-d parameters (biases) skip adaptation and decay."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0, momentum: float = 0.9,
                 trust_coefficient: float = 0.001):
        super().__init__(params, dict(lr=lr, weight_decay=weight_decay, momentum=momentum,
                                      trust_coefficient=trust_coefficient))

    @torch.no_grad()
    def step(self, closure=None):
        for g in self.param_groups:
            for p in g["params"]:
                if p.grad is None:
                    continue
                dp = p.grad
                if p.ndim > 1:
                    dp = dp.add(p, alpha=g["weight_decay"])
                    p_norm, u_norm = torch.norm(p), torch.norm(dp)
                    q = torch.where((p_norm > 0) & (u_norm > 0), g["trust_coefficient"] * p_norm / u_norm,
                                    torch.ones_like(p_norm))
                    dp = dp.mul(q)
                state = self.state[p]
                if "mu" not in state:
                    state["mu"] = torch.zeros_like(p)
                mu = state["mu"]
                mu.mul_(g["momentum"]).add_(dp)
                p.add_(mu, alpha=-g["lr"])


# ---------------------------------------------------------------- probe

@dataclass
class LinearProbeConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    epochs: int = 30
    trust_coefficient: float = 0.1
    standardize: bool = True
    seed: int = 0
    train_split: str = "train"
    eval_split: str = "val"

    @classmethod
    def paper(cls) -> "LinearProbeConfig":
        return cls(batch_size=4096, epochs=90, trust_coefficient=0.001)


@dataclass
class LinearProbe:
    top1: float
    top5: float
    num_classes: int
    weight: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)
    mean: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)
    backbone_hash: str = ""

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weight.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).argmax(axis=1)

    def report(self) -> dict:
        return {"top1": self.top1, "top5": self.top5}


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, logits.shape[1])
    # stable ordering so ties resolve towards lower class ids
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(100.0 * np.mean((top == labels[:, None]).any(axis=1)))


def fit_linear_probe(train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray, eval_y: np.ndarray,
                     num_classes: int, cfg: LinearProbeConfig) -> LinearProbe:
    """Train a single linear layer on fixed features with LARS and a cosine schedule."""
    mean = train_x.mean(axis=0) if cfg.standardize else np.zeros(train_x.shape[1])
    scale = train_x.std(axis=0) + 1e-6 if cfg.standardize else np.ones(train_x.shape[1])
    xs = torch.from_numpy(((train_x - mean) / scale).astype(np.float32))
    ys = torch.from_numpy(train_y.astype(np.int64))
    gen = torch.Generator().manual_seed(cfg.seed)
    layer = nn.Linear(xs.shape[1], num_classes)
    with torch.no_grad():
        layer.weight.normal_(0.0, 0.01, generator=gen)
        layer.bias.zero_()
    lr = scaled_lr(cfg.base_lr, cfg.batch_size)
    opt = LARS(layer.parameters(), lr=lr, weight_decay=cfg.weight_decay, momentum=cfg.momentum,
               trust_coefficient=cfg.trust_coefficient)
    n = len(xs)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * cfg.epochs
    step = 0
    with deterministic(True):
        for _ in range(cfg.epochs):
            perm = torch.randperm(n, generator=gen)
            for lo in range(0, n, bs):
                idx = perm[lo:lo + bs]
                for g in opt.param_groups:
                    g["lr"] = cosine_lr(step, total, lr)
                loss = F.cross_entropy(layer(xs[idx]), ys[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                step += 1
    probe = LinearProbe(0.0, 0.0, num_classes, layer.weight.detach().double().numpy(),
                        layer.bias.detach().double().numpy(), mean, scale)
    logits = probe.logits(eval_x)
    probe.top1 = topk_accuracy(logits, eval_y, 1)
    probe.top5 = topk_accuracy(logits, eval_y, 5)
    return probe


def train_linear_probe(encoder: EncoderSpec, dataset: DatasetHandle, cfg: LinearProbeConfig | None = None) -> LinearProbe:
    """Linear classifier on frozen ``encoder`` features; reports eval-split top-1/top-5 (%)."""
    cfg = cfg or LinearProbeConfig()
    for split in (cfg.train_split, cfg.eval_split):
        if not dataset.is_labeled(split):
            raise EvaluationError(f"{dataset.name} split {split!r} is missing or unlabeled")
    before = encoder.param_hash()
    tr_ids, ev_ids = dataset.ids(cfg.train_split), dataset.ids(cfg.eval_split)
    train_x = embed_array(encoder, dataset.pixels(tr_ids), normalize=False)
    eval_x = embed_array(encoder, dataset.pixels(ev_ids), normalize=False)
    probe = fit_linear_probe(train_x, dataset.labels(tr_ids), eval_x, dataset.labels(ev_ids),
                             dataset.num_classes, cfg)
    after = encoder.param_hash()
    if before != after:
        raise EvaluationError("backbone parameters changed during probing")
    probe.backbone_hash = after
    return probe


def evaluate_shifted(encoder: EncoderSpec, probe: LinearProbe, shifted: DatasetHandle, split: str = "val") -> float:
    """Top-1 (%) of the frozen encoder plus trained probe on a shifted labelled split."""
    if not shifted.is_labeled(split):
        raise EvaluationError(f"{shifted.name} split {split!r} is missing or unlabeled")
    ids = shifted.ids(split)
    labels = shifted.labels(ids)
    known = set(range(probe.num_classes))
    present = set(int(v) for v in np.unique(labels))
    if not present & known:
        raise EvaluationError("shifted dataset shares no labels with the probe")
    if present - known:
        raise EvaluationError(f"shifted labels outside the probe's label space: {sorted(present - known)[:10]}")
    feats = embed_array(encoder, shifted.pixels(ids), normalize=False)
    return topk_accuracy(probe.logits(feats), labels, 1)


# ---------------------------------------------------------------- invariance

Groups = Mapping[object, Sequence[int]] | Sequence[Sequence[int]]


def _group_items(groups: Groups):
    if isinstance(groups, Mapping):
        return list(groups.items())
    return list(enumerate(groups))


def _rows(reps: EmbeddingMatrix, ids: Sequence[int]) -> np.ndarray:
    return reps.values[[reps.row_of(i) for i in ids]].astype(np.float64)


def avg_pairwise_cosine(representations: EmbeddingMatrix, groups: Groups) -> dict:
    """Mean cosine similarity over all unordered pairs within each group."""
    per_group = {}
    for key, ids in _group_items(groups):
        if len(ids) < 2:
            raise EvaluationError(f"group {key!r} has fewer than two members")
        x = _rows(representations, ids)
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0):
            raise EvaluationError(f"group {key!r} contains a zero vector")
        u = x / norms[:, None]
        s = u.sum(axis=0)
        n = len(u)
        # sum_{a<b} u_a.u_b = (|sum u|^2 - sum |u|^2) / 2
        pair_sum = (s @ s - np.einsum("ij,ij->", u, u)) / 2
        per_group[key] = float(np.clip(pair_sum / (n * (n - 1) / 2), -1.0, 1.0))
    return {"per_group": per_group, "overall": float(np.mean(list(per_group.values())))}


def regularized_covariance(values: np.ndarray, reg: float = 1e-6) -> np.ndarray:
    cov = np.atleast_2d(np.cov(values, rowvar=False))
    d = cov.shape[0]
    if reg:
        cov = cov + reg * np.trace(cov) / d * np.eye(d)
    return cov


def mahalanobis_invariance(representations: EmbeddingMatrix, groups: Groups, reg: float = 1e-6,
                           covariance: np.ndarray | None = None) -> dict:
    """Mean Mahalanobis distance of group members to their group mean.

    The covariance is estimated once from every row of ``representations``
    (plus ``reg * trace / d`` on the diagonal) unless given explicitly.
    """
    cov = regularized_covariance(representations.values.astype(np.float64), reg) if covariance is None \
        else np.asarray(covariance, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise EvaluationError("covariance is singular after regularisation") from None
    per_group = {}
    for key, ids in _group_items(groups):
        if len(ids) < 1:
            raise EvaluationError(f"group {key!r} is empty")
        x = _rows(representations, ids)
        centered = x - x.mean(axis=0)
        white = np.linalg.solve(chol, centered.T)  # L^-1 (x - mu)
        q = np.einsum("ij,ij->j", white, white)
        per_group[key] = float(np.mean(np.sqrt(np.maximum(q, 0.0))))
    return {"per_group": per_group, "overall": float(np.mean(list(per_group.values())))}


@dataclass
class InvarianceReport:
    cosine: dict[str, float]
    mahalanobis: dict[str, float]
    group_counts: dict[str, int]
    group_sizes: dict[str, list[int]]
    encoder_id: str = ""

    def __post_init__(self):
        for k, v in self.cosine.items():
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise EvaluationError(f"cosine for {k} outside [-1, 1]: {v}")
        for k, v in self.mahalanobis.items():
            if v < 0:
                raise EvaluationError(f"negative Mahalanobis distance for {k}: {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    def records(self, config_hash: str = "") -> list[dict]:
        out = []
        for metric, table in (("avg_pairwise_cosine", self.cosine), ("mahalanobis", self.mahalanobis)):
            for factor, value in table.items():
                out.append({"metric": metric, "factor": factor, "value": value,
                            "encoder_id": self.encoder_id, "config_hash": config_hash})
        return out


def invariance_report(representations_by_factor: Mapping[str, tuple[EmbeddingMatrix, Groups]],
                      encoder_id: str = "", reg: float = 1e-6) -> InvarianceReport:
    cos, maha, counts, sizes = {}, {}, {}, {}
    for factor, (reps, groups) in representations_by_factor.items():
        cos[factor] = avg_pairwise_cosine(reps, groups)["overall"]
        maha[factor] = mahalanobis_invariance(reps, groups, reg)["overall"]
        items = _group_items(groups)
        counts[factor] = len(items)
        sizes[factor] = [len(ids) for _, ids in items]
    return InvarianceReport(cos, maha, counts, sizes, encoder_id)


# ---------------------------------------------------------------- Frechet

def _as_array(feats) -> np.ndarray:
    return np.asarray(feats.values if isinstance(feats, EmbeddingMatrix) else feats, dtype=np.float64)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b, eps: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(A + B - 2 (A B)^(1/2))`` via a symmetric square root."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    diff = mu_a - mu_b
    if cov_a.shape == (1, 1):
        # scalar case in the cancellation-free form (mu_a - mu_b)^2 + (s_a - s_b)^2
        if min(cov_a[0, 0], cov_b[0, 0]) < -eps:
            raise EvaluationError("negative variance")
        s_a, s_b = math.sqrt(max(cov_a[0, 0], 0.0)), math.sqrt(max(cov_b[0, 0], 0.0))
        return float(diff[0] ** 2 + (s_a - s_b) ** 2)
    # Tr (A B)^(1/2) = Tr (A^(1/2) B A^(1/2))^(1/2), and the latter is symmetric PSD
    w, v = np.linalg.eigh((cov_a + cov_a.T) / 2)
    if w.min() < -eps * max(1.0, abs(w).max()):
        raise EvaluationError("covariance has materially negative eigenvalues")
    sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = sqrt_a @ cov_b @ sqrt_a
    lam = np.linalg.eigvalsh((inner + inner.T) / 2)
    if lam.min() < -eps * max(1.0, abs(lam).max()):
        raise EvaluationError("matrix square root of the covariance product is not real")
    lam = np.clip(lam, 0.0, None)
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(lam).sum())
    return max(value, 0.0)


def frechet_distance(feats_a, feats_b) -> float:
    a, b = _as_array(feats_a), _as_array(feats_b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise EvaluationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise EvaluationError("Frechet distance needs at least two rows per set")
    return frechet_from_moments(a.mean(axis=0), np.cov(a, rowvar=False), b.mean(axis=0), np.cov(b, rowvar=False))
