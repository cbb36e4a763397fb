"""SimSiam and MoCov2 training on view pairs.

One optimisation step consumes a batch of :class:`~lma.augment.ViewPair`
objects (or the two stacked view tensors).  ``pretrain`` runs the full
sample -> augment -> step loop with a cosine schedule on the linearly
scaled learning rate.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import HcaConfig, LmaPolicy, ViewPair, make_view_pair
from .data.records import DatasetHandle
from .data.sampling import iterate_epoch
from .embedding import EncoderSpec, build_encoder, to_tensor
from .rng import RngStream

log = logging.getLogger(__name__)

METHODS = ("simsiam", "mocov2")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "simsiam"
    base_lr: float = 0.03
    batch_size: int = 256
    epochs: int = 20
    weight_decay: float = 0.005
    sgd_momentum: float = 0.9
    moco_momentum: float = 0.999
    temperature: float = 0.2
    queue_size: int = 4096
    proj_dim: int = 128
    pred_hidden: int = 32
    seed: int = 0
    strict: bool = True
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.moco_momentum <= 1.0:
            raise ValueError("moco_momentum must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def effective_lr(self) -> float:
        return scaled_lr(self.base_lr, self.batch_size)


def scaled_lr(base_lr: float, batch_size: int) -> float:
    """Linear scaling rule ``base_lr * batch_size / 256``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return base_lr * batch_size / 256


def cosine_lr(step: int, total_steps: int, effective_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    # fraction first, so step = total_steps / 2 hits cos(pi / 2) exactly
    return effective_lr * 0.5 * (1.0 + math.cos(math.pi * (step / total_steps)))


# ---------------------------------------------------------------- model

def mlp(dims: Sequence[int], last_bn: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if not last:
            layers += [nn.BatchNorm1d(dims[i + 1]), nn.ReLU(inplace=True)]
        elif last_bn:
            layers.append(nn.BatchNorm1d(dims[i + 1], affine=False))
    return nn.Sequential(*layers)


class SiameseModel(nn.Module):
    """Backbone plus projection head; SimSiam adds a predictor, MoCov2 a key encoder and queue."""

    def __init__(self, backbone: EncoderSpec, method: str = "simsiam", proj_dim: int = 128,
                 pred_hidden: int = 32, queue_size: int = 4096):
        super().__init__()
        self.spec = backbone
        self.method = method
        self.backbone = backbone.parameters
        d = backbone.output_dim
        if method == "simsiam":
            self.projector = mlp([d, proj_dim, proj_dim], last_bn=True)
            self.predictor = nn.Sequential(
                nn.Linear(proj_dim, pred_hidden, bias=False), nn.BatchNorm1d(pred_hidden), nn.ReLU(inplace=True),
                nn.Linear(pred_hidden, proj_dim),
            )
            self.key_encoder = None
        else:
            self.projector = mlp([d, proj_dim, proj_dim], last_bn=False)
            self.predictor = None
            self.key_encoder = nn.ModuleDict({
                "backbone": copy.deepcopy(self.backbone), "projector": copy.deepcopy(self.projector),
            })
            for p in self.key_encoder.parameters():
                p.requires_grad_(False)
            self.register_buffer("queue", torch.zeros(queue_size, proj_dim))
            self.register_buffer("queue_ptr", torch.zeros((), dtype=torch.long))
            self.register_buffer("queue_count", torch.zeros((), dtype=torch.long))

    def project(self, x):
        return self.projector(self.backbone(x))

    @torch.no_grad()
    def keys(self, x):
        return F.normalize(self.key_encoder["projector"](self.key_encoder["backbone"](x)), dim=1)

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    @property
    def queue_warm(self) -> bool:
        return int(self.queue_count) >= self.queue_size

    def query_parameters(self):
        return list(self.backbone.parameters()) + list(self.projector.parameters())

    def key_parameters(self):
        return list(self.key_encoder["backbone"].parameters()) + list(self.key_encoder["projector"].parameters())

    @torch.no_grad()
    def momentum_update(self, m: float) -> None:
        for pk, pq in zip(self.key_parameters(), self.query_parameters()):
            pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
        # batch-norm running statistics follow the key encoder by copy
        for name in ("backbone", "projector"):
            q_mod = self.backbone if name == "backbone" else self.projector
            for bk, bq in zip(self.key_encoder[name].buffers(), q_mod.buffers()):
                bk.copy_(bq)

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> None:
        """FIFO write into the ring buffer; batches larger than K keep their last K keys."""
        keys = keys.detach()
        K = self.queue_size
        if len(keys) > K:
            keys = keys[-K:]
        ptr = int(self.queue_ptr)
        idx = (torch.arange(len(keys)) + ptr) % K
        self.queue[idx] = keys
        self.queue_ptr.fill_((ptr + len(keys)) % K)
        self.queue_count.add_(len(keys))

    def queue_keys(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        n = min(int(self.queue_count), self.queue_size)
        if n < self.queue_size:
            return self.queue[:n].clone()
        ptr = int(self.queue_ptr)
        return torch.cat([self.queue[ptr:], self.queue[:ptr]]).clone()


def build_model(cfg: TrainConfig, backbone: EncoderSpec | None = None, resolution: int = 32) -> SiameseModel:
    if backbone is None:
        backbone = build_encoder("tiny-conv", 128, resolution, seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    return SiameseModel(backbone, cfg.method, cfg.proj_dim, cfg.pred_hidden, cfg.queue_size)


def make_optimizer(model: SiameseModel, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD; weight decay skips normalisation parameters and predictor biases."""
    decay, no_decay = [], []
    norm_params = {id(p) for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)
                   for p in m.parameters()}
    pred_biases = set()
    if model.predictor is not None:
        pred_biases = {id(p) for n, p in model.predictor.named_parameters() if n.endswith("bias")}
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (no_decay if id(p) in norm_params or id(p) in pred_biases else decay).append(p)
    return torch.optim.SGD([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.effective_lr, momentum=cfg.sgd_momentum)


# ---------------------------------------------------------------- losses

def simsiam_loss(p1, p2, z1, z2) -> torch.Tensor:
    """``-(cos(p1, sg(z2)) + cos(p2, sg(z1))) / 2``, averaged over the batch."""
    return -0.5 * (F.cosine_similarity(p1, z2.detach(), dim=1).mean()
                   + F.cosine_similarity(p2, z1.detach(), dim=1).mean())


def infonce_loss(q, k_pos, negatives, temperature: float) -> torch.Tensor:
    """Cross-entropy of the positive key against ``[k_pos, negatives]`` logits."""
    pos = (q * k_pos).sum(dim=1, keepdim=True)
    logits = torch.cat([pos, q @ negatives.T], dim=1) if len(negatives) else pos
    target = torch.zeros(len(q), dtype=torch.long)
    return F.cross_entropy(logits / temperature, target)


def _views(pairs) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], torch.Tensor):
        return pairs
    if isinstance(pairs, ViewPair):
        pairs = [pairs]
    return to_tensor([p.view1 for p in pairs]), to_tensor([p.view2 for p in pairs])


def _set_lr(opt: torch.optim.Optimizer, lr: float | None) -> None:
    if lr is not None:
        for g in opt.param_groups:
            g["lr"] = lr


def simsiam_step(model: SiameseModel, pairs, optimizer: torch.optim.Optimizer, lr: float | None = None) -> float:
    if model.predictor is None:
        raise ValueError("simsiam_step needs a model with a predictor")
    x1, x2 = _views(pairs)
    _set_lr(optimizer, lr)
    model.train()
    z1, z2 = model.project(x1), model.project(x2)
    p1, p2 = model.predictor(z1), model.predictor(z2)
    loss = simsiam_loss(p1, p2, z1, z2)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def mocov2_step(model: SiameseModel, pairs, optimizer: torch.optim.Optimizer, lr: float | None = None,
                momentum: float = 0.999, temperature: float = 0.2) -> float:
    """Query from view 1, positive key from view 2, negatives from the queue.

    Order: loss and SGD update, then the momentum update of the key
    encoder from the updated query weights, then the keys are enqueued.
    """
    if model.key_encoder is None:
        raise ValueError("mocov2_step needs a model with a key encoder and queue")
    x1, x2 = _views(pairs)
    _set_lr(optimizer, lr)
    model.train()
    q = F.normalize(model.project(x1), dim=1)
    k = model.keys(x2)
    n = min(int(model.queue_count), model.queue_size)
    negatives = model.queue[:n] if n < model.queue_size else model.queue
    loss = infonce_loss(q, k, negatives.detach(), temperature)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    model.momentum_update(momentum)
    model.enqueue(k)
    return float(loss.detach())


# ---------------------------------------------------------------- loop

@contextmanager
def deterministic(strict: bool = True):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(strict)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def state_hash(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, model: SiameseModel, optimizer, epoch: int, cfg: TrainConfig,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "lma-ssl/1",
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "epoch": epoch,
        "train_config": asdict(cfg),
        "backbone": {"architecture": model.spec.architecture, "output_dim": model.spec.output_dim,
                     "input_resolution": model.spec.input_resolution,
                     "normalize_output": model.spec.normalize_output, "options": model.spec.options},
        # augmentation streams are pure functions of (seed, epoch, id); torch RNG for completeness
        "rng": {"seed": cfg.seed, "next_epoch": epoch, "torch": torch.get_rng_state()},
        **(extra or {}),
    }, path)
    return path


def make_batch(dataset: DatasetHandle, ids: np.ndarray, policy: LmaPolicy, hca: HcaConfig,
               embedder: EncoderSpec | None, aug_root: RngStream, epoch: int) -> list[ViewPair]:
    return [make_view_pair(dataset.record(i), policy, hca, embedder, aug_root.child(epoch, int(i)))
            for i in ids]


def pretrain(dataset: DatasetHandle, policy: LmaPolicy, hca: HcaConfig, cfg: TrainConfig,
             backbone: EncoderSpec | None = None, embedder: EncoderSpec | None = None,
             split: str = "train", checkpoint_dir: str | Path | None = None,
             metrics_path: str | Path | None = None, extra_log: dict | None = None):
    """Self-supervised training with probabilistic local-manifold augmentation.

    Returns ``(model, records)`` where ``records`` is the metric log: one
    entry per step plus one ``"kind": "epoch"`` summary per epoch.
    """
    model = build_model(cfg, backbone, dataset.resolution)
    optimizer = make_optimizer(model, cfg)
    n = dataset.splits[split]
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds split size {n}")
    steps_per_epoch = n // cfg.batch_size
    total = max(1, steps_per_epoch * cfg.epochs)
    warmup = steps_per_epoch * cfg.warmup_epochs
    aug_root = RngStream("augment", cfg.seed)
    records: list[dict] = []
    sink = open(metrics_path, "a") if metrics_path else None
    base = {"alpha": policy.alpha, "mode": policy.mode, **(extra_log or {})}
    step = 0
    try:
        with deterministic(cfg.strict):
            for epoch in range(cfg.epochs):
                losses = []
                for ids in iterate_epoch(dataset, split, cfg.batch_size, cfg.seed, epoch, drop_last=True):
                    lr = cosine_lr(step, total, cfg.effective_lr)
                    if step < warmup:
                        lr = cfg.effective_lr * (step + 1) / warmup
                    pairs = make_batch(dataset, ids, policy, hca, embedder, aug_root, epoch)
                    if cfg.method == "simsiam":
                        loss = simsiam_step(model, pairs, optimizer, lr)
                    else:
                        loss = mocov2_step(model, pairs, optimizer, lr, cfg.moco_momentum, cfg.temperature)
                    if not math.isfinite(loss):
                        snap = None
                        if checkpoint_dir:
                            snap = save_checkpoint(Path(checkpoint_dir) / "diverged.pt", model, optimizer, epoch, cfg)
                        raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch} step {step}; snapshot: {snap}")
                    rec = {"kind": "step", "epoch": epoch, "step": step, "loss": loss, "lr": lr, **base}
                    if cfg.method == "mocov2":
                        rec["queue_warm"] = model.queue_warm
                    records.append(rec)
                    if sink:
                        sink.write(json.dumps(rec) + "\n")
                    losses.append(loss)
                    step += 1
                summary = {"kind": "epoch", "epoch": epoch, "step": step, "loss": float(np.mean(losses)),
                           "lr": records[-1]["lr"], **base}
                records.append(summary)
                if sink:
                    sink.write(json.dumps(summary) + "\n")
                    sink.flush()
                log.info("epoch %d loss %.4f", epoch, summary["loss"])
                if checkpoint_dir:
                    save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:03d}.pt", model, optimizer, epoch + 1, cfg,
                                    extra_log)
    finally:
        if sink:
            sink.close()
    model.eval()
    return model, records
