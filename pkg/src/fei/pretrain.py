"""FEI pretraining: dual-branch embedding-inference loss, optimizer loop and ablations."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from fei import signal
from fei.errors import ConfigError, NumericalError
from fei.model import EncoderConfig, FeiModel

logger = logging.getLogger(__name__)

ABLATIONS = ("no_emb_infer", "no_mask_prompt", "no_momentum", "no_subspace", "no_mask_infer", "no_detach")

# Validation masks come from their own stream so early stopping sees the same masks every epoch.
VAL_SEED_OFFSET = 7919


@dataclass
class TrainConfig:
    alpha: float = 0.995
    beta1: float = 0.0
    beta2: float = 0.7
    lr: float = 0.0002
    batch: int = 512
    max_epochs: int = 100
    patience: int = 5
    lr_decay: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: Optional[float] = 5.0
    seed: int = 0
    masking_strategy: str = "dfm"
    ablation: list = field(default_factory=list)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.ablation = sorted(set(self.ablation))
        self.masking_strategy = self.masking_strategy.lower()
        if not 0.0 <= self.beta1 < self.beta2 < 1.0:
            raise ConfigError(f"mask ratios must satisfy 0 <= beta1 < beta2 < 1, got ({self.beta1}, {self.beta2})")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"momentum factor must satisfy 0 <= alpha < 1, got {self.alpha}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch, max_epochs and patience must all be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.masking_strategy not in signal.STRATEGIES:
            raise ConfigError(f"unknown masking strategy {self.masking_strategy!r}; expected one of {signal.STRATEGIES}")
        unknown = set(self.ablation) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}; expected a subset of {list(ABLATIONS)}")

    def has(self, flag: str) -> bool:
        return flag in self.ablation

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_total: float
    loss_target_branch: float
    loss_mask_branch: float
    lr_current: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def build_model(enc_cfg: EncoderConfig, cfg: TrainConfig) -> FeiModel:
    """Fresh model seeded from ``cfg.seed``; momentum copies start equal to the online weights."""
    torch.manual_seed(cfg.seed)
    comps = signal.mask_dim(cfg.masking_strategy, enc_cfg.length)
    return FeiModel(enc_cfg, comps, use_subspace=not cfg.has("no_subspace"))


def sample_masks(n: int, length: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([
        signal.sample_mask(cfg.masking_strategy, length, cfg.beta1, cfg.beta2, rng) for _ in range(n)
    ])


def make_targets(x: np.ndarray, masks: np.ndarray, strategy: str) -> np.ndarray:
    return signal.apply_mask(strategy, x, masks)


def branch_losses(model: FeiModel, x: torch.Tensor, x_target: torch.Tensor, masks: torch.Tensor,
                  cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-batch (target-inference, mask-inference) losses, each a mean over samples of squared L2."""
    detach = not cfg.has("no_detach")
    u = model.online(x)
    u_target = model.target(x_target, use_momentum=not cfg.has("no_momentum"))
    m = model.mask_encoder(masks)

    zero = u.new_zeros(())
    loss_t = loss_m = zero
    if not cfg.has("no_emb_infer"):
        prompt = torch.zeros_like(m) if cfg.has("no_mask_prompt") else (m.detach() if detach else m)
        u_hat = model.predictor_target(u + prompt)
        loss_t = (u_target - u_hat).pow(2).sum(dim=-1).mean()
    if not cfg.has("no_mask_infer"):
        m_hat = model.predictor_mask((u.detach() if detach else u) - u_target)
        loss_m = (m - m_hat).pow(2).sum(dim=-1).mean()
    return loss_t, loss_m


def make_optimizer(model: FeiModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for group in model.param_groups().values() for p in group]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def fei_step(model: FeiModel, optimizer: torch.optim.Optimizer, batch: np.ndarray, cfg: TrainConfig,
             rng: np.random.Generator, epoch: int = 0, step: int = 0) -> StepRecord:
    """One gradient step on ``batch`` followed by the momentum update."""
    length = batch.shape[-1]
    masks = sample_masks(len(batch), length, cfg, rng)
    x_target = make_targets(batch, masks, cfg.masking_strategy)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(batch, dtype=dtype)
    xt = torch.as_tensor(x_target, dtype=dtype)
    mt = torch.as_tensor(masks, dtype=dtype)

    model.train()
    loss_t, loss_m = branch_losses(model, x, xt, mt, cfg)
    loss = loss_t + loss_m
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss at epoch {epoch} step {step}: target branch {loss_t.item()}, mask branch {loss_m.item()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for g in optimizer.param_groups for p in g["params"]], cfg.grad_clip)
    optimizer.step()
    # the momentum copy tracks the post-step weights
    if not cfg.has("no_momentum"):
        model.momentum_step(cfg.alpha)
    return StepRecord(epoch, step, loss.item(), loss_t.item(), loss_m.item(), optimizer.param_groups[0]["lr"])


@torch.no_grad()
def validation_loss(model: FeiModel, values: np.ndarray, cfg: TrainConfig, batch: int = 512) -> float:
    """Mean FEI objective on held-out data with masks from a fixed seed."""
    rng = np.random.default_rng(cfg.seed + VAL_SEED_OFFSET)
    model.eval()
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    for start in range(0, len(values), batch):
        xb = values[start:start + batch]
        masks = sample_masks(len(xb), xb.shape[-1], cfg, rng)
        xt = make_targets(xb, masks, cfg.masking_strategy)
        loss_t, loss_m = branch_losses(
            model, torch.as_tensor(xb, dtype=dtype), torch.as_tensor(xt, dtype=dtype),
            torch.as_tensor(masks, dtype=dtype), cfg,
        )
        total += (loss_t + loss_m).item() * len(xb)
        count += len(xb)
    return total / count


@dataclass
class PretrainResult:
    model: FeiModel
    best_state: dict
    last_state: dict
    records: list
    epoch_losses: list
    val_losses: list
    best_epoch: int
    stopped_early: bool

    def best_model(self) -> FeiModel:
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.best_state)
        return m


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** epoch


def pretrain(train_values: np.ndarray, enc_cfg: EncoderConfig, cfg: TrainConfig,
             val_values: Optional[np.ndarray] = None, model: Optional[FeiModel] = None,
             on_record: Optional[Callable[[StepRecord], None]] = None) -> PretrainResult:
    """Run FEI pretraining with per-epoch lr decay and early stopping on validation loss.

    Without validation data the last epoch's weights are returned as best.
    """
    train_values = np.asarray(train_values, dtype=np.float64)
    if len(train_values) == 0:
        raise ConfigError("pretraining dataset is empty")
    if val_values is not None and len(val_values) == 0:
        raise ConfigError("validation dataset is empty")
    if model is None:
        model = build_model(enc_cfg, cfg)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=cfg.lr_decay)

    records, epoch_losses, val_losses = [], [], []
    best_val, best_epoch, best_state, bad_epochs = math.inf, -1, None, 0
    stopped_early = False
    step = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_values))
        losses = []
        for start in range(0, len(order), cfg.batch):
            batch = train_values[order[start:start + cfg.batch]]
            rec = fei_step(model, optimizer, batch, cfg, rng, epoch, step)
            records.append(rec)
            losses.append(rec.loss_total)
            if on_record is not None:
                on_record(rec)
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        scheduler.step()

        if val_values is None:
            continue
        vloss = validation_loss(model, val_values, cfg)
        val_losses.append(vloss)
        logger.info("epoch %d train %.5f val %.5f", epoch, epoch_losses[-1], vloss)
        if not math.isfinite(vloss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        if vloss < best_val:
            best_val, best_epoch, bad_epochs = vloss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped_early = True
                break

    last_state = copy.deepcopy(model.state_dict())
    if best_state is None:
        best_state, best_epoch = last_state, len(epoch_losses) - 1
    return PretrainResult(model, best_state, last_state, records, epoch_losses, val_losses, best_epoch, stopped_early)


def ablation_configs(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The full model followed by one config per single ablation flag."""
    base = copy.deepcopy(cfg)
    base.ablation = []
    runs = [("FEI", base)]
    for flag in ABLATIONS:
        c = copy.deepcopy(base)
        c.ablation = [flag]
        runs.append((flag, c))
    return runs


def describe_ablation(cfg: TrainConfig) -> dict:
    """Which terms and gradient paths the configured objective contains."""
    detach = not cfg.has("no_detach")
    return {
        "target_branch": not cfg.has("no_emb_infer"),
        "mask_branch": not cfg.has("no_mask_infer"),
        "mask_prompt": not cfg.has("no_mask_prompt"),
        "target_encoder": "online (stop-gradient)" if cfg.has("no_momentum") else "momentum",
        "subspace_projector": not cfg.has("no_subspace"),
        "detach_prompt_in_target_branch": detach,
        "detach_anchor_in_mask_branch": detach,
    }


def write_records(records: Iterable[StepRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
