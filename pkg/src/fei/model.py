"""Encoders, subspace projector, predictors and the momentum-tracked FEI model."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from fei.errors import ConfigError, InvalidInputError
from fei.maskenc import MaskEncoder

ARCHITECTURES = ("conv-resnet-1d", "mlp")

_ACTIVATIONS = {
    "relu": nn.ReLU,
    "gelu": nn.GELU,
    "softplus": nn.Softplus,
    "tanh": nn.Tanh,
    "silu": nn.SiLU,
    "identity": nn.Identity,
}


def make_activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}") from None


@dataclass
class EncoderConfig:
    architecture: str = "conv-resnet-1d"
    d: int = 64
    in_channels: int = 1
    length: int = 128
    widths: list[int] = field(default_factory=lambda: [16, 32])
    kernels: list[int] = field(default_factory=lambda: [7, 5, 3])
    strides: list[int] = field(default_factory=lambda: [1, 2, 2])
    mlp_hidden: int = 128
    activation: str = "relu"
    batch_norm: bool = True
    predictor_activation: str = "gelu"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"embedding dim d must be even and >= 2, got {self.d}")
        if self.architecture == "conv-resnet-1d":
            stages = len(self.widths) + 1
            if len(self.kernels) != stages or len(self.strides) != stages:
                raise ConfigError("kernels and strides need one entry per stage (len(widths) + 1)")
        if self.length < 2 or self.in_channels < 1:
            raise ConfigError("encoder input must have length >= 2 and at least one channel")

    @property
    def h(self) -> int:
        return self.d // 2

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, activation: str, batch_norm: bool):
        super().__init__()
        pad = kernel // 2
        norm = nn.BatchNorm1d if batch_norm else (lambda _: nn.Identity())
        self.conv1 = nn.Conv1d(in_ch, out_ch, kernel, stride=stride, padding=pad, bias=not batch_norm)
        self.bn1 = norm(out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, kernel, padding=pad, bias=not batch_norm)
        self.bn2 = norm(out_ch)
        self.act = make_activation(activation)
        if in_ch != out_ch or stride != 1:
            self.shortcut = nn.Sequential(
                nn.Conv1d(in_ch, out_ch, 1, stride=stride, bias=not batch_norm), norm(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.act(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class ConvResNet1d(nn.Module):
    """Residual 1-D conv stages followed by global average pooling over time."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        widths = [*cfg.widths, cfg.d]
        chans = [cfg.in_channels, *widths]
        self.blocks = nn.Sequential(*[
            ResidualBlock(chans[i], chans[i + 1], cfg.kernels[i], cfg.strides[i], cfg.activation, cfg.batch_norm)
            for i in range(len(widths))
        ])

    def forward(self, x):
        return self.blocks(x).mean(dim=-1)


class MLPEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cfg.in_channels * cfg.length, cfg.mlp_hidden),
            make_activation(cfg.activation),
            nn.Linear(cfg.mlp_hidden, cfg.d),
        )

    def forward(self, x):
        return self.net(x)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.architecture == "mlp":
        return MLPEncoder(cfg)
    return ConvResNet1d(cfg)


class Predictor(nn.Module):
    """One hidden layer of width ``dim``: linear -> activation -> linear."""

    def __init__(self, dim: int, activation: str = "gelu"):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.act = make_activation(activation)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))

    @torch.no_grad()
    def identity_init(self):
        """Pass-through weights; exact identity only with the ``identity`` activation."""
        for fc in (self.fc1, self.fc2):
            fc.weight.copy_(torch.eye(fc.weight.shape[0], dtype=fc.weight.dtype))
            fc.bias.zero_()
        return self


def project(e: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine subspace map ``u = A e + b``."""
    if e.shape[-1] != weight.shape[1]:
        raise InvalidInputError(f"embedding has dim {e.shape[-1]}, projector expects {weight.shape[1]}")
    return e @ weight.T + bias


@torch.no_grad()
def momentum_update(target: nn.Module, online: nn.Module, alpha: float) -> None:
    """``target <- alpha * target + (1 - alpha) * online`` over parameters and float buffers."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"momentum factor must satisfy 0 <= alpha < 1, got {alpha}")
    t_state = dict(target.named_parameters())
    t_state.update(target.named_buffers())
    o_state = dict(online.named_parameters())
    o_state.update(online.named_buffers())
    if t_state.keys() != o_state.keys():
        raise InvalidInputError("momentum and online modules have different structure")
    for name, t in t_state.items():
        o = o_state[name]
        if t.shape != o.shape:
            raise InvalidInputError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(o.shape)}")
        if t.is_floating_point():
            t.mul_(alpha).add_(o, alpha=1.0 - alpha)
        else:
            t.copy_(o)


class FeiModel(nn.Module):
    """All FEI state: online encoder/projector, their momentum copies, mask table and predictors.

    ``use_subspace=False`` replaces the projector with the identity so the
    inference space is the full embedding (``h = d``).
    """

    def __init__(self, cfg: EncoderConfig, mask_components: int, use_subspace: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_subspace = use_subspace
        self.h = cfg.h if use_subspace else cfg.d
        self.encoder = build_encoder(cfg)
        self.projector = nn.Linear(cfg.d, self.h) if use_subspace else nn.Identity()
        self.target_encoder = copy.deepcopy(self.encoder)
        self.target_projector = copy.deepcopy(self.projector)
        for p in (*self.target_encoder.parameters(), *self.target_projector.parameters()):
            p.requires_grad_(False)
        self.mask_encoder = MaskEncoder(mask_components, self.h)
        self.predictor_target = Predictor(self.h, cfg.predictor_activation)
        self.predictor_mask = Predictor(self.h, cfg.predictor_activation)

    def _check_input(self, x: torch.Tensor) -> None:
        expected = (self.cfg.in_channels, self.cfg.length)
        if x.ndim != 3 or tuple(x.shape[1:]) != expected:
            raise InvalidInputError(f"expected input of shape (batch, {expected[0]}, {expected[1]}), got {tuple(x.shape)}")

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x)

    def online(self, x: torch.Tensor) -> torch.Tensor:
        return self.projector(self.embed(x))

    @torch.no_grad()
    def target(self, x: torch.Tensor, use_momentum: bool = True) -> torch.Tensor:
        """Target embedding; never tracked by autograd, batch-norm layers use running statistics."""
        self._check_input(x)
        enc, proj = (self.target_encoder, self.target_projector) if use_momentum else (self.encoder, self.projector)
        was_training = enc.training
        enc.eval()
        try:
            return proj(enc(x))
        finally:
            enc.train(was_training)

    def momentum_step(self, alpha: float) -> None:
        momentum_update(self.target_encoder, self.encoder, alpha)
        momentum_update(self.target_projector, self.projector, alpha)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Trainable groups keyed by role; momentum copies are excluded."""
        return {
            "encoder": list(self.encoder.parameters()),
            "projector": list(self.projector.parameters()),
            "mask_encoder": list(self.mask_encoder.parameters()),
            "predictor_target": list(self.predictor_target.parameters()),
            "predictor_mask": list(self.predictor_mask.parameters()),
        }
