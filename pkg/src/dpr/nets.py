"""Network components: encoders, projection heads, proprioception fusion, policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class EncoderConfig:
    variant: str = "tiny"          # "tiny" (stride 16) or "resnet18" (stride 32)
    embed_channels: int = 128      # 512 for resnet18
    tiny_widths: tuple[int, ...] = (32, 64, 96)

    def __post_init__(self):
        if self.variant not in ("tiny", "resnet18"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "resnet18":
            self.embed_channels = 512

    @property
    def stride(self) -> int:
        return 16 if self.variant == "tiny" else 32


def _conv_bn_relu(c_in, c_out, stride):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class TinyEncoder(nn.Module):
    """Four stride-2 conv stages (total stride 16); CPU-friendly."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w = list(cfg.tiny_widths) + [cfg.embed_channels]
        self.stages = nn.Sequential(
            _conv_bn_relu(3, w[0], 2),
            _conv_bn_relu(w[0], w[1], 2),
            _conv_bn_relu(w[1], w[2], 2),
            _conv_bn_relu(w[2], w[3], 2),
        )

    def forward(self, x):
        return self.stages(x)


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.down = None
        if stride != 1 or c_in != c_out:
            self.down = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class ResNet18Encoder(nn.Module):
    """ResNet18-style backbone, total stride 32, 512 output channels."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        layers = []
        c_in = 64
        for c_out, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            layers += [BasicBlock(c_in, c_out, stride), BasicBlock(c_out, c_out)]
            c_in = c_out
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(self.stem(x))


class Encoder(nn.Module):
    """Visual encoder returning the spatial feature grid and a pooled embedding."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.backbone = (
            TinyEncoder(self.cfg) if self.cfg.variant == "tiny" else ResNet18Encoder(self.cfg)
        )

    @property
    def stride(self):
        return self.cfg.stride

    @property
    def out_channels(self):
        return self.cfg.embed_channels

    def forward(self, rgb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = rgb.shape[-2:]
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"input resolution {h}x{w} must be divisible by stride {s}")
        grid = self.backbone(rgb)
        pooled = grid.mean(dim=(2, 3))
        return grid, pooled

    def grid_hw(self, resolution: tuple[int, int]) -> tuple[int, int]:
        h, w = resolution
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"resolution {h}x{w} must be divisible by stride {s}")
        return h // s, w // s


class PixelProjector(nn.Module):
    """1x1-conv head mapping the feature grid into the pixel-contrast space."""

    def __init__(self, c_in: int, c_hidden: int = 128, c_out: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_hidden, 1),
            nn.BatchNorm2d(c_hidden),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_hidden, c_out, 1),
        )

    def forward(self, grid):
        # B x C x h x w -> B x (h*w) x c_out
        out = self.net(grid)
        return out.flatten(2).transpose(1, 2)


class InstanceProjector(nn.Module):
    def __init__(self, c_in: int, c_hidden: int = 256, c_out: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(c_in, c_hidden),
            nn.BatchNorm1d(c_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(c_hidden, c_out),
        )

    def forward(self, pooled):
        return self.net(pooled)


class InstancePredictor(InstanceProjector):
    def __init__(self, c_io: int = 64, c_hidden: int = 256):
        super().__init__(c_io, c_hidden, c_io)


@torch.no_grad()
def momentum_update(online: nn.Module, momentum: nn.Module, m: float) -> None:
    """EMA update: momentum <- m * momentum + (1 - m) * online (params and buffers)."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient must be in [0,1], got {m}")
    q_params = dict(online.named_parameters())
    k_params = dict(momentum.named_parameters())
    if q_params.keys() != k_params.keys():
        raise ValueError("online/momentum parameter sets differ")
    for name, pk in k_params.items():
        pq = q_params[name]
        if pk.shape != pq.shape:
            raise ValueError(f"shape mismatch for {name}: {pk.shape} vs {pq.shape}")
        pk.mul_(m).add_(pq, alpha=1.0 - m)
    for (_, bk), (_, bq) in zip(momentum.named_buffers(), online.named_buffers()):
        if bk.dtype.is_floating_point:
            bk.mul_(m).add_(bq, alpha=1.0 - m)
        else:
            bk.copy_(bq)


def copy_and_freeze(module: nn.Module, target: nn.Module) -> nn.Module:
    """Initialize a momentum twin: copy state, stop gradients."""
    target.load_state_dict(module.state_dict())
    for p in target.parameters():
        p.requires_grad_(False)
    return target


class PretrainModel(nn.Module):
    """Online + momentum branches with pixel and instance heads."""

    def __init__(self, enc_cfg: EncoderConfig | None = None, pixel_dim: int = 64,
                 instance_dim: int = 64):
        super().__init__()
        enc_cfg = enc_cfg or EncoderConfig()
        c = enc_cfg.embed_channels
        self.encoder = Encoder(enc_cfg)
        self.pixel_proj = PixelProjector(c, c_out=pixel_dim)
        self.inst_proj = InstanceProjector(c, c_out=instance_dim)
        self.inst_pred = InstancePredictor(instance_dim)

        self.m_encoder = copy_and_freeze(self.encoder, Encoder(enc_cfg))
        self.m_pixel_proj = copy_and_freeze(self.pixel_proj, PixelProjector(c, c_out=pixel_dim))
        self.m_inst_proj = copy_and_freeze(
            self.inst_proj, InstanceProjector(c, c_out=instance_dim)
        )

    def online_branches(self):
        return (self.encoder, self.pixel_proj, self.inst_proj)

    def momentum_branches(self):
        return (self.m_encoder, self.m_pixel_proj, self.m_inst_proj)

    def ema_step(self, m: float):
        for online, target in zip(self.online_branches(), self.momentum_branches()):
            momentum_update(online, target, m)

    def forward_online(self, rgb):
        grid, pooled = self.encoder(rgb)
        return self.pixel_proj(grid), self.inst_pred(self.inst_proj(pooled))

    @torch.no_grad()
    def forward_momentum(self, rgb):
        grid, pooled = self.m_encoder(rgb)
        return self.m_pixel_proj(grid), self.m_inst_proj(pooled)


DEFAULT_PROPRIO_HIDDEN = 256
PROPRIO_TOKEN_DIM = 8


class ProprioEncoder(nn.Module):
    """Per-state two-layer heads producing an n x 8 token sequence, then LayerNorm.

    Each named state gets its own [dim(s), 256, 8] head with a ReLU between the
    layers; normalization runs over the 8-dim feature axis per token so states
    of very different magnitude land on a comparable scale.
    """

    def __init__(self, schema: list[tuple[str, int]], hidden: int = DEFAULT_PROPRIO_HIDDEN):
        super().__init__()
        self.schema = list(schema)
        self.heads = nn.ModuleDict(
            {
                name: nn.Sequential(
                    nn.Linear(dim, hidden),
                    nn.ReLU(inplace=True),
                    nn.Linear(hidden, PROPRIO_TOKEN_DIM),
                )
                for name, dim in self.schema
            }
        )
        self.norm = nn.LayerNorm(PROPRIO_TOKEN_DIM)

    def forward(self, states: dict[str, torch.Tensor]) -> torch.Tensor:
        missing = [n for n, _ in self.schema if n not in states]
        if missing:
            raise ValueError(f"missing proprioception states: {missing}")
        tokens = []
        for name, dim in self.schema:
            s = states[name]
            if s.shape[-1] != dim:
                raise ValueError(f"state {name!r} has width {s.shape[-1]}, expected {dim}")
            tokens.append(self.heads[name](s))
        return self.norm(torch.stack(tokens, dim=-2))  # B x n x 8


class CrossAttention(nn.Module):
    """Single-head attention from visual tokens (queries) to proprio tokens."""

    def __init__(self, d_vis: int, d: int = 64, d_state: int = PROPRIO_TOKEN_DIM):
        super().__init__()
        self.d = d
        self.q_proj = nn.Linear(d_vis, d)
        self.k_proj = nn.Linear(d_state, d)
        self.v_proj = nn.Linear(d_state, d)

    def forward(self, z_tokens: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        if states.shape[-2] == 0:
            raise ValueError("cross attention needs at least one proprioception token")
        q = self.q_proj(z_tokens)                      # B x T x d
        k = self.k_proj(states)                        # B x n x d
        v = self.v_proj(states)
        attn = torch.softmax(q @ k.transpose(-1, -2) / self.d**0.5, dim=-1)
        return attn @ v


class PolicyHead(nn.Module):
    """Three-layer MLP: [dim(embedding), 256, 128, dim(action)]."""

    def __init__(self, in_dim: int, action_dim: int, hidden: tuple[int, int] = (256, 128)):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden[0]),
            nn.ReLU(inplace=True),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(inplace=True),
            nn.Linear(hidden[1], action_dim),
        )

    def forward(self, x):
        return self.net(x)


class Policy(nn.Module):
    """Vision + proprioception + goal -> action.

    Input to the head is the concatenation of average-pooled visual features,
    average-pooled cross-attention output (when proprioception is enabled),
    and the goal vector.
    """

    def __init__(
        self,
        encoder: Encoder,
        proprio_schema: list[tuple[str, int]],
        goal_dim: int,
        action_dim: int,
        use_proprio: bool = True,
        attn_dim: int = 64,
    ):
        super().__init__()
        self.encoder = encoder
        self.use_proprio = use_proprio
        c = encoder.out_channels
        in_dim = c + goal_dim
        if use_proprio:
            self.proprio = ProprioEncoder(proprio_schema)
            self.attn = CrossAttention(c, d=attn_dim)
            in_dim += attn_dim
        self.head = PolicyHead(in_dim, action_dim)

    def forward(
        self,
        rgb: torch.Tensor,
        states: dict[str, torch.Tensor] | None,
        goal: torch.Tensor,
    ) -> torch.Tensor:
        grid, pooled = self.encoder(rgb)
        parts = [pooled]
        if self.use_proprio:
            if states is None:
                raise ValueError("policy was built with proprioception enabled")
            tokens = grid.flatten(2).transpose(1, 2)   # B x T x C
            fused = self.attn(tokens, self.proprio(states))
            parts.append(fused.mean(dim=1))
        parts.append(goal)
        return self.head(torch.cat(parts, dim=-1))
