"""DINO self-distillation: projection head, cross-view loss, EMA teacher and centering."""
import copy
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from app.config import DinoConfig, ViTConfig
from app.models.layers import init_weights
from app.models.vit import ViT


class DINOHead(nn.Module):
    """3-layer MLP, L2-normalised bottleneck, weight-normalised output layer of size K."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int = 128, bottleneck_dim: int = 32):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.apply(init_weights)
        self.last_layer = weight_norm(nn.Linear(bottleneck_dim, out_dim, bias=False))
        with torch.no_grad():
            self.last_layer.parametrizations.weight.original0.fill_(1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.normalize(self.mlp(x), dim=-1)
        return self.last_layer(x)


class DinoNet(nn.Module):
    def __init__(self, backbone: ViT, head: DINOHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        cls, _ = self.backbone(images)
        return self.head(cls)


def _stack(logits: Union[torch.Tensor, Sequence[torch.Tensor]]) -> torch.Tensor:
    return logits if isinstance(logits, torch.Tensor) else torch.stack(list(logits))


def dino_loss(
        student_logits: Union[torch.Tensor, Sequence[torch.Tensor]],
        teacher_logits: Union[torch.Tensor, Sequence[torch.Tensor]],
        center: torch.Tensor,
        student_temp: float = 0.1,
        teacher_temp: float = 0.04,
) -> torch.Tensor:
    """Mean cross-entropy -sum t log s over (teacher crop, student crop) pairs with different indices.

    Logits are (n_crops, B, K); the teacher holds the global crops, which come first
    in the student's crop order.
    """
    if student_temp <= 0 or teacher_temp <= 0:
        raise ValueError("DINO temperatures must be positive")
    student = _stack(student_logits)
    teacher = _stack(teacher_logits)
    targets = torch.softmax((teacher - center) / teacher_temp, dim=-1).detach()
    log_probs = F.log_softmax(student / student_temp, dim=-1)

    total, terms = student.new_zeros(()), 0
    for t_idx in range(targets.shape[0]):
        for s_idx in range(log_probs.shape[0]):
            if s_idx == t_idx:
                continue
            total = total + torch.sum(-targets[t_idx] * log_probs[s_idx], dim=-1).mean()
            terms += 1
    if terms == 0:
        raise ValueError("dino_loss needs at least two crops")
    return total / terms


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    for t_param, s_param in zip(teacher.parameters(), student.parameters()):
        if t_param.shape != s_param.shape:
            raise ValueError("teacher and student parameter shapes differ")
        t_param.mul_(momentum).add_(s_param.detach(), alpha=1.0 - momentum)
    return teacher


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return center * momentum + batch_mean * (1.0 - momentum)


@dataclass
class DinoState:
    student: DinoNet
    teacher: DinoNet
    center: torch.Tensor
    config: DinoConfig
    last_teacher_logits: Optional[torch.Tensor] = None

    @classmethod
    def create(cls, vit_config: ViTConfig, config: DinoConfig) -> "DinoState":
        head = DINOHead(vit_config.embed_dim, config.out_dim, config.hidden_dim, config.bottleneck_dim)
        student = DinoNet(ViT(vit_config), head)
        teacher = copy.deepcopy(student)
        for param in teacher.parameters():
            param.requires_grad_(False)
        return cls(student, teacher, torch.zeros(config.out_dim), config)

    def loss(self, crops: torch.Tensor) -> torch.Tensor:
        """crops: (n_crops, B, 3, H, W) with the global crops first."""
        n_crops, batch = crops.shape[:2]
        flat = crops.reshape(n_crops * batch, *crops.shape[2:])
        student_logits = self.student(flat).reshape(n_crops, batch, -1)
        with torch.no_grad():
            globals_ = crops[: self.config.n_global]
            teacher_logits = self.teacher(globals_.reshape(-1, *crops.shape[2:]))
            teacher_logits = teacher_logits.reshape(self.config.n_global, batch, -1)
        self.last_teacher_logits = teacher_logits
        return dino_loss(student_logits, teacher_logits, self.center,
                         self.config.student_temp, self.config.teacher_temp)

    def after_step(self) -> None:
        """EMA the teacher and move the center toward the last teacher batch."""
        ema_update(self.teacher, self.student, self.config.teacher_momentum)
        self.center = update_center(self.center, self.last_teacher_logits, self.config.center_momentum)
