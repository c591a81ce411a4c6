"""Toy causal decoder with LoRA adapters, instruction prompts, NLL objective and decoding."""
import math
from dataclasses import dataclass
from typing import Literal, Optional

import torch
import torch.nn.functional as F
from torch import nn

from app.config import PROMPTS_DIR, DecoderConfig, LoRAConfig
from app.models.layers import Attention, Block, init_weights
from app.models.tokenizer import Tokenizer

PLACEHOLDER = "<ImageHere>"

Task = Literal["report", "vqa"]


class LoRALinear(nn.Module):
    """base(x) + (alpha / r) * x A^T B^T, with B starting at zero."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling

    @torch.no_grad()
    def merged(self) -> nn.Linear:
        linear = nn.Linear(self.base.in_features, self.base.out_features, bias=self.base.bias is not None)
        linear = linear.to(self.base.weight)
        linear.weight.copy_(lora_merge(self.base.weight, self.lora_A, self.lora_B, self.scaling))
        if self.base.bias is not None:
            linear.bias.copy_(self.base.bias)
        return linear


def lora_merge(weight: torch.Tensor, lora_A: torch.Tensor, lora_B: torch.Tensor, scaling: float) -> torch.Tensor:
    """W + scaling * B A."""
    if lora_A.ndim != 2 or lora_B.ndim != 2 or lora_B.shape[1] != lora_A.shape[0]:
        raise ValueError(f"incompatible adapter shapes A {tuple(lora_A.shape)}, B {tuple(lora_B.shape)}")
    if weight.shape != (lora_B.shape[0], lora_A.shape[1]):
        raise ValueError(f"adapter delta {lora_B.shape[0]}x{lora_A.shape[1]} does not match W {tuple(weight.shape)}")
    return weight + scaling * (lora_B @ lora_A)


def apply_lora(model: nn.Module, config: LoRAConfig) -> list[str]:
    """Wrap the targeted attention projections in place; returns the wrapped module names."""
    wrapped = []
    for name, module in list(model.named_modules()):
        if not isinstance(module, Attention):
            continue
        for target in config.targets:
            layer = getattr(module, target)
            if isinstance(layer, nn.Linear):
                setattr(module, target, LoRALinear(layer, config.rank, config.alpha))
                wrapped.append(f"{name}.{target}")
    return wrapped


def merge_lora(model: nn.Module) -> None:
    """Fold every adapter into its base weight, in place."""
    for module in list(model.modules()):
        for child_name, child in list(module.named_children()):
            if isinstance(child, LoRALinear):
                setattr(module, child_name, child.merged())


def has_lora(model: nn.Module) -> bool:
    return any(isinstance(m, LoRALinear) for m in model.modules())


class ToyDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(vocab_size, config.dim)
        self.pos_embed = nn.Parameter(torch.zeros(config.max_positions, config.dim))
        self.blocks = nn.ModuleList(
            Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        self.lm_head = nn.Linear(config.dim, vocab_size)

        self.apply(init_weights)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embed(ids.to(self.token_embed.weight.device))

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """Causal logits for a (T, d) or (B, T, d) embedded sequence."""
        length = embeds.shape[-2]
        if length > self.config.max_positions:
            raise ValueError(f"sequence of {length} exceeds max_positions {self.config.max_positions}")
        causal = torch.ones(length, length, dtype=torch.bool, device=embeds.device).tril()
        x = embeds + self.pos_embed[:length]
        for block in self.blocks:
            x = block(x, allowed=causal)
        return self.lm_head(self.norm(x))


@dataclass(frozen=True)
class InstructionPrompt:
    template: str
    task: Task = "report"

    def __post_init__(self):
        count = self.template.count(PLACEHOLDER)
        if count != 1:
            raise ValueError(f"instruction must contain exactly one {PLACEHOLDER}, found {count}")

    @classmethod
    def load(cls, task: Task, question: Optional[str] = None) -> "InstructionPrompt":
        template = (PROMPTS_DIR / f"{task}_instruction.txt").read_text(encoding="utf-8").strip()
        if task == "vqa":
            if not question:
                raise ValueError("a question is required for the vqa task")
            template = template.replace("{question}", question)
        return cls(template, task)

    def split(self) -> tuple[str, str]:
        before, after = self.template.split(PLACEHOLDER)
        return before, after


@dataclass
class PromptEmbedding:
    embeds: torch.Tensor  # (P, d)
    visual_start: int  # index of the first visual vector
    num_visual: int

    @property
    def length(self) -> int:
        return self.embeds.shape[0]


def build_prompt(
        decoder: ToyDecoder,
        tokenizer: Tokenizer,
        instruction: InstructionPrompt,
        visual: torch.Tensor,
) -> PromptEmbedding:
    """[BOS] before <Img> Q </Img> after, embedded; Q is spliced in as raw vectors."""
    before, after = instruction.split()
    before_ids = [tokenizer.bos_id] + tokenizer.encode(before) + [tokenizer.img_open_id]
    after_ids = [tokenizer.img_close_id] + tokenizer.encode(after)
    device = decoder.token_embed.weight.device
    head = decoder.embed_tokens(torch.tensor(before_ids, device=device))
    tail = decoder.embed_tokens(torch.tensor(after_ids, device=device))
    embeds = torch.cat([head, visual.to(head), tail], dim=0)
    return PromptEmbedding(embeds, len(before_ids), visual.shape[0])


def nll_loss(
        logits: torch.Tensor,
        targets: torch.Tensor,
        loss_mask: Optional[torch.Tensor] = None,
        reduction: Literal["sum", "mean"] = "sum",
) -> torch.Tensor:
    """-sum over masked positions of log p(y_t); reduction="mean" divides by the masked count."""
    if loss_mask is None:
        loss_mask = torch.ones_like(targets, dtype=torch.bool)
    loss_mask = loss_mask.to(torch.bool)
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no positions")
    log_probs = F.log_softmax(logits, dim=-1)
    picked = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    total = picked[loss_mask].sum()
    return total / count if reduction == "mean" else total


def target_logits(decoder: ToyDecoder, prompt: PromptEmbedding, target_ids: torch.Tensor) -> torch.Tensor:
    """Teacher-forced logits whose row t predicts target_ids[t]."""
    inputs = torch.cat([prompt.embeds, decoder.embed_tokens(target_ids[:-1])], dim=0)
    return decoder(inputs)[prompt.length - 1:]


def instruction_loss(
        decoder: ToyDecoder,
        prompt: PromptEmbedding,
        target_ids: torch.Tensor,
        reduction: Literal["sum", "mean"] = "sum",
) -> torch.Tensor:
    """NLL over the answer tokens only; instruction and visual positions carry no loss."""
    target_ids = target_ids.to(prompt.embeds.device)
    return nll_loss(target_logits(decoder, prompt, target_ids), target_ids, reduction=reduction)


def language_model_loss(decoder: ToyDecoder, ids: torch.Tensor, reduction: Literal["sum", "mean"] = "mean") -> torch.Tensor:
    """Plain next-token loss over a text sequence, used before any visual alignment."""
    ids = ids.to(decoder.token_embed.weight.device)
    logits = decoder(decoder.embed_tokens(ids[:-1]))
    return nll_loss(logits, ids[1:], reduction=reduction)


@torch.no_grad()
def generate(
        decoder: ToyDecoder,
        tokenizer: Tokenizer,
        prompt: PromptEmbedding,
        max_len: int = 64,
        strategy: Literal["greedy", "top_k"] = "greedy",
        top_k: int = 5,
        seed: int = 0,
) -> str:
    """Autoregressive decoding until EOS or max_len new tokens."""
    generator = torch.Generator().manual_seed(seed)
    embeds = prompt.embeds
    out: list[int] = []
    for _ in range(max_len):
        if embeds.shape[0] >= decoder.config.max_positions:
            break
        logits = decoder(embeds)[-1]
        if strategy == "greedy":
            next_id = int(torch.argmax(logits))
        elif strategy == "top_k":
            values, indices = torch.topk(logits.float().cpu(), min(top_k, logits.shape[-1]))
            choice = torch.multinomial(torch.softmax(values, dim=-1), 1, generator=generator)
            next_id = int(indices[choice])
        else:
            raise ValueError(f"unknown decoding strategy {strategy!r}")
        if next_id == tokenizer.eos_id:
            break
        out.append(next_id)
        embeds = torch.cat([embeds, decoder.embed_tokens(torch.tensor([next_id], device=embeds.device))])
    return tokenizer.decode(out)
