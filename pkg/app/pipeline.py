"""Staged training.

lm  decoder language pre-training on the report/QA corpus
0   DINO self-distillation of the slice encoder
1   masked embedding modeling of the Z-former
2   bridger alignment through the frozen encoder, Z-former and decoder
3   joint report/VQA instruction tuning of the bridger and decoder LoRA adapters

Every stage writes a full model snapshot to ``<checkpoint_dir>/stage_<id>`` and
streams one metrics line per optimizer step to ``<output_dir>/metrics_stage<id>.jsonl``.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from app.backend.augment import dino_augment
from app.backend.checkpoint import MissingCheckpointError
from app.backend.operations import ManifestRecord, load_record_volumes, prepare_stack, read_manifest
from app.backend.utils import JsonLinesWriter, derive_seed, seed_everything
from app.backend.volume import VolumeStack
from app.config import MSVLM_DEVICE, PROMPTS_DIR, RunConfig, StageConfig, StageId
from app.models.decoder import (
    InstructionPrompt,
    Task,
    apply_lora,
    has_lora,
    instruction_loss,
    language_model_loss,
)
from app.models.dino import DinoState
from app.models.msvlm import CONFIG_FILE, MSVLM, load_tokenizer
from app.models.tokenizer import Tokenizer
from app.models.zformer import mask_embeddings, mem_loss

logger = logging.getLogger(__name__)

STAGE_ORDER: tuple[StageId, ...] = ("lm", "0", "1", "2", "3")
PREREQUISITES: dict[str, tuple[str, ...]] = {"lm": (), "0": (), "1": ("0",), "2": ("1", "lm"), "3": ("2",)}

ProgressFn = Callable[[float, str], None]


def linear_warmup_lr(step: int, config: StageConfig) -> float:
    """start + (peak - start) * min(step / warmup_steps, 1)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if config.warmup_steps == 0:
        return config.lr
    fraction = min(step / config.warmup_steps, 1.0)
    return config.warmup_start_lr + (config.lr - config.warmup_start_lr) * fraction


@dataclass(frozen=True)
class FreezeSpec:
    """Top-level modules that train; in ``lora_only`` modules only the adapter weights train."""
    modules: frozenset[str]
    lora_only: frozenset[str] = frozenset()

    def is_trainable(self, name: str) -> bool:
        top = name.split(".", 1)[0]
        if top in self.lora_only:
            return "lora_" in name
        return top in self.modules

    def apply(self, model: nn.Module) -> list[nn.Parameter]:
        trainable = []
        for name, param in model.named_parameters():
            flag = self.is_trainable(name)
            param.requires_grad_(flag)
            if flag:
                trainable.append(param)
        if not trainable:
            raise ValueError(f"freeze spec {self} leaves nothing to train")
        return trainable


FREEZE_SPECS: dict[str, FreezeSpec] = {
    "lm": FreezeSpec(frozenset({"decoder"})),
    "0": FreezeSpec(frozenset({"encoder"})),
    "1": FreezeSpec(frozenset({"zformer"})),
    "2": FreezeSpec(frozenset({"bridger"})),
    "3": FreezeSpec(frozenset({"bridger"}), lora_only=frozenset({"decoder"})),
}


def build_optimizer(params: Sequence[nn.Parameter], config: StageConfig) -> torch.optim.Optimizer:
    match config.optimizer:
        case "adam":
            return torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
        case "adamw":
            return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        case _:
            raise ValueError(f"unknown optimizer {config.optimizer!r}")


class MetricsWriter(JsonLinesWriter):
    def __init__(self, output_dir: Path, stage: str):
        super().__init__(Path(output_dir) / f"metrics_stage{stage}.jsonl")
        self.stage = stage

    def log_step(self, step: int, loss: float, lr: float, task: Optional[str] = None) -> None:
        record = {"stage": self.stage, "step": step, "loss": loss, "lr": lr}
        if task is not None:
            record["task"] = task
        self.write(record)


def joint_task_schedule(num_steps: int) -> list[Task]:
    """Strict report/vqa alternation, starting with report."""
    return ["report" if i % 2 == 0 else "vqa" for i in range(num_steps)]


@dataclass
class Step:
    items: list[int]
    task: Optional[str] = None


@dataclass
class InstructionExample:
    features: torch.Tensor  # frozen Z-former output for the volume
    instruction: InstructionPrompt
    target_ids: torch.Tensor
    task: Task


@dataclass
class StageResult:
    stage: str
    losses: list[float] = field(default_factory=list)
    checkpoint: Optional[Path] = None

    @property
    def steps(self) -> int:
        return len(self.losses)


def _epoch_batches(count: int, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(count)
    return [order[i:i + batch_size].tolist() for i in range(0, count, batch_size)]


def _train_loop(
        stage: str,
        config: StageConfig,
        params: list[nn.Parameter],
        plan: Callable[[int], list[Step]],
        loss_fn: Callable[[Step, int], torch.Tensor],
        metrics: Optional[MetricsWriter] = None,
        after_step: Optional[Callable[[], None]] = None,
        progress: Optional[ProgressFn] = None,
) -> list[float]:
    optimizer = build_optimizer(params, config)
    losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch in plan(epoch):
            if config.max_steps is not None and step >= config.max_steps:
                break
            lr = linear_warmup_lr(step, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(batch, step)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            if after_step is not None:
                after_step()

            value = float(loss.detach())
            losses.append(value)
            epoch_losses.append(value)
            if metrics is not None:
                metrics.log_step(step, value, lr, batch.task)
            logger.debug("stage %s step %d loss %.5f lr %.2e", stage, step, value, lr)
            step += 1
        if epoch_losses:
            logger.info("stage %s epoch %d/%d: mean loss %.4f over %d steps",
                        stage, epoch + 1, config.epochs, float(np.mean(epoch_losses)), len(epoch_losses))
        if progress is not None:
            progress((epoch + 1) / config.epochs, f"stage {stage} epoch {epoch + 1}/{config.epochs}")
        if config.max_steps is not None and step >= config.max_steps:
            break
    return losses


def _instruction_batch_loss(model: MSVLM, examples: Sequence[InstructionExample], items: list[int]) -> torch.Tensor:
    total = 0.0
    for i in items:
        example = examples[i]
        prompt = model.prompt(model.bridger(example.features), example.instruction)
        total = total + instruction_loss(model.decoder, prompt, example.target_ids)
    return total / len(items)


def pretrain_decoder(
        model: MSVLM,
        texts: Sequence[str],
        run: RunConfig,
        metrics: Optional[MetricsWriter] = None,
        progress: Optional[ProgressFn] = None,
) -> list[float]:
    """Causal LM training of the decoder alone on [BOS] text [EOS] sequences."""
    if not texts:
        raise ValueError("decoder pre-training needs at least one text")
    config = run.stage("lm")
    rng = seed_everything(config.seed)
    params = FREEZE_SPECS["lm"].apply(model)
    sequences = [torch.tensor(model.tokenizer.encode(t, add_bos=True, add_eos=True)) for t in texts]

    def loss_fn(step: Step, index: int) -> torch.Tensor:
        return sum(language_model_loss(model.decoder, sequences[i]) for i in step.items) / len(step.items)

    model.decoder.train()
    return _train_loop("lm", config, params, lambda _: [Step(b) for b in _epoch_batches(len(sequences), config.batch_size, rng)],
                       loss_fn, metrics, progress=progress)


def stage0_train(
        images: Sequence[np.ndarray],
        run: RunConfig,
        metrics: Optional[MetricsWriter] = None,
        progress: Optional[ProgressFn] = None,
) -> tuple[DinoState, list[float]]:
    """DINO loop: augment, student/teacher forward, dino_loss, student step, EMA teacher."""
    if len(images) == 0:
        raise ValueError("stage 0 needs at least one slice")
    config = run.stage("0")
    rng = seed_everything(config.seed)
    device = torch.device(MSVLM_DEVICE)
    state = DinoState.create(run.vit, run.dino)
    state.student.to(device).train()
    state.teacher.to(device)
    state.center = state.center.to(device)
    steps_per_epoch = math.ceil(len(images) / config.batch_size)

    def plan(epoch: int) -> list[Step]:
        # slices are drawn uniformly at random, independently per step
        return [Step(rng.integers(len(images), size=config.batch_size).tolist()) for _ in range(steps_per_epoch)]

    def loss_fn(step: Step, index: int) -> torch.Tensor:
        crops = [dino_augment(images[i], rng, run.dino, run.vit.image_size) for i in step.items]
        pixels = np.stack([np.stack([c.pixels for c in per_image]) for per_image in crops], axis=1)
        return state.loss(torch.from_numpy(pixels).to(device))

    params = list(state.student.parameters())
    losses = _train_loop("0", config, params, plan, loss_fn, metrics, after_step=state.after_step, progress=progress)
    return state, losses


def stage1_train(
        model: MSVLM,
        z_vols: Sequence[torch.Tensor],
        run: RunConfig,
        metrics: Optional[MetricsWriter] = None,
        progress: Optional[ProgressFn] = None,
) -> list[float]:
    """Masked embedding modeling on cached Z_vol; only the Z-former (and its mask token) trains."""
    if not z_vols:
        raise ValueError("stage 1 needs at least one volume")
    config = run.stage("1")
    rng = seed_everything(config.seed)
    params = FREEZE_SPECS["1"].apply(model)
    p = run.zformer.mask_prob

    def loss_fn(step: Step, index: int) -> torch.Tensor:
        total = 0.0
        for i in step.items:
            masked, mask = mask_embeddings(z_vols[i], p, derive_seed(config.seed, index, i), model.zformer.mask_token)
            total = total + mem_loss(model.zformer(masked), z_vols[i], mask)
        return total / len(step.items)

    model.zformer.train()
    return _train_loop("1", config, params, lambda _: [Step(b) for b in _epoch_batches(len(z_vols), config.batch_size, rng)],
                       loss_fn, metrics, progress=progress)


def stage2_train(
        model: MSVLM,
        report_examples: Sequence[InstructionExample],
        run: RunConfig,
        metrics: Optional[MetricsWriter] = None,
        progress: Optional[ProgressFn] = None,
) -> list[float]:
    """Report-generation NLL through the frozen decoder; only the bridger trains."""
    if not report_examples:
        raise ValueError("stage 2 needs at least one report example")
    config = run.stage("2")
    rng = seed_everything(config.seed)
    params = FREEZE_SPECS["2"].apply(model)

    def loss_fn(step: Step, index: int) -> torch.Tensor:
        return _instruction_batch_loss(model, report_examples, step.items)

    model.bridger.train()
    return _train_loop("2", config, params,
                       lambda _: [Step(b, "report") for b in _epoch_batches(len(report_examples), config.batch_size, rng)],
                       loss_fn, metrics, progress=progress)


def stage3_train(
        model: MSVLM,
        report_examples: Sequence[InstructionExample],
        vqa_examples: Sequence[InstructionExample],
        run: RunConfig,
        metrics: Optional[MetricsWriter] = None,
        progress: Optional[ProgressFn] = None,
) -> list[float]:
    """Joint instruction tuning with strictly alternating report and VQA batches."""
    if not report_examples or not vqa_examples:
        raise ValueError("stage 3 needs both report and vqa examples")
    config = run.stage("3")
    rng = seed_everything(config.seed)
    if not has_lora(model.decoder):
        apply_lora(model.decoder, run.lora)
    params = FREEZE_SPECS["3"].apply(model)
    datasets = {"report": report_examples, "vqa": vqa_examples}

    def plan(epoch: int) -> list[Step]:
        pairs = math.ceil(len(report_examples) / config.batch_size)
        queues: dict[str, list[list[int]]] = {"report": [], "vqa": []}
        steps = []
        for task in joint_task_schedule(2 * pairs):
            if not queues[task]:
                queues[task] = _epoch_batches(len(datasets[task]), config.batch_size, rng)
            steps.append(Step(queues[task].pop(0), task))
        return steps

    def loss_fn(step: Step, index: int) -> torch.Tensor:
        return _instruction_batch_loss(model, datasets[step.task], step.items)

    model.bridger.train()
    model.decoder.train()
    return _train_loop("3", config, params, plan, loss_fn, metrics, progress=progress)


def stage_dir(run: RunConfig, stage: str) -> Path:
    return Path(run.paths.checkpoint_dir) / f"stage_{stage}"


def check_prerequisites(stage: str, run: RunConfig) -> None:
    if stage not in PREREQUISITES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGE_ORDER)}")
    for required in PREREQUISITES[stage]:
        directory = stage_dir(run, required)
        if not (directory / CONFIG_FILE).exists():
            raise MissingCheckpointError(
                f"stage {stage} needs the stage {required} checkpoint at {directory}; run train --stage {required} first"
            )


def corpus_texts(records: Sequence[ManifestRecord]) -> list[str]:
    texts = []
    for record in records:
        texts.append(record.report)
        texts.extend(f"{qa.q} {qa.a}" for qa in record.qa)
    return texts


def corpus_tokenizer(records: Sequence[ManifestRecord]) -> Tokenizer:
    """Vocabulary over the instruction templates, reports and QA pairs of the training split."""
    templates = [
        (PROMPTS_DIR / f"{task}_instruction.txt").read_text(encoding="utf-8").replace("{question}", "")
        for task in ("report", "vqa")
    ]
    return Tokenizer.from_corpus(templates + corpus_texts(records))


def load_training_set(run: RunConfig) -> tuple[list[ManifestRecord], list[VolumeStack]]:
    manifest = run.paths.manifest_path
    records = read_manifest(manifest, split="train", min_report_words=run.preprocess.min_report_words)
    if not records:
        raise ValueError(f"no training records in {manifest}")
    stacks = [
        prepare_stack(load_record_volumes(r, manifest.parent), run.preprocess, run.vit.image_size)
        for r in records
    ]
    logger.info("loaded %d training volumes from %s", len(records), manifest)
    return records, stacks


def build_instruction_examples(
        model: MSVLM,
        records: Sequence[ManifestRecord],
        stacks: Sequence[VolumeStack],
) -> tuple[list[InstructionExample], list[InstructionExample]]:
    """Cache frozen Z-former features per volume and pair them with report and QA targets."""
    report_instruction = InstructionPrompt.load("report")
    reports, vqa = [], []
    model.zformer.eval()
    for record, stack in zip(records, stacks):
        with torch.no_grad():
            features = model.zformer(model.encode(stack))
        target = torch.tensor(model.tokenizer.encode(record.report, add_eos=True))
        reports.append(InstructionExample(features, report_instruction, target, "report"))
        for qa in record.qa:
            answer = torch.tensor(model.tokenizer.encode(qa.a, add_eos=True))
            vqa.append(InstructionExample(features, InstructionPrompt.load("vqa", qa.q), answer, "vqa"))
    return reports, vqa


def _build_model(stage: str, run: RunConfig, records: Sequence[ManifestRecord]) -> MSVLM:
    torch.manual_seed(run.seed)
    match stage:
        case "lm" | "0":
            model = MSVLM(run, corpus_tokenizer(records))
        case "1":
            model = MSVLM(run, corpus_tokenizer(records))
            model.load_components(stage_dir(run, "0"), ("encoder",))
        case "2":
            model = MSVLM(run, load_tokenizer(stage_dir(run, "lm")))
            model.load_components(stage_dir(run, "1"), ("encoder", "zformer"))
            model.load_components(stage_dir(run, "lm"), ("decoder",))
        case "3":
            model = MSVLM(run, load_tokenizer(stage_dir(run, "2")))
            model.load_components(stage_dir(run, "2"))
        case _:
            raise ValueError(f"unknown stage {stage!r}")
    return model.to(torch.device(MSVLM_DEVICE))


def run_stage(stage: str, run: RunConfig, progress: Optional[ProgressFn] = None) -> StageResult:
    """Check prerequisites, load data and upstream weights, train one stage and snapshot the model."""
    check_prerequisites(stage, run)
    records, stacks = load_training_set(run)
    model = _build_model(stage, run, records)
    model.eval()

    with MetricsWriter(run.paths.output_dir, stage) as metrics:
        match stage:
            case "lm":
                losses = pretrain_decoder(model, corpus_texts(records), run, metrics, progress)
            case "0":
                images = [s for stack in stacks for s in stack.slices]
                state, losses = stage0_train(images, run, metrics, progress)
                # downstream stages encode with the teacher backbone
                model.encoder.load_state_dict(state.teacher.backbone.state_dict())
            case "1":
                z_vols = [model.encode(stack) for stack in stacks]
                losses = stage1_train(model, z_vols, run, metrics, progress)
            case "2":
                reports, _ = build_instruction_examples(model, records, stacks)
                losses = stage2_train(model, reports, run, metrics, progress)
            case "3":
                reports, vqa = build_instruction_examples(model, records, stacks)
                losses = stage3_train(model, reports, vqa, run, metrics, progress)

    directory = model.save(stage_dir(run, stage), meta={"stage": stage, "seed": run.seed})
    logger.info("stage %s finished after %d steps; snapshot at %s", stage, len(losses), directory)
    return StageResult(stage, losses, directory)
