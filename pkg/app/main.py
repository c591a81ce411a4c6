import json
import logging
from pathlib import Path
from typing import Optional

import httpx
import typer
from celery import group
from rich.console import Console

from app.backend.evaluation import evaluate, parse_metric_families, write_evaluation
from app.backend.judge import build_client
from app.backend.labels import extract_labels
from app.backend.operations import (
    ManifestRecord,
    QAPair,
    load_record_volumes,
    prepare_stack,
    read_manifest,
    write_manifest,
)
from app.backend.utils import configure_logging, derive_seed, seed_everything
from app.backend.volume import load_volume
from app.config import LOG_LEVEL, load_run_config
from app.models.decoder import InstructionPrompt
from app.models.msvlm import load_msvlm
from app.pipeline import run_stage
from app.tasks import synthesize_example, train_stage

logger = logging.getLogger(__name__)

app = typer.Typer(name="msvlm", help="Desk-scale multi-slice volume-language pipeline.", no_args_is_help=True)
console = Console()


def _fail(exc: Exception) -> None:
    typer.echo(f"error: {' '.join(str(exc).split())}", err=True)
    raise typer.Exit(code=1)


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise ValueError(f"shape must be z,y,x, got {text!r}")
    return tuple(int(p) for p in parts)


@app.callback()
def main(log_level: str = typer.Option(LOG_LEVEL, help="Logging level.")) -> None:
    configure_logging(log_level)


@app.command("synth-data")
def cmd_synth_data(
        seed: int = typer.Option(0, help="Dataset seed."),
        count: int = typer.Option(10, help="Number of phantom examples."),
        shape: str = typer.Option("32,64,64", help="Volume shape z,y,x."),
        out: Path = typer.Option(Path("data"), help="Output dataset directory."),
        test_count: int = typer.Option(0, help="Trailing examples assigned to the test split."),
        multi_phase: bool = typer.Option(False, help="Write multi-phase studies."),
        vqa_source: str = typer.Option("template", help="template or llm."),
        type_questions: bool = typer.Option(False, help="Add a which-abnormality question per finding region."),
) -> None:
    """Generate phantom volumes, reports and QA pairs plus a JSON-lines manifest."""
    try:
        if count < 1 or not 0 <= test_count <= count:
            raise ValueError("count must be >= 1 and test_count within [0, count]")
        if vqa_source not in ("template", "llm"):
            raise ValueError(f"unknown vqa source {vqa_source!r}")
        dims = _parse_shape(shape)
        out.mkdir(parents=True, exist_ok=True)
        jobs = group(
            synthesize_example.s(
                derive_seed(seed, i), dims, str(out),
                "test" if i >= count - test_count else "train", multi_phase, vqa_source, type_questions,
            )
            for i in range(count)
        )
        rows = jobs.apply_async().join()
        # group results come back in submission order, i.e. seed order
        written = write_manifest((ManifestRecord.model_validate(r) for r in rows), out / "manifest.jsonl")
        console.print(f"wrote {written} records to {out / 'manifest.jsonl'}")
    except (ValueError, OSError) as exc:
        _fail(exc)


@app.command("train")
def cmd_train(
        stage: str = typer.Option(..., help="Stage: lm, 0, 1, 2 or 3."),
        config: Optional[Path] = typer.Option(None, help="Run configuration JSON."),
        seed: Optional[int] = typer.Option(None, help="Overrides the configured seed."),
        queue: bool = typer.Option(False, help="Submit to the training queue instead of running here."),
) -> None:
    """Run one training stage; stage N refuses to start without its upstream checkpoints."""
    try:
        if queue:
            result = train_stage.apply_async(args=[stage, str(config) if config else None, seed])
            console.print(f"submitted stage {stage} as task {result.id}")
            return
        run = load_run_config(config, seed)
        result = run_stage(stage, run)
        final = f"{result.losses[-1]:.4f}" if result.losses else "n/a"
        console.print(f"stage {stage}: {result.steps} steps, final loss {final}, checkpoint {result.checkpoint}")
    except (ValueError, OSError) as exc:
        _fail(exc)


@app.command("predict")
def cmd_predict(
        checkpoint: Path = typer.Option(..., help="Model snapshot directory."),
        manifest: Path = typer.Option(..., help="Dataset manifest."),
        out: Path = typer.Option(Path("outputs/predictions.jsonl"), help="Prediction manifest to write."),
        split: str = typer.Option("test", help="Split to predict: train, test or all."),
        fixed_z_length: Optional[int] = typer.Option(None, help="Pad/crop every volume to this many slices."),
        max_len: int = typer.Option(64, help="Maximum generated tokens."),
        seed: int = typer.Option(0, help="Seed."),
) -> None:
    """Generate reports and VQA answers for every record of a split."""
    try:
        seed_everything(seed)
        model = load_msvlm(checkpoint)
        preprocess = model.config.preprocess
        if fixed_z_length is not None and preprocess.fixed_z_length is None:
            preprocess = preprocess.model_copy(update={"fixed_z_length": fixed_z_length})
        records = read_manifest(manifest, split=None if split == "all" else split)
        if not records:
            raise ValueError(f"no {split} records in {manifest}")
        report_instruction = InstructionPrompt.load("report")
        predictions = []
        for record in records:
            stack = prepare_stack(load_record_volumes(record, manifest.parent), preprocess, model.config.vit.image_size)
            report = model.generate(stack, report_instruction, max_len, seed=seed)
            answers = [
                QAPair(q=qa.q, a=model.generate(stack, InstructionPrompt.load("vqa", qa.q), max_len, seed=seed))
                for qa in record.qa
            ]
            predictions.append(record.model_copy(update={
                "report": report, "qa": answers, "labels": extract_labels(report),
            }))
            logger.debug("%s: %s", record.id, report)
        written = write_manifest(predictions, out)
        console.print(f"wrote {written} predictions to {out}")
    except (ValueError, OSError) as exc:
        _fail(exc)


@app.command("generate")
def cmd_generate(
        checkpoint: Path = typer.Option(..., help="Model snapshot directory."),
        volume: Path = typer.Option(..., help="Volume file."),
        task: str = typer.Option("report", help="report or vqa."),
        question: Optional[str] = typer.Option(None, help="Question for the vqa task."),
        max_len: int = typer.Option(64, help="Maximum generated tokens."),
        strategy: str = typer.Option("greedy", help="greedy or top_k."),
        seed: int = typer.Option(0, help="Sampling seed."),
) -> None:
    """Print the generated report or answer for one volume; every slice is kept."""
    if task not in ("report", "vqa"):
        raise typer.BadParameter(f"task must be report or vqa, got {task!r}")
    if task == "vqa" and not question:
        raise typer.BadParameter("--question is required for the vqa task")
    try:
        seed_everything(seed)
        model = load_msvlm(checkpoint)
        stack = prepare_stack([load_volume(volume)], model.config.preprocess, model.config.vit.image_size)
        instruction = InstructionPrompt.load(task, question)
        typer.echo(model.generate(stack, instruction, max_len, strategy, seed))
    except (ValueError, OSError) as exc:
        _fail(exc)


@app.command("eval")
def cmd_eval(
        pred_manifest: Path = typer.Option(..., help="Prediction manifest."),
        gt_manifest: Path = typer.Option(..., help="Reference manifest."),
        metrics: str = typer.Option("nlg,ca,judge", help="Comma list of nlg, ca, judge."),
        out: Path = typer.Option(Path("outputs/eval"), help="Directory for per_sample.jsonl and summary.json."),
        split: str = typer.Option("test", help="Split to compare: train, test or all."),
        client: Optional[str] = typer.Option(None, help="Judge client: mock or http; defaults to the run config's."),
        config: Optional[Path] = typer.Option(None, help="Run configuration JSON supplying client_mode."),
) -> None:
    """Score predictions against references and write per-sample rows plus a summary."""
    try:
        families = parse_metric_families(metrics)
        chosen = None if split == "all" else split
        predictions = read_manifest(pred_manifest, split=chosen)
        references = read_manifest(gt_manifest, split=chosen)
        mode = client or load_run_config(config).client_mode
        judge_client = build_client(mode) if "judge" in families else None
        rows, summary = evaluate(predictions, references, families, judge_client)
        write_evaluation(rows, summary, out)
        console.print_json(json.dumps(summary))
    except (ValueError, OSError, httpx.HTTPError) as exc:
        _fail(exc)


if __name__ == "__main__":
    app()
