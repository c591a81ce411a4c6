import logging
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from app.backend.operations import ManifestRecord, QAPair, VolumeMeta
from app.backend.phantoms import FINDING_TYPES, random_findings, synth_study, synth_volume
from app.backend.volume import save_volume
from app.backend.vqa import synth_vqa_from_findings, synth_vqa_from_report
from app.celery_app import celery_app
from app.config import load_run_config
from app.pipeline import run_stage

logger = logging.getLogger(__name__)

VOLUME_DIR = "volumes"


@celery_app.task
def synthesize_example(
        seed: int,
        shape: Sequence[int],
        out_dir: str,
        split: str = "train",
        multi_phase: bool = False,
        vqa_source: str = "template",
        type_questions: bool = False,
) -> dict[str, Any]:
    """
    Generate one phantom example and write its volume files.

    Args:
        seed: Phantom seed; the record is a pure function of it
        shape: (z, y, x) voxel grid
        out_dir: Dataset directory; volume paths in the record are relative to it
        split: "train" or "test"
        multi_phase: Render a multi-phase study instead of a single volume
        vqa_source: "template" or "llm" (LLM synthesis with template fallback)
        type_questions: Also ask which abnormality sits in each finding's region

    Returns:
        The manifest record as a JSON-ready dict
    """
    shape = tuple(int(s) for s in shape)
    findings = random_findings(np.random.default_rng(seed))
    if multi_phase:
        volumes, report, qa = synth_study(seed, findings, shape)
    else:
        volume, report, qa = synth_volume(seed, findings, shape)
        volumes = [volume]

    if vqa_source == "llm":
        qa = synth_vqa_from_report(report, fallback_findings=findings, include_type_questions=type_questions)
    elif type_questions:
        qa = synth_vqa_from_findings(findings, include_type_questions=True)

    record_id = f"phantom-{seed:06d}"
    paths, metas = [], []
    for k, volume in enumerate(volumes):
        relative = f"{VOLUME_DIR}/{record_id}_{k}.vol"
        save_volume(volume, Path(out_dir) / relative)
        paths.append(relative)
        metas.append(VolumeMeta(phase=volume.phase, view=volume.view, modifiers=sorted(volume.modifiers)))

    present = {f.finding_type for f in findings if f.present}
    record = ManifestRecord(
        id=record_id,
        volume_paths=paths,
        report=report,
        qa=[QAPair(q=q, a=a) for q, a in qa],
        labels={name: int(name in present) for name in FINDING_TYPES},
        findings=[f.to_dict() for f in findings],
        volume_meta=metas,
        split=split,
        seed=seed,
    )
    return record.model_dump(mode="json")


@celery_app.task(bind=True)
def train_stage(self, stage: str, config_path: Optional[str] = None, seed: Optional[int] = None) -> dict[str, Any]:
    """
    Background task running one training stage.

    Args:
        stage: One of lm, 0, 1, 2, 3
        config_path: Run configuration JSON; defaults when omitted
        seed: Overrides the configuration's seed

    Returns:
        dict with the step count, final loss and checkpoint directory
    """
    def report_progress(fraction: float, status: str) -> None:
        if not self.request.is_eager:
            self.update_state(state="PROGRESS", meta={"status": status, "progress": int(100 * fraction)})

    try:
        run = load_run_config(Path(config_path) if config_path else None, seed)
        report_progress(0.0, f"Starting stage {stage}")
        result = run_stage(stage, run, progress=report_progress)
        return {
            "stage": stage,
            "steps": result.steps,
            "final_loss": result.losses[-1] if result.losses else None,
            "checkpoint": str(result.checkpoint),
            "status": "success",
        }
    except Exception:
        logger.exception("stage %s failed", stage)
        raise
