"""Dataset manifest records (JSON-lines) and record -> VolumeStack preparation."""
import logging
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

from pydantic import BaseModel, Field

from app.backend.utils import JsonLinesWriter, read_json_lines
from app.backend.volume import (
    Modifier,
    Phase,
    View,
    Volume,
    VolumeStack,
    load_volume,
    normalize_intensity,
    pad_or_center_crop,
    resample_to_spacing,
    select_and_sample_phases,
    stack_volume,
)
from app.config import PreprocessConfig

logger = logging.getLogger(__name__)

Split = Literal["train", "test"]


class QAPair(BaseModel):
    q: str
    a: str


class VolumeMeta(BaseModel):
    phase: Phase = Phase.CT
    view: View = View.AXIAL
    modifiers: list[Modifier] = Field(default_factory=list)


class ManifestRecord(BaseModel):
    id: str
    volume_paths: list[str] = Field(default_factory=list)
    report: str
    qa: list[QAPair] = Field(default_factory=list)
    labels: dict[str, int] = Field(default_factory=dict)
    findings: list[dict] = Field(default_factory=list)
    volume_meta: list[VolumeMeta] = Field(default_factory=list)
    split: Split = "train"
    seed: Optional[int] = None


def write_manifest(records: Iterable[ManifestRecord], path: Path) -> int:
    with JsonLinesWriter(path) as writer:
        for record in records:
            writer.write(record.model_dump(mode="json"))
        return writer.count


def read_manifest(
        path: Path,
        split: Optional[Split] = None,
        min_report_words: int = 0,
) -> list[ManifestRecord]:
    """Load records, optionally one split only, dropping reports shorter than min_report_words."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    records = [ManifestRecord.model_validate(row) for row in read_json_lines(path)]
    if split is not None:
        records = [r for r in records if r.split == split]
    if min_report_words > 0:
        kept = [r for r in records if len(r.report.split()) >= min_report_words]
        if len(kept) < len(records):
            logger.info("dropped %d records with reports under %d words", len(records) - len(kept), min_report_words)
        records = kept
    return records


def load_record_volumes(record: ManifestRecord, root: Path) -> list[Volume]:
    """Volumes of a record; relative paths resolve against the manifest's directory."""
    if not record.volume_paths:
        raise ValueError(f"record {record.id} has no volumes")
    volumes = []
    for i, relative in enumerate(record.volume_paths):
        meta = record.volume_meta[i] if i < len(record.volume_meta) else VolumeMeta()
        path = Path(relative)
        path = path if path.is_absolute() else Path(root) / path
        volumes.append(load_volume(path, meta.view, meta.phase, frozenset(meta.modifiers), record.id))
    return volumes


def preprocess_volume(volume: Volume, config: PreprocessConfig, image_size: int) -> Volume:
    if config.target_spacing is not None:
        volume = resample_to_spacing(volume, config.target_spacing)
    depth = config.fixed_z_length or volume.num_slices
    volume = pad_or_center_crop(volume, (depth, image_size, image_size))
    return normalize_intensity(volume)


def prepare_stack(volumes: Sequence[Volume], config: PreprocessConfig, image_size: int) -> VolumeStack:
    """A single volume keeps every slice; several are ranked by phase and sampled."""
    volumes = [preprocess_volume(v, config, image_size) for v in volumes]
    if len(volumes) == 1:
        return stack_volume(volumes[0], mode=config.channel_mode)
    return select_and_sample_phases(
        volumes,
        phases_needed=config.phases_needed,
        slices_per_phase=config.slices_per_phase,
        mode=config.channel_mode,
    )
