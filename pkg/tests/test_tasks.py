from pathlib import Path

import numpy as np

from app.backend.operations import ManifestRecord, load_record_volumes
from app.backend.phantoms import random_findings
from app.backend.vqa import synth_vqa_from_findings
from app.celery_app import celery_app
from app.tasks import synthesize_example, train_stage

TINY_SHAPE = (8, 16, 16)


def test_tasks_run_eagerly_in_tests():
    assert celery_app.conf.task_always_eager
    assert celery_app.conf.task_routes["app.tasks.train_stage"] == {"queue": "training"}


def test_synthesize_example_is_a_function_of_the_seed(tmp_path):
    """Two runs with one seed give identical records and voxels."""
    first = synthesize_example.delay(11, TINY_SHAPE, str(tmp_path / "a"), "test").get()
    second = synthesize_example.delay(11, TINY_SHAPE, str(tmp_path / "b"), "test").get()
    assert first == second
    record = ManifestRecord.model_validate(first)
    assert record.id == "phantom-000011" and record.split == "test"
    assert record.volume_paths == ["volumes/phantom-000011_0.vol"]
    assert set(record.labels) == {"nodule", "effusion", "consolidation", "cardiomegaly"}
    a = load_record_volumes(record, tmp_path / "a")[0]
    b = load_record_volumes(record, tmp_path / "b")[0]
    assert a.shape == TINY_SHAPE
    assert (a.voxels == b.voxels).all()


def test_multi_phase_example(tmp_path):
    row = synthesize_example.delay(3, TINY_SHAPE, str(tmp_path), "train", True).get()
    record = ManifestRecord.model_validate(row)
    assert len(record.volume_paths) == len(record.volume_meta) > 1
    for relative in record.volume_paths:
        assert (tmp_path / relative).exists()


def test_llm_vqa_without_endpoint_uses_templates(tmp_path, monkeypatch):
    """An unconfigured endpoint degrades to template QA instead of failing the task."""
    monkeypatch.setattr("app.backend.llm_client.LLM_ENDPOINT", "")
    template = synthesize_example.delay(5, TINY_SHAPE, str(tmp_path / "t"), "train").get()
    llm = synthesize_example.delay(5, TINY_SHAPE, str(tmp_path / "l"), "train", False, "llm").get()
    assert llm["qa"] == template["qa"]


def test_type_questions_reach_the_record(tmp_path):
    findings = random_findings(np.random.default_rng(2))
    row = synthesize_example(2, TINY_SHAPE, str(tmp_path), "train", False, "template", True)
    assert [(qa["q"], qa["a"]) for qa in row["qa"]] == synth_vqa_from_findings(findings, include_type_questions=True)


def test_train_stage_task(tiny_run, tiny_dataset, tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(tiny_run.model_dump_json())
    result = train_stage.delay("lm", str(config_path)).get()
    assert result["status"] == "success"
    assert result["steps"] == 3
    assert Path(result["checkpoint"]).is_dir()
