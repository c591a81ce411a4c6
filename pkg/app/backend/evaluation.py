"""Manifest-level evaluation: NLG metrics, clinical accuracy, VQA accuracy and LLM-judge scores."""
import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from app.backend.judge import CHEST_CATEGORIES, judge_many
from app.backend.labels import DESK_LEXICON, AbnormalityLexicon, answer_to_label, ca_metrics, extract_labels
from app.backend.llm_client import LLMClient
from app.backend.nlg import bleu4, meteor, rouge_l
from app.backend.operations import ManifestRecord
from app.backend.utils import JsonLinesWriter
from app.config import LLM_MAX_IN_FLIGHT

logger = logging.getLogger(__name__)

METRIC_FAMILIES = ("nlg", "ca", "judge")
LABEL_SOURCE = "rule-based negation-aware extractor (stand-in for a learned report classifier)"
NLG_METRICS = ("bleu4", "rouge_l", "meteor")


def parse_metric_families(spec: str) -> tuple[str, ...]:
    families = tuple(part.strip() for part in spec.split(",") if part.strip())
    unknown = [f for f in families if f not in METRIC_FAMILIES]
    if unknown or not families:
        raise ValueError(f"metrics must be a comma list of {', '.join(METRIC_FAMILIES)}, got {spec!r}")
    return families


def pair_records(
        predictions: Sequence[ManifestRecord],
        references: Sequence[ManifestRecord],
) -> list[tuple[ManifestRecord, ManifestRecord]]:
    """Match predictions to references by id; both sides must cover the same ids."""
    by_id = {r.id: r for r in references}
    pred_ids = [p.id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids) or set(pred_ids) != set(by_id):
        missing = sorted(set(by_id) - set(pred_ids))
        extra = sorted(set(pred_ids) - set(by_id))
        raise ValueError(f"prediction/reference manifests disagree: missing {missing[:5]}, unexpected {extra[:5]}")
    return [(p, by_id[p.id]) for p in predictions]


def _presence_labels(
        prediction: ManifestRecord,
        reference: ManifestRecord,
        lexicon: AbnormalityLexicon,
) -> Optional[tuple[dict[str, int], dict[str, int]]]:
    """Label vectors from answers to presence questions; None when the sample asks none."""
    answers = {qa.q: qa.a for qa in prediction.qa}
    pred = {name: 0 for name in lexicon.names}
    gt = {name: 0 for name in lexicon.names}
    asked = False
    for qa in reference.qa:
        if not qa.q.lower().startswith("is there") or qa.q not in answers:
            continue
        for name, hit in extract_labels(qa.q, lexicon).items():
            if hit:
                asked = True
                pred[name] = answer_to_label(answers[qa.q])
                gt[name] = answer_to_label(qa.a)
    return (pred, gt) if asked else None


def evaluate(
        predictions: Sequence[ManifestRecord],
        references: Sequence[ManifestRecord],
        metrics: Sequence[str] = METRIC_FAMILIES,
        client: Optional[LLMClient] = None,
        lexicon: AbnormalityLexicon = DESK_LEXICON,
        judge_categories: Sequence[str] = CHEST_CATEGORIES,
        max_in_flight: int = LLM_MAX_IN_FLIGHT,
) -> tuple[list[dict[str, Any]], dict[str, Any]]:
    """Per-sample rows and a summary for the selected metric families."""
    pairs = pair_records(predictions, references)
    rows: list[dict[str, Any]] = [{"id": p.id} for p, _ in pairs]
    summary: dict[str, Any] = {"num_samples": len(pairs), "metrics": list(metrics)}

    if "nlg" in metrics:
        for row, (p, g) in zip(rows, pairs):
            row["bleu4"] = bleu4(p.report, [g.report])
            row["rouge_l"] = rouge_l(p.report, g.report)
            row["meteor"] = meteor(p.report, g.report)
        summary["nlg"] = {m: float(np.mean([r[m] for r in rows])) if rows else 0.0 for m in NLG_METRICS}

    if "ca" in metrics:
        pred_labels, gt_labels, vqa_pred, vqa_gt = [], [], [], []
        for row, (p, g) in zip(rows, pairs):
            row["labels_pred"] = extract_labels(p.report, lexicon)
            row["labels_gt"] = extract_labels(g.report, lexicon)
            pred_labels.append(row["labels_pred"])
            gt_labels.append(row["labels_gt"])
            presence = _presence_labels(p, g, lexicon)
            if presence is not None:
                vqa_pred.append(presence[0])
                vqa_gt.append(presence[1])
        summary["ca"] = ca_metrics(pred_labels, gt_labels).to_dict()
        summary["label_source"] = LABEL_SOURCE
        if vqa_gt:
            summary["vqa_ca"] = ca_metrics(vqa_pred, vqa_gt).to_dict()

    if "judge" in metrics:
        judged = judge_many([(p.report, g.report) for p, g in pairs], judge_categories, client, max_in_flight)
        for row, scores in zip(rows, judged.scores):
            row["judge"] = scores
        summary["judge"] = {
            "averages": judged.averages,
            "parse_errors": judged.parse_errors,
            "request_errors": judged.request_errors,
        }
    return rows, summary


def write_evaluation(rows: Sequence[dict[str, Any]], summary: dict[str, Any], out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    with JsonLinesWriter(out_dir / "per_sample.jsonl") as writer:
        for row in rows:
            writer.write(row)
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    logger.info("wrote %d per-sample rows and %s", len(rows), path)
    return path
