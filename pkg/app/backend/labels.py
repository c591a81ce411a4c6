"""Rule-based, negation-aware abnormality labels and clinical-accuracy metrics.

The extractor stands in for a learned report classifier: a finding is positive
when one of its trigger phrases occurs in a sentence with no negation cue
before it in that sentence.
"""
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

DEFAULT_NEGATION_CUES = ("no", "without", "absent", "not")

_SENTENCE_SPLIT = re.compile(r"[.!?;\n]+")


@dataclass(frozen=True)
class LexiconEntry:
    name: str
    triggers: tuple[str, ...]
    negation_cues: tuple[str, ...] = DEFAULT_NEGATION_CUES


@dataclass(frozen=True)
class AbnormalityLexicon:
    entries: tuple[LexiconEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("lexicon names must be unique")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]


DESK_LEXICON = AbnormalityLexicon((
    LexiconEntry("nodule", ("nodule",)),
    LexiconEntry("effusion", ("effusion",)),
    LexiconEntry("consolidation", ("consolidation",)),
    LexiconEntry("cardiomegaly", ("cardiomegaly", "enlarged heart")),
))

CHEST_CT_LEXICON = AbnormalityLexicon((
    LexiconEntry("Medical material", ("medical material", "catheter", "pacemaker", "stent", "port")),
    LexiconEntry("Arterial wall calcification", ("arterial wall calcification", "aortic calcification",
                                                 "atherosclerotic calcification")),
    LexiconEntry("Cardiomegaly", ("cardiomegaly", "enlarged heart")),
    LexiconEntry("Pericardial effusion", ("pericardial effusion",)),
    LexiconEntry("Coronary artery wall calcification", ("coronary artery calcification",
                                                        "coronary artery wall calcification")),
    LexiconEntry("Hiatal hernia", ("hiatal hernia", "hiatus hernia")),
    LexiconEntry("Lymphadenopathy", ("lymphadenopathy", "enlarged lymph node")),
    LexiconEntry("Emphysema", ("emphysema",)),
    LexiconEntry("Atelectasis", ("atelectasis",)),
    LexiconEntry("Lung nodule", ("nodule",)),
    LexiconEntry("Lung opacity", ("opacity", "opacities", "ground glass")),
    LexiconEntry("Pulmonary fibrotic sequela", ("fibrotic", "fibrosis")),
    LexiconEntry("Pleural effusion", ("pleural effusion",)),
    LexiconEntry("Mosaic attenuation pattern", ("mosaic attenuation",)),
    LexiconEntry("Peribronchial thickening", ("peribronchial thickening",)),
    LexiconEntry("Consolidation", ("consolidation",)),
    LexiconEntry("Bronchiectasis", ("bronchiectasis",)),
    LexiconEntry("Interlobular septal thickening", ("interlobular septal thickening", "septal thickening")),
))

# Findings scored by label agreement; the remaining rectal findings go to the judge.
RECTAL_MRI_CA_LEXICON = AbnormalityLexicon((
    LexiconEntry("CRM", ("crm involvement", "crm threatened", "circumferential resection margin involvement",
                         "crm positive")),
    LexiconEntry("ASI", ("anal sphincter involvement", "sphincter invasion")),
    LexiconEntry("MLNI", ("mesorectal lymph node involvement", "lymph node metastasis", "mesorectal lymph node")),
    LexiconEntry("EMVI", ("extramural venous invasion", "emvi positive")),
))

RECTAL_MRI_FINDINGS = {
    "tumor_location": "Tumour location, measured in centimetres from the anal verge.",
    "peritoneal_involvement": "Peritoneal involvement, graded as none, partial or full.",
    "t_stage": "T stage of the tumour (T1 to T4).",
    "crm": "Circumferential resection margin involvement.",
    "asi": "Anal sphincter involvement.",
    "mlni": "Mesorectal lymph node involvement.",
    "emvi": "Extramural venous invasion.",
}
RECTAL_JUDGE_FINDINGS = ("tumor_location", "peritoneal_involvement", "t_stage")


def _word_positions(sentence: str, phrase: str) -> list[int]:
    pattern = re.compile(r"(?<![a-z0-9])" + re.escape(phrase) + r"(?![a-z0-9])")
    return [m.start() for m in pattern.finditer(sentence)]


def _negated_before(sentence: str, position: int, cues: Sequence[str]) -> bool:
    prefix = sentence[:position]
    return any(_word_positions(prefix, cue) for cue in cues)


def extract_labels(report: str, lexicon: AbnormalityLexicon = DESK_LEXICON) -> dict[str, int]:
    sentences = [s.strip() for s in _SENTENCE_SPLIT.split(report.lower()) if s.strip()]
    labels = {}
    for entry in lexicon.entries:
        positive = 0
        for sentence in sentences:
            for trigger in entry.triggers:
                if any(not _negated_before(sentence, pos, entry.negation_cues)
                       for pos in _word_positions(sentence, trigger)):
                    positive = 1
                    break
            if positive:
                break
        labels[entry.name] = positive
    return labels


@dataclass
class FindingScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @property
    def scored(self) -> bool:
        """False when the finding never occurs in either the predictions or the references."""
        return self.tp + self.fp + self.fn > 0


@dataclass
class CAReport:
    per_finding: dict[str, FindingScore] = field(default_factory=dict)
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_f1: float = 0.0

    @property
    def scored_findings(self) -> list[str]:
        return [name for name, score in self.per_finding.items() if score.scored]

    def to_dict(self) -> dict:
        return {
            "per_finding": {name: vars(score) for name, score in self.per_finding.items()},
            "scored_findings": self.scored_findings,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def _score(pred: np.ndarray, gt: np.ndarray) -> FindingScore:
    # undefined ratios count as 0
    precision, recall, f1, _ = precision_recall_fscore_support(
        gt, pred, labels=[1], average=None, zero_division=0,
    )
    tp = int(np.sum((pred == 1) & (gt == 1)))
    fp = int(np.sum((pred == 1) & (gt == 0)))
    fn = int(np.sum((pred == 0) & (gt == 1)))
    return FindingScore(float(precision[0]), float(recall[0]), float(f1[0]), tp, fp, fn)


def ca_metrics(pred: Sequence[dict[str, int]], gt: Sequence[dict[str, int]]) -> CAReport:
    """Per-finding P/R/F1; macro scores average the findings that occur on either side."""
    if len(pred) != len(gt):
        raise ValueError(f"prediction/reference length mismatch: {len(pred)} != {len(gt)}")
    if not gt:
        return CAReport()
    report = CAReport()
    for name in gt[0]:
        if any(name not in p for p in pred) or any(name not in g for g in gt):
            raise ValueError(f"label vectors disagree on lexicon entry {name!r}")
        pred_column = np.array([int(p[name]) for p in pred])
        gt_column = np.array([int(g[name]) for g in gt])
        report.per_finding[name] = _score(pred_column, gt_column)
    scored = [report.per_finding[name] for name in report.scored_findings]
    if scored:
        report.macro_precision = float(np.mean([s.precision for s in scored]))
        report.macro_recall = float(np.mean([s.recall for s in scored]))
        report.macro_f1 = float(np.mean([s.f1 for s in scored]))
    return report


def answer_to_label(answer: str) -> int:
    """Map a presence answer ("Yes, there is ..." / "No, ...") to a binary label."""
    words = re.findall(r"[a-z]+", answer.lower())
    return 0 if not words or words[0] in ("no", "not", "none") else 1
