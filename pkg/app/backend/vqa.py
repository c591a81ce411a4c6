"""Synthetic VQA pairs: deterministic templates and LLM-driven synthesis from reports."""
import asyncio
import logging
import re
from typing import Optional, Sequence

from app.backend.llm_client import HttpLLMClient, LLMClient
from app.backend.phantoms import FINDING_NAMES, FindingSpec
from app.config import PROMPTS_DIR

logger = logging.getLogger(__name__)

NO_FINDING_QA = ("Is there any abnormality in this volume?", "No, there is no abnormality in this volume.")
MIN_ANSWER_WORDS = 3

_QA_LINE = re.compile(r"^\s*Q:\s*(?P<q>.+?)\s*\n\s*A:\s*(?P<a>.+?)\s*$", re.MULTILINE)


def synth_vqa_from_findings(
        findings: Sequence[FindingSpec],
        include_type_questions: bool = False,
) -> list[tuple[str, str]]:
    """Presence, location and size questions for every present finding."""
    present = [f for f in findings if f.present]
    if not present:
        return [NO_FINDING_QA]
    pairs = []
    for spec in present:
        name = FINDING_NAMES[spec.finding_type]
        size = int(round(spec.size_mm))
        pairs.append((f"Is there {name} in this volume?", f"Yes, there is {name} in this volume."))
        pairs.append((f"Where is the {name} located?", f"The {name} is in the {spec.location} region."))
        pairs.append((f"What is the size of the {name}?", f"The {name} measures {size} mm."))
        if include_type_questions:
            pairs.append(
                (f"What abnormality is present in the {spec.location} region?",
                 f"There is {name} in the {spec.location} region.")
            )
    return pairs


def load_synthesis_template() -> str:
    return (PROMPTS_DIR / "vqa_synthesis.txt").read_text(encoding="utf-8")


def parse_qa_pairs(text: str, min_answer_words: int = MIN_ANSWER_WORDS) -> list[tuple[str, str]]:
    """Read Q:/A: line pairs, dropping overly brief answers."""
    pairs = []
    for match in _QA_LINE.finditer(text):
        question, answer = match.group("q"), match.group("a")
        if len(answer.split()) < min_answer_words:
            continue
        pairs.append((question, answer))
    return pairs


def synth_vqa_from_report(
        report: str,
        client: Optional[LLMClient] = None,
        fallback_findings: Optional[Sequence[FindingSpec]] = None,
        include_type_questions: bool = False,
) -> list[tuple[str, str]]:
    """Ask the client for QA pairs, the configured HTTP endpoint when none is given.

    Any failure, including a missing endpoint, falls back to the templates.
    """
    prompt = load_synthesis_template().replace("{report}", report)
    try:
        client = client or HttpLLMClient()
        pairs = parse_qa_pairs(asyncio.run(client.complete(prompt)))
    except Exception as exc:
        logger.warning("VQA synthesis request failed: %s", exc)
        pairs = []
    if not pairs and fallback_findings is not None:
        return synth_vqa_from_findings(fallback_findings, include_type_questions)
    return pairs
