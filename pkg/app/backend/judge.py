"""LLM-judge harness: category templates, strict binary parsing, bounded concurrent calls."""
import asyncio
import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import httpx

from app.backend.labels import DESK_LEXICON, AbnormalityLexicon, RECTAL_MRI_FINDINGS, extract_labels
from app.backend.llm_client import HttpLLMClient, LLMClient, LLMResponseError, StaticMockClient
from app.backend.phantoms import REGIONS
from app.config import LLM_MAX_IN_FLIGHT, PROMPTS_DIR

logger = logging.getLogger(__name__)

CHEST_CATEGORIES = ("Presence", "Location", "Severity", "Hallucination")
JUDGE_CATEGORIES = CHEST_CATEGORIES + tuple(RECTAL_MRI_FINDINGS)
MAX_RETRIES = 2


class JudgeParseError(ValueError):
    pass


@dataclass(frozen=True)
class JudgePrompt:
    category: str
    text: str
    expected: tuple[str, str] = ("0", "1")


def _template_for(category: str) -> str:
    if category in CHEST_CATEGORIES:
        return (PROMPTS_DIR / f"judge_{category.lower()}.txt").read_text(encoding="utf-8")
    if category in RECTAL_MRI_FINDINGS:
        template = (PROMPTS_DIR / "judge_rectal.txt").read_text(encoding="utf-8")
        return (template.replace("{finding}", category)
                .replace("{finding_description}", RECTAL_MRI_FINDINGS[category]))
    raise ValueError(f"unknown judge category {category!r}")


def build_judge_prompt(generated: str, reference: str, category: str) -> JudgePrompt:
    text = _template_for(category).replace("{reference}", reference).replace("{generated}", generated)
    return JudgePrompt(category, text)


def parse_judgement(response: str) -> int:
    answer = response.strip()
    if answer not in ("0", "1"):
        raise JudgeParseError(f"judge answered {response!r}, expected '0' or '1'")
    return int(answer)


async def judge_evaluate_async(generated: str, reference: str, category: str, client: LLMClient) -> int:
    prompt = build_judge_prompt(generated, reference, category)
    for attempt in range(MAX_RETRIES + 1):
        try:
            response = await client.complete(prompt.text)
            break
        except httpx.HTTPError as exc:
            if attempt == MAX_RETRIES:
                raise
            logger.warning("judge request failed (attempt %d): %s", attempt + 1, exc)
    return parse_judgement(response)


def judge_evaluate(generated: str, reference: str, category: str, client: LLMClient) -> int:
    return asyncio.run(judge_evaluate_async(generated, reference, category, client))


@dataclass
class JudgeSummary:
    scores: list[dict[str, Optional[int]]]
    averages: dict[str, float]
    parse_errors: dict[str, int]
    request_errors: dict[str, int]


async def _judge_many(
        pairs: Sequence[tuple[str, str]],
        categories: Sequence[str],
        client: LLMClient,
        max_in_flight: int,
) -> JudgeSummary:
    semaphore = asyncio.Semaphore(max_in_flight)
    parse_errors = {c: 0 for c in categories}
    request_errors = {c: 0 for c in categories}

    async def one(generated: str, reference: str, category: str) -> Optional[int]:
        async with semaphore:
            try:
                return await judge_evaluate_async(generated, reference, category, client)
            except (JudgeParseError, LLMResponseError) as exc:
                logger.warning("skipping sample: %s", exc)
                parse_errors[category] += 1
            except httpx.HTTPError as exc:
                logger.warning("skipping sample after retries: %s", exc)
                request_errors[category] += 1
            return None

    jobs = [one(g, r, c) for g, r in pairs for c in categories]
    flat = await asyncio.gather(*jobs)
    scores = []
    for i in range(len(pairs)):
        row = flat[i * len(categories):(i + 1) * len(categories)]
        scores.append(dict(zip(categories, row)))
    averages = {}
    for category in categories:
        valid = [s[category] for s in scores if s[category] is not None]
        averages[category] = sum(valid) / len(valid) if valid else 0.0
    return JudgeSummary(scores, averages, parse_errors, request_errors)


def judge_many(
        pairs: Sequence[tuple[str, str]],
        categories: Sequence[str] = CHEST_CATEGORIES,
        client: Optional[LLMClient] = None,
        max_in_flight: int = LLM_MAX_IN_FLIGHT,
) -> JudgeSummary:
    """Judge (generated, reference) pairs in every category, averaging the valid answers."""
    client = client or RuleBasedJudgeClient()
    return asyncio.run(_judge_many(pairs, categories, client, max_in_flight))


_SECTION = re.compile(r"Reference report:\n(?P<ref>.*?)\n\nGenerated report:\n(?P<gen>.*?)\n\nAnswer with", re.DOTALL)
_CATEGORY = re.compile(r"^(?:Category|Finding): (?P<cat>[A-Za-z_]+)\.", re.MULTILINE)
_SIZE = re.compile(r"(\d+) mm")


def _finding_sentences(report: str, lexicon: AbnormalityLexicon) -> dict[str, str]:
    sentences = {}
    for sentence in re.split(r"(?<=\.)\s+", report.lower()):
        labels = extract_labels(sentence, lexicon)
        for name, value in labels.items():
            if value:
                sentences.setdefault(name, sentence)
    return sentences


def rule_based_judgement(prompt: str, lexicon: AbnormalityLexicon = DESK_LEXICON) -> str:
    """Deterministic stand-in judge that grades the two reports with the label extractor."""
    sections, category = _SECTION.search(prompt), _CATEGORY.search(prompt)
    if sections is None or category is None:
        return "invalid prompt"
    reference, generated = sections.group("ref"), sections.group("gen")
    ref_labels, gen_labels = extract_labels(reference, lexicon), extract_labels(generated, lexicon)
    ref_sent = _finding_sentences(reference, lexicon)
    gen_sent = _finding_sentences(generated, lexicon)
    positives = [n for n, v in ref_labels.items() if v]

    match category.group("cat"):
        case "Presence":
            ok = ref_labels == gen_labels
        case "Hallucination":
            ok = all(ref_labels[n] or not gen_labels[n] for n in gen_labels)
        case "Location":
            ok = all(
                n in gen_sent and all((r in ref_sent[n]) == (r in gen_sent[n]) for r in REGIONS)
                for n in positives
            )
        case "Severity":
            ok = all(
                n in gen_sent and _SIZE.findall(ref_sent[n]) == _SIZE.findall(gen_sent[n])
                for n in positives
            )
        case _:
            ok = ref_labels == gen_labels
    return "1" if ok else "0"


class RuleBasedJudgeClient(StaticMockClient):
    def __init__(self, lexicon: AbnormalityLexicon = DESK_LEXICON):
        super().__init__(responder=lambda prompt: rule_based_judgement(prompt, lexicon))


def build_client(mode: str) -> LLMClient:
    match mode:
        case "mock":
            return RuleBasedJudgeClient()
        case "http":
            return HttpLLMClient()
        case _:
            raise ValueError(f"unknown client mode {mode!r}")

