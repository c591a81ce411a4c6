"""BLEU-4, ROUGE-L and METEOR over lowercase word/punctuation tokens."""
import re
from typing import Sequence

from nltk.stem import PorterStemmer
from nltk.translate.bleu_score import sentence_bleu
from nltk.translate.meteor_score import single_meteor_score
from rouge_score import rouge_scorer

_TOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

BLEU_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5

_stemmer = PorterStemmer()


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class _Tokenizer:
    """rouge_score tokenizer hook sharing the metric tokenization."""

    def tokenize(self, text: str) -> list[str]:
        return tokenize(text)


class _NoSynonyms:
    """WordNet stand-in with no synsets, leaving METEOR with the exact and stem stages."""

    def synsets(self, word: str) -> list:
        return []


_rouge = rouge_scorer.RougeScorer(["rougeL"], tokenizer=_Tokenizer())


def add_one_on_zero(p_n, *args, hyp_len: int, **kwargs) -> list[float]:
    """Orders n >= 2 without a matched n-gram get 1 / (candidate n-grams + 1)."""
    smoothed = []
    for n, precision in enumerate(p_n, start=1):
        if precision.numerator == 0 and n > 1:
            smoothed.append(1.0 / (max(hyp_len - n + 1, 0) + 1.0))
        else:
            smoothed.append(float(precision))
    return smoothed


def bleu4(candidate: str, references: Sequence[str]) -> float:
    """Sentence BLEU-4 against one or more references; brevity uses the closest reference length."""
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand or not refs:
        return 0.0
    return float(sentence_bleu(refs, cand, weights=BLEU_WEIGHTS, smoothing_function=add_one_on_zero))


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    score = _rouge.score(reference, candidate)["rougeL"]
    precision, recall = score.precision, score.recall
    if precision == 0 or recall == 0:
        return 0.0
    return (1 + beta**2) * precision * recall / (recall + beta**2 * precision)


def stem(word: str) -> str:
    return _stemmer.stem(word)


def meteor(
        candidate: str,
        reference: str,
        alpha: float = METEOR_ALPHA,
        beta: float = METEOR_BETA,
        gamma: float = METEOR_GAMMA,
) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    return float(single_meteor_score(
        ref, cand, stemmer=_stemmer, wordnet=_NoSynonyms(), alpha=alpha, beta=beta, gamma=gamma,
    ))
