import itertools
import math
import random

import pytest

from app.backend.nlg import bleu4, meteor, rouge_l, stem, tokenize

WORDS = ["a", "b", "c", "d", "e", "nodule", "left", "no"]


def _brute_lcs(a, b) -> int:
    for size in range(min(len(a), len(b)), 0, -1):
        subsequences = set(itertools.combinations(a, size))
        if any(s in subsequences for s in itertools.combinations(b, size)):
            return size
    return 0


def _brute_bleu(cand, ref) -> float:
    log_p = 0.0
    for n in range(1, 5):
        grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        matched = 0
        remaining = list(ref_grams)
        for gram in grams:
            if gram in remaining:
                remaining.remove(gram)
                matched += 1
        if matched == 0:
            if n == 1:
                return 0.0
            log_p += math.log(1.0 / (len(grams) + 1.0)) / 4
        else:
            log_p += math.log(matched / len(grams)) / 4
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(log_p)


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("No Nodule, seen.") == ["no", "nodule", ",", "seen", "."]


def test_identical_and_disjoint_texts():
    text = "there is a nodule in the left upper region"
    assert bleu4(text, [text]) == pytest.approx(1.0)
    assert rouge_l(text, text) == pytest.approx(1.0)
    m = len(tokenize(text))
    assert meteor(text, text) == pytest.approx(1 - 0.5 * (1 / m) ** 3)
    for metric in (lambda c, r: bleu4(c, [r]), rouge_l, meteor):
        assert metric("a b c d", "e f g h") == 0.0
        assert metric("", "a b c") == 0.0


def test_bleu_hand_case():
    """Precisions 4/5, 3/4, 2/3, 1/2 with no brevity penalty."""
    expected = (0.8 * 0.75 * (2 / 3) * 0.5) ** 0.25
    assert bleu4("a b c d e", ["a b c d f"]) == pytest.approx(expected, abs=1e-12)


def test_bleu_brevity_penalty():
    assert bleu4("a b c d", ["a b c d e f g h"]) == pytest.approx(math.exp(1 - 8 / 4), abs=1e-12)


def test_rouge_l_hand_case():
    assert _brute_lcs("a b c d".split(), "a c b d".split()) == 3
    assert rouge_l("a b c d", "a c b d") == pytest.approx(0.75)


def test_meteor_hand_case():
    """Two of three tokens matched in one chunk."""
    f_mean = 2 / 3
    assert meteor("the cat sat", "the cat ran") == pytest.approx(f_mean * (1 - 0.5 * 0.5**3), abs=1e-12)


def test_meteor_stem_stage():
    assert stem("effusions") == stem("effusion")
    assert stem("measured") == stem("measures")
    assert meteor("pleural effusions", "pleural effusion") == pytest.approx(1 - 0.5 * 0.5**3)


def test_random_pairs_match_brute_force():
    rng = random.Random(0)
    for _ in range(10):
        cand = [rng.choice(WORDS) for _ in range(rng.randint(4, 6))]
        ref = [rng.choice(WORDS) for _ in range(rng.randint(4, 6))]
        c, r = " ".join(cand), " ".join(ref)
        lcs = _brute_lcs(cand, ref)
        if lcs:
            p, rec = lcs / len(cand), lcs / len(ref)
            expected = (1 + 1.2**2) * p * rec / (rec + 1.2**2 * p)
        else:
            expected = 0.0
        assert rouge_l(c, r) == pytest.approx(expected, abs=1e-9)
        assert bleu4(c, [r]) == pytest.approx(_brute_bleu(cand, ref), abs=1e-9)
