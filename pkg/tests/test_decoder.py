import math

import pytest
import torch

from app.config import DecoderConfig, LoRAConfig
from app.models.decoder import (
    PLACEHOLDER,
    InstructionPrompt,
    LoRALinear,
    ToyDecoder,
    apply_lora,
    build_prompt,
    generate,
    has_lora,
    instruction_loss,
    lora_merge,
    merge_lora,
    nll_loss,
)
from app.models.tokenizer import Tokenizer

TINY_DECODER = DecoderConfig(dim=8, depth=2, heads=2, max_positions=64)


@pytest.fixture
def tokenizer() -> Tokenizer:
    prompt_words = InstructionPrompt.load("report").template.replace(PLACEHOLDER, "")
    return Tokenizer.from_corpus([prompt_words, "No nodule is seen."])


@pytest.fixture
def decoder(tokenizer) -> ToyDecoder:
    torch.manual_seed(0)
    return ToyDecoder(TINY_DECODER, len(tokenizer)).eval()


def test_decoder_is_causal(decoder):
    """Perturbing position t+1 leaves the logits at positions <= t unchanged."""
    embeds = torch.randn(6, 8)
    changed = embeds.clone()
    changed[4] += 3.0
    with torch.no_grad():
        a, b = decoder(embeds), decoder(changed)
    torch.testing.assert_close(a[:4], b[:4])
    assert not torch.allclose(a[4:], b[4:])


def test_single_token_gives_one_row(decoder, tokenizer):
    logits = decoder(decoder.embed_tokens(torch.tensor([tokenizer.bos_id])))
    assert logits.shape == (1, len(tokenizer))


def test_decoder_rejects_overlong_input(decoder):
    with pytest.raises(ValueError):
        decoder(torch.zeros(65, 8))


def test_zero_initialised_lora_matches_base(decoder):
    embeds = torch.randn(5, 8)
    with torch.no_grad():
        before = decoder(embeds)
        wrapped = apply_lora(decoder, LoRAConfig(rank=2, alpha=4.0))
        after = decoder(embeds)
    assert len(wrapped) == 2 * TINY_DECODER.depth
    assert all(name.endswith(("q_proj", "v_proj")) for name in wrapped)
    assert has_lora(decoder)
    torch.testing.assert_close(before, after)


def test_lora_merge_hand_case():
    """r=1: W + (alpha / r) * b a^T."""
    weight = torch.eye(2)
    lora_a = torch.tensor([[1.0, 2.0]])
    lora_b = torch.tensor([[3.0], [4.0]])
    merged = lora_merge(weight, lora_a, lora_b, scaling=0.5)
    torch.testing.assert_close(merged, torch.tensor([[2.5, 3.0], [2.0, 5.0]]))
    torch.testing.assert_close(lora_merge(weight, lora_a, torch.zeros(2, 1), 0.5), weight)
    with pytest.raises(ValueError):
        lora_merge(weight, lora_a, torch.zeros(3, 1), 0.5)


def test_merged_forward_matches_adapter_forward():
    torch.manual_seed(0)
    layer = LoRALinear(torch.nn.Linear(6, 4), rank=2, alpha=4.0)
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(10, 6)
    torch.testing.assert_close(layer.merged()(x), layer(x), atol=1e-6, rtol=1e-5)
    with pytest.raises(ValueError):
        LoRALinear(torch.nn.Linear(2, 2), rank=0, alpha=1.0)


def test_merge_lora_removes_adapters(decoder):
    apply_lora(decoder, LoRAConfig(rank=2, alpha=4.0))
    for module in decoder.modules():
        if isinstance(module, LoRALinear):
            with torch.no_grad():
                module.lora_B.normal_()
    embeds = torch.randn(5, 8)
    with torch.no_grad():
        adapted = decoder(embeds)
        merge_lora(decoder)
        merged = decoder(embeds)
    assert not has_lora(decoder)
    torch.testing.assert_close(adapted, merged, atol=1e-5, rtol=1e-5)


def test_lora_gradient_matches_finite_differences(fd_grad):
    torch.manual_seed(0)
    layer = LoRALinear(torch.nn.Linear(4, 3), rank=2, alpha=2.0).double()
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(5, 4, dtype=torch.float64)

    def fn():
        return layer(x).sin().sum()

    fn().backward()
    with torch.no_grad():
        grad_a = fd_grad(fn, layer.lora_A)
        grad_b = fd_grad(fn, layer.lora_B)
    torch.testing.assert_close(layer.lora_A.grad, grad_a, rtol=1e-4, atol=1e-7)
    torch.testing.assert_close(layer.lora_B.grad, grad_b, rtol=1e-4, atol=1e-7)


def test_nll_uniform_logits():
    """Uniform logits over V with T targets give T ln V."""
    logits = torch.zeros(7, 11)
    targets = torch.randint(0, 11, (7,))
    assert nll_loss(logits, targets).item() == pytest.approx(7 * math.log(11), rel=1e-6)
    assert nll_loss(logits, targets, reduction="mean").item() == pytest.approx(math.log(11), rel=1e-6)


def test_nll_hand_case():
    """Two tokens over V=3 against explicit log-softmax arithmetic."""
    logits = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]], dtype=torch.float64)
    targets = torch.tensor([0, 2])
    first = -(1.0 - math.log(math.e + 2))
    second = -(1.0 - math.log(1 + math.e**2 + math.e))
    assert nll_loss(logits, targets).item() == pytest.approx(first + second, abs=1e-12)
    mask = torch.tensor([False, True])
    assert nll_loss(logits, targets, mask).item() == pytest.approx(second, abs=1e-12)


def test_nll_limits_and_errors():
    logits = torch.full((2, 4), -50.0)
    logits[0, 1] = logits[1, 3] = 50.0
    assert nll_loss(logits, torch.tensor([1, 3])).item() < 1e-6
    with pytest.raises(ValueError):
        nll_loss(logits, torch.tensor([1, 3]), torch.tensor([False, False]))


def test_nll_gradient_matches_finite_differences(fd_grad):
    torch.manual_seed(0)
    logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([0, 3, 1, 4])
    mask = torch.tensor([True, False, True, True])
    nll_loss(logits, targets, mask).backward()
    with torch.no_grad():
        numeric = fd_grad(lambda: nll_loss(logits, targets, mask), logits)
    torch.testing.assert_close(logits.grad, numeric, rtol=1e-4, atol=1e-7)


def test_instruction_needs_exactly_one_placeholder():
    with pytest.raises(ValueError):
        InstructionPrompt("no image here")
    with pytest.raises(ValueError):
        InstructionPrompt(f"{PLACEHOLDER} {PLACEHOLDER}")
    with pytest.raises(ValueError):
        InstructionPrompt.load("vqa")
    vqa = InstructionPrompt.load("vqa", "Is there nodule in this volume?")
    assert "Is there nodule" in vqa.template and vqa.task == "vqa"


def test_build_prompt_layout(decoder, tokenizer):
    """[BOS] before <Img> Q </Img> after: text + n_q + 2 positions, delimiters around Q."""
    instruction = InstructionPrompt.load("report")
    before, after = instruction.split()
    visual = torch.randn(4, 8)
    prompt = build_prompt(decoder, tokenizer, instruction, visual)
    text_tokens = 1 + len(tokenizer.encode(before)) + len(tokenizer.encode(after))
    assert prompt.length == text_tokens + 4 + 2
    start = prompt.visual_start
    torch.testing.assert_close(prompt.embeds[start:start + 4], visual)
    torch.testing.assert_close(prompt.embeds[start - 1], decoder.token_embed.weight[tokenizer.img_open_id])
    torch.testing.assert_close(prompt.embeds[start + 4], decoder.token_embed.weight[tokenizer.img_close_id])
    torch.testing.assert_close(prompt.embeds[0], decoder.token_embed.weight[tokenizer.bos_id])


def test_instruction_loss_ignores_prompt_positions(decoder, tokenizer):
    """Only answer tokens carry loss: T targets under a uniform head give T ln V."""
    with torch.no_grad():
        decoder.lm_head.weight.zero_()
        decoder.lm_head.bias.zero_()
    prompt = build_prompt(decoder, tokenizer, InstructionPrompt.load("report"), torch.randn(4, 8))
    target = torch.tensor(tokenizer.encode("No nodule is seen.", add_eos=True))
    loss = instruction_loss(decoder, prompt, target)
    assert loss.item() == pytest.approx(len(target) * math.log(len(tokenizer)), rel=1e-5)


def test_loss_reaches_the_visual_prompt(decoder, tokenizer):
    """A frozen decoder still passes gradient back to the spliced-in visual vectors."""
    decoder.requires_grad_(False)
    visual = torch.randn(4, 8, requires_grad=True)
    prompt = build_prompt(decoder, tokenizer, InstructionPrompt.load("report"), visual)
    target = torch.tensor(tokenizer.encode("No nodule is seen.", add_eos=True))
    instruction_loss(decoder, prompt, target).backward()
    assert visual.grad is not None and visual.grad.abs().sum() > 0
    assert decoder.token_embed.weight.grad is None


def test_generate_is_deterministic(decoder, tokenizer):
    prompt = build_prompt(decoder, tokenizer, InstructionPrompt.load("report"), torch.randn(4, 8))
    assert generate(decoder, tokenizer, prompt, max_len=5) == generate(decoder, tokenizer, prompt, max_len=5)
    sampled = generate(decoder, tokenizer, prompt, max_len=5, strategy="top_k", seed=3)
    assert sampled == generate(decoder, tokenizer, prompt, max_len=5, strategy="top_k", seed=3)
    with pytest.raises(ValueError):
        generate(decoder, tokenizer, prompt, max_len=2, strategy="beam")
