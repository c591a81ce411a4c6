import math

import pytest
import torch
from torch import nn

from app.config import DinoConfig, ViTConfig
from app.models.dino import DINOHead, DinoState, dino_loss, ema_update, update_center


def test_uniform_logits_give_log_k():
    """All-zero logits make every term the cross-entropy of two uniforms, ln K."""
    k = 32
    student = torch.zeros(6, 3, k)
    teacher = torch.zeros(2, 3, k)
    loss = dino_loss(student, teacher, torch.zeros(k))
    assert loss.item() == pytest.approx(math.log(k), rel=1e-6)


def test_dino_loss_skips_same_view_pairs():
    """With one global and one local crop only the (teacher 0, student 1) pair counts."""
    torch.manual_seed(0)
    student = torch.randn(2, 4, 8)
    teacher = torch.randn(1, 4, 8)
    center = torch.zeros(8)
    targets = torch.softmax(teacher[0] / 0.04, dim=-1)
    expected = torch.sum(-targets * torch.log_softmax(student[1] / 0.1, dim=-1), dim=-1).mean()
    torch.testing.assert_close(dino_loss(student, teacher, center), expected)


def test_dino_loss_validation():
    with pytest.raises(ValueError):
        dino_loss(torch.zeros(2, 1, 4), torch.zeros(1, 1, 4), torch.zeros(4), student_temp=0.0)
    with pytest.raises(ValueError):
        dino_loss(torch.zeros(1, 1, 4), torch.zeros(1, 1, 4), torch.zeros(4))


def test_dino_loss_gradient_matches_finite_differences(fd_grad):
    torch.manual_seed(0)
    student = torch.randn(3, 2, 5, dtype=torch.float64, requires_grad=True)
    teacher = torch.randn(2, 2, 5, dtype=torch.float64)
    center = torch.randn(5, dtype=torch.float64)

    def fn():
        return dino_loss(student, teacher, center)

    fn().backward()
    with torch.no_grad():
        numeric = fd_grad(fn, student)
    torch.testing.assert_close(student.grad, numeric, rtol=1e-4, atol=1e-7)


def test_dino_loss_gradcheck():
    torch.manual_seed(1)
    student = torch.randn(4, 2, 6, dtype=torch.float64, requires_grad=True)
    teacher = torch.randn(2, 2, 6, dtype=torch.float64)
    center = torch.zeros(6, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda s: dino_loss(s, teacher, center), (student,))


def test_teacher_receives_no_gradient():
    student = torch.randn(3, 2, 5, requires_grad=True)
    teacher = torch.randn(2, 2, 5, requires_grad=True)
    dino_loss(student, teacher, torch.zeros(5)).backward()
    assert teacher.grad is None
    assert student.grad is not None


def test_ema_update_hand_case():
    """teacher 1, student 2, m 0.9 -> 1.1."""
    teacher, student = nn.Linear(2, 2), nn.Linear(2, 2)
    with torch.no_grad():
        for p in teacher.parameters():
            p.fill_(1.0)
        for p in student.parameters():
            p.fill_(2.0)
    ema_update(teacher, student, 0.9)
    for p in teacher.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 1.1))
    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)


def test_ema_momentum_one_freezes_teacher():
    teacher, student = nn.Linear(2, 2), nn.Linear(2, 2)
    before = [p.clone() for p in teacher.parameters()]
    ema_update(teacher, student, 1.0)
    for p, q in zip(teacher.parameters(), before):
        torch.testing.assert_close(p, q)


def test_update_center():
    center = torch.zeros(4)
    logits = torch.ones(2, 3, 4)
    torch.testing.assert_close(update_center(center, logits, 0.9), torch.full((4,), 0.1))


def test_head_output_and_state_step():
    """A training step moves the student, then after_step moves teacher and center."""
    torch.manual_seed(0)
    head = DINOHead(16, 32, hidden_dim=16, bottleneck_dim=8)
    assert head(torch.randn(4, 16)).shape == (4, 32)

    vit = ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)
    config = DinoConfig(out_dim=32, hidden_dim=16, bottleneck_dim=8, n_global=2, n_local=2, teacher_momentum=0.5)
    state = DinoState.create(vit, config)
    assert not any(p.requires_grad for p in state.teacher.parameters())
    teacher_before = [p.clone() for p in state.teacher.parameters()]

    optimizer = torch.optim.SGD(state.student.parameters(), lr=0.1)
    loss = state.loss(torch.rand(4, 3, 3, 16, 16))
    loss.backward()
    optimizer.step()
    state.after_step()

    assert torch.isfinite(loss)
    assert any(not torch.equal(p, q) for p, q in zip(state.teacher.parameters(), teacher_before))
    assert state.center.abs().sum() > 0
