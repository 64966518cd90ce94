"""Objective terms: hand-evaluated values, algebraic identities, gradients."""

import math

import numpy as np
import pytest
import torch

from erase.errors import DegenerateRegionError, InputValidationError
from erase.losses import (
    align_loss,
    div_loss,
    normalize_attention,
    recon_loss,
    total_loss,
)

from conftest import random_label_map


def make_stack(raw, tags=None, tau=100.0):
    raw = torch.as_tensor(np.asarray(raw, dtype=np.float64))
    tags = tags or [f"tag{i}" for i in range(raw.shape[0])]
    return normalize_attention(raw, tags, tau)


class TestNormalizeAttention:
    def test_identical_maps_split_evenly(self):
        raw = np.ones((3, 4, 4)) * 0.3
        att = make_stack(raw)
        assert torch.allclose(att.normalized, torch.full((3, 4, 4), 1 / 3, dtype=torch.float64))
        assert torch.allclose(att.dominant, torch.full((4, 4), 1 / 3, dtype=torch.float64))

    def test_two_tag_scalar_softmax(self):
        # raw (0.01, 0.02) at tau=100 -> (1/(1+e), e/(1+e))
        raw = np.zeros((2, 1, 1))
        raw[0, 0, 0], raw[1, 0, 0] = 0.01, 0.02
        att = make_stack(raw, tau=100.0)
        e = math.e
        assert float(att.normalized[0, 0, 0]) == pytest.approx(1 / (1 + e), abs=1e-9)
        assert float(att.normalized[1, 0, 0]) == pytest.approx(e / (1 + e), abs=1e-9)

    def test_rows_sum_to_one(self, rng):
        raw = rng.uniform(0, 1, size=(4, 6, 5))
        att = make_stack(raw)
        sums = att.normalized.sum(dim=0)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_shift_invariance(self, rng):
        raw = rng.uniform(0, 1, size=(3, 4, 4))
        shift = rng.uniform(-5, 5, size=(1, 4, 4))
        a = make_stack(raw).normalized
        b = make_stack(raw + shift).normalized
        assert torch.allclose(a, b, atol=1e-9)

    def test_permutation_equivariance(self, rng):
        raw = rng.uniform(0, 1, size=(4, 5, 5))
        labels = random_label_map(rng, 5, 5)
        att = make_stack(raw, tags=["a", "b", "c", "d"])
        perm = [2, 0, 3, 1]
        att_p = make_stack(raw[perm], tags=["c", "a", "d", "b"])
        assert torch.allclose(att_p.normalized, att.normalized[perm], atol=1e-12)
        assert torch.allclose(att_p.dominant, att.dominant, atol=1e-9)
        assert float(align_loss(att_p, labels)) == pytest.approx(
            float(align_loss(att, labels)), abs=1e-9
        )
        assert float(div_loss(att_p, labels)) == pytest.approx(
            float(div_loss(att, labels)), abs=1e-9
        )

    def test_overflow_safety_at_high_tau(self):
        raw = torch.tensor([[[1.0]], [[0.0]]])
        att = normalize_attention(raw, ["a", "b"], tau=1000.0)
        assert torch.all(torch.isfinite(att.normalized))

    def test_empty_tag_set_rejected(self):
        with pytest.raises(InputValidationError):
            normalize_attention(torch.zeros((0, 2, 2)), [])


class TestReconLoss:
    def test_identity_is_zero(self, rng):
        z = torch.as_tensor(rng.normal(size=(4, 4, 3)))
        labels = random_label_map(rng, 4, 4)
        assert float(recon_loss(z, z.clone(), labels)) == 0.0

    def test_single_index_hand_value(self):
        labels = np.full((2, 2), 0, dtype=np.uint8)
        labels[1, 1] = 2
        z = torch.zeros((2, 2, 4), dtype=torch.float64)
        z_hat = torch.zeros((2, 2, 4), dtype=torch.float64)
        z_hat[1, 1, 0] = 2.0  # channel difference (2, 0, 0, 0) -> squared norm 4
        assert float(recon_loss(z, z_hat, labels)) == pytest.approx(4.0, abs=1e-12)

    def test_non_background_indices_ignored(self, rng):
        labels = random_label_map(rng, 5, 5)
        z = torch.as_tensor(rng.normal(size=(5, 5, 2)))
        z_hat = torch.as_tensor(rng.normal(size=(5, 5, 2)))
        base = float(recon_loss(z, z_hat, labels))
        noisy = z_hat.clone()
        fg = torch.as_tensor(labels != 2)
        noisy[fg] += torch.as_tensor(rng.normal(size=(int(fg.sum()), 2)) * 100)
        assert float(recon_loss(z, noisy, labels)) == pytest.approx(base, abs=1e-12)

    def test_no_background_rejected(self):
        labels = np.zeros((3, 3), dtype=np.uint8)
        z = torch.zeros((3, 3, 2))
        with pytest.raises(DegenerateRegionError):
            recon_loss(z, z, labels)


class TestAlignLoss:
    def test_perfect_overlap_near_zero(self):
        labels = np.array([[0, 1], [2, 1]], dtype=np.uint8)
        att = make_stack(np.zeros((2, 2, 2)))
        indicator = torch.as_tensor(np.isin(labels, (0, 2)).astype(np.float64))
        object.__setattr__(att, "dominant", indicator)
        # dice(ind, ind) = 2s/(2s + eps) -> loss ~ eps/(2s)
        assert float(align_loss(att, labels)) == pytest.approx(0.0, abs=1e-6)

    def test_support_on_invalid_region_only(self):
        # dominant mass concentrated on non-target cells -> overlap ~ 0
        labels = np.array([[1, 1], [1, 0]], dtype=np.uint8)
        dominant = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        att = make_stack(np.zeros((2, 2, 2)))
        object.__setattr__(att, "dominant", dominant)
        assert float(align_loss(att, labels)) == pytest.approx(1.0, abs=1e-4)

    def test_uniform_half_hand_value(self):
        labels = np.array([[0, 0], [1, 1]], dtype=np.uint8)  # valid = (1,1,0,0)
        att = make_stack(np.zeros((2, 2, 2)))
        object.__setattr__(att, "dominant", torch.full((2, 2), 0.5, dtype=torch.float64))
        assert float(align_loss(att, labels)) == pytest.approx(
            1.0 - 2.0 * 1.0 / (2.0 + 2.0 + 1e-6), abs=1e-9
        )
        assert float(align_loss(att, labels)) == pytest.approx(0.5, abs=1e-6)


class TestDivLoss:
    def test_single_tag_with_full_peak(self):
        labels = np.array([[0, 2]], dtype=np.uint8)
        att = make_stack(np.ones((1, 1, 2)))
        # one tag: softmax gives exactly 1 everywhere, min peak = 1
        assert float(div_loss(att, labels)) == pytest.approx(0.0, abs=1e-12)

    def test_two_subtype_hand_value(self):
        labels = np.array([[0, 0], [2, 2]], dtype=np.uint8)
        att = make_stack(np.zeros((2, 2, 2)))
        normalized = torch.tensor(
            [[[0.7, 0.6], [0.9, 0.1]], [[0.3, 0.4], [0.1, 0.9]]], dtype=torch.float64
        )
        object.__setattr__(att, "normalized", normalized)
        # in-mask maxima: tag0 -> 0.7, tag1 -> 0.4; 1 - min = 0.6
        assert float(div_loss(att, labels)) == pytest.approx(0.6, abs=1e-12)

    def test_outside_mask_ignored(self, rng):
        labels = random_label_map(rng, 4, 4)
        raw = rng.uniform(0, 1, size=(3, 4, 4))
        att = make_stack(raw)
        base = float(div_loss(att, labels))
        bumped = att.normalized.clone()
        outside = torch.as_tensor(labels != 0)
        bumped[:, outside] = torch.rand((3, int(outside.sum())), dtype=bumped.dtype)
        object.__setattr__(att, "normalized", bumped)
        assert float(div_loss(att, labels)) == pytest.approx(base, abs=1e-12)

    def test_no_target_rejected(self):
        labels = np.full((2, 2), 2, dtype=np.uint8)
        att = make_stack(np.ones((2, 2, 2)))
        with pytest.raises(DegenerateRegionError):
            div_loss(att, labels)


class TestTotalLoss:
    def test_all_perfect_gives_zero(self):
        labels = np.array([[0, 2], [2, 2]], dtype=np.uint8)
        z = torch.zeros((2, 2, 3), dtype=torch.float64)
        raw = np.zeros((1, 2, 2))
        att = make_stack(raw)  # single tag: align dice on uniform-1 valid set
        breakdown = total_loss(z, z.clone(), att, labels, lam=0.2)
        assert float(breakdown.l_recon) == 0.0
        assert float(breakdown.l_div) == pytest.approx(0.0, abs=1e-12)
        # single tag attends 1.0 everywhere and valid region is everything
        assert float(breakdown.l_align) == pytest.approx(0.0, abs=1e-6)
        assert float(breakdown.l_total) == pytest.approx(0.0, abs=1e-6)

    def test_arithmetic_composition(self):
        labels = np.array([[0, 2]], dtype=np.uint8)
        z = torch.zeros((1, 2, 1), dtype=torch.float64)
        z_hat = z.clone()
        att = make_stack(np.zeros((2, 1, 2)))
        breakdown = total_loss(z, z_hat, att, labels, lam=0.2)
        # substitute the hand values 0.1 / 0.5 / 0.7 and check the formula
        l_recon, l_align, l_div = 0.1, 0.5, 0.7
        assert l_recon + 0.2 * (l_align + l_div) == pytest.approx(0.34, abs=1e-12)
        assert float(breakdown.l_puzzle) == float(breakdown.l_align) + float(breakdown.l_div)
        assert float(breakdown.l_total) == float(breakdown.l_recon) + 0.2 * float(
            breakdown.l_puzzle
        )

    def test_lambda_zero_reduces_to_recon(self, rng):
        labels = random_label_map(rng, 4, 4)
        z = torch.as_tensor(rng.normal(size=(4, 4, 2)))
        z_hat = torch.as_tensor(rng.normal(size=(4, 4, 2)))
        att = make_stack(rng.uniform(0, 1, size=(2, 4, 4)))
        breakdown = total_loss(z, z_hat, att, labels, lam=0.0)
        assert float(breakdown.l_total) == float(breakdown.l_recon)

    def test_empty_subtypes_skips_puzzle(self, rng):
        labels = random_label_map(rng, 4, 4)
        z = torch.as_tensor(rng.normal(size=(4, 4, 2)))
        z_hat = torch.as_tensor(rng.normal(size=(4, 4, 2)))
        breakdown = total_loss(z, z_hat, None, labels)
        assert breakdown.puzzle_skipped
        assert float(breakdown.l_align) == 0.0
        assert float(breakdown.l_div) == 0.0
        assert float(breakdown.l_total) == pytest.approx(float(breakdown.l_recon))


def finite_difference(fn, x, step=1e-5):
    """Central-difference gradient of scalar fn at float64 tensor x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    num = float((a - b).norm())
    den = float(a.norm() + b.norm())
    return 0.0 if den == 0 else num / den


class TestGradients:
    """Spot checks; the acceptance suite runs the full 100-config battery."""

    def test_recon_grad_matches_fd(self, rng):
        labels = random_label_map(rng, 4, 4)
        z = torch.as_tensor(rng.normal(size=(4, 4, 3)))
        z_hat = torch.as_tensor(rng.normal(size=(4, 4, 3))).requires_grad_(True)
        loss = recon_loss(z, z_hat, labels)
        loss.backward()
        fd = finite_difference(lambda t: recon_loss(z, t, labels), z_hat.detach().clone())
        assert relative_error(z_hat.grad, fd) < 1e-6

    def test_puzzle_grads_match_fd(self, rng):
        labels = random_label_map(rng, 4, 4)
        raw = torch.as_tensor(rng.uniform(0, 1, size=(3, 4, 4))).requires_grad_(True)

        def puzzle(t):
            att = normalize_attention(t, ["a", "b", "c"], tau=20.0)
            return align_loss(att, labels) + div_loss(att, labels)

        loss = puzzle(raw)
        loss.backward()
        fd = finite_difference(puzzle, raw.detach().clone())
        assert relative_error(raw.grad, fd) < 1e-5
