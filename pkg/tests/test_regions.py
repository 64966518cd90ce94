"""Label-map algebra against independent brute-force oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erase.errors import InputValidationError
from erase.regions import build_label_map, decode_label_map, dice, downsample_label_map

from conftest import random_label_map


def label_map_oracle(target, non_target):
    """Cell-by-cell reference: target wins, then non-target, else background."""
    h, w = target.shape
    out = np.empty((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            if target[i, j] == 1:
                out[i, j] = 0
            elif non_target[i, j] == 1:
                out[i, j] = 1
            else:
                out[i, j] = 2
    return out


def downsample_oracle(labels, lh, lw):
    """Per-block histogram + priority tie-break + non-erasure override."""
    h, w = labels.shape
    out = np.empty((lh, lw), dtype=np.uint8)
    zero_counts = np.zeros((lh, lw), dtype=int)
    for ci in range(lh):
        for cj in range(lw):
            block = [
                labels[i, j]
                for i in range(h)
                for j in range(w)
                if (i * lh) // h == ci and (j * lw) // w == cj
            ]
            counts = [block.count(v) for v in (0, 1, 2)]
            zero_counts[ci, cj] = counts[0]
            best = max(counts)
            out[ci, cj] = min(v for v in (0, 1, 2) if counts[v] == best)
    if (labels == 0).any() and not (out == 0).any():
        flat = int(np.argmax(zero_counts.reshape(-1)))
        out[flat // lw, flat % lw] = 0
    return out


class TestBuildLabelMap:
    def test_empty_masks_all_background(self):
        z = np.zeros((5, 5), dtype=np.uint8)
        assert np.all(build_label_map(z, z) == 2)

    def test_full_target_wins_over_anything(self, rng):
        ones = np.ones((6, 6), dtype=np.uint8)
        non_target = rng.integers(0, 2, size=(6, 6)).astype(np.uint8)
        assert np.all(build_label_map(ones, non_target) == 0)

    def test_4x4_grid_against_enumeration(self):
        target = np.zeros((4, 4), dtype=np.uint8)
        target[:2, :2] = 1
        non_target = np.zeros((4, 4), dtype=np.uint8)
        non_target[3, :] = 1
        labels = build_label_map(target, non_target)
        assert np.array_equal(labels, label_map_oracle(target, non_target))
        counts = {v: int((labels == v).sum()) for v in (0, 1, 2)}
        assert counts == {0: 4, 1: 4, 2: 8}

    def test_exhaustive_3x3_against_oracle(self):
        for bits in itertools.product((0, 1), repeat=9):
            target = np.array(bits, dtype=np.uint8).reshape(3, 3)
            non_target = np.roll(target, 1).reshape(3, 3)
            got = build_label_map(target, non_target)
            assert np.array_equal(got, label_map_oracle(target, non_target))

    def test_partition_and_idempotence(self, rng):
        for _ in range(25):
            labels = random_label_map(rng, 7, 9)
            target, non_target = decode_label_map(labels)
            rebuilt = build_label_map(target, non_target)
            assert np.array_equal(rebuilt, labels)
            assert np.all(np.isin(rebuilt, (0, 1, 2)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputValidationError):
            build_label_map(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8))


class TestDownsampleLabelMap:
    def test_constant_map_stays_constant(self):
        labels = np.full((12, 12), 2, dtype=np.uint8)
        assert np.all(downsample_label_map(labels, 3, 4) == 2)

    def test_single_target_pixel_survives(self):
        labels = np.full((8, 8), 2, dtype=np.uint8)
        labels[5, 6] = 0
        down = downsample_label_map(labels, 2, 2)
        assert int((down == 0).sum()) == 1
        assert down[1, 1] == 0

    def test_random_16x16_to_4x4_matches_histogram_oracle(self, rng):
        for _ in range(40):
            labels = random_label_map(rng, 16, 16)
            got = downsample_label_map(labels, 4, 4)
            assert np.array_equal(got, downsample_oracle(labels, 4, 4))

    def test_uneven_blocks_match_oracle(self, rng):
        for _ in range(20):
            labels = random_label_map(rng, 7, 10)
            got = downsample_label_map(labels, 3, 4)
            assert np.array_equal(got, downsample_oracle(labels, 3, 4))

    def test_target_never_erased(self, rng):
        for _ in range(30):
            labels = np.full((16, 16), 2, dtype=np.uint8)
            labels[rng.integers(16), rng.integers(16)] = 0
            down = downsample_label_map(labels, 4, 4)
            assert (down == 0).any()

    def test_latent_larger_than_pixels_rejected(self):
        with pytest.raises(InputValidationError):
            downsample_label_map(np.full((4, 4), 2, np.uint8), 8, 4)


class TestDice:
    def test_self_similarity_near_one(self):
        x = np.ones((10, 10))
        assert dice(x, x) == pytest.approx(200.0 / (200.0 + 1e-6), abs=1e-7)

    def test_disjoint_supports_zero(self):
        x = np.array([1.0, 1.0, 0.0])
        y = np.array([0.0, 0.0, 0.0])
        assert dice(x, y) == 0.0

    def test_scalar_hand_case(self):
        x = np.array([1.0, 0.5])
        y = np.array([0.5, 0.5])
        assert dice(x, y) == pytest.approx(1.5 / (2.5 + 1e-6), abs=1e-9)
        assert dice(x, y) == pytest.approx(0.6, abs=1e-6)

    def test_out_of_range_rejected(self):
        with pytest.raises(InputValidationError):
            dice(np.array([1.5]), np.array([0.5]))
        with pytest.raises(InputValidationError):
            dice(np.array([0.5]), np.array([-0.1]))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=30),
        st.integers(min_value=0, max_value=2**31),
    )
    def test_symmetry_property(self, values, seed):
        x = np.array(values)
        y = np.random.default_rng(seed).uniform(0, 1, size=x.shape)
        assert dice(x, y) == dice(y, x)

    def test_self_dice_lower_bound_for_binary_maps(self, rng):
        # for 0/1-valued x, sum(x*x) == sum(x), so dice(x, x) -> 1 as mass grows
        for _ in range(20):
            x = (rng.uniform(0, 1, size=(8, 8)) > 0.5).astype(float)
            if x.sum() < 1:
                x[0, 0] = 1.0
            assert dice(x, x) >= 1.0 - 1e-6
