import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from awcl.errors import NumericalDomainError
from awcl.loss import (UNLABELED, EmbeddingBatch, anatomy_anchor_mean, anatomy_aware_loss, awcl_batch_loss,
                       cosine_sim, dispatch_mask, finite_difference_check, ntxent_anchor_mean, ntxent_batch_loss,
                       ntxent_loss, per_anchor_losses, positive_sets)

from . import oracles


def _batch(z, labels=None, tau=0.5):
    return EmbeddingBatch.interleaved(torch.as_tensor(z, dtype=torch.float64), labels, tau)


@st.composite
def batches(draw, max_pairs=8, max_dim=32, labels=True):
    n = draw(st.integers(1, max_pairs))
    d = draw(st.integers(2, max_dim))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2 * n, d))
    if labels:
        lab = draw(st.lists(st.integers(-1, 3), min_size=n, max_size=n))
    else:
        lab = None
    tau = draw(st.sampled_from([0.1, 0.5, 1.0]))
    return _batch(z, lab, tau)


class TestCosine:
    def test_identical(self):
        assert cosine_sim([1, 0], [1, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 1]) == 0.0

    def test_scale_invariant(self):
        assert cosine_sim([2, 0], [1, 0]) == 1.0

    def test_zero_norm(self):
        with pytest.raises(NumericalDomainError):
            cosine_sim([0, 0], [1, 0])


class TestHandValues:
    def test_ntxent_value(self):
        b = _batch([[1, 0], [1, 0], [0, 1], [0, 1]])
        expected = -math.log(math.e**2 / (math.e**2 + 2))
        assert float(ntxent_loss(b, 0)) == pytest.approx(0.239545, abs=1e-6)
        assert float(ntxent_loss(b, 0)) == pytest.approx(expected, abs=1e-12)

    def test_anatomy_value(self):
        z = torch.tensor([[1, 0], [1, 0], [0, 1], [-1, 0]], dtype=torch.float64)
        b = EmbeddingBatch(z, [0, 0, 1, 1], [0, 1, 0, 1], [5, 5, 5, 7])
        d = math.e**2 + 1 + math.e**-2
        expected = ((math.log(d) - 2) + math.log(d)) / 2
        got = float(anatomy_aware_loss(b, 0, [1, 2]))
        assert got == pytest.approx(1.1429316285, abs=1e-9)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(float(anatomy_aware_loss(b, 0)), abs=1e-12)

    def test_two_rows_identical_is_zero(self):
        b = _batch([[0.3, 0.4], [0.3, 0.4]])
        assert float(ntxent_loss(b, 0)) == pytest.approx(0.0, abs=1e-12)

    def test_mixed_batch_matches_enumeration(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(8, 5))
        labels = [4, 4, UNLABELED, UNLABELED]
        b = _batch(z, labels)
        pair = [1, 0, 3, 2, 5, 4, 7, 6]
        rows = [4, 4, 4, 4, -1, -1, -1, -1]
        want = oracles.batch_loss(z.tolist(), rows, pair)
        terms = [oracles.anatomy(z.tolist(), i, oracles.positive_set(rows, i)) for i in range(4)]
        terms += [oracles.ntxent(z.tolist(), i, pair[i]) for i in range(4, 8)]
        assert want == pytest.approx(sum(terms) / 8, abs=1e-12)
        assert float(awcl_batch_loss(b)) == pytest.approx(want, abs=1e-6)


class TestErrors:
    def test_single_row(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(torch.zeros(1, 2), [0], [0], [UNLABELED])

    def test_odd_rows(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(torch.ones(3, 2), [0, 0, 1], [0, 1, 0], [-1, -1, -1])

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            _batch(np.ones((2, 2)), tau=0.0)

    def test_empty_positive_set(self):
        b = _batch(np.eye(4), [0, 1])
        with pytest.raises(ValueError):
            anatomy_aware_loss(b, 0, [])

    def test_anchor_in_own_set(self):
        b = _batch(np.eye(4), [0, 0])
        with pytest.raises(ValueError):
            anatomy_aware_loss(b, 0, [0, 1])

    def test_unlabeled_anchor_defaults_to_empty(self):
        b = _batch(np.eye(4))
        with pytest.raises(ValueError):
            anatomy_aware_loss(b, 0)


class TestPositiveSets:
    def test_excludes_self_and_unlabeled(self):
        b = _batch(np.eye(6), [2, UNLABELED, 2])
        sets = positive_sets(b)
        assert sets[0] == [1, 4, 5]
        assert sets[2] == [] and sets[3] == []

    def test_dispatch_branch(self):
        b = _batch(np.eye(6), [2, UNLABELED, 9])
        mask, branch = dispatch_mask(b)
        # labeled rows always have their own other view in A(i)
        assert branch.tolist() == [True, True, False, False, True, True]
        assert mask[2].nonzero().flatten().tolist() == [3]

    def test_non_interleaved_pairing(self):
        rng = np.random.default_rng(0)
        z = torch.as_tensor(rng.normal(size=(6, 4)))
        # layout [a0 a1 a2 b0 b1 b2]
        b = EmbeddingBatch(z, [0, 1, 2, 0, 1, 2], [0, 0, 0, 1, 1, 1], [-1] * 6)
        assert b.pair_index().tolist() == [3, 4, 5, 0, 1, 2]
        want = sum(oracles.ntxent(z.tolist(), i, (i + 3) % 6) for i in range(6)) / 6
        assert float(ntxent_batch_loss(b)) == pytest.approx(want, abs=1e-9)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(batches())
    def test_matches_oracle(self, b):
        z = b.z.tolist()
        rows = b.anatomy.tolist()
        pair = b.pair_index().tolist()
        assert float(awcl_batch_loss(b)) == pytest.approx(oracles.batch_loss(z, rows, pair, b.tau), abs=1e-6)
        for i in range(len(b)):
            assert float(ntxent_loss(b, i)) == pytest.approx(oracles.ntxent(z, i, pair[i], b.tau), abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(batches(labels=False))
    def test_reduction_unlabeled(self, b):
        assert float(awcl_batch_loss(b)) == pytest.approx(float(ntxent_batch_loss(b)), abs=1e-9)
        assert float(ntxent_anchor_mean(b)) == pytest.approx(float(ntxent_batch_loss(b)), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(batches())
    def test_reduction_distinct_labels(self, b):
        # every sample its own class: A(i) is exactly the other view
        distinct = _batch(b.z, list(range(len(b) // 2)), b.tau)
        assert float(awcl_batch_loss(distinct)) == pytest.approx(float(ntxent_batch_loss(distinct)), abs=1e-9)
        assert float(anatomy_anchor_mean(distinct)) == pytest.approx(float(ntxent_batch_loss(distinct)), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(batches(), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, b, scale):
        scaled = b.with_z(b.z * scale)
        assert float(awcl_batch_loss(scaled)) == pytest.approx(float(awcl_batch_loss(b)), abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(batches(), st.randoms(use_true_random=False))
    def test_permutation_invariance(self, b, rnd):
        perm = list(range(len(b)))
        rnd.shuffle(perm)
        assert float(awcl_batch_loss(b.permuted(perm))) == pytest.approx(float(awcl_batch_loss(b)), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(batches())
    def test_positivity_and_finite(self, b):
        losses, _ = per_anchor_losses(b)
        assert torch.isfinite(losses).all()
        if len(b) > 2:
            assert (losses >= 0).all()

    @settings(max_examples=50, deadline=None)
    @given(batches(), st.sampled_from([1e-6, 1e-3, 1.0, 1e3, 1e6]))
    def test_extreme_norms_finite(self, b, norm):
        z = torch.nn.functional.normalize(b.z, dim=1) * norm
        assert torch.isfinite(awcl_batch_loss(b.with_z(z)))

    @settings(max_examples=50, deadline=None)
    @given(batches())
    def test_symmetric_positive_sets(self, b):
        m = b.positive_mask()
        assert torch.equal(m, m.T)
        assert not m.diagonal().any()

    def test_unit_grid_oracle(self):
        # small-dimensional grid of unit vectors, 2N <= 8, D <= 4
        rng = np.random.default_rng(11)
        grid = [np.eye(4)[k] * s for k in range(4) for s in (1, -1)]
        grid += [v / np.linalg.norm(v) for v in ([1, 1, 0, 0], [1, -1, 1, 0], [0, 1, 1, 1])]
        for _ in range(200):
            n = int(rng.integers(1, 5))
            z = np.stack([grid[k] for k in rng.integers(0, len(grid), 2 * n)])
            labels = rng.integers(-1, 2, n).tolist()
            b = _batch(z, labels)
            want = oracles.batch_loss(z.tolist(), b.anatomy.tolist(), b.pair_index().tolist())
            assert float(awcl_batch_loss(b)) == pytest.approx(want, abs=1e-6)


class TestGradients:
    @pytest.mark.parametrize("fn", [ntxent_batch_loss, awcl_batch_loss, anatomy_anchor_mean])
    def test_random_batch(self, fn):
        rng = np.random.default_rng(1)
        b = _batch(rng.normal(size=(8, 16)), [0, 0, 1, UNLABELED])
        assert finite_difference_check(fn, b, 1e-5) < 1e-4

    def test_float32_input_checked_in_float64(self):
        rng = np.random.default_rng(2)
        b = EmbeddingBatch.interleaved(torch.as_tensor(rng.normal(size=(4, 3)), dtype=torch.float32))
        assert finite_difference_check(ntxent_batch_loss, b) < 1e-4

    def test_constant_batch_flagged(self):
        b = _batch(np.ones((4, 3)))
        with pytest.warns(UserWarning, match="degenerate"):
            assert math.isnan(finite_difference_check(ntxent_batch_loss, b))

    def test_eps_outside_range_warns(self):
        rng = np.random.default_rng(2)
        b = _batch(rng.normal(size=(4, 3)))
        with pytest.warns(UserWarning, match="eps"):
            finite_difference_check(ntxent_batch_loss, b, eps=1e-2)
