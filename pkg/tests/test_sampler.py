import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awcl.errors import ConfigError
from awcl.loss import UNLABELED
from awcl.sampler import (BatchPlan, SampleTable, SamplerConfig, build_positive_sets, participating_count,
                          plan_epoch, select_participating)
from awcl.taxonomy import default_taxonomy, synthetic_taxonomy


def _table(n=400, labeled=0.5, n_fine=8, per=2, n_scans=10, seed=0):
    rng = np.random.default_rng(seed)
    t = synthetic_taxonomy(n_fine, per)
    fine = rng.integers(0, n_fine, n)
    fine[rng.random(n) >= labeled] = UNLABELED
    coarse = np.array([t.coarsen(int(f)) if f >= 0 else UNLABELED for f in fine])
    scan = np.repeat(np.arange(n_scans), -(-n // n_scans))[:n]
    return SampleTable(fine, coarse, scan), t


class TestConfig:
    def test_simclr_forces_none(self):
        assert SamplerConfig(mode="simclr", granularity="fine").granularity == "none"

    @pytest.mark.parametrize("kw, field", [
        ({"anatomy_ratio": 1.5}, "sampler.anatomy_ratio"),
        ({"anatomy_ratio": -0.1}, "sampler.anatomy_ratio"),
        ({"batch_size": 1}, "sampler.batch_size"),
        ({"mode": "moco"}, "sampler.mode"),
        ({"granularity": "none"}, "sampler.granularity"),
    ])
    def test_invalid(self, kw, field):
        with pytest.raises(ConfigError, match=field):
            SamplerConfig(**kw)


class TestSelection:
    def test_eighty_of_hundred(self):
        labels = np.repeat(np.arange(7), 15)[:100]
        assert len(select_participating(labels, 0.8, seed=0)) == 80

    def test_fixed_per_seed(self):
        labels = np.repeat(np.arange(4), 25)
        a = select_participating(labels, 0.3, seed=5)
        assert np.array_equal(a, select_participating(labels, 0.3, seed=5))
        assert not np.array_equal(a, select_participating(labels, 0.3, seed=6))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-1, 5), min_size=0, max_size=200), st.floats(0, 1), st.integers(0, 1000))
    def test_exact_count_stratified(self, labels, ratio, seed):
        labels = np.array(labels, dtype=np.int64)
        chosen = select_participating(labels, ratio, seed)
        n_labeled = int(np.sum(labels != UNLABELED))
        assert len(chosen) == participating_count(n_labeled, ratio)
        assert len(set(chosen.tolist())) == len(chosen)
        assert np.all(labels[chosen] != UNLABELED)
        for c in np.unique(labels[labels != UNLABELED]):
            # within one frame of the proportional share
            share = ratio * np.sum(labels == c)
            assert abs(np.sum(labels[chosen] == c) - share) < 1 + 1e-9


class TestPlan:
    def test_simclr_all_unlabeled(self):
        table, _ = _table()
        plan = plan_epoch(table, SamplerConfig(mode="simclr", batch_size=16))
        assert all(np.all(b.anatomy == UNLABELED) for b in plan)
        assert all(not build_positive_sets(b).any() for b in plan)

    def test_ratio_zero_matches_simclr(self):
        table, _ = _table()
        a = plan_epoch(table, SamplerConfig(mode="awcl", anatomy_ratio=0.0, batch_size=16, seed=3), epoch=2)
        b = plan_epoch(table, SamplerConfig(mode="simclr", batch_size=16, seed=3), epoch=2)
        assert [x.indices.tolist() for x in a] == [x.indices.tolist() for x in b]
        assert all(np.all(x.anatomy == UNLABELED) for x in a)

    def test_awcl_without_labels(self):
        table = SampleTable(np.full(10, -1), np.full(10, -1), np.zeros(10))
        with pytest.raises(ConfigError):
            plan_epoch(table, SamplerConfig(mode="awcl"))

    def test_single_participant_becomes_unlabeled(self):
        fine = np.array([0, 1, 1] + [UNLABELED] * 5)
        table = SampleTable(fine, fine, np.arange(8))
        plan = plan_epoch(table, SamplerConfig(batch_size=8))
        (batch,) = plan.batches
        pos = dict(zip(batch.indices.tolist(), batch.anatomy.tolist()))
        assert pos[0] == UNLABELED
        assert pos[1] == pos[2] == 1
        sets = build_positive_sets(batch)
        row = 2 * batch.indices.tolist().index(0)
        assert not sets[row].any()

    def test_clpi_groups_by_scan(self):
        table, _ = _table(n=120, n_scans=6)
        plan = plan_epoch(table, SamplerConfig(mode="clpi", batch_size=12))
        for b in plan:
            scans = table.scan[b.indices]
            sets = build_positive_sets(b)
            rows = np.repeat(scans, 2)
            # positives across samples always share a scan
            assert np.all((rows[:, None] == rows[None, :]) | ~sets)
            assert np.all(b.fine == UNLABELED)
        assert plan.stats["anatomy_branch_fraction"] > 0.9

    def test_coverage(self):
        table, _ = _table(n=203)
        plan = plan_epoch(table, SamplerConfig(batch_size=16))
        used = np.concatenate([b.indices for b in plan])
        assert len(plan) == 203 // 16
        assert all(len(b) == 16 for b in plan)
        assert len(np.unique(used)) == len(used)
        assert sorted(used.tolist() + plan.dropped.tolist()) == list(range(203))

    def test_epochs_reshuffle(self):
        table, _ = _table()
        cfg = SamplerConfig(batch_size=16)
        e0, e1 = plan_epoch(table, cfg, 0), plan_epoch(table, cfg, 1)
        assert [b.indices.tolist() for b in e0] != [b.indices.tolist() for b in e1]
        assert np.array_equal(e0.participating, e1.participating)
        assert [b.indices.tolist() for b in e0] == [b.indices.tolist() for b in plan_epoch(table, cfg, 0)]

    def test_participants_find_partners(self):
        table, _ = _table(n=640, labeled=0.5)
        plan = plan_epoch(table, SamplerConfig(batch_size=32, anatomy_ratio=0.5))
        assert plan.unpaired == 0
        for b in plan:
            vals, counts = np.unique(b.anatomy[b.anatomy != UNLABELED], return_counts=True)
            assert np.all(counts >= 2)

    def test_manifest_input(self, tmp_path):
        from awcl.data import SyntheticSpec, generate_synthetic

        m = generate_synthetic(SyntheticSpec(n_scans=2, frames_per_scan=20, image_size=(8, 8)), tmp_path)
        plan = plan_epoch(m, SamplerConfig(batch_size=8))
        assert plan.stats["n_batches"] == 5


class TestPositiveSets:
    def _plan(self, names, gran):
        t = default_taxonomy()
        fine = np.array([t.fine_id(n) for n in names])
        coarse = np.array([t.coarsen(int(f)) for f in fine])
        ids = fine if gran == "fine" else coarse
        return BatchPlan(np.arange(len(names)), ids, fine, coarse, gran)

    def test_coarse_merges_spine(self):
        plan = self._plan(["SpineCor", "SpineSag", "profile", "abdomen"], "coarse")
        sets = build_positive_sets(plan)
        assert sets[0, 2] and sets[2, 0]

    def test_fine_separates_spine(self):
        plan = self._plan(["SpineCor", "SpineSag", "profile", "abdomen"], "fine")
        sets = build_positive_sets(plan)
        assert not sets[0, 2] and not sets[2, 0]
        assert build_positive_sets(plan, "coarse")[0, 2]

    def test_distinct_classes_only_own_view(self):
        plan = self._plan(["3VT", "femur", "lips", "kidneys"], "fine")
        sets = build_positive_sets(plan)
        expected = np.zeros((8, 8), bool)
        for k in range(4):
            expected[2 * k, 2 * k + 1] = expected[2 * k + 1, 2 * k] = True
        assert np.array_equal(sets, expected)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.sampled_from([0.1, 0.3, 0.5, 0.8, 1.0]), st.sampled_from([4, 8, 16]))
    def test_symmetry_and_monotonicity(self, seed, ratio, n):
        table, t = _table(n=160, seed=seed)
        for gran in ("fine", "coarse"):
            plan = plan_epoch(table, SamplerConfig(batch_size=n, anatomy_ratio=ratio, granularity=gran, seed=seed),
                              taxonomy=t)
            for b in plan:
                fine, coarse = build_positive_sets(b, "fine"), build_positive_sets(b, "coarse")
                own = build_positive_sets(b)
                for s in (fine, coarse, own):
                    assert np.array_equal(s, s.T)
                    assert not s.diagonal().any()
                assert np.all(coarse >= fine)
