#!/usr/bin/env python3
"""
测试耦合引擎：单步耦合、阶段分类、两台状态机、占优抽样与共享随机性的精确枚举
"""

from collections import Counter

import numpy as np
import pytest

from chain_core import ChainSpec, NotPointMassError, PointMassSpec, rho, transition_row_exact
from coupling_engine import (
    DET_STAGES,
    SYM_MAX_STAGES,
    SYM_STAGES,
    CoupledPair,
    CouplingEngine,
    IncrementStream,
    Regime,
    StageInvariantError,
    StageLabel,
    SymmetricPoints,
    TrialRecord,
    UnsupportedSpecError,
    UnsupportedStartError,
    check_edge,
    classify_det,
    decompose_pair,
    default_horizon,
    det_coupling_run,
    dominance_sampler,
    enumerate_step,
    exact_marginals,
    parity_fix_step,
    rate_start_pair,
    ref_step,
    ref_witness_run,
    rigid_step,
    stage_entry_pairs,
    stage_length_bounds,
    sym_coupling_run,
    witness_pair,
)

DET_SPECS = [PointMassSpec(16, 5, 11), PointMassSpec(16, 3, 13), PointMassSpec(16, 13, 3)]


class TestBasicTypes:
    def test_coupled_pair(self):
        pair = CoupledPair.of(9, 3)
        assert (pair.x_lo, pair.x_hi, pair.D) == (3, 9, 6)
        assert not pair.coalesced
        assert CoupledPair.of(4, 4).coalesced
        with pytest.raises(ValueError):
            CoupledPair(5, 2)

    def test_symmetric_points(self):
        pts = SymmetricPoints.of(PointMassSpec(16, 5, 11), 2)
        assert (pts.ell0, pts.ellN) == (1, 13)
        pts = SymmetricPoints.of(PointMassSpec(16, 5, 11), 4)
        assert (pts.ell0, pts.ellN) == (0, 12)

    def test_stage_tables(self):
        assert len(DET_STAGES) == 6 and len(SYM_STAGES) == 6
        check_edge(None, StageLabel.S2a)
        check_edge(StageLabel.S2a, StageLabel.S1)
        with pytest.raises(StageInvariantError):
            check_edge(StageLabel.S1, StageLabel.S2a)
        with pytest.raises(StageInvariantError):
            check_edge(StageLabel.R3, StageLabel.R1a)


class TestIncrementStream:
    def test_xi_distribution(self):
        stream = IncrementStream(np.random.default_rng(7))
        counts = Counter(stream.xi() for _ in range(40000))
        assert set(counts) == {-1, 0, 1}
        assert abs(counts[0] / 40000 - 0.5) < 0.02
        assert abs(counts[1] / 40000 - 0.25) < 0.02

    def test_coins_distribution(self):
        stream = IncrementStream(np.random.default_rng(11))
        counts = Counter(stream.coins() for _ in range(40000))
        assert set(counts) == {(False, -1), (False, 1), (True, -1), (True, 1)}
        for value in counts.values():
            assert abs(value / 40000 - 0.25) < 0.02

    def test_reproducible(self):
        a = IncrementStream(np.random.default_rng(3))
        b = IncrementStream(np.random.default_rng(3))
        assert [a.xi() for _ in range(100)] == [b.xi() for _ in range(100)]


class TestSingleSteps:
    def test_rigid_step_keeps_gap_inside(self, det_spec):
        for seed in range(50):
            pair = rigid_step(CoupledPair(6, 8), det_spec, seed)
            assert pair.D == 2
            assert pair.regime is Regime.RIGID

    def test_ref_step(self, det_spec):
        for seed in range(50):
            pair = ref_step(CoupledPair(6, 8), det_spec, seed)
            assert pair.D in (0, 2, 4)
        with pytest.raises(ValueError):
            ref_step(CoupledPair(6, 9), det_spec, 0)

    def test_coalesced_state_rejected(self, det_spec):
        with pytest.raises(ValueError):
            rigid_step(CoupledPair(6, 6), det_spec, 0)

    def test_parity_fix_step(self, det_spec):
        """双硬币步之后间距为偶数，且只有一个副本移动"""
        for seed in range(50):
            pair = parity_fix_step(6, 9, det_spec, seed)
            assert pair.D % 2 == 0
            assert pair.stage is StageLabel.ParityFix
            assert (pair.x_lo == 6) != (pair.x_hi == 9) or pair.coalesced
        with pytest.raises(ValueError):
            parity_fix_step(6, 8, det_spec, 0)


class TestClassification:
    def test_classify_det(self):
        pm = PointMassSpec(16, 5, 11)
        assert classify_det(pm, 1, 3) is StageLabel.S1
        assert classify_det(pm, 13, 15) is StageLabel.S1
        assert classify_det(pm, 5, 7) is StageLabel.S2a
        assert classify_det(pm, 0, 2) is StageLabel.S2b
        assert classify_det(pm, 14, 16) is StageLabel.S2c
        assert classify_det(pm, 0, 4) is StageLabel.S1
        assert classify_det(pm, 4, 4) is StageLabel.Done
        assert classify_det(pm, 4, 7) is None

    def test_stage_entry_pairs(self):
        entries = stage_entry_pairs(PointMassSpec(16, 5, 11))
        for stage in (StageLabel.S1, StageLabel.S2a, StageLabel.S2b, StageLabel.S2c):
            assert entries[stage], f"{stage.value} 没有入口"
        assert (1, 3) in entries[StageLabel.S1]

    def test_stage_entry_pairs_mirrored(self):
        """镜像参数的入口在原坐标下给出"""
        pm = PointMassSpec(16, 13, 5)
        for stage, pairs in stage_entry_pairs(pm).items():
            for x, y in pairs:
                assert classify_det(pm.mirrored(), 16 - y, 16 - x) is stage

    def test_rate_start_pair(self):
        assert rate_start_pair(PointMassSpec(16, 5, 11)) == (7, 9)
        assert rate_start_pair(PointMassSpec(16, 13, 3)) == (5, 7)

    def test_stage_length_bounds(self, det_spec, sym_spec):
        bounds = stage_length_bounds(det_spec, "det")
        assert set(bounds) == {s.value for s in DET_STAGES}
        assert bounds["S2a"] == 11
        assert set(stage_length_bounds(sym_spec, "sym").values()) == {8}

    def test_default_horizon(self, det_spec, sym_spec):
        assert default_horizon(det_spec, "det") == 200 * 11 ** 2
        assert default_horizon(sym_spec, "sym") == 200 * 64


class TestDetMachine:
    @pytest.mark.parametrize("pm", DET_SPECS)
    def test_all_entries_coalesce(self, pm):
        """每个入口都能在断言全部通过的情况下耦合"""
        for stage, pairs in stage_entry_pairs(pm).items():
            if stage is StageLabel.Done:
                continue
            for x, y in pairs:
                for seed in range(20):
                    record = det_coupling_run(pm, x, y, seed)
                    assert not record.timed_out
                    assert record.assertions_passed
                    assert record.tau >= 1
                    assert record.entry_stage == stage.value
                    assert sum(d for _, d in record.stage_path) == record.tau

    def test_deterministic_given_seed(self, det_spec):
        first = det_coupling_run(det_spec, 7, 9, 1234)
        second = det_coupling_run(det_spec, 7, 9, 1234)
        assert first == second
        assert first.seed == 1234

    def test_odd_gap_starts_with_parity_fix(self, det_spec):
        record = det_coupling_run(det_spec, 4, 7, 5)
        assert record.stage_path[0][0] == "ParityFix"
        assert record.stage_path[0][1] == 1
        assert record.entry_stage == "S2a"

    def test_gap_too_large(self, det_spec):
        with pytest.raises(UnsupportedStartError):
            det_coupling_run(det_spec, 0, 6, 0)
        with pytest.raises(UnsupportedStartError):
            det_coupling_run(det_spec, 0, 7, 0)

    def test_timeout(self, det_spec):
        record = det_coupling_run(det_spec, 5, 7, 0, horizon=1)
        assert record.timed_out
        assert record.tau == 1

    def test_already_coalesced(self, det_spec):
        record = det_coupling_run(det_spec, 5, 5, 0)
        assert record.tau == 0
        assert record.stage_path == ()

    def test_requires_point_mass(self, sym_spec):
        with pytest.raises(NotPointMassError):
            det_coupling_run(sym_spec, 2, 4, 0)

    def test_trace_sees_every_step(self, det_spec):
        seen = []
        record = det_coupling_run(det_spec, 0, 2, 99,
                                  trace=lambda stage, regime, lo, hi, chain: seen.append((stage, regime)))
        assert len(seen) == record.tau
        assert seen[0][0] is StageLabel.S2b


class TestSymMachine:
    @pytest.mark.parametrize("start", [(2, 6), (10, 14), (6, 10), (4, 8), (7, 8), (0, 4)])
    def test_starts_coalesce(self, sym_spec, start):
        for seed in range(30):
            record = sym_coupling_run(sym_spec, *start, seed)
            assert not record.timed_out
            labels = {label for label, _ in record.stage_path}
            assert labels <= {s.value for s in SYM_STAGES} | {"ParityFix", "Indep"}

    def test_cross_start_uses_alignment(self, sym_spec):
        record = sym_coupling_run(sym_spec, 6, 10, 3)
        assert record.entry_stage == "R1a"

    def test_mirror_trick(self, mirror_sym_spec):
        """ν 镜像对称时跨越 N/2 的起点走镜像子耦合"""
        for seed in range(30):
            record = sym_coupling_run(mirror_sym_spec, 6, 10, seed)
            assert not record.timed_out

    def test_point_mass_sym_runs_both_machines(self):
        spec = ChainSpec.from_sparse(16, {5: 1.0}, {5: 1.0})
        for seed in range(20):
            assert not sym_coupling_run(spec, 2, 6, seed).timed_out
            assert not det_coupling_run(spec, 2, 4, seed).timed_out

    def test_requires_symmetric(self, det_spec):
        with pytest.raises(UnsupportedSpecError):
            sym_coupling_run(det_spec, 2, 4, 0)


def test_engine_rejects_out_of_range(det_spec):
    engine = CouplingEngine(det_spec, 0)
    with pytest.raises(ValueError):
        engine.rigid_step(CoupledPair(15, 17))


@pytest.mark.parametrize("x, y, expected", [
    (0, 16, [(0, 4), (4, 8), (8, 12), (12, 16)]),
    (0, 7, [(0, 4), (4, 6), (6, 7)]),
    (0, 5, [(0, 4), (4, 5)]),
    (3, 5, [(3, 5)]),
])
def test_decompose_pair(x, y, expected):
    assert decompose_pair(x, y, 4, 16) == expected


def test_decompose_pair_invalid():
    with pytest.raises(ValueError):
        decompose_pair(5, 5, 4, 16)


@pytest.mark.parametrize("L", [1, 2, 3, 4, 7, 10])
def test_dominance_sampler(L):
    """成对样本处处满足 T ≤ T′"""
    rng = np.random.default_rng(L)
    for z in range(1, L + 1):
        for _ in range(200):
            T, T_center = dominance_sampler(L, z, rng)
            assert 1 <= T <= T_center


def test_dominance_sampler_invalid():
    with pytest.raises(ValueError):
        dominance_sampler(4, 0, 0)


@pytest.mark.parametrize("regime", [Regime.RIGID, Regime.REF, Regime.PARITY])
@pytest.mark.parametrize("spec_name", ["det", "sym", "three"])
def test_enumeration_reproduces_kernel(regime, spec_name, det_spec, sym_spec):
    """共享随机性映射的每个副本边际都恰好是 p(x,·)"""
    spec = {
        "det": det_spec,
        "sym": sym_spec,
        "three": ChainSpec.from_sparse(16, {3: 1 / 3, 5: 1 / 3, 7: 1 / 3}, {3: 1 / 3, 5: 1 / 3, 7: 1 / 3}),
    }[spec_name]
    for lo in range(spec.N + 1):
        for hi in range(lo + 1, spec.N + 1):
            if regime is Regime.REF and (hi - lo) % 2:
                continue
            outcomes = enumerate_step(spec, regime, lo, hi)
            assert sum(p for p, _ in outcomes) == 1
            first, second = exact_marginals(outcomes)
            assert first == transition_row_exact(spec, lo)
            assert second == transition_row_exact(spec, hi)


def test_enumerate_rejects_indep(det_spec):
    with pytest.raises(ValueError):
        enumerate_step(det_spec, Regime.INDEP, 2, 4)
WIDE_DET_SPECS = [PointMassSpec(24, 7, 17), PointMassSpec(24, 9, 15), PointMassSpec(24, 9, 17)]


@pytest.mark.parametrize("pm", WIDE_DET_SPECS)
def test_det_entries_for_every_even_gap(pm):
    """间距 2…ρ 的每个入口都能在断言全部通过的情况下耦合"""
    seen = set()
    for D in range(2, rho(pm.to_chain_spec()) + 1, 2):
        for stage, pairs in stage_entry_pairs(pm, D).items():
            for x, y in pairs:
                assert y - x == D
                seen.add(stage)
                for seed in range(10):
                    record = det_coupling_run(pm, x, y, seed)
                    assert not record.timed_out, (D, x, y, seed)
                    assert record.assertions_passed
                    assert record.entry_stage == stage.value
    assert {StageLabel.S1, StageLabel.S2a} <= seen


def test_wide_gaps_reach_outer_stages():
    pm = PointMassSpec(24, 7, 17)
    entries = {D: stage_entry_pairs(pm, D) for D in (2, 4)}
    assert StageLabel.S2b in entries[4]
    assert StageLabel.S2c in entries[2]
    assert entries[4][StageLabel.S2b] == [(0, 4)]
    record = det_coupling_run(pm, 0, 4, 3)
    assert record.entry_stage == "S2b"
    assert not record.timed_out


class TestWitnessRun:
    def test_single_ref_stage(self, sym_spec):
        for seed in range(30):
            record = ref_witness_run(sym_spec, seed)
            assert not record.timed_out
            assert record.stage_path == (("R3", record.tau),)
            assert record.tau >= 1

    def test_antisymmetric_until_meeting(self, mirror_sym_spec):
        seen = []
        engine = CouplingEngine(mirror_sym_spec, 7, seed=7, observe=lambda X, Y: seen.append((X, Y)))
        record = engine.run_witness()
        assert len(seen) == record.tau
        assert all(X + Y == 16 for X, Y in seen[:-1])
        assert seen[-1][0] == seen[-1][1]
        assert all(X < 8 for X, _ in seen[:-1])

    def test_requires_symmetric(self, det_spec):
        with pytest.raises(UnsupportedSpecError):
            ref_witness_run(det_spec, 0)

    def test_witness_pair(self, sym_spec):
        assert witness_pair(sym_spec) == (4, 12)
        assert witness_pair(PointMassSpec(24, 7, 17).to_chain_spec()) == (6, 18)


@pytest.mark.parametrize("spec", [
    ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {5: 0.5, 7: 0.5}),
    ChainSpec.from_sparse(16, {5: 0.5, 11: 0.5}, {5: 0.5, 11: 0.5}),
    ChainSpec.from_sparse(24, {3: 0.5, 5: 0.25, 9: 0.25}, {3: 0.5, 5: 0.25, 9: 0.25}),
])
def test_sym_stage_count_bounded(spec):
    N, r = spec.N, rho(spec)
    for x in range(0, N - r + 1):
        for y in range(x + 1, min(x + r, N) + 1):
            for seed in range(5):
                record = sym_coupling_run(spec, x, y, seed)
                assert not record.timed_out
                assert record.stage_count <= SYM_MAX_STAGES, record.path_string()


def test_stage_count_skips_parity_and_indep():
    record = TrialRecord(9, (("ParityFix", 1), ("R1a", 3), ("R3", 4), ("Indep", 1)))
    assert record.stage_count == 2


class TestObserver:
    @staticmethod
    def _observed(spec, x, y, seed, machine):
        seen = [(x, y)]
        engine = CouplingEngine(spec, seed, seed=seed, observe=lambda X, Y: seen.append((X, Y)))
        record = engine.run_det(x, y) if machine == "det" else engine.run_sym(x, y)
        return seen, record

    @staticmethod
    def _assert_walk(spec, seen):
        N = spec.N
        support0 = set(spec.support("nu0").tolist())
        supportN = set(spec.support("nuN").tolist())
        for (x0, y0), (x1, y1) in zip(seen[:-1], seen[1:]):
            for p, q in ((x0, x1), (y0, y1)):
                if abs(q - p) > 1:
                    assert (p == 0 and q in support0) or (p == N and q in supportN), (p, q)

    @pytest.mark.parametrize("pm, start", [
        (PointMassSpec(16, 5, 11), (0, 2)),
        (PointMassSpec(16, 5, 11), (4, 7)),
        (PointMassSpec(16, 13, 5), stage_entry_pairs(PointMassSpec(16, 13, 5))[StageLabel.S2a][0]),
    ])
    def test_det_positions(self, pm, start):
        spec = pm.to_chain_spec()
        for seed in range(20):
            seen, record = self._observed(spec, *start, seed, "det")
            assert len(seen) == record.tau + 1
            assert seen[-1][0] == seen[-1][1]
            assert all(X != Y for X, Y in seen[:-1])
            self._assert_walk(spec, seen)

    @pytest.mark.parametrize("start", [(2, 6), (6, 10), (7, 8), (12, 9)])
    def test_sym_positions(self, mirror_sym_spec, start):
        for seed in range(20):
            seen, record = self._observed(mirror_sym_spec, *start, seed, "sym")
            assert seen[0] == start
            assert len(seen) == record.tau + 1
            assert seen[-1][0] == seen[-1][1]
            self._assert_walk(mirror_sym_spec, seen)

    def test_solo_step_stays_on_chain(self, sym_spec):
        engine = CouplingEngine(sym_spec, 3)
        pos = 0
        for _ in range(500):
            nxt = engine.solo_step(pos)
            assert 0 <= nxt <= sym_spec.N
            assert abs(nxt - pos) <= 1 or (pos == 0 and nxt in (5, 7)) or (pos == 16 and nxt in (5, 7))
            pos = nxt
