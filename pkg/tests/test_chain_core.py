#!/usr/bin/env python3
"""
测试链参数、转移矩阵与参数文件读写
"""

import json
import tempfile
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chain_core import (
    ChainSpec,
    MassSumError,
    NegativeMassError,
    NotMultipleOfFourError,
    NotPointMassError,
    ParityError,
    PointMassSpec,
    ProbVector,
    SiteError,
    dump_spec,
    evolve,
    load_spec,
    mirror,
    rho,
    stationary,
    transition_row,
    transition_row_exact,
)


def test_transition_rows_point_mass(det_spec):
    """测试点质量重分布的边界行"""
    row0 = transition_row(det_spec, 0).as_dict()
    assert row0 == {0: 0.5, 1: 0.25, 5: 0.25}, f"x=0 的转移行错误: {row0}"

    rowN = transition_row(det_spec, 16).as_dict()
    assert rowN == {16: 0.5, 15: 0.25, 11: 0.25}, f"x=N 的转移行错误: {rowN}"

    row7 = transition_row(det_spec, 7).as_dict()
    assert row7 == {6: 0.25, 7: 0.5, 8: 0.25}


def test_matrix_is_stochastic(sym_spec):
    """测试转移矩阵每行和为 1 且只读"""
    P = sym_spec.matrix
    assert P.shape == (17, 17)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-15)
    assert np.all(P >= 0)
    with pytest.raises(ValueError):
        P[0, 0] = 1.0


def test_exact_row_rational():
    """测试有理数转移行"""
    spec = ChainSpec.from_sparse(16, {3: 1 / 3, 5: 1 / 3, 7: 1 / 3}, {13: 1.0})
    row = transition_row_exact(spec, 0)
    assert row == {
        0: Fraction(1, 2),
        1: Fraction(1, 4),
        3: Fraction(1, 12),
        5: Fraction(1, 12),
        7: Fraction(1, 12),
    }
    assert sum(row.values()) == 1


@pytest.mark.parametrize("N", [0, 2, 6, 10, 18])
def test_bad_N(N):
    """测试 N 不是 4 的倍数"""
    with pytest.raises(NotMultipleOfFourError):
        PointMassSpec(N, 3, 3)


def test_parity_error_message():
    """测试偶数支撑报告 parity 错误"""
    with pytest.raises(ParityError) as exc:
        ChainSpec.from_sparse(16, {4: 1.0}, {11: 1.0})
    assert "parity" in str(exc.value)

    with pytest.raises(ParityError):
        PointMassSpec(16, 1, 11)
    with pytest.raises(ParityError):
        PointMassSpec(16, 5, 15)


def test_mass_errors():
    """测试总质量与负质量校验"""
    with pytest.raises(MassSumError):
        ChainSpec.from_sparse(16, {5: 0.9}, {11: 1.0})
    with pytest.raises(NegativeMassError):
        ChainSpec.from_sparse(16, {5: 1.5, 7: -0.5}, {11: 1.0})
    with pytest.raises(SiteError):
        ChainSpec.from_sparse(16, {17: 1.0}, {11: 1.0})


def test_rho():
    """测试 ρ 的定义"""
    assert rho(PointMassSpec(16, 5, 11).to_chain_spec()) == 4
    assert rho(PointMassSpec(16, 3, 13).to_chain_spec()) == 2
    assert rho(PointMassSpec(24, 7, 17).to_chain_spec()) == 6
    assert rho(ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {5: 0.5, 7: 0.5})) == 4


def test_point_mass_conversion(det_spec, sym_spec):
    """测试点质量识别与镜像"""
    pm = det_spec.as_point_mass()
    assert (pm.N, pm.J0, pm.JN) == (16, 5, 11)
    with pytest.raises(NotPointMassError):
        sym_spec.as_point_mass()

    assert PointMassSpec(16, 13, 5).needs_mirror
    assert not PointMassSpec(16, 3, 13).needs_mirror
    mirrored = PointMassSpec(16, 13, 5).mirrored()
    assert (mirrored.J0, mirrored.JN) == (11, 3)


def test_mirror_conjugates_matrix(sym_spec):
    """测试 x ↦ N−x 的共轭关系"""
    P = sym_spec.matrix
    Q = mirror(sym_spec).matrix
    assert np.allclose(Q, P[::-1, ::-1])
    assert mirror(mirror(sym_spec)).same_law(sym_spec)


def test_symmetry_flags(sym_spec, mirror_sym_spec, det_spec):
    assert sym_spec.symmetric_redistribution
    assert not sym_spec.reflection_symmetric
    assert mirror_sym_spec.reflection_symmetric
    assert not det_spec.symmetric_redistribution


def test_stationary_and_evolve(det_spec):
    """测试平稳分布与分布演化"""
    pi = stationary(det_spec)
    assert np.abs(pi.entries @ det_spec.matrix - pi.entries).sum() <= 1e-10

    one_step = evolve(det_spec, ProbVector.point(16, 0), 1)
    assert np.allclose(one_step.entries, transition_row(det_spec, 0).entries)
    assert evolve(det_spec, pi, 50).entries == pytest.approx(pi.entries, abs=1e-10)


def test_prob_vector_validation():
    with pytest.raises(ValueError):
        ProbVector(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ProbVector(np.array([1.5, -0.5]))
    with pytest.raises(SiteError):
        ProbVector.point(16, 17)


def test_spec_file_roundtrip():
    """测试参数文件读写（稀疏、稠密、点质量简写）"""
    with tempfile.TemporaryDirectory() as tmp:
        spec = ChainSpec.from_sparse(16, {5: 0.25, 7: 0.75}, {9: 1.0})
        path = dump_spec(spec, Path(tmp) / "spec.json")
        assert load_spec(path).same_law(spec)

        short = Path(tmp) / "short.json"
        short.write_text(json.dumps({"N": 16, "J0": 3, "JN": 13}), encoding="utf-8")
        assert load_spec(short).as_point_mass() == PointMassSpec(16, 3, 13)

        dense = Path(tmp) / "dense.json"
        nu = [0.0] * 17
        nu[5] = 1.0
        dense.write_text(json.dumps({"N": 16, "nu0": nu, "nuN": nu}), encoding="utf-8")
        assert load_spec(dense).symmetric_redistribution

        both = Path(tmp) / "both.json"
        both.write_text(json.dumps({"N": 16, "J0": 3, "JN": 13, "nu0": nu, "nuN": nu}), encoding="utf-8")
        with pytest.raises(ValueError):
            load_spec(both)

        bad = Path(tmp) / "bad.json"
        bad.write_text(json.dumps({"N": 16, "nu0": [[4, 1.0]], "nuN": [[11, 1.0]]}), encoding="utf-8")
        with pytest.raises(ParityError):
            load_spec(bad)

    with pytest.raises(FileNotFoundError):
        load_spec("/nonexistent/spec.json")


@st.composite
def point_mass_specs(draw):
    N = draw(st.sampled_from([8, 12, 16, 20, 24]))
    odd_sites = list(range(3, N - 2, 2))
    return PointMassSpec(N, draw(st.sampled_from(odd_sites)), draw(st.sampled_from(odd_sites)))


@settings(max_examples=50, deadline=None)
@given(point_mass_specs())
def test_rows_are_distributions(pm):
    """性质测试：任意合法参数的每一行都是概率分布"""
    spec = pm.to_chain_spec()
    for x in range(pm.N + 1):
        exact = transition_row_exact(spec, x)
        assert sum(exact.values()) == 1
        assert np.allclose(transition_row(spec, x).entries, spec.matrix[x])


@st.composite
def mixed_specs(draw):
    N = draw(st.sampled_from([8, 12, 16, 20, 24]))
    odd_sites = list(range(3, N - 2, 2))

    def law():
        sites = draw(st.lists(st.sampled_from(odd_sites), min_size=1, max_size=3, unique=True))
        weights = draw(st.lists(st.integers(1, 4), min_size=len(sites), max_size=len(sites)))
        total = sum(weights)
        return {s: w / total for s, w in zip(sites, weights)}

    return ChainSpec.from_sparse(N, law(), law())


any_specs = st.one_of(point_mass_specs().map(PointMassSpec.to_chain_spec), mixed_specs())


@settings(max_examples=40, deadline=None)
@given(any_specs, st.integers(0, 30), st.integers(0, 30), st.data())
def test_evolve_semigroup(spec, a, b, data):
    x = data.draw(st.integers(0, spec.N))
    start = ProbVector.point(spec.N, x)
    two_legs = evolve(spec, evolve(spec, start, a), b).entries
    np.testing.assert_allclose(two_legs, evolve(spec, start, a + b).entries, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(any_specs)
def test_chain_is_irreducible_and_aperiodic(spec):
    """2N 步之后任意两点之间都有正概率"""
    assert np.all(np.linalg.matrix_power(spec.matrix, 2 * spec.N) > 0)


@settings(max_examples=40, deadline=None)
@given(any_specs)
def test_rho_bounds(spec):
    support = spec.support("both")
    distance = int(np.minimum(support, spec.N - support).min())
    r = rho(spec)
    assert r >= 2
    assert r % 2 == 0
    assert r <= distance < r + 2


@settings(max_examples=25, deadline=None)
@given(any_specs)
def test_stationary_is_long_run_limit(spec):
    pi = stationary(spec).entries
    limit = evolve(spec, ProbVector.point(spec.N, 0), 10 ** 5).entries
    assert np.abs(pi - limit).sum() <= 1e-8
