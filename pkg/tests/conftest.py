import sys
from pathlib import Path

import pytest

# 添加项目根目录到Python路径
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from chain_core import ChainSpec, PointMassSpec  # noqa: E402


@pytest.fixture
def det_spec() -> ChainSpec:
    """N=16, ν₀=δ₅, ν_N=δ₁₁"""
    return PointMassSpec(16, 5, 11).to_chain_spec()


@pytest.fixture
def sym_spec() -> ChainSpec:
    """N=16, ν₀=ν_N=unif{5,7}"""
    return ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {5: 0.5, 7: 0.5})


@pytest.fixture
def mirror_sym_spec() -> ChainSpec:
    """N=16, ν₀=ν_N=unif{5,11}：关于 N/2 镜像对称"""
    return ChainSpec.from_sparse(16, {5: 0.5, 11: 0.5}, {5: 0.5, 11: 0.5})
