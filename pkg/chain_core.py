"""
带边界重分布的惰性随机游走 {0,…,N}

转移规则：以 1/2 留在原地，以 1/4 走向每个相邻格点；
在 0 处走出左端的 1/4 质量按 ν₀ 重分布，在 N 处走出右端的 1/4 质量按 ν_N 重分布。
"""

import json
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, model_validator

MASS_TOL = 1e-12
PROB_TOL = 1e-10
STATIONARY_TOL = 1e-10
FRACTION_DENOMINATOR = 10 ** 9


class ChainError(ValueError):
    """链相关错误的基类"""


class SpecError(ChainError):
    """链参数不合法"""


class NotMultipleOfFourError(SpecError):
    """N 不是大于 2 的 4 的倍数"""


class ParityError(SpecError):
    """重分布测度的支撑违反奇偶性假设"""


class MassSumError(SpecError):
    """重分布测度总质量不为 1"""


class NegativeMassError(SpecError):
    """重分布测度含负质量"""


class SiteError(ChainError):
    """格点越界"""


class StationaryError(ChainError):
    """平稳分布残差不满足要求"""


class NotPointMassError(ChainError):
    """该操作需要点质量（确定性）重分布"""


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def check_site(N: int, x: int) -> int:
    if not isinstance(x, (int, np.integer)) or isinstance(x, bool):
        raise SiteError(f"格点必须是整数: {x!r}")
    if x < 0 or x > N:
        raise SiteError(f"格点越界: x={x} 不在 {{0,…,{N}}} 中")
    return int(x)


def _check_N(N: int) -> None:
    if not isinstance(N, (int, np.integer)) or N <= 2 or N % 4 != 0:
        raise NotMultipleOfFourError(f"N 必须是大于 2 的 4 的倍数: N={N}")


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """
    链参数：N 与两个重分布测度 ν₀、ν_N（长度 N+1 的稠密质量向量）

    构造时即校验，数组只读，可在线程/进程间共享。
    """

    N: int
    nu0: np.ndarray
    nuN: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "nu0", _frozen_array(self.nu0))
        object.__setattr__(self, "nuN", _frozen_array(self.nuN))
        validate(self)

    @classmethod
    def from_sparse(cls, N: int, nu0: Dict[int, float], nuN: Dict[int, float]) -> "ChainSpec":
        """由 {格点: 质量} 字典构造"""
        _check_N(N)
        return cls(N, _densify(N, nu0, "nu0"), _densify(N, nuN, "nuN"))

    @cached_property
    def matrix(self) -> np.ndarray:
        """转移矩阵 P（只读）"""
        P = np.vstack([_row(self, x) for x in range(self.N + 1)])
        P.setflags(write=False)
        return P

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.N + 1)

    def support(self, which: str = "both") -> np.ndarray:
        """重分布测度的支撑：which ∈ {"nu0", "nuN", "both"}"""
        if which == "nu0":
            mass = self.nu0
        elif which == "nuN":
            mass = self.nuN
        else:
            mass = self.nu0 + self.nuN
        return np.flatnonzero(mass > 0)

    @property
    def symmetric_redistribution(self) -> bool:
        """ν₀ = ν_N"""
        return bool(np.allclose(self.nu0, self.nuN, rtol=0.0, atol=MASS_TOL))

    @property
    def reflection_symmetric(self) -> bool:
        """ν₀ = ν_N 且关于 N/2 镜像对称"""
        return self.symmetric_redistribution and bool(
            np.allclose(self.nu0, self.nu0[::-1], rtol=0.0, atol=MASS_TOL)
        )

    def is_point_mass(self) -> bool:
        return _point_site(self.nu0) is not None and _point_site(self.nuN) is not None

    def as_point_mass(self) -> "PointMassSpec":
        J0 = _point_site(self.nu0)
        JN = _point_site(self.nuN)
        if J0 is None or JN is None:
            raise NotPointMassError("该命令需要点质量重分布 ν₀=δ_{J₀}, ν_N=δ_{J_N}")
        return PointMassSpec(self.N, J0, JN)

    def mirrored(self) -> "ChainSpec":
        """坐标变换 x ↦ N−x 之后的链：ν₀ 与 ν_N 互换并翻转"""
        return ChainSpec(self.N, self.nuN[::-1].copy(), self.nu0[::-1].copy())

    def same_law(self, other: "ChainSpec") -> bool:
        return (
            self.N == other.N
            and np.allclose(self.nu0, other.nu0, rtol=0.0, atol=MASS_TOL)
            and np.allclose(self.nuN, other.nuN, rtol=0.0, atol=MASS_TOL)
        )

    def describe(self) -> str:
        def fmt(mass: np.ndarray) -> str:
            sites = np.flatnonzero(mass > 0)
            return "{" + ", ".join(f"{s}:{mass[s]:.6g}" for s in sites) + "}"
        return f"N={self.N}, ν₀={fmt(self.nu0)}, ν_N={fmt(self.nuN)}"


@dataclass(frozen=True)
class PointMassSpec:
    """确定性重分布：ν₀ = δ_{J₀}，ν_N = δ_{J_N}"""

    N: int
    J0: int
    JN: int

    def __post_init__(self):
        _check_N(self.N)
        for name, J in (("J0", self.J0), ("JN", self.JN)):
            if J % 2 == 0 or J < 3 or J > self.N - 3:
                raise ParityError(
                    f"违反奇偶性(parity)假设: {name}={J} 必须是 {{3,5,…,{self.N - 3}}} 中的奇数"
                )

    def to_chain_spec(self) -> ChainSpec:
        return ChainSpec.from_sparse(self.N, {self.J0: 1.0}, {self.JN: 1.0})

    def mirrored(self) -> "PointMassSpec":
        """x ↦ N−x 下的点质量参数"""
        return PointMassSpec(self.N, self.N - self.JN, self.N - self.J0)

    @property
    def needs_mirror(self) -> bool:
        """约定 J₀ ≤ N−J_N，不满足时在镜像坐标中运行"""
        return self.J0 > self.N - self.JN


@dataclass(frozen=True, eq=False)
class ProbVector:
    """{0,…,N} 上的概率分布"""

    entries: np.ndarray

    def __post_init__(self):
        arr = _frozen_array(self.entries)
        if arr.ndim != 1 or arr.size < 2:
            raise ChainError(f"概率向量必须是一维且长度至少为 2: shape={arr.shape}")
        if np.any(arr < 0):
            raise ChainError(f"概率向量含负值: min={arr.min():.3e}")
        total = float(arr.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise ChainError(f"概率向量总和不为 1: sum={total:.17g}")
        object.__setattr__(self, "entries", arr)

    @classmethod
    def point(cls, N: int, x: int) -> "ProbVector":
        x = check_site(N, x)
        entries = np.zeros(N + 1)
        entries[x] = 1.0
        return cls(entries)

    @property
    def N(self) -> int:
        return self.entries.size - 1

    def __len__(self) -> int:
        return self.entries.size

    def __getitem__(self, x: int) -> float:
        return float(self.entries[x])

    def as_dict(self) -> Dict[int, float]:
        return {int(i): float(self.entries[i]) for i in np.flatnonzero(self.entries)}


def _point_site(mass: np.ndarray) -> Optional[int]:
    sites = np.flatnonzero(mass > 0)
    if sites.size == 1 and abs(mass[sites[0]] - 1.0) <= MASS_TOL:
        return int(sites[0])
    return None


def _densify(N: int, masses: Union[Dict[int, float], Sequence], name: str) -> np.ndarray:
    dense = np.zeros(N + 1)
    items = masses.items() if isinstance(masses, dict) else masses
    for site, mass in items:
        site = int(site)
        if site < 0 or site > N:
            raise SiteError(f"{name} 的格点越界: {site} 不在 {{0,…,{N}}} 中")
        dense[site] += float(mass)
    return dense


def validate(spec: ChainSpec) -> None:
    """
    校验链参数，失败时抛出对应的 SpecError 子类

    校验顺序：N → 向量长度 → 负质量 → 奇偶性支撑 → 总质量
    """
    _check_N(spec.N)
    N = spec.N
    allowed = np.zeros(N + 1, dtype=bool)
    allowed[3:N - 2:2] = True  # {3,5,…,N−3}
    for name, mass in (("nu0", spec.nu0), ("nuN", spec.nuN)):
        if mass.shape != (N + 1,):
            raise SpecError(f"{name} 长度必须为 N+1={N + 1}: 实际 {mass.shape}")
        if not np.all(np.isfinite(mass)):
            raise SpecError(f"{name} 含非有限值")
        if np.any(mass < 0):
            raise NegativeMassError(f"{name} 含负质量: 格点 {np.flatnonzero(mass < 0).tolist()}")
        bad = np.flatnonzero((mass > 0) & ~allowed)
        if bad.size:
            raise ParityError(
                f"违反奇偶性(parity)假设: {name} 的支撑 {bad.tolist()} 不在奇数格点 {{3,5,…,{N - 3}}} 中"
            )
        total = float(mass.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise MassSumError(f"{name} 总质量必须为 1: 实际 {total:.17g}")


def _row(spec: ChainSpec, x: int) -> np.ndarray:
    row = np.zeros(spec.N + 1)
    row[x] += 0.5
    if x > 0:
        row[x - 1] += 0.25
    else:
        row += 0.25 * spec.nu0
    if x < spec.N:
        row[x + 1] += 0.25
    else:
        row += 0.25 * spec.nuN
    return row


def transition_row(spec: ChainSpec, x: int) -> ProbVector:
    """转移概率 p(x,·)"""
    x = check_site(spec.N, x)
    return ProbVector(_row(spec, x))


def exact_mass(value: float) -> Fraction:
    """把浮点质量还原成有理数（重分布质量通常是简单分数）"""
    return Fraction(float(value)).limit_denominator(FRACTION_DENOMINATOR)


def transition_row_exact(spec: ChainSpec, x: int) -> Dict[int, Fraction]:
    """有理数形式的 p(x,·)，只列出正概率格点"""
    x = check_site(spec.N, x)
    row: Dict[int, Fraction] = {}

    def add(site: int, mass: Fraction) -> None:
        row[site] = row.get(site, Fraction(0)) + mass

    quarter = Fraction(1, 4)
    add(x, Fraction(1, 2))
    if x > 0:
        add(x - 1, quarter)
    else:
        for site in spec.support("nu0"):
            add(int(site), quarter * exact_mass(spec.nu0[site]))
    if x < spec.N:
        add(x + 1, quarter)
    else:
        for site in spec.support("nuN"):
            add(int(site), quarter * exact_mass(spec.nuN[site]))
    return row


def transition_matrix(spec: ChainSpec) -> np.ndarray:
    return spec.matrix


def rho(spec: ChainSpec) -> int:
    """不超过重分布支撑到 {0,N} 最小距离的最大偶数"""
    support = spec.support("both")
    distance = int(np.minimum(support, spec.N - support).min())
    return 2 * (distance // 2)


def evolve(spec: ChainSpec, dist: ProbVector, steps: int) -> ProbVector:
    """返回 dist·P^steps"""
    if steps < 0:
        raise ChainError(f"步数必须非负: {steps}")
    if dist.N != spec.N:
        raise ChainError(f"分布长度与链不匹配: {len(dist)} != {spec.N + 1}")
    if steps == 0:
        return dist
    out = dist.entries @ np.linalg.matrix_power(spec.matrix, steps)
    return ProbVector(np.clip(out, 0.0, None))


def stationary(spec: ChainSpec) -> ProbVector:
    """
    平稳分布 π：解 π(P − I) = 0, Σπ = 1

    Returns:
        满足 ‖πP − π‖₁ ≤ 1e−10 的概率向量
    """
    P = spec.matrix
    n = spec.N + 1
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.abs(pi @ P - pi).sum())
    if residual > STATIONARY_TOL:
        raise StationaryError(f"平稳分布残差过大: ‖πP−π‖₁={residual:.3e}")
    return ProbVector(pi)


def mirror(spec: ChainSpec) -> ChainSpec:
    return spec.mirrored()


# ---------------------------------------------------------------------------
# 参数文件读写
# ---------------------------------------------------------------------------

class SpecDocument(BaseModel):
    """
    参数文件格式：

        {"N": 16, "nu0": [[5, 1.0]], "nuN": [[11, 0.5], [13, 0.5]]}

    ν 也可以写成长度 N+1 的稠密列表；点质量可以简写为 {"N": 16, "J0": 5, "JN": 11}。
    """

    N: int
    nu0: Optional[List] = None
    nuN: Optional[List] = None
    J0: Optional[int] = None
    JN: Optional[int] = None

    @model_validator(mode="after")
    def _one_form(self) -> "SpecDocument":
        dense_form = self.nu0 is not None and self.nuN is not None
        short_form = self.J0 is not None and self.JN is not None
        if dense_form == short_form:
            raise ValueError("参数文件必须二选一：给出 nu0/nuN，或者给出 J0/JN")
        return self

    def to_chain_spec(self) -> ChainSpec:
        _check_N(self.N)
        if self.J0 is not None:
            return PointMassSpec(self.N, self.J0, self.JN).to_chain_spec()
        return ChainSpec(self.N, _parse_law(self.N, self.nu0, "nu0"), _parse_law(self.N, self.nuN, "nuN"))


def _parse_law(N: int, raw: List, name: str) -> np.ndarray:
    if raw and all(isinstance(item, (list, tuple)) for item in raw):
        pairs = []
        for item in raw:
            if len(item) != 2:
                raise SpecError(f"{name} 的稀疏项必须是 [格点, 质量]: {item!r}")
            pairs.append((item[0], item[1]))
        return _densify(N, pairs, name)
    if len(raw) != N + 1:
        raise SpecError(f"{name} 的稠密形式长度必须为 N+1={N + 1}: 实际 {len(raw)}")
    return np.array(raw, dtype=float)


def load_spec(path: Union[str, Path]) -> ChainSpec:
    """读取 JSON 参数文件并校验"""
    spec_path = Path(path)
    if not spec_path.exists():
        raise FileNotFoundError(f"参数文件不存在: {spec_path}")
    with open(spec_path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return SpecDocument.model_validate(raw).to_chain_spec()


def dump_spec(spec: ChainSpec, path: Union[str, Path]) -> str:
    """以稀疏形式写出参数文件"""
    doc = {
        "N": spec.N,
        "nu0": [[int(s), float(spec.nu0[s])] for s in spec.support("nu0")],
        "nuN": [[int(s), float(spec.nuN[s])] for s in spec.support("nuN")],
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(doc, f, ensure_ascii=False, indent=2)
    return str(out)
