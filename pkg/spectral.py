"""
闭式谱量：λ(L)、L₀、退出时间尾概率主项、P 的正弦特征函数构造与下界曲线
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from chain_core import ChainSpec, PointMassSpec, rho

RESIDUAL_TOL = 1e-10


def lambda_of(L: int) -> float:
    """λ(L) = ½(cos(π/(L+1)) + 1)"""
    if L < 1:
        raise ValueError(f"区间长度必须为正: L={L}")
    return 0.5 * (math.cos(math.pi / (L + 1)) + 1.0)


def lambda2_of(L: int) -> float:
    """被杀死游走的第二特征值 ½(cos(2π/(L+1)) + 1)；L=1 时没有第二特征值，取 0"""
    if L < 1:
        raise ValueError(f"区间长度必须为正: L={L}")
    if L == 1:
        return 0.0
    return 0.5 * (math.cos(2.0 * math.pi / (L + 1)) + 1.0)


def L0_of(spec: PointMassSpec) -> int:
    """L₀ = ½·max{J₀−1, N−1−J_N, N+J_N−J₀}"""
    N, J0, JN = spec.N, spec.J0, spec.JN
    return max(J0 - 1, N - 1 - JN, N + JN - J0) // 2


def L0_terms(spec: PointMassSpec) -> Dict[str, int]:
    """L₀ 的三个候选长度：左环、右环、两环中心距离"""
    N, J0, JN = spec.N, spec.J0, spec.JN
    return {
        "left-loop": (J0 - 1) // 2,
        "right-loop": (N - 1 - JN) // 2,
        "cross": (N + JN - J0) // 2,
    }


def sym_rate_length(spec: ChainSpec) -> int:
    """ν₀ = ν_N 时收敛速率对应的长度 N/2"""
    return spec.N // 2


@dataclass(frozen=True)
class ExitTailModel:
    """T(L) 尾概率的主项模型"""

    L: int
    lam: float
    lambda2_bound: float

    def coefficient(self, z: int) -> float:
        """(2/(L+1))·cot(π/(2(L+1)))·sin(πz/(L+1))"""
        if z < 1 or z > self.L:
            raise ValueError(f"起点必须在 {{1,…,{self.L}}} 中: z={z}")
        L = self.L
        return (2.0 / (L + 1)) / math.tan(math.pi / (2 * (L + 1))) * math.sin(math.pi * z / (L + 1))

    def leading(self, z: int, t: Union[int, np.ndarray]):
        return self.coefficient(z) * np.power(self.lam, t)


def exit_tail_model(L: int) -> ExitTailModel:
    return ExitTailModel(L=L, lam=lambda_of(L), lambda2_bound=lambda2_of(L))


def exit_tail_formula(L: int, z: int, t: Union[int, np.ndarray]):
    """Q_z(T(L) > t) 的主项（不含 O(λ₂^t) 余项）"""
    if np.any(np.asarray(t) < 0):
        raise ValueError(f"时间必须非负: t={t}")
    return exit_tail_model(L).leading(z, t)


# ---------------------------------------------------------------------------
# 正弦特征函数 f(x) = sin(ρx + ω)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenCandidate:
    """
    P 的特征函数候选：f(x) = sin(rho_wave·x + omega)，定义在 {−1,…,N+1} 上

    这里的 rho_wave 是波数，与间距参数 ρ 无关。
    """

    family: str
    rho_wave: float
    omega: float

    @property
    def eigenvalue(self) -> float:
        return 0.5 * (math.cos(self.rho_wave) + 1.0)

    @property
    def length(self) -> float:
        """与之对应的区间长度 L：rho_wave = π/(L+1)"""
        return math.pi / self.rho_wave - 1.0

    def f(self, N: int) -> np.ndarray:
        """f 在 {−1,…,N+1} 上的取值（下标 0 对应 x=−1）"""
        x = np.arange(-1, N + 2)
        return np.sin(self.rho_wave * x + self.omega)

    def constraint_gaps(self, spec: PointMassSpec) -> tuple:
        """两个边界约束 f(−1)=f(J₀)、f(N+1)=f(J_N) 的两侧之差"""
        values = self.f(spec.N)
        return (
            float(values[0] - values[spec.J0 + 1]),
            float(values[spec.N + 2] - values[spec.JN + 1]),
        )

    def residual(self, spec: PointMassSpec) -> float:
        """max_x |(Pf)(x) − λf(x)|，f 限制在 {0,…,N}"""
        chain = spec.to_chain_spec()
        f = self.f(spec.N)[1:-1]
        return float(np.abs(chain.matrix @ f - self.eigenvalue * f).max())


def eigen_candidates(spec: PointMassSpec) -> List[EigenCandidate]:
    """三族构造：左环、右环、交叉"""
    N, J0, JN = spec.N, spec.J0, spec.JN
    pi = math.pi

    left = 2 * pi / (J0 + 1)
    right = 2 * pi / (N + 1 - JN)
    cross = 2 * pi / (N + 2 + JN - J0)
    return [
        # 第一个约束对任意 ω 成立，ω 由第二个约束的对称解给出
        EigenCandidate("left-loop", left, (pi - left * (N + 1 + JN)) / 2),
        EigenCandidate("right-loop", right, (pi - right * (J0 - 1)) / 2),
        EigenCandidate("cross", cross, pi / 2 - cross * (J0 - 1) / 2),
    ]


def min_candidate(spec: PointMassSpec) -> EigenCandidate:
    return min(eigen_candidates(spec), key=lambda c: c.rho_wave)


def write_candidates_csv(spec: PointMassSpec, path: Union[str, Path], digits: int = 17) -> str:
    """写出 `family,rho,omega,eigenvalue,residual`"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["family", "rho", "omega", "eigenvalue", "residual"])
        for c in eigen_candidates(spec):
            writer.writerow([
                c.family,
                f"{c.rho_wave:.{digits}g}",
                f"{c.omega:.{digits}g}",
                f"{c.eigenvalue:.{digits}g}",
                f"{c.residual(spec):.{digits}g}",
            ])
    return str(out)


# ---------------------------------------------------------------------------
# 下界与上界长度
# ---------------------------------------------------------------------------

def lower_bound_curve(spec: PointMassSpec, t: Union[int, np.ndarray]):
    """½(1 − 2π/N)·λ(L₀)^t"""
    return 0.5 * (1.0 - 2.0 * math.pi / spec.N) * np.power(lambda_of(L0_of(spec)), t)


def lower_bound_values(spec: PointMassSpec, horizon: int) -> np.ndarray:
    return lower_bound_curve(spec, np.arange(horizon + 1))


def det_copies(spec: Union[ChainSpec, PointMassSpec]) -> int:
    """⌊6 + N/(ρ+1)⌋"""
    chain = spec.to_chain_spec() if isinstance(spec, PointMassSpec) else spec
    return (6 * (rho(chain) + 1) + chain.N) // (rho(chain) + 1)


SYM_COPIES = 5


def refined_bound_lengths(spec: PointMassSpec) -> List[int]:
    """
    不从 2c 阶段起步时耦合时间的更细上界：三个独立退出时间之和的区间长度

    在 J₀ ≤ N−J_N 的规范坐标中计算；长度为 0 的项表示恒为 0 的退出时间。
    """
    s = spec.mirrored() if spec.needs_mirror else spec
    N, J0, JN = s.N, s.J0, s.JN
    return [
        max((J0 - 1) // 2, (N + 1 - JN) // 2),
        (N + JN - J0) // 2,
        (J0 - 3) // 2,
    ]


def l0_extremes(N: int) -> Dict:
    """
    遍历所有合法 (J₀, J_N)，给出 L₀ 的最小值/最大值以及 N−3、2(N−1)/3 两个参考界

    Returns:
        {"N", "min", "argmin", "max", "argmax", "quoted_upper", "quoted_lower", "equalized_lower"}
    """
    sites = range(3, N - 2, 2)
    table = {(J0, JN): L0_of(PointMassSpec(N, J0, JN)) for J0 in sites for JN in sites}
    argmin = min(table, key=table.get)
    argmax = max(table, key=table.get)
    return {
        "N": N,
        "min": table[argmin],
        "argmin": list(argmin),
        "max": table[argmax],
        "argmax": list(argmax),
        "quoted_upper": N - 3,
        "quoted_lower": 2 * (N - 1) / 3,
        "equalized_lower": (N - 1) / 3,
    }
