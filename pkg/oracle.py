"""
精确计算（暴力真值）：全变差曲线、被杀死游走的谱与退出时间尾概率、P 的完整谱

所有结果都由稠密矩阵幂或稠密特征分解得到，只适用于桌面规模的 N。
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.linalg import eigh_tridiagonal, eigvals

from chain_core import ChainError, ChainSpec, ProbVector, check_site, rho

ArrayLike = Union[ProbVector, np.ndarray]


@dataclass
class TVCurve:
    """t = 0…T_max 上的全变差曲线；kind ∈ {"pair", "sup", "tilde"}"""

    values: np.ndarray
    kind: str
    pair: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.kind not in ("pair", "sup", "tilde"):
            raise ValueError(f"未知的曲线类型: {self.kind}")
        if self.kind == "pair" and self.pair is None:
            raise ValueError("pair 曲线需要给出起点对 (x, y)")

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.values.size)

    @property
    def horizon(self) -> int:
        return self.values.size - 1

    @property
    def label(self) -> str:
        if self.kind == "pair":
            return f"pair({self.pair[0]},{self.pair[1]})"
        return self.kind


@dataclass
class KilledWalkSpectrum:
    """{1,…,L} 外被杀死的惰性游走：特征值降序排列，首特征向量取正"""

    L: int
    eigenvalues: np.ndarray
    top_vector: np.ndarray
    eigenvectors: np.ndarray = field(repr=False)

    @property
    def top(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda2(self) -> float:
        """除首特征值外模最大者；L=1 时为 0"""
        if self.L == 1:
            return 0.0
        return float(np.abs(self.eigenvalues[1:]).max())


def _entries(d: ArrayLike) -> np.ndarray:
    return d.entries if isinstance(d, ProbVector) else np.asarray(d, dtype=float)


def tv(d1: ArrayLike, d2: ArrayLike) -> float:
    """全变差距离 ½Σ|d1(i)−d2(i)|"""
    a, b = _entries(d1), _entries(d2)
    if a.shape != b.shape:
        raise ChainError(f"分布长度不一致: {a.shape} vs {b.shape}")
    return 0.5 * float(np.abs(a - b).sum())


def _pairwise_tv(Pt: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(Pt[:, None, :] - Pt[None, :, :]).sum(axis=-1)


def _tilde_mask(spec: ChainSpec) -> np.ndarray:
    gap = spec.sites[None, :] - spec.sites[:, None]
    return (gap >= 2) & (gap <= rho(spec)) & (gap % 2 == 0)


def d_t_pair(spec: ChainSpec, x: int, y: int, t: int) -> float:
    """d_t(x,y) = ‖δ_x P^t − δ_y P^t‖_TV"""
    x, y = check_site(spec.N, x), check_site(spec.N, y)
    Pt = np.linalg.matrix_power(spec.matrix, t)
    return tv(Pt[x], Pt[y])


def d_t_sup(spec: ChainSpec, t: int) -> float:
    """d_t = sup_{x,y} d_t(x,y)"""
    Pt = np.linalg.matrix_power(spec.matrix, t)
    return float(_pairwise_tv(Pt).max())


def tilde_d_t(spec: ChainSpec, t: int) -> float:
    """d̃_t：只对偶数间距 y−x ≤ ρ 取上确界"""
    Pt = np.linalg.matrix_power(spec.matrix, t)
    return float(_pairwise_tv(Pt)[_tilde_mask(spec)].max())


def tv_curves(spec: ChainSpec, horizon: int,
              pair: Optional[Tuple[int, int]] = None) -> Dict[str, TVCurve]:
    """
    一次迭代 P^t 同时算出 sup、tilde（以及可选的 pair）曲线

    Args:
        spec: 链参数
        horizon: 最大时间 T_max
        pair: 可选的起点对 (x, y)

    Returns:
        {"sup": TVCurve, "tilde": TVCurve, ["pair": TVCurve]}
    """
    if horizon < 0:
        raise ChainError(f"时间范围必须非负: {horizon}")
    if pair is not None:
        pair = (check_site(spec.N, pair[0]), check_site(spec.N, pair[1]))
    mask = _tilde_mask(spec)
    P = spec.matrix
    Pt = np.eye(spec.N + 1)
    sup = np.empty(horizon + 1)
    tilde = np.empty(horizon + 1)
    pair_values = np.empty(horizon + 1) if pair is not None else None
    for t in range(horizon + 1):
        D = _pairwise_tv(Pt)
        sup[t] = D.max()
        tilde[t] = D[mask].max()
        if pair_values is not None:
            pair_values[t] = D[pair[0], pair[1]]
        Pt = Pt @ P
    curves = {"sup": TVCurve(sup, "sup"), "tilde": TVCurve(tilde, "tilde")}
    if pair_values is not None:
        curves["pair"] = TVCurve(pair_values, "pair", pair=(int(pair[0]), int(pair[1])))
    return curves


def pair_curve(spec: ChainSpec, x: int, y: int, horizon: int) -> TVCurve:
    x, y = check_site(spec.N, x), check_site(spec.N, y)
    P = spec.matrix
    rows = np.zeros((2, spec.N + 1))
    rows[0, x] = 1.0
    rows[1, y] = 1.0
    values = np.empty(horizon + 1)
    for t in range(horizon + 1):
        values[t] = tv(rows[0], rows[1])
        rows = rows @ P
    return TVCurve(values, "pair", pair=(x, y))


def half_indicator_gap(spec: ChainSpec, horizon: int) -> np.ndarray:
    """
    E_{N/4} f(X_t) − E_{3N/4} f(X_t)，f = 1{x ≤ N/2}，t = 0…horizon

    对任意 ν 都是 d_t(N/4, 3N/4) 的下界；ν₀ = ν_N 时恰等于 Q_center(T(N/2) > t)。
    """
    if horizon < 0:
        raise ChainError(f"时间范围必须非负: {horizon}")
    N = spec.N
    P = spec.matrix
    g = (spec.sites <= N // 2).astype(float)
    out = np.empty(horizon + 1)
    for t in range(horizon + 1):
        out[t] = g[N // 4] - g[3 * N // 4]
        g = P @ g
    return out


def pair_reduction_factor(spec: ChainSpec) -> int:
    """⌊1 + N/ρ⌋"""
    return (spec.N + rho(spec)) // rho(spec)


def pair_reduction_audit(spec: ChainSpec, sup: TVCurve, tilde: TVCurve, tol: float = 1e-12) -> Dict:
    """
    逐点检查 d_t ≤ ⌊1+N/ρ⌋(d̃_t + d̃_{t−1})，t ≥ 1

    Returns:
        {"check", "pass", "margin", "worst_t", "factor"}；T_max=0 时空检查直接通过
    """
    factor = pair_reduction_factor(spec)
    if sup.values.size < 2:
        return {"check": "pair_reduction", "pass": True, "margin": None, "worst_t": None, "factor": factor}
    bound = factor * (tilde.values[1:] + tilde.values[:-1])
    slack = bound - sup.values[1:]
    worst = int(np.argmin(slack))
    return {
        "check": "pair_reduction",
        "pass": bool(slack.min() >= -tol),
        "margin": float(slack.min()),
        "worst_t": worst + 1,
        "factor": factor,
    }


# ---------------------------------------------------------------------------
# 被杀死的惰性游走与退出时间 T(L)
# ---------------------------------------------------------------------------

def killed_matrix(L: int) -> np.ndarray:
    """{1,…,L} 上的次马尔可夫矩阵 K：对角 ½，相邻 ¼"""
    if L < 1:
        raise ChainError(f"区间长度必须为正: L={L}")
    K = 0.5 * np.eye(L)
    idx = np.arange(L - 1)
    K[idx, idx + 1] = 0.25
    K[idx + 1, idx] = 0.25
    return K


def center(L: int) -> int:
    """⌊(L+1)/2⌋"""
    return (L + 1) // 2


def exit_tail_curves(L: int, horizon: int) -> np.ndarray:
    """
    所有起点的尾概率表：out[t, z−1] = Q_z(T(L) > t)

    K 对称，e_z K^t 1 = (K^t 1)_z，迭代一个向量即可得到所有起点。
    """
    K = killed_matrix(L)
    out = np.empty((horizon + 1, L))
    v = np.ones(L)
    for t in range(horizon + 1):
        out[t] = v
        v = K @ v
    return out


def exit_tail_curve(L: int, z: int, horizon: int) -> np.ndarray:
    """Q_z(T(L) > t)，t = 0…horizon"""
    if z < 1 or z > L:
        raise ChainError(f"起点必须在 {{1,…,{L}}} 中: z={z}")
    return exit_tail_curves(L, horizon)[:, z - 1]


def exit_tail_exact(L: int, z: int, t: int) -> float:
    """Q_z(T(L) > t) = e_z·K^t·1"""
    if z < 1 or z > L:
        raise ChainError(f"起点必须在 {{1,…,{L}}} 中: z={z}")
    if t < 0:
        raise ChainError(f"时间必须非负: t={t}")
    return float(np.linalg.matrix_power(killed_matrix(L), t).sum(axis=1)[z - 1])


def center_exit_tail(L: int, horizon: int) -> np.ndarray:
    """T(L) 从中心出发的尾概率；L=0 视为恒为 0 的退出时间"""
    if L == 0:
        return np.zeros(horizon + 1)
    return exit_tail_curve(L, center(L), horizon)


def killed_spectrum(L: int) -> KilledWalkSpectrum:
    """K 的完整特征分解（对称三对角）"""
    if L < 1:
        raise ChainError(f"区间长度必须为正: L={L}")
    if L == 1:
        one = np.ones((1, 1))
        return KilledWalkSpectrum(L=1, eigenvalues=np.array([0.5]), top_vector=one[:, 0], eigenvectors=one)
    w, v = eigh_tridiagonal(np.full(L, 0.5), np.full(L - 1, 0.25))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    top = v[:, 0]
    if top.sum() < 0:
        top = -top
    top = top / np.linalg.norm(top)
    return KilledWalkSpectrum(L=L, eigenvalues=w, top_vector=top, eigenvectors=v)


def center_dominance(L: int, horizon: int) -> float:
    """
    精确检查 Q_z(T>t) ≤ Q_center(T>t) 对所有 z、t 成立

    Returns:
        最大违反量 max(Q_z − Q_center)，不为正即通过
    """
    table = exit_tail_curves(L, horizon)
    c = table[:, center(L) - 1]
    return float((table - c[:, None]).max())


# ---------------------------------------------------------------------------
# P 的完整谱
# ---------------------------------------------------------------------------

def full_spectrum(spec: ChainSpec) -> np.ndarray:
    """P 的 N+1 个（复）特征值，按模降序"""
    w = eigvals(spec.matrix)
    return w[np.argsort(-np.abs(w), kind="stable")]


def second_modulus(spec: ChainSpec) -> float:
    """去掉特征值 1 之后的最大模"""
    w = full_spectrum(spec)
    unit = int(np.argmin(np.abs(w - 1.0)))
    return float(np.abs(np.delete(w, unit)).max())


def in_spectrum(value: complex, spectrum: np.ndarray, tol: float = 1e-8) -> bool:
    return bool(np.min(np.abs(spectrum - value)) <= tol)


# ---------------------------------------------------------------------------
# CSV 输出
# ---------------------------------------------------------------------------

def _fmt(value: float, digits: int) -> str:
    return f"{value:.{digits}g}"


def write_curve_csv(curve: Union[TVCurve, np.ndarray], path: Union[str, Path], digits: int = 17) -> str:
    """写出 `t,value`"""
    values = curve.values if isinstance(curve, TVCurve) else np.asarray(curve, dtype=float)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "value"])
        for t, value in enumerate(values):
            writer.writerow([t, _fmt(float(value), digits)])
    return str(out)


def write_spectrum_csv(eigenvalues: np.ndarray, path: Union[str, Path], digits: int = 17) -> str:
    """写出 `index,real,imag`"""
    values = np.asarray(eigenvalues, dtype=complex)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "real", "imag"])
        for i, value in enumerate(values):
            writer.writerow([i, _fmt(value.real, digits), _fmt(value.imag, digits)])
    return str(out)
