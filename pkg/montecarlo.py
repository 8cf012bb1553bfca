"""
蒙特卡洛试验：批量运行耦合、估计存活曲线与 DKW 置信带、拟合指数速率，
以及占优审计、阶段时长审计和边际分布审计

第 i 次试验的随机数流只由 (主种子, i) 决定，因此结果与并行方式无关。
"""

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import p_tqdm
from scipy.optimize import curve_fit
from scipy.signal import fftconvolve

from chain_core import ChainSpec, PointMassSpec, ProbVector, evolve
from coupling_engine import (
    CouplingEngine,
    StageInvariantError,
    StageLabel,
    TrialRecord,
    default_horizon,
    witness_pair,
)
from oracle import TVCurve, center_exit_tail
from spectral import refined_bound_lengths

DKW_LEVEL = 0.99
SURVIVOR_FLOOR = 50
AUDIT_TOL = 1e-12
MARGINAL_TIMES = (1, 2, 3, 5, 8, 13, 21, 34, 55, 89)


class GridMismatchError(ValueError):
    """经验曲线与界不在同一时间网格上"""


class FitError(ValueError):
    """拟合窗口内出现零或负值"""


def dkw_radius(n_trials: int, level: float = DKW_LEVEL) -> float:
    """sqrt(ln(2/α)/(2n))，α = 1 − level"""
    if n_trials < 1:
        raise ValueError(f"试验次数必须为正: {n_trials}")
    return math.sqrt(math.log(2.0 / (1.0 - level)) / (2.0 * n_trials))


def trial_seed(master_seed: int, index: int) -> int:
    """第 index 次试验的种子：SeedSequence(主种子, spawn_key=(index,)) 的首个 u64"""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass
class SurvivalCurve:
    """t = 0…T 上的经验 P(τ > t) 与一致置信带"""

    t: np.ndarray
    survival: np.ndarray
    radius: float
    n_trials: int

    @property
    def ci_lo(self) -> np.ndarray:
        return np.clip(self.survival - self.radius, 0.0, 1.0)

    @property
    def ci_hi(self) -> np.ndarray:
        return np.clip(self.survival + self.radius, 0.0, 1.0)

    @property
    def horizon(self) -> int:
        return int(self.t[-1])

    @property
    def values(self) -> np.ndarray:
        return self.survival

    @classmethod
    def from_taus(cls, taus: Sequence[int], horizon: int,
                  timed_out: Optional[Sequence[bool]] = None,
                  level: float = DKW_LEVEL) -> "SurvivalCurve":
        """超时的试验在整个时间范围内都算作存活"""
        taus = np.asarray(taus, dtype=np.int64)
        n = taus.size
        if timed_out is not None:
            taus = np.where(np.asarray(timed_out, dtype=bool), horizon + 1, taus)
        counts = np.bincount(np.minimum(taus, horizon + 1), minlength=horizon + 2)
        # P(τ > t) = 1 − P(τ ≤ t)
        survival = 1.0 - np.cumsum(counts[: horizon + 1]) / n
        return cls(np.arange(horizon + 1), survival, dkw_radius(n, level), n)

    def usable_horizon(self, floor: int = SURVIVOR_FLOOR) -> int:
        """最后一个存活试验数不少于 floor 的时刻"""
        alive = np.flatnonzero(self.survival * self.n_trials >= floor)
        return int(alive[-1]) if alive.size else 0


@dataclass
class RateFit:
    """对数斜率拟合：degree=1 时带 (1+βt) 多项式前因子"""

    window: Tuple[int, int]
    slope: float
    degree: int
    residual: float
    beta: float = 0.0

    @property
    def rate(self) -> float:
        return math.exp(self.slope)

    def relative_error(self, target: float) -> float:
        return abs(self.slope - target) / abs(target)


# ---------------------------------------------------------------------------
# 批量运行
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CouplingJob:
    """一批试验的参数：kind ∈ {"det", "sym", "witness"}；witness 总是从 (N/4, 3N/4) 出发"""

    kind: str
    spec: ChainSpec
    x: int
    y: int
    horizon: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("det", "sym", "witness"):
            raise ValueError(f"未知的耦合类型: {self.kind}")
        if self.kind == "witness" and (self.x, self.y) != witness_pair(self.spec):
            raise ValueError(f"见证耦合的起点必须是 {witness_pair(self.spec)}")

    @classmethod
    def witness(cls, spec: ChainSpec, horizon: Optional[int] = None) -> "CouplingJob":
        return cls("witness", spec, *witness_pair(spec), horizon)

    @property
    def effective_horizon(self) -> int:
        return self.horizon if self.horizon is not None else default_horizon(self.spec, self.kind)

    def run_one(self, seed: int) -> TrialRecord:
        return self.run_on(CouplingEngine(self.spec, np.random.default_rng(seed), self.effective_horizon, seed))

    def run_on(self, engine: CouplingEngine) -> TrialRecord:
        if self.kind == "det":
            return engine.run_det(self.x, self.y)
        if self.kind == "witness":
            return engine.run_witness()
        return engine.run_sym(self.x, self.y)


@dataclass
class BatchResult:
    """按试验序号排列的结果；merge 满足结合律"""

    indices: np.ndarray
    records: List[TrialRecord]
    horizon: int
    master_seed: int

    @property
    def n_trials(self) -> int:
        return len(self.records)

    @property
    def taus(self) -> np.ndarray:
        return np.array([r.tau for r in self.records], dtype=np.int64)

    @property
    def seeds(self) -> List[int]:
        return [r.seed for r in self.records]

    @property
    def timed_out(self) -> np.ndarray:
        return np.array([r.timed_out for r in self.records], dtype=bool)

    @property
    def timeouts(self) -> int:
        return int(self.timed_out.sum())

    @property
    def mean_tau(self) -> float:
        return float(self.taus.mean()) if self.records else 0.0

    @property
    def entry_counts(self) -> Counter:
        return Counter(r.entry_stage or StageLabel.Done.value for r in self.records)

    @property
    def stage_visits(self) -> Counter:
        return Counter(label for r in self.records for label, _ in r.stage_path)

    @property
    def s3_entries(self) -> Counter:
        return Counter(site for r in self.records for site in r.s3_entries)

    @property
    def max_stage_count(self) -> int:
        return max((r.stage_count for r in self.records), default=0)

    def survival(self, level: float = DKW_LEVEL, horizon: Optional[int] = None) -> SurvivalCurve:
        """horizon 可以比批次上限短，截断处之后的试验都算存活"""
        return SurvivalCurve.from_taus(self.taus, horizon or self.horizon, self.timed_out, level)

    def merge(self, other: "BatchResult") -> "BatchResult":
        if self.horizon != other.horizon or self.master_seed != other.master_seed:
            raise GridMismatchError("只能合并同一主种子、同一时间范围的批次")
        if np.intersect1d(self.indices, other.indices).size:
            raise ValueError("合并的批次包含重复的试验序号")
        indices = np.concatenate([self.indices, other.indices])
        records = self.records + other.records
        order = np.argsort(indices, kind="stable")
        return BatchResult(indices[order], [records[i] for i in order], self.horizon, self.master_seed)


def _run_chunk(job: CouplingJob, master_seed: int, indices: Sequence[int]) -> List[TrialRecord]:
    """进程池的工作函数（必须是模块级函数）"""
    return [job.run_one(trial_seed(master_seed, int(i))) for i in indices]


class MonteCarloRunner:
    """
    批量运行耦合试验

    workers > 1 时按序号分块交给进程池；块内外都按序号排列，输出与 workers 无关。
    """

    def __init__(self, workers: int = 1, chunk_size: int = 1000, verbose: bool = True):
        if workers < 1:
            raise ValueError(f"进程数必须为正: {workers}")
        self.workers = workers
        self.chunk_size = chunk_size
        self.verbose = verbose

    def run(self, job: CouplingJob, n_trials: int, master_seed: int, start_index: int = 0) -> BatchResult:
        if n_trials < 1:
            raise ValueError(f"试验次数必须为正: {n_trials}")
        if self.verbose:
            print(f"🎲 开始运行 {n_trials} 次 {job.kind} 耦合试验...")
            print(f"   起点: ({job.x}, {job.y})")
            print(f"   主种子: {master_seed}，进程数: {self.workers}")

        indices = np.arange(start_index, start_index + n_trials)
        if self.workers == 1:
            records = _run_chunk(job, master_seed, indices)
        else:
            chunks = [indices[i:i + self.chunk_size] for i in range(0, n_trials, self.chunk_size)]
            parts = p_tqdm.p_map(
                _run_chunk,
                [job] * len(chunks),
                [master_seed] * len(chunks),
                chunks,
                num_cpus=self.workers,
                disable=not self.verbose,
            )
            records = [r for part in parts for r in part]

        result = BatchResult(indices, records, job.effective_horizon, master_seed)
        if self.verbose:
            print(f"✅ 试验完成: 平均 τ = {result.mean_tau:.2f}，超时 {result.timeouts} 次")
        return result


def run_batch(job: CouplingJob, n_trials: int, master_seed: int, workers: int = 1,
              start_index: int = 0, verbose: bool = False) -> BatchResult:
    """运行一批耦合试验"""
    return MonteCarloRunner(workers=workers, verbose=verbose).run(job, n_trials, master_seed, start_index)


# ---------------------------------------------------------------------------
# 速率拟合
# ---------------------------------------------------------------------------

def _as_values(curve) -> np.ndarray:
    if isinstance(curve, (SurvivalCurve, TVCurve)):
        return np.asarray(curve.values, dtype=float)
    return np.asarray(curve, dtype=float)


def default_window(curve, floor: int = SURVIVOR_FLOOR) -> Tuple[int, int]:
    """可用时间范围的最后四分之一"""
    if isinstance(curve, SurvivalCurve):
        end = curve.usable_horizon(floor)
    else:
        end = _as_values(curve).size - 1
    start = end - end // 4
    if start >= end:
        raise FitError(f"可用时间范围太短，无法拟合: [0, {end}]")
    return start, end


def tail_window(curve: SurvivalCurve, threshold: float = 0.1,
                floor: int = SURVIVOR_FLOOR) -> Tuple[int, int]:
    """从存活概率首次降到 threshold 起，到可用时间范围结束"""
    end = curve.usable_horizon(floor)
    below = np.flatnonzero(curve.survival <= threshold)
    start = int(below[0]) if below.size else end - end // 4
    if start >= end:
        raise FitError(f"存活曲线的尾部太短: [{start}, {end}]")
    return start, end


def _log_prefactor_model(t, c, beta, slope):
    return c + np.log1p(beta * t) + slope * t


def _fit_degree1(t: np.ndarray, logv: np.ndarray) -> Tuple[float, float, float]:
    """ln v = c + ln(1+βt) + s·t：先在 β 网格上做线性最小二乘，再用 curve_fit 细化"""
    best = None
    for beta in np.concatenate([[0.0], np.logspace(-4, 2, 61)]):
        y = logv - np.log1p(beta * t)
        slope, c = np.polyfit(t, y, 1)
        rss = float(np.sum((y - (c + slope * t)) ** 2))
        if best is None or rss < best[0]:
            best = (rss, c, beta, slope)
    _, c0, beta0, s0 = best
    try:
        (c, beta, slope), _ = curve_fit(
            _log_prefactor_model, t, logv, p0=[c0, beta0, s0],
            bounds=([-np.inf, 0.0, -np.inf], [np.inf, np.inf, np.inf]),
        )
    except RuntimeError:
        c, beta, slope = c0, beta0, s0
    return float(c), float(beta), float(slope)


def fit_rate(curve, window: Optional[Tuple[int, int]] = None,
             degree: Union[int, str] = 0) -> RateFit:
    """
    在 [t₁, t₂] 上对 ln(values) 做最小二乘

    Args:
        curve: SurvivalCurve、TVCurve 或数组
        window: (t₁, t₂)，默认取可用时间范围的最后四分之一
        degree: 0 为纯指数；1 为带 (1+βt) 前因子；"auto" 在两者中选残差显著更小者

    Returns:
        RateFit
    """
    values = _as_values(curve)
    t1, t2 = window if window is not None else default_window(curve)
    if not 0 <= t1 < t2 < values.size:
        raise FitError(f"拟合窗口不合法: [{t1}, {t2}]，曲线长度 {values.size}")
    t = np.arange(t1, t2 + 1, dtype=float)
    v = values[t1:t2 + 1]
    if np.any(v <= 0):
        raise FitError(f"拟合窗口 [{t1}, {t2}] 内有零或负值")
    logv = np.log(v)

    slope0, c0 = np.polyfit(t, logv, 1)
    rss0 = float(np.sum((logv - (c0 + slope0 * t)) ** 2))
    fit0 = RateFit((t1, t2), float(slope0), 0, math.sqrt(rss0 / t.size))
    if degree == 0:
        return fit0
    if degree not in (1, "auto"):
        raise ValueError(f"degree 只能是 0、1 或 'auto': {degree}")

    c, beta, slope = _fit_degree1(t, logv)
    rss1 = float(np.sum((logv - _log_prefactor_model(t, c, beta, slope)) ** 2))
    fit1 = RateFit((t1, t2), slope, 1, math.sqrt(rss1 / t.size), beta)
    if degree == 1:
        return fit1
    return fit1 if (rss0 > 1e-20 and rss1 < 0.25 * rss0) else fit0


# ---------------------------------------------------------------------------
# 精确卷积界与审计
# ---------------------------------------------------------------------------

def convolution_tail(lengths: Sequence[int], horizon: int) -> np.ndarray:
    """
    独立和 Σ T(L_i)（每个都从中心出发）的精确尾概率 P(Σ > t)，t = 0…horizon

    L=0 表示恒为 0 的退出时间。
    """
    pmf = np.zeros(horizon + 1)
    pmf[0] = 1.0
    for L in lengths:
        tail = center_exit_tail(L, horizon)
        part = np.empty(horizon + 1)
        part[0] = 1.0 - tail[0]
        part[1:] = tail[:-1] - tail[1:]
        pmf = np.clip(fftconvolve(pmf, part)[: horizon + 1], 0.0, None)
    return np.clip(1.0 - np.cumsum(pmf), 0.0, 1.0)


def copies_bound(L: int, copies: int, horizon: int) -> np.ndarray:
    """copies 个独立 T(L) 之和的尾概率"""
    return convolution_tail([L] * copies, horizon)


def dominance_audit(empirical: SurvivalCurve, bound: np.ndarray,
                    seed: Optional[int] = None, check: str = "dominance") -> Dict:
    """
    经验存活曲线 ≤ 界 + DKW 半径，对所有 t 一致成立

    Returns:
        {"check", "pass", "margin", "n_trials", "seed"}，margin 为最小余量
    """
    bound = np.asarray(bound, dtype=float)
    if bound.shape != empirical.survival.shape:
        raise GridMismatchError(
            f"时间网格不一致: 经验曲线 {empirical.survival.shape}，界 {bound.shape}"
        )
    slack = bound + empirical.radius - empirical.survival
    return {
        "check": check,
        "pass": bool(slack.min() >= -AUDIT_TOL),
        "margin": float(slack.min()),
        "n_trials": empirical.n_trials,
        "seed": seed,
    }


def refined_dominance_audit(empirical: SurvivalCurve, spec: PointMassSpec,
                            seed: Optional[int] = None) -> Dict:
    """不从 S2c 起步时的三项独立和上界"""
    bound = convolution_tail(refined_bound_lengths(spec), empirical.horizon)
    return dominance_audit(empirical, bound, seed, check="refined-dominance")


def stage_duration_audit(batch: BatchResult, bounds: Dict[str, int],
                         level: float = DKW_LEVEL) -> Dict:
    """
    每个阶段的持续时间 ≤ T(L_stage)（中心起点）+ DKW 半径

    超时试验的最后一个阶段被截断，不计入。
    """
    durations: Dict[str, List[int]] = {}
    for record in batch.records:
        path = record.stage_path[:-1] if record.timed_out else record.stage_path
        for label, duration in path:
            if label in bounds:
                durations.setdefault(label, []).append(duration)

    stages = {}
    for label, values in sorted(durations.items()):
        curve = SurvivalCurve.from_taus(values, batch.horizon, level=level)
        bound = center_exit_tail(bounds[label], batch.horizon)
        verdict = dominance_audit(curve, bound, batch.master_seed, check=f"stage-{label}")
        stages[label] = {"pass": verdict["pass"], "margin": verdict["margin"], "n": len(values),
                         "L": bounds[label]}
    return {
        "check": "stage-durations",
        "pass": all(s["pass"] for s in stages.values()),
        "stages": stages,
        "n_trials": batch.n_trials,
        "seed": batch.master_seed,
    }


def realised_path(job: CouplingJob, seed: int, length: int) -> np.ndarray:
    """
    一次试验的实际轨迹 (X_t, Y_t)，t = 0…length

    耦合之后两副本按原链一起走；X 是从 job.x 出发的副本。
    """
    path: List[Tuple[int, int]] = [(job.x, job.y)]
    engine = CouplingEngine(job.spec, np.random.default_rng(seed), job.effective_horizon, seed,
                            observe=lambda X, Y: path.append((X, Y)))
    record = job.run_on(engine)
    if record.coalesced:
        X, Y = path[-1]
        if X != Y:
            raise StageInvariantError(f"耦合结束时两副本不在同一点: ({X}, {Y})")
        while len(path) <= length:
            X = engine.solo_step(X)
            path.append((X, X))
    if len(path) <= length:
        raise ValueError(f"轨迹只有 {len(path) - 1} 步，不足 {length} 步")
    return np.asarray(path[: length + 1], dtype=np.int64)


def marginal_audit(job: CouplingJob, trials: int, master_seed: int,
                   times: Sequence[int] = MARGINAL_TIMES, level: float = DKW_LEVEL) -> Dict:
    """
    实际轨迹的边际审计：固定 t，X_t 与 Y_t 在各次试验间的经验分布函数
    分别与 δ_x P^t、δ_y P^t 比较，偏差不超过 DKW 半径，且从不落在概率为 0 的格点上

    每次比较的水平按比较次数做 Bonferroni 校正，整体置信水平为 level。
    """
    if trials < 1:
        raise ValueError(f"试验次数必须为正: {trials}")
    times = sorted({int(t) for t in times})
    if not times or times[0] < 0:
        raise ValueError(f"审计时刻必须非负: {times}")
    if times[-1] > job.effective_horizon:
        raise ValueError(f"审计时刻 {times[-1]} 超过耦合上限 {job.effective_horizon}")

    positions = np.empty((trials, len(times), 2), dtype=np.int64)
    for i in range(trials):
        positions[i] = realised_path(job, trial_seed(master_seed, i), times[-1])[times]

    N = job.spec.N
    radius = dkw_radius(trials, 1.0 - (1.0 - level) / (2 * len(times)))
    worst = 0.0
    failures = []
    for k, t in enumerate(times):
        for copy, start in (("X", job.x), ("Y", job.y)):
            exact = evolve(job.spec, ProbVector.point(N, start), t).entries
            counts = np.bincount(positions[:, k, 0 if copy == "X" else 1], minlength=N + 1)
            gap = float(np.abs(np.cumsum(counts) / trials - np.cumsum(exact)).max())
            stray = int(counts[exact == 0.0].sum())
            worst = max(worst, gap)
            if gap > radius or stray:
                failures.append({"t": t, "copy": copy, "gap": gap, "stray": stray})
    return {
        "check": "marginal",
        "pass": not failures,
        "worst_gap": worst,
        "radius": radius,
        "times": times,
        "n_trials": trials,
        "failures": failures[:10],
        "seed": master_seed,
    }


# ---------------------------------------------------------------------------
# 见证耦合
# ---------------------------------------------------------------------------

def witness_audit(curve: SurvivalCurve, N: int, seed: Optional[int] = None) -> Dict:
    """
    (N/4, 3N/4) 见证耦合的 τ 与 T(N/2)（中心起点）同分布：
    经验存活曲线与精确尾概率的双侧偏差不超过 DKW 半径
    """
    half = N // 2
    exact = center_exit_tail(half, curve.horizon)
    gap = np.abs(curve.survival - exact)
    return {
        "check": "witness",
        "pass": bool(gap.max() <= curve.radius + AUDIT_TOL),
        "worst_gap": float(gap.max()),
        "radius": curve.radius,
        "L": half,
        "n_trials": curve.n_trials,
        "seed": seed,
    }


# ---------------------------------------------------------------------------
# CSV 输出
# ---------------------------------------------------------------------------

def write_trials_csv(batch: BatchResult, path: Union[str, Path]) -> str:
    """写出 `seed,tau,stage_path`，阶段路径形如 `S2a:12;S1:30`"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "tau", "stage_path"])
        for record in batch.records:
            writer.writerow([record.seed, record.tau, record.path_string()])
    return str(out)


def write_survival_csv(curve: SurvivalCurve, path: Union[str, Path], digits: int = 17) -> str:
    """写出 `t,survival,ci_lo,ci_hi`"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "survival", "ci_lo", "ci_hi"])
        for t, s, lo, hi in zip(curve.t, curve.survival, curve.ci_lo, curve.ci_hi):
            writer.writerow([int(t), f"{s:.{digits}g}", f"{lo:.{digits}g}", f"{hi:.{digits}g}"])
    return str(out)
