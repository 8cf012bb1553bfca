"""
耦合引擎：Rigid / Ref 两种耦合方式、奇数间距的双硬币第一步、确定性重分布的阶段状态机
(S1/S2a/S2b/S2c/S3/S4)、对称随机重分布的阶段状态机 (R1a/R1b/R1c/R2a/R2b/R3)
以及退出时间的占优耦合。

两个副本都看作扩展直线 {−1,…,N+1} 上的惰性游走：走到 −1 等同于按 ν₀ 重分布，
走到 N+1 等同于按 ν_N 重分布。Rigid 让两副本使用同一增量 ξ，Ref 让两副本使用相反增量，
因此每个副本的边际都是原链。

各阶段的不变量（距离、位置、阶段时长）都写成断言，违反时抛出 StageInvariantError 并中止整批试验。
"""

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from chain_core import (
    ChainSpec,
    PointMassSpec,
    SiteError,
    exact_mass,
    rho,
)
from spectral import L0_of, L0_terms


class StageInvariantError(AssertionError):
    """阶段不变量在模拟中被违反"""


class UnsupportedStartError(ValueError):
    """起点对不在状态机的定义域内"""


class UnsupportedSpecError(ValueError):
    """ν₀ ≠ ν_N 且不是点质量：没有已知的有效耦合"""


class Regime(str, Enum):
    RIGID = "Rigid"
    REF = "Ref"
    PARITY = "ParityFix"
    INDEP = "Indep"


class StageLabel(str, Enum):
    S1 = "S1"
    S2a = "S2a"
    S2b = "S2b"
    S2c = "S2c"
    S3 = "S3"
    S4 = "S4"
    R1a = "R1a"
    R1b = "R1b"
    R1c = "R1c"
    R2a = "R2a"
    R2b = "R2b"
    R3 = "R3"
    ParityFix = "ParityFix"
    Indep = "Indep"
    Done = "Done"


DET_STAGES = (StageLabel.S1, StageLabel.S2a, StageLabel.S2b, StageLabel.S2c, StageLabel.S3, StageLabel.S4)
SYM_STAGES = (StageLabel.R1a, StageLabel.R1b, StageLabel.R1c, StageLabel.R2a, StageLabel.R2b, StageLabel.R3)

STAGE_REGIME: Dict[StageLabel, Regime] = {
    StageLabel.S1: Regime.REF,
    StageLabel.S2a: Regime.RIGID,
    StageLabel.S2b: Regime.RIGID,
    StageLabel.S2c: Regime.RIGID,
    StageLabel.S3: Regime.RIGID,
    StageLabel.S4: Regime.REF,
    StageLabel.R1a: Regime.RIGID,
    StageLabel.R1b: Regime.REF,
    StageLabel.R1c: Regime.RIGID,
    StageLabel.R2a: Regime.REF,
    StageLabel.R2b: Regime.RIGID,
    StageLabel.R3: Regime.REF,
    StageLabel.ParityFix: Regime.PARITY,
    StageLabel.Indep: Regime.INDEP,
}

_S = StageLabel
# None 表示起点；S2b↔S2c 是分类器在一般间距下可能给出的边
LEGAL_EDGES: Dict[Optional[StageLabel], Tuple[StageLabel, ...]] = {
    None: DET_STAGES + (_S.R1a, _S.R1b, _S.R3, _S.ParityFix, _S.Done),
    _S.ParityFix: DET_STAGES + (_S.R1a, _S.R1b, _S.R3, _S.Indep, _S.Done),
    _S.S1: (_S.Done,),
    _S.S2a: (_S.S1,),
    _S.S2b: (_S.S1, _S.S2a, _S.S2c),
    _S.S2c: (_S.S1, _S.S2a, _S.S2b, _S.S3),
    _S.S3: (_S.S1, _S.S2a, _S.S3, _S.S4, _S.Done),
    _S.S4: (_S.S1, _S.S2a, _S.S2b, _S.Done),
    _S.R1a: (_S.R1b, _S.R2a),
    _S.R1b: (_S.R1c, _S.R3, _S.Done),
    # X 从 0 跳到 K 时 Y 恰在 ρ−1，即 d=ρ 的 R2a 入口；K ≤ N/2 时两副本并未相遇
    _S.R1c: (_S.R3, _S.R2a),
    _S.R2a: (_S.R2b, _S.R3, _S.Done),
    _S.R2b: (_S.R3, _S.Done),
    _S.R3: (_S.R3, _S.Done),
    _S.Indep: (_S.Done,),
}


# 对称状态机最长的路径：R1a→R1b→R1c→R2a→R2b→R3，跨越 N/2 的镜像起点再加一轮 R3
SYM_MAX_STAGES = 7


def check_edge(src: Optional[StageLabel], dst: StageLabel) -> None:
    if dst not in LEGAL_EDGES.get(src, ()):
        name = src.value if src is not None else "起点"
        raise StageInvariantError(f"非法的阶段转移: {name} → {dst.value}")


# ---------------------------------------------------------------------------
# 基本类型
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledPair:
    """耦合状态：x_lo = min(X,Y)，x_hi = max(X,Y)"""

    x_lo: int
    x_hi: int
    regime: Regime = Regime.RIGID
    stage: Optional[StageLabel] = None

    def __post_init__(self):
        if self.x_lo > self.x_hi:
            raise ValueError(f"x_lo 不能大于 x_hi: ({self.x_lo}, {self.x_hi})")

    @property
    def D(self) -> int:
        return self.x_hi - self.x_lo

    @property
    def coalesced(self) -> bool:
        return self.x_lo == self.x_hi

    @classmethod
    def of(cls, x: int, y: int, regime: Regime = Regime.RIGID,
           stage: Optional[StageLabel] = None) -> "CoupledPair":
        return cls(min(x, y), max(x, y), regime, stage)


@dataclass(frozen=True)
class SymmetricPoints:
    """ℓ₀(D) = (J₀−1−D)/2，ℓ_N(D) = (N+1+J_N−D)/2"""

    ell0: int
    ellN: int

    @classmethod
    def of(cls, spec: PointMassSpec, D: int) -> "SymmetricPoints":
        return cls((spec.J0 - 1 - D) // 2, (spec.N + 1 + spec.JN - D) // 2)


@dataclass(frozen=True)
class TrialRecord:
    """一次耦合运行的结果"""

    tau: int
    stage_path: Tuple[Tuple[str, int], ...]
    seed: Optional[int] = None
    assertions_passed: bool = True
    timed_out: bool = False
    s3_entries: Tuple[str, ...] = ()

    @property
    def coalesced(self) -> bool:
        return not self.timed_out

    @property
    def entry_stage(self) -> Optional[str]:
        """第一个真正的耦合阶段（跳过奇偶修正步）"""
        for label, _ in self.stage_path:
            if label != StageLabel.ParityFix.value:
                return label
        return None

    @property
    def stage_count(self) -> int:
        """经过的耦合阶段数（不计奇偶修正步与独立演化）"""
        skip = (StageLabel.ParityFix.value, StageLabel.Indep.value)
        return sum(1 for label, _ in self.stage_path if label not in skip)

    def path_string(self) -> str:
        return ";".join(f"{label}:{duration}" for label, duration in self.stage_path)


class IncrementStream:
    """
    成块缓存的随机数：惰性增量 ξ ∈ {−1,0,+1}（概率 ¼,½,¼）、双硬币、重分布抽样

    同一个 Generator 只被这一个流消费，因此给定种子结果可复现。
    """

    _XI = np.array([-1, 0, 0, 1], dtype=np.int64)

    def __init__(self, rng: np.random.Generator, block: int = 4096):
        self.rng = rng
        self.block = block
        self._ints = np.empty(0, dtype=np.int64)
        self._i = 0
        self._uniforms = np.empty(0)
        self._j = 0

    def raw(self) -> int:
        if self._i >= self._ints.size:
            self._ints = self.rng.integers(0, 4, size=self.block)
            self._i = 0
        value = int(self._ints[self._i])
        self._i += 1
        return value

    def xi(self) -> int:
        return int(self._XI[self.raw()])

    def coins(self) -> Tuple[bool, int]:
        """双硬币：(是否移动上方副本, 方向 ±1)"""
        value = self.raw()
        return bool(value & 1), (1 if value & 2 else -1)

    def uniform(self) -> float:
        if self._j >= self._uniforms.size:
            self._uniforms = self.rng.random(self.block)
            self._j = 0
        value = float(self._uniforms[self._j])
        self._j += 1
        return value


def as_stream(rng: Union[IncrementStream, np.random.Generator, int]) -> IncrementStream:
    if isinstance(rng, IncrementStream):
        return rng
    if isinstance(rng, np.random.Generator):
        return IncrementStream(rng)
    return IncrementStream(np.random.default_rng(rng))


class _Law:
    """重分布测度：点质量时不消耗随机数"""

    def __init__(self, mass: np.ndarray):
        self.mass = np.asarray(mass, dtype=float)
        self.sites = np.flatnonzero(self.mass > 0)
        self.cdf = np.cumsum(self.mass[self.sites])
        self.cdf[-1] = 1.0

    @property
    def point(self) -> Optional[int]:
        return int(self.sites[0]) if self.sites.size == 1 else None

    def same(self, other: "_Law") -> bool:
        return bool(np.array_equal(self.sites, other.sites) and np.allclose(self.cdf, other.cdf))

    def draw(self, stream: IncrementStream) -> int:
        if self.sites.size == 1:
            return int(self.sites[0])
        return int(self.sites[np.searchsorted(self.cdf, stream.uniform(), side="right")])


class _Walk:
    """某个坐标系下的链：两端的重分布测度"""

    def __init__(self, chain: ChainSpec):
        self.chain = chain
        self.N = chain.N
        self.low = _Law(chain.nu0)
        self.high = _Law(chain.nuN)


class _HorizonReached(Exception):
    pass


class _Recorder:
    """记录阶段路径、总步数与时间上限"""

    def __init__(self, horizon: int, seed: Optional[int]):
        self.horizon = horizon
        self.seed = seed
        self.t = 0
        self.path: List[Tuple[str, int]] = []
        self.stage: Optional[StageLabel] = None
        self.start = 0
        self.s3_entries: List[str] = []

    def enter(self, stage: StageLabel) -> None:
        check_edge(self.stage, stage)
        self._close()
        self.stage = stage
        self.start = self.t

    def _close(self) -> None:
        if self.stage is not None:
            self.path.append((self.stage.value, self.t - self.start))

    def tick(self) -> None:
        if self.t >= self.horizon:
            raise _HorizonReached()
        self.t += 1

    def done(self) -> TrialRecord:
        if self.stage is not None:
            check_edge(self.stage, StageLabel.Done)
        self._close()
        return TrialRecord(self.t, tuple(self.path), self.seed, True, False, tuple(self.s3_entries))

    def timeout(self) -> TrialRecord:
        self._close()
        return TrialRecord(self.horizon, tuple(self.path), self.seed, True, True, tuple(self.s3_entries))


Trace = Callable[[StageLabel, Regime, int, int, ChainSpec], None]
# 每走一步回调一次，参数为原坐标下 (X, Y) 的实际位置，X 是从 x 出发的副本
Observer = Callable[[int, int], None]


def default_horizon(spec: ChainSpec, machine: str) -> int:
    """确定性状态机 200·L₀²，对称状态机 200·(N/2)²"""
    if machine == "det":
        return 200 * L0_of(spec.as_point_mass()) ** 2
    return 200 * (spec.N // 2) ** 2


def witness_pair(spec: ChainSpec) -> Tuple[int, int]:
    """(N/4, 3N/4)"""
    return spec.N // 4, 3 * spec.N // 4


# ---------------------------------------------------------------------------
# 引擎
# ---------------------------------------------------------------------------

class CouplingEngine:
    """在给定链上运行耦合；一个引擎对应一条随机数流"""

    def __init__(self, spec: ChainSpec, rng: Union[IncrementStream, np.random.Generator, int],
                 horizon: Optional[int] = None, seed: Optional[int] = None,
                 trace: Optional[Trace] = None, observe: Optional[Observer] = None):
        self.spec = spec
        self.stream = as_stream(rng)
        self.horizon = horizon
        self.seed = seed
        self.trace = trace
        self.observe = observe
        self._walk = _Walk(spec)
        self._mirror_walk: Optional[_Walk] = None
        self._walks: Dict[int, _Walk] = {}
        self._xy = [0, 0]
        self._split: Optional[int] = None

    @property
    def mirror_walk(self) -> _Walk:
        if self._mirror_walk is None:
            self._mirror_walk = _Walk(self.spec.mirrored())
        return self._mirror_walk

    # --- 单步 -------------------------------------------------------------

    def _move(self, pos: int, step: int, walk: _Walk, forced: Optional[int] = None) -> Tuple[int, Optional[str]]:
        nxt = pos + step
        if nxt == -1:
            return (walk.low.draw(self.stream) if forced is None else forced), "low"
        if nxt == walk.N + 1:
            return walk.high.draw(self.stream), "high"
        return nxt, None

    def _advance(self, regime: Regime, lo: int, hi: int, walk: _Walk,
                 forced_lo: Optional[int] = None) -> Tuple[int, int, Optional[str], Optional[str]]:
        """
        两副本同时走一步（轨迹的一部分，会通知 observe）

        Returns:
            (a, b, ja, jb)：a/b 为原先下方/上方副本的新位置，ja/jb 为其重分布的边界（无则 None）
        """
        a, b, ja, jb = self._step_pair(regime, lo, hi, walk, forced_lo)
        if self.observe is not None:
            self._observe_step(walk, lo, a, hi, b)
        return a, b, ja, jb

    def _step_pair(self, regime: Regime, lo: int, hi: int, walk: _Walk,
                   forced_lo: Optional[int] = None) -> Tuple[int, int, Optional[str], Optional[str]]:
        xi = self.stream.xi()
        if regime is Regime.RIGID:
            step_lo, step_hi = xi, xi
        elif regime is Regime.REF:
            step_lo, step_hi = xi, -xi
        elif regime is Regime.INDEP:
            step_lo, step_hi = xi, self.stream.xi()
        else:
            raise ValueError(f"_advance 不处理该耦合方式: {regime}")
        exit_lo = lo + step_lo in (-1, walk.N + 1)
        exit_hi = hi + step_hi in (-1, walk.N + 1)
        if regime is Regime.REF and exit_lo and exit_hi and forced_lo is None:
            # 同时重分布且两端测度相同：共用一次抽样
            side_lo = "low" if lo + step_lo == -1 else "high"
            side_hi = "low" if hi + step_hi == -1 else "high"
            law_lo = walk.low if side_lo == "low" else walk.high
            law_hi = walk.low if side_hi == "low" else walk.high
            if law_lo.same(law_hi):
                target = law_lo.draw(self.stream)
                return target, target, side_lo, side_hi
        a, ja = self._move(lo, step_lo, walk, forced_lo)
        b, jb = self._move(hi, step_hi, walk)
        return a, b, ja, jb

    def _parity_fix(self, lo: int, hi: int, walk: _Walk) -> Tuple[int, int]:
        move_hi, direction = self.stream.coins()
        a, b = lo, hi
        if move_hi:
            b, _ = self._move(hi, direction, walk)
        else:
            a, _ = self._move(lo, direction, walk)
        if self.observe is not None:
            self._observe_step(walk, lo, a, hi, b)
        return min(a, b), max(a, b)

    def _origin(self, walk: _Walk, copy: int, pos: int) -> int:
        """本坐标系下的位置换回原坐标；镜像技巧中不随 x 的副本是 N−Y"""
        mirrored = walk is self._mirror_walk
        if self._split is not None and copy != self._split:
            mirrored = not mirrored
        return self.spec.N - pos if mirrored else pos

    def _observe_step(self, walk: _Walk, p: int, a: int, q: int, b: int) -> None:
        """状态机中 p→a、q→b 的一步，换算成 (X, Y) 的实际位置"""
        for c in (0, 1):
            if self._origin(walk, c, p) == self._xy[c] and self._origin(walk, 1 - c, q) == self._xy[1 - c]:
                self._xy[c] = self._origin(walk, c, a)
                self._xy[1 - c] = self._origin(walk, 1 - c, b)
                self.observe(self._xy[0], self._xy[1])
                return
        raise StageInvariantError(f"状态机位置 ({p}, {q}) 与副本实际位置 {tuple(self._xy)} 不一致")

    def _begin(self, x: int, y: int) -> None:
        self._xy = [x, y]
        self._split = None

    def solo_step(self, pos: int) -> int:
        """单个副本按原链走一步；耦合之后两副本一起这样走"""
        return self._move(pos, self.stream.xi(), self._walk)[0]

    def _check_pair(self, pair: CoupledPair) -> None:
        N = self.spec.N
        for x in (pair.x_lo, pair.x_hi):
            if x < 0 or x > N:
                raise SiteError(f"格点越界: x={x} 不在 {{0,…,{N}}} 中")

    def rigid_step(self, pair: CoupledPair) -> CoupledPair:
        """两副本使用同一增量"""
        self._check_pair(pair)
        if pair.coalesced:
            raise ValueError("已经耦合的状态不再区分两副本")
        a, b, _, _ = self._step_pair(Regime.RIGID, pair.x_lo, pair.x_hi, self._walk)
        return CoupledPair.of(a, b, Regime.RIGID, pair.stage)

    def ref_step(self, pair: CoupledPair) -> CoupledPair:
        """两副本使用相反增量（间距须为偶数）"""
        self._check_pair(pair)
        if pair.coalesced:
            raise ValueError("已经耦合的状态不再区分两副本")
        if pair.D % 2:
            raise ValueError(f"Ref 耦合要求偶数间距: D={pair.D}")
        a, b, _, _ = self._step_pair(Regime.REF, pair.x_lo, pair.x_hi, self._walk)
        return CoupledPair.of(a, b, Regime.REF, pair.stage)

    def parity_fix_step(self, x: int, y: int) -> CoupledPair:
        """
        奇数间距的第一步：第一枚硬币决定哪个副本移动，第二枚决定方向，另一个副本不动
        """
        lo, hi = min(x, y), max(x, y)
        self._check_pair(CoupledPair(lo, hi))
        if (hi - lo) % 2 == 0:
            raise ValueError(f"双硬币步只用于奇数间距: {x}, {y}")
        lo, hi = self._parity_fix(lo, hi, self._walk)
        if (hi - lo) % 2:
            raise StageInvariantError(f"双硬币步之后间距仍为奇数: ({lo}, {hi})")
        return CoupledPair(lo, hi, Regime.PARITY, StageLabel.ParityFix)

    def _walk_for(self, chain: Optional[ChainSpec]) -> _Walk:
        if chain is None or chain is self.spec:
            return self._walk
        if chain is self.mirror_walk.chain:
            return self.mirror_walk
        if id(chain) not in self._walks:
            self._walks[id(chain)] = _Walk(chain)
        return self._walks[id(chain)]

    def shared_step(self, regime: Regime, lo: int, hi: int,
                    chain: Optional[ChainSpec] = None) -> Tuple[int, int]:
        """
        共享随机性映射的一次新抽样（不排序，保留副本身份）

        Returns:
            (原下方副本的新位置, 原上方副本的新位置)
        """
        walk = self._walk_for(chain)
        if regime is Regime.PARITY:
            move_hi, direction = self.stream.coins()
            if move_hi:
                return lo, self._move(hi, direction, walk)[0]
            return self._move(lo, direction, walk)[0], hi
        a, b, _, _ = self._step_pair(regime, lo, hi, walk)
        return a, b

    def _emit(self, stage: StageLabel, lo: int, hi: int, walk: _Walk) -> None:
        if self.trace is not None:
            self.trace(stage, STAGE_REGIME[stage], lo, hi, walk.chain)

    # --- 公共前处理 -------------------------------------------------------

    def _start(self, x: int, y: int, walk: _Walk, rec: _Recorder) -> Optional[Tuple[int, int]]:
        """排序、检查起点，必要时先走双硬币步；已耦合时返回 None"""
        r = rho(self.spec)
        lo, hi = min(x, y), max(x, y)
        self._check_pair(CoupledPair(lo, hi))
        if lo == hi:
            return None
        gap = hi - lo
        if gap % 2 == 0 and gap > r:
            raise UnsupportedStartError(f"起点间距 {gap} 超过 ρ={r}")
        if gap % 2 and gap > r + 1:
            raise UnsupportedStartError(f"奇数起点间距 {gap} 超过 ρ+1={r + 1}")
        if gap % 2:
            rec.enter(StageLabel.ParityFix)
            self._emit(StageLabel.ParityFix, lo, hi, walk)
            rec.tick()
            lo, hi = self._parity_fix(lo, hi, walk)
            if (hi - lo) % 2:
                raise StageInvariantError(f"双硬币步之后间距仍为奇数: ({lo}, {hi})")
            if lo == hi:
                return None
        return lo, hi

    def _independent(self, lo: int, hi: int, walk: _Walk, rec: _Recorder) -> None:
        """双硬币步之后落在状态机定义域之外：两副本独立演化直到相遇"""
        rec.enter(StageLabel.Indep)
        while lo != hi:
            self._emit(StageLabel.Indep, lo, hi, walk)
            rec.tick()
            a, b, _, _ = self._advance(Regime.INDEP, lo, hi, walk)
            lo, hi = min(a, b), max(a, b)

    # --- 确定性重分布 -----------------------------------------------------

    def run_det(self, x: int, y: int) -> TrialRecord:
        """确定性重分布的阶段状态机；J₀ > N−J_N 时在镜像坐标 x ↦ N−x 中运行"""
        pm = self.spec.as_point_mass()
        horizon = self.horizon if self.horizon is not None else default_horizon(self.spec, "det")
        rec = _Recorder(horizon, self.seed)
        self._begin(x, y)
        if pm.needs_mirror:
            frame, walk = pm.mirrored(), self.mirror_walk
            x, y = self.spec.N - x, self.spec.N - y
        else:
            frame, walk = pm, self._walk
        try:
            start = self._start(x, y, walk, rec)
            if start is None:
                return rec.done()
            lo, hi = start
            stage = classify_det(frame, lo, hi)
            if stage is None:
                if rec.stage is not StageLabel.ParityFix:
                    raise UnsupportedStartError(f"起点 ({lo}, {hi}) 不属于任何阶段的入口")
                self._independent(lo, hi, walk, rec)
                return rec.done()
            self._det_machine(frame, walk, lo, hi, stage, rec)
            return rec.done()
        except _HorizonReached:
            return rec.timeout()

    def _det_machine(self, pm: PointMassSpec, walk: _Walk, lo: int, hi: int,
                     stage: StageLabel, rec: _Recorder) -> None:
        N, J0, JN = pm.N, pm.J0, pm.JN
        S = StageLabel
        while stage is not S.Done:
            rec.enter(stage)
            if stage is S.S3:
                rec.s3_entries.append("J0" if lo == J0 else "JN")
            D = hi - lo
            pts = SymmetricPoints.of(pm, D)
            regime = STAGE_REGIME[stage]
            nxt: Optional[StageLabel] = None
            while nxt is None:
                self._emit(stage, lo, hi, walk)
                rec.tick()
                a, b, ja, jb = self._advance(regime, lo, hi, walk)
                if ja == "high" or jb == "low":
                    raise StageInvariantError(f"{stage.value}: 副本从错误的一端重分布")

                if stage is S.S1:
                    if ja and b != J0:
                        raise StageInvariantError(f"S1: X̄ 从 0 重分布时 Ȳ={b} ≠ J₀={J0}")
                    if jb and a != JN:
                        raise StageInvariantError(f"S1: Ȳ 从 N 重分布时 X̄={a} ≠ J_N={JN}")
                    if a == b:
                        nxt = S.Done
                    elif a > b:
                        raise StageInvariantError(f"S1: Ref 耦合下副本交叉 ({a}, {b})")
                    lo, hi = a, b

                elif stage is S.S2a:
                    if ja or jb:
                        raise StageInvariantError(f"S2a: 到达对称点之前发生了重分布 ({a}, {b})")
                    lo, hi = a, b
                    if lo in (pts.ell0, pts.ellN):
                        nxt = S.S1

                elif stage is S.S2b:
                    if jb:
                        raise StageInvariantError("S2b: Ȳ 不应从 N 重分布")
                    if ja:
                        lo, hi = b, a
                        D2 = hi - lo
                        if hi != J0 or lo != D - 1 or D2 != J0 + 1 - D:
                            raise StageInvariantError(f"S2b: 重分布后位置 ({lo}, {hi}) 与 (D−1, J₀) 不符")
                        if D2 % 2 or not 0 < D2 < J0:
                            raise StageInvariantError(f"S2b: 新间距 D′={D2} 应为小于 J₀ 的正偶数")
                        if not SymmetricPoints.of(pm, D2).ell0 < lo:
                            raise StageInvariantError("S2b: 新的 ℓ₀(D′) 应在 X̄ 之下")
                        nxt = classify_det(pm, lo, hi)
                    else:
                        lo, hi = a, b
                        if lo == pts.ell0:
                            nxt = S.S1

                elif stage is S.S2c:
                    if ja:
                        raise StageInvariantError("S2c: X̄ 不应从 0 重分布")
                    if jb:
                        lo, hi = b, a
                        D2 = hi - lo
                        if lo != JN or hi != N + 1 - D or D2 <= 0 or D2 % 2:
                            raise StageInvariantError(f"S2c: 重分布后位置 ({b}, {a}) 与 (J_N, N+1−D) 不符")
                        if D2 >= J0:
                            if lo > SymmetricPoints.of(pm, D2).ellN:
                                raise StageInvariantError("S2c: 进入 S3 时 X̄ 应不超过 ℓ_N(D′)")
                            nxt = S.S3
                        else:
                            nxt = classify_det(pm, lo, hi)
                    else:
                        lo, hi = a, b
                        if lo == pts.ellN:
                            nxt = S.S1

                elif stage is S.S3:
                    if jb:
                        raise StageInvariantError("S3: Ȳ 不应在 X̄ 到达 ℓ_N 之前从 N 重分布")
                    if ja:
                        if a != J0 or b != D - 1 or b < J0:
                            raise StageInvariantError(f"S3: 重分布后位置 ({a}, {b}) 与 (J₀, D−1) 不符")
                        lo, hi = a, b
                        D2 = hi - lo
                        if D2 == 0:
                            nxt = S.Done
                        else:
                            ellN2 = SymmetricPoints.of(pm, D2).ellN
                            if J0 > ellN2:
                                nxt = S.S4
                            elif J0 == ellN2:
                                nxt = S.S1
                            elif D2 < J0:
                                nxt = S.S2a
                            else:
                                nxt = S.S3
                    else:
                        lo, hi = a, b
                        if lo == pts.ellN:
                            nxt = S.S1

                elif stage is S.S4:
                    if ja:
                        raise StageInvariantError("S4: X̄ 不应从 0 重分布（Ȳ 总是先到 N）")
                    if jb:
                        lo, hi = min(a, b), max(a, b)
                        if b != JN or not JN < a < J0:
                            raise StageInvariantError(f"S4: 重分布后应有 J_N < Ȳ < J₀: ({b}, {a})")
                        nxt = classify_det(pm, lo, hi)
                        if nxt not in (S.S1, S.S2a, S.S2b):
                            raise StageInvariantError(f"S4: 重分布后不应进入 {nxt}")
                    else:
                        if a > b:
                            raise StageInvariantError(f"S4: Ref 耦合下副本交叉 ({a}, {b})")
                        lo, hi = a, b
                        if a == b:
                            nxt = S.Done
                else:
                    raise StageInvariantError(f"确定性状态机中出现了未知阶段 {stage}")

                if nxt is not S.Done and lo != hi and (hi - lo) % 2:
                    raise StageInvariantError(f"{stage.value}: 间距变为奇数 ({lo}, {hi})")
                if nxt is None and lo == hi:
                    raise StageInvariantError(f"{stage.value}: 副本相遇但阶段未结束")
            if nxt is None:
                raise StageInvariantError(f"{stage.value}: 重分布后找不到后继阶段")
            stage = nxt

    # --- 对称随机重分布 ---------------------------------------------------

    def run_sym(self, x: int, y: int) -> TrialRecord:
        """ν₀ = ν_N 时的阶段状态机"""
        spec = self.spec
        if not spec.symmetric_redistribution:
            raise UnsupportedSpecError("对称耦合要求 ν₀ = ν_N")
        N, half, r = spec.N, spec.N // 2, rho(spec)
        horizon = self.horizon if self.horizon is not None else default_horizon(spec, "sym")
        rec = _Recorder(horizon, self.seed)
        self._begin(x, y)
        walk = self._walk
        try:
            start = self._start(x, y, walk, rec)
            if start is None:
                return rec.done()
            lo, hi = start
            if hi - lo > r:
                self._independent(lo, hi, walk, rec)
            elif hi <= half:
                self._lower_half(lo, hi, walk, rec)
            elif lo >= half:
                self._lower_half(N - hi, N - lo, self.mirror_walk, rec)
            elif spec.reflection_symmetric:
                self._mirror_trick(lo, hi, rec)
            else:
                self._align(lo, hi, rec)
            record = rec.done()
            if record.stage_count > SYM_MAX_STAGES:
                raise StageInvariantError(f"对称状态机经过了 {record.stage_count} 个阶段: {record.path_string()}")
            return record
        except _HorizonReached:
            return rec.timeout()

    def run_witness(self) -> TrialRecord:
        """
        从 (N/4, 3N/4) 出发、一直用 Ref 耦合直到相遇

        X+Y=N 始终成立，相遇时刻恰是 X 离开 {0,…,N/2−1} 的时刻；
        f = 1{x ≤ N/2} 在相遇前给出 f(X_t) − f(Y_t) = 1，因此 d_t ≥ P(τ > t) = Q_center(T(N/2) > t)。
        """
        spec = self.spec
        if not spec.symmetric_redistribution:
            raise UnsupportedSpecError("见证耦合要求 ν₀ = ν_N")
        x, y = witness_pair(spec)
        horizon = self.horizon if self.horizon is not None else default_horizon(spec, "sym")
        rec = _Recorder(horizon, self.seed)
        self._begin(x, y)
        try:
            self._r3(x, y, self._walk, rec)
            return rec.done()
        except _HorizonReached:
            return rec.timeout()

    def _mirror_trick(self, x: int, y: int, rec: _Recorder) -> None:
        """
        x < N/2 < y：与 Ỹ = N−Y 耦合（ν 镜像对称时 Ỹ 也是原链），
        子耦合结束后 X + Y = N，再做一轮 R3
        """
        N, walk = self.spec.N, self._walk
        u, v = x, N - y
        if u != v:
            self._split = 0 if self._xy[0] == x else 1
            try:
                m = self._lower_half(min(u, v), max(u, v), walk, rec)
            finally:
                self._split = None
        else:
            m = u
        lo, hi = min(m, N - m), max(m, N - m)
        if lo != hi:
            self._r3(lo, hi, walk, rec)

    def _align(self, lo: int, hi: int, rec: _Recorder) -> None:
        """x < N/2 < y 且 ν 不镜像对称：Rigid 平移直到某个副本到达 N/2"""
        N, half, walk = self.spec.N, self.spec.N // 2, self._walk
        rec.enter(StageLabel.R1a)
        while lo != half and hi != half:
            self._emit(StageLabel.R1a, lo, hi, walk)
            rec.tick()
            a, b, ja, jb = self._advance(Regime.RIGID, lo, hi, walk)
            if ja or jb:
                raise StageInvariantError("R1a: 跨越 N/2 的起点在对齐前发生了重分布")
            lo, hi = a, b
        if hi == half:
            self._lower_half(lo, hi, walk, rec)
        else:
            self._lower_half(N - hi, N - lo, self.mirror_walk, rec)

    def _lower_half(self, x: int, y: int, walk: _Walk, rec: _Recorder) -> int:
        """
        0 ≤ x < y ≤ N/2、y−x ≤ ρ 为偶数时的子状态机

        Returns:
            两副本相遇的位置（本坐标系下）
        """
        S = StageLabel
        N, half, r = walk.N, walk.N // 2, rho(self.spec)
        d = y - x
        K: Optional[int] = None
        stage = S.R1b if y == half else S.R1a
        while True:
            rec.enter(stage)

            if stage is S.R1a:
                while True:
                    self._emit(stage, x, y, walk)
                    rec.tick()
                    a, b, ja, jb = self._advance(Regime.RIGID, x, y, walk)
                    if jb:
                        raise StageInvariantError("R1a: Y 不应从 N 重分布")
                    x, y = a, b
                    if ja:
                        K = x
                        if y != d - 1:
                            raise StageInvariantError(f"R1a: X 重分布时 Y={y} ≠ d−1={d - 1}")
                        stage = S.R2a
                        break
                    if y == half:
                        stage = S.R1b
                        break

            elif stage is S.R1b:
                while y - x != r:
                    self._emit(stage, x, y, walk)
                    rec.tick()
                    a, b, ja, jb = self._advance(Regime.REF, x, y, walk)
                    if ja or jb:
                        raise StageInvariantError("R1b: 间距达到 ρ 之前发生了重分布")
                    x, y = a, b
                    if x == y:
                        return x
                stage = S.R1c

            elif stage is S.R1c:
                top = (N + r) // 2
                while True:
                    self._emit(stage, x, y, walk)
                    rec.tick()
                    a, b, ja, jb = self._advance(Regime.RIGID, x, y, walk)
                    if jb:
                        raise StageInvariantError("R1c: Y 不应从 N 重分布")
                    x, y = a, b
                    if ja:
                        # X 跳到 K 时 Y 在 ρ−1：正是 d=ρ 时 R2a 的入口
                        K, d = x, r
                        if y != r - 1:
                            raise StageInvariantError(f"R1c: X 重分布时 Y={y} ≠ ρ−1={r - 1}")
                        stage = S.R2a
                        break
                    if y == top:
                        if x + y != N:
                            raise StageInvariantError(f"R1c: 结束时应有 X+Y=N: ({x}, {y})")
                        stage = S.R3
                        break

            elif stage is S.R2a:
                # 此时 X=K 在上方，Y 在下方
                while x - y != K + 1:
                    self._emit(stage, y, x, walk)
                    rec.tick()
                    a, b, ja, jb = self._advance(Regime.REF, y, x, walk)
                    if ja or jb:
                        raise StageInvariantError("R2a: 不应发生重分布")
                    y, x = a, b
                    if x == y:
                        return x
                stage = S.R2b

            elif stage is S.R2b:
                target = half - (K + 1) // 2
                while True:
                    self._emit(stage, y, x, walk)
                    rec.tick()
                    a, b, ja, jb = self._advance(Regime.RIGID, y, x, walk, forced_lo=K)
                    if jb:
                        raise StageInvariantError("R2b: X 不应从 N 重分布")
                    y, x = a, b
                    if ja:
                        if x != y:
                            raise StageInvariantError(f"R2b: Y 重分布到 K={K} 时应与 X 相遇: ({y}, {x})")
                        return x
                    if y == target:
                        if x + y != N:
                            raise StageInvariantError(f"R2b: 结束时应有 X+Y=N: ({y}, {x})")
                        stage = S.R3
                        break

            elif stage is S.R3:
                return self._r3(min(x, y), max(x, y), walk, rec, entered=True)

    def _r3(self, lo: int, hi: int, walk: _Walk, rec: _Recorder, entered: bool = False) -> int:
        """X+Y=N 的反对称对：Ref 直到相遇或两副本同时重分布到同一个 K′"""
        if not entered:
            rec.enter(StageLabel.R3)
        if lo + hi != walk.N:
            raise StageInvariantError(f"R3: 入口应满足 X+Y=N: ({lo}, {hi})")
        while lo != hi:
            self._emit(StageLabel.R3, lo, hi, walk)
            rec.tick()
            a, b, ja, jb = self._advance(Regime.REF, lo, hi, walk)
            if bool(ja) != bool(jb):
                raise StageInvariantError("R3: 两副本必须同时重分布")
            if ja and a != b:
                raise StageInvariantError(f"R3: 同时重分布后应落在同一点: ({a}, {b})")
            lo, hi = a, b
        return lo


def classify_det(pm: PointMassSpec, lo: int, hi: int) -> Optional[StageLabel]:
    """
    规范坐标 (J₀ ≤ N−J_N) 下按起点确定确定性状态机的阶段

    Returns:
        阶段标签；D=0 时为 Done；不属于任何入口时为 None
    """
    D = hi - lo
    if D == 0:
        return StageLabel.Done
    if D % 2:
        return None
    pts = SymmetricPoints.of(pm, D)
    if D < pm.J0:
        if lo in (pts.ell0, pts.ellN):
            return StageLabel.S1
        if pts.ell0 < lo < pts.ellN:
            return StageLabel.S2a
        if lo < pts.ell0:
            return StageLabel.S2b
        return StageLabel.S2c
    if lo == pts.ellN:
        return StageLabel.S1
    if lo < pts.ellN and lo in (pm.J0, pm.JN):
        return StageLabel.S3
    if lo == pm.J0 and pm.J0 > pts.ellN:
        return StageLabel.S4
    return None


def stage_entry_pairs(pm: PointMassSpec, D: int = 2) -> Dict[StageLabel, List[Tuple[int, int]]]:
    """间距为 D 时各阶段的全部入口起点（原坐标）"""
    frame = pm.mirrored() if pm.needs_mirror else pm
    out: Dict[StageLabel, List[Tuple[int, int]]] = {}
    for lo in range(0, pm.N - D + 1):
        stage = classify_det(frame, lo, lo + D)
        if stage is None:
            continue
        if pm.needs_mirror:
            pair = (pm.N - lo - D, pm.N - lo)
        else:
            pair = (lo, lo + D)
        out.setdefault(stage, []).append(pair)
    for pairs in out.values():
        pairs.sort()
    return out


def rate_start_pair(pm: PointMassSpec) -> Tuple[int, int]:
    """
    尾部速率恰为 λ(L₀) 的起点：L₀ 由交叉项给出时取 S2a 区间中点，
    否则从对应环的对称点 (S1) 出发
    """
    terms = L0_terms(pm.mirrored() if pm.needs_mirror else pm)
    frame = pm.mirrored() if pm.needs_mirror else pm
    pts = SymmetricPoints.of(frame, 2)
    L0 = max(terms.values())
    if terms["cross"] == L0:
        lo = (pts.ell0 + pts.ellN) // 2
    elif terms["left-loop"] == L0:
        lo = pts.ell0
    else:
        lo = pts.ellN
    if pm.needs_mirror:
        return pm.N - lo - 2, pm.N - lo
    return lo, lo + 2


def stage_length_bounds(spec: ChainSpec, machine: str) -> Dict[str, int]:
    """
    各阶段持续时间的占优区间长度 L（阶段时长 ≤ T(L)）

    确定性状态机在规范坐标中给出；对称状态机各阶段都由 T(N/2) 占优。
    """
    if machine == "sym":
        return {label.value: spec.N // 2 for label in SYM_STAGES}
    pm = spec.as_point_mass()
    frame = pm.mirrored() if pm.needs_mirror else pm
    N, J0, JN = frame.N, frame.J0, frame.JN
    return {
        "S1": max((J0 - 1) // 2, (N - JN - 1) // 2),
        "S2a": (N + JN - J0) // 2,
        "S2b": (J0 - 1) // 2,
        "S2c": (N - JN - 1) // 2,
        "S3": (N + JN - J0) // 2,
        "S4": (N - JN - 1) // 2,
    }


# ---------------------------------------------------------------------------
# 模块级便捷函数
# ---------------------------------------------------------------------------

def rigid_step(pair: CoupledPair, spec: ChainSpec, rng) -> CoupledPair:
    return CouplingEngine(spec, rng).rigid_step(pair)


def ref_step(pair: CoupledPair, spec: ChainSpec, rng) -> CoupledPair:
    return CouplingEngine(spec, rng).ref_step(pair)


def parity_fix_step(x: int, y: int, spec: ChainSpec, rng) -> CoupledPair:
    return CouplingEngine(spec, rng).parity_fix_step(x, y)


def det_coupling_run(spec: Union[ChainSpec, PointMassSpec], x: int, y: int, rng,
                     horizon: Optional[int] = None, seed: Optional[int] = None,
                     trace: Optional[Trace] = None) -> TrialRecord:
    """
    确定性重分布耦合的一次运行

    Args:
        spec: 点质量参数（ChainSpec 需能转换为点质量）
        x, y: 起点，偶数间距 ≤ ρ（奇数间距先走双硬币步）
        rng: Generator、整数种子或 IncrementStream
        horizon: 最大步数，默认 200·L₀²

    Returns:
        TrialRecord
    """
    chain = spec.to_chain_spec() if isinstance(spec, PointMassSpec) else spec
    if seed is None and isinstance(rng, (int, np.integer)):
        seed = int(rng)
    return CouplingEngine(chain, rng, horizon, seed, trace).run_det(x, y)


def sym_coupling_run(spec: ChainSpec, x: int, y: int, rng,
                     horizon: Optional[int] = None, seed: Optional[int] = None,
                     trace: Optional[Trace] = None) -> TrialRecord:
    """ν₀ = ν_N 时对称随机重分布耦合的一次运行，默认上限 200·(N/2)²"""
    if seed is None and isinstance(rng, (int, np.integer)):
        seed = int(rng)
    return CouplingEngine(spec, rng, horizon, seed, trace).run_sym(x, y)


def ref_witness_run(spec: ChainSpec, rng, horizon: Optional[int] = None,
                    seed: Optional[int] = None) -> TrialRecord:
    """(N/4, 3N/4) 出发的 Ref 见证耦合，τ 与 T(N/2)（中心起点）同分布"""
    if seed is None and isinstance(rng, (int, np.integer)):
        seed = int(rng)
    return CouplingEngine(spec, rng, horizon, seed).run_witness()


def decompose_pair(x: int, y: int, rho_gap: int, N: int) -> List[Tuple[int, int]]:
    """
    把 (x, y) 拆成相邻点对：先是 ⌊(y−x)/ρ⌋ 段长度 ρ，再是偶数余量，奇数时最后补一段 1
    """
    if not 0 <= x < y <= N:
        raise ValueError(f"需要 0 ≤ x < y ≤ N: ({x}, {y}), N={N}")
    gap = y - x
    steps = [rho_gap] * (gap // rho_gap)
    rest = gap - rho_gap * (gap // rho_gap)
    if rest % 2 == 0:
        if rest:
            steps.append(rest)
    else:
        if rest > 1:
            steps.append(rest - 1)
        steps.append(1)
    points = [x]
    for step in steps:
        points.append(points[-1] + step)
    return list(zip(points[:-1], points[1:]))


# ---------------------------------------------------------------------------
# 退出时间的占优耦合
# ---------------------------------------------------------------------------

def _solo_exit(pos: int, L: int, stream: IncrementStream) -> int:
    t = 0
    while 1 <= pos <= L:
        pos += stream.xi()
        t += 1
    return t


def dominance_sampler(L: int, z: int, rng) -> Tuple[int, int]:
    """
    成对抽样 (T, T′)：T 从 z 出发、T′ 从中心出发的 {1,…,L} 退出时间，且 T ≤ T′ 处处成立

    z 在中心之上时用镜像 z ↦ L+1−z；L 为偶数时按奇偶性在两个中心中选一个，
    使间距为偶数；间距为奇数（L 为奇数）时先走一步双硬币。
    """
    if z < 1 or z > L:
        raise ValueError(f"起点必须在 {{1,…,{L}}} 中: z={z}")
    stream = as_stream(rng)
    if z > L + 1 - z:
        z = L + 1 - z
    if L % 2:
        c = (L + 1) // 2
    else:
        c = L // 2 if (L // 2 - z) % 2 == 0 else L // 2 + 1
    if z == c:
        T = _solo_exit(z, L, stream)
        return T, T

    t = 0
    lo, hi = z, c
    if (hi - lo) % 2:
        move_hi, direction = stream.coins()
        t = 1
        if move_hi:
            hi += direction
        else:
            lo += direction
        if lo < 1:
            return t, t + _solo_exit(hi, L, stream)
    while True:
        if lo == hi:
            T = t + _solo_exit(lo, L, stream)
            return T, T
        xi = stream.xi()
        lo += xi
        hi -= xi
        t += 1
        lo_out = not 1 <= lo <= L
        hi_out = not 1 <= hi <= L
        if lo_out:
            return t, (t if hi_out else t + _solo_exit(hi, L, stream))
        if hi_out:
            raise StageInvariantError(f"占优耦合: 中心副本先退出 (L={L}, z={z})")


# ---------------------------------------------------------------------------
# 共享随机性的精确枚举
# ---------------------------------------------------------------------------

Outcome = Tuple[Fraction, Tuple[int, int]]


def _law_items(mass: np.ndarray) -> List[Tuple[int, Fraction]]:
    return [(int(s), exact_mass(mass[s])) for s in np.flatnonzero(mass > 0)]


def _moves(pos: int, step: int, spec: ChainSpec) -> List[Tuple[int, Fraction, Optional[str]]]:
    nxt = pos + step
    if nxt == -1:
        return [(s, p, "low") for s, p in _law_items(spec.nu0)]
    if nxt == spec.N + 1:
        return [(s, p, "high") for s, p in _law_items(spec.nuN)]
    return [(nxt, Fraction(1), None)]


def enumerate_step(spec: ChainSpec, regime: Regime, lo: int, hi: int) -> List[Outcome]:
    """
    共享随机性映射的全部结果（有理数概率）：Rigid/Ref 为 3 个增量，双硬币为 4 种硬币组合，
    再按重分布测度展开；返回 (概率, (下方副本新位置, 上方副本新位置))
    """
    quarter, half = Fraction(1, 4), Fraction(1, 2)
    out: List[Outcome] = []
    if regime is Regime.PARITY:
        for move_hi in (False, True):
            for direction in (-1, 1):
                mover = hi if move_hi else lo
                for site, p, _ in _moves(mover, direction, spec):
                    pair = (lo, site) if move_hi else (site, hi)
                    out.append((quarter * p, pair))
        return out
    if regime not in (Regime.RIGID, Regime.REF):
        raise ValueError(f"不支持枚举的耦合方式: {regime}")
    for xi, p_xi in ((-1, quarter), (0, half), (1, quarter)):
        step_hi = xi if regime is Regime.RIGID else -xi
        moves_lo = _moves(lo, xi, spec)
        moves_hi = _moves(hi, step_hi, spec)
        both_jump = moves_lo[0][2] is not None and moves_hi[0][2] is not None
        law_lo = spec.nu0 if moves_lo[0][2] == "low" else spec.nuN
        law_hi = spec.nu0 if moves_hi[0][2] == "low" else spec.nuN
        if regime is Regime.REF and both_jump and np.allclose(law_lo, law_hi):
            for site, p, _ in moves_lo:
                out.append((p_xi * p, (site, site)))
            continue
        for a, pa, _ in moves_lo:
            for b, pb, _ in moves_hi:
                out.append((p_xi * pa * pb, (a, b)))
    return out


def exact_marginals(outcomes: List[Outcome]) -> Tuple[Dict[int, Fraction], Dict[int, Fraction]]:
    """两个副本各自的一步分布"""
    first: Dict[int, Fraction] = {}
    second: Dict[int, Fraction] = {}
    for p, (a, b) in outcomes:
        first[a] = first.get(a, Fraction(0)) + p
        second[b] = second.get(b, Fraction(0)) + p
    return first, second
