#!/usr/bin/env python3
"""
带边界重分布的惰性随机游走：精确分析与耦合模拟工具

功能：
1. tv       精确计算全变差曲线并检查成对约化不等式
2. spectral 闭式谱量、正弦特征函数构造与 L₀ 特例表
3. couple   运行耦合状态机，输出存活曲线、卷积上界与速率拟合
4. verify   运行全部验收检查，输出 JSON 报告

使用方法：
python main.py <命令> --spec <参数文件> [选项]
"""

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError

from acceptance import run_acceptance
from chain_core import ChainSpec, load_spec, rho
from config import Settings, get_settings
from coupling_engine import (
    UnsupportedSpecError,
    rate_start_pair,
    stage_length_bounds,
)
from montecarlo import (
    CouplingJob,
    FitError,
    MonteCarloRunner,
    copies_bound,
    dominance_audit,
    fit_rate,
    refined_dominance_audit,
    stage_duration_audit,
    tail_window,
    witness_audit,
    write_survival_csv,
    write_trials_csv,
)
from oracle import (
    full_spectrum,
    in_spectrum,
    pair_reduction_audit,
    tv_curves,
    write_curve_csv,
    write_spectrum_csv,
)
from spectral import (
    L0_of,
    L0_terms,
    RESIDUAL_TOL,
    SYM_COPIES,
    det_copies,
    eigen_candidates,
    l0_extremes,
    lambda_of,
    min_candidate,
    sym_rate_length,
    write_candidates_csv,
)

DEFAULT_VERIFY_SEED = 20240601


class ConfigError(ValueError):
    """运行配置不完整或不合法"""


class RunConfig(BaseModel):
    """一次命令运行的完整配置：Settings < --config JSON < 命令行参数"""

    command: str
    spec: Optional[str] = None
    seed: Optional[int] = Field(None, ge=0)
    horizon: Optional[int] = Field(None, ge=0)
    trials: int = Field(10000, ge=1)
    out: str = "./results"
    workers: int = Field(1, ge=1)
    pair: Optional[Tuple[int, int]] = None
    start: Optional[Tuple[int, int]] = None
    window: Optional[Tuple[int, int]] = None
    tv_horizon: int = Field(400, ge=0)
    csv_digits: int = Field(17, ge=1, le=17)
    dkw_level: float = Field(0.99, gt=0.0, lt=1.0)
    survivor_floor: int = Field(50, ge=1)
    dominance_samples: int = Field(100000, ge=1)
    marginal_trials: int = Field(20000, ge=1)
    only: Optional[List[int]] = None

    @property
    def out_dir(self) -> Path:
        path = Path(self.out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("随机命令必须给出种子: --seed、--config 中的 seed 或环境变量 RWC_MASTER_SEED")
        return self.seed

    def require_spec(self) -> ChainSpec:
        if not self.spec:
            raise ConfigError("需要参数文件: --spec <path>")
        return load_spec(self.spec)


def build_config(args: argparse.Namespace, settings: Optional[Settings] = None) -> RunConfig:
    """合并三层配置，后者覆盖前者"""
    settings = settings or get_settings()
    values: Dict = {
        "command": args.command,
        "seed": settings.master_seed,
        "horizon": settings.horizon,
        "out": settings.output_dir,
        "workers": settings.workers,
        "tv_horizon": settings.tv_horizon,
        "csv_digits": settings.csv_digits,
        "dkw_level": settings.dkw_level,
        "survivor_floor": settings.survivor_floor,
        "dominance_samples": settings.dominance_samples,
        "marginal_trials": settings.marginal_trials,
        "trials": settings.verify_trials if args.command == "verify" else settings.n_trials,
    }
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"配置文件不存在: {path}")
        with open(path, "r", encoding="utf-8") as f:
            loaded = json.load(f)
        # 子命令只由命令行决定
        loaded.pop("command", None)
        values.update(loaded)
    for key in ("spec", "seed", "horizon", "trials", "out", "workers", "pair", "start", "window", "only"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"配置不合法: {e}") from e


def _banner(icon: str, title: str, lines: Dict) -> None:
    print(f"\n{icon}" + "=" * 48 + icon)
    print(title)
    for key, value in lines.items():
        print(f"   {key}: {value}")
    print(icon + "=" * 48 + icon)


def _write_report(cfg: RunConfig, name: str, report: Dict) -> str:
    path = cfg.out_dir / name
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, ensure_ascii=False, indent=2, default=str)
    return str(path)


# ---------------------------------------------------------------------------
# tv
# ---------------------------------------------------------------------------

def cmd_tv(cfg: RunConfig) -> int:
    """精确全变差曲线 (pair, sup, tilde) 与成对约化不等式审计"""
    spec = cfg.require_spec()
    horizon = cfg.horizon if cfg.horizon is not None else cfg.tv_horizon
    pair = cfg.pair or (0, spec.N)
    _banner("📈", "📐 开始精确计算全变差曲线...", {
        "参数": spec.describe(), "ρ": rho(spec), "时间范围": horizon, "起点对": pair,
    })

    curves = tv_curves(spec, horizon, pair=pair)
    for key, curve in curves.items():
        path = write_curve_csv(curve, cfg.out_dir / f"tv_{key}.csv", cfg.csv_digits)
        print(f"✅ {curve.label} 曲线已写出: {path}")

    audit = pair_reduction_audit(spec, curves["sup"], curves["tilde"])
    print(f"prop1: {'PASS' if audit['pass'] else 'FAIL'}")
    print(f"   系数 ⌊1+N/ρ⌋ = {audit['factor']}，最小余量 = {audit['margin']}")
    _write_report(cfg, "tv_report.json", {"spec": spec.describe(), "horizon": horizon, "audits": [audit]})
    return 0 if audit["pass"] else 1


# ---------------------------------------------------------------------------
# spectral
# ---------------------------------------------------------------------------

def cmd_spectral(cfg: RunConfig) -> int:
    """L₀、三族特征函数候选、λ(L₀) 是否属于 P 的谱，以及 L₀ 的特例表"""
    spec = cfg.require_spec()
    pm = spec.as_point_mass()
    L0 = L0_of(pm)
    lam = lambda_of(L0)
    _banner("🔬", "🧮 开始谱分析...", {"参数": spec.describe(), "L₀": L0, "λ(L₀)": f"{lam:.17g}"})

    for name, length in L0_terms(pm).items():
        print(f"   {name}: {length}")
    candidates = eigen_candidates(pm)
    residuals = []
    for c in candidates:
        residual = c.residual(pm)
        residuals.append(residual)
        print(f"   {c.family}: ρ={c.rho_wave:.12g}  ω={c.omega:.12g}  λ={c.eigenvalue:.17g}  残差={residual:.3g}")
    best = min_candidate(pm)
    print(f"✅ 最小波数: {best.family}，ρ = π/{math.pi / best.rho_wave:.6g}")

    spectrum = full_spectrum(spec)
    member = in_spectrum(lam, spectrum)
    print(f"{'✅' if member else '❌'} λ(L₀) {'属于' if member else '不属于'} P 的谱")

    extremes = l0_extremes(spec.N)
    print("📋 L₀ 特例表:")
    print(f"   J₀ = J_N 时 L₀ = N/2 = {spec.N // 2}")
    print(f"   最大 L₀ = {extremes['max']} at (J₀, J_N) = {tuple(extremes['argmax'])}，上界 N−3 = {extremes['quoted_upper']}")
    print(f"   最小 L₀ = {extremes['min']} at (J₀, J_N) = {tuple(extremes['argmin'])}，"
          f"下界 2(N−1)/3 = {extremes['quoted_lower']:.6g}，均衡值 (N−1)/3 = {extremes['equalized_lower']:.6g}")

    write_candidates_csv(pm, cfg.out_dir / "spectral_candidates.csv", cfg.csv_digits)
    write_spectrum_csv(spectrum, cfg.out_dir / "spectrum.csv", cfg.csv_digits)
    ok = all(r <= RESIDUAL_TOL for r in residuals) and member
    _write_report(cfg, "spectral_report.json", {
        "spec": spec.describe(), "L0": L0, "lambda_L0": lam, "terms": L0_terms(pm),
        "candidates": [{"family": c.family, "rho": c.rho_wave, "omega": c.omega,
                        "eigenvalue": c.eigenvalue, "residual": r} for c, r in zip(candidates, residuals)],
        "in_spectrum": member, "l0_extremes": extremes, "pass": ok,
    })
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# couple
# ---------------------------------------------------------------------------

def machines_for(spec: ChainSpec) -> List[str]:
    """点质量用确定性状态机，ν₀=ν_N 用对称状态机，两者都满足时两台都跑"""
    kinds = []
    if spec.is_point_mass():
        kinds.append("det")
    if spec.symmetric_redistribution:
        kinds.append("sym")
    if not kinds:
        raise UnsupportedSpecError(
            "ν₀ ≠ ν_N 且不是点质量：这种情形下没有已知的有效耦合（仍是公开问题），拒绝运行"
        )
    return kinds


def default_start(spec: ChainSpec, kind: str) -> Tuple[int, int]:
    if kind == "det":
        return rate_start_pair(spec.as_point_mass())
    half = spec.N // 2
    return half - rho(spec), half


def _couple_one(cfg: RunConfig, spec: ChainSpec, kind: str, seed: int) -> Dict:
    x, y = cfg.start or default_start(spec, kind)
    if kind == "det":
        L = L0_of(spec.as_point_mass())
        copies = det_copies(spec)
    else:
        L = sym_rate_length(spec)
        copies = SYM_COPIES
    horizon = cfg.horizon
    if horizon is not None and horizon < 1:
        raise ConfigError("耦合模拟的时间上限必须 ≥ 1")

    job = CouplingJob(kind, spec, x, y, horizon)
    batch = MonteCarloRunner(workers=cfg.workers).run(job, cfg.trials, seed)
    curve = batch.survival(cfg.dkw_level)
    bound = copies_bound(L, copies, batch.horizon)

    write_survival_csv(curve, cfg.out_dir / f"survival_{kind}.csv", cfg.csv_digits)
    write_trials_csv(batch, cfg.out_dir / f"trials_{kind}.csv")
    write_curve_csv(bound, cfg.out_dir / f"bound_{kind}.csv", cfg.csv_digits)

    audits = [dominance_audit(curve, bound, seed)]
    audits.append(stage_duration_audit(batch, stage_length_bounds(spec, kind), cfg.dkw_level))
    visited = batch.stage_visits
    if kind == "det" and not any(visited.get(s, 0) for s in ("S2c", "ParityFix", "Indep")):
        audits.append(refined_dominance_audit(curve, spec.as_point_mass(), seed))

    target = math.log(lambda_of(L))
    try:
        window = cfg.window or tail_window(curve, floor=cfg.survivor_floor)
        fit = fit_rate(curve, window, degree="auto")
        rate = {"slope": fit.slope, "degree": fit.degree, "window": list(fit.window),
                "residual": fit.residual, "target": target, "relative_error": fit.relative_error(target)}
    except FitError as e:
        rate = {"error": str(e), "target": target}

    print(f"📊 {kind} 耦合: 占优 {copies} 个 T({L}) 之和")
    for audit in audits:
        print(f"   {audit['check']}: {'PASS' if audit['pass'] else 'FAIL'}")
    if "slope" in rate:
        print(f"   拟合斜率 {rate['slope']:.6g}（阶数 {rate['degree']}），ln λ({L}) = {target:.6g}")
    else:
        print(f"⚠️ 速率拟合失败: {rate['error']}")
    if batch.s3_entries:
        print(f"   S3 入口: {dict(batch.s3_entries)}")
    if batch.timeouts:
        print(f"⚠️ {batch.timeouts} 次试验达到时间上限 {batch.horizon}")

    return {
        "kind": kind, "start": [x, y], "parity_fix": (y - x) % 2 == 1, "n_trials": batch.n_trials,
        "horizon": batch.horizon, "L": L, "copies": copies, "mean_tau": batch.mean_tau,
        "timeouts": batch.timeouts, "entry_stages": dict(batch.entry_counts),
        "stage_visits": dict(batch.stage_visits), "s3_entries": dict(batch.s3_entries),
        "max_stages": batch.max_stage_count,
        "audits": audits, "rate": rate,
    }


def _couple_witness(cfg: RunConfig, spec: ChainSpec, seed: int) -> Dict:
    """(N/4, 3N/4) 出发的 Ref 见证耦合：τ 与 T(N/2) 同分布，给出 d_t 的下界"""
    job = CouplingJob.witness(spec, cfg.horizon)
    batch = MonteCarloRunner(workers=cfg.workers).run(job, cfg.trials, seed)
    curve = batch.survival(cfg.dkw_level)
    write_survival_csv(curve, cfg.out_dir / "survival_witness.csv", cfg.csv_digits)
    audit = witness_audit(curve, spec.N, seed)

    print(f"📊 见证耦合 ({job.x}, {job.y}): τ 与 T({spec.N // 2}) 同分布")
    print(f"   {audit['check']}: {'PASS' if audit['pass'] else 'FAIL'}，最大偏差 {audit['worst_gap']:.4g}")
    return {
        "kind": "witness", "start": [job.x, job.y], "n_trials": batch.n_trials, "horizon": batch.horizon,
        "L": spec.N // 2, "mean_tau": batch.mean_tau, "timeouts": batch.timeouts, "audits": [audit],
    }


def cmd_couple(cfg: RunConfig) -> int:
    """运行耦合并与卷积上界比较；ν₀=ν_N=δ_J 时两台状态机都跑并比较速率"""
    seed = cfg.require_seed()
    spec = cfg.require_spec()
    kinds = machines_for(spec)
    _banner("🔗", "🎲 开始耦合模拟...", {
        "参数": spec.describe(), "状态机": ", ".join(kinds), "试验次数": cfg.trials, "主种子": seed,
    })
    if cfg.start and (cfg.start[1] - cfg.start[0]) % 2:
        print("💡 提示: 起点间距为奇数，先走一步双硬币修正奇偶")

    runs = [_couple_one(cfg, spec, kind, seed) for kind in kinds]
    if "sym" in kinds:
        runs.append(_couple_witness(cfg, spec, seed))
    ok = all(a["pass"] for run in runs for a in run["audits"])
    _write_report(cfg, "couple_report.json", {"spec": spec.describe(), "seed": seed, "runs": runs, "pass": ok})
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(cfg: RunConfig) -> int:
    """运行全部验收检查，任何一项失败都返回非零"""
    seed = cfg.seed if cfg.seed is not None else DEFAULT_VERIFY_SEED
    _banner("🧪", "🔍 开始运行验收检查...", {"主种子": seed, "试验次数": cfg.trials, "进程数": cfg.workers})
    report = run_acceptance(
        seed, cfg.only, trials=cfg.trials, dominance_samples=cfg.dominance_samples,
        marginal_trials=cfg.marginal_trials, workers=cfg.workers,
    )
    path = _write_report(cfg, "verify_report.json", report)
    print(json.dumps({"pass": report["pass"],
                      "criteria": {r["id"]: r["pass"] for r in report["criteria"]}}, ensure_ascii=False))
    print(f"📁 完整报告: {path}")
    return 0 if report["pass"] else 1


COMMANDS = {"tv": cmd_tv, "spectral": cmd_spectral, "couple": cmd_couple, "verify": cmd_verify}


def _pair(text: str) -> Tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要形如 x,y 的整数对: {text}")
    return x, y


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="带边界重分布的惰性随机游走：精确分析与耦合模拟")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="参数文件路径 (JSON)")
    common.add_argument("--seed", type=int, help="主随机种子 (u64)")
    common.add_argument("--horizon", type=int, help="时间范围 / 单次耦合的最大步数")
    common.add_argument("--trials", type=int, help="蒙特卡洛试验次数")
    common.add_argument("--out", help="输出目录")
    common.add_argument("--workers", type=int, help="并行进程数")
    common.add_argument("--config", help="JSON 运行配置文件（命令行参数优先）")

    p_tv = sub.add_parser("tv", parents=[common], help="精确全变差曲线")
    p_tv.add_argument("--pair", type=_pair, help="额外输出的起点对 x,y（默认 0,N）")
    sub.add_parser("spectral", parents=[common], help="谱分析（需要点质量参数）")
    p_couple = sub.add_parser("couple", parents=[common], help="耦合模拟")
    p_couple.add_argument("--start", type=_pair, help="起点对 x,y")
    p_couple.add_argument("--window", type=_pair, help="拟合窗口 t1,t2")
    p_verify = sub.add_parser("verify", parents=[common], help="运行验收检查")
    p_verify.add_argument("--only", type=int, nargs="+", help="只运行指定编号的检查")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        print("\n🔧" + "=" * 48 + "🔧")
        print("🔍 开始检查配置和参数...")
        print(f"   命令: {cfg.command}")
        print(f"   输出目录: {cfg.out}")
        print("🔧" + "=" * 48 + "🔧")
        code = COMMANDS[cfg.command](cfg)
        if code == 0:
            print("\n🎉" + "=" * 46 + "🎉")
            print("✅ 全部检查通过!")
            print("🎉" + "=" * 46 + "🎉")
        else:
            print("\n❌ 存在未通过的检查")
        return code
    except KeyboardInterrupt:
        print("\n⚠️" + "=" * 48 + "⚠️")
        print("⚠️ 程序被用户中断")
        print("⚠️" + "=" * 48 + "⚠️")
        return 0
    except Exception as e:
        print("\n❌" + "=" * 48 + "❌")
        print(f"❌ 程序执行出错: {str(e)}")
        print("❌" + "=" * 48 + "❌")
        return 1


if __name__ == "__main__":
    sys.exit(main())
