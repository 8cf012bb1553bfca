"""
验收套件：verify 命令运行的 11 项检查

每一项返回 {"id", "name", "pass", ...}，任何一项失败时整体失败。
全部使用桌面规模的内置参数（N ∈ {16, 24}）。
"""

import math
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from chain_core import ChainSpec, PointMassSpec, rho, transition_row_exact
from coupling_engine import (
    Regime,
    StageInvariantError,
    StageLabel,
    as_stream,
    dominance_sampler,
    enumerate_step,
    exact_marginals,
    rate_start_pair,
    stage_entry_pairs,
    stage_length_bounds,
    witness_pair,
)
from montecarlo import (
    CouplingJob,
    MonteCarloRunner,
    copies_bound,
    dominance_audit,
    fit_rate,
    marginal_audit,
    stage_duration_audit,
    tail_window,
    witness_audit,
    write_survival_csv,
    write_trials_csv,
)
from oracle import (
    center_dominance,
    center_exit_tail,
    exit_tail_curves,
    full_spectrum,
    half_indicator_gap,
    in_spectrum,
    killed_spectrum,
    pair_curve,
    pair_reduction_audit,
    tv_curves,
)
from spectral import (
    L0_of,
    SYM_COPIES,
    det_copies,
    exit_tail_formula,
    lambda_of,
    lower_bound_values,
)

TV_HORIZON = 400
RATE_WINDOW = (300, 400)
TAIL_C_MAX = 100.0

PAIR_REDUCTION_SPECS = [
    ChainSpec.from_sparse(16, {5: 1.0}, {11: 1.0}),
    ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {9: 0.5, 11: 0.5}),
    ChainSpec.from_sparse(24, {5: 1.0}, {19: 1.0}),
    ChainSpec.from_sparse(24, {5: 1 / 3, 7: 1 / 3, 9: 1 / 3}, {15: 1.0}),
]

POINT_MASS_SPECS = [
    PointMassSpec(16, 3, 13),
    PointMassSpec(16, 5, 11),
    PointMassSpec(16, 13, 3),
]

SYM_LAWS = {
    "δ5": {5: 1.0},
    "unif{5,7}": {5: 0.5, 7: 0.5},
    "unif{3,5,7}": {3: 1 / 3, 5: 1 / 3, 7: 1 / 3},
}

# 关于 N/2 镜像对称：跨越 N/2 的起点走镜像技巧
MIRROR_LAW = {5: 0.5, 11: 0.5}


def sym_spec(law: Dict[int, float], N: int = 16) -> ChainSpec:
    return ChainSpec.from_sparse(N, law, law)


def sym_starts(spec: ChainSpec) -> List[tuple]:
    """对称状态机的几类起点：下半区、以 N/2 为端点、跨越 N/2"""
    half, r = spec.N // 2, rho(spec)
    return [(0, r), (half - r, half), (half - r // 2, half + r // 2)]


class AcceptanceSuite:
    """
    运行全部验收检查

    Args:
        master_seed: 主随机种子
        trials: 每台状态机的蒙特卡洛试验次数
        dominance_samples: 占优耦合的成对抽样次数
        marginal_trials: 边际审计中每条轨迹的试验次数
        workers: 进程数
        lambda_fn: 替换 λ(L) 的闭式公式，只影响第 1 项（用于变异自测）
    """

    def __init__(self, master_seed: int, trials: int = 100000, dominance_samples: int = 100000,
                 marginal_trials: int = 20000, workers: int = 1,
                 lambda_fn: Optional[Callable[[int], float]] = None, verbose: bool = True):
        self.master_seed = master_seed
        self.trials = trials
        self.dominance_samples = dominance_samples
        self.marginal_trials = marginal_trials
        self.workers = workers
        self.lambda_fn = lambda_fn or lambda_of
        self.verbose = verbose
        self.runner = MonteCarloRunner(workers=workers, verbose=False)

    @property
    def criteria(self) -> Dict[int, Callable[[], Dict]]:
        return {
            1: self.closed_form_lambda,
            2: self.exit_tail_formula,
            3: self.exit_time_dominance,
            4: self.pairwise_reduction,
            5: self.lower_bound,
            6: self.rate_sandwich,
            7: self.det_domination,
            8: self.sym_domination,
            9: self.marginal_correctness,
            10: self.assertion_suite,
            11: self.determinism,
        }

    def run(self, only: Optional[Sequence[int]] = None) -> Dict:
        results = []
        for cid, check in self.criteria.items():
            if only and cid not in only:
                continue
            if self.verbose:
                print(f"🔍 [{cid:2d}] {check.__doc__.strip().splitlines()[0]}")
            try:
                result = check()
            except (StageInvariantError, ValueError, ArithmeticError) as e:
                result = {"name": check.__name__, "pass": False, "error": f"{type(e).__name__}: {e}"}
            result["id"] = cid
            results.append(result)
            if self.verbose:
                print(f"   {'✅ PASS' if result['pass'] else '❌ FAIL'}")
        return {
            "pass": all(r["pass"] for r in results),
            "seed": self.master_seed,
            "criteria": results,
        }

    def _seed(self, offset: int) -> int:
        # 各项检查使用互不相同的主种子
        return int(np.random.SeedSequence(entropy=self.master_seed, spawn_key=(1_000_000 + offset,))
                   .generate_state(1, np.uint64)[0])

    # --- 1 ----------------------------------------------------------------

    def closed_form_lambda(self) -> Dict:
        """λ(L) 闭式与被杀死游走的首特征值一致 (L = 1…64)"""
        errors = [abs(self.lambda_fn(L) - killed_spectrum(L).top) for L in range(1, 65)]
        worst = int(np.argmax(errors)) + 1
        return {"name": "closed_form_lambda", "pass": max(errors) <= 1e-10,
                "max_error": max(errors), "worst_L": worst}

    # --- 2 ----------------------------------------------------------------

    def exit_tail_formula(self) -> Dict:
        """退出时间尾概率主项的误差 ≤ C·λ₂^t，C ≤ 100"""
        details = {}
        for L in (2, 4, 8, 16):
            horizon = 8 * L * L
            exact = exit_tail_curves(L, horizon)
            t = np.arange(horizon + 1)
            formula = np.stack([exit_tail_formula(L, z, t) for z in range(1, L + 1)], axis=1)
            diff = np.abs(exact - formula).max(axis=1)
            lam2 = killed_spectrum(L).lambda2
            scale = np.power(lam2, t)
            fit_zone = scale >= 1e-8
            C = float((diff[fit_zone] / scale[fit_zone]).max())
            tail_ok = bool(np.all(diff <= TAIL_C_MAX * scale + 1e-12))
            details[str(L)] = {"C": C, "lambda2": lam2, "pass": C <= TAIL_C_MAX and tail_ok}
        return {"name": "exit_tail_formula", "pass": all(d["pass"] for d in details.values()),
                "lengths": details}

    # --- 3 ----------------------------------------------------------------

    def exit_time_dominance(self) -> Dict:
        """从中心出发的退出时间随机占优其它起点（精确 + 成对抽样）"""
        worst = max(center_dominance(L, 8 * L * L) for L in range(1, 33))
        stream = as_stream(np.random.default_rng(self._seed(3)))
        pairs = [(L, z) for L in (2, 3, 5, 8) for z in range(1, L + 1)]
        violations = 0
        for i in range(self.dominance_samples):
            L, z = pairs[i % len(pairs)]
            T, T_center = dominance_sampler(L, z, stream)
            violations += T > T_center
        return {"name": "exit_time_dominance", "pass": worst <= 1e-12 and violations == 0,
                "exact_max_violation": worst, "samples": self.dominance_samples,
                "sample_violations": int(violations)}

    # --- 4 ----------------------------------------------------------------

    def pairwise_reduction(self) -> Dict:
        """d_t ≤ ⌊1+N/ρ⌋(d̃_t + d̃_{t−1})，t ∈ [1, 400]"""
        audits = []
        for spec in PAIR_REDUCTION_SPECS:
            curves = tv_curves(spec, TV_HORIZON)
            audit = pair_reduction_audit(spec, curves["sup"], curves["tilde"])
            audit["spec"] = spec.describe()
            audits.append(audit)
        return {"name": "pairwise_reduction", "pass": all(a["pass"] for a in audits), "specs": audits}

    # --- 5 ----------------------------------------------------------------

    def lower_bound(self) -> Dict:
        """d_t ≥ ½(1−2π/N)λ(L₀)^t，且 λ(L₀) 是 P 的特征值"""
        details = []
        for pm in POINT_MASS_SPECS:
            spec = pm.to_chain_spec()
            sup = tv_curves(spec, TV_HORIZON)["sup"].values
            slack = sup - lower_bound_values(pm, TV_HORIZON)
            member = in_spectrum(lambda_of(L0_of(pm)), full_spectrum(spec))
            details.append({"J0": pm.J0, "JN": pm.JN, "L0": L0_of(pm),
                            "margin": float(slack.min()), "eigenvalue": member,
                            "pass": bool(slack.min() >= -1e-12) and member})
        return {"name": "lower_bound", "pass": all(d["pass"] for d in details), "specs": details}

    # --- 6 ----------------------------------------------------------------

    def rate_sandwich(self) -> Dict:
        """精确 d_t 与 P(τ>t) 的对数斜率都匹配 ln λ(L₀)"""
        details = []
        for k, pm in enumerate(POINT_MASS_SPECS):
            spec = pm.to_chain_spec()
            target = math.log(lambda_of(L0_of(pm)))
            exact_fit = fit_rate(tv_curves(spec, TV_HORIZON)["sup"], RATE_WINDOW)
            x, y = rate_start_pair(pm)
            batch = self.runner.run(CouplingJob("det", spec, x, y), self.trials, self._seed(60 + k))
            curve = batch.survival()
            mc_fit = fit_rate(curve, tail_window(curve), degree="auto")
            exact_err = exact_fit.relative_error(target)
            mc_err = mc_fit.relative_error(target)
            details.append({"J0": pm.J0, "JN": pm.JN, "target": target,
                            "exact_slope": exact_fit.slope, "exact_error": exact_err,
                            "mc_slope": mc_fit.slope, "mc_degree": mc_fit.degree,
                            "mc_window": list(mc_fit.window), "mc_error": mc_err,
                            "start": [x, y], "pass": exact_err <= 0.02 and mc_err <= 0.05})
        return {"name": "rate_sandwich", "pass": all(d["pass"] for d in details), "specs": details}

    # --- 7 ----------------------------------------------------------------

    def det_domination(self) -> Dict:
        """经验 P(τ>t) ≤ ⌊6+N/(ρ+1)⌋ 个 T(L₀) 之和的尾概率 + DKW"""
        details = []
        per_start = max(1000, self.trials // 4)
        for k, pm in enumerate(POINT_MASS_SPECS):
            spec = pm.to_chain_spec()
            L0, copies = L0_of(pm), det_copies(pm)
            horizon = 20 * L0 * L0
            bound = copies_bound(L0, copies, horizon)
            entries = stage_entry_pairs(pm, 2)
            for j, stage in enumerate((StageLabel.S1, StageLabel.S2a, StageLabel.S2b, StageLabel.S2c)):
                if stage not in entries:
                    continue
                x, y = entries[stage][len(entries[stage]) // 2]
                seed = self._seed(700 + 10 * k + j)
                batch = self.runner.run(CouplingJob("det", spec, x, y), per_start, seed)
                audit = dominance_audit(batch.survival(horizon=horizon), bound, seed)
                audit.update({"J0": pm.J0, "JN": pm.JN, "stage": stage.value, "start": [x, y],
                              "copies": copies, "L0": L0})
                details.append(audit)
        return {"name": "det_domination", "pass": all(d["pass"] for d in details), "runs": details}

    # --- 8 ----------------------------------------------------------------

    def sym_domination(self) -> Dict:
        """
        ν₀=ν_N：5 个 T(N/2) 的占优、d_t ≥ Q_center(T(N/2)>t)、速率与 ν 无关，
        以及 (N/4, 3N/4) 见证耦合：τ 与 T(N/2) 同分布，精确的指示函数差恰为 Q_center
        """
        details = []
        per_start = max(1000, self.trials // 3)
        for k, (name, law) in enumerate(SYM_LAWS.items()):
            spec = sym_spec(law)
            half = spec.N // 2
            horizon = 20 * half * half
            bound = copies_bound(half, SYM_COPIES, horizon)
            audits = []
            for j, (x, y) in enumerate(sym_starts(spec)):
                seed = self._seed(800 + 10 * k + j)
                batch = self.runner.run(CouplingJob("sym", spec, x, y), per_start, seed)
                audit = dominance_audit(batch.survival(horizon=horizon), bound, seed)
                audit["start"] = [x, y]
                audits.append(audit)
            sup = tv_curves(spec, TV_HORIZON)["sup"]
            exit_tail = center_exit_tail(half, TV_HORIZON)
            lower_slack = sup.values - exit_tail
            target = math.log(lambda_of(half))
            fit = fit_rate(sup, RATE_WINDOW)

            seed = self._seed(850 + k)
            witness_batch = self.runner.run(CouplingJob.witness(spec), per_start, seed)
            witness = witness_audit(witness_batch.survival(horizon=horizon), spec.N, seed)
            gap = half_indicator_gap(spec, TV_HORIZON)
            witness["exact_error"] = float(np.abs(gap - exit_tail).max())
            x, y = witness_pair(spec)
            witness["pair_margin"] = float((pair_curve(spec, x, y, TV_HORIZON).values - gap).min())
            witness_ok = (witness["pass"] and witness["exact_error"] <= 1e-12
                          and witness["pair_margin"] >= -1e-12)

            ok = (all(a["pass"] for a in audits) and lower_slack.min() >= -1e-12
                  and fit.relative_error(target) <= 0.02 and witness_ok)
            details.append({"law": name, "dominance": audits, "lower_margin": float(lower_slack.min()),
                            "slope": fit.slope, "target": target, "witness": witness,
                            "rate_error": fit.relative_error(target), "pass": bool(ok)})
        return {"name": "sym_domination", "pass": all(d["pass"] for d in details), "laws": details}

    # --- 9 ----------------------------------------------------------------

    def marginal_correctness(self) -> Dict:
        """共享随机性映射的边际：有理数精确枚举 + 实际轨迹在固定时刻的边际分布 (DKW)"""
        specs = [pm.to_chain_spec() for pm in POINT_MASS_SPECS] + [sym_spec(l) for l in SYM_LAWS.values()]
        mismatches = []
        checked = 0
        for spec in specs:
            N = spec.N
            rows = [transition_row_exact(spec, x) for x in range(N + 1)]
            for lo in range(N + 1):
                for hi in range(lo + 1, N + 1):
                    regimes = [Regime.RIGID]
                    regimes.append(Regime.REF if (hi - lo) % 2 == 0 else Regime.PARITY)
                    for regime in regimes:
                        first, second = exact_marginals(enumerate_step(spec, regime, lo, hi))
                        checked += 1
                        if _strip(first) != _strip(rows[lo]) or _strip(second) != _strip(rows[hi]):
                            mismatches.append([spec.describe(), regime.value, lo, hi])

        det_pm = POINT_MASS_SPECS[1]
        x, y = stage_entry_pairs(det_pm, 2)[StageLabel.S2a][0]
        spec = sym_spec(SYM_LAWS["unif{5,7}"])
        mirror_spec = sym_spec(MIRROR_LAW)
        jobs = {
            "det": CouplingJob("det", det_pm.to_chain_spec(), x, y - 1),
            "sym": CouplingJob("sym", spec, *sym_starts(spec)[0]),
            "sym_mirror": CouplingJob("sym", mirror_spec, *sym_starts(mirror_spec)[2]),
            "witness": CouplingJob.witness(spec),
        }
        audits = {name: marginal_audit(job, self.marginal_trials, self._seed(90 + i))
                  for i, (name, job) in enumerate(jobs.items())}
        return {"name": "marginal_correctness",
                "pass": not mismatches and all(a["pass"] for a in audits.values()),
                "exact_checked": checked, "exact_mismatches": mismatches[:10],
                "realised": audits}

    # --- 10 ---------------------------------------------------------------

    def assertion_suite(self) -> Dict:
        """两台状态机各跑满试验次数，没有任何阶段断言失败"""
        runs = []
        det_pm = POINT_MASS_SPECS[1]
        det_spec = det_pm.to_chain_spec()
        starts = [pairs[0] for pairs in stage_entry_pairs(det_pm, 2).values()]
        starts.append((starts[0][0], starts[0][0] + 1))
        sym = sym_spec(SYM_LAWS["unif{3,5,7}"])
        sym_pairs = sym_starts(sym) + [(sym.N // 2 - 1, sym.N // 2)]
        jobs = [CouplingJob("det", det_spec, x, y) for x, y in starts]
        jobs += [CouplingJob("sym", sym, x, y) for x, y in sym_pairs]
        failures = 0
        for i, job in enumerate(jobs):
            n = max(1, self.trials // (len(starts) if job.kind == "det" else len(sym_pairs)))
            entry = {"kind": job.kind, "start": [job.x, job.y], "n_trials": n}
            try:
                batch = self.runner.run(job, n, self._seed(100 + i))
                durations = stage_duration_audit(batch, stage_length_bounds(job.spec, job.kind))
                if not durations["pass"]:
                    failures += 1
                entry.update({"timeouts": batch.timeouts, "stage_visits": dict(batch.stage_visits),
                              "s3_entries": dict(batch.s3_entries), "durations": durations["stages"],
                              "pass": durations["pass"]})
            except StageInvariantError as e:
                failures += 1
                entry.update({"pass": False, "error": str(e)})
            runs.append(entry)
        return {"name": "assertion_suite", "pass": failures == 0, "failures": failures, "runs": runs}

    # --- 11 ---------------------------------------------------------------

    def determinism(self) -> Dict:
        """同一主种子、不同进程数得到逐字节相同的 CSV"""
        pm = POINT_MASS_SPECS[0]
        x, y = rate_start_pair(pm)
        job = CouplingJob("det", pm.to_chain_spec(), x, y)
        n = min(self.trials, 4000)
        seed = self._seed(11)
        blobs = []
        with tempfile.TemporaryDirectory() as tmp:
            for workers in (1, 2):
                batch = MonteCarloRunner(workers=workers, chunk_size=500, verbose=False).run(job, n, seed)
                trials_csv = Path(write_trials_csv(batch, Path(tmp) / f"trials_{workers}.csv"))
                survival_csv = Path(write_survival_csv(batch.survival(), Path(tmp) / f"survival_{workers}.csv"))
                blobs.append(trials_csv.read_bytes() + survival_csv.read_bytes())
        return {"name": "determinism", "pass": blobs[0] == blobs[1], "n_trials": n, "seed": seed}


def _strip(row: Dict) -> Dict:
    return {k: v for k, v in row.items() if v != 0}


def run_acceptance(master_seed: int, only: Optional[Sequence[int]] = None, **kwargs) -> Dict:
    """运行验收套件并返回可序列化为 JSON 的报告"""
    return AcceptanceSuite(master_seed, **kwargs).run(only)
