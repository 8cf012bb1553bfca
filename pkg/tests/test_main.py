#!/usr/bin/env python3
"""
命令行入口测试
"""

import csv
import json
import shutil
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from chain_core import ChainSpec, PointMassSpec
from config import Settings
from coupling_engine import UnsupportedSpecError
from main import (
    ConfigError,
    RunConfig,
    build_config,
    build_parser,
    default_start,
    machines_for,
    main,
)

SPECS_DIR = Path(__file__).resolve().parent.parent / "specs"


def _settings(**overrides) -> Settings:
    return Settings(_env_file=None, **overrides)


class TestMain(unittest.TestCase):
    """命令行测试类"""

    def setUp(self):
        """测试前准备"""
        self.test_dir = tempfile.mkdtemp()
        self.patcher = patch("main.get_settings", return_value=_settings())
        self.patcher.start()

    def tearDown(self):
        """测试后清理"""
        self.patcher.stop()
        shutil.rmtree(self.test_dir)

    def _write_spec(self, name: str, doc: dict) -> str:
        path = Path(self.test_dir) / name
        path.write_text(json.dumps(doc), encoding="utf-8")
        return str(path)

    def _read_csv(self, name: str):
        with open(Path(self.test_dir) / name, newline="", encoding="utf-8") as f:
            return list(csv.reader(f))

    def _report(self, name: str) -> dict:
        with open(Path(self.test_dir) / name, encoding="utf-8") as f:
            return json.load(f)

    def test_tv_command(self):
        """测试 tv 命令输出三条曲线与审计结论"""
        code = main(["tv", "--spec", str(SPECS_DIR / "det_16_5_11.json"), "--horizon", "60",
                     "--out", self.test_dir])
        self.assertEqual(code, 0)
        for key in ("sup", "tilde", "pair"):
            rows = self._read_csv(f"tv_{key}.csv")
            self.assertEqual(rows[0], ["t", "value"])
            self.assertEqual(len(rows), 62)
        report = self._report("tv_report.json")
        self.assertTrue(report["audits"][0]["pass"])

    def test_tv_verdict_line(self):
        with patch("builtins.print") as mock_print:
            code = main(["tv", "--spec", str(SPECS_DIR / "det_16_5_11.json"), "--horizon", "40",
                         "--out", self.test_dir])
        self.assertEqual(code, 0)
        printed = [str(c.args[0]) for c in mock_print.call_args_list if c.args]
        self.assertIn("prop1: PASS", printed)

    def test_tv_pair_out_of_range(self):
        """--pair 的坐标必须在 {0,…,N} 中，不能按负下标绕回"""
        for pair in ("-1,3", "3,17"):
            code = main(["tv", "--spec", str(SPECS_DIR / "det_16_5_11.json"), "--horizon", "10",
                         f"--pair={pair}", "--out", self.test_dir])
            self.assertEqual(code, 1)
            self.assertFalse((Path(self.test_dir) / "tv_pair.csv").exists())

    def test_tv_horizon_zero(self):
        code = main(["tv", "--spec", str(SPECS_DIR / "det_16_5_11.json"), "--horizon", "0",
                     "--out", self.test_dir])
        self.assertEqual(code, 0)
        self.assertEqual(len(self._read_csv("tv_sup.csv")), 2)

    def test_invalid_spec_reports_parity(self):
        """偶数支撑的参数文件：非零退出并报告 parity"""
        spec = self._write_spec("bad.json", {"N": 16, "nu0": [[4, 1.0]], "nuN": [[11, 1.0]]})
        with patch("builtins.print") as mock_print:
            code = main(["tv", "--spec", spec, "--out", self.test_dir])
        self.assertEqual(code, 1)
        printed = " ".join(str(c.args[0]) for c in mock_print.call_args_list if c.args)
        self.assertIn("parity", printed)

    def test_spectral_command(self):
        code = main(["spectral", "--spec", str(SPECS_DIR / "det_16_3_13.json"), "--out", self.test_dir])
        self.assertEqual(code, 0)
        report = self._report("spectral_report.json")
        self.assertEqual(report["L0"], 13)
        self.assertTrue(report["in_spectrum"])
        self.assertEqual(len(self._read_csv("spectral_candidates.csv")), 4)
        self.assertEqual(len(self._read_csv("spectrum.csv")), 18)

    def test_spectral_equal_sites(self):
        """J₀ = J_N 时 L₀ = N/2"""
        spec = self._write_spec("eq.json", {"N": 16, "J0": 7, "JN": 7})
        self.assertEqual(main(["spectral", "--spec", spec, "--out", self.test_dir]), 0)
        self.assertEqual(self._report("spectral_report.json")["L0"], 8)

    def test_spectral_requires_point_mass(self):
        code = main(["spectral", "--spec", str(SPECS_DIR / "sym_16_unif57.json"), "--out", self.test_dir])
        self.assertEqual(code, 1)

    def test_couple_requires_seed(self):
        code = main(["couple", "--spec", str(SPECS_DIR / "det_16_5_11.json"), "--out", self.test_dir])
        self.assertEqual(code, 1)
        self.assertFalse((Path(self.test_dir) / "couple_report.json").exists())

    def test_couple_det(self):
        """测试确定性重分布的耦合模拟"""
        code = main(["couple", "--spec", str(SPECS_DIR / "det_16_5_11.json"), "--seed", "42",
                     "--trials", "300", "--horizon", "3000", "--out", self.test_dir])
        self.assertEqual(code, 0)
        report = self._report("couple_report.json")
        self.assertEqual([run["kind"] for run in report["runs"]], ["det"])
        run = report["runs"][0]
        self.assertEqual(run["start"], [7, 9])
        self.assertEqual(run["n_trials"], 300)
        self.assertEqual(self._read_csv("trials_det.csv")[0], ["seed", "tau", "stage_path"])
        self.assertEqual(len(self._read_csv("survival_det.csv")), 3002)

    def test_couple_point_mass_symmetric_runs_both(self):
        spec = self._write_spec("delta5.json", {"N": 16, "J0": 5, "JN": 5})
        main(["couple", "--spec", spec, "--seed", "1", "--trials", "200", "--horizon", "3000",
              "--out", self.test_dir])
        report = self._report("couple_report.json")
        self.assertEqual([run["kind"] for run in report["runs"]], ["det", "sym", "witness"])
        self.assertEqual({run["L"] for run in report["runs"]}, {8})

    def test_couple_symmetric_runs_witness(self):
        """ν₀=ν_N 时额外运行 (N/4, 3N/4) 的见证耦合"""
        code = main(["couple", "--spec", str(SPECS_DIR / "sym_16_unif57.json"), "--seed", "5",
                     "--trials", "400", "--horizon", "2000", "--out", self.test_dir])
        report = self._report("couple_report.json")
        witness = report["runs"][-1]
        self.assertEqual(witness["kind"], "witness")
        self.assertEqual(witness["start"], [4, 12])
        self.assertEqual(witness["L"], 8)
        self.assertEqual(witness["audits"][0]["check"], "witness")
        self.assertEqual(len(self._read_csv("survival_witness.csv")), 2002)
        self.assertIn(code, (0, 1))

    def test_couple_odd_start(self):
        main(["couple", "--spec", str(SPECS_DIR / "sym_16_unif57.json"), "--seed", "3",
              "--trials", "100", "--horizon", "2000", "--start", "5,8", "--out", self.test_dir])
        run = self._report("couple_report.json")["runs"][0]
        self.assertTrue(run["parity_fix"])
        self.assertEqual(run["stage_visits"]["ParityFix"], 100)

    def test_couple_refuses_asymmetric_random(self):
        spec = self._write_spec("asym.json", {"N": 16, "nu0": [[5, 0.5], [7, 0.5]], "nuN": [[9, 1.0]]})
        with patch("builtins.print") as mock_print:
            code = main(["couple", "--spec", spec, "--seed", "1", "--out", self.test_dir])
        self.assertEqual(code, 1)
        printed = " ".join(str(c.args[0]) for c in mock_print.call_args_list if c.args)
        self.assertIn("拒绝运行", printed)

    def test_couple_deterministic_across_workers(self):
        """同一种子、不同进程数：CSV 逐字节相同"""
        blobs = []
        for workers in ("1", "2"):
            out = Path(self.test_dir) / f"w{workers}"
            main(["couple", "--spec", str(SPECS_DIR / "det_16_3_13.json"), "--seed", "9",
                  "--trials", "150", "--horizon", "4000", "--workers", workers, "--out", str(out)])
            blobs.append((out / "trials_det.csv").read_bytes() + (out / "survival_det.csv").read_bytes())
        self.assertEqual(blobs[0], blobs[1])

    def test_verify_only(self):
        code = main(["verify", "--only", "1", "--out", self.test_dir])
        self.assertEqual(code, 0)
        report = self._report("verify_report.json")
        self.assertEqual([c["id"] for c in report["criteria"]], [1])
        self.assertEqual(report["seed"], 20240601)


class TestConfigLayers(unittest.TestCase):
    """配置合并测试"""

    def test_flags_override_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps({"seed": 5, "trials": 77, "workers": 3}), encoding="utf-8")
            args = build_parser().parse_args(["couple", "--config", str(path), "--trials", "12"])
            cfg = build_config(args, _settings(master_seed=1, n_trials=999))
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.trials, 12)
        self.assertEqual(cfg.workers, 3)

    def test_config_file_cannot_switch_command(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps({"command": "verify", "trials": 40}), encoding="utf-8")
            args = build_parser().parse_args(["tv", "--config", str(path)])
            cfg = build_config(args, _settings())
        self.assertEqual(cfg.command, "tv")
        self.assertEqual(cfg.trials, 40)

    def test_settings_are_the_base_layer(self):
        args = build_parser().parse_args(["couple"])
        cfg = build_config(args, _settings(master_seed=8, n_trials=33, output_dir="/tmp/rwc"))
        self.assertEqual((cfg.seed, cfg.trials, cfg.out), (8, 33, "/tmp/rwc"))

    def test_verify_uses_verify_trials(self):
        args = build_parser().parse_args(["verify"])
        cfg = build_config(args, _settings(verify_trials=1234))
        self.assertEqual(cfg.trials, 1234)

    def test_invalid_values(self):
        args = build_parser().parse_args(["couple", "--trials", "0"])
        with self.assertRaises(ConfigError):
            build_config(args, _settings())

    def test_missing_config_file(self):
        args = build_parser().parse_args(["tv", "--config", "/nonexistent/run.json"])
        with self.assertRaises(FileNotFoundError):
            build_config(args, _settings())

    def test_bad_pair(self):
        with self.assertRaises(SystemExit):
            build_parser().parse_args(["tv", "--pair", "3"])

    def test_require_seed_and_spec(self):
        cfg = RunConfig(command="couple")
        with self.assertRaises(ConfigError):
            cfg.require_seed()
        with self.assertRaises(ConfigError):
            cfg.require_spec()


class TestDispatch(unittest.TestCase):
    def test_machines_for(self):
        self.assertEqual(machines_for(PointMassSpec(16, 5, 11).to_chain_spec()), ["det"])
        self.assertEqual(machines_for(ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {5: 0.5, 7: 0.5})), ["sym"])
        self.assertEqual(machines_for(PointMassSpec(16, 5, 5).to_chain_spec()), ["det", "sym"])
        with self.assertRaises(UnsupportedSpecError):
            machines_for(ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {9: 1.0}))

    def test_default_start(self):
        sym = ChainSpec.from_sparse(16, {5: 0.5, 7: 0.5}, {5: 0.5, 7: 0.5})
        self.assertEqual(default_start(sym, "sym"), (4, 8))
        self.assertEqual(default_start(PointMassSpec(16, 5, 11).to_chain_spec(), "det"), (7, 9))


if __name__ == "__main__":
    unittest.main()
