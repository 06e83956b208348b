import json
import shutil
import subprocess

import numpy as np
import pytest

from llrbounds import __version__
from llrbounds.cli import EXIT_EMPTY, EXIT_OK, EXIT_USAGE, main
from llrbounds.model import ConstraintSet, ProblemInstance, instance_to_dict
from llrbounds.stats import chi2_quantile


def run(capsys, *argv):
    try:
        code = main(list(argv))
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


class TestInterval:
    def test_boundary_example(self, capsys):
        code, out, _ = run(capsys, "interval", "--preset", "oneD", "--y", "-1", "--method", "osb",
                           "--alpha", "0.05")
        assert code == EXIT_OK
        d = json.loads(out)
        assert d["lower"] == 0.0
        np.testing.assert_allclose(d["upper"], -1 + np.sqrt(chi2_quantile(0.95, 1) + 1), atol=1e-7)
        assert d["version"] == __version__ and d["seed"] == 0

    def test_ssb(self, capsys):
        code, out, _ = run(capsys, "interval", "--preset", "oneD", "--y", "2", "--method", "ssb",
                           "--alpha", "0.05")
        d = json.loads(out)
        np.testing.assert_allclose([d["lower"], d["upper"]], [0.04004, 3.95996], atol=1e-5)

    def test_empty_exit_code(self, capsys):
        code, out, _ = run(capsys, "interval", "--preset", "twoD", "--y", "-5,-5", "--method", "ssb",
                           "--alpha", "0.05")
        assert code == EXIT_EMPTY
        assert json.loads(out)["empty"] is True

    def test_missing_alpha(self, capsys):
        code, _, err = run(capsys, "interval", "--preset", "oneD", "--y", "1")
        assert code == EXIT_USAGE
        assert "--alpha" in err

    def test_needs_model(self, capsys):
        code, _, err = run(capsys, "interval", "--y", "1", "--alpha", "0.05")
        assert code == EXIT_USAGE
        assert "model" in err

    def test_wrong_length_y(self, capsys):
        code, _, _ = run(capsys, "interval", "--preset", "twoD", "--y", "1", "--alpha", "0.05")
        assert code == EXIT_USAGE

    def test_model_file(self, capsys, tmp_path):
        inst = ProblemInstance(np.eye(2), [1.0, 1.0], ConstraintSet.unconstrained(2))
        path = tmp_path / "m.json"
        path.write_text(json.dumps(instance_to_dict(inst)))
        code, out, _ = run(capsys, "interval", "--model", str(path), "--y", "0,0",
                           "--method", "closed-form", "--alpha", "0.05")
        assert code == EXIT_OK
        d = json.loads(out)
        np.testing.assert_allclose(d["upper"], 1.959963984540054 * np.sqrt(2), rtol=1e-12)

    def test_malformed_model(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"h": [1.0], "constraints": {"kind": "nonneg"}}))
        code, _, err = run(capsys, "interval", "--model", str(path), "--y", "0", "--alpha", "0.05")
        assert code == EXIT_USAGE
        assert "'K'" in err

    def test_mq_with_model_needs_rule(self, capsys, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps(instance_to_dict(ProblemInstance(np.eye(1), [1.0]))))
        code, _, err = run(capsys, "interval", "--model", str(path), "--y", "0", "--method", "mq",
                           "--alpha", "0.05")
        assert code == EXIT_USAGE
        assert "--rule" in err


class TestRuleRoundTrip:
    def test_maxq_rule_feeds_interval(self, capsys, tmp_path):
        rule_path = tmp_path / "rule.json"
        code, _, _ = run(capsys, "maxq", "--preset", "box", "--level", "0.95", "--budget", "30",
                         "--n-per-eval", "2000", "--seed", "4", "--out", str(rule_path))
        assert code == EXIT_OK
        saved = json.loads(rule_path.read_text())
        assert saved["rule"]["kind"] == "scalar"
        code, out, _ = run(capsys, "interval", "--preset", "box", "--y", "0.2,0.1", "--method", "mq",
                           "--alpha", "0.05", "--rule", str(rule_path))
        assert code == EXIT_OK
        d = json.loads(out)
        assert d["q_used"] == saved["rule"]["q"]
        assert d["rule"]["seed"] == 4

    def test_level_mismatch(self, capsys, tmp_path):
        rule_path = tmp_path / "rule.json"
        rule_path.write_text(json.dumps({"kind": "scalar", "level": 0.9, "q": 2.0}))
        code, _, err = run(capsys, "interval", "--preset", "box", "--y", "0,0", "--method", "mq",
                           "--alpha", "0.05", "--rule", str(rule_path))
        assert code == EXIT_USAGE
        assert "level" in err


class TestCoverageCommand:
    ARGS = ("coverage", "--preset", "oneD", "--alpha", "0.05", "--reps", "20000", "--seed", "1",
            "--methods", "ssb,osb", "--format", "csv")

    def test_byte_identical(self, capsys):
        _, a, _ = run(capsys, *self.ARGS)
        _, b, _ = run(capsys, *self.ARGS, "--threads", "3")
        assert a == b
        lines = a.splitlines()
        assert lines[0] == f"# version={__version__}"
        assert lines[1] == "# seed=1"
        assert lines[3].startswith("truth,method,alpha,coverage")

    def test_ci_seed_env(self, capsys, monkeypatch):
        monkeypatch.setenv("CI_SEED", "1")
        args = [a for a in self.ARGS if a not in ("--seed",)]
        args.remove("1")
        _, env_out, _ = run(capsys, *args)
        monkeypatch.delenv("CI_SEED")
        _, flag_out, _ = run(capsys, *self.ARGS)
        assert env_out == flag_out

    def test_bad_ci_seed(self, capsys, monkeypatch):
        monkeypatch.setenv("CI_SEED", "abc")
        code, _, err = run(capsys, "interval", "--preset", "oneD", "--y", "1", "--alpha", "0.05")
        assert code == EXIT_USAGE
        assert "CI_SEED" in err

    def test_model_rejected(self, capsys, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps(instance_to_dict(ProblemInstance(np.eye(1), [1.0]))))
        code, _, _ = run(capsys, "coverage", "--model", str(path), "--reps", "10")
        assert code == EXIT_USAGE


class TestOtherCommands:
    def test_dominance(self, capsys):
        code, out, _ = run(capsys, "dominance", "--preset", "twoD", "--xstar", "0,0", "--n", "20000")
        assert code == EXIT_OK
        assert json.loads(out)["verdict"] in ("Dominated", "NotDominated")

    def test_dominance_outside_set(self, capsys):
        code, _, _ = run(capsys, "dominance", "--preset", "twoD", "--xstar", "-1,0", "--n", "20000")
        assert code == EXIT_USAGE

    def test_counterexample_mean(self, capsys):
        code, out, _ = run(capsys, "counterexample", "--check", "mean", "--n", "100000", "--seed", "7")
        assert code == EXIT_OK
        d = json.loads(out)["report"]
        assert d["slice_ok"] and d["orthant_ok"] and d["refuted"]

    def test_coupling(self, capsys):
        code, out, _ = run(capsys, "counterexample", "--check", "coupling", "--n", "10000")
        assert json.loads(out)["report"]["holds"] is True

    def test_divergence_csv(self, capsys):
        code, out, _ = run(capsys, "counterexample", "--check", "divergence", "--n", "5000",
                           "--p-list", "3,6", "--format", "csv")
        assert code == EXIT_OK
        assert "p,mean,se" in out.splitlines()

    def test_quantile_curve(self, capsys):
        code, out, _ = run(capsys, "quantile-curve", "--t-grid", "0.01,1", "--n", "5000")
        assert code == EXIT_OK
        assert len(json.loads(out)["t"]) == 2

    def test_per_mu_maxq(self, capsys):
        code, out, _ = run(capsys, "maxq", "--preset", "box", "--per-mu", "--mu-grid", "-0.5,0,0.5",
                           "--budget", "6", "--n-per-eval", "1000")
        assert code == EXIT_OK
        assert json.loads(out)["rule"]["kind"] == "per_mu"

    def test_unknown_subcommand(self, capsys):
        code, _, _ = run(capsys, "frobnicate")
        assert code == EXIT_USAGE


@pytest.mark.skipif(shutil.which("llrbounds") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["llrbounds", "interval", "--preset", "oneD", "--y", "-2", "--alpha", "0.05"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    np.testing.assert_allclose(json.loads(proc.stdout)["upper"],
                               -2 + np.sqrt(chi2_quantile(0.95, 1) + 4), atol=1e-7)
