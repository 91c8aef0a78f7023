import json
import subprocess
import sys

import pytest

from mambaout_kit import __version__
from mambaout_kit.cli import run


def invoke(capsys, *argv):
    code = run(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestExitCodes:
    def test_help_is_zero(self, capsys):
        code, out, _ = invoke(capsys, "--help")
        assert code == 0 and "audit" in out

    @pytest.mark.parametrize("argv", [
        [],
        ["nonsense"],
        ["audit", "--input", "-3"],
        ["complexity", "--tokens", "10"],
        ["bench-scan", "--lengths", "a,b"],
        ["scan-check", "--format", "xml"],
    ])
    def test_bad_usage_is_one(self, capsys, argv):
        code, _, err = invoke(capsys, *argv)
        assert code == 1 and err

    def test_unknown_preset_is_one(self, capsys):
        code, _, err = invoke(capsys, "audit", "--model", "giant")
        assert code == 1 and "femto" in err

    def test_bench_repeat_floor_is_one(self, capsys):
        code, _, err = invoke(capsys, "bench-scan", "--lengths", "4", "--repeats", "2")
        assert code == 1 and "repeats" in err

    def test_bad_thread_env(self, capsys, monkeypatch):
        monkeypatch.setenv("MOKT_THREADS", "many")
        code, _, err = invoke(capsys, "complexity", "--tokens", "1", "--dim", "1")
        assert code == 1 and "MOKT_THREADS" in err

    def test_internal_error_is_two(self, capsys, monkeypatch):
        import mambaout_kit.audit as audit_mod

        def boom(*a, **k):
            raise RuntimeError("kaput")

        monkeypatch.setattr(audit_mod, "classify_sequence_task", boom)
        code, _, err = invoke(capsys, "complexity", "--tokens", "1", "--dim", "1")
        assert code == 2 and "kaput" in err


class TestAudit:
    def test_femto_passes(self, capsys):
        code, out, _ = invoke(capsys, "audit", "--model", "femto")
        assert code == 0
        assert "# effective config" in out
        assert out.count("PASS") == 2

    def test_json_and_layers(self, capsys):
        code, out, _ = invoke(capsys, "audit", "--model", "micro", "--input", "32", "--format", "json")
        doc = json.loads(out)
        assert code == 0
        assert doc["config"]["command"] == "audit"
        assert doc["result"]["checks"] == []
        assert doc["result"]["with_head"]["params"] > doc["result"]["without_head"]["params"]

    def test_layer_table(self, capsys):
        _, out, _ = invoke(capsys, "audit", "--model", "micro", "--input", "32", "--layers")
        assert "stages.0.blocks.0.fc1" in out


class TestComplexity:
    def test_image_tokens(self, capsys):
        code, out, _ = invoke(capsys, "complexity", "--tokens", "196", "--dim", "384")
        assert code == 0
        assert "0.0851" in out and "not long-sequence" in out
        assert "752,640,000" in out

    def test_json(self, capsys):
        _, out, _ = invoke(capsys, "complexity", "--tokens", "4000", "--dim", "384", "--format", "json")
        res = json.loads(out)["result"]
        assert res["is_long_sequence"] and res["tau"] == 2304
        assert res["flops"] == res["linear_term"] + res["quadratic_term"]


class TestChecks:
    def test_scan_check(self, capsys):
        code, out, _ = invoke(capsys, "scan-check", "--max-len", "64", "--trials", "8", "--format", "json")
        res = json.loads(out)["result"]
        assert code == 0 and res["passed"] and res["max_len"] == 64

    def test_scan_check_impossible_tolerance_fails(self, capsys):
        code, _, _ = invoke(capsys, "scan-check", "--max-len", "256", "--trials", "4", "--tolerance", "0")
        assert code == 1

    def test_gradcheck_ops(self, capsys):
        code, out, _ = invoke(capsys, "gradcheck", "--ops-only", "--coords", "10")
        assert code == 0 and "PASS" in out

    def test_bench_scan(self, capsys):
        code, out, _ = invoke(capsys, "bench-scan", "--lengths", "1,32", "--dim", "2", "--state-dim", "2",
                              "--repeats", "3", "--format", "json")
        assert code == 0
        assert [r["T"] for r in json.loads(out)["result"]["rows"]] == [1, 32]


class TestOutDir:
    def test_files_written(self, capsys, tmp_path):
        code, _, _ = invoke(capsys, "complexity", "--tokens", "8", "--dim", "4", "--seed", "3",
                            "--out", str(tmp_path / "run"))
        assert code == 0
        run_dir = tmp_path / "run"
        assert {p.name for p in run_dir.iterdir()} == {"config.json", "version.json", "result.json", "result.txt"}
        assert json.loads((run_dir / "config.json").read_text())["seed"] == 3
        assert json.loads((run_dir / "version.json").read_text())["mokt"] == __version__


class TestTrain:
    def test_yaml_config_and_flags(self, capsys, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("weight_decay: 0.0\ntask_noise: 0.0\nlabel_smoothing: 0.0\nepochs: 5\n")
        code, out, _ = invoke(capsys, "train", "--config", str(cfg), "--epochs", "1", "--lr", "1e-3",
                              "--n-train", "32", "--n-val", "16", "--out", str(tmp_path / "o"), "--format", "json")
        doc = json.loads(out)
        assert code == 0
        assert doc["config"]["train"]["epochs"] == 1  # flag beats file
        assert doc["config"]["train"]["weight_decay"] == 0.0
        assert doc["config"]["task"]["noise"] == 0.0
        assert (tmp_path / "o" / "metrics.csv").exists() and (tmp_path / "o" / "final.mokt").exists()

    def test_scaled_lr_flag(self, capsys, tmp_path):
        _, out, _ = invoke(capsys, "train", "--epochs", "1", "--batch-size", "128", "--scaled-lr",
                           "--n-train", "16", "--n-val", "8", "--format", "json")
        assert json.loads(out)["config"]["train"]["effective_lr"] == pytest.approx(1.25e-4)

    def test_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("learning_rat: 0.1\n")
        code, _, err = invoke(capsys, "train", "--config", str(cfg))
        assert code == 1 and "learning_rat" in err

    def test_nested_or_missing_config(self, capsys, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("train:\n  epochs: 1\n")
        assert invoke(capsys, "train", "--config", str(cfg))[0] == 1
        assert invoke(capsys, "train", "--config", str(tmp_path / "missing.yaml"))[0] == 1


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mambaout_kit.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
