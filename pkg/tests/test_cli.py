import numpy as np
import pytest

from hcnaf import cli
from hcnaf.flow_core import CondAFConfig
from hcnaf.hypernet import HyperNet, HyperNetConfig
from hcnaf.training import save_checkpoint

LN_2PI = np.log(2 * np.pi)


def write_config(path, extra):
    base = {"experiment": "toy1", "out_dir": str(path.parent / "run")}
    base.update(extra)
    path.write_text(cli.CONFIG_MAGIC + "\n" + "".join(f"{k} = {v}\n" for k, v in base.items()))
    return path


def tiny_toy1_overrides(out_dir):
    return {
        "out_dir": str(out_dir),
        "data.n_train": "400",
        "train.max_iters": "150",
        "train.val_interval": "50",
        "flow.width_per_dim": "4",
        "hyper.head_width_w": "8",
        "hyper.head_width_b": "8",
        "eval.n": "500",
    }


def fresh_checkpoint(tmp_path, name="init.hcnaf", dim=2, cond_dim=1):
    af = CondAFConfig(dim=dim, hidden_layers=1, width_per_dim=8)
    net = HyperNet(af, HyperNetConfig(cond_dim=cond_dim, head_width_w=8, head_width_b=8), seed=0)
    echo = dict(net.config_echo())
    echo.update({"experiment": "toy1", "eval.n": "100", "eval.seed": "0", "data.seed": "1", "data.n_train": "10"})
    path = tmp_path / name
    save_checkpoint(path, net.parameters(), echo)
    return path


class TestConfigFormat:
    def test_round_trip_lossless(self):
        cfg = {"experiment": "toy1", "train.seed": "3", "hyper.trunk_widths": "8,4"}
        assert cli.parse_config_text(cli.render_config(cfg)) == cfg

    def test_requires_version_line(self):
        with pytest.raises(Exception):
            cli.parse_config_text("experiment = toy1\n")

    def test_comments_and_blanks_ignored(self):
        text = cli.CONFIG_MAGIC + "\n# a comment\n\nexperiment = toy2\n"
        assert cli.parse_config_text(text) == {"experiment": "toy2"}


class TestTrainCommand:
    def test_writes_artifacts_and_is_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path / "a.cfg", tiny_toy1_overrides(tmp_path / "run_a"))
        assert cli.main(["train", str(cfg_path)]) == 0
        cfg_path_b = write_config(tmp_path / "b.cfg", tiny_toy1_overrides(tmp_path / "run_b"))
        assert cli.main(["train", str(cfg_path_b)]) == 0
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        assert (a / "checkpoint.hcnaf").read_bytes() == (b / "checkpoint.hcnaf").read_bytes()
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        header = (a / "metrics.csv").read_text().splitlines()[0]
        assert header == "iter,train_nll,val_nll,lr"

    def test_refuses_nonempty_out_dir(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / "stale").write_text("x")
        cfg_path = write_config(tmp_path / "a.cfg", {**tiny_toy1_overrides(out)})
        assert cli.main(["train", str(cfg_path)]) == 1

    def test_unknown_key_rejected(self, tmp_path):
        cfg_path = write_config(tmp_path / "a.cfg", {"train.momentum": "0.9"})
        assert cli.main(["train", str(cfg_path)]) == 1


class TestDensityCommand:
    def test_lattice_matches_standard_normal_at_init(self, tmp_path, capsys):
        ckpt = fresh_checkpoint(tmp_path)
        out = tmp_path / "grid.csv"
        rc = cli.main([
            "density", str(ckpt), "--condition", "0", "--bounds=-3,3,-3,3",
            "--res", "10", "--format", "csv", "--out", str(out),
        ])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "x,y,density"
        assert len(lines) == 101
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        closed_form = np.exp(-0.5 * (rows[:, 0] ** 2 + rows[:, 1] ** 2)) / (2 * np.pi)
        # the freshly initialized flow is identity up to its tanh linearization
        # and the symmetry-breaking unit jitter
        assert np.max(np.abs(rows[:, 2] - closed_form)) < 2e-3

    def test_quadrature_and_determinism(self, tmp_path):
        ckpt = fresh_checkpoint(tmp_path)
        out1, out2 = tmp_path / "g1.csv", tmp_path / "g2.csv"
        args = ["density", str(ckpt), "--condition", "0", "--bounds=-7,7,-7,7", "--res", "140"]
        assert cli.main(args + ["--out", str(out1)]) == 0
        assert cli.main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        rows = np.array([[float(v) for v in ln.split(",")] for ln in out1.read_text().strip().split("\n")[1:]])
        cell = (14 / 140) ** 2
        assert rows[:, 2].sum() * cell == pytest.approx(1.0, abs=0.02)

    def test_pgm_output(self, tmp_path):
        ckpt = fresh_checkpoint(tmp_path)
        out = tmp_path / "grid.pgm"
        rc = cli.main([
            "density", str(ckpt), "--condition", "0", "--bounds=-3,3,-3,3",
            "--res", "16", "--format", "pgm", "--out", str(out),
        ])
        assert rc == 0
        data = out.read_bytes()
        assert data.startswith(b"P5\n16 16\n255\n")
        assert len(data) == len(b"P5\n16 16\n255\n") + 256
        assert max(data[len(b"P5\n16 16\n255\n"):]) == 255

    def test_numeric_failure_exit_code(self, tmp_path):
        af = CondAFConfig(dim=2, hidden_layers=1, width_per_dim=2)
        net = HyperNet(af, HyperNetConfig(cond_dim=1, head_width_w=8, head_width_b=8), seed=0)
        net.params["w_out.b"] = np.full_like(net.params["w_out.b"], 1e5)  # exp overflows
        echo = dict(net.config_echo())
        echo.update({"experiment": "toy1", "eval.n": "10", "eval.seed": "0", "data.seed": "1", "data.n_train": "10"})
        ckpt = tmp_path / "broken.hcnaf"
        save_checkpoint(ckpt, net.parameters(), echo)
        rc = cli.main([
            "density", str(ckpt), "--condition", "0", "--bounds=-1,1,-1,1",
            "--res", "4", "--format", "csv", "--out", str(tmp_path / "x.csv"),
        ])
        assert rc == 2


class TestSampleCommand:
    def test_csv_and_determinism(self, tmp_path):
        ckpt = fresh_checkpoint(tmp_path)
        out1, out2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
        args = ["sample", str(ckpt), "--condition", "0", "-n", "50", "--seed", "9"]
        assert cli.main(args + ["--out", str(out1)]) == 0
        assert cli.main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        lines = out1.read_text().strip().split("\n")
        assert lines[0] == "x0,x1,log_prob"
        assert len(lines) == 51


class TestGradcheckCommand:
    def test_passes_at_default_tolerance(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path / "a.cfg", tiny_toy1_overrides(tmp_path / "run"))
        rc = cli.main(["gradcheck", str(cfg_path), "--batch", "8", "--fraction", "0.1"])
        captured = capsys.readouterr().out
        assert rc == 0
        assert "max_rel_err=" in captured

    def test_threshold_failure_exit_code(self, tmp_path):
        cfg_path = write_config(tmp_path / "a.cfg", tiny_toy1_overrides(tmp_path / "run"))
        rc = cli.main(["gradcheck", str(cfg_path), "--batch", "8", "--fraction", "0.1", "--tolerance", "1e-16"])
        assert rc == 3


class TestParamcountCommand:
    def test_reports_formula_counts(self, tmp_path, capsys):
        cfg_path = write_config(
            tmp_path / "a.cfg",
            {"flow.width_per_dim": "3", "flow.hidden_layers": "2"},
        )
        assert cli.main(["paramcount", str(cfg_path)]) == 0
        out = dict(line.split("=") for line in capsys.readouterr().out.strip().split("\n"))
        assert out["flow_w"] == "60"
        assert out["flow_b"] == "14"
        assert int(out["total"]) == 60 + 14 + int(out["hyper"])


class TestEvalCommand:
    def test_eval_prints_machine_readable_report(self, tmp_path, capsys):
        over = tiny_toy1_overrides(tmp_path / "run")
        cfg_path = write_config(tmp_path / "a.cfg", over)
        assert cli.main(["train", str(cfg_path)]) == 0
        capsys.readouterr()
        rc = cli.main(["eval", str(tmp_path / "run" / "checkpoint.hcnaf"), "--n", "200"])
        out = capsys.readouterr().out
        assert rc == 0
        report = dict(line.split("=") for line in out.strip().split("\n"))
        for key in ("nll_2x2", "entropy_floor_2x2", "reference_nll_5x5", "gap_to_floor_10x10"):
            assert key in report
        assert float(report["reference_nll_5x5"]) == 3.966


class TestUsageErrors:
    def test_unknown_command(self):
        assert cli.main(["frobnicate"]) == 1

    def test_missing_config(self):
        assert cli.main(["train", "/nonexistent/path.cfg"]) == 1

    def test_bad_condition_length(self, tmp_path):
        ckpt = fresh_checkpoint(tmp_path)
        rc = cli.main([
            "sample", str(ckpt), "--condition", "0,1,2", "-n", "5",
            "--out", str(tmp_path / "s.csv"),
        ])
        assert rc == 1
