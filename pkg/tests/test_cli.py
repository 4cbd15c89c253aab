import csv
import json

import numpy as np
import pytest

import disjqp.cli as cli
import disjqp.shallow_water as sw
from disjqp.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main

SMALL = ["--ensemble-size", "200", "--seed", "3"]


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


class TestSimulate:
    def test_sixty_steps(self, tmp_path):
        assert main(["simulate", "--steps", "60", "--seed", "1", "-o", str(tmp_path)]) == EXIT_OK
        member = tmp_path / "member_000"
        manifest = json.loads((member / "manifest.json").read_text())
        assert manifest["seed"] == 1 and manifest["steps"] == 60
        run = json.loads((tmp_path / "run.json").read_text())
        assert run["arguments"]["seed"] == 1 and run["command"] == "simulate"
        snaps = sorted(member.glob("*.csv"))
        assert len(snaps) == 2
        last = np.loadtxt(snaps[-1], delimiter=",", skiprows=1)
        assert last.shape == (250, 4) and last[:, 3].max() > 0

    def test_zero_steps(self, tmp_path):
        assert main(["simulate", "--steps", "0", "-o", str(tmp_path)]) == EXIT_OK
        assert len(list((tmp_path / "member_000").glob("*.csv"))) == 1

    def test_three_members_distinct(self, tmp_path):
        assert main(["simulate", "--members", "3", "-o", str(tmp_path)]) == EXIT_OK
        finals = [np.loadtxt(sorted((tmp_path / f"member_{k:03d}").glob("*.csv"))[-1],
                             delimiter=",", skiprows=1) for k in range(3)]
        assert not np.array_equal(finals[0], finals[1])
        assert not np.array_equal(finals[1], finals[2])

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["simulate", "--steps", "1"]) == EXIT_OK
        assert (tmp_path / "env" / "run.json").exists()

    def test_flag_beats_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["simulate", "--steps", "1", "-o", str(tmp_path / "flag")]) == EXIT_OK
        assert (tmp_path / "flag" / "run.json").exists()
        assert not (tmp_path / "env").exists()

    def test_byte_identical_reruns(self, tmp_path):
        for d in ("a", "b"):
            assert main(["simulate", "--steps", "5", "--seed", "2", "-o", str(tmp_path / d)]) == 0
        for rel in ("member_000/manifest.json", "member_000/step_000005.csv"):
            if (tmp_path / "a" / rel).exists():
                assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        a = sorted(p.read_bytes() for p in (tmp_path / "a").rglob("*.csv"))
        b = sorted(p.read_bytes() for p in (tmp_path / "b").rglob("*.csv"))
        assert a == b

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"h_c": 10.0}}))
        assert main(["simulate", "--config", str(cfg), "-o", str(tmp_path)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "none.json"),
                     "-o", str(tmp_path)]) == EXIT_CONFIG

    def test_negative_steps(self, tmp_path):
        assert main(["simulate", "--steps", "-2", "-o", str(tmp_path)]) == EXIT_CONFIG


class TestAssimilate:
    def test_alg1(self, tmp_path, capsys):
        assert main(["assimilate", "--solver", "alg1", *SMALL, "-o", str(tmp_path)]) == EXIT_OK
        assert header(tmp_path / "trace.csv")[:5] == ["iter", "J", "complement_size",
                                                      "reduced_grad_norm", "alpha"]
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["status"] == "converged"
        for name in ("experiment.json", "rmse.csv", "fields.csv", "observations.csv", "run.json"):
            assert (tmp_path / name).exists()

    def test_alg2_capped(self, tmp_path):
        assert main(["assimilate", "--solver", "alg2", "--cg-cap", "25", *SMALL,
                     "-o", str(tmp_path)]) == EXIT_OK
        cols = header(tmp_path / "trace.csv")
        assert cols[-3:] == ["cg_iters", "faces", "dist_to_reference"]
        with open(tmp_path / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(int(r["cg_iters"]) <= 25 for r in rows)
        assert float(rows[-1]["dist_to_reference"]) < float(rows[0]["dist_to_reference"]) or \
            len(rows) == 1

    def test_unconstrained(self, tmp_path, capsys):
        assert main(["assimilate", "--solver", "unconstrained", *SMALL,
                     "-o", str(tmp_path)]) == EXIT_OK
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["negative_rain_unconstrained"] > 0
        assert not (tmp_path / "trace.csv").exists()

    def test_solver_failure_exit(self, tmp_path):
        code = main(["assimilate", "--solver", "alg2", "--max-outer", "1", "--cg-cap", "1",
                     *SMALL, "-o", str(tmp_path)])
        assert code == cli.EXIT_SOLVER
        assert (tmp_path / "trace.csv").exists()

    def test_bad_cap(self, tmp_path):
        assert main(["assimilate", "--cg-cap", "0", "-o", str(tmp_path)]) == EXIT_CONFIG

    def test_json_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert main(["assimilate", *SMALL, "-o", str(tmp_path / d)]) == EXIT_OK
        for name in ("experiment.json", "trace.json", "run.json"):
            a = (tmp_path / "a" / name).read_text().replace(str(tmp_path / "a"), "")
            b = (tmp_path / "b" / name).read_text().replace(str(tmp_path / "b"), "")
            assert a == b


class TestVerify:
    def test_quick_passes(self, tmp_path, capsys):
        assert main(["verify", "--quick", "-o", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "FAIL" not in out
        report = json.loads((tmp_path / "verify.json").read_text())
        assert report["passed"] and report["instances"] == 10

    def test_rain_sign_mutation_detected(self, tmp_path, monkeypatch, capsys):
        real = sw.rain_source

        def flipped(u_div, h, cfg):
            return -real(u_div, h, cfg)

        monkeypatch.setattr(sw, "rain_source", flipped)
        monkeypatch.setattr(cli, "rain_source", flipped)
        assert main(["verify", "--quick", "-o", str(tmp_path)]) == EXIT_VERIFY
        assert "FAIL" in capsys.readouterr().out
        assert not json.loads((tmp_path / "verify.json").read_text())["passed"]


def test_requires_command():
    with pytest.raises(SystemExit):
        main([])
