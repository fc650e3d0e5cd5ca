import csv
import io
import json
import math
import os
import subprocess
import sys

import pytest

from cantor_anderson.cli import body_of, main, resolve, write_atomic
from cantor_anderson.errors import ConfigError, UsageError


def run(tmp_path, *args, name="out.csv"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def rows_of(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.reader(io.StringIO("\n".join(lines))))


def manifest_of(path):
    line = next(l for l in path.read_text().splitlines() if l.startswith("# manifest "))
    return json.loads(line[len("# manifest "):])


class TestExamples:
    def test_poset_ranks(self, tmp_path):
        code, out = run(tmp_path, "poset", "--k", "2", "--n", "3", "--emit", "ranks")
        assert code == 0
        rows = rows_of(out)
        assert [tuple(map(int, r)) for r in rows[1:]] == [(3, 1), (4, 3), (5, 3), (6, 1)]

    def test_cantor_intervals(self, tmp_path):
        code, out = run(tmp_path, "cantor", "--beta", "1.34", "--l1", "2", "--depth", "1", "--emit", "intervals")
        assert code == 0
        rows = rows_of(out)
        header, body = rows[0], rows[1:]
        gen1 = [r for r in body if int(r[header.index("generation")]) == 1]
        assert len(gen1) == 2
        for r in gen1:
            length = float(r[header.index("right")]) - float(r[header.index("left")])
            assert math.isclose(length, math.exp(-2), rel_tol=1e-12)

    def test_missing_flag(self, tmp_path, capsys):
        code, out = run(tmp_path, "poset", "--k", "2")
        assert code == 2 and not out.exists()
        assert "UsageError" in capsys.readouterr().err

    def test_module_error_exits_nonzero_with_manifest(self, tmp_path):
        code, out = run(tmp_path, "cantor", "--beta", "1.34", "--l1", "2", "--depth", "2")
        assert code == 1
        assert manifest_of(out)["status"][0]["status"].startswith("GapViolation")

    def test_no_subcommand(self):
        with pytest.raises(UsageError):
            resolve([])

    def test_msa(self, tmp_path):
        code, out = run(tmp_path, "msa", "--beta", "1.5", "--l1", "3", "--scales", "4")
        assert code == 0 and len(rows_of(out)) == 5


class TestConfig:
    def test_empty_config_plus_flags(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{}")
        spec = resolve(["poset", "--config", str(cfg), "--k", "3", "--n", "2"])
        assert spec.parameters["k"] == 3 and spec.parameters["n"] == 2

    def test_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 5, "k": 2, "n": 4}))
        code, out = run(tmp_path, "poset", "--config", str(cfg), "--seed", "9")
        assert code == 0
        m = manifest_of(out)
        assert m["seed"] == 9 and m["parameters"]["n"] == 4

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"betaa": 1.5}))
        with pytest.raises(ConfigError, match="betaa"):
            resolve(["cantor", "--config", str(cfg), "--beta", "1.5", "--l1", "3"])
        code, out = run(tmp_path, "cantor", "--config", str(cfg), "--beta", "1.5", "--l1", "3")
        assert code == 2 and not out.exists()
        assert "betaa" in capsys.readouterr().err

    @pytest.mark.parametrize("text", ["not json", "[1, 2]"])
    def test_invalid_file(self, tmp_path, text):
        cfg = tmp_path / "c.json"
        cfg.write_text(text)
        with pytest.raises(ConfigError):
            resolve(["poset", "--config", str(cfg), "--k", "2", "--n", "2"])

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve(["poset", "--config", str(tmp_path / "missing.json"), "--k", "2", "--n", "2"])

    def test_threads_env_fallback(self, monkeypatch):
        monkeypatch.setenv("CAL_THREADS", "3")
        assert resolve(["poset", "--k", "2", "--n", "2"]).threads == 3
        assert resolve(["poset", "--k", "2", "--n", "2", "--threads", "2"]).threads == 2
        monkeypatch.setenv("CAL_THREADS", "many")
        with pytest.raises(ConfigError):
            resolve(["poset", "--k", "2", "--n", "2"])


class TestOutput:
    def test_manifest_echo(self, tmp_path):
        code, out = run(tmp_path, "poset", "--k", "3", "--n", "3", "--emit", "bound")
        m = manifest_of(out)
        assert m["subcommand"] == "poset" and m["parameters"]["k"] == 3
        assert m["parameters"]["emit"] == "bound" and "wall_time_s" in m and m["version"]

    def test_json_format(self, tmp_path):
        code, out = run(tmp_path, "poset", "--k", "2", "--n", "3", "--format", "json", name="o.json")
        d = json.loads(out.read_text())
        assert d["manifest"]["format"] == "json"
        assert d["result"]["rows"] == [[3, 1], [4, 3], [5, 3], [6, 1]]

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_deterministic_bodies(self, tmp_path, fmt):
        args = ["cantor", "--beta", "1.5", "--l1", "3", "--depth", "3", "--emit", "samples", "--samples", "50",
                "--seed", "11", "--format", fmt]
        _, a = run(tmp_path, *args, name="a")
        _, b = run(tmp_path, *args, name="b")
        assert body_of(a.read_text(), fmt) == body_of(b.read_text(), fmt)
        _, c = run(tmp_path, *args[:-4], "--seed", "12", "--format", fmt, name="c")
        assert body_of(a.read_text(), fmt) != body_of(c.read_text(), fmt)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        target = tmp_path / "x.csv"
        write_atomic(str(target), "hello\n")
        assert target.read_text() == "hello\n"
        assert os.listdir(tmp_path) == ["x.csv"]

    def test_atomic_write_failure_keeps_old(self, tmp_path):
        target = tmp_path / "x.csv"
        target.write_text("old\n")
        with pytest.raises(TypeError):
            write_atomic(str(target), 123)  # fails mid-write
        assert target.read_text() == "old\n"
        assert os.listdir(tmp_path) == ["x.csv"]

    def test_module_entry_point(self, tmp_path):
        out = tmp_path / "m.csv"
        r = subprocess.run(
            [sys.executable, "-m", "cantor_anderson", "poset", "--k", "2", "--n", "2", "--out", str(out)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0 and out.exists()
