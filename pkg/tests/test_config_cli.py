import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from linboltz import cli
from linboltz.config import DEFAULTS, load_config, parse_config
from linboltz.errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def out(tmp_path, monkeypatch):
    d = tmp_path / "out"
    monkeypatch.setenv("LINBOLTZ_OUTPUT_DIR", str(d))
    return d


def write_yaml(path, text):
    path.write_text(text)
    return str(path)


class TestParse:
    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.grid.shape == (DEFAULTS["grid"]["nx"], DEFAULTS["grid"]["nv"])
        assert cfg.seed == 0 and cfg.threads == 1
        assert len(cfg.config_hash) == 16

    def test_hash_tracks_content(self):
        a = parse_config({"seed": 1}).config_hash
        assert parse_config({"seed": 1}).config_hash == a
        assert parse_config({"seed": 2}).config_hash != a

    @pytest.mark.parametrize("data, needle", [
        ({"grid": {"bogus": 1}}, "grid.bogus"),
        ({"solver": {"dt": -1.0}}, "dt"),
        ({"solver": {"scheme": "euler"}}, "scheme"),
        ({"solver": {"interp": "quintic"}}, "interp"),
        ({"threads": 0}, "threads"),
        ({"velocity_map": "warp"}, "velocity_map"),
        ({"kernel": {"family": "nonsense"}}, "nonsense"),
        ({"potential": {"kind": "zero", "dim": 2}}, "dim"),
    ])
    def test_rejects(self, data, needle):
        with pytest.raises(ConfigurationError, match=needle):
            parse_config(data)

    def test_line_number_reported(self, tmp_path):
        p = write_yaml(tmp_path / "c.yaml", "seed: 1\ngrid:\n  nx: 16\n  bogus: 2\n")
        with pytest.raises(ConfigurationError, match="line 4"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "nope.yaml")

    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
    def test_shipped_configs_parse(self, name):
        cfg = load_config(CONFIGS / name)
        assert cfg.grid.shape[0] > 0

    def test_initial_kinds(self):
        for init in ({"kind": "equilibrium"}, {"kind": "random", "amplitude": 0.3},
                     {"kind": "perturbation", "amplitude": 0.5, "mode": 2, "v_power": 1},
                     {"kind": "box", "x_lo": [0.2], "x_hi": [0.4], "v_lo": [-1.0], "v_hi": [1.0]}):
            cfg = parse_config({"grid": {"nx": 16, "nv": 16}, "solver": {"initial": init}})
            f = cfg.initial_field()
            assert f.shape == (16, 16) and np.all(np.isfinite(f))
            if init.get("v_power", 0) == 0:
                assert np.all(f >= 0)

    def test_random_initial_is_seeded(self):
        data = {"grid": {"nx": 16, "nv": 16}, "solver": {"initial": {"kind": "random"}}, "seed": 5}
        a = parse_config(data).initial_field()
        np.testing.assert_array_equal(a, parse_config(data).initial_field())


class TestCommands:
    def test_validate_kernel_ok(self, out):
        assert cli.main(["validate-kernel", str(CONFIGS / "linear_relaxation.yaml")]) == 0
        rep = json.loads((out / "validate-kernel" / "kernel_report.json").read_text())
        assert rep["pass"]

    def test_classes_two_class(self, out):
        assert cli.main(["classes", str(CONFIGS / "two_class.yaml")]) == 0
        rep = json.loads((out / "classes" / "classes.json").read_text())
        assert rep["class_count"] == 2
        assert (out / "classes" / "basis_1.lbz").exists()

    def test_decay_degenerate_not_exponential(self, out, capsys):
        assert cli.main(["decay", str(CONFIGS / "degenerate_v.yaml")]) == 0
        rep = json.loads((out / "decay" / "decay.json").read_text())
        assert rep["decay"]["verdict"] != "exponential"
        assert "verdict" in capsys.readouterr().out

    def test_bad_config_exit_2(self, out, tmp_path, capsys):
        p = write_yaml(tmp_path / "bad.yaml", "seed: 1\ngrid:\n  nx: 16\n  bogus: 2\n")
        assert cli.main(["simulate", p]) == 2
        err = capsys.readouterr().err
        assert "line 4" in err and "grid.bogus" in err

    def test_missing_config_exit_2(self, out, tmp_path):
        assert cli.main(["omega", str(tmp_path / "missing.yaml")]) == 2

    def test_cfl_violation_exit_2(self, out, tmp_path):
        p = write_yaml(tmp_path / "c.yaml", "grid: {nx: 64, nv: 16}\nsolver: {dt: 2.0, T: 4.0}\n")
        assert cli.main(["simulate", p]) == 2

    def test_output_dir_override(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        p = write_yaml(tmp_path / "c.yaml", "output_dir: from_config\nkernel: {family: linear_relaxation}\n"
                                            "grid: {nx: 16, nv: 16}\n")
        monkeypatch.delenv("LINBOLTZ_OUTPUT_DIR", raising=False)
        assert cli.main(["omega", p]) == 0
        assert (tmp_path / "from_config" / "omega" / "omega.json").exists()
        monkeypatch.setenv("LINBOLTZ_OUTPUT_DIR", str(tmp_path / "from_env"))
        assert cli.main(["omega", p]) == 0
        assert (tmp_path / "from_env" / "omega" / "omega.json").exists()

    def test_outputs_byte_identical(self, tmp_path, monkeypatch):
        p = write_yaml(tmp_path / "c.yaml", yaml.safe_dump({
            "kernel": {"family": "linear_relaxation"}, "grid": {"nx": 32, "nv": 32},
            "solver": {"dt": 0.05, "T": 1.0, "snapshot_times": [0.5], "initial": {"kind": "random"}},
            "seed": 3}))
        trees = []
        for name in ("a", "b"):
            monkeypatch.setenv("LINBOLTZ_OUTPUT_DIR", str(tmp_path / name))
            assert cli.main(["simulate", p]) == 0
            root = tmp_path / name
            trees.append({q.relative_to(root): q.read_bytes() for q in sorted(root.rglob("*")) if q.is_file()})
        assert trees[0].keys() == trees[1].keys() and len(trees[0]) >= 4
        assert trees[0] == trees[1]

    def test_provenance_in_artifacts(self, out, tmp_path):
        p = write_yaml(tmp_path / "c.yaml", "grid: {nx: 16, nv: 16}\nseed: 9\n")
        assert cli.main(["omega", p]) == 0
        h = load_config(p).config_hash
        doc = json.loads((out / "omega" / "omega.json").read_text())
        assert h in json.dumps(doc)
        assert h in (out / "omega" / "omega.svg").read_text()

    def test_paper_suite_subset(self, out):
        assert cli.main(["paper-suite", "--only", "2"]) == 0
        doc = json.loads((out / "paper-suite" / "suite.json").read_text())
        assert doc["all_passed"] and [c["number"] for c in doc["criteria"]] == [2]

    def test_paper_suite_unknown_criterion(self, out):
        assert cli.main(["paper-suite", "--only", "99"]) == 2

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        assert "linboltz" in capsys.readouterr().out
