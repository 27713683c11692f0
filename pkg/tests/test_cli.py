import json
import subprocess
import sys

import numpy as np
import pytest

from dnilab.cli import main, read_csv_columns
from dnilab.config import ConfigError, load_config, parse_direction

SPIN = ["--kind", "spin-bath", "--g", "1", "--n", "4"]


def run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    return code, out


def test_config_file_and_flag_override(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text('[model]\nkind = "ou-gauss"\ngamma = 1.0\ntau_c = 0.5\n[grid]\nsteps = 4\n')
    cfg = load_config(str(cfg_file), {"tau_c": "2.0"})
    assert cfg.kind == "ou-gauss" and cfg.tau_c == 2.0 and cfg.steps == 4
    assert len(cfg.t_grid()) == 4


def test_config_hash_ignores_threads_and_output():
    a = load_config(None, {"threads": "1", "out": "a.csv"})
    b = load_config(None, {"threads": "8", "out": "b.csv"})
    assert a.digest() == b.digest()
    assert a.digest() != load_config(None, {"seed": "1"}).digest()


@pytest.mark.parametrize("bad", [
    {"steps": "1"}, {"start": "2", "stop": "1"}, {"kind": "ou-mc", "samples": "10"},
    {"x": "north"}, {"tau": "1:2"}, {"param": "g"},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


def test_unknown_config_key(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text("[model]\nspeed = 3\n")
    with pytest.raises(ConfigError):
        load_config(str(cfg_file))


def test_parse_direction_names():
    assert parse_direction("z").theta == 0
    assert parse_direction("1.0,2.0").phi == 2.0


def test_coherence_output_format(tmp_path):
    code, out = run(tmp_path, "c.csv", "coherence", *SPIN, "--steps", "5")
    assert code == 0
    text = out.read_text()
    lines = text.split("\n")
    assert lines[0].startswith("# dnilab coherence config_sha256=")
    assert lines[1].startswith("# config {")
    assert lines[2] == "t,d_analytic,d_numeric,abs_diff"
    assert "\r" not in text
    cols = read_csv_columns(str(out))
    assert np.max(cols["abs_diff"]) < 1e-10
    summary = json.loads((tmp_path / "c.summary.json").read_text())
    assert summary["config_sha256"] in lines[0]
    assert "wall" not in json.dumps(summary)


def test_invasiveness_and_plot(tmp_path):
    code, out = run(tmp_path, "i.csv", "invasiveness", *SPIN, "--start", "0.2", "--stop", "0.8", "--steps", "3",
                    "--tau", "0.1:0.5:2")
    assert code == 0
    cols = read_csv_columns(str(out))
    assert len(cols["I"]) == 6 and np.all(cols["I"] > 0)
    assert main(["plot", str(out), "--y", "I", "--out", str(tmp_path / "i.svg")]) == 0
    assert (tmp_path / "i.svg").read_text().startswith("<svg")


def test_lgi_threshold_report(tmp_path):
    code, out = run(tmp_path, "l.csv", "lgi", "--kind", "dissipative", "--gamma", "1", "--chi", "1", "--n", "6",
                    "--steps", "5", "--stop", "0.2", "--param", "chi", "--n-bar", "2,4", "--reference", "0.17")
    assert code == 0
    summary = json.loads((tmp_path / "l.summary.json").read_text())["results"]
    assert summary["violated"]
    values = [row["threshold"] for row in summary["threshold_scan"]]
    assert values == pytest.approx([2 ** -0.5, 0.5], abs=2e-4)


def test_p3_dump_columns(tmp_path):
    code, out = run(tmp_path, "p.csv", "p3-dump", *SPIN, "--steps", "2", "--stop", "0.5")
    assert code == 0
    cols = read_csv_columns(str(out))
    probs = np.array([cols[k] for k in cols if k.startswith("p_")])
    assert probs.shape == (8, 2)
    np.testing.assert_allclose(probs.sum(axis=0), 1, atol=1e-12)


def test_checks_identity_time(tmp_path):
    code, out = run(tmp_path, "k.json", "checks", "--kind", "dissipative", "--gamma", "1", "--chi", "0.5",
                    "--n", "2", "--start", "0", "--stop", "0", "--steps", "2", "--y", "x")
    assert code == 0
    checks = json.loads(out.read_text())["checks"]
    assert {c["name"] for c in checks} >= {"factorization_distance", "propagator_condition", "complete_positivity"}
    assert all(c["max_deviation"] < 1e-12 for c in checks)


def test_checks_skip_discord_for_noise_models(tmp_path):
    code, out = run(tmp_path, "k.json", "checks", "--kind", "ou-gauss", "--gamma", "1", "--tau-c", "1",
                    "--steps", "2", "--stop", "0.5", "--y", "x")
    assert code == 0
    entry = [c for c in json.loads(out.read_text())["checks"] if c["name"] == "discord_condition_norm"][0]
    assert entry["pass"] is None and "skipped" in entry


def test_exit_codes(tmp_path):
    assert main(["coherence", "--kind", "ou-mc", "--samples", "5", "--gamma", "1", "--tau-c", "1"]) == 1
    assert main(["coherence", "--kind", "spin-bath"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["coherence", "--no-such-flag"])
    assert exc.value.code == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["coherence", *SPIN, "--out", str(blocker / "x.csv")]) == 3


def test_invariant_violation_exit_code(tmp_path):
    # a tolerance below rounding error cannot be met by the dense oracle
    code, _ = run(tmp_path, "c.csv", "coherence", "--kind", "dissipative-dense", "--gamma", "1", "--chi", "0.3",
                  "--n", "3", "--steps", "5", "--tol", "1e-30")
    assert code == 2


def test_output_dir_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DNILAB_OUTPUT_DIR", str(tmp_path / "results"))
    assert main(["coherence", *SPIN, "--steps", "3"]) == 0
    assert (tmp_path / "results" / "coherence.csv").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dnilab", "coherence", *SPIN, "--steps", "3",
                           "--out", str(tmp_path / "m.csv")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "wall-clock" in proc.stderr


@pytest.mark.parametrize("command,extra", [
    ("coherence", ["--kind", "ou-mc", "--gamma", "1", "--tau-c", "1", "--samples", "3000", "--steps", "6"]),
    ("invasiveness", ["--kind", "ou-mc", "--gamma", "1", "--tau-c", "1", "--samples", "3000", "--steps", "4"]),
    ("lgi", SPIN + ["--steps", "8"]),
    ("checks", ["--kind", "dissipative", "--gamma", "1", "--chi", "0.5", "--n", "3", "--steps", "3", "--y", "x"]),
])
def test_byte_identical_across_worker_counts(tmp_path, command, extra):
    outputs = []
    for threads in ("1", "8", "1"):
        out = tmp_path / f"{threads}-{len(outputs)}.out"
        assert main([command, *extra, "--threads", threads, "--seed", "3", "--out", str(out)]) == 0
        summary = out.with_suffix(".summary.json")
        outputs.append((out.read_bytes(), summary.read_bytes()))
    assert outputs[0] == outputs[1] == outputs[2]


def test_shipped_configs_load():
    from pathlib import Path

    folder = Path(__file__).resolve().parent.parent / "configs"
    files = sorted(folder.glob("*.toml"))
    assert files
    for path in files:
        load_config(str(path))
