import math
import os

import numpy as np
import pytest

import cosim.cli as cli
from cosim.cli import ConfigError, main, parse_config, read_csv
from cosim.coupling import CouplingError, Scheme, run_master
from cosim.models import build_problem


def run_cli(tmp_path, name, *args):
    out = tmp_path / name
    code = main(list(args) + ["--out", str(out)])
    return code, out


# -- config ------------------------------------------------------------------------

def test_parse_example_config():
    cfg = parse_config("scheme = power_negotiated\nH = 0.2\nt_end = 75\nmodel = spring-mass")
    assert cfg.scheme is Scheme.POWER_NEGOTIATED
    assert (cfg.H, cfg.t_end, cfg.model) == (0.2, 75.0, "spring-mass")
    assert cfg.extrap == 0 and cfg.abs_tol == 1e-12


def test_negative_step_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config("H = -1")
    assert info.value.key == "H" and info.value.line == 1
    assert "positive" in str(info.value)


def test_empty_config_defaults():
    cfg = parse_config("")
    assert cfg.scheme is Scheme.PLAIN
    assert (cfg.extrap, cfg.model, cfg.H, cfg.t_end) == (0, "spring-mass", 0.2, 20.0)
    assert cfg.param_dict() == {"m": 1.0, "c": 1.0, "d": 0.0, "x0": 1.0, "v0": 0.0}


def test_comments_and_params():
    cfg = parse_config("# header\nmodel = spring-mass  # inline\nparam.m = 2.5\n\n")
    assert cfg.param_dict()["m"] == 2.5


@pytest.mark.parametrize("text, key", [
    ("colour = blue", "colour"),
    ("extrap = 2", "extrap"),
    ("H = abc", "H"),
    ("model = pendulum", "model"),
    ("param.mass = 1", "param.mass"),
    ("H = 0.2\nH = 0.1", "H"),
    ("H_list = 0.2, 0.1", "H_list"),
    ("H = 0.3\nt_end = 1", "t_end"),
])
def test_config_errors_name_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key
    assert repr(key) in str(info.value)


def test_malformed_line():
    with pytest.raises(ConfigError) as info:
        parse_config("scheme plain")
    assert info.value.line == 1


def test_overrides_win():
    cfg = parse_config("H = 0.2\nt_end = 2", {"H": "0.1"})
    assert cfg.H == 0.1


def test_config_echo_round_trips():
    cfg = parse_config("scheme = balance_corrected\nextrap = 1\nhermite = true\nH = 0.1\n"
                       "t_end = 3\nparam.c = 2\nH_list = 0.2, 0.1, 0.05, 0.025\n")
    again = parse_config("\n".join(cli.format_config(cfg)))
    assert again == cfg


# -- run ---------------------------------------------------------------------------

def test_plain_run_schema(tmp_path):
    code, out = run_cli(tmp_path, "plain.csv", "run", "--H", "0.2", "--t-end", "1")
    assert code == 0
    data = read_csv(out)
    assert data.columns == ["t", "x_1", "x_2", "E"]
    assert data.data.shape == (51, 4)
    assert out.read_text().startswith("# cosim 0.1.0 run\n")
    assert ("config", "scheme = plain") in data.meta


def test_power_negotiated_schema(tmp_path):
    code, out = run_cli(tmp_path, "pn.csv", "run", "--scheme", "power_negotiated", "--extrap", "1",
                        "--hermite", "--t-end", "4")
    assert code == 0
    data = read_csv(out)
    assert data.columns == ["t", "x_1", "x_2", "E", "P_hat_1", "P_hat_2"]
    assert data.spans, "expected span annotations"
    assert all(s[1] <= s[2] for s in data.spans)
    assert "# span: block=" in out.read_text()


def test_balance_corrected_schema(tmp_path):
    code, out = run_cli(tmp_path, "bc.csv", "run", "--scheme", "balance_corrected", "--t-end", "1")
    assert code == 0
    assert read_csv(out).columns == ["t", "x_1", "x_2", "E", "dE_1", "dE_2", "dE_3", "dE_4"]


def test_model_without_energy_has_no_energy_column(tmp_path):
    code, out = run_cli(tmp_path, "lin.csv", "run", "--model", "linear-uni", "--t-end", "1")
    assert code == 0
    assert read_csv(out).columns == ["t", "x_1", "x_2"]


def test_rerun_byte_identical(tmp_path):
    args = ["run", "--scheme", "power_negotiated", "--extrap", "1", "--hermite", "--t-end", "4"]
    _, a = run_cli(tmp_path, "a.csv", *args)
    _, b = run_cli(tmp_path, "b.csv", *args)
    assert a.read_bytes() == b.read_bytes()


def test_csv_round_trips_trace(tmp_path):
    cfg_text = "scheme = power_negotiated\nextrap = 1\nhermite = true\nt_end = 2\n"
    (tmp_path / "run.cfg").write_text(cfg_text)
    code, out = run_cli(tmp_path, "rt.csv", "run", "--config", str(tmp_path / "run.cfg"))
    assert code == 0
    data = read_csv(out)
    cfg = parse_config(data.config_text())
    pr = build_problem(cfg.model, cfg.param_dict())
    tr = run_master(pr.blocks, pr.connections, pr.x0, cfg.master(), pr.energy)
    assert np.array_equal(data.column("t"), tr.sample_times)
    assert np.array_equal(data.data[:, 1:3], tr.states)
    assert np.array_equal(data.column("E"), tr.energies)
    assert np.array_equal(data.data[:, 4:], tr.phat_samples)
    assert data.spans == [(s.block, s.start, s.end) for s in tr.spans]


def test_stdout_when_no_out(capsys):
    assert main(["run", "--t-end", "0.4"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("# cosim 0.1.0 run\n")
    assert "\nt,x_1,x_2,E\n" in text


# -- converge / stability ------------------------------------------------------------

def test_converge_table(tmp_path):
    (tmp_path / "c.cfg").write_text("extrap = 1\nt_end = 2\nH_list = 0.2, 0.1, 0.05, 0.025\n")
    code, out = run_cli(tmp_path, "conv.csv", "converge", "--config", str(tmp_path / "c.cfg"))
    assert code == 0
    data = read_csv(out)
    assert data.columns == ["H", "error", "err_x1", "err_x2"]
    assert data.data.shape == (4, 4)
    slope = float(data.footer("slope"))
    assert slope == pytest.approx(np.polyfit(np.log(data.column("H")), np.log(data.column("error")), 1)[0],
                                  rel=1e-12)


def test_converge_linear_uni_first_component(tmp_path):
    (tmp_path / "c.cfg").write_text("model = linear-uni\nt_end = 2\nH_list = 0.2, 0.1, 0.05, 0.025\n")
    code, out = run_cli(tmp_path, "uni.csv", "converge", "--config", str(tmp_path / "c.cfg"))
    assert code == 0
    assert np.all(read_csv(out).column("err_x1") <= 1e-10)


def test_stability_report(tmp_path):
    code, out = run_cli(tmp_path, "st.csv", "stability", "--scheme", "power_negotiated",
                        "--extrap", "1", "--hermite", "--t-end", "4")
    assert code == 0
    data = read_csv(out)
    assert data.columns == ["t", "E", "production"]
    assert data.data.shape == (21, 3)
    assert data.column("production")[0] == 0.0
    np.testing.assert_allclose(np.cumsum(data.column("production")),
                               data.column("E") - data.column("E")[0], atol=1e-14)
    for key in ("drift", "spans", "span_production", "outside_production", "span_fraction"):
        assert math.isfinite(float(data.footer(key)))


def test_stability_needs_energy(tmp_path):
    code, out = run_cli(tmp_path, "x.csv", "stability", "--model", "linear-uni", "--t-end", "1")
    assert code == 2
    assert not out.exists()


# -- exit codes ----------------------------------------------------------------------

def test_config_error_exit_code(tmp_path, capsys):
    code, out = run_cli(tmp_path, "bad.csv", "run", "--H", "-1")
    assert code == 2
    assert "'H'" in capsys.readouterr().err
    assert not out.exists()


def test_failed_run_leaves_no_file(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise CouplingError("integrator gave up", 3)

    monkeypatch.setattr(cli, "run_master", boom)
    out = tmp_path / "fail.csv"
    out.write_text("stale")
    code = main(["run", "--t-end", "1", "--out", str(out)])
    assert code == 1
    # the earlier file is untouched and no temporary file is left behind
    assert out.read_text() == "stale"
    assert sorted(os.listdir(tmp_path)) == ["fail.csv"]
    out.unlink()
    assert main(["run", "--t-end", "1", "--out", str(out)]) == 1
    assert not out.exists()


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "cosim", "run", "--t-end", "0.2"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert res.stdout.count("\n") == 1 + len(cli.format_config(parse_config(""))) + 1 + 11
