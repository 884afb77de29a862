import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvxnet.cli import ToySpec, main
from cvxnet.config import KINDS, ConfigError, default_config, parse_config


def test_toy_function_values():
    f = ToySpec.f
    assert f(0.0) == 0.0
    assert f(1.0) == 11.0
    assert f(-1.0) == pytest.approx(1 + 10 * (np.exp(-1) - 1), rel=1e-14)
    assert ToySpec().scale(-7.0) == 0.0 and ToySpec().scale(7.0) == 1.0
    with pytest.raises(ValueError):
        ToySpec(sigma_xi=-1.0)


@pytest.mark.parametrize("kind", KINDS)
def test_config_round_trip(kind):
    cfg = default_config(kind)
    again = parse_config(cfg.to_text(), kind)
    assert again.values == cfg.values
    assert again.to_text() == cfg.to_text()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 64 - 1), st.sampled_from(["LM", "L2SE", "3-SLM", "2-SL2SE"]), st.integers(1, 128),
       st.floats(1e-6, 1.0))
def test_config_round_trip_overrides(seed, arch, n, lr):
    cfg = default_config("basket").with_overrides(seed=seed, arch=arch)
    cfg.values["network"]["n"] = n
    cfg.values["train"]["lr"] = lr
    assert parse_config(cfg.to_text()).values == cfg.values


def test_config_defaults_are_published_settings():
    b = default_config("bermudan")
    assert (b["network"]["n"], b["network"]["c"], b["train"]["batch_size"], b["train"]["iterations"]) == (
        64, 40.0, 8192, 5000)
    s = default_config("swing")
    assert s["swing"]["eval_paths"] == 2 * 10 ** 6
    assert default_config("basket")["basket"]["pool_size"] == 38400


def test_config_errors_name_the_line():
    text = "[experiment]\nkind = toy\n\n[network]\narch = 2-SLM\nlayers = 3\n"
    with pytest.raises(ConfigError, match=r"layers \(line 6\)"):
        parse_config(text)
    with pytest.raises(ConfigError, match=r"line 3"):
        parse_config("[experiment]\nkind = toy\nseed = abc\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[train]\nspeed = 3\n", "toy")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[swing]\nmode = shared\n", "toy")
    with pytest.raises(ConfigError, match="sigma_xi"):
        parse_config("[toy]\nsigma_xi = -2\n", "toy")
    with pytest.raises(ConfigError, match="command runs"):
        parse_config("[experiment]\nkind = swing\n", "toy")
    with pytest.raises(ConfigError):
        parse_config("[network]\narch = 2-XYZ\n", "toy")
    with pytest.raises(ConfigError):
        default_config("nonsense")


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


TINY_TOY = "[train]\niterations = 3\nbatch_size = 64\n\n[toy]\nbatches = 2\n"
TINY_RATES = "[rates]\nsample_size = 5000\nn_list = 4,8\nbound_n = 2\n"


def test_exit_code_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "bad.ini", "[network]\nlayers = 2\narch = LM\n")
    assert main(["fit-toy", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "line" in capsys.readouterr().err
    assert main(["fit-toy", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["fit-toy", "--arch", "7-ABC", "--out", str(tmp_path / "o")]) == 2


def test_exit_code_numeric_failure(tmp_path):
    cfg = _write(tmp_path, "huge.ini", "[train]\niterations = 5\nbatch_size = 64\nlr = 1e300\n"
                                       "lr_floor = 1e300\n\n[toy]\nbatches = 2\n")
    out = tmp_path / "o"
    assert main(["fit-toy", "--config", cfg, "--out", str(out)]) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"


def test_manifest_and_outputs(tmp_path):
    cfg = _write(tmp_path, "toy.ini", TINY_TOY)
    out = tmp_path / "run"
    assert main(["fit-toy", "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "fit-toy" and manifest["seed"] == 7 and manifest["status"] == "ok"
    assert len(manifest["config_sha256"]) == 64 and manifest["wall_time_s"] >= 0
    rows = (out / "toy_fit.csv").read_text().splitlines()
    assert rows[0] == "x,f,f_hat,rel_err" and len(rows) == 101
    xs = np.array([float(r.split(",")[0]) for r in rows[1:]])
    # test grid is the cell centres, never the end points
    assert xs.min() > -7 and xs.max() < 7
    assert (out / "loss.csv").read_text().splitlines()[0] == "iter,loss,lr"


@pytest.mark.parametrize("command,text,files", [
    ("fit-toy", TINY_TOY, ["toy_fit.csv", "loss.csv"]),
    ("check-rates", TINY_RATES, ["sup_rate.csv", "lr_bound.csv"]),
])
def test_reruns_are_byte_identical(tmp_path, command, text, files):
    cfg = _write(tmp_path, "c.ini", text)
    for name in ("a", "b"):
        assert main([command, "--config", cfg, "--seed", "3", "--out", str(tmp_path / name)]) == 0
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_small_pricing_commands(tmp_path):
    basket = _write(tmp_path, "b.ini", "[train]\niterations = 5\n\n[basket]\npool_size = 128\nM_train = 64\n"
                                       "M_bench = 1000\npoints = 1,2\n")
    assert main(["price-basket", "--config", basket, "--out", str(tmp_path / "b")]) == 0
    assert len((tmp_path / "b" / "basket_prices.csv").read_text().splitlines()) == 3
    berm = _write(tmp_path, "be.ini", "[train]\niterations = 3\nbatch_size = 256\n\n[bermudan]\nN = 3\n"
                                      "s0 = 100\neval_paths = 1000\npilot_paths = 512\n")
    assert main(["price-bermudan", "--config", berm, "--out", str(tmp_path / "be")]) == 0
    lines = (tmp_path / "be" / "bermudan_prices.csv").read_text().splitlines()
    assert lines[0] == "d,s0,case,price,std_error,paper_dos_lower,paper_dos_upper"
    assert lines[1].endswith("13.895,13.903")
    swing = _write(tmp_path, "s.ini", "[train]\niterations = 3\nbatch_size = 128\n\n[swing]\nbands = 20:22\n"
                                      "warm_iterations = 2\nbatches = 1\neval_paths = 1000\n")
    assert main(["price-swing", "--config", swing, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "swing_prices.csv").read_text().splitlines()[1].endswith(",4.5")
