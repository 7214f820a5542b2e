import filecmp
import json

import pytest

from p1gibbs.cli import main, read_grid_csv
from p1gibbs.config import parse_config
from p1gibbs.errors import ConfigError

FS = """\
geometry:
  degree: 2
process:
  k: 2
  beta: 1.0
sampler:
  chains: 2
  sweeps: 200
  burn_in: 100
  thin: 2
  grid_m: 8
oracle:
  m: 16
"""

KLT = """\
geometry:
  degree: 1
  measure: klt
  divisor:
    - coord: [1.0, 0.0]
      coefficient: 0.75
    - coord: [-0.5, 0.8660254037844386]
      coefficient: 0.75
    - coord: [-0.5, -0.8660254037844386]
      coefficient: 0.75
process:
  k: 1
  beta: 1.0
oracle:
  m: 16
  tol: 1.0e-30
  max_iter: 1
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_parse_and_build():
    cfg = parse_config(FS)
    assert cfg.to_model().N == 3 and cfg.process.effective_beta() == 1.0
    assert cfg.sampler_config().n_keep == 200


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config(FS.replace("  thin: 2", "  thinning: 2"))
    assert exc.value.field == "sampler.thinning" and exc.value.line == 10


def test_physical_constraints():
    bad = KLT.replace("coefficient: 0.75\n    - coord: [-0.5, 0.8", "coefficient: 1.0\n    - coord: [-0.5, 0.8")
    with pytest.raises(ConfigError):
        parse_config(bad)
    with pytest.raises(ConfigError):
        parse_config(FS.replace("  beta: 1.0", "  beta: 1.0\n  beta_k: {2: 0.0}"))
    with pytest.raises(ConfigError):
        parse_config(FS.replace("  k: 2\n  beta: 1.0", "  k: 2\n  beta_k: {2: -1.0}"))


def test_hash_ignores_output_block():
    a = parse_config(FS)
    b = parse_config(FS + "output:\n  directory: elsewhere\n")
    c = parse_config(FS.replace("burn_in: 100", "burn_in: 101"))
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert a.geometry_hash() == c.geometry_hash()


def test_cli_sample_deterministic(tmp_path):
    cfg = _write(tmp_path, "fs.yaml", FS)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in ("samples.csv", "density.csv", "diagnostics.json", "current.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    head = (tmp_path / "a" / "samples.csv").read_text().splitlines()[0]
    assert head.startswith("# config_hash=")
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "9"]) == 0
    assert not filecmp.cmp(tmp_path / "a" / "samples.csv", tmp_path / "c" / "samples.csv", shallow=False)


def test_cli_oracle_and_compare(tmp_path):
    cfg = _write(tmp_path, "fs.yaml", FS)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert main(["oracle", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    res = json.loads((tmp_path / "o" / "residual.json").read_text())
    assert res["status"] == "converged" and res["sup_u"] < 1e-8
    g1, _, h1 = read_grid_csv(tmp_path / "s" / "density.csv")
    g2, _, h2 = read_grid_csv(tmp_path / "o" / "density.csv")
    assert g1 == g2 and h1["geometry_hash"] == h2["geometry_hash"]
    assert main(["compare", "--config", cfg, str(tmp_path / "s" / "density.csv"),
                 str(tmp_path / "o" / "density.csv"), "--out", str(tmp_path / "c")]) == 0
    out = json.loads((tmp_path / "c" / "compare.json").read_text())
    assert 0 <= out["tv"] <= 1
    assert (tmp_path / "c" / "residual.csv").exists()


def test_cli_compare_grid_mismatch(tmp_path):
    cfg = _write(tmp_path, "fs.yaml", FS)
    cfg2 = _write(tmp_path, "fs2.yaml", FS.replace("grid_m: 8", "grid_m: 6"))
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["sample", "--config", cfg2, "--out", str(tmp_path / "b")]) == 0
    assert main(["compare", "--config", cfg, str(tmp_path / "a" / "density.csv"),
                 str(tmp_path / "b" / "density.csv"), "--out", str(tmp_path / "c")]) == 2


def test_cli_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, "bad.yaml", FS.replace("  thin: 2", "  thin: 0"))
    assert main(["sample", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert "line" in capsys.readouterr().err
    klt = _write(tmp_path, "klt.yaml", KLT)
    assert main(["oracle", "--config", klt, "--out", str(tmp_path / "o")]) == 3
    assert json.loads((tmp_path / "o" / "residual.json").read_text())["status"] == "no-convergence"
    fano = _write(tmp_path, "fano.yaml", "geometry:\n  degree: 0\nstability:\n  k_max: 1\n  mc_samples: 1000\n")
    assert main(["stability", "--config", fano, "--out", str(tmp_path / "f")]) == 4
    rep = json.loads((tmp_path / "f" / "stability.json").read_text())
    assert rep["verdicts"]["1"] == "unstable"


def test_cli_partition(tmp_path):
    cfg = _write(tmp_path, "fs.yaml", FS.replace("  k: 2\n  beta: 1.0", "  k: 2\n  beta: 2.0"))
    assert main(["partition", "--config", cfg, "--out", str(tmp_path / "p")]) == 0
    d = json.loads((tmp_path / "p" / "partition.json").read_text())
    assert abs(d["value"] - 6.0) < 1e-4 and d["verdict"] == "finite"
    assert (tmp_path / "p" / "trace.csv").read_text().startswith("# config_hash=")
