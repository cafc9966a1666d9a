"""Config documents and the command line front end."""

import json

import pytest

from stagesim import ConfigError, build_simulation, load_config, run_from_config
from stagesim.cli import main
from stagesim.routing import LeastOutstandingRouter

BASE_YAML = """\
seed: 0
models:
  default:
    n_params: 1.0e+9
    n_layers: 4
    n_kv_heads: 4
    head_dim: 32
    hidden_dim: 128
skus:
  small:
    peak_flops: 1.0e+12
    mem_bandwidth: 1.0e+12
    mem_capacity: 1.0e+12
    intra_node_link: {bandwidth: 3.0e+11, latency: 1.0e-6}
    hourly_cost: 1.0
clusters:
  c0: {sku: small, n_nodes: 1}
clients:
  - {id: 0, kind: llm, cluster: c0}
  - {id: 1, kind: llm, cluster: c0}
router: {kind: least_outstanding}
trace:
  num_requests: 20
  size_model: {mean_in: 50, var_in: 25, mean_out: 6, var_out: 1}
  arrival_model: {kind: poisson, rate: 40.0}
slo: {ttft_p50: 5.0, ttft_p90: 5.0}
"""

SWEEP_YAML = BASE_YAML + """\
sweep:
  skus: [small]
  parallelism: [[1, 1]]
  batching: [continuous, chunked]
  chunk_sizes: [64]
  device_budget: 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "sim.yaml"
    p.write_text(BASE_YAML)
    return str(p)


class TestConfigBuilding:
    def test_full_document(self, cfg_path):
        setup = build_simulation(load_config(cfg_path))
        assert [c.id for c in setup.clients] == [0, 1]
        assert isinstance(setup.router, LeastOutstandingRouter)
        assert len(setup.requests) == 20
        assert setup.slo.ttft_p50 == 5.0
        assert setup.topology.link_params(0, 1) is not None

    def test_run_from_config(self, cfg_path):
        result, summary = run_from_config(load_config(cfg_path))
        assert result.serviced == 20
        assert summary["requests"]["serviced"] == 20
        assert "goodput_rps" in summary

    def test_topology_section(self, cfg_path, tmp_path):
        cfg = load_config(cfg_path)
        cfg["topology"] = {
            "placements": {0: {"platform": 0, "rack": 0},
                           1: {"platform": 0, "rack": 1}},
            "links": {"intra_platform": {"bandwidth": 4.0e11, "latency": 1e-6},
                      "intra_rack": {"bandwidth": 2.0e11, "latency": 1e-5},
                      "inter_rack": {"bandwidth": 1.28e11, "latency": 2e-2}},
        }
        setup = build_simulation(cfg)
        assert setup.topology.link_params(0, 1).latency == 2e-2

    def test_missing_placement_rejected(self, cfg_path):
        cfg = load_config(cfg_path)
        cfg["topology"] = {
            "placements": {0: {"platform": 0, "rack": 0}},
            "links": {"intra_platform": {"bandwidth": 4.0e11, "latency": 1e-6},
                      "intra_rack": {"bandwidth": 2.0e11, "latency": 1e-5},
                      "inter_rack": {"bandwidth": 1.28e11, "latency": 2e-2}},
        }
        with pytest.raises(ConfigError, match="missing client 1"):
            build_simulation(cfg)

    def test_errors_name_the_key_path(self, cfg_path):
        cfg = load_config(cfg_path)
        del cfg["trace"]["size_model"]
        with pytest.raises(ConfigError, match="size_model"):
            build_simulation(cfg)
        cfg = load_config(cfg_path)
        cfg["clients"][0]["cluster"] = "nope"
        with pytest.raises(ConfigError, match=r"clients\[0\].*nope"):
            build_simulation(cfg)

    def test_invalid_yaml(self, tmp_path):
        p = tmp_path / "broken.yaml"
        p.write_text("clients: [\n")
        with pytest.raises(ConfigError, match="YAML"):
            load_config(str(p))

    def test_non_mapping_document(self, tmp_path):
        p = tmp_path / "list.yaml"
        p.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(str(p))


class TestRunCommand:
    def test_writes_artifacts_and_prints_summary(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(["run", cfg_path, "--out", str(out)]) == 0
        captured = capsys.readouterr()
        assert "requests: 20 serviced" in captured.out
        summary = json.loads((out / "summary.json").read_text())
        assert summary["requests"]["accepted"] == 20
        assert (out / "requests.csv").read_text().count("\n") == 21
        trace = json.loads((out / "trace.json").read_text())
        assert trace["traceEvents"]

    def test_csv_format(self, cfg_path, tmp_path, capsys):
        assert main(["run", cfg_path, "--out", str(tmp_path), "--format",
                     "csv"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("serviced,rejected,makespan_s")
        assert len(lines) == 2

    def test_seed_override_is_reproducible(self, cfg_path, tmp_path, capsys):
        out_a, out_b, out_c = (tmp_path / n for n in ("a", "b", "c"))
        for out in (out_a, out_b):
            assert main(["run", cfg_path, "--seed", "7", "--out", str(out)]) == 0
        assert main(["run", cfg_path, "--seed", "8", "--out", str(out_c)]) == 0
        capsys.readouterr()
        read = lambda d: ((d / "summary.json").read_bytes(),
                          (d / "requests.csv").read_bytes())
        assert read(out_a) == read(out_b)
        assert read(out_a) != read(out_c)

    def test_config_error_exits_2(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(BASE_YAML.replace("clients:\n", "clients: []\nignored:\n"))
        assert main(["run", str(p), "--out", str(tmp_path)]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.yaml")
        assert main(["run", missing, "--out", str(tmp_path)]) == 2
        assert "cannot read config file" in capsys.readouterr().err

    def test_simulation_error_exits_3(self, cfg_path, tmp_path, capsys):
        # a one-row empirical table cannot interpolate, so the first step
        # whose shape misses the measured point fails inside the run
        table = tmp_path / "table.jsonl"
        rows = [{"model": "default", "sku": "small", "tp": 1, "pp": 1,
                 "phase": phase, "total_tokens": 1, "batch_size": 1,
                 "max_context": 1, "runtime_s": 0.01}
                for phase in ("prefill", "decode")]
        table.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        cfg = tmp_path / "empirical.yaml"
        cfg.write_text(BASE_YAML.replace(
            "c0: {sku: small, n_nodes: 1}",
            f"c0: {{sku: small, n_nodes: 1, empirical_table: {table}}}"))
        assert main(["run", str(cfg), "--out", str(tmp_path)]) == 3
        assert "simulation error" in capsys.readouterr().err


class TestSweepCommand:
    def test_writes_report(self, tmp_path, capsys):
        p = tmp_path / "sweep.yaml"
        p.write_text(SWEEP_YAML)
        out = tmp_path / "out"
        assert main(["sweep", str(p), "--out", str(out), "--workers", "1"]) == 0
        assert "points: 2 run" in capsys.readouterr().out
        report = json.loads((out / "sweep.json").read_text())
        assert report["n_points"] == 2
        assert report["best"] is not None

    def test_sweepless_config_exits_2(self, cfg_path, tmp_path, capsys):
        assert main(["sweep", cfg_path, "--out", str(tmp_path)]) == 2
        assert "sweep" in capsys.readouterr().err


class TestReportCommand:
    def run_once(self, cfg_path, out):
        main(["run", cfg_path, "--out", str(out)])

    def test_reads_directory(self, cfg_path, tmp_path, capsys):
        self.run_once(cfg_path, tmp_path)
        capsys.readouterr()
        assert main(["report", str(tmp_path)]) == 0
        assert "requests: 20 serviced" in capsys.readouterr().out

    def test_reads_file_with_csv_format(self, cfg_path, tmp_path, capsys):
        self.run_once(cfg_path, tmp_path)
        capsys.readouterr()
        assert main(["report", str(tmp_path / "summary.json"),
                     "--format", "csv"]) == 0
        assert capsys.readouterr().out.startswith("serviced,")

    def test_prefers_sweep_report_in_directory(self, tmp_path, capsys):
        p = tmp_path / "sweep.yaml"
        p.write_text(SWEEP_YAML)
        main(["sweep", str(p), "--out", str(tmp_path)])
        capsys.readouterr()
        assert main(["report", str(tmp_path)]) == 0
        assert "points: 2 run" in capsys.readouterr().out

    def test_empty_directory_exits_2(self, tmp_path, capsys):
        assert main(["report", str(tmp_path)]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_unrecognized_json_exits_2(self, tmp_path, capsys):
        p = tmp_path / "other.json"
        p.write_text("{\"hello\": 1}")
        assert main(["report", str(p)]) == 2
        assert "neither" in capsys.readouterr().err
