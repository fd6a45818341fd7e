import json
import os

from specpipe.cli import main

QUICK = [
    "--vocab-size", "32", "--embed-dim", "16", "--target-layers", "4",
    "--draft-layers", "2", "--max-context", "128", "--prompt-len", "8",
    "--gen-len", "8", "--per-layer-delay", "1e-4", "--link-latency", "1e-6",
    "--draft-token-delay", "1e-5", "--cutoff", "0.0", "--cutoff-decay", "0.0",
]


def test_run_writes_report_csv_and_figures(tmp_path, capsys):
    out = tmp_path / "report.json"
    csv_out = tmp_path / "report.csv"
    rc = main(["run", "--mode", "pipeline-iterative", "--nodes", "3",
               "--repetitions", "2", "--out", str(out), "--csv", str(csv_out),
               *QUICK])
    assert rc == 0
    assert out.exists() and csv_out.exists()
    figdir = tmp_path / "report_figures"
    pngs = sorted(os.listdir(figdir))
    assert pngs and all(p.endswith(".png") for p in pngs)
    data = json.loads(out.read_text())
    assert data["repetitions"] == 2
    assert "generation speed" in capsys.readouterr().out


def test_run_no_figures_flag(tmp_path):
    out = tmp_path / "r.json"
    rc = main(["run", "--mode", "iterative", "--nodes", "1", "--out", str(out),
               "--no-figures", *QUICK])
    assert rc == 0
    assert not (tmp_path / "r_figures").exists()


def test_compare_modes_exit_zero_on_equivalence(tmp_path):
    rc = main(["compare", "--modes",
               "iterative,pipeline-iterative,sync-speculative,async-speculative",
               "--nodes", "3", *QUICK])
    assert rc == 0


def test_compare_detects_divergence(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    main(["run", "--mode", "iterative", "--nodes", "1", "--out", str(a),
          "--no-figures", *QUICK])
    main(["run", "--mode", "iterative", "--nodes", "1", "--out", str(b),
          "--no-figures", *QUICK])
    data = json.loads(b.read_text())
    data["tokens"][0][0] = (data["tokens"][0][0] + 1) % 32
    b.write_text(json.dumps(data))
    rc = main(["compare", str(a), str(b)])
    assert rc == 1


def test_sweep_writes_table_and_figures(tmp_path):
    out = tmp_path / "sweep.csv"
    rc = main(["sweep", "--param", "alpha", "--values", "0.3,0.9",
               "--mode", "async-speculative", "--nodes", "3",
               "--draft-backend", "synthetic",
               "--out-csv", str(out), *QUICK])
    assert rc == 0
    assert out.exists()
    figdir = tmp_path / "sweep_figures"
    assert any(p.endswith(".png") for p in os.listdir(figdir))


def test_config_file_plus_flag_override(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "mode = pipeline-iterative\nnodes = 2\nvocab_size = 32\n"
        "embed_dim = 16\ntarget_layers = 4\nmax_context = 128\n"
        "prompt_len = 8\ngen_len = 8\nper_layer_delay = 1e-4\n"
    )
    out = tmp_path / "r.json"
    rc = main(["run", "--config", str(cfg), "--nodes", "4",
               "--out", str(out), "--no-figures"])
    assert rc == 0
    assert json.loads(out.read_text())["config"]["nodes"] == 4
