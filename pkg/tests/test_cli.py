import json
import os

import numpy as np
import pytest

from moei import checkpoint as ck
from moei.cli import main
from moei.export import read_csv

SMALL = ["--model.d_model", "16", "--model.n_layers", "1", "--model.n_heads", "2", "--model.d_ff", "32",
         "--model.max_seq_len", "40", "--bench.gi_train", "40", "--bench.gi_eval", "6", "--bench.ei_train", "24",
         "--bench.ei_eval", "6", "--train.epochs", "1", "--train.pretrain_epochs", "1", "--train.batch_size", "8",
         "--train.replay_size", "16", "--train.replay_interval", "2", "--adapters.N", "2", "--adapters.r", "2"]


def run(tmp_path, name, *args):
    out = str(tmp_path / name)
    return main([args[0]] + SMALL + list(args[1:]) + ["--output_dir", out]), out


@pytest.fixture(scope="module")
def backbone(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    code = main(["pretrain"] + SMALL + ["--output_dir", str(d / "pre")])
    assert code == 0
    return str(d / "pre" / "backbone.ckpt")


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["train", "--method"]) == 1


def test_validation_errors_exit_2(tmp_path, capsys):
    code, _ = run(tmp_path, "a", "train", "--adapters.N", "0")
    assert code == 2 and "N >= 1" in capsys.readouterr().err
    code, _ = run(tmp_path, "b", "train", "--train.momentum", "0.9")
    assert code == 2 and "train.lambda" in capsys.readouterr().err
    code, _ = run(tmp_path, "c", "train", "--method", "Distill")
    assert code == 2
    code, _ = run(tmp_path, "d", "eval", "--checkpoint", str(tmp_path / "missing.ckpt"))
    assert code == 2 and "not found" in capsys.readouterr().err


def test_pretrain_writes_manifest(backbone):
    out = os.path.dirname(backbone)
    manifest = json.load(open(os.path.join(out, "manifest.json")))
    paths = {a["path"] for a in manifest["artifacts"]}
    assert {"backbone.ckpt", "pretrain_scores.json", "config.txt"} <= paths
    assert manifest["command"] == "pretrain" and manifest["config"]["model.d_model"] == 16
    assert os.path.exists(os.path.join(out, "run.log"))


def test_ablate_reports_every_method(tmp_path, backbone, capsys):
    code, out = run(tmp_path, "abl", "ablate", "--backbone", backbone)
    assert code == 0
    rows = read_csv(os.path.join(out, "ablation.csv"))
    assert len(rows) == 8 and len({r["method"] for r in rows}) == 8
    assert "MoEI" in capsys.readouterr().out
    assert main(["plot", "--input", out, "--output_dir", str(tmp_path / "fig")]) == 0
    pngs = os.listdir(tmp_path / "fig" / "plots")
    assert "forgetting.png" in pngs and any(p.startswith("router_") for p in pngs)
    for p in pngs:
        assert open(tmp_path / "fig" / "plots" / p, "rb").read(8) == b"\x89PNG\r\n\x1a\n"


def test_route_stats_untrained_is_uniform(tmp_path, backbone):
    from moei.adapters import AdapterSpec, inject
    from moei.rng import stream

    model = ck.load_checkpoint(backbone).model
    sites = inject(model, AdapterSpec(N=2, r=2), stream(0, "cli"))
    path = str(tmp_path / "fresh.ckpt")
    ck.save_checkpoint(path, model, sites)
    before = open(path, "rb").read()
    code, out = run(tmp_path, "rs", "route-stats", "--checkpoint", path)
    assert code == 0
    assert open(path, "rb").read() == before
    for rec in read_csv(os.path.join(out, "route_stats.csv")):
        vals = [float(rec[k]) for k in ("alpha", "beta_1", "beta_2")]
        assert np.allclose(vals, 1 / 3, atol=1e-6)


def test_route_stats_needs_routers(tmp_path, backbone):
    code, _ = run(tmp_path, "rs", "route-stats", "--checkpoint", backbone)
    assert code == 2


def test_train_then_eval(tmp_path, backbone):
    code, out = run(tmp_path, "tr", "train", "--method", "MoEI", "--backbone", backbone)
    assert code == 0
    assert {"moei.ckpt", "metrics.csv", "router_stats.csv"} <= set(os.listdir(out))
    code, ev = run(tmp_path, "ev", "eval", "--checkpoint", os.path.join(out, "moei.ckpt"))
    assert code == 0
    scores = json.load(open(os.path.join(ev, "eval.json")))
    rows = {r["dimension"]: r for r in read_csv(os.path.join(out, "metrics.csv")) if r["method"] == "MoEI"}
    for name, value in scores.items():
        assert value == pytest.approx(float(rows[name]["after"]))


def test_sweep_and_config_file(tmp_path, backbone):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.lambda = 0.5\n")
    code, out = run(tmp_path, "sw", "sweep-replay", "--config", str(cfg), "--sizes", "0,8",
                    "--methods", "MoEI", "--backbone", backbone)
    assert code == 0
    rows = read_csv(os.path.join(out, "sweep.csv"))
    assert [int(r["replay_size"]) for r in rows] == [0, 8]
    assert "train.lambda = 0.5" in open(os.path.join(out, "config.txt")).read()
