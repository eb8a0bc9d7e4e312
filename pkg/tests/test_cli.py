import csv
import json
from pathlib import Path

import pytest
import torch
import yaml
from hypothesis import given, settings, strategies as st

from scaleda import cli
from scaleda.cli import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config, main

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "seeds": [0],
    "data": {
        "source": {"profile": "loc-A", "gsd_m": 0.25, "tile_px": 64, "num_tiles": 4, "seed": 1},
        "target": {"profile": "loc-B", "gsd_m": 0.45, "tile_px": 64, "num_tiles": 4, "seed": 2},
        "val_tiles": 2,
    },
    "train": {"max_iter": 2, "batch_size": 2, "eval_interval": 1, "enable_d_feat": False,
              "enable_d_scale": False, "enable_sam": False},
}


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    out = root / "out"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


def argv(cmd, run_root, *extra):
    cfg_path, out = run_root
    return [cmd, "--config", str(cfg_path), "--out", str(out), *extra]


def test_example_config_is_the_default():
    assert load_config(ROOT / "configs" / "example.yaml") == ExperimentConfig()


@pytest.mark.parametrize("name", ["example.yaml", "ablation.yaml", "resample_bench.yaml"])
def test_shipped_configs_parse(name):
    cfg = load_config(ROOT / "configs" / name)
    assert cfg.train.max_iter <= 3000 or name == "example.yaml"


@settings(max_examples=25, deadline=None)
@given(seeds=st.lists(st.integers(0, 99), min_size=1, max_size=4), lam=st.floats(0, 1), it=st.integers(0, 3000),
       sam=st.booleans(), gsd=st.sampled_from([0.05, 0.1, 0.25]))
def test_round_trip_is_a_fixed_point(seeds, lam, it, sam, gsd):
    d = {"seeds": seeds, "train": {"lambda_f": lam, "max_iter": it, "enable_sam": sam},
         "data": {"source": {"gsd_m": gsd, "tile_px": 400}}}
    once = config_from_dict(d)
    twice = config_from_dict(yaml.safe_load(dump_config(once)))
    assert once == twice and dump_config(once) == dump_config(twice)


@pytest.mark.parametrize("bad,needle", [
    ({"extra": 1}, "unknown config key extra"),
    ({"data": {"source": {"colour": 1}}}, "data.source.colour"),
    ({"train": {"optimizer": {"momentum": 0.9}}}, "train.optimizer.momentum"),
    ({"train": {"checkpoint_dir": "x"}}, "train.checkpoint_dir"),
    ({"train": {"max_iter": "many"}}, "train.max_iter"),
    ({"data": {"source": {"profile": "loc-Q"}}}, "loc-Q"),
    ({"data": {"source": {"gsd_m": 0.05, "tile_px": 64}}}, "cannot fit"),
    ({"seeds": []}, "seeds"),
])
def test_invalid_configs_rejected(bad, needle):
    with pytest.raises(ConfigError, match=needle):
        config_from_dict(bad)


def test_config_errors_exit_2(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("extra: 1\n")
    assert main(["train", "--config", str(p)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    p.write_text("data: [unclosed\n")
    assert main(["train", "--config", str(p)]) == 2
    assert main(["bogus", "--config", str(p)]) == 2
    assert main(["train"]) == 2


def test_default_gen_data_scales(tmp_path):
    cfg = config_from_dict({"data": {"source": {"num_tiles": 1}, "target": {"num_tiles": 1}, "val_tiles": 1}})
    manifest = cli.cmd_gen_data(cfg, tmp_path, force=False)
    assert (manifest["source"]["profile"], manifest["theta_gsd_m"]) == ("loc-A", 0.05)
    assert (manifest["target"]["profile"], manifest["sigma_gsd_m"]) == ("loc-B", 0.09)
    meta = json.loads((tmp_path / "data" / "target" / "meta.json").read_text())
    assert meta["gsd_m"] == 0.09 and meta["location"] == "target" and len(meta["tiles"]) == 1


def test_gen_data_refuses_overwrite(run_root):
    assert main(argv("gen-data", run_root)) == 2
    assert main(argv("gen-data", run_root, "--force")) == 0
    manifest = json.loads((run_root[1] / "data" / "manifest.json").read_text())
    assert manifest["theta_gsd_m"] == 0.25 and manifest["sigma_gsd_m"] == 0.45


def test_train_then_eval_and_report(run_root):
    out = run_root[1]
    assert main(argv("train", run_root, "--force")) == 0
    for name in ("final.pt", "last.pt", "best.pt", "trace.jsonl", "history.json", "eval.json"):
        assert (out / "train" / name).exists()
    assert main(argv("train", run_root)) == 2

    assert main(argv("eval", run_root, "--force")) == 0
    ev = json.loads((out / "eval.json").read_text())
    assert ev["miou"] == json.loads((out / "train" / "eval.json").read_text())["miou"]

    assert main(argv("report", run_root, "--force")) == 0
    rdir = out / "report"
    for name in ("report.md", "loss_curves.csv", "embeddings.csv", "metrics.json"):
        assert (rdir / name).exists()
    trace = [json.loads(l) for l in (out / "train" / "trace.jsonl").read_text().splitlines()]
    with open(rdir / "loss_curves.csv") as fh:
        curves = list(csv.DictReader(fh))
    assert len(curves) == len(trace)
    for row, t in zip(curves, trace):
        assert all(float(row[k]) == t[k] for k in t)
    with open(rdir / "embeddings.csv") as fh:
        emb = list(csv.reader(fh))
    assert len(emb) - 1 == 4 + 2 and len(emb[1]) == 3 + 128
    assert {r[1] for r in emb[1:]} == {"source", "target"}


def test_report_needs_artifacts(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(TINY))
    assert main(["report", "--config", str(p), "--out", str(tmp_path / "nothing")]) == 3
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "nothing")]) == 3


def test_ablation_matrix_and_shared_source_only_row(run_root):
    out = run_root[1]
    assert main(argv("ablate", run_root, "--force")) == 0
    res = json.loads((out / "ablate" / "results.json").read_text())
    assert list(res["rows"]) == [name for name, _ in cli.ABLATION_ROWS] and len(res["rows"]) == 7
    assert len(res["verdicts"]) == 5
    assert (out / "ablate" / "results.md").read_text().count("|") > 0
    # the tiny config trains source-only, so `train` and the matrix row must agree
    if not (out / "train" / "final.pt").exists():
        assert main(argv("train", run_root, "--force")) == 0
    a = torch.load(out / "train" / "final.pt", weights_only=False)["tensors"]
    b = torch.load(out / "ablate" / "source-only" / "seed0" / "final.pt", weights_only=False)["tensors"]
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_resample_matrix(run_root):
    out = run_root[1]
    assert main(argv("resample-bench", run_root, "--force")) == 0
    res = json.loads((out / "resample" / "results.json").read_text())
    assert list(res["rows"]) == [name for name, _, _ in cli.RESAMPLE_ROWS]
    # test-resampled rows reuse the native model; only the eval set changes
    assert not (out / "resample" / "no-da-test-resampled").exists()
    assert sorted(p.name for p in (out / "resample").iterdir() if p.is_dir()) == sorted(cli.RESAMPLE_RECIPES)


def test_failed_row_is_recorded_and_matrix_continues(run_root, monkeypatch):
    real = cli._train

    def flaky(cfg, tcfg, *a, **kw):
        if tcfg.enable_sam:
            raise RuntimeError("injected failure")
        return real(cfg, tcfg, *a, **kw)

    monkeypatch.setattr(cli, "_train", flaky)
    cfg = load_config(run_root[0])
    res = cli.cmd_ablate(cfg, run_root[1], force=True)
    assert res["failed"]
    assert "injected failure" in res["rows"]["source-only+SAM"]["errors"]["0"]
    assert res["rows"]["oracle"]["median_miou"] is not None
    assert main(argv("ablate", run_root, "--force")) == 3


def test_seed_flag_overrides(run_root, monkeypatch):
    seen = []
    monkeypatch.setattr(cli, "COMMANDS", {**cli.COMMANDS, "train": lambda cfg, out, force: seen.append(cfg)})
    assert main(argv("train", run_root, "--seed", "7")) == 0
    assert seen[0].seeds == [7] and seen[0].train.seed == 7
