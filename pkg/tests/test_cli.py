import csv
import json
import logging

import numpy as np
import pytest

from srnam import cli
from srnam.errors import DivergenceError
from srnam.imagedata import read_png, synth_dataset, write_png

TINY = """
data.synthetic_hr = 8
data.synthetic_lr = 8
degrader.iterations = 4
degrader.batch_size = 4
degrader.channels = 4
degrader.d_steps_per_g_step = 2
hrgen.resolutions = [4, 8, 16]
hrgen.epochs = [1, 1, 1]
hrgen.batch_sizes = [4, 4, 4]
hrgen.latent_dim = 16
hrgen.channels = [8, 8, 8, 8, 8]
naminvert.iterations = 5
naminvert.lr = 0.01
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.conf"
    conf.write_text(TINY)
    out = root / "run"
    base = ["--config", str(conf), "--out", str(out)]
    assert cli.main(["train-degrader", *base]) == 0
    assert cli.main(["train-generator", *base]) == 0
    refs = root / "refs"
    hr = synth_dataset(2, 64, 9)
    lr = synth_dataset(2, 16, 9)
    for rec, img in zip(hr.items, hr.images):
        write_png(refs / f"{rec.id}.png", img)
    lr_dir = root / "lr"
    for rec, img in zip(lr.items, lr.images):
        write_png(lr_dir / f"{rec.id}.png", img)
    return {"root": root, "conf": conf, "out": out, "base": base, "refs": refs, "lr": lr_dir,
            "hr_ids": hr.ids, "lr_ids": lr.ids}


def test_training_outputs(run):
    out = run["out"]
    assert (out / "degrader" / "manifest.json").is_file()
    assert (out / "degrader" / "loss_history.csv").is_file()
    assert sorted(p.name for p in (out / "generator").glob("stage_*")) == ["stage_16", "stage_4", "stage_8"]
    assert (out / "generator" / "stage_16" / "samples.png").is_file()


def test_sample_grid_regenerates(run):
    from srnam.hrgen import load_progressive, render_samples
    stage = run["out"] / "generator" / "stage_16"
    g, _, manifest = load_progressive(stage)
    regen = render_samples(g, manifest["seeds"]["sample_seed"]).numpy()
    assert np.abs(regen - np.load(stage / "samples.npy")).max() <= 1e-6


def test_training_refuses_overwrite_and_reruns_identically(run, tmp_path):
    assert cli.main(["train-degrader", *run["base"]]) == 2
    other = tmp_path / "again"
    assert cli.main(["train-degrader", "--config", str(run["conf"]), "--out", str(other)]) == 0
    a = (run["out"] / "degrader" / "loss_history.csv").read_bytes()
    assert (other / "degrader" / "loss_history.csv").read_bytes() == a
    assert cli.main(["train-degrader", "--config", str(run["conf"]), "--out", str(other), "--overwrite"]) == 0
    assert (other / "degrader" / "loss_history.csv").read_bytes() == a
    assert cli.main(["train-degrader", "--config", str(run["conf"]), "--out", str(other), "--overwrite",
                     "--seed", "5"]) == 0
    assert (other / "degrader" / "loss_history.csv").read_bytes() != a


def test_missing_dataset_names_key(run, tmp_path, caplog):
    with caplog.at_level(logging.ERROR, logger="srnam"):
        code = cli.main(["train-degrader", "--config", str(run["conf"]), "--out", str(tmp_path),
                         "--set", "data.hr_manifest=/does/not/exist.jsonl"])
    assert code == 2
    assert "data.hr_manifest" in caplog.text


@pytest.mark.parametrize("argv", [
    ["train-generator", "--set", "hrgen.resolutions=[4,16]", "--set", "hrgen.epochs=[1,1]",
     "--set", "hrgen.batch_sizes=[4,4]"],
    ["train-degrader", "--set", "nope.key=1"],
    ["train-degrader", "--set", "degrader.alpha=-1"],
])
def test_config_errors(run, tmp_path, argv):
    assert cli.main([*argv, "--config", str(run["conf"]), "--out", str(tmp_path)]) == 2


def test_missing_config_file(tmp_path):
    assert cli.main(["train-degrader", "--config", str(tmp_path / "x.conf")]) == 2


def test_divergence_exit_code(run, tmp_path, monkeypatch):
    def boom(*a, **kw):
        raise DivergenceError("non-finite loss at iteration 0")
    monkeypatch.setattr(cli.deg, "train_degrader", boom)
    assert cli.main(["train-degrader", "--config", str(run["conf"]), "--out", str(tmp_path)]) == 3


def test_degrade(run):
    hr = run["refs"] / f"{run['hr_ids'][0]}.png"
    assert cli.main(["degrade", *run["base"], "--hr-image", str(hr), "--count", "3"]) == 0
    files = sorted((run["out"] / "degraded").glob(f"{hr.stem}_lr*.png"))
    assert len(files) == 3
    data = [f.read_bytes() for f in files]
    assert len(set(data)) == 3
    assert cli.main(["degrade", *run["base"], "--hr-image", str(hr), "--count", "3"]) == 0
    assert [f.read_bytes() for f in files] == data
    assert all(read_png(f).shape == (3, 16, 16) for f in files)


def test_degrade_errors(run, tmp_path):
    lr = run["lr"] / f"{run['lr_ids'][0]}.png"
    assert cli.main(["degrade", *run["base"], "--hr-image", str(lr)]) == 2
    hr = run["refs"] / f"{run['hr_ids'][0]}.png"
    assert cli.main(["degrade", "--out", str(tmp_path), "--hr-image", str(hr)]) == 4


def test_invert_counts_and_determinism(run):
    lr = run["lr"] / f"{run['lr_ids'][0]}.png"
    argv = ["invert", *run["base"], "--lr-image", str(lr), "-K", "3", "--iters", "5", "--seed", "1"]
    assert cli.main(argv) == 0
    inv = run["out"] / "invert"
    pngs = sorted(inv.glob(f"{lr.stem}_sol*.png"))
    assert len(pngs) == 6
    report = (inv / "report.jsonl").read_bytes()
    lines = [json.loads(line) for line in report.decode().splitlines()]
    assert len(lines) == 3 and [r["k"] for r in lines] == [0, 1, 2]
    objs = [r["best_objective"] for r in lines]
    assert objs == sorted(objs)
    assert (run["out"] / "grids" / f"{lr.stem}.png").is_file()
    assert read_png(run["out"] / "grids" / f"{lr.stem}.png").shape == (3, 128, 256)
    assert cli.main(argv) == 0
    assert (inv / "report.jsonl").read_bytes() == report


@pytest.mark.parametrize("iters", ["0", "10001"])
def test_invert_iters_validation(run, iters):
    lr = run["lr"] / f"{run['lr_ids'][0]}.png"
    assert cli.main(["invert", *run["base"], "--lr-image", str(lr), "--iters", iters]) == 2


def test_invert_checkpoint_errors(run, tmp_path):
    lr = run["lr"] / f"{run['lr_ids'][0]}.png"
    assert cli.main(["invert", "--out", str(tmp_path), "--lr-image", str(lr)]) == 4
    # a degrader whose noise size disagrees with nothing is fine; a generator dir without stages is not
    (tmp_path / "generator").mkdir()
    assert cli.main(["invert", "--out", str(tmp_path), "--lr-image", str(lr),
                     "--set", f"checkpoints.degrader={run['out'] / 'degrader'}"]) == 4


def _solutions(tmp_path, ids, k, source):
    d = tmp_path / "sols"
    for i in ids:
        for j in range(k):
            write_png(d / f"{i}_sol{j}_hr.png", read_png(source / f"{i}.png"))
    return d


def test_eval_identical_solutions(run, tmp_path):
    sols = _solutions(tmp_path, run["hr_ids"], 1, run["refs"])
    report = tmp_path / "eval.csv"
    assert cli.main(["eval", "--out", str(tmp_path), "--solutions-dir", str(sols),
                     "--reference-dir", str(run["refs"]), "--report", str(report)]) == 0
    rows = list(csv.DictReader(open(report)))
    assert len(rows) == len(run["hr_ids"])
    assert all(float(r["heatmap_metric"]) == 0.0 for r in rows)
    assert all(r["diversity"] == "" for r in rows)


def test_eval_multi_solution_diversity(run, tmp_path):
    sols = _solutions(tmp_path, run["hr_ids"][:1], 2, run["refs"])
    assert cli.main(["eval", "--out", str(tmp_path), "--solutions-dir", str(sols),
                     "--reference-dir", str(run["refs"])]) == 0
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert len(rows) == 2 and all(float(r["diversity"]) == 0.0 for r in rows)


def test_eval_mismatched_ids(run, tmp_path):
    sols = _solutions(tmp_path, run["hr_ids"], 1, run["refs"])
    write_png(sols / "stranger_sol0_hr.png", read_png(run["refs"] / f"{run['hr_ids'][0]}.png"))
    assert cli.main(["eval", "--out", str(tmp_path), "--solutions-dir", str(sols),
                     "--reference-dir", str(run["refs"])]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["eval", "--out", str(tmp_path), "--solutions-dir", str(empty),
                     "--reference-dir", str(run["refs"])]) == 2


def test_synth_command(tmp_path):
    assert cli.main(["synth", "--count", "3", "--resolution", "16", "--seed", "2", str(tmp_path / "d")]) == 0
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert json.loads(lines[0]) == {"role": "LR", "resolution": 16} and len(lines) == 4


def test_manifest_datasets_train(tmp_path):
    for role, res in (("hr", 64), ("lr", 16)):
        assert cli.main(["synth", "--count", "4", "--resolution", str(res), str(tmp_path / role)]) == 0
    conf = tmp_path / "c.conf"
    conf.write_text(TINY + f"\ndata.hr_manifest = \"{tmp_path / 'hr' / 'manifest.jsonl'}\"\n"
                           f"data.lr_manifest = \"{tmp_path / 'lr' / 'manifest.jsonl'}\"\n")
    assert cli.main(["train-degrader", "--config", str(conf), "--out", str(tmp_path / "o"),
                     "--set", "degrader.iterations=2"]) == 0


def test_config_parsing():
    cfg = cli.load_config(None, ["degrader.gp_lambda=3", "hrgen.epochs=[1, 2]", "percept.backend=vgg"])
    assert cfg["degrader.gp_lambda"] == 3 and cfg["hrgen.epochs"] == [1, 2] and cfg["percept.backend"] == "vgg"
    with pytest.raises(Exception):
        cli.parse_assignments(["no equals sign"])
