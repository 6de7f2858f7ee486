import hashlib
import json
import os

import pytest

from radseg.cli import main

TINY = [
    "--set", "geometry.range_bins=32",
    "--set", "geometry.angle_bins=32",
    "--set", "geometry.doppler_bins=16",
    "--set", "simulation.worlds=4",
    "--set", "simulation.frames_per_world=2",
    "--set", "simulation.objects=2",
    "--set", 'simulation.split_worlds={"train": 2, "val": 1, "test": 1}',
]


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def simulate(tmp_path, name="ds", extra=()):
    out = tmp_path / name
    assert main([*TINY, *extra, "simulate", "--out", str(out)]) == 0
    return out


def test_simulate_split_bookkeeping(tmp_path):
    out = simulate(tmp_path)
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    splits = manifest["splits"]
    assert {k: len(v) for k, v in splits.items()} == {"train": 4, "val": 2, "test": 2}
    ids = [fid for v in splits.values() for fid in v]
    assert len(set(ids)) == len(ids)
    for split, fids in splits.items():
        for fid in fids:
            assert fid.startswith(split + "/")
            assert (out / fid / "cube.bin").exists()


def test_simulate_reruns_byte_identical(tmp_path):
    a = simulate(tmp_path, "a")
    b = simulate(tmp_path, "b")
    assert tree_digest(a) == tree_digest(b)


def test_simulate_seed_changes_bytes(tmp_path):
    a = simulate(tmp_path, "a")
    b = simulate(tmp_path, "b", extra=["--set", "seed=1"])
    assert tree_digest(a) != tree_digest(b)


def test_invalid_geometry_rejected_before_writes(tmp_path):
    out = tmp_path / "bad"
    rc = main([*TINY, "--set", "geometry.range_bins=30",
               "simulate", "--out", str(out)])
    assert rc == 2
    assert not out.exists()


def test_unknown_override_key_rejected(tmp_path):
    assert main(["--set", "detect.bogus=1", "simulate", "--out", str(tmp_path / "x")]) == 2
    assert main(["--set", "nonsense", "simulate", "--out", str(tmp_path / "x")]) == 2


def test_unknown_config_file_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"detect": {"learning_rate": 0.1}}')
    assert main(["--config", str(cfg), "simulate", "--out", str(tmp_path / "x")]) == 2


def test_missing_dataset_is_usage_error(tmp_path):
    rc = main(["train-detect", "--dataset", str(tmp_path / "nope"),
               "--out", str(tmp_path / "run")])
    assert rc == 2


def test_missing_required_argument_is_usage_error(capsys):
    assert main(["simulate"]) == 2
    capsys.readouterr()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """Dataset + 1-epoch detector, shared by the slower CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = simulate(root)
    fast = [
        "--set", "detect.epochs=2",
        "--set", "detect.val_every_epochs=1",
        "--set", 'detect.channels=[4, 4, 4, 4]',
    ]
    run = root / "run"
    assert main([*TINY, *fast, "train-detect",
                 "--dataset", str(ds), "--out", str(run)]) == 0
    return root, ds, run, fast


def test_train_detect_artifacts(tiny_run):
    _, _, run, _ = tiny_run
    assert (run / "detector.ckpt").exists()
    assert (run / "config.json").exists()
    lines = [json.loads(l) for l in open(run / "train_detect.jsonl")]
    assert lines and all("step" in l for l in lines)
    assert any(l.get("val_mAP") is not None for l in lines)


def test_resume_extends_step_counter(tiny_run):
    root, ds, run, fast = tiny_run
    before = [json.loads(l)["step"] for l in open(run / "train_detect.jsonl")]
    assert main([*TINY, *fast, "train-detect", "--dataset", str(ds),
                 "--out", str(run), "--resume"]) == 0
    after = [json.loads(l)["step"] for l in open(run / "train_detect.jsonl")]
    assert after[: len(before)] == before
    assert after == sorted(after) and after[-1] > before[-1]


def test_eval_report_and_masks(tiny_run):
    root, ds, run, fast = tiny_run
    seg_fast = ["--set", "seg.epochs=2", "--set", "seg.val_every_epochs=1",
                "--set", 'seg.channels=[4, 6, 6, 4]']
    seg_run = root / "seg"
    assert main([*TINY, *seg_fast, "train-seg",
                 "--dataset", str(ds), "--out", str(seg_run)]) == 0
    out = root / "eval"
    masks = root / "masks"
    rc = main([*TINY, "eval", "--dataset", str(ds),
               "--detector", str(run / "detector.ckpt"),
               "--segmenter", str(seg_run / "segmenter.ckpt"),
               "--split", "test", "--out", str(out),
               "--masks", str(masks), "--sweep-dthresh", "3", "6"])
    assert rc == 0
    with open(out / "report.json") as fh:
        report = json.load(fh)
    assert set(report["detection"]["ap"]) == {"1.0", "3.0", "5.0"}
    assert "sweep" in report["region_growing"]
    ppms = sorted(masks.iterdir())
    assert len(ppms) == 4  # 2 test frames x 2 views
    assert ppms[0].read_bytes().startswith(b"P6\n32 32\n255\n")
    # the report subcommand accepts what eval wrote
    assert main(["report", str(out / "report.json")]) == 0


def test_eval_geometry_mismatch_is_config_error(tiny_run, tmp_path):
    root, ds, run, _ = tiny_run
    other = simulate(tmp_path, "other", extra=["--set", "geometry.range_bins=64"])
    rc = main([*TINY, "eval", "--dataset", str(other),
               "--detector", str(run / "detector.ckpt"),
               "--segmenter", str(run / "detector.ckpt"),
               "--split", "test", "--out", str(tmp_path / "e")])
    assert rc == 2


def test_prune_cli(tiny_run, tmp_path):
    root, ds, run, _ = tiny_run
    out = tmp_path / "pruned"
    rc = main([*TINY, "--set", "prune.fraction=0.5",
               "prune", "--checkpoint", str(run / "detector.ckpt"),
               "--out", str(out)])
    assert rc == 0
    with open(out / "prune_report.json") as fh:
        rep = json.load(fh)
    assert rep["params_after"] < rep["params_before"]
    from radseg.detector import load_detector

    pruned = load_detector(out / "detector_pruned.ckpt")
    assert sum(p.data.size for p in pruned.parameters()) == rep["params_after"]
