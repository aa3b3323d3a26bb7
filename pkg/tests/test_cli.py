"""End-to-end command-line behaviour through main(argv)."""

import numpy as np
import yaml

from pqm.cli import main
from pqm.core import derive_quality_map
from pqm.data import (
    load_manifest,
    load_mask,
    load_quality_map,
    save_image,
    save_mask,
    save_quality_map,
)
from pqm.model import load_checkpoint


def write_pair(tmp_path, seed=0, size=16):
    rng = np.random.default_rng(seed)
    gt = np.zeros((size, size), dtype=np.uint8)
    gt[3:9, 3:9] = 1
    pred = np.zeros((size, size), dtype=np.uint8)
    pred[3:9, 4:10] = 1
    image = rng.integers(0, 255, (size, size, 3)).astype(np.uint8)
    save_mask(tmp_path / "gt.png", gt)
    save_mask(tmp_path / "pred.png", pred)
    save_image(tmp_path / "image.png", image)
    return gt, pred


def test_pqm_gt_writes_quality_map(tmp_path, capsys):
    gt, pred = write_pair(tmp_path)
    rc = main([
        "pqm-gt", "--gt", str(tmp_path / "gt.png"),
        "--pred", str(tmp_path / "pred.png"),
        "--out", str(tmp_path / "q.png"),
    ])
    assert rc == 0
    q = load_quality_map(tmp_path / "q.png")
    np.testing.assert_array_equal(q, derive_quality_map(gt, pred))


def test_eval_identical_maps_prints_100(tmp_path, capsys):
    gt, pred = write_pair(tmp_path)
    q = derive_quality_map(gt, pred)
    save_quality_map(tmp_path / "q.png", q)
    rc = main(["eval", "--pred", str(tmp_path / "q.png"), "--gt", str(tmp_path / "q.png")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "mF1=100.00" in out
    assert "mIoU=100.00" in out
    assert out.splitlines()[0].startswith("F1_TP\t")


def test_stats_reports_eib(tmp_path, capsys):
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:6, 2:6] = 1
    pred = np.zeros((8, 8), dtype=np.uint8)
    pred[2:6, 3:7] = 1
    save_mask(tmp_path / "g.png", gt)
    save_mask(tmp_path / "p.png", pred)
    save_image(tmp_path / "i.png", np.zeros((8, 8, 3), dtype=np.uint8))
    (tmp_path / "m.tsv").write_text("s0\ti.png\tp.png\tg.png\n")
    rc = main(["stats", "--manifest", str(tmp_path / "m.tsv")])
    assert rc == 0
    assert "EIB@3\t100.00" in capsys.readouterr().out


def test_stats_missing_unchecked_fails(tmp_path, capsys):
    write_pair(tmp_path)
    (tmp_path / "m.tsv").write_text("s0\timage.png\t-\tgt.png\n")
    rc = main(["stats", "--manifest", str(tmp_path / "m.tsv")])
    assert rc == 1
    assert "s0" in capsys.readouterr().err


def test_tile_writes_grid_and_manifest(tmp_path, capsys):
    rng = np.random.default_rng(1)
    save_image(tmp_path / "big.png", rng.integers(0, 255, (32, 48, 3)).astype(np.uint8))
    gt = np.zeros((32, 48), dtype=np.uint8)
    gt[:16, :16] = 1
    save_mask(tmp_path / "big_gt.png", gt)
    out_dir = tmp_path / "tiles"
    rc = main([
        "tile", "--image", str(tmp_path / "big.png"), "--gt", str(tmp_path / "big_gt.png"),
        "--tile", "16", "--out", str(out_dir),
    ])
    assert rc == 0
    manifest = load_manifest(out_dir / "manifest.tsv")
    assert len(manifest.entries) == 2 * 3
    rc = main([
        "tile", "--image", str(tmp_path / "big.png"), "--gt", str(tmp_path / "big_gt.png"),
        "--tile", "16", "--out", str(tmp_path / "tiles2"), "--drop-empty",
    ])
    assert rc == 0
    assert len(load_manifest(tmp_path / "tiles2" / "manifest.tsv").entries) == 1


def test_unknown_subcommand_exits_nonzero(capsys):
    assert main(["frobnicate"]) != 0
    assert main([]) != 0


def test_missing_flags_reported(tmp_path, capsys):
    rc = main(["pqm-gt", "--gt", str(tmp_path / "nope.png")])
    assert rc == 1
    assert "--pred" in capsys.readouterr().err


def training_config(tmp_path, max_epochs=2):
    cfg = {
        "model": {
            "image_size": 16, "d_im": 8, "d_pr": 8,
            "stage_depths": [1, 1, 1, 1], "num_heads": 2,
            "pixel_mean": [0.5, 0.5, 0.5], "pixel_std": [0.5, 0.5, 0.5],
        },
        "trainer": {
            "n_aug": 2, "learning_rate": 0.001, "patience": 1,
            "max_epochs": max_epochs, "seed": 0, "batch_size": 1,
        },
        "pool": ["identity", "rot90", "flip_h"],
        "sources": [
            {"name": "d1", "dilate": 1, "seed": 1},
            {"name": "e1", "erode": 1, "seed": 2},
        ],
        "class_weights": {"tp": 0.5, "fp": 5.0, "tn": 0.1, "fn": 5.0},
        "val_fraction": 0.34,
    }
    path = tmp_path / "train.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def write_training_manifest(tmp_path, n=3, size=16):
    rng = np.random.default_rng(7)
    lines = []
    for i in range(n):
        gt = np.zeros((size, size), dtype=np.uint8)
        gt[2 + i: 9 + i, 3: 10] = 1
        image = rng.integers(0, 120, (size, size, 3)).astype(np.uint8)
        image[gt == 1] = 200
        save_image(tmp_path / f"i{i}.png", image)
        save_mask(tmp_path / f"g{i}.png", gt)
        lines.append(f"s{i}\ti{i}.png\t-\tg{i}.png")
    (tmp_path / "train.tsv").write_text("\n".join(lines) + "\n")
    return tmp_path / "train.tsv"


def test_train_then_assess_round_trip(tmp_path, capsys):
    manifest = write_training_manifest(tmp_path)
    config = training_config(tmp_path)
    ckpt = tmp_path / "model.pt"
    rc = main([
        "train", "--manifest", str(manifest), "--config", str(config), "--out", str(ckpt),
    ])
    assert rc == 0, capsys.readouterr().err
    assert ckpt.exists()
    assert ckpt.with_suffix(".losses.tsv").exists()
    assert ckpt.with_suffix(".metrics.tsv").exists()
    model, payload = load_checkpoint(ckpt)
    assert payload["step"] > 0
    # assess with the trained checkpoint
    save_mask(tmp_path / "unc.png", load_mask(tmp_path / "g0.png"))
    rc = main([
        "assess", "--image", str(tmp_path / "i0.png"), "--pred", str(tmp_path / "unc.png"),
        "--checkpoint", str(ckpt), "--out", str(tmp_path / "q.png"),
    ])
    assert rc == 0
    q = load_quality_map(tmp_path / "q.png")
    assert q.shape == (16, 16)
    assert set(np.unique(q)) <= {0, 1, 2, 3}
    edges = load_mask(tmp_path / "q.edges.png")
    assert edges.shape == (16, 16)


def test_assess_size_mismatch_fails(tmp_path, capsys):
    manifest = write_training_manifest(tmp_path)
    config = training_config(tmp_path, max_epochs=1)
    ckpt = tmp_path / "m.pt"
    assert main(["train", "--manifest", str(manifest), "--config", str(config), "--out", str(ckpt)]) == 0
    save_image(tmp_path / "big.png", np.zeros((32, 32, 3), dtype=np.uint8))
    save_mask(tmp_path / "bigm.png", np.zeros((32, 32), dtype=np.uint8))
    rc = main([
        "assess", "--image", str(tmp_path / "big.png"), "--pred", str(tmp_path / "bigm.png"),
        "--checkpoint", str(ckpt), "--out", str(tmp_path / "q.png"),
    ])
    assert rc == 1
    assert "expects" in capsys.readouterr().err


def test_train_seed_flag_overrides_config(tmp_path):
    manifest = write_training_manifest(tmp_path)
    config = training_config(tmp_path, max_epochs=1)

    def run(seed):
        out = tmp_path / f"m{seed}.pt"
        assert main([
            "train", "--manifest", str(manifest), "--config", str(config),
            "--out", str(out), "--seed", str(seed),
        ]) == 0
        return out.with_suffix(".losses.tsv").read_text()

    a, b, c = run(1), run(1), run(2)
    assert a == b
    assert a != c


def test_render_decode_byte_round_trip(tmp_path):
    # palette raster -> classes -> palette raster is byte-identical
    rng = np.random.default_rng(3)
    q = rng.integers(0, 4, (10, 10)).astype(np.uint8)
    p1 = tmp_path / "a.png"
    p2 = tmp_path / "b.png"
    save_quality_map(p1, q)
    save_quality_map(p2, load_quality_map(p1))
    assert p1.read_bytes() == p2.read_bytes()
