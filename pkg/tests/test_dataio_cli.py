import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from bsrnkit.blocks import AttentionMode
from bsrnkit.cli import main
from bsrnkit.dataio import (
    DatasetError,
    DatasetLayout,
    ImagePair,
    PngFormatError,
    center_crop_to_multiple,
    load_pair,
    load_png,
    save_png,
    scan_dataset,
)
from bsrnkit.imaging import PlanarImage, bicubic_resize, resize_rgb
from bsrnkit.model import ModelConfig, build, save_checkpoint

TINY = ModelConfig(scale=2, channels=8, num_blocks=1, input_copies=2,
                   distilled_channels=4, esa_channels=4, attention=AttentionMode.CCA)


def random_image(rng, h=24, w=24):
    return PlanarImage(rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8))


def smooth_png(path, h, w, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.stack(
        [0.5 + 0.4 * np.sin(2 * np.pi * (a * xx + b * yy + rng.random())) for a, b in ((1, 2), (2, 1), (1, 1))],
        axis=2,
    )
    save_png(PlanarImage.from_float(np.clip(img, 0, 1)), path)


class TestPng:
    def test_save_load_round_trip(self, rng, tmp_path):
        img = random_image(rng)
        save_png(img, tmp_path / "a.png")
        np.testing.assert_array_equal(load_png(tmp_path / "a.png").pixels, img.pixels)

    def test_one_by_one_image(self, tmp_path):
        img = PlanarImage(np.array([[[1, 2, 3]]], dtype=np.uint8))
        save_png(img, tmp_path / "tiny.png")
        np.testing.assert_array_equal(load_png(tmp_path / "tiny.png").pixels, img.pixels)

    def test_grayscale_promoted_to_rgb(self, rng, tmp_path):
        from PIL import Image

        gray = rng.integers(0, 256, size=(6, 5)).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(tmp_path / "g.png")
        img = load_png(tmp_path / "g.png")
        assert img.pixels.shape == (6, 5, 3)
        np.testing.assert_array_equal(img.pixels[..., 0], gray)
        np.testing.assert_array_equal(img.pixels[..., 1], gray)

    def test_sixteen_bit_rejected(self, rng, tmp_path):
        from PIL import Image

        deep = (rng.integers(0, 65536, size=(4, 4))).astype(np.uint16)
        Image.fromarray(deep).save(tmp_path / "deep.png")
        with pytest.raises(PngFormatError, match="bit depth 16"):
            load_png(tmp_path / "deep.png")

    def test_interlaced_rejected(self, rng, tmp_path):
        save_png(random_image(rng, 4, 4), tmp_path / "x.png")
        raw = bytearray((tmp_path / "x.png").read_bytes())
        raw[28] = 1  # interlace flag inside IHDR
        raw[29:33] = struct.pack(">I", zlib.crc32(bytes(raw[12:29])))
        (tmp_path / "x.png").write_bytes(bytes(raw))
        with pytest.raises(PngFormatError, match="interlaced"):
            load_png(tmp_path / "x.png")

    def test_non_png_rejected(self, tmp_path):
        (tmp_path / "not.png").write_bytes(b"definitely not a png file" * 3)
        with pytest.raises(PngFormatError, match="signature"):
            load_png(tmp_path / "not.png")


class TestDataset:
    def _make(self, tmp_path, stems, scale=2, with_lr=True, lr_override=None):
        (tmp_path / "HR").mkdir(parents=True, exist_ok=True)
        if with_lr:
            (tmp_path / f"LR_x{scale}").mkdir(exist_ok=True)
        for i, stem in enumerate(stems):
            smooth_png(tmp_path / "HR" / f"{stem}.png", 32, 32, i)
            if with_lr:
                hr = load_png(tmp_path / "HR" / f"{stem}.png")
                lr = lr_override or resize_rgb(hr, scale=1.0 / scale)
                save_png(lr, tmp_path / f"LR_x{scale}" / f"{stem}.png")
        return DatasetLayout(tmp_path, scale)

    def test_pairs_sorted_by_stem(self, tmp_path):
        layout = self._make(tmp_path, ["bird", "apple", "cat"])
        pairs = scan_dataset(layout)
        assert [p.stem for p in pairs] == ["apple", "bird", "cat"]

    def test_missing_lr_partner_named(self, tmp_path):
        layout = self._make(tmp_path, ["a", "b"])
        (tmp_path / "LR_x2" / "b.png").unlink()
        with pytest.raises(DatasetError, match="b.png has no LR partner"):
            scan_dataset(layout)

    def test_all_problems_listed(self, tmp_path):
        layout = self._make(tmp_path, ["a", "b"])
        (tmp_path / "LR_x2" / "a.png").unlink()
        (tmp_path / "LR_x2" / "zzz.png").write_bytes((tmp_path / "LR_x2" / "b.png").read_bytes())
        with pytest.raises(DatasetError) as err:
            scan_dataset(layout)
        assert "a.png has no LR partner" in str(err.value)
        assert "zzz.png has no HR partner" in str(err.value)

    def test_dimension_mismatch_reported(self, tmp_path):
        layout = self._make(tmp_path, ["a"])
        bad = resize_rgb(load_png(tmp_path / "HR" / "a.png"), scale=0.25)
        save_png(bad, tmp_path / "LR_x2" / "a.png")
        with pytest.raises(DatasetError, match="expected 16x16"):
            scan_dataset(layout)

    def test_lr_generated_when_absent(self, tmp_path):
        layout = self._make(tmp_path, ["a"], with_lr=False)
        pairs = scan_dataset(layout)
        assert pairs[0].lr_path is None
        lr, hr = load_pair(layout, pairs[0])
        assert (lr.height, lr.width) == (16, 16)
        assert (hr.height, hr.width) == (32, 32)

    def test_center_crop_to_multiple(self, rng):
        img = random_image(rng, 11, 13)
        cropped = center_crop_to_multiple(img, 4)
        assert (cropped.height, cropped.width) == (8, 12)
        np.testing.assert_array_equal(cropped.pixels, img.pixels[1:9, 0:12])

    def test_indivisible_hr_handled_by_cropping(self, tmp_path):
        (tmp_path / "HR").mkdir()
        smooth_png(tmp_path / "HR" / "odd.png", 33, 34, 0)
        layout = DatasetLayout(tmp_path, 4)
        lr, hr = load_pair(layout, scan_dataset(layout)[0])
        assert (hr.height, hr.width) == (32, 32)
        assert (lr.height, lr.width) == (8, 8)


class TestCli:
    def test_summary_json_and_bands(self, tmp_path, capsys):
        out = tmp_path / "rep.json"
        assert main(["summary", "--preset", "bsrn", "--scale", "4", "--json", str(out)]) == 0
        text = capsys.readouterr().out
        assert "Params[K]" in text
        payload = json.loads(out.read_text())
        assert abs(payload["params"] - 352_000) <= 0.03 * 352_000
        assert abs(payload["multi_adds"] - 19.4e9) <= 0.05 * 19.4e9

    def test_summary_eval_schemas_ship_in_package(self):
        import bsrnkit

        schemas = Path(bsrnkit.__file__).parent / "schemas"
        assert (schemas / "complexity_report.schema.json").exists()
        assert (schemas / "eval_report.schema.json").exists()

    def test_summary_bad_gt_is_usage_error(self, capsys):
        assert main(["summary", "--gt", "wrong"]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_unknown_preset_is_usage_error(self, capsys):
        assert main(["summary", "--preset", "nope"]) == 1

    def test_sr_writes_upscaled_png(self, rng, tmp_path, capsys):
        state = build(TINY, 0)
        save_checkpoint(state, str(tmp_path / "ckpt"))
        smooth_png(tmp_path / "in.png", 48, 48, 1)
        rc = main(["sr", "--checkpoint", str(tmp_path / "ckpt"),
                   "--input", str(tmp_path / "in.png"), "--output", str(tmp_path / "out.png")])
        assert rc == 0
        out = load_png(tmp_path / "out.png")
        assert (out.height, out.width) == (96, 96)

    def test_sr_scale_mismatch_is_usage_error(self, tmp_path):
        state = build(TINY, 0)
        save_checkpoint(state, str(tmp_path / "ckpt"))
        smooth_png(tmp_path / "in.png", 48, 48, 1)
        rc = main(["sr", "--checkpoint", str(tmp_path / "ckpt"), "--scale", "4",
                   "--input", str(tmp_path / "in.png"), "--output", str(tmp_path / "o.png")])
        assert rc == 1

    def test_sr_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        rc = main(["sr", "--checkpoint", str(tmp_path / "nothere"),
                   "--input", "x.png", "--output", "y.png"])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("error:") and "\n" not in err.strip()

    def test_eval_bicubic_runs_and_emits_valid_json(self, tmp_path, capsys):
        (tmp_path / "HR").mkdir()
        for i in range(3):
            smooth_png(tmp_path / "HR" / f"img{i}.png", 48, 48, i)
        out = tmp_path / "eval.json"
        rc = main(["eval", "--dataset", str(tmp_path), "--bicubic", "--scale", "2",
                   "--json", str(out)])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert len(payload["images"]) == 3
        assert 0 < payload["mean"]["psnr_y"] <= 100
        jsonschema = pytest.importorskip("jsonschema")
        import bsrnkit

        schema = json.loads(
            (Path(bsrnkit.__file__).parent / "schemas" / "eval_report.schema.json").read_text()
        )
        jsonschema.validate(payload, schema)

    def test_eval_identical_sr_hits_psnr_cap(self, tmp_path):
        # constant images: bicubic reproduces HR exactly -> capped PSNR, SSIM 1
        (tmp_path / "HR").mkdir()
        for i, v in enumerate((40, 128, 200)):
            save_png(PlanarImage(np.full((32, 32, 3), v, np.uint8)), tmp_path / "HR" / f"c{i}.png")
        out = tmp_path / "eval.json"
        rc = main(["eval", "--dataset", str(tmp_path), "--bicubic", "--scale", "4",
                   "--json", str(out)])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["mean"]["psnr_y"] == 100.0
        assert payload["mean"]["ssim_y"] == pytest.approx(1.0)

    def test_eval_needs_exactly_one_mode(self, tmp_path):
        assert main(["eval", "--dataset", str(tmp_path)]) == 1

    def test_train_toy_writes_checkpoint_and_csv(self, tmp_path, capsys):
        (tmp_path / "HR").mkdir()
        smooth_png(tmp_path / "HR" / "one.png", 32, 32, 0)
        rc = main(["train-toy", "--preset", "bsrn", "--scale", "2", "--channels", "8",
                   "--blocks", "1", "--attention", "cca", "--data", str(tmp_path),
                   "--iters", "4", "--batch", "2", "--patch", "8",
                   "--out", str(tmp_path / "run")])
        assert rc == 0
        assert (tmp_path / "run" / "checkpoint" / "manifest.json").exists()
        assert (tmp_path / "run" / "checkpoint" / "params.bin").exists()
        lines = (tmp_path / "run" / "loss.csv").read_text().splitlines()
        assert lines[0] == "iter,lr,loss" and len(lines) >= 2

    def test_bench_reports_statistics(self, capsys):
        rc = main(["bench", "--preset", "bsrn", "--channels", "8", "--blocks", "1",
                   "--attention", "cca", "--scale", "2", "--size", "24x24", "--repeats", "3"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "median" in out and "p90" in out

    def test_calibrate_finds_default_width(self, capsys):
        rc = main(["calibrate", "--target-params", "352000", "--preset", "bsrn", "--scale", "4"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "352400" in out
