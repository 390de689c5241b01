"""Command-line surface: summary, sr, eval, train-toy, bench, calibrate.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Errors print a
single machine-parsable ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import complexity, dataio, imaging, model, training
from .blocks import AttentionMode, ConvKind
from .model import ModelConfig, preset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); remap to usage error
        raise UsageError(message)


def _parse_hw(text: str, what: str) -> tuple[int, int]:
    """'WxH' -> (h, w)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
        if w < 1 or h < 1:
            raise ValueError
        return h, w
    except ValueError:
        raise UsageError(f"{what} must look like 1280x720, got {text!r}") from None


def _config_from_args(args) -> ModelConfig:
    overrides = {}
    if args.channels is not None:
        overrides["channels"] = args.channels
    if args.blocks is not None:
        overrides["num_blocks"] = args.blocks
    if args.conv is not None:
        overrides["conv_kind"] = ConvKind(args.conv)
    if args.attention is not None:
        overrides["attention"] = AttentionMode(args.attention)
    if args.activation is not None:
        overrides["activation"] = args.activation
    try:
        return preset(args.preset, args.scale, **overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="bsrn", help="bsrn | bsrn-s | bsrn-1 | bsrn-2")
    p.add_argument("--scale", type=int, default=4, choices=(2, 3, 4))
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--conv", choices=[k.value for k in ConvKind], default=None)
    p.add_argument("--attention", choices=[a.value for a in AttentionMode], default=None)
    p.add_argument("--activation", default=None)


def cmd_summary(args) -> int:
    cfg = _config_from_args(args)
    gt_h, gt_w = _parse_hw(args.gt, "--gt")
    rep = complexity.report(cfg, gt_h, gt_w)
    print(complexity.render_table(rep, breakdown=args.breakdown))
    if args.json:
        Path(args.json).write_text(json.dumps(complexity.report_json_dict(rep), indent=1))
    return 0


def cmd_sr(args) -> int:
    state = model.load_checkpoint(args.checkpoint)
    if args.scale is not None and args.scale != state.config.scale:
        raise UsageError(f"checkpoint is x{state.config.scale}, but --scale {args.scale} given")
    img = dataio.load_png(args.input)
    out = model.forward(state, img.to_chw())
    dataio.save_png(imaging.PlanarImage.from_chw(out), args.output)
    print(f"wrote {args.output} ({out.shape[3]}x{out.shape[2]})")
    return 0


def _eval_one(layout, pair, state, use_bicubic, shave):
    lr, hr = dataio.load_pair(layout, pair)
    if use_bicubic:
        sr = imaging.resize_rgb(lr, size=(hr.height, hr.width), antialias=False)
    else:
        sr = imaging.PlanarImage.from_chw(model.forward(state, lr.to_chw()))
    return pair.stem, imaging.psnr_y(sr, hr, shave), imaging.ssim_y(sr, hr, shave)


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (not args.bicubic):
        raise UsageError("give exactly one of --checkpoint or --bicubic")
    state = model.load_checkpoint(args.checkpoint) if args.checkpoint else None
    scale = state.config.scale if state is not None else args.scale
    if state is not None and args.scale is not None and args.scale != scale:
        raise UsageError(f"checkpoint is x{scale}, but --scale {args.scale} given")
    if scale is None:
        raise UsageError("--bicubic needs an explicit --scale")
    layout = dataio.DatasetLayout(Path(args.dataset), scale)
    pairs = dataio.scan_dataset(layout)
    shave = scale if args.shave is None else args.shave
    workers = max(1, min(args.workers, len(pairs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda pr: _eval_one(layout, pr, state, args.bicubic, shave), pairs))
    for stem, psnr, ssim in rows:
        print(f"{stem:<24} {psnr:8.4f} dB   {ssim:.4f}")
    mean_psnr = sum(r[1] for r in rows) / len(rows)
    mean_ssim = sum(r[2] for r in rows) / len(rows)
    print(f"{'mean':<24} {mean_psnr:8.4f} dB   {mean_ssim:.4f}")
    if args.json:
        payload = {
            "dataset": str(args.dataset),
            "scale": scale,
            "shave": shave,
            "mode": "bicubic" if args.bicubic else "checkpoint",
            "images": [{"name": s, "psnr_y": p, "ssim_y": m} for s, p, m in rows],
            "mean": {"psnr_y": mean_psnr, "ssim_y": mean_ssim},
        }
        Path(args.json).write_text(json.dumps(payload, indent=1))
    return 0


def cmd_train_toy(args) -> int:
    cfg = _config_from_args(args)
    layout = dataio.DatasetLayout(Path(args.data), cfg.scale)
    pairs = dataio.scan_dataset(layout)
    images = []
    for pair in pairs:
        lr, hr = dataio.load_pair(layout, pair)
        images.append((lr.to_float().astype(np.float32), hr.to_float().astype(np.float32)))
    state = model.build(cfg, init_seed=args.seed)
    tcfg = training.TrainConfig(
        total_iters=args.iters,
        batch_size=args.batch,
        patch_size=args.patch,
        seed=args.seed,
        lr0=args.lr,
        ortho_weight=args.ortho_weight,
        log_every=args.log_every,
    )
    def log(it, lr_now, loss):
        print(f"iter {it:>6}  lr {lr_now:.3e}  loss {loss:.5f}")
    state, rows = training.train_loop(state, images, tcfg, on_log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(state, str(out / "checkpoint"))
    training.write_loss_csv(rows, str(out / "loss.csv"))
    print(f"saved checkpoint and loss.csv under {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from_args(args)
    h, w = _parse_hw(args.size, "--size")
    state = model.build(cfg, init_seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((1, 3, h, w), dtype=np.float32)
    times = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        model.forward(state, x)
        times.append((time.perf_counter() - t0) * 1e3)
    med = statistics.median(times)
    p90 = sorted(times)[min(len(times) - 1, int(round(0.9 * (len(times) - 1))))]
    print(f"{cfg.variant} x{cfg.scale} on {w}x{h}: median {med:.1f} ms, p90 {p90:.1f} ms over {args.repeats} runs")
    return 0


def cmd_calibrate(args) -> int:
    base = preset(args.preset, args.scale)
    c = base.channels
    tol = args.tolerance
    hits = []
    for cd in (c // 2, c // 4):
        for cf in (c // 4, c // 6):
            for copies in (1, 2, 3, 4):
                cfg = replace(base, distilled_channels=cd, esa_channels=cf, input_copies=copies)
                params = complexity.count_params(cfg)
                if abs(params - args.target_params) <= tol * args.target_params:
                    macs = complexity.count_multi_adds(cfg)
                    hits.append((params, macs, cd, cf, copies))
    if not hits:
        print(f"no swept config within {tol:.0%} of {args.target_params} parameters")
        return 0
    print(f"{'params':>9} {'macs[G]':>9} {'distilled':>9} {'esa_ch':>7} {'copies':>7}")
    for params, macs, cd, cf, copies in sorted(hits, key=lambda h: abs(h[0] - args.target_params)):
        print(f"{params:>9} {macs / 1e9:>9.3f} {cd:>9} {cf:>7} {copies:>7}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="bsrnkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", parents=[], help="complexity table for a config")
    _add_config_flags(p)
    p.add_argument("--gt", default="1280x720", help="ground-truth size WxH for Multi-Adds")
    p.add_argument("--breakdown", action="store_true", help="per-layer rows")
    p.add_argument("--json", default=None, help="write the report as JSON to this path")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("sr", help="super-resolve one PNG with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int, default=None, choices=(2, 3, 4))
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM (Y) over a dataset directory")
    p.add_argument("--dataset", required=True, help="root with HR/ and optional LR_x{scale}/")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--bicubic", action="store_true", help="evaluate the bicubic baseline")
    p.add_argument("--scale", type=int, default=None, choices=(2, 3, 4))
    p.add_argument("--shave", type=int, default=None, help="border pixels to ignore (default: scale)")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--json", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="desk-scale training run")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset root with HR/ images")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ortho-weight", type=float, default=0.0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="wall-clock forward statistics")
    _add_config_flags(p)
    p.add_argument("--size", default="48x48", help="input size WxH")
    p.add_argument("--repeats", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", help="sweep distillation/attention widths toward a parameter target")
    p.add_argument("--target-params", type=int, required=True)
    p.add_argument("--preset", default="bsrn")
    p.add_argument("--scale", type=int, default=4, choices=(2, 3, 4))
    p.add_argument("--tolerance", type=float, default=0.03)
    p.set_defaults(func=cmd_calibrate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
