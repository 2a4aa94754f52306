"""``camixer`` command line: train, infer, mask-dump, flops, eval.

Exit status: 0 ok, 2 configuration/usage error, 3 data error, 4 numeric abort.
Any ``--section.key=value`` flag overrides the JSON config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import camixer
from camixer import macs
from camixer import tensor as T
from camixer.complexity import model_report
from camixer.config import ConfigError, ModelConfig, RunConfig, apply_overrides, run_config_from_dict
from camixer.imaging import (
    ImageFormatError,
    bicubic_downsample,
    crop_to_multiple,
    psnr,
    read_image,
    ssim,
    tiled_apply,
    to_float,
    to_uint8,
    write_image,
    ws_psnr,
    ws_ssim,
)
from camixer.network import CAMixerSR, CheckpointError, model_from_checkpoint, save_checkpoint
from camixer.rng import Rng
from camixer.training import NumericAbort, load_pair_dir, synthetic_pairs, train

log = logging.getLogger("camixer")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(ConfigError):
    pass


# -- helpers ---------------------------------------------------------------------

def _split_overrides(extra: list[str]) -> list[str]:
    out = []
    for item in extra:
        if not item.startswith("--") or "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {item!r}")
        out.append(item[2:])
    return out


def _load_config(path: str | None, overrides: list[str]) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return run_config_from_dict(apply_overrides(raw, overrides))


def _write_manifest(out_dir: str, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "code_version": camixer.__version__,
        "config": cfg.to_dict(),
    }
    manifest.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _gamma_arg(args) -> float | None:
    if args.mode == "threshold":
        return None
    if args.gamma is None:
        raise UsageError("--mode topk needs --gamma")
    if not 0.0 <= args.gamma <= 1.0:
        raise UsageError(f"--gamma must lie in [0, 1], got {args.gamma}")
    return args.gamma


def _read_lr(path: str, model: CAMixerSR) -> np.ndarray:
    img = to_float(read_image(path))
    if img.shape[0] != model.cfg.in_channels:
        raise ImageFormatError(
            f"{path} has {img.shape[0]} channel(s) but the checkpoint expects {model.cfg.in_channels}"
        )
    return img


def super_resolve(model: CAMixerSR, lr: np.ndarray, gamma: float | None, tile: int = 0, overlap: int = 0) -> np.ndarray:
    """SR of one float ``[C, H, W]`` image, optionally tile by tile."""

    def run(x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            out = model.forward(T.Tensor(x[None], dtype=np.float32), gamma_target=gamma)
        return out.image.data[0]

    if tile:
        return tiled_apply(run, lr, tile, overlap, model.cfg.scale)
    return run(lr)


# -- commands --------------------------------------------------------------------------

def cmd_train(args, overrides) -> int:
    cfg = _load_config(args.config, overrides)
    out_dir = args.out or cfg.io.out_dir
    s = cfg.model.scale
    d = cfg.data
    # resolve data before any compute
    if d.train_dir:
        train_set = load_pair_dir(d.train_dir, s)
    else:
        train_set = synthetic_pairs(d.kinds, d.synthetic_train, d.synthetic_size, s, Rng(cfg.train.seed).spawn(11))
    if d.val_dir:
        val_set = load_pair_dir(d.val_dir, s)
    elif d.synthetic_val:
        val_set = synthetic_pairs(d.kinds, d.synthetic_val, d.synthetic_size, s, Rng(cfg.train.seed).spawn(12))
    else:
        val_set = None
    lp = cfg.train.patch_size // s
    small = [n for n, lr in zip(train_set.names, train_set.lr) if min(lr.shape[1:]) < lp]
    if small:
        raise ImageFormatError(f"training images smaller than the patch size: {', '.join(small)}")
    os.makedirs(out_dir, exist_ok=True)
    _write_manifest(out_dir, cfg, "train")

    model = CAMixerSR(cfg.model, seed=cfg.train.seed)

    def checkpoint(step: int) -> None:
        save_checkpoint(model, os.path.join(out_dir, f"step{step:06d}.ckpt"))

    metrics = os.path.join(out_dir, "metrics.csv")
    history = train(model, train_set, cfg.train, val=val_set, metrics_path=metrics,
                    eval_every=cfg.train.eval_every, on_milestone=checkpoint)
    save_checkpoint(model, os.path.join(out_dir, "final.ckpt"))
    last = history[-1] if history else None
    if last:
        print(f"trained {len(history)} steps: l1={last.l1:.5f} mean_gamma={last.mean_gamma:.4f}")
    print(f"wrote {metrics} and {os.path.join(out_dir, 'final.ckpt')}")
    return 0


def cmd_infer(args, overrides) -> int:
    model = model_from_checkpoint(args.checkpoint)
    gamma = _gamma_arg(args)
    lr = _read_lr(args.input, model)
    with macs.MacCounter() as counter, T.no_grad():
        if args.tile:
            sr = super_resolve(model, lr, gamma, args.tile, args.overlap)
            gammas = None
        else:
            res = model.forward(T.Tensor(lr[None], dtype=np.float32), gamma_target=gamma)
            sr, gammas = res.image.data[0], res.gamma_values()
    write_image(args.out, to_uint8(sr))
    if gammas is not None:
        for i, g in enumerate(gammas, start=1):
            print(f"block {i:2d}: gamma'={g:.4f}")
        print(f"mean gamma'={np.mean(gammas):.4f}")
    print(f"attention MACs: {counter.matching('attention'):,}")
    print(f"total MACs: {counter.total:,}")
    print(f"wrote {args.out}")
    return 0


def window_mask_image(plan, H: int, W: int, M: int, image_index: int = 0) -> np.ndarray:
    """uint8 ``[H, W]``: 255 over attention windows, 0 elsewhere (padded grid, cropped)."""
    Hp, Wp = H + (-H) % M, W + (-W) % M
    nW = (Hp // M) * (Wp // M)
    lo = image_index * nW
    hard = plan.hard_idx[(plan.hard_idx >= lo) & (plan.hard_idx < lo + nW)] - lo
    cells = np.zeros(nW, dtype=np.uint8)
    cells[hard] = 255
    grid = cells.reshape(Hp // M, Wp // M)
    return np.kron(grid, np.ones((M, M), dtype=np.uint8))[:H, :W]


def cmd_mask_dump(args, overrides) -> int:
    model = model_from_checkpoint(args.checkpoint)
    gamma = _gamma_arg(args)
    S = model.cfg.num_blocks
    if args.blocks == "all":
        ids = list(range(1, S + 1))
    else:
        try:
            ids = [int(b) for b in args.blocks.split(",")]
        except ValueError:
            raise UsageError(f"--blocks must be 'all' or comma-separated integers, got {args.blocks!r}") from None
    bad = [i for i in ids if not 1 <= i <= S]
    if bad:
        raise UsageError(f"block id(s) out of range 1..{S}: {bad}")
    lr = _read_lr(args.input, model)
    with T.no_grad():
        res = model.forward(T.Tensor(lr[None], dtype=np.float32), gamma_target=gamma)
    os.makedirs(args.out_dir, exist_ok=True)
    H, W = lr.shape[1:]
    for i in ids:
        mask = window_mask_image(res.plans[i - 1], H, W, model.cfg.window)
        path = os.path.join(args.out_dir, f"block{i:02d}.pgm")
        write_image(path, mask)
        print(f"block {i:2d}: gamma'={res.plans[i - 1].gamma_actual:.4f} -> {path}")
    return 0


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--resolution must look like WIDTHxHEIGHT, got {text!r}") from None
    return w, h


def cmd_flops(args, overrides) -> int:
    cfg = _load_config(args.config, overrides) if (args.config or overrides) else RunConfig()
    mcfg: ModelConfig = cfg.model
    w, h = _parse_resolution(args.resolution)
    s = mcfg.scale
    if h % s or w % s:
        raise UsageError(f"output resolution {w}x{h} not divisible by scale {s}")
    lr_hw = (h // s, w // s)
    report = model_report(mcfg, args.gamma, lr_hw, measure=args.measure)
    base = model_report(mcfg, args.compare, lr_hw)
    factor = 2 if args.flops else 1
    shown = report.scaled(factor) if factor != 1 else report
    print(shown.to_table())
    ratio = report.analytic_total / base.analytic_total
    print(f"ratio gamma={args.gamma:g} / gamma={args.compare:g}: {ratio:.4f}")
    if args.json:
        doc = shown.to_dict()
        doc["ratio_to_compare"] = ratio
        doc["compare_gamma"] = args.compare
        with open(args.json, "w") as fh:
            json.dump(doc, fh, indent=2)
        print(f"wrote {args.json}")
    return 0


def _list_images(path: str) -> list[str]:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"directory not found: {path}")
    return sorted(f for f in os.listdir(path) if f.lower().endswith((".ppm", ".pgm")))


def cmd_eval(args, overrides) -> int:
    hr_names = _list_images(args.hr_dir)
    if not hr_names:
        raise FileNotFoundError(f"no .ppm/.pgm images in {args.hr_dir}")
    src_dir = args.pred_dir if args.checkpoint is None else args.lr_dir
    if args.checkpoint is None and src_dir is None:
        raise UsageError("eval needs --checkpoint or --pred-dir")
    if src_dir is not None:
        have = set(_list_images(src_dir))
        missing = [n for n in hr_names if n not in have]
        if missing:
            raise FileNotFoundError(f"missing counterpart(s) in {src_dir}: {', '.join(missing)}")

    model = model_from_checkpoint(args.checkpoint) if args.checkpoint else None
    gamma = _gamma_arg(args) if model else None

    def score(name: str) -> dict:
        hr = to_float(read_image(os.path.join(args.hr_dir, name)))
        if model is None:
            pred = to_float(read_image(os.path.join(src_dir, name)))
        else:
            s = model.cfg.scale
            hr = crop_to_multiple(hr, s)
            if src_dir is not None:
                lr = to_float(read_image(os.path.join(src_dir, name)))
            else:
                lr = bicubic_downsample(hr, s)
            pred = super_resolve(model, lr, gamma, args.tile, args.overlap)
            if pred.shape != hr.shape:
                raise ImageFormatError(f"{name}: SR shape {pred.shape} does not match HR {hr.shape}")
            # score what would be written to disk
            pred = to_float(to_uint8(pred))
        row = {"image": name, "psnr": psnr(pred, hr, y_channel=args.y_channel), "ssim": ssim(pred, hr, y_channel=args.y_channel)}
        if args.ws:
            row["ws_psnr"] = ws_psnr(pred, hr, y_channel=args.y_channel)
            row["ws_ssim"] = ws_ssim(pred, hr, y_channel=args.y_channel)
        return row

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(score, hr_names))
    keys = [k for k in rows[0] if k != "image"]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    for r in rows:
        print(f"{r['image']:<32}" + "".join(f"  {k}={r[k]:.4f}" for k in keys))
    print(f"{'mean':<32}" + "".join(f"  {k}={mean[k]:.4f}" for k in keys))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"tile": args.tile, "overlap": args.overlap, "images": rows, "mean": mean}, fh, indent=2)
    return 0


# -- entry point -------------------------------------------------------------------

def _routing_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=None, help="target attention ratio (top-K mode)")
    p.add_argument("--mode", choices=("topk", "threshold"), default=None,
                   help="routing rule; defaults to topk when --gamma is given, threshold otherwise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camixer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", help="run directory (default: io.out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=0)
    p.add_argument("--overlap", type=int, default=0)
    _routing_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("mask-dump", help="write per-block routing masks as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--blocks", default="all", help="'all' or comma-separated 1-based ids")
    _routing_flags(p)
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("flops", help="analytic (and optionally measured) complexity report")
    p.add_argument("--config")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--compare", type=float, default=1.0, help="gamma of the reference model for the ratio")
    p.add_argument("--resolution", default="1280x720", help="output size WIDTHxHEIGHT")
    p.add_argument("--measure", action="store_true", help="also run an instrumented forward")
    p.add_argument("--flops", action="store_true", help="report 2 x MAdds")
    p.add_argument("--json")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint or a prediction directory")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--lr-dir")
    p.add_argument("--pred-dir")
    p.add_argument("--checkpoint")
    p.add_argument("--tile", type=int, default=0)
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--ws", action="store_true", help="also report WS-PSNR / WS-SSIM")
    p.add_argument("--y-channel", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--json")
    _routing_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if hasattr(args, "mode") and args.mode is None:
        args.mode = "topk" if args.gamma is not None else "threshold"
    try:
        overrides = _split_overrides(extra)
        if overrides and args.command not in ("train", "flops"):
            raise UsageError(f"config overrides are only accepted by train and flops: {overrides}")
        return args.func(args, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ImageFormatError, CheckpointError, T.DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
