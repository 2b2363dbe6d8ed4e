"""Command-line frontend: ``gen-data``, ``train``, ``sample``, ``eval`` and ``ablate``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Errors go to stderr.
The runs root comes from ``--runs-dir``, else ``$DIWA_RUNS_DIR``, else the
configuration's ``runs_dir``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .data import bicubic_resize, make_lr_hr_pair, synth_dataset
from .experiment import (
    ABLATION_ROWS,
    ablation_config,
    desk_run,
    make_pairs,
    new_state,
    run_training,
    split_corpus,
    super_resolve,
)
from .imageio import ImageFormatError, read_image, write_image
from .metrics import EvalReport
from .models import Networks
from .training import CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint

log = logging.getLogger("diwa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# flag -> config field, for the options shared by train/sample/ablate
_CONFIG_FLAGS = {
    "steps": int,
    "seed": int,
    "lr": float,
    "batch_size": int,
    "T_train": int,
    "T_eval": int,
    "scale": int,
    "hr_size": int,
    "base_width": int,
    "n_images": int,
    "n_holdout": int,
    "dropout": float,
    "use_dwt": _bool,
    "use_init_predictor": _bool,
    "data_dir": str,
    "log_every": int,
}


def _add_config_flags(p: argparse.ArgumentParser, only=None) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--runs-dir", help="runs root (default: $DIWA_RUNS_DIR or config runs_dir)")
    for name, typ in _CONFIG_FLAGS.items():
        if only is None or name in only:
            flag = "--" + name.replace("_", "-")
            p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--final-noise", action="store_true", default=None, help="also add noise at the last reverse step")


def _build_config(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    try:
        if getattr(args, "config", None):
            cfg = TrainConfig.loads(Path(args.config).read_text(), base=cfg)
        values = {}
        for item in getattr(args, "set", []):
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        for name in _CONFIG_FLAGS:
            v = getattr(args, name, None)
            if v is not None:
                values[name] = v
        if getattr(args, "final_noise", None):
            values["final_noise"] = True
        if getattr(args, "name", None):
            values["name"] = args.name
        return cfg.override(values)
    except OSError as exc:
        raise RuntimeFailure(f"cannot read config: {exc}") from None
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _runs_root(args, cfg: TrainConfig) -> Path:
    if getattr(args, "runs_dir", None):
        return Path(args.runs_dir)
    return Path(os.environ.get("DIWA_RUNS_DIR") or cfg.runs_dir)


def _image_files(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise RuntimeFailure(f"no such directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix in (".ppm", ".pgm"))


def _load_corpus(cfg: TrainConfig) -> tuple[list[str], list[np.ndarray]]:
    files = _image_files(Path(cfg.data_dir) / "hr")
    if not files:
        raise RuntimeFailure(f"no HR images under {cfg.data_dir}/hr (run gen-data first)")
    return [p.stem for p in files], [read_image(p) for p in files]


def _checkpoints(run_dir: Path) -> list[Path]:
    return sorted((run_dir / "ckpt").glob("step_*.ckpt"))


def _latest_checkpoint(run_dir: Path) -> Path:
    found = _checkpoints(run_dir)
    if not found:
        raise RuntimeFailure(f"no checkpoint in {run_dir / 'ckpt'}")
    return found[-1]


def _load_state(path: Path, cfg: TrainConfig, force: bool):
    try:
        return load_checkpoint(path, expected_hash=cfg.hash(), allow_mismatch=force)
    except CheckpointError as exc:
        hint = " (use --force to override)" if "config hash" in str(exc) else ""
        raise RuntimeFailure(f"{exc}{hint}") from None


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    root = Path(args.root)
    if args.n < 1 or args.size % (2 * args.scale):
        raise UsageError("--n must be >= 1 and --size divisible by 2*scale")
    hr_dir, lr_dir = root / "hr", root / f"lr_x{args.scale}"
    hr_dir.mkdir(parents=True, exist_ok=True)
    lr_dir.mkdir(parents=True, exist_ok=True)
    images = synth_dataset(args.n, args.size, args.size, args.seed, args.channels)
    ext = ".ppm" if args.channels == 3 else ".pgm"
    for i, img in enumerate(images):
        write_image(hr_dir / f"{i:04d}{ext}", img)
        write_image(lr_dir / f"{i:04d}{ext}", make_lr_hr_pair(img, args.scale).lr)
    print(f"wrote {args.n} HR images to {hr_dir} and LR x{args.scale} to {lr_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    run_dir = _runs_root(args, cfg) / cfg.name
    (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
    _, images = _load_corpus(cfg)
    train_imgs, _ = split_corpus(images, cfg.n_holdout)
    pairs = make_pairs(train_imgs, cfg.scale)

    nets, state = new_state(cfg)
    existing = _checkpoints(run_dir)
    if existing:
        state = _load_state(existing[-1], cfg, args.force)
        state.config_text, state.config_hash = cfg.dumps(), cfg.hash()
        log.info("resuming from %s at step %d", existing[-1], state.step)
    cfg.save(run_dir / "config.txt")

    with open(run_dir / "train.log", "a") as fh:
        def on_log(line: str) -> None:
            fh.write(line + "\n")
            fh.flush()
            log.info(line)

        try:
            run_training(cfg, nets, state, pairs, on_log=on_log)
        except TrainingDiverged as exc:
            raise RuntimeFailure(str(exc)) from None
    path = run_dir / "ckpt" / f"step_{state.step:06d}.ckpt"
    save_checkpoint(state, path)
    print(f"saved {path}")
    return EXIT_OK


def _run_config(args) -> tuple[TrainConfig, Path]:
    root = Path(args.runs_dir) if args.runs_dir else Path(os.environ.get("DIWA_RUNS_DIR") or TrainConfig().runs_dir)
    run_dir = root / args.name
    cfg_file = run_dir / "config.txt"
    if not cfg_file.exists():
        raise RuntimeFailure(f"no run at {run_dir} (missing config.txt)")
    base = TrainConfig.load(cfg_file)
    return _build_config(args, base), run_dir


def cmd_sample(args) -> int:
    cfg, run_dir = _run_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    if not ckpt.exists():
        raise RuntimeFailure(f"checkpoint not found: {ckpt}")
    state = _load_state(ckpt, cfg, args.force)
    nets = Networks(cfg)

    if args.input:
        files = _image_files(Path(args.input))
    else:
        files = _image_files(Path(cfg.data_dir) / f"lr_x{cfg.scale}")
        files = files[len(files) - cfg.n_holdout :]
    if not files:
        raise RuntimeFailure("no input images")
    lr = [read_image(p) for p in files]
    size = cfg.hr_size
    lr_up = np.stack([np.clip(bicubic_resize(im, size, size), 0.0, 1.0) for im in lr])

    out_dir = Path(args.output) if args.output else run_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    sr = super_resolve(cfg, nets, state.params, lr_up, args.sample_seed)
    for p, img in zip(files, sr):
        write_image(out_dir / p.name, img)
    print(f"wrote {len(files)} images to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, run_dir = _run_config(args)
    sr_dir = Path(args.sr) if args.sr else run_dir / "samples"
    hr_dir = Path(args.hr) if args.hr else Path(cfg.data_dir) / "hr"
    sr_files = _image_files(sr_dir)
    if not sr_files:
        raise RuntimeFailure(f"no images in {sr_dir}")
    report = EvalReport(config=cfg.name)
    for p in sr_files:
        ref = hr_dir / p.name
        if not ref.exists():
            raise RuntimeFailure(f"no reference image {ref}")
        report.add(p.stem, read_image(p), read_image(ref))
    out = Path(args.out) if args.out else run_dir / "eval.csv"
    report.write_csv(out)
    print(f"{cfg.name}: n={report.count} psnr={report.mean_psnr:.3f} dB ssim={report.mean_ssim:.4f} -> {out}")
    return EXIT_OK


def format_ablation_table(rows: list[tuple[str, float, float]], reference: tuple[float, float] | None = None) -> str:
    width = max(len(r[0]) for r in rows + ([("bicubic (reference)", 0, 0)] if reference else []))
    lines = [f"{'config':<{width}}  {'PSNR':>7}  {'SSIM':>6}"]
    lines += [f"{name:<{width}}  {p:7.3f}  {s:6.4f}" for name, p, s in rows]
    if reference:
        lines.append(f"{'bicubic (reference)':<{width}}  {reference[0]:7.3f}  {reference[1]:6.4f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = _build_config(args)
    out_dir = _runs_root(args, cfg) / (args.name or "ablation")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, bicubic = [], None
    for label in ABLATION_ROWS:
        row_cfg = ablation_config(cfg, label)
        t0 = time.perf_counter()
        try:
            run = desk_run(row_cfg)
        except TrainingDiverged as exc:
            raise RuntimeFailure(f"{label}: {exc}") from None
        log.info("%s done in %.1fs", label, time.perf_counter() - t0)
        rows.append((label, run.report.mean_psnr, run.report.mean_ssim))
        bicubic = (run.bicubic.mean_psnr, run.bicubic.mean_ssim)
    table = format_ablation_table(rows, bicubic)
    with open(out_dir / "ablation.csv", "w") as fh:
        fh.write("config,psnr_db,ssim\n")
        for name, p, s in rows:
            fh.write(f"{name},{p!r},{s!r}\n")
        fh.write(f"bicubic (reference),{bicubic[0]!r},{bicubic[1]!r}\n")
    print(table)
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="diwa", description="Wavelet-domain residual diffusion for super-resolution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write the synthetic HR corpus and its LR cache")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--channels", type=int, choices=(1, 3), default=3)
    g.add_argument("--root", default="data/synth")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a run and write its checkpoint")
    t.add_argument("--name", default=None)
    t.add_argument("--force", action="store_true", help="resume even if the config hash differs")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="super-resolve LR images with a trained run")
    s.add_argument("--name", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--input", help="directory of LR images (default: held-out corpus LR cache)")
    s.add_argument("--output", help="output directory (default: runs/<name>/samples)")
    s.add_argument("--sample-seed", type=int, default=0)
    s.add_argument("--force", action="store_true", help="load even if the config hash differs")
    _add_config_flags(s, only=("T_eval", "data_dir"))
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score samples against HR references (writes eval.csv)")
    e.add_argument("--name", required=True)
    e.add_argument("--sr")
    e.add_argument("--hr")
    e.add_argument("--out")
    e.add_argument("--runs-dir")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score the four ablation configurations")
    a.add_argument("--name", default=None, help="output folder under the runs root")
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"diwa: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, ImageFormatError, OSError, ValueError) as exc:
        print(f"diwa {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
