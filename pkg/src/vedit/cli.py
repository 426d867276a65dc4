"""Command line entry point: ``vedit <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command accepts ``--config FILE`` holding ``key=value`` lines named
after its long flags; flags given on the command line take precedence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import cappipe, dataset, diffusion, metrics, toy
from .augment import AffineRanges, load_frames, load_image, make_trajectory, save_frames, synth_triplet
from .numkit import NonFiniteError, Rng

log = logging.getLogger("vedit")

# flags the config file may satisfy, so argparse cannot enforce them itself
REQUIRED = {
    "synth-images": ("pairs", "out"),
    "pipeline-videos": ("videos", "out"),
    "toy-data": ("out",),
    "train": ("shards", "ckpt"),
    "edit": ("ckpt", "video", "instruction", "lambda_text", "lambda_vision", "out"),
    "inspect": ("shard",),
    "ablate": ("axis", "out"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files


def read_config(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _convert(action: argparse.Action, raw: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = raw.lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise UsageError(f"config key {action.dest!r}: expected a boolean, got {raw!r}")
        val = low in ("1", "true", "yes", "on")
        return val if isinstance(action, argparse._StoreTrueAction) else not val
    conv = action.type or str
    parts = raw.replace(",", " ").split() if action.nargs in ("+", "*") else [raw]
    try:
        vals = [conv(p) for p in parts]
    except (TypeError, ValueError):
        raise UsageError(f"config key {action.dest!r}: bad value {raw!r}") from None
    if action.choices is not None and any(v not in action.choices for v in vals):
        raise UsageError(f"config key {action.dest!r}: {raw!r} not in {sorted(action.choices)}")
    return vals if action.nargs in ("+", "*") else vals[0]


def apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    for key, raw in read_config(path).items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r} in {path}")
        values[key] = _convert(actions[key], raw)
    sub.set_defaults(**values)


# ---------------------------------------------------------------------------
# commands


def _ranges(args) -> AffineRanges:
    r = AffineRanges.from_file(args.ranges) if args.ranges else AffineRanges.preset(args.preset)
    return r.without_crop() if args.no_crop else r


def find_pairs(root: Path) -> tuple[list[tuple[str, Path]], list[str]]:
    """Subdirectories holding ``I.png``, ``E.png`` and ``instruction.txt``."""
    pairs, skipped = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        missing = [m for m in ("I.png", "E.png", "instruction.txt") if not (d / m).is_file()]
        if missing:
            skipped.append(f"{d.name}: missing {', '.join(missing)}")
        else:
            pairs.append((d.name, d))
    return pairs, skipped


def cmd_synth_images(args) -> int:
    root = Path(args.pairs)
    if not root.is_dir():
        raise UsageError(f"pairs directory {root} does not exist")
    pairs, skipped = find_pairs(root)
    for msg in skipped:
        log.warning("skipping %s", msg)
    if not pairs:
        print("no pairs found", file=sys.stderr)
        return 2
    ranges = _ranges(args)

    def make(i: int, seed: int):
        _, d = pairs[i]
        instr = (d / "instruction.txt").read_text(encoding="utf-8").strip()
        traj = make_trajectory(seed, args.frames, ranges, args.mode)
        return synth_triplet(load_image(d / "I.png"), load_image(d / "E.png"), instr, traj, seed, args.border)

    records = dataset.build_records(make, len(pairs), args.seed, args.workers)
    dataset.write_shard(args.out, records, args.workers)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_pipeline_videos(args) -> int:
    root = Path(args.videos)
    if not root.is_dir():
        raise UsageError(f"videos directory {root} does not exist")
    if args.mock:
        clients = cappipe.PipelineClients.mock()
    else:
        try:
            clients = cappipe.PipelineClients.from_env(timeout_ms=args.timeout_ms, max_retries=args.max_retries)
        except cappipe.ConfigError as exc:
            raise UsageError(f"{exc} (or pass --mock)") from None
    videos = sorted(p for p in root.iterdir() if p.is_dir())
    if not videos:
        print("no videos found", file=sys.stderr)
        return 2

    def run(i: int):
        path = videos[i]
        try:
            video = load_frames(path)
        except (OSError, ValueError) as exc:
            return None, f"{path}: load: {exc}"
        try:
            trip, _, _ = cappipe.build_openworld_triplet(clients, video, dataset.derive_seed(args.seed, i))
        except cappipe.PipelineError as exc:
            return None, f"{path}: stage {exc}"
        except ValueError as exc:
            return None, f"{path}: {exc}"
        return trip, None

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(run, range(len(videos))))
    records = [r for r, _ in results if r is not None]
    failures = [e for _, e in results if e is not None]
    for msg in failures:
        log.error("%s", msg)
    dataset.write_shard(args.out, records, args.workers)
    print(f"wrote {len(records)} records to {args.out} ({len(failures)} failed)")
    return 1 if failures else 0


def cmd_toy_data(args) -> int:
    ranges = AffineRanges.preset(args.preset).without_crop()
    records = toy.toy_dataset(args.n, args.seed, args.workers, frames=args.frames, size=args.size,
                              ranges=ranges, mode=args.mode)
    dataset.write_shard(args.out, records, args.workers)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _load_sources(args) -> list[list]:
    sources = []
    for k, path in enumerate(args.shards):
        recs = dataset.read_shard(path)
        if not recs:
            raise UsageError(f"shard {path} has no records")
        if args.clip_len:
            recs = [dataset.extract_triplet_clip(
                r, dataset.sample_clip_spec(Rng(dataset.derive_seed(args.seed + k, i)),
                                            r.shape[0], args.clip_len)) for i, r in enumerate(recs)]
        sources.append(recs)
    shapes = {r.shape for src in sources for r in src}
    if len(shapes) != 1:
        raise ValueError(f"records differ in shape {sorted(shapes)}; use --clip-len to cut equal clips")
    return sources


def cmd_train(args) -> int:
    if len(args.shards) > 2:
        raise UsageError("--shards takes one or two shard files")
    try:
        ratio = dataset.parse_ratio(args.ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sources = _load_sources(args)
    T, C, H, W = sources[0][0].shape
    cfg = diffusion.TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed, ratio=ratio)
    if args.resume:
        ck = diffusion.load_checkpoint(args.resume)
        if ck.state is None:
            raise UsageError(f"{args.resume} holds no optimizer state; cannot resume")
        if ck.seed != args.seed:
            raise UsageError(f"checkpoint was trained with --seed {ck.seed}, not {args.seed}")
        model, schedule, state, start = ck.model, ck.schedule, ck.state, ck.step
        if model.frame_shape != (C, H, W):
            raise UsageError(f"checkpoint frame shape {model.frame_shape} != data {(C, H, W)}")
    else:
        schedule = toy.toy_schedule(args.T, args.schedule)
        model = diffusion.DenoiserModel((C, H, W), hidden=args.hidden, seed=args.seed, head=args.head)
        state, start = None, 0
    if start >= args.steps:
        raise UsageError(f"checkpoint is already at step {start} >= --steps {args.steps}")
    log_path = Path(args.log) if args.log else Path(args.ckpt).with_suffix(".loss.csv")
    append = bool(args.resume) and log_path.exists()
    with open(log_path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if not append:
            writer.writerow(["step", "loss"])

        def on_step(step: int, loss: float) -> None:
            writer.writerow([step, repr(loss)])
            if args.verbose and (step % 100 == 0 or step == args.steps):
                print(f"step {step} loss {loss:.5f}")

        state, losses = diffusion.train(model, sources, schedule, cfg, state=state, start_step=start,
                                        on_step=on_step)
    diffusion.save_checkpoint(args.ckpt, model, schedule, state, args.steps, args.seed)
    print(f"trained steps {start + 1}..{args.steps}; final loss {losses[-1]:.5f}; "
          f"checkpoint {args.ckpt}; loss log {log_path}")
    return 0


def cmd_edit(args) -> int:
    ck = diffusion.load_checkpoint(args.ckpt)
    video = load_frames(args.video)
    if video.shape[1:] != ck.model.frame_shape:
        raise UsageError(f"video frames {video.shape[1:]} do not match model frames {ck.model.frame_shape}")
    g = diffusion.GuidanceConfig(args.lambda_text, args.lambda_vision, args.guidance_mode)
    out = diffusion.edit_video(ck.model, video, args.instruction, diffusion.IdentityCodec(), ck.schedule,
                               args.steps, g, args.seed, (0.0, 1.0) if args.clip_x0 else None)
    out = np.clip(out, 0.0, 1.0)
    paths = save_frames(out, args.out)
    line = f"wrote {len(paths)} frames to {args.out}"
    if len(out) >= 2 and min(out.shape[-2:]) >= metrics.POOL:
        fc = metrics.frame_consistency(out, adjacent_only=args.adjacent)
        name = "frame_consistency_adjacent" if args.adjacent else "frame_consistency"
        with open(Path(args.out) / "metrics.jsonl", "w", encoding="utf-8") as fh:
            fh.write(metrics.metric_line(Path(args.video).name, name, fc) + "\n")
        line += f"\nframe_consistency {fc:.6f}"
    print(line)
    return 0


def cmd_inspect(args) -> int:
    count, statuses = dataset.scan_shard(args.shard)
    print(f"{args.shard}: {count} records")
    if args.index is not None:
        if not 0 <= args.index < count:
            raise UsageError(f"--index {args.index} out of range for {count} records")
        if args.index >= len(statuses):
            print(f"[{args.index}] unreadable (an earlier record is truncated)")
            return 1
        statuses = [statuses[args.index]]
    bad = 0
    for st in statuses:
        if st.record is None:
            print(f"[{st.index}] UNREADABLE: {st.error}")
            bad += 1
            continue
        T, C, H, W = st.record.shape
        flag = "ok" if st.crc_ok else "BAD"
        bad += not st.crc_ok
        print(f"[{st.index}] {T}x{C}x{H}x{W} source={st.record.source_tag} seed={st.record.seed} "
              f"crc={flag} instruction={st.record.instruction!r}")
    if args.index is None and len(statuses) < count:
        print(f"{count - len(statuses)} records after the truncation point were not read")
        bad += 1
    return 1 if bad else 0


def cmd_report(args) -> int:
    from . import plotting
    if not args.loss and not args.metrics:
        raise UsageError("report needs --loss and/or --metrics")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.loss:
        steps, losses = plotting.read_loss_csv(args.loss)
        fig = plotting.plot_loss(steps, losses, out / "loss.png")
        ema = plotting.ema(losses)
        print(f"loss steps={len(steps)} first={losses[0]:.5f} last={losses[-1]:.5f} ema_last={ema[-1]:.5f} "
              f"figure={fig}")
    if args.metrics:
        rows = metrics.read_metric_lines(args.metrics)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video_id", "metric", "value"])
            for r in rows:
                w.writerow([r["video_id"], r["metric"], r["value"]])
        for name in sorted({r["metric"] for r in rows}):
            sel = [r for r in rows if r["metric"] == name]
            fig = plotting.plot_bars([r["video_id"] for r in sel], [r["value"] for r in sel],
                                     out / f"{name}.png", name)
            print(f"{name} n={len(sel)} mean={np.mean([r['value'] for r in sel]):.6f} figure={fig}")
    return 0


def cmd_ablate(args) -> int:
    from . import plotting
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = toy.toy_dataset(args.n_test, args.seed + 1000)
    rows = []
    common = dict(n_train=args.n_train, steps=args.steps, batch=args.batch, lr=args.lr, seed=args.seed)
    if args.axis == "guidance":
        run = toy.train_toy(**common)
        for mode in diffusion.GUIDANCE_MODES:
            g = diffusion.GuidanceConfig(args.lambda_text, args.lambda_vision, mode)
            res = toy.evaluate(run.model, run.schedule, test, g, args.sample_steps, args.seed)
            rows.append((mode, res))
            print(f"guidance={mode} mse={res.mse:.5f} swap={res.swap_mse:.5f}")
    elif args.axis == "augment":
        g = diffusion.GuidanceConfig(args.lambda_text, args.lambda_vision)
        for preset in ("none", "translate", "rotate", "all"):
            ranges = AffineRanges.preset(preset).without_crop()
            run = toy.train_toy(ranges=ranges, **common)
            res = toy.evaluate(run.model, run.schedule, test, g, args.sample_steps, args.seed)
            rows.append((preset, res))
            print(f"augment={preset} mse={res.mse:.5f} swap={res.swap_mse:.5f} consistency={res.consistency:.5f}")
    else:
        schedules = ("scaled", "reference")
        g = diffusion.GuidanceConfig(args.lambda_text, args.lambda_vision)
        for kind in schedules:
            run = toy.train_toy(schedule_kind=kind, **common)
            res = toy.evaluate(run.model, run.schedule, test, g, args.sample_steps, args.seed)
            rows.append((kind, res))
            print(f"schedule={kind} mse={res.mse:.5f} swap={res.swap_mse:.5f}")
    with open(out / f"ablate_{args.axis}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "mse", "swap_mse", "consistency"])
        for name, res in rows:
            w.writerow([name, res.mse, res.swap_mse, res.consistency])
    plotting.plot_bars([n for n, _ in rows], [r.mse for _, r in rows], out / f"ablate_{args.axis}.png",
                       "held-out MSE", f"{args.axis} ablation", baseline=toy.INVERT_BASELINE)
    print(f"wrote {out / f'ablate_{args.axis}.csv'} and figure")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    p = argparse.ArgumentParser(prog="vedit", description="Instruction-guided video editing toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sp = p.add_subparsers(dest="command", metavar="COMMAND")
    subs: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, func, help: str) -> argparse.ArgumentParser:
        s = sp.add_parser(name, help=help, description=help)
        s.add_argument("--config", metavar="FILE", help="key=value file mirroring these flags")
        s.set_defaults(func=func)
        subs[name] = s
        return s

    s = sub("synth-images", cmd_synth_images, "build pseudo-video triplets from image edit pairs")
    s.add_argument("--pairs", metavar="DIR", help="directory of pair folders (I.png, E.png, instruction.txt)")
    s.add_argument("--out", metavar="SHARD")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("interpolated", "iid"), default="interpolated")
    s.add_argument("--ranges", metavar="FILE", help="affine ranges as key=value lines")
    s.add_argument("--preset", choices=("all", "translate", "rotate", "crop", "none"), default="all")
    s.add_argument("--no-crop", action="store_true", help="skip the resize+crop step")
    s.add_argument("--border", choices=("replicate", "reflect"), default="replicate")
    s.add_argument("--workers", type=int, default=1)

    s = sub("pipeline-videos", cmd_pipeline_videos, "caption, instruct and edit real videos into triplets")
    s.add_argument("--videos", metavar="DIR", help="directory of PNG-sequence folders")
    s.add_argument("--out", metavar="SHARD")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mock", action="store_true", help="use the deterministic in-process services")
    s.add_argument("--timeout-ms", type=int, default=30000)
    s.add_argument("--max-retries", type=int, default=3)
    s.add_argument("--workers", type=int, default=1)

    s = sub("toy-data", cmd_toy_data, "write a shard of the synthetic invert/brighten task")
    s.add_argument("--out", metavar="SHARD")
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--size", type=int, default=8)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--mode", choices=("interpolated", "iid"), default="interpolated")
    s.add_argument("--preset", choices=("all", "translate", "rotate", "none"), default="all")
    s.add_argument("--workers", type=int, default=1)

    s = sub("train", cmd_train, "train the denoiser on one or two shards")
    s.add_argument("--shards", nargs="+", metavar="SHARD")
    s.add_argument("--ratio", default="5:1", help="sampling ratio between the two shards")
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--T", type=int, default=50, help="diffusion steps")
    s.add_argument("--schedule", choices=("scaled", "reference"), default="scaled")
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--head", choices=diffusion.DenoiserModel.HEADS, default="pixel")
    s.add_argument("--clip-len", type=int, default=0, help="cut clips of this many frames (0 keeps all)")
    s.add_argument("--ckpt", metavar="OUT")
    s.add_argument("--log", metavar="CSV", help="loss log (default: next to the checkpoint)")
    s.add_argument("--resume", metavar="CKPT")

    s = sub("edit", cmd_edit, "edit a PNG-sequence video with a trained checkpoint")
    s.add_argument("--ckpt", metavar="FILE")
    s.add_argument("--video", metavar="DIR")
    s.add_argument("--instruction")
    s.add_argument("--lambda-text", type=float)
    s.add_argument("--lambda-vision", type=float)
    s.add_argument("--guidance-mode", choices=diffusion.GUIDANCE_MODES, default="decoupled")
    s.add_argument("--steps", type=int, default=25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clip-x0", action="store_true", help="clip the clean estimate to [0, 1] every step")
    s.add_argument("--adjacent", action="store_true", help="frame consistency over adjacent pairs only")
    s.add_argument("--out", metavar="DIR")

    s = sub("inspect", cmd_inspect, "summarise the records of a shard")
    s.add_argument("--shard", metavar="FILE")
    s.add_argument("--index", type=int)

    s = sub("report", cmd_report, "render figures and tables from loss logs and metric lines")
    s.add_argument("--loss", metavar="CSV")
    s.add_argument("--metrics", metavar="JSONL")
    s.add_argument("--out", metavar="DIR", default="report")

    s = sub("ablate", cmd_ablate, "desk-scale ablations on the synthetic task")
    s.add_argument("--axis", choices=("guidance", "augment", "schedule"))
    s.add_argument("--out", metavar="DIR")
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--n-train", type=int, default=512)
    s.add_argument("--n-test", type=int, default=32)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=3)
    s.add_argument("--sample-steps", type=int, default=25)
    s.add_argument("--lambda-text", type=float, default=1.5)
    s.add_argument("--lambda-vision", type=float, default=1.5)
    return p, subs


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = subs[args.command]
    try:
        if args.config:
            apply_config(sub, args.config)
            args = parser.parse_args(argv)
        missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"{sub.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (dataset.CorruptShardError, diffusion.CheckpointError, cappipe.PipelineError,
            NonFiniteError, OSError, ValueError, IndexError) as exc:
        print(f"{sub.prog}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
