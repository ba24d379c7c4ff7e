"""Command-line front end.

Subcommands: ``init-config``, ``train-static``, ``train-dynamic``,
``render``, ``gradcheck``, ``verify``, ``info``.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage/config error, 3 I/O error, 4 provider/transport error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import (
    CheckpointError,
    ConfigError,
    EngineError,
    ProviderError,
    UsageError,
)
from .fields import SceneModel
from .guidance import AnalyticProvider, EchoProvider, GuidanceProvider, RemoteProvider
from .renderer import (
    Camera,
    render_frame,
    write_displacement_raw,
    write_png,
)
from .trainer import load_checkpoint, train_dynamic, train_static

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PROVIDER = 4


def build_provider(spec: str, resolution: tuple[int, int] | None = None) -> GuidanceProvider:
    """Construct a provider from its config string.

    Formats: ``echo``, ``gray:<value>[:<blend>]``, ``remote:<url>``.
    """
    if spec == "echo":
        return EchoProvider()
    if spec.startswith("gray:"):
        parts = spec.split(":")
        value = float(parts[1])
        blend = float(parts[2]) if len(parts) > 2 else 1.0
        if resolution is None:
            raise ConfigError("gray provider needs a render resolution")
        w, h = resolution
        mean = np.full((h, w, 3), value, dtype=np.float32)
        return AnalyticProvider(mean, blend=blend)
    if spec.startswith("remote:"):
        return RemoteProvider(spec[len("remote:"):])
    raise ConfigError(f"unknown provider spec {spec!r}")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def cmd_init_config(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    config = cfgmod.preset_config(args.preset, seed=args.seed or 0)
    cfgmod.save_config(path, config, preset=args.preset)
    print(f"wrote {path} (preset {args.preset})")
    return EXIT_OK


def _load_run_config(args) -> cfgmod.TrainConfig:
    config = cfgmod.load_config(args.config)
    if args.seed is not None:
        config = cfgmod.with_seed(config, args.seed)
    return config


def cmd_train_static(args) -> int:
    config = _load_run_config(args)
    model = SceneModel(config.model, seed=config.seed, dtype=config.np_dtype())
    phase0 = config.static.phases[0]
    res2d = (config.static.upsample_2d, config.static.upsample_2d)
    resmv = (config.static.upsample_multiview, config.static.upsample_multiview)
    g2d = build_provider(config.providers.provider_2d, res2d)
    g3d = build_provider(config.providers.provider_multiview, resmv)
    kwargs = {}
    if args.resume:
        state = load_checkpoint(
            args.resume, model, expect_hash=cfgmod.config_hash(config), force=args.force
        )
        kwargs = dict(
            start_iteration=state.iteration, adam_state=state.adam_state, rng=state.rng
        )
    result = train_static(
        model,
        g2d,
        g3d,
        config,
        out_dir=args.out,
        metrics_path=args.metrics,
        iterations=args.iterations,
        **kwargs,
    )
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"static stage done; final loss {last:.4e}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_train_dynamic(args) -> int:
    config = _load_run_config(args)
    model = SceneModel(config.model, seed=config.seed, dtype=config.np_dtype())
    state = load_checkpoint(
        args.checkpoint, model, expect_hash=cfgmod.config_hash(config), force=args.force
    )
    w, h = config.dynamic.upsample_size
    gvid = build_provider(config.providers.provider_video, (w, h))
    kwargs = {}
    if args.resume:
        rstate = load_checkpoint(
            args.resume, model, expect_hash=cfgmod.config_hash(config), force=args.force
        )
        kwargs = dict(
            start_iteration=rstate.iteration, adam_state=rstate.adam_state, rng=rstate.rng
        )
    result = train_dynamic(
        model,
        gvid,
        config,
        out_dir=args.out,
        metrics_path=args.metrics,
        iterations=args.iterations,
        **kwargs,
    )
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    print(f"dynamic stage done; final loss {last:.4e}; checkpoint {result.checkpoint_path}")
    return EXIT_OK


def cmd_render(args) -> int:
    config = cfgmod.load_config(args.config)
    model = SceneModel(config.model, seed=config.seed, dtype=config.np_dtype())
    state = load_checkpoint(
        args.checkpoint, model, expect_hash=cfgmod.config_hash(config), force=args.force
    )
    model.deformation_enabled = not args.no_deformation and state.stage == "dynamic"
    channels = args.channels.split(",")
    for ch in channels:
        if ch not in ("rgb", "opacity", "displacement"):
            raise UsageError(f"unknown output channel {ch!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.turntable > 0:
        azimuths = [360.0 * k / args.turntable for k in range(args.turntable)]
        times = [args.time] * args.turntable
    else:
        azimuths = [args.azimuth] * args.frames
        times = np.linspace(args.time_start, args.time_end, args.frames).tolist()

    disp_frames = []
    for k, (az, t) in enumerate(zip(azimuths, times)):
        cam = Camera(
            az, args.elevation, args.radius, args.fov, resolution=(args.width, args.height)
        )
        frame = render_frame(model, cam, float(t), args.samples, jitter=0.5)
        if "rgb" in channels:
            write_png(out / f"rgb_{k:04d}.png", frame.rgb)
        if "opacity" in channels:
            write_png(out / f"opacity_{k:04d}.png", frame.opacity)
        if "displacement" in channels:
            disp_frames.append(frame.displacement)
    if disp_frames:
        write_displacement_raw(out / "displacement.d4dd", np.stack(disp_frames))
    print(f"wrote {len(azimuths)} frame(s) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import suite_grids, suite_renderer

    failures = 0
    for check in suite_grids() + suite_renderer():
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: {check.measured}")
        failures += 0 if check.passed else 1
    if failures:
        print(f"{failures} gradient/oracle check(s) failed")
        return EXIT_VERIFY
    print("all gradient checks passed")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suite

    names = SUITES if args.suite == "all" else (args.suite,)
    failures = 0
    for name in names:
        print(f"== suite {name} ==")
        try:
            results = run_suite(name, fast=args.fast, seed=args.seed or 0)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        for check in results:
            status = "PASS" if check.passed else "FAIL"
            print(f"[{status}] {check.name}: {check.measured}")
            failures += 0 if check.passed else 1
    if failures:
        print(f"{failures} check(s) failed")
        return EXIT_VERIFY
    print("all checks passed")
    return EXIT_OK


def cmd_info(args) -> int:
    from . import __version__

    print(f"d4d engine {__version__}")
    if args.config:
        config = cfgmod.load_config(args.config)
        print(f"config hash: {cfgmod.config_hash(config)}")
        print(json.dumps(
            {
                "seed": config.seed,
                "prompt": config.prompt,
                "canonical_grid": f"{config.model.canonical_grid.levels} levels "
                f"{config.model.canonical_grid.base_res}->{config.model.canonical_grid.max_res}",
                "deformation_grid": f"{config.model.deformation_grid.levels} levels "
                f"{config.model.deformation_grid.base_res}->{config.model.deformation_grid.max_res}",
                "static_iterations": config.static.iterations,
                "dynamic_iterations": config.dynamic.iterations,
            },
            indent=2,
        ))
    if args.checkpoint:
        import struct

        with open(args.checkpoint, "rb") as fh:
            blob = fh.read(16)
            magic, version, hlen = blob[:8], *struct.unpack_from("<II", blob, 8)
            header = json.loads(fh.read(hlen).decode("utf-8"))
        print(
            f"checkpoint: magic={magic!r} version={version} stage={header['stage']} "
            f"iteration={header['iteration']} tensors={len(header['tensors'])}"
        )
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="d4d", description="Two-stage 4D scene synthesis engine"
    )
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("init-config", help="write a fully commented config file")
    q.add_argument("path")
    q.add_argument("--preset", default="text4d", choices=cfgmod.PRESETS)
    q.add_argument("--force", action="store_true")
    _add_seed(q)
    q.set_defaults(fn=cmd_init_config)

    q = sub.add_parser("train-static", help="run the static training stage")
    q.add_argument("--config", required=True)
    q.add_argument("--out", default=None, help="checkpoint/output directory")
    q.add_argument("--metrics", default=None, help="line-delimited JSON metrics path")
    q.add_argument("--resume", default=None, help="checkpoint to resume from")
    q.add_argument("--iterations", type=int, default=None)
    q.add_argument("--force", action="store_true", help="ignore config-hash mismatch")
    _add_seed(q)
    q.set_defaults(fn=cmd_train_static)

    q = sub.add_parser("train-dynamic", help="run the dynamic training stage")
    q.add_argument("--config", required=True)
    q.add_argument("--checkpoint", required=True, help="static-stage checkpoint")
    q.add_argument("--out", default=None)
    q.add_argument("--metrics", default=None)
    q.add_argument("--resume", default=None)
    q.add_argument("--iterations", type=int, default=None)
    q.add_argument("--force", action="store_true")
    _add_seed(q)
    q.set_defaults(fn=cmd_train_dynamic)

    q = sub.add_parser("render", help="render frames from a checkpoint")
    q.add_argument("--config", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--channels", default="rgb", help="comma list: rgb,opacity,displacement")
    q.add_argument("--azimuth", type=float, default=0.0)
    q.add_argument("--elevation", type=float, default=15.0)
    q.add_argument("--radius", type=float, default=1.8)
    q.add_argument("--fov", type=float, default=50.0)
    q.add_argument("--width", type=int, default=128)
    q.add_argument("--height", type=int, default=128)
    q.add_argument("--samples", type=int, default=128)
    q.add_argument("--time", type=float, default=0.0)
    q.add_argument("--time-start", type=float, default=0.0)
    q.add_argument("--time-end", type=float, default=1.0)
    q.add_argument("--frames", type=int, default=1)
    q.add_argument("--turntable", type=int, default=0, help="render N azimuths at --time")
    q.add_argument("--no-deformation", action="store_true")
    q.add_argument("--force", action="store_true")
    q.set_defaults(fn=cmd_render)

    q = sub.add_parser("gradcheck", help="finite-difference verification report")
    _add_seed(q)
    q.set_defaults(fn=cmd_gradcheck)

    q = sub.add_parser("verify", help="run a verification suite")
    q.add_argument("--suite", default="all", help="grids | renderer | losses | e2e-toy | all")
    q.add_argument("--fast", action="store_true", help="reduced e2e iterations (smoke only)")
    _add_seed(q)
    q.set_defaults(fn=cmd_verify)

    q = sub.add_parser("info", help="engine, config, and checkpoint info")
    q.add_argument("--config", default=None)
    q.add_argument("--checkpoint", default=None)
    _add_seed(q)
    q.set_defaults(fn=cmd_info)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            # argparse exits with 2 on usage errors (it already printed why)
            return int(exc.code) if exc.code else EXIT_OK
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EngineError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
