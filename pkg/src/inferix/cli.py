"""Operator entry point: generate / serve / eval / profile-overhead.

Configuration is a flat INI file with sections mirroring the module names;
command-line flags override file values and INFERIX_* environment variables
sit between the two. The fully resolved config is written into the output
directory so any run can be reproduced bit-identically from it.
"""

from __future__ import annotations

import argparse
import configparser
import io
import os
import sys
from pathlib import Path

import numpy as np

from .engine import (
    DenoiseSchedule,
    Engine,
    GenerationRequest,
    ModelConfig,
    build_model,
    default_kv_config,
    generate_sequence,
    recompute_reference,
)
from .errors import ConfigError, InferixError
from .metrics import ChunkedVideo, evaluate, load_video, write_frame, write_report
from .parallel import LinkCostModel, STRATEGIES, choose_strategy
from .profiler import Profiler, calibrated_workload, measure_overhead
from .server import parse_endpoint, serve

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_DEFAULTS = {
    "model": {
        "layers": "2", "heads": "2", "head_dim": "8", "block_len": "16",
        "frame_height": "16", "frame_width": "16", "prompt_dim": "16",
        "weight_seed": "0",
    },
    "bd-engine": {
        "num_blocks": "2", "steps": "1.0,0.5,0.25", "step_scale": "0.5",
        "seed": "0", "kv_window": "", "prompts": "0:a quiet scene",
    },
    "kv-manager": {
        "page_len": "16", "capacity_pages_device": "1024",
        "capacity_pages_host": "1024",
    },
    "parallel-sim": {
        "world_size": "1", "strategy": "auto",
        "cost_per_message": "1e-6", "cost_per_byte": "1e-9",
    },
    "profiler": {"enabled": "false", "report_path": "profile.txt"},
    "stream": {
        "listen": "127.0.0.1:0", "web_listen": "", "client_queue": "256",
        "wait_first_client_s": "2.0",
    },
    "output": {"dir": "out"},
}

_ENV_MAP = {
    ("stream", "listen"): "INFERIX_LISTEN",
    ("stream", "web_listen"): "INFERIX_WEB_LISTEN",
    ("stream", "client_queue"): "INFERIX_CLIENT_QUEUE",
    ("bd-engine", "seed"): "INFERIX_SEED",
    ("output", "dir"): "INFERIX_OUT",
}


def load_config(path: str | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(_DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
        for section in cp.sections():
            if section not in _DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key in cp[section]:
                if key not in _DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
    for (section, key), var in _ENV_MAP.items():
        if var in os.environ:
            cp[section][key] = os.environ[var]
    return cp


def apply_flag_overrides(cp, args):
    if getattr(args, "seed", None) is not None:
        cp["bd-engine"]["seed"] = str(args.seed)
    if getattr(args, "out", None) is not None:
        cp["output"]["dir"] = args.out
    if getattr(args, "listen", None) is not None:
        cp["stream"]["listen"] = args.listen
    if getattr(args, "web_listen", None) is not None:
        cp["stream"]["web_listen"] = args.web_listen
    if getattr(args, "client_queue", None) is not None:
        cp["stream"]["client_queue"] = str(args.client_queue)


def _parse_prompts(text: str) -> list[tuple[int, str]]:
    schedule = []
    for part in text.split("|"):
        part = part.strip()
        if not part:
            continue
        chunk, _, prompt = part.partition(":")
        try:
            idx = int(chunk)
        except ValueError:
            raise ConfigError(f"bad prompt entry {part!r}, expected chunk:text")
        if not prompt:
            raise ConfigError(f"empty prompt text in {part!r}")
        schedule.append((idx, prompt))
    if not schedule:
        raise ConfigError("empty prompt schedule")
    return schedule


def build_run(cp):
    """configparser -> (model, request, kv_config); raises ConfigError."""
    m = cp["model"]
    try:
        model_cfg = ModelConfig(
            layers=m.getint("layers"), heads=m.getint("heads"),
            head_dim=m.getint("head_dim"), block_len=m.getint("block_len"),
            frame_shape=(m.getint("frame_height"), m.getint("frame_width")),
            prompt_dim=m.getint("prompt_dim"),
            weight_seed=m.getint("weight_seed"))
        g = cp["bd-engine"]
        steps = [float(s) for s in g["steps"].split(",") if s.strip()]
        window = g["kv_window"].strip()
        request = GenerationRequest(
            num_blocks=g.getint("num_blocks"),
            schedule=DenoiseSchedule(steps=steps,
                                     step_scale=g.getfloat("step_scale")),
            seed=g.getint("seed"),
            prompt_schedule=_parse_prompts(g["prompts"]),
            kv_window=int(window) if window else None)
        request.validate()
        kv = cp["kv-manager"]
        kv_config = default_kv_config(
            model_cfg,
            page_len=kv.getint("page_len"),
            capacity_pages_device=kv.getint("capacity_pages_device"),
            capacity_pages_host=kv.getint("capacity_pages_host"))
        kv_config.validate()
    except ValueError as e:
        raise ConfigError(f"bad config value: {e}") from None
    return model_cfg, request, kv_config


def _select_strategy(cp, model_cfg, request):
    ps = cp["parallel-sim"]
    world = ps.getint("world_size")
    if world <= 1:
        return None
    strategy = ps["strategy"]
    if strategy == "auto":
        picked = choose_strategy(
            seq_len=model_cfg.block_len * request.num_blocks,
            heads=model_cfg.heads, world_size=world,
            link_cost_model=LinkCostModel(
                cost_per_message=ps.getfloat("cost_per_message"),
                cost_per_byte=ps.getfloat("cost_per_byte")),
            head_dim=model_cfg.head_dim)
        return picked["strategy"]
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown parallel strategy {strategy!r}")
    return strategy


def write_resolved(cp, out_dir) -> str:
    path = os.path.join(out_dir, "resolved.ini")
    buf = io.StringIO()
    cp.write(buf)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
    return path


def _make_profiler(cp) -> Profiler | None:
    if cp["profiler"].getboolean("enabled"):
        return Profiler(enabled=True)
    return None


def cmd_generate(args) -> int:
    cp = load_config(args.config)
    apply_flag_overrides(cp, args)
    model_cfg, request, kv_config = build_run(cp)
    strategy = _select_strategy(cp, model_cfg, request)
    if strategy is not None:
        cp["parallel-sim"]["strategy"] = strategy
        print(f"parallel strategy: {strategy}")
    out_dir = cp["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    profiler = _make_profiler(cp)
    model = build_model(model_cfg)
    blocks = generate_sequence(model, request, kv_config=kv_config,
                               profiler=profiler)
    for block in blocks:
        for i, frame in enumerate(block.frames):
            write_frame(
                os.path.join(out_dir,
                             f"frame_{block.chunk_index:04d}_{i:04d}.frame"),
                frame)
    if profiler is not None:
        with open(os.path.join(out_dir, cp["profiler"]["report_path"]), "w") as fh:
            fh.write(profiler.report().to_text())
    write_resolved(cp, out_dir)
    print(f"wrote {sum(len(b.frames) for b in blocks)} frames to {out_dir}")
    if args.verify:
        reference = recompute_reference(model, request)
        max_diff = max(
            float(np.abs(b.latent - r.latent).max())
            for b, r in zip(blocks, reference))
        print(f"verify: max latent diff vs recompute reference = {max_diff:.3e}")
        if max_diff > 1e-4:
            print("verify FAILED (tolerance 1e-4)", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_serve(args) -> int:
    cp = load_config(args.config)
    apply_flag_overrides(cp, args)
    model_cfg, request, kv_config = build_run(cp)
    host, port = parse_endpoint(cp["stream"]["listen"])
    profiler = _make_profiler(cp)
    engine = Engine(build_model(model_cfg), kv_config=kv_config,
                    profiler=profiler)
    try:
        server = serve(engine, host, port,
                       client_queue=cp["stream"].getint("client_queue"),
                       profiler=profiler)
    except OSError as e:
        print(f"bind failed for {host}:{port}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    web = cp["stream"]["web_listen"].strip()
    if web:
        whost, wport = parse_endpoint(web)
        try:
            addr = server.bridge(whost, wport)
        except OSError as e:
            print(f"bind failed for {web}: {e}", file=sys.stderr)
            server.stop()
            return EXIT_RUNTIME
        print(f"web bridge on {addr[0]}:{addr[1]}", flush=True)
        from .server import _DEFAULT_CONSOLE_ROOT

        root = server.console_root or _DEFAULT_CONSOLE_ROOT
        if Path(root).is_dir():
            print(f"console at http://{addr[0]}:{addr[1]}/console", flush=True)
    # grace period so a client launched alongside us sees the whole stream;
    # generation proceeds regardless once it elapses
    import time

    deadline = time.monotonic() + cp["stream"].getfloat("wait_first_client_s")
    while time.monotonic() < deadline and not server._clients:
        time.sleep(0.02)
    try:
        server.run_generation(request)
    finally:
        server.stop()
    return EXIT_OK


def cmd_eval(args) -> int:
    if not os.path.isdir(args.input):
        raise ConfigError(f"input directory not found: {args.input}")
    video = load_video(args.input, chunk_len=args.chunk_len)
    report = evaluate(video, weight_scheme=args.weights)
    out_dir = args.out or args.input
    os.makedirs(out_dir, exist_ok=True)
    write_report(report, os.path.join(out_dir, "vde_report.txt"),
                 os.path.join(out_dir, "vde_report.json"))
    for name in report.VDE_FIELDS:
        print(f"{name}\t{getattr(report, name):.6f}")
    return EXIT_OK


def cmd_profile_overhead(args) -> int:
    profiler = Profiler(enabled=not args.disabled)
    if args.heavy_hook:
        profiler.register_hook("span-end", lambda n, d: sum(range(5000)))
    workload = calibrated_workload()
    ratio = min(measure_overhead(profiler, workload)
                for _ in range(args.attempts))
    print(f"overhead ratio: {ratio:.4f}")
    if ratio < 1.05:
        return EXIT_OK
    if args.heavy_hook:
        print("ratio exceeds 1.05: the <5% bound covers built-in "
              "instrumentation, not user-registered hooks", file=sys.stderr)
    else:
        print("ratio exceeds the 1.05 bound", file=sys.stderr)
    return EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inferix",
        description="Block-diffusion video inference engine")
    parser.add_argument("--config", metavar="PATH",
                        help="INI config file (flags override it)")
    parser.add_argument("--seed", type=int, metavar="N",
                        help="generation seed override")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run a generation to frame files")
    p.add_argument("--verify", action="store_true",
                   help="also recompute without the KV cache and compare")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("serve", help="stream a generation to clients")
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--web-listen", metavar="HOST:PORT",
                   help="also open the browser WebSocket bridge")
    p.add_argument("--client-queue", type=int, metavar="N")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("eval", help="compute VDE metrics over a frame dir")
    p.add_argument("input", help="directory of .frame files")
    p.add_argument("--chunk-len", type=int, default=16)
    p.add_argument("--weights", choices=("uniform", "wmape"),
                   default="uniform")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile-overhead",
                       help="measure profiler overhead on a calibrated workload")
    p.add_argument("--disabled", action="store_true",
                   help="measure with the profiler disabled")
    p.add_argument("--heavy-hook", action="store_true",
                   help="attach a deliberately expensive hook")
    p.add_argument("--attempts", type=int, default=3,
                   help="measurement attempts; best ratio wins")
    p.set_defaults(fn=cmd_profile_overhead)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InferixError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
