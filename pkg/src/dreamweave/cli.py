"""Command line front door.

Every option can also come from a JSON config file given with ``--config``.
The file holds one object per subcommand, keyed by the option's long name
with dashes turned into underscores; flags on the command line win::

    {"bench": {"delay_ms": 780, "trials": 5},
     "pipeline": {"store": "/data/store", "task": {"n_trajectories": 50, "timesteps": 70}}}
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import threading
from pathlib import Path

import numpy as np

from .camera import intrinsics_from_fov, normalize_disparity, yaw_pitch_pose
from .dim import assemble_stack, encode_png, save_stack
from .generator import RemoteGenerator, StubGenerator, stub_render
from .raster import labels_to_png, save_depth
from .scene import TerrainSpec, binary_masks, build_terrain, load_terrain_spec, raycast

log = logging.getLogger("dreamweave")

PREVIEW_PROMPTS = {0: "pale overcast sky", 1: "wet asphalt", 2: "weathered concrete steps", 3: "red brick wall"}


def _terrain(args) -> TerrainSpec:
    if getattr(args, "terrain_file", None):
        return load_terrain_spec(args.terrain_file)
    return TerrainSpec(kind=args.terrain)


def _add_view(p):
    p.add_argument("--terrain", choices=("flat", "stairs", "hurdles"), default="stairs")
    p.add_argument("--terrain-file", help="terrain spec JSON, overrides --terrain")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--fov", type=float, default=120.0)
    p.add_argument("--near", type=float, default=0.05)
    p.add_argument("--far", type=float, default=10.0)
    p.add_argument("--pose", type=float, nargs=5, metavar=("X", "Y", "Z", "YAW", "PITCH"),
                   default=[0.0, 0.0, 0.45, 0.0, math.radians(20)])


def cmd_render(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = build_terrain(_terrain(args))
    K = intrinsics_from_fov(args.fov, args.width, args.height)
    x, y, z, yaw, pitch = args.pose
    pose = yaw_pitch_pose((x, y, z), yaw=yaw, pitch=pitch)
    depth, labels = raycast(scene, K, pose, args.near, args.far)
    save_depth(out / "depth.dwd", depth, pose, K)
    (out / "labels.png").write_bytes(labels_to_png(labels))
    disp = normalize_disparity(depth)
    (out / "disparity.png").write_bytes(encode_png(np.rint(disp * 255).astype(np.uint8)))
    for value, mask in binary_masks(labels):
        (out / f"mask_{value:03d}.png").write_bytes(encode_png(mask.astype(np.uint8) * 255))
    (out / "preview.png").write_bytes(encode_png(stub_render(scene, pose, K, PREVIEW_PROMPTS,
                                                             near=args.near, far=args.far)))
    print(f"wrote depth, labels, disparity, masks and preview to {out}")
    return 0


def cmd_stack(args) -> int:
    from .trajectory import walk
    scene = build_terrain(_terrain(args))
    K = intrinsics_from_fov(args.fov, args.width, args.height)
    x, y, z, yaw, pitch = args.pose
    poses = walk(scene, args.steps, args.speed, start=(x, y), yaw=yaw, pitch=pitch)
    renders = [raycast(scene, K, p, args.near, args.far)[0] for p in poses]
    key = stub_render(scene, poses[0], K, PREVIEW_PROMPTS, near=args.near, far=args.far)
    stack = assemble_stack(key, list(zip(renders, poses)), K, fill=args.fill,
                           provenance={"terrain": _terrain(args).kind, "speed": args.speed})
    save_stack(stack, args.out)
    print(f"{len(stack)} frames, mean hole fraction {stack.hole_fraction:.4f}, written to {args.out}")
    return 0


def cmd_prompts(args) -> int:
    from .prompts import (ChatCompletionClient, OfflinePromptClient, PromptPool, parse_prompt_batch,
                          request_prompt_batch, serialize_prompt_batch)
    pool_dir = Path(args.pool) if args.pool else None

    def load_pool():
        return PromptPool.load(pool_dir) if pool_dir and (pool_dir / "batches").exists() else PromptPool()

    if args.action == "validate":
        batch = parse_prompt_batch(Path(args.file).read_text("utf-8"))
        print(f"{batch.meta_prompt_id}: {len(batch)} pairs OK")
        return 0
    if pool_dir is None:
        raise SystemExit("--pool is required")
    pool = load_pool()
    if args.action == "request":
        client = ChatCompletionClient() if args.remote else OfflinePromptClient()
        meta = Path(args.meta_file).read_text("utf-8") if args.meta_file else args.meta
        if not meta:
            raise SystemExit("give --meta or --meta-file")
        batch = request_prompt_batch(client, meta)
        pool.add_batch(batch)
        pool.save(pool_dir)
        print(f"added {len(batch)} pairs from {batch.meta_prompt_id}; pool holds {len(pool)}")
    elif args.action == "add":
        batch = parse_prompt_batch(Path(args.file).read_text("utf-8"))
        pool.add_batch(batch)
        pool.save(pool_dir)
        print(f"added {len(batch)} pairs; pool holds {len(pool)}")
    elif args.action == "sample":
        for i in range(args.count):
            pair = pool.sample(args.seed + i)
            print(json.dumps(pair.to_dict(), ensure_ascii=False))
        pool.save(pool_dir)
    elif args.action == "show":
        usage = pool.usage()
        for meta, batch in sorted(pool.batches.items()):
            used = [usage[p.id] for p in batch.pairs]
            print(f"{meta}: {len(batch)} pairs, draws {sum(used)} (min {min(used)}, max {max(used)})")
        if args.dump:
            for batch in pool.batches.values():
                sys.stdout.write(serialize_prompt_batch(batch))
    return 0


def _generator(args):
    return RemoteGenerator() if getattr(args, "remote_generator", False) else StubGenerator()


def cmd_pipeline(args) -> int:
    from .pipeline import (BrokerServer, DataStore, KillSwitch, TaskConfig, connect_broker, rpc_weaver,
                           run_offline_batch, run_onpolicy_loop, weaver_worker)
    task = TaskConfig.from_dict(args.task or {})
    for name in ("n_trajectories", "timesteps", "width", "height", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(task, name, value)
    if args.terrain_file:
        task.terrain = load_terrain_spec(args.terrain_file)

    if args.mode == "broker":
        server = BrokerServer((args.host, args.port)).start()
        print(f"broker listening on {server.address}", flush=True)
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            server.stop()
        return 0

    broker = connect_broker(args.broker)
    if args.mode == "weaver":
        stop = threading.Event()
        try:
            if args.rpc:
                rpc_weaver(broker, _generator(args), worker_id=args.worker_id, stop=stop)
            else:
                weaver_worker(broker, _generator(args), DataStore(args.store), queue=task.weave_queue,
                              worker_id=args.worker_id, stop=stop, lease=task.lease_s)
        except KeyboardInterrupt:
            stop.set()
        return 0

    store = DataStore(args.store)
    if args.mode == "offline":
        kill = KillSwitch(args.kill_prob, task.seed) if args.kill_prob else None
        report = run_offline_batch(task, broker, store, generator=_generator(args), kill=kill)
        print(json.dumps(report.to_dict(), indent=2))
        return 0 if report.ok else 1
    # on-policy: spin up local RPC weavers unless pointed at a remote broker that already has them
    from .pipeline import WorkerGroup
    group = None
    if args.local_weavers:
        group = WorkerGroup("rpc", args.local_weavers,
                            lambda wid, stop: rpc_weaver(broker, _generator(args), worker_id=wid, stop=stop)).start()
    try:
        report = run_onpolicy_loop(task, broker, store, rpc_deadline_s=args.deadline)
    finally:
        if group is not None:
            group.stop()
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "digests"}, indent=2))
    return 0 if not report.flagged else 1


def cmd_bench(args) -> int:
    from .bench import bench_dim
    report = bench_dim((args.width, args.height), args.stack_len, args.delay_ms, args.trials,
                       terrain=args.terrain, seed=args.seed)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.format())
    return 0


def cmd_eval(args) -> int:
    from .metrics import format_table, load_rollout_logs, metric_report, synthetic_logs
    if args.synthetic:
        logs = synthetic_logs(args.synthetic, np.random.default_rng(args.seed))
    elif args.logs:
        logs = [log for path in args.logs for log in load_rollout_logs(path)]
    else:
        raise SystemExit("give rollout log files or --synthetic N")
    rows = metric_report(logs)
    print(json.dumps(rows, indent=2) if args.json else format_table(rows))
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="dreamweave", description=__doc__.split("\n")[0])
    parser.add_argument("--config", help="JSON config file with per-subcommand defaults")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["render"] = sub.add_parser("render", help="depth, labels, masks and disparity for one view")
    _add_view(p)
    p.add_argument("--out", default="render_out")
    p.set_defaults(func=cmd_render)

    p = subs["stack"] = sub.add_parser("stack", help="one keyframe-plus-warp frame stack")
    _add_view(p)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--speed", type=float, default=0.6)
    p.add_argument("--fill", choices=("nearest_valid", "mark"), default="nearest_valid")
    p.add_argument("--out", default="stack_out")
    p.set_defaults(func=cmd_stack)

    p = subs["prompts"] = sub.add_parser("prompts", help="prompt pool management")
    p.add_argument("action", choices=("request", "add", "sample", "show", "validate"))
    p.add_argument("--pool", help="pool directory")
    p.add_argument("--meta", help="meta prompt text")
    p.add_argument("--meta-file")
    p.add_argument("--file", help="batch document for add/validate")
    p.add_argument("--remote", action="store_true", help="use the chat-completion endpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--dump", action="store_true")
    p.set_defaults(func=cmd_prompts)

    p = subs["pipeline"] = sub.add_parser("pipeline", help="offline batch, on-policy loop, broker or weaver")
    p.add_argument("mode", choices=("offline", "onpolicy", "broker", "weaver"))
    p.add_argument("--broker", help="host:port, defaults to $DREAMWEAVE_BROKER or in-process")
    p.add_argument("--store", help="store root, defaults to $DREAMWEAVE_STORE")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--n-trajectories", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--terrain-file")
    p.add_argument("--kill-prob", type=float, default=0.0, help="fault injection per job")
    p.add_argument("--rpc", action="store_true", help="weaver mode: serve RPC calls")
    p.add_argument("--worker-id", default="weaver")
    p.add_argument("--local-weavers", type=int, default=4, help="on-policy: RPC weavers started in-process")
    p.add_argument("--deadline", type=float, default=10.0, help="on-policy RPC deadline in seconds")
    p.add_argument("--remote-generator", action="store_true", help="use $DREAMWEAVE_GENERATOR_URL")
    p.set_defaults(func=cmd_pipeline, task=None)

    p = subs["bench"] = sub.add_parser("bench", help="keyframe-plus-warp throughput benchmark")
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=90)
    p.add_argument("--stack-len", type=int, default=7)
    p.add_argument("--delay-ms", type=float, default=780.0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--terrain", choices=("flat", "stairs", "hurdles"), default="stairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = subs["eval"] = sub.add_parser("eval", help="FGR and x-displacement over rollout logs")
    p.add_argument("logs", nargs="*", help="JSON Lines rollout logs")
    p.add_argument("--synthetic", type=int, default=0, help="evaluate N synthetic logs instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        config = json.loads(Path(known.config).read_text("utf-8"))
        for name, section in config.items():
            if name not in subs:
                raise SystemExit(f"config: unknown section {name!r}")
            dests = {a.dest for a in subs[name]._actions} | {"task"}
            unknown = set(section) - dests
            if unknown:
                raise SystemExit(f"config: unknown keys in [{name}]: {sorted(unknown)}")
            subs[name].set_defaults(**section)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
