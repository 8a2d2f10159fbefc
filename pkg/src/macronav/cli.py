"""Command-line entry point dispatching every workflow.

Exit codes: 0 on success, 2 for configuration problems (bad flags, bad
config keys, out-of-range values), 3 for runtime failures.  All commands
take ``--config FILE`` plus trailing ``key=value`` overrides; run artifacts
land under ``--out`` or ``$MACRONAV_DATA_DIR/<command>``.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, config, encoder, evalkit, gridmap, maskgen, policy
from .errors import ConfigError
from .gridmap import MAP_STYLES, BeliefMap, MapSpec, Pose
from .navenv import N_NODE_FEATURES, NavCfg, NavEnv
from .nets import ParamStore


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macronav",
        description="Map pretraining, waypoint RL, and evaluation workflows.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, default=None,
                        help="key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: data dir)")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides applied after the file")
        return sp

    add("gen-maps", "generate a deterministic PGM map set")

    pre = add("pretrain", "self-supervised encoder pretraining")
    pre.add_argument("--tasks", default=",".join(maskgen.TASKS),
                     help="comma-separated task subset (spm,fov,mae)")
    pre.add_argument("--steps", type=int, default=None,
                     help="shorthand for the steps config key")

    trl = add("train-rl", "soft actor-critic waypoint training")
    trl.add_argument("--encoder-ckpt", type=Path, default=None,
                     help="warm-start the context encoder from a "
                          "pretraining checkpoint")

    ev = add("eval", "run evaluation episodes and emit a report")
    ev.add_argument("--actor", required=True,
                    choices=("oracle", "baseline", "random", "policy"))
    ev.add_argument("--level", default="easy",
                    choices=tuple(evalkit.LEVELS))
    ev.add_argument("--episodes", type=int, default=evalkit.EPISODES_PER_LEVEL)
    ev.add_argument("--ckpt", type=Path, default=None,
                    help="agent checkpoint (required for --actor policy)")
    ev.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                    help="parallel episode workers (default: cores)")

    add("inspect-masks", "render mask-generator samples as PGM images")

    att = add("export-attention", "dump encoder attention heatmaps")
    att.add_argument("--ckpt", type=Path, required=True,
                     help="pretraining checkpoint to inspect")

    add("env-server", "serve the environment over stdio (one JSON "
                      "request per line)")
    return parser


def _out_dir(args) -> Path:
    if args.out is not None:
        out = args.out
    else:
        root = Path(os.environ.get("MACRONAV_DATA_DIR", "macronav_data"))
        out = root / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_of(args) -> int:
    if args.seed is None:
        if args.command in ("pretrain", "train-rl"):
            raise ConfigError(f"--seed is required for {args.command}")
        return 0
    return args.seed


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_maps(args, cfg) -> int:
    out = _out_dir(args)
    rng = np.random.default_rng(_seed_of(args))
    index = ["file,style,size,density,seed"]
    for i in range(cfg["count"]):
        style = cfg["style"]
        if style == "mixed":
            style = MAP_STYLES[int(rng.integers(len(MAP_STYLES)))]
        map_seed = int(rng.integers(2 ** 31))
        grid = gridmap.generate_map(MapSpec(size=cfg["size"], style=style,
                                            density=cfg["density"],
                                            seed=map_seed))
        grid = gridmap.OccupancyGrid(grid.cells, cfg["resolution"])
        name = f"map_{i:04d}.pgm"
        gridmap.save_map(grid, out / name)
        index.append(f"{name},{style},{cfg['size']},{cfg['density']},"
                     f"{map_seed}")
    (out / "index.csv").write_text("\n".join(index) + "\n")
    print(f"wrote {cfg['count']} maps to {out}")
    return 0


def _encoder_cfg(cfg, prefix: str = "", map_hw: int | None = None
                 ) -> encoder.EncoderCfg:
    return encoder.EncoderCfg(
        d=cfg[f"{prefix}d"], layers=cfg[f"{prefix}layers"],
        heads=cfg[f"{prefix}heads"], patch=cfg[f"{prefix}patch"],
        map_hw=cfg["map_hw"] if map_hw is None else map_hw,
        dec_d=cfg[f"{prefix}dec_d"], dec_layers=cfg[f"{prefix}dec_layers"],
        dec_heads=cfg[f"{prefix}dec_heads"])


def _cmd_pretrain(args, cfg) -> int:
    tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    bad = [t for t in tasks if t not in maskgen.TASKS]
    if bad or not tasks:
        raise ConfigError(f"--tasks must be a non-empty subset of "
                          f"{','.join(maskgen.TASKS)}, got {args.tasks!r}")
    out = _out_dir(args)
    seed = _seed_of(args)
    steps = args.steps if args.steps is not None else cfg["steps"]
    if steps < 1:
        raise ConfigError(f"steps must be >= 1 (got {steps})")

    run = encoder.PretrainRunCfg(
        cfg=_encoder_cfg(cfg), steps=steps, batch=cfg["batch"], lr=cfg["lr"],
        weight_decay=cfg["weight_decay"], seed=seed, tasks=tasks,
        maps_per_source=cfg["maps_per_source"],
        partial_frac=cfg["partial_frac"])

    def on_step(step: int, metrics: dict) -> None:
        if cfg["log_every"] and (step % cfg["log_every"] == 0
                                 or step == steps - 1):
            print(f"step {step:5d} task {metrics['task']:4s} "
                  f"loss {metrics['loss']:.5f}")

    store, history = encoder.run_pretraining(run, on_step=on_step)
    ckpt_path = out / "encoder.ckpt"
    encoder.save_model(ckpt_path, store)
    rows = ["step,task,loss"] + [f"{m['step']},{m['task']},{m['loss']!r}"
                                 for m in history]
    (out / "pretrain_log.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {ckpt_path}")
    return 0


def _agent_meta(pcfg: policy.PolicyCfg, ecfg: encoder.EncoderCfg,
                nav: NavCfg) -> dict[str, float]:
    return {
        "d": pcfg.d, "layers": pcfg.layers, "heads": pcfg.heads,
        "n_nodes": pcfg.n_nodes,
        "enc_d": ecfg.d, "enc_layers": ecfg.layers, "enc_heads": ecfg.heads,
        "enc_patch": ecfg.patch, "enc_dec_d": ecfg.dec_d,
        "enc_dec_layers": ecfg.dec_layers, "enc_dec_heads": ecfg.dec_heads,
        "ctx_hw": nav.ctx_hw, "knn": nav.knn, "max_steps": nav.max_steps,
    }


def _agent_from_meta(path) -> tuple[policy.Agent, NavCfg]:
    meta = policy.read_agent_meta(path)
    if not meta:
        raise ConfigError(f"{path} carries no architecture metadata; "
                          f"was it written by train-rl?")
    g = lambda k: int(meta[k])
    pcfg = policy.PolicyCfg(d=g("d"), layers=g("layers"), heads=g("heads"),
                            lstm_dim=g("d"), n_nodes=g("n_nodes"))
    ecfg = encoder.EncoderCfg(
        d=g("enc_d"), layers=g("enc_layers"), heads=g("enc_heads"),
        patch=g("enc_patch"), map_hw=g("ctx_hw"), dec_d=g("enc_dec_d"),
        dec_layers=g("enc_dec_layers"), dec_heads=g("enc_dec_heads"))
    agent = policy.Agent(pcfg, ecfg, seed=0)
    policy.load_agent(path, agent)
    nav = NavCfg(n_nodes=g("n_nodes"), knn=g("knn"), ctx_hw=g("ctx_hw"),
                 max_steps=g("max_steps"))
    return agent, nav


def _cmd_train_rl(args, cfg) -> int:
    out = _out_dir(args)
    seed = _seed_of(args)
    pcfg = policy.PolicyCfg(d=cfg["d"], layers=cfg["layers"],
                            heads=cfg["heads"], lstm_dim=cfg["d"],
                            n_nodes=cfg["n_nodes"])
    ecfg = _encoder_cfg(cfg, prefix="enc_", map_hw=cfg["ctx_hw"])
    sac = policy.SacCfg(gamma=cfg["gamma"], tau=cfg["tau"], lr=cfg["lr"],
                        alpha_init=cfg["alpha_init"],
                        target_entropy_coef=cfg["entropy_coef"],
                        fixed_alpha=cfg["fixed_alpha"],
                        batch_size=cfg["batch_size"],
                        replay_capacity=cfg["replay"])
    nav = NavCfg(n_nodes=cfg["n_nodes"], knn=cfg["knn"],
                 ctx_hw=cfg["ctx_hw"], max_steps=cfg["max_steps"])

    agent = policy.Agent(pcfg, ecfg, seed=seed, sac=sac)
    if args.encoder_ckpt is not None:
        try:
            loaded = policy.load_pretrained_encoder(args.encoder_ckpt, agent)
        except (ValueError, OSError) as exc:
            raise ConfigError(f"--encoder-ckpt: {exc}") from exc
        print(f"warm-started {len(loaded)} encoder tensors from "
              f"{args.encoder_ckpt}")

    replay = policy.ReplayBuffer(sac.replay_capacity)
    rng = np.random.default_rng(seed)
    spec = evalkit.LEVELS[cfg["level"]]
    rows = ["episode,outcome,decisions,reward_sum,critic,actor,entropy,"
            "alpha_value"]
    metrics: dict = {}
    t_start = time.monotonic()
    for ep in range(cfg["episodes"]):
        if cfg["budget_s"] and time.monotonic() - t_start > cfg["budget_s"]:
            # wall cap: trades the byte-exact reproducibility of a fixed
            # episode count for a bounded run
            print(f"stopping at episode {ep}: budget_s={cfg['budget_s']:.0f} "
                  f"exhausted")
            break
        grid, start, goal, _, _ = evalkit.generate_episode(spec, ep, seed)
        env = NavEnv(grid, nav, seed=seed + ep)
        stats = policy.collect_episode(env, agent, start, goal, replay, rng)
        if len(replay) >= max(cfg["warmup"], sac.batch_size):
            for _ in range(cfg["updates_per_episode"]):
                metrics = policy.sac_update(
                    agent, replay.sample(sac.batch_size, rng))
        rows.append(f"{ep},{stats['outcome']},{stats['decisions']},"
                    f"{stats['reward_sum']!r},{metrics.get('critic', 0.0)!r},"
                    f"{metrics.get('actor', 0.0)!r},"
                    f"{metrics.get('entropy', 0.0)!r},"
                    f"{metrics.get('alpha_value', 0.0)!r}")
        if cfg["log_every"] and (ep % cfg["log_every"] == 0
                                 or ep == cfg["episodes"] - 1):
            print(f"episode {ep:4d} {stats['outcome']:7s} "
                  f"reward {stats['reward_sum']:8.2f} "
                  f"decisions {stats['decisions']:3d} "
                  f"entropy {metrics.get('entropy', float('nan')):.3f}")
    ckpt_path = out / "agent.ckpt"
    policy.save_agent(ckpt_path, agent, meta=_agent_meta(pcfg, ecfg, nav))
    (out / "train_log.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {ckpt_path}")
    return 0


def _cmd_eval(args, cfg) -> int:
    out = _out_dir(args)
    seed = _seed_of(args)
    if args.actor == "policy":
        if args.ckpt is None:
            raise ConfigError("--actor policy requires --ckpt")
        agent, nav = _agent_from_meta(args.ckpt)
        actor_spec = {"kind": "policy", "ckpt": str(args.ckpt),
                      "pcfg": agent.pcfg, "enc_cfg": agent.enc_cfg}
        nav_kwargs = {"n_nodes": nav.n_nodes, "knn": nav.knn,
                      "ctx_hw": nav.ctx_hw, "max_steps": cfg["max_steps"]}
    else:
        actor_spec = {"kind": args.actor, "seed": seed}
        nav_kwargs = {"n_nodes": cfg["n_nodes"], "knn": cfg["knn"],
                      "ctx_hw": cfg["ctx_hw"], "max_steps": cfg["max_steps"]}
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1 (got {args.episodes})")
    if args.workers < 1:
        raise ConfigError(f"--workers must be >= 1 (got {args.workers})")

    records = evalkit.evaluate(actor_spec, args.level, args.episodes,
                               seed=seed, workers=args.workers,
                               nav_kwargs=nav_kwargs)
    metrics = evalkit.emit_report(records, out,
                                  overlays_per_level=cfg["overlays"])
    outcomes = {o: sum(r.outcome == o for r in records)
                for o in sorted({r.outcome for r in records})}
    print(f"{args.actor} on {args.level}: episodes={len(records)} "
          f"SR={metrics['SR']:.2f} SPL={metrics['SPL']:.2f} "
          f"outcomes={outcomes}")
    print(f"report in {out}")
    return 0


def _cmd_inspect_masks(args, cfg) -> int:
    out = _out_dir(args)
    rng = np.random.default_rng(_seed_of(args))
    grid = (cfg["grid"], cfg["grid"])
    written = []
    for task in maskgen.TASKS:
        for i in range(cfg["samples"]):
            spec = maskgen.sample_mask(task, grid, rng)
            img = maskgen.render_mask(spec, patch=cfg["scale"])
            name = f"{task}_{i:02d}.pgm"
            gridmap.save_pgm(out / name, img)
            written.append(name)
    print(f"wrote {len(written)} mask images to {out}")
    return 0


def _cmd_export_attention(args, cfg) -> int:
    out = _out_dir(args)
    ecfg = _encoder_cfg(cfg)
    store = ParamStore()
    gen = torch.Generator().manual_seed(0)
    encoder.init_ssl_model(store, ecfg, gen)
    encoder.load_model(args.ckpt, store)

    grid = gridmap.generate_map(MapSpec(size=max(cfg["map_hw"], 48),
                                        style=cfg["style"],
                                        density=cfg["density"],
                                        seed=cfg["map_seed"]))
    belief = BeliefMap(grid.cells.copy(), grid.resolution)
    free = np.argwhere(grid.cells == gridmap.FREE)
    center = np.array(grid.cells.shape) / 2.0
    cell = free[np.argmin(np.abs(free - center).sum(axis=1))]
    pose = Pose(*grid.center_of(*cell))
    ctx = gridmap.crop_context(belief, pose, cfg["map_hw"], cfg["map_hw"])

    heat = encoder.export_attention(ctx, ecfg, store, cfg["layer"],
                                    cfg["head"])
    up = np.repeat(np.repeat(heat, ecfg.patch, 0), ecfg.patch, 1)
    name = f"attention_L{cfg['layer']}H{cfg['head']}.pgm"
    encoder.save_attention_pgm(out / name, up)
    gridmap.save_pgm(out / "context.pgm",
                     np.rint(ctx * 255.0).astype(np.uint8))
    print(f"wrote {out / name} and {out / 'context.pgm'}")
    return 0


# ---------------------------------------------------------------------------
# environment server (line-delimited JSON over stdio)


def _pack(arr: np.ndarray, dtype: str = "f32") -> dict:
    np_dtype = {"f32": "<f4", "i32": "<i4"}[dtype]
    data = np.ascontiguousarray(np.asarray(arr), dtype=np_dtype)
    return {"b64": base64.b64encode(data.tobytes()).decode("ascii"),
            "shape": list(data.shape), "dtype": dtype}


def _grid_from_request(req: dict) -> gridmap.OccupancyGrid:
    spec = req.get("map")
    if not isinstance(spec, dict):
        raise ConfigError("request must carry a map object")
    if "pgm" in spec:
        return gridmap.load_map(spec["pgm"])
    return gridmap.generate_map(MapSpec(size=int(spec["size"]),
                                        style=spec.get("style", "rooms"),
                                        density=float(spec.get("density", 0.15)),
                                        seed=int(spec.get("seed", 0))))


def _nav_cfg_from_request(req: dict) -> NavCfg:
    allowed = ("n_nodes", "knn", "ctx_hw", "max_steps")
    cfg = req.get("cfg", {})
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown cfg keys: {', '.join(unknown)}")
    return NavCfg(**{k: int(v) for k, v in cfg.items()})


class EnvServer:
    """One environment instance per server process; protocol version 1."""

    def __init__(self):
        self.env: NavEnv | None = None
        self.obs = None
        self.closed = False

    def _obs_payload(self) -> dict:
        env, obs = self.env, self.obs
        n_slots = env.cfg.n_nodes
        feats = np.zeros((n_slots, N_NODE_FEATURES), np.float32)
        positions = np.zeros((n_slots, 2), np.float32)
        mask = np.zeros(n_slots, np.int32)
        for i, node in enumerate(obs.nodes):
            feats[i] = node.feature_vector()
            positions[i] = (node.pos.x, node.pos.y)
            mask[i] = 1
        return {
            "ok": True,
            "context": _pack(obs.context),
            "node_feats": _pack(feats),
            "node_positions": _pack(positions),
            "mask": _pack(mask, "i32"),
            "n_nodes": len(obs.nodes),
            "goal_in_nodes": bool(obs.goal_in_nodes),
            "pose": [obs.pose.x, obs.pose.y],
            "d_goal": env.log[-1]["d_goal"],
            "steps": env.steps,
            "done": env.done,
            "outcome": env.outcome,
            "path_length_m": env.path_length_m,
        }

    def handle(self, req: dict) -> dict:
        op = req.get("op")
        if self.closed:
            raise RuntimeError("handle is closed")
        if op == "ping":
            return {"ok": True, "version": __version__, "protocol": 1}
        if op == "close":
            self.closed = True
            return {"ok": True, "closed": True}
        if op == "reset":
            grid = _grid_from_request(req)
            self.env = NavEnv(grid, _nav_cfg_from_request(req),
                              seed=int(req.get("seed", 0)))
            self.obs = self.env.reset(Pose(*req["start"]), Pose(*req["goal"]))
            return self._obs_payload()
        if op == "step":
            if self.env is None:
                raise RuntimeError("step before reset")
            sr = self.env.step(int(req["action"]))
            self.obs = sr.obs
            payload = self._obs_payload()
            payload["reward"] = sr.reward
            return payload
        if op == "native_episode":
            return self._native_episode(req)
        if op == "masks":
            return self._masks(req)
        raise ConfigError(f"unknown op {op!r}")

    def _native_episode(self, req: dict) -> dict:
        """Run a scripted action sequence on a fresh environment in one shot
        and return its episode log (the reference for binding equivalence)."""
        grid = _grid_from_request(req)
        env = NavEnv(grid, _nav_cfg_from_request(req),
                     seed=int(req.get("seed", 0)))
        env.reset(Pose(*req["start"]), Pose(*req["goal"]))
        for action in req.get("actions", []):
            if env.done:
                break
            env.step(int(action))
        return {"ok": True, "log": env.log, "outcome": env.outcome,
                "path_length_m": env.path_length_m}

    def _masks(self, req: dict) -> dict:
        params = req.get("params", {})
        grid = tuple(int(v) for v in params["grid"])
        rng = np.random.default_rng(int(req.get("seed", 0)))
        kind = req.get("kind")
        if kind == "spm":
            spec = maskgen.spm_mask(grid, float(params["rho"]),
                                    float(params["persistence"]), rng)
        elif kind == "fov":
            spec = maskgen.fov_mask(grid, float(params["rho_fov"]),
                                    float(params["rho_expand"]), rng)
        elif kind == "mae":
            spec = maskgen.mae_mask(grid, float(params["ratio"]), rng)
        else:
            raise ConfigError(f"unknown mask kind {kind!r}")
        out = {"ok": True, "task": spec.task,
               "masked": _pack(spec.masked, "i32")}
        if spec.core is not None:
            out["core"] = _pack(spec.core, "i32")
        return out


def serve(inp, outp) -> None:
    server = EnvServer()
    for line in inp:
        line = line.strip()
        if not line:
            continue
        try:
            resp = server.handle(json.loads(line))
        except Exception as exc:
            resp = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        outp.write(json.dumps(resp) + "\n")
        outp.flush()
        if server.closed:
            break


def _cmd_env_server(args, cfg) -> int:
    serve(sys.stdin, sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# dispatch


_COMMANDS = {
    "gen-maps": _cmd_gen_maps,
    "pretrain": _cmd_pretrain,
    "train-rl": _cmd_train_rl,
    "eval": _cmd_eval,
    "inspect-masks": _cmd_inspect_masks,
    "export-attention": _cmd_export_attention,
    "env-server": _cmd_env_server,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        cfg = config.validate_config(args.command, args.config,
                                     list(args.overrides))
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
