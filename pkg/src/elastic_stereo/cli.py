"""Command line entry point: ``elastic-stereo <command> ...``.

Exit codes: 0 ok, 1 training diverged, 2 usage or config error, 3 stage
order violation, 4 no subnet fits the budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import deploy
from .arch_space import ArchConfig, InvalidConfigError, SearchSpace, sample_uniform, validate
from .data import load_dataset, make_dataset, save_dataset
from .network import ElasticStereoNet
from .trainer import (SHRINK_STAGES, ShrinkSchedule, StageOrderError, Trainer,
                      TrainingDivergedError, as_dataset, evaluate)

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE, EXIT_STAGE, EXIT_INFEASIBLE = 0, 1, 2, 3, 4
SUBNET_FORMAT = "elastic-stereo-subnet"

log = logging.getLogger("elastic_stereo")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require_dir(path, what="dataset") -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} path {p} does not exist")
    return p


def _load_split(root, split, d_max):
    _require_dir(root)
    try:
        samples = load_dataset(root, split, d_max)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    if not samples:
        raise UsageError(f"split {split!r} under {root} is empty")
    return samples


def read_config(path, space: SearchSpace) -> ArchConfig:
    try:
        config = ArchConfig.from_json(Path(path).read_text())
        validate(config, space)
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc
    return config


def read_configs(path, space: SearchSpace) -> list:
    """A JSON list of configs or one config per line."""
    text = Path(path).read_text() if Path(path).is_file() else None
    if text is None:
        raise UsageError(f"configs file {path} not found")
    try:
        stripped = text.strip()
        if stripped.startswith("["):
            items = json.loads(stripped)
        else:
            items = [json.loads(l) for l in stripped.splitlines() if l.strip()]
        configs = [ArchConfig.from_dict(d) for d in items]
        for c in configs:
            validate(c, space)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid configs file {path}: {exc}") from exc
    return configs


def _choose_config(args, space) -> ArchConfig:
    if getattr(args, "config", None):
        return read_config(args.config, space)
    if getattr(args, "min", False):
        return space.min_config()
    return space.max_config()


def save_subnet(path, store: ElasticStereoNet, config: ArchConfig) -> None:
    sub = store.extract(config)
    torch.save({"format": SUBNET_FORMAT, "version": 1, "space": store.space.to_dict(),
                "config": config.to_dict(), "state_dict": sub.state_dict()}, path)


def load_model(path):
    """(model, config) from either a trainer checkpoint or a saved subnet."""
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("format") == SUBNET_FORMAT:
        space = SearchSpace.from_dict(ckpt["space"])
        config = ArchConfig.from_dict(ckpt["config"])
        sub = ElasticStereoNet(space).extract(config)
        sub.load_state_dict(ckpt["state_dict"])
        return sub, config
    return Trainer.load(path).store, None


def render_disparity(path, disp: np.ndarray, d_max: int) -> None:
    import matplotlib
    from PIL import Image

    norm = np.clip(np.nan_to_num(disp, nan=0.0) / d_max, 0.0, 1.0)
    rgb = (matplotlib.colormaps["magma"](norm)[..., :3] * 255).round().astype(np.uint8)
    Image.fromarray(rgb).save(path)


def scatter_plot(path, records, highlight: ArchConfig | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([r.latency_ms for r in records], [r.epe for r in records], s=14, label="subnets")
    front = deploy.pareto(records)
    ax.plot([r.latency_ms for r in front], [r.epe for r in front], "r-", lw=1, label="Pareto front")
    if highlight is not None:
        hits = [r for r in records if r.config == highlight]
        if hits:
            ax.scatter([hits[0].latency_ms], [hits[0].epe], marker="*", s=120, c="k",
                       label="extracted")
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("EPE (px)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _schedule(args) -> ShrinkSchedule:
    if args.preset == "paper-schedule":
        sch = ShrinkSchedule.paper(args.batch_size or 16)
    else:
        sch = ShrinkSchedule.desk(args.iterations or 2000, args.stage_iterations or 300,
                                  args.batch_size or 2)
    full = sch.stages[0]
    if args.epochs is not None:
        full.epochs, full.max_iterations = args.epochs, None
    if args.preset == "paper-schedule" and args.iterations is not None:
        full.max_iterations = args.iterations
    if args.lr is not None:
        full.optimizer.lr = args.lr
    return sch


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    for split, n, seed in (("train", args.n, args.seed), ("val", args.val, args.seed + 1)):
        if n > 0:
            samples = make_dataset(n, seed, args.height, args.width, args.max_disparity)
            base = save_dataset(samples, args.out, split)
            print(f"wrote {n} samples to {base}")
    return EXIT_OK


def cmd_train_full(args) -> int:
    train = _load_split(args.data, "train", args.max_disparity)
    torch.manual_seed(args.seed)
    store = ElasticStereoNet(SearchSpace(max_disparity=args.max_disparity))
    tr = Trainer(store, train, _schedule(args), seed=args.seed, log_path=args.log)
    tr.run_stage("full")
    tr.save(args.out)
    last = tr.history[-1] if tr.history else None
    print(json.dumps({"checkpoint": str(args.out), "last_epoch": last}))
    return EXIT_OK


def cmd_shrink(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    tr = Trainer.load(args.checkpoint, log_path=args.log)
    tr.dataset = as_dataset(_load_split(args.data, "train", tr.store.space.max_disparity))
    if args.stage_iterations is not None:
        for s in tr.schedule.stages[1:]:
            s.max_iterations = args.stage_iterations
    stages = [s for s in SHRINK_STAGES if s not in tr.completed] if args.all else [args.stage]
    for name in stages:
        tr.run_stage(name)
        print(json.dumps({"stage": name, "completed": tr.completed}))
    tr.save(args.out or args.checkpoint)
    return EXIT_OK


def cmd_extract(args) -> int:
    store = Trainer.load(args.checkpoint).store
    config = _choose_config(args, store.space)
    save_subnet(args.out, store, config)
    print(f"wrote subnet {config.short_name()} to {args.out}")
    if args.data:
        val = _load_split(args.data, args.split, store.space.max_disparity)
        sub = store.extract(config)
        if args.images:
            out = Path(args.images)
            out.mkdir(parents=True, exist_ok=True)
            from .data import to_tensors
            left, right, _, _ = to_tensors(val[:args.num_images])
            with torch.no_grad():
                pred = sub.eval().predict(left, right).numpy()
            for i, d in enumerate(pred):
                render_disparity(out / f"{i:04d}.png", d[0] if d.ndim == 3 else d,
                                 store.space.max_disparity)
        if args.plot:
            records = deploy.load_records(args.records) if args.records else []
            if not any(r.config == config for r in records):
                records += deploy.profile(store, [config], val[:args.num_images],
                                          tuple(val[0].shape), repeats=args.repeats)
            scatter_plot(args.plot, records, config)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, sub_config = load_model(args.checkpoint)
    config = None
    if sub_config is None:
        config = _choose_config(args, model.space)
    val = _load_split(args.data, args.split, args.max_disparity)
    errs = evaluate(model, val, config)
    lines = ["sample\tepe"] + [f"{i:04d}\t{e:.6f}" for i, e in enumerate(errs)]
    lines.append(f"mean\t{np.mean(errs):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_profile(args) -> int:
    store = Trainer.load(args.checkpoint).store
    if args.configs:
        configs = read_configs(args.configs, store.space)
    else:
        rng = np.random.default_rng(args.seed)
        configs = [store.space.max_config(), store.space.min_config()]
        configs += [sample_uniform(store.space, rng) for _ in range(max(args.random - 2, 0))]
    val = _load_split(args.data, args.split, store.space.max_disparity)
    if args.num_val:
        val = val[:args.num_val]
    records = deploy.profile(store, configs, val, tuple(val[0].shape),
                             warmup=args.warmup, repeats=args.repeats)
    deploy.save_records(records, args.out)
    for r in records:
        print(r.to_json())
    return EXIT_OK


def cmd_select(args) -> int:
    if not Path(args.records).is_file():
        raise UsageError(f"records file {args.records} not found")
    if not args.budget_ms > 0:
        raise UsageError("budget must be positive")
    best = deploy.select(deploy.load_records(args.records), args.budget_ms)
    if best is None:
        print(f"no feasible subnet within {args.budget_ms} ms", file=sys.stderr)
        return EXIT_INFEASIBLE
    if args.out:
        Path(args.out).write_text(best.config.to_json() + "\n")
    print(best.to_json())
    return EXIT_OK


def cmd_search(args) -> int:
    store = Trainer.load(args.checkpoint).store
    val = _load_split(args.data, args.split, store.space.max_disparity)
    if args.num_val:
        val = val[:args.num_val]
    res = deploy.search_configs(store, val, args.budget, args.proxy, args.iterations, args.seed)
    if res.best is None:
        print("no feasible subnet within budget", file=sys.stderr)
        return EXIT_INFEASIBLE
    if args.out:
        Path(args.out).write_text(res.best.config.to_json() + "\n")
    print(json.dumps({"best": json.loads(res.best.to_json()), "history": res.history}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastic-stereo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic stereo dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--val", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=96)
    g.add_argument("--width", type=int, default=144)
    g.add_argument("--max-disparity", type=int, default=24)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-full", help="train the largest network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", default="full.pt")
    t.add_argument("--log", default=None)
    t.add_argument("--preset", choices=["desk", "paper-schedule"], default="desk")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--stage-iterations", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--max-disparity", type=int, default=24)
    t.set_defaults(func=cmd_train_full)

    s = sub.add_parser("shrink", help="run progressive-shrinking stages")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--log", default=None)
    s.add_argument("--stage-iterations", type=int, default=None)
    which = s.add_mutually_exclusive_group(required=True)
    which.add_argument("--stage", choices=SHRINK_STAGES)
    which.add_argument("--all", action="store_true")
    s.set_defaults(func=cmd_shrink)

    def config_flags(q):
        c = q.add_mutually_exclusive_group()
        c.add_argument("--config", help="ArchConfig JSON file")
        c.add_argument("--max", action="store_true", help="largest subnet (default)")
        c.add_argument("--min", action="store_true", help="smallest subnet")

    e = sub.add_parser("extract", help="save a standalone subnet")
    e.add_argument("--checkpoint", required=True)
    config_flags(e)
    e.add_argument("--out", default="subnet.pt")
    e.add_argument("--data", default=None)
    e.add_argument("--split", default="val")
    e.add_argument("--images", default=None, help="directory for disparity PNGs")
    e.add_argument("--num-images", type=int, default=4)
    e.add_argument("--plot", default=None, help="EPE-vs-latency scatter plot file")
    e.add_argument("--records", default=None, help="profile JSONL to include in the plot")
    e.add_argument("--repeats", type=int, default=deploy.DEFAULT_REPEATS)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="per-sample EPE on a split")
    v.add_argument("--checkpoint", required=True)
    config_flags(v)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="val")
    v.add_argument("--max-disparity", type=int, default=24)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="latency/EPE/MACs per config")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--configs", default=None, help="JSON list or JSONL of configs")
    f.add_argument("--random", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--data", required=True)
    f.add_argument("--split", default="val")
    f.add_argument("--num-val", type=int, default=None)
    f.add_argument("--warmup", type=int, default=deploy.DEFAULT_WARMUP)
    f.add_argument("--repeats", type=int, default=deploy.DEFAULT_REPEATS)
    f.add_argument("--out", default="profile.jsonl")
    f.set_defaults(func=cmd_profile)

    c = sub.add_parser("select", help="best profiled subnet within a latency budget")
    c.add_argument("--records", required=True)
    c.add_argument("--budget-ms", type=float, required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_select)

    h = sub.add_parser("search", help="hill-climb for a subnet under a budget")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--split", default="val")
    h.add_argument("--num-val", type=int, default=None)
    h.add_argument("--budget", type=float, required=True)
    h.add_argument("--proxy", choices=["macs", "latency"], default="macs")
    h.add_argument("--iterations", type=int, default=50)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", default=None)
    h.set_defaults(func=cmd_search)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
