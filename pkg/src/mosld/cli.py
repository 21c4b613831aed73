"""Command-line entry point: pretrain, finetune, compare, count-params.

Exit codes: 0 success, 2 bad configuration or arguments, 3 missing
dependency artifact (run `pretrain` first), 4 numerical failure.

Every emitted artifact embeds the run's manifest hash and the tool
version. Metric CSVs contain no timestamps, so rerunning an identical
manifest reproduces them byte for byte; wall-clock timings live in the
manifest JSON instead.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import METHODS, GeometrySpec, count_trainable, \
    report_table
from .backbone import Backbone, build_backbone
from .checkpoint import load_tensors, save_tensors
from .config import RunSpec, load_config
from .errors import ConfigError, DataError, MissingArtifactError, \
    NumericsError, require
from .rng import Rng
from .tape import Tensor
from .tasks import IN_DOMAIN_TASKS, OOD_TASK
from .trainer import MIXTURE_SETTING, GridResult, RunResult, \
    build_task_data, finetune, pretrain_base, run_grid

ALL_TASKS = IN_DOMAIN_TASKS + (OOD_TASK,)
META_PREFIX = "__"


# ----------------------------------------------------------- manifest

def manifest_hash(command: str, spec: RunSpec, seed: int,
                  extra: dict | None = None) -> str:
    """Stable identity of one invocation: config text + seed + args."""
    h = hashlib.sha256()
    h.update(command.encode())
    h.update(spec.text.encode("utf-8"))
    h.update(str(seed).encode())
    for k in sorted(extra or {}):
        h.update(f"{k}={extra[k]}".encode())
    return h.hexdigest()[:16]


def write_manifest(out: Path, name: str, command: str, spec: RunSpec,
                   seed: int, mhash: str, wall_clock: float,
                   extra: dict | None = None) -> Path:
    doc = {
        "version": __version__,
        "command": command,
        "config_path": spec.path,
        "config_hash": spec.content_hash,
        "seed": seed,
        "out_dir": str(out),
        "manifest_hash": mhash,
        "created_unix": time.time(),
        "wall_clock_s": wall_clock,
    }
    doc.update(extra or {})
    path = out / name
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def resolve_out_dir(spec: RunSpec) -> Path:
    root = os.environ.get("MOSLD_OUT_DIR") or spec.out_dir
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------- checkpoint metadata

def _pack_str(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), np.uint8).astype(np.float64)


def _unpack_str(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")


def meta_tensors(mhash: str) -> dict[str, np.ndarray]:
    return {f"{META_PREFIX}manifest{META_PREFIX}": _pack_str(mhash),
            f"{META_PREFIX}version{META_PREFIX}": _pack_str(__version__)}


def split_meta(tensors: dict) -> tuple[dict, dict[str, str]]:
    """Separate payload tensors from embedded metadata strings."""
    payload, meta = {}, {}
    for name, value in tensors.items():
        if name.startswith(META_PREFIX):
            meta[name.strip("_")] = _unpack_str(value)
        else:
            payload[name] = value
    return payload, meta


def load_base_checkpoint(path: Path, spec: RunSpec) -> Backbone:
    if not path.is_file():
        raise MissingArtifactError(
            f"base checkpoint not found at {path}; run `mosld pretrain` "
            f"with this config first")
    payload, _ = split_meta(load_tensors(path))
    cfg = spec.train.backbone
    reference = build_backbone(cfg, Rng(0))
    want = {name: t.value.shape for name, t in reference.params.items()}
    got = {name: v.shape for name, v in payload.items()}
    require(want == got, ConfigError,
            f"checkpoint at {path} does not match the configured "
            f"backbone geometry")
    params = {name: Tensor(payload[name], True, name) for name in want}
    return Backbone(cfg, params)


# ----------------------------------------------------------- CSV output

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(c) for c in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


RESULT_HEADER = ["manifest_hash", "version", "arm", "setting", "seed",
                 *[f"acc_{t}" for t in ALL_TASKS], "macro",
                 "ce_initial", "ce_final", "routing_cv", "delta"]


def result_row(r: RunResult, mhash: str, delta: float | None) -> list:
    return [mhash, __version__, r.arm, r.setting, r.seed,
            *[r.per_task.get(t) for t in ALL_TASKS], r.macro,
            r.ce_initial, r.ce_final, r.routing_cv, delta]


# ------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    spec = load_config(args.config)
    seed = spec.seed if args.seed is None else args.seed
    out = resolve_out_dir(spec)
    mhash = manifest_hash("pretrain", spec, seed)
    t0 = time.perf_counter()
    root = Rng(seed)
    data = build_task_data(spec.train, root.split(0))
    train = {t: data.train[t] for t in IN_DOMAIN_TASKS}
    pre = pretrain_base(spec.train, train, root.split(1))
    ckpt = out / "base.ckpt"
    save_tensors(ckpt, {**meta_tensors(mhash), **pre.base.state()})
    write_csv(out / "pretrain_log.csv",
              ["manifest_hash", "version", "step", "loss"],
              [[mhash, __version__, i, v]
               for i, v in enumerate(pre.loss_history)])
    wall = time.perf_counter() - t0
    write_manifest(out, "pretrain_manifest.json", "pretrain", spec, seed,
                   mhash, wall, {"base_hash": pre.base_hash,
                                 "ce_initial": pre.ce_initial,
                                 "ce_final": pre.ce_final})
    print(f"pretrained base -> {ckpt} "
          f"(ce {pre.ce_initial:.4f} -> {pre.ce_final:.4f}, "
          f"hash {pre.base_hash[:12]}, manifest {mhash})")
    return 0


def parse_setting(text: str) -> str:
    """CLI settings are `mixture` or `single:<task>`."""
    if text == MIXTURE_SETTING:
        return text
    if text.startswith("single:"):
        task = text.split(":", 1)[1]
        require(task in ALL_TASKS, ConfigError,
                f"unknown task {task!r}; valid: {', '.join(ALL_TASKS)}")
        return task
    raise ConfigError(
        f"setting must be `mixture` or `single:<task>`, got {text!r}")


def _check_arm(name: str) -> str:
    require(name in METHODS, ConfigError,
            f"unknown arm {name!r}; valid arms: {', '.join(METHODS)}")
    return name


def cmd_finetune(args) -> int:
    spec = load_config(args.config)
    seed = spec.seed if args.seed is None else args.seed
    arm = _check_arm(args.arm)
    setting = parse_setting(args.setting)
    out = resolve_out_dir(spec)
    base = load_base_checkpoint(out / "base.ckpt", spec)
    mhash = manifest_hash("finetune", spec, seed,
                          {"arm": arm, "setting": setting})
    t0 = time.perf_counter()
    result = finetune(arm, setting, spec.train, base, Rng(seed))
    stem = f"finetune_{arm}_{setting}_s{seed}"
    write_csv(out / f"{stem}.csv", RESULT_HEADER,
              [result_row(result, mhash, None)])
    save_tensors(out / f"{stem}.ckpt",
                 {**meta_tensors(mhash), **result.trainable_state})
    wall = time.perf_counter() - t0
    write_manifest(out, f"{stem}_manifest.json", "finetune", spec, seed,
                   mhash, wall, {"arm": arm, "setting": setting,
                                 "base_hash": result.base_hash_start,
                                 "macro": result.macro})
    accs = " ".join(f"{t}={result.per_task[t]:.3f}"
                    for t in sorted(result.per_task))
    print(f"{arm} on {setting} (seed {seed}): {accs} "
          f"macro={result.macro:.3f} -> {out / (stem + '.csv')}")
    return 0


def compare_markdown(grid: GridResult, arms: list[str],
                     seeds: list[int], mhash: str) -> str:
    lines = [
        "# Single-vs-mixture comparison",
        "",
        f"manifest `{mhash}`, version `{__version__}`",
        "",
        "| arm | seed | mixture macro | mean single | delta |",
        "|-----|------|---------------|-------------|-------|",
    ]
    for arm in arms:
        for seed in seeds:
            mix = grid.row(arm, MIXTURE_SETTING, seed)
            delta = grid.deltas[(arm, seed)]
            mean_single = mix.macro - delta
            lines.append(f"| {arm} | {seed} | {mix.macro:.4f} "
                         f"| {mean_single:.4f} | {delta:+.4f} |")
    lines.append("")
    for arm in arms:
        signs = ",".join("+" if grid.deltas[(arm, s)] >= 0 else "-"
                         for s in seeds)
        lines.append(f"- `{arm}`: mean delta {grid.delta_mean(arm):+.4f} "
                     f"(signs {signs})")
    lines.append("")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    spec = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    require(len(seeds) >= 1, ConfigError, "need at least one seed")
    arms = [_check_arm(a) for a in args.arms.split(",") if a]
    require(len(arms) >= 1, ConfigError, "need at least one arm")
    settings = [parse_setting(s) for s in args.settings.split(",") if s]
    out = resolve_out_dir(spec)
    base = load_base_checkpoint(out / "base.ckpt", spec)
    mhash = manifest_hash("compare", spec, 0,
                          {"arms": ",".join(arms),
                           "seeds": ",".join(map(str, seeds)),
                           "settings": ",".join(settings)})
    t0 = time.perf_counter()
    grid = run_grid(arms, settings, seeds, spec.train, base)
    rows = []
    for r in grid.rows:
        delta = grid.deltas.get((r.arm, r.seed)) \
            if r.setting == MIXTURE_SETTING else None
        rows.append(result_row(r, mhash, delta))
    write_csv(out / "compare.csv", RESULT_HEADER, rows)
    md = compare_markdown(grid, arms, seeds, mhash)
    (out / "compare.md").write_text(md, encoding="utf-8")
    wall = time.perf_counter() - t0
    write_manifest(out, "compare_manifest.json", "compare", spec, 0,
                   mhash, wall, {"arms": arms, "seeds": seeds,
                                 "settings": settings})
    for arm in arms:
        if any((arm, s) in grid.deltas for s in seeds):
            signs = " ".join("+" if grid.deltas[(arm, s)] >= 0 else "-"
                             for s in seeds)
            print(f"{arm}: mixture-single delta mean "
                  f"{grid.delta_mean(arm):+.4f} (signs per seed: {signs})")
    print(f"wrote {out / 'compare.csv'} and {out / 'compare.md'}")
    return 0


def _experts_arg(text: str):
    parts = text.split(",")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"experts must be an int or comma-separated ints, got {text!r}")
    return values[0] if len(values) == 1 else tuple(values)


def cmd_count_params(args) -> int:
    experts = args.experts
    if isinstance(experts, tuple):
        require(len(experts) == args.layers, ConfigError,
                "per-layer expert list must match --layers")
    geom = GeometrySpec(args.layers, args.d_in, args.d_out, args.rank,
                        args.targets, experts, args.top_k)
    methods = [m for m in METHODS
               if m != "fp" or args.base_params is not None]
    print(report_table([geom], methods, base_params=args.base_params,
                       fmt=args.format), end="")
    lora = count_trainable(geom, "lora").trainable
    mola = count_trainable(geom, "mola").trainable
    mosld = count_trainable(geom, "mosld").trainable
    print(f"trainable ratios: mola/lora={mola / lora:.4f} "
          f"mosld/lora={mosld / lora:.4f} mosld/mola={mosld / mola:.4f}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosld",
        description="Mixture-of-shared-LoRA experiments at desk scale")
    parser.add_argument("--version", action="version",
                        version=f"mosld {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train and save the base model")
    p.add_argument("config", help="path to a TOML config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override run.seed from the config")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one arm on one setting")
    p.add_argument("config")
    p.add_argument("--arm", required=True,
                   help=f"one of {', '.join(METHODS)}")
    p.add_argument("--setting", required=True,
                   help="mixture or single:<task>")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("compare",
                       help="run the arms x settings x seeds grid")
    p.add_argument("config")
    p.add_argument("--arms", default="lora,mosld",
                   help="comma-separated arm names")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated integer seeds")
    p.add_argument("--settings",
                   default=",".join([f"single:{t}" for t in ALL_TASKS]
                                    + [MIXTURE_SETTING]),
                   help="comma-separated settings")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("count-params",
                       help="parameter accounting table per method")
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--d-in", type=int, default=4096)
    p.add_argument("--d-out", type=int, default=4096)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--targets", type=int, default=2)
    p.add_argument("--experts", type=_experts_arg, default=5,
                   help="uniform count or per-layer comma list")
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--base-params", type=int, default=None,
                   help="base model size; enables forward counts")
    p.add_argument("--format", choices=("markdown", "csv"),
                   default="markdown")
    p.set_defaults(fn=cmd_count_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
