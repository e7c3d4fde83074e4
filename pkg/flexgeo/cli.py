# input:  [argparse command lines, INI run configs via config, gradient suite, training harness, ALiBi builder, budget sampler, synthetic tile writer]
# output: [gradcheck, train-toy, dump-alibi, budget-sim, and gen-tiles subcommands writing CSV/binary artifacts plus resolved_config.ini, with exit codes 0/1/2]
# pos:    [Operator entry point; maps FlexGeoError families to usage/config exit codes]
#
# ⚠️ When this file is updated:
#    1. Update these header comments
#    2. Update the INDEX.md of the folder this file belongs to

from __future__ import annotations

import argparse
import csv
import logging
from pathlib import Path
from typing import Optional, Sequence

import torch
from pydantic import ValidationError

from config import ConfigError, load_run_config, resolve_out_dir, write_resolved_config
from datagen import generate_tile, tile_filename, write_tile
from errors import FlexGeoError
from geometry import TokenGrid, default_band_registry, load_band_registry
from gradcheck_suite import run_gradient_suite
from posenc import build_alibi_bias
from sampler import make_rng, sample_ground_cover, sample_multilook_gsd, sample_patch_parameters
from schemas import RunConfig
from train import train_toy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
# (gsd_m, patch_px, grid side): 10 m / 8 px over 8x8 and 20 m / 4 px over 4x4.
DEFAULT_ALIBI_GRIDS = ("10:8:8", "20:4:4")


class UsageError(FlexGeoError):
    pass


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Override the run seed.")
    common.add_argument("--config", type=Path, default=None, help="INI run configuration file.")
    common.add_argument("--out", default=None, help="Output directory (overrides FLEXGEO_OUT_DIR and the config).")
    common.add_argument("--threads", type=int, default=None, help="Torch intra-op thread count.")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="flexgeo", description="Flexible-patch multi-sensor ViT kernels and toy pre-training.")
    commands = parser.add_subparsers(dest="command", required=True)

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="Finite-difference check every loss term.")
    gradcheck.add_argument("--rtol", type=float, default=1e-4)
    gradcheck.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)

    train = commands.add_parser("train-toy", parents=[common], help="Train the desk-scale model on synthetic tiles.")
    train.add_argument("--steps", type=int, default=None)
    train.add_argument("--overfit", action="store_true", help="Reuse one batch for every step.")

    alibi = commands.add_parser("dump-alibi", parents=[common], help="Write the GSD-aware ALiBi matrix as CSV.")
    alibi.add_argument(
        "--grid",
        action="append",
        default=None,
        metavar="GSD:PATCH:SIDE",
        help="Token grid over a shared origin; repeat for several groups.",
    )
    alibi.add_argument("--heads", type=int, default=8)

    budget = commands.add_parser("budget-sim", parents=[common], help="Sample token-budget patch plans.")
    budget.add_argument("--draws", type=int, default=10_000)
    budget.add_argument("--registry", type=Path, default=None, help="Band registry file (id | sensor | bands | gsd | kind).")

    tiles = commands.add_parser("gen-tiles", parents=[common], help="Write synthetic tiles.")
    tiles.add_argument("--count", type=int, default=8)
    tiles.add_argument("--footprint", type=float, default=1920.0, help="Footprint side in meters.")
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def _resolve(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        updates["threads"] = args.threads
    out_dir = resolve_out_dir(cfg, args.out) / args.command
    updates["out_dir"] = str(out_dir)
    try:
        cfg = RunConfig.model_validate({**cfg.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError("CONFIG_INVALID", str(exc)) from exc
    torch.set_num_threads(cfg.threads)
    return cfg, out_dir


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    results = run_gradient_suite(seed=cfg.seed, corrupt_gradient=args.corrupt_gradient, rtol=args.rtol)
    _write_csv(
        out_dir / "gradcheck.csv",
        ["term", "checked", "max_error_ratio", "passed"],
        [[result.name, result.checked, repr(result.max_error_ratio), result.passed] for result in results],
    )
    for result in results:
        print(f"{'PASS' if result.passed else 'FAIL'} {result.name:<32} ratio={result.max_error_ratio:.3e} coords={result.checked}")
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error("Gradient checks failed: %s", ", ".join(failed))
        return EXIT_VERIFICATION_FAILED
    return EXIT_OK


def cmd_train_toy(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    result = train_toy(cfg, out_dir, steps=args.steps, overfit=args.overfit)
    first, last = result.totals[0], result.totals[-1]
    print(f"steps={len(result.totals)} first_total={first:.6f} final_total={last:.6f}")
    print(f"loss_csv={result.csv_path} checkpoint={result.checkpoint_path}")
    return EXIT_OK


def parse_grid(spec: str) -> TokenGrid:
    parts = spec.split(":")
    if len(parts) != 3:
        raise UsageError("ALIBI_GRID_INVALID", f"Grid '{spec}' must look like GSD:PATCH:SIDE.")
    try:
        gsd, patch_px, side = float(parts[0]), int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise UsageError("ALIBI_GRID_INVALID", f"Grid '{spec}' has non-numeric fields.") from exc
    return TokenGrid(group_id=0, patch_px=patch_px, rows=side, cols=side, gsd_m=gsd)


def cmd_dump_alibi(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    specs = args.grid or list(DEFAULT_ALIBI_GRIDS)
    grids = [
        TokenGrid(group_id=index + 1, patch_px=grid.patch_px, rows=grid.rows, cols=grid.cols, gsd_m=grid.gsd_m)
        for index, grid in enumerate(parse_grid(spec) for spec in specs)
    ]
    bias = build_alibi_bias(grids, args.heads)
    for head in range(args.heads):
        _write_csv(
            out_dir / f"alibi_head{head + 1}.csv",
            [f"t{index}" for index in range(bias.token_count)],
            [[repr(float(value)) for value in row] for row in bias.matrix[head]],
        )
    print(f"tokens={bias.token_count} heads={args.heads} max_patch_m={bias.max_patch_m:g} slopes={bias.slopes.tolist()}")
    return EXIT_OK


def cmd_budget_sim(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    registry_path = args.registry or (Path(cfg.registry_path) if cfg.registry_path else None)
    registry = load_band_registry(registry_path) if registry_path else default_band_registry()
    if len(registry) == 0:
        raise UsageError("REGISTRY_EMPTY", f"Registry {registry_path} lists no band groups.")
    rng = make_rng(cfg.seed)
    rows = []
    worst = 0
    for draw in range(args.draws):
        ground_cover = sample_ground_cover(cfg.budget, rng)
        overrides = {
            group.group_id: sample_multilook_gsd(group, ground_cover, rng)
            for group in registry
            if group.supports_multilook
        }
        plan = sample_patch_parameters(list(registry), ground_cover, cfg.budget, rng, overrides)
        worst = max(worst, plan.total_tokens)
        patch_sizes = {entry.group_id: entry.patch_px for entry in plan.groups}
        rows.append(
            [draw, repr(ground_cover), plan.total_tokens]
            + [patch_sizes.get(group.group_id, "") for group in registry]
        )
    _write_csv(
        out_dir / "budget_sim.csv",
        ["draw", "ground_cover_m", "total_tokens"] + [f"patch_g{group.group_id}" for group in registry],
        rows,
    )
    print(f"draws={args.draws} max_total_tokens={worst} budget={cfg.budget.max_tokens}")
    return EXIT_OK


def cmd_gen_tiles(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    if args.count < 1:
        raise UsageError("TILE_COUNT_INVALID", "--count must be positive.")
    registry = load_band_registry(Path(cfg.registry_path)) if cfg.registry_path else default_band_registry()
    rows = []
    for index in range(args.count):
        seed = cfg.seed + index
        tile = generate_tile(seed, args.footprint, registry)
        path = out_dir / tile_filename(index, seed)
        write_tile(path, tile)
        rows.append([path.name, seed, repr(tile.footprint_m), " ".join(str(group_id) for group_id in sorted(tile.images))])
    _write_csv(out_dir / "tiles.csv", ["file", "seed", "footprint_m", "groups"], rows)
    print(f"wrote {args.count} tiles to {out_dir}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train-toy": cmd_train_toy,
    "dump-alibi": cmd_dump_alibi,
    "budget-sim": cmd_budget_sim,
    "gen-tiles": cmd_gen_tiles,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg, out_dir = _resolve(args)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_resolved_config(cfg, out_dir)
        return COMMANDS[args.command](args, cfg, out_dir)
    except FlexGeoError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
