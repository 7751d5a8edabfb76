"""Command line interface.

Every config key is also a flag of the same name (``--steps 0``,
``--levels '["L0","L3"]'``); flags override ``--config``. Exit codes: 0 on
success, 2 for configuration errors, 3 for data errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path


from ..featurizer import read_bank
from ..geometry import Pose
from ..renderer import render_features, write_feature_ppm, write_mask_pgm
from ..retrieval import initial_search_many, refine_pose, retrieve_many
from .config import Config, ConfigError
from .experiment import (
    DataError,
    DatasetManifest,
    build_banks,
    build_queries,
    generate_dataset,
    load_banks,
    query_rows,
    result_from_dict,
    result_to_dict,
    run_experiment,
    save_banks,
)
from .metrics import evaluate
from .queries import load_queries, save_queries

log = logging.getLogger("posesearch")

EXIT_CONFIG = 2
EXIT_DATA = 3
_NEEDS_SEED = {"gen", "query"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    for key in Config.keys():
        if key == "seed":
            continue
        p.add_argument(f"--{key}", dest=f"cfg_{key}", type=_parse_value, default=None, metavar="VALUE")
    p.add_argument("--seed", type=int, default=None)


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args, cfg: Config) -> None:
    manifest, _ = generate_dataset(cfg, args.out)
    log.info("wrote %d meshes and manifest to %s", len(manifest.entries), args.out)


def cmd_featurize(args, cfg: Config) -> None:
    manifest = DatasetManifest.load(args.manifest)
    banks = build_banks(manifest, cfg, Path(args.manifest).parent)
    save_banks(banks, args.out)
    log.info("wrote %d banks to %s", len(banks), args.out)


def cmd_query(args, cfg: Config) -> None:
    banks = load_banks(args.banks)
    queries = build_queries(banks, cfg)
    records = [r for level in cfg.levels for r in queries[level]]
    save_queries(args.out, records)
    log.info("wrote %d queries to %s", len(records), args.out)


def _load_query_file(path):
    try:
        return load_queries(path)
    except FileNotFoundError:
        raise DataError(f"query file not found: {path}") from None


def cmd_retrieve(args, cfg: Config) -> None:
    banks = load_banks(args.banks)
    records = _load_query_file(args.queries)
    if args.index is not None:
        records = [records[args.index]]
    results = retrieve_many(
        [r.data for r in records], banks, cfg.grid(), cfg.camera(), cfg.splat(), cfg.adamw(), cfg.top_k
    )
    _write_json(args.out, {r.query_id: result_to_dict(res) for r, res in zip(records, results)})


def cmd_eval(args, cfg: Config) -> None:
    records = {r.query_id: r for r in _load_query_file(args.queries)}
    try:
        raw = json.loads(Path(args.results).read_text())
    except FileNotFoundError:
        raise DataError(f"results file not found: {args.results}") from None
    pairs = []
    for qid, res in raw.items():
        if qid not in records:
            raise DataError(f"result for unknown query {qid}")
        pairs.append((records[qid], result_from_dict(res)))
    levels = sorted({rec.level for rec, _ in pairs})
    report = {
        "levels": {
            lvl: {
                "refined": evaluate([p for p in pairs if p[0].level == lvl], "refined").to_dict(),
                "initial": evaluate([p for p in pairs if p[0].level == lvl], "initial").to_dict(),
            }
            for lvl in levels
        },
        "queries": query_rows(pairs),
    }
    _write_json(args.out, report)


def cmd_render(args, cfg: Config) -> None:
    try:
        bank = read_bank(args.bank)
    except FileNotFoundError:
        raise DataError(f"bank not found: {args.bank}") from None
    pose = Pose.from_degrees(args.elev, args.azim, args.theta, cfg.dist)
    fmap = render_features(bank, pose, cfg.camera(), cfg.splat())
    write_feature_ppm(f"{args.out}.ppm", fmap)
    write_mask_pgm(f"{args.out}.pgm", fmap)


def cmd_bench(args, cfg: Config) -> None:
    banks = load_banks(args.banks)
    cam, splat, grid = cfg.camera(), cfg.splat(), cfg.grid()
    bank = banks[0]
    pose = Pose.from_degrees(20.0, 40.0, 5.0, cfg.dist)
    query = render_features(bank, pose, cam, splat).data
    t0 = time.perf_counter()
    initial = initial_search_many([query], banks, grid, cam, splat)[0]
    t_init = time.perf_counter() - t0
    t0 = time.perf_counter()
    refine_pose(bank, query, initial[0].pose, cam, splat, cfg.adamw())
    t_ref = time.perf_counter() - t0
    _write_json(
        args.out,
        {
            "banks": len(banks),
            "grid_poses": len(grid),
            "initial_search_s": t_init,
            "renders_per_s": len(banks) * len(grid) / t_init,
            "refine_one_candidate_s": t_ref,
            "steps": cfg.steps,
        },
    )


def cmd_run(args, cfg: Config) -> None:
    report = run_experiment(cfg, args.out)
    summary = {lvl: v["refined"]["overall"] for lvl, v in report["levels"].items()}
    print(json.dumps(summary, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posesearch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="procedural meshes + manifest")
    p.add_argument("--out", required=True)
    p = sub.add_parser("featurize", help="feature banks from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("query", help="query sets for every configured occlusion level")
    p.add_argument("--banks", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("retrieve", help="retrieve shapes for one or all queries")
    p.add_argument("--banks", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--out", default="-")
    p = sub.add_parser("eval", help="metrics report from retrieval results")
    p.add_argument("--queries", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--out", default="-")
    p = sub.add_parser("render", help="debug heatmap export of one bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--elev", type=float, default=20.0, help="degrees")
    p.add_argument("--azim", type=float, default=30.0, help="degrees")
    p.add_argument("--theta", type=float, default=0.0, help="degrees")
    p.add_argument("--out", required=True, help="output prefix")
    p = sub.add_parser("bench", help="time initial search and refinement")
    p.add_argument("--banks", required=True)
    p.add_argument("--out", default="-")
    p = sub.add_parser("run", help="full seeded experiment")
    p.add_argument("--out", default=None)
    for sp in sub.choices.values():
        _add_config_flags(sp)
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "featurize": cmd_featurize,
    "query": cmd_query,
    "retrieve": cmd_retrieve,
    "eval": cmd_eval,
    "render": cmd_render,
    "bench": cmd_bench,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command in _NEEDS_SEED and args.seed is None:
            raise ConfigError(f"--seed is required for {args.command}")
        cfg = _config(args)
        _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
