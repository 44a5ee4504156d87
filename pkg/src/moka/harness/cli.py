"""Command line entry point: ``moka <subcommand> [flags]``.

Exit codes: 0 ok, 1 failed invariant or protocol error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, ContractError, CorruptCheckpoint, ProtocolError, TrainingDiverged
from ..training import gradcheck_suite
from . import protocols as P
from .config import RunConfig, emit_config, parse_config, variant_fields

log = logging.getLogger("moka")

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="single seed (overrides config seeds)")
    p.add_argument("--seeds", type=lambda s: tuple(int(x) for x in s.split(",")), help="comma-separated seeds")
    p.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    p.add_argument("--variant", help="named variant, e.g. lora, moka, moka_wo_ca, moka_extra_pair_audio")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moka", description="Low-rank multimodal adapters on a toy frozen network.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        return p

    add("train", "train one variant per seed")
    p = add("eval", "evaluate a checkpoint on held-out data")
    p.add_argument("--checkpoint", type=Path, required=True)
    p = add("partial-infer", "route only selected modalities through the adapters")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--modalities", action="append", default=None,
                   help="comma-separated subset; repeat for several subsets; 'none' for the empty set")
    add("ablate", "lora vs multiple_lora vs moka_wo_ca vs moka")
    p = add("variants", "cross-modal interaction variants")
    p.add_argument("--only", help="comma-separated subset of variant names")
    p = add("rank-sweep", "lora and moka at several ranks")
    p.add_argument("--ranks", default="4,8,12")
    p = add("efficiency", "parameter, FLOP and forward-time accounting")
    p.add_argument("--repeats", type=int, default=100)
    p = add("dump-attention", "write attention weights of a trained moka network")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--samples", type=int, default=2)
    p = add("gradcheck", "backward vs central differences for every variant")
    p.add_argument("--threshold", type=float, default=1e-4)
    return parser


def load_config(args) -> RunConfig:
    path = args.config
    if path is None and getattr(args, "checkpoint", None) is not None:
        sibling = Path(args.checkpoint).with_name("config.json")
        path = sibling if sibling.exists() else None
    cfg = parse_config(path.read_text()) if path is not None else RunConfig()
    changes = {}
    if args.variant:
        changes.update(variant_fields(args.variant))
    if args.precision:
        changes["precision"] = args.precision
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.seeds:
        changes["seeds"] = args.seeds
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    try:
        return cfg.replace(**changes) if changes else cfg
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def _emit(report, out: Path, tables: dict[str, tuple]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, columns in tables.items():
        P.write_csv(out / f"{name}.csv", columns, report.tables[name])
    report.write(out / "report.json")
    (out / "config.json").write_text(emit_config(RunConfig(**_restore(report.config))))


def _restore(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _print_summary(rows) -> None:
    for r in rows:
        print(f"{r['variant']:<28} n={r['n']}  acc={r['mean']:.4f} +/- {r['se']:.4f}")


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    for seed in cfg.seeds:
        run_dir = out / cfg.label / f"seed{seed}"
        rep = P.run_training(cfg, seed, run_dir)
        s = rep.summary
        print(f"{s['label']} seed={seed} heldout_acc={s['final_heldout_accuracy']:.4f} "
              f"loss={s['final_heldout_loss']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    seed = cfg.seeds[0]
    net = P.load_network(cfg, args.checkpoint, seed)
    loss, acc = P.eval_network(net, cfg, seed)
    print(json.dumps({"variant": cfg.label, "seed": seed, "loss": loss, "accuracy": acc}))
    return EXIT_OK


def _subsets(raw, names) -> list[list[str]] | None:
    if not raw:
        return None
    out = []
    for item in raw:
        parts = [p.strip() for p in item.split(",") if p.strip()]
        if parts == ["none"]:
            parts = []
        unknown = [p for p in parts if p not in names]
        if unknown:
            raise ConfigError(f"unknown modality {unknown[0]!r}; expected one of {', '.join(names)}")
        out.append(parts)
    return out


def cmd_partial(cfg: RunConfig, args) -> int:
    seed = cfg.seeds[0]
    net = P.load_network(cfg, args.checkpoint, seed)
    rows = P.partial_modality_protocol(net, cfg, seed, _subsets(args.modalities, list(cfg.modalities)))
    out = Path(cfg.out_dir)
    P.write_csv(out / "partial.csv", P.PARTIAL_COLUMNS, rows)
    for r in rows:
        print(f"{r['subset']:<20} acc={r['accuracy']:.4f} loss={r['loss']:.4f}")
    return EXIT_OK


def cmd_compare(kind: str):
    def run(cfg: RunConfig, args) -> int:
        if kind == "ablate":
            rep = P.ablate(cfg, workers=args.workers)
        elif kind == "variants":
            labels = tuple(args.only.split(",")) if args.only else P.INTERACTION_VARIANTS
            for lab in labels:
                variant_fields(lab)
            rep = P.interaction_variants(cfg, workers=args.workers, labels=labels)
        else:
            ranks = tuple(int(r) for r in args.ranks.split(","))
            rep = P.rank_sweep(cfg, ranks, workers=args.workers)
        columns = P.RANK_COLUMNS if kind == "rank-sweep" else P.COMPARE_COLUMNS
        _emit(rep, Path(cfg.out_dir), {"runs": columns, "summary": ("variant", "n", "mean", "se", "min", "max")})
        _print_summary(rep.tables["summary"])
        return EXIT_OK
    return run


def cmd_efficiency(cfg: RunConfig, args) -> int:
    labels = (args.variant,) if args.variant else ("lora", "multiple_lora", "moka")
    rep = P.efficiency_protocol(cfg, labels, repeats=args.repeats, seed=cfg.seeds[0])
    _emit(rep, Path(cfg.out_dir), {"efficiency": P.EFFICIENCY_COLUMNS})
    for r in rep.tables["efficiency"]:
        gap = abs(r["flops_analytic"] - r["flops_instrumented"]) / r["flops_instrumented"]
        print(f"{r['variant']:<24} A/B={r['num_A']}/{r['num_B']} trainable={r['trainable_fraction']:.4%} "
              f"flops={r['flops_ratio']:.3f}x time={r['time_ratio']:.3f}x")
        if gap > 0.01:
            print(f"analytic and counted FLOPs disagree by {gap:.2%} for {r['variant']}", file=sys.stderr)
            return EXIT_INVARIANT
    return EXIT_OK


def cmd_dump(cfg: RunConfig, args) -> int:
    seed = cfg.seeds[0]
    if args.checkpoint is not None:
        net = P.load_network(cfg, args.checkpoint, seed)
    else:
        net = P.make_network(cfg, seed)
    written = P.dump_attention(net, cfg, seed, Path(cfg.out_dir), args.samples)
    for w in written:
        print(w["csv"])
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    seeds = cfg.seeds if (args.seed is not None or args.seeds) else range(3)
    rows = gradcheck_suite(seeds=seeds, threshold=args.threshold)
    P.write_csv(Path(cfg.out_dir) / "gradcheck.csv", ("label", "seed", "max_rel_error", "worst_param", "passed"),
                [r.as_dict() for r in rows])
    bad = [r for r in rows if not r.passed]
    for r in rows:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.label:<28} seed={r.seed} err={r.max_rel_error:.2e} ({r.worst_param})")
    return EXIT_INVARIANT if bad else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "partial-infer": cmd_partial,
    "ablate": cmd_compare("ablate"),
    "variants": cmd_compare("variants"),
    "rank-sweep": cmd_compare("rank-sweep"),
    "efficiency": cmd_efficiency,
    "dump-attention": cmd_dump,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"moka: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, CorruptCheckpoint, TrainingDiverged, ContractError, AssertionError) as exc:
        print(f"moka: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FileNotFoundError as exc:
        print(f"moka: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
