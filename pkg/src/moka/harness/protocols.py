"""Experiment protocols built on :func:`moka.training.train`."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..adapters import count_matrices
from ..crossmodal import AttentionRecord, write_attention_dump
from ..errors import ProtocolError
from ..netmodel import ToyNetwork
from ..numkernel import RngStream, Tape, resolve_dtype
from ..report import RunReport
from ..seqmodel import ModalitySegmentedSequence, make_routing_mask
from ..training import SyntheticTask, build_network, evaluate, train
from .checkpoint import load_checkpoint
from .config import RunConfig, emit_config

log = logging.getLogger(__name__)

COMPARE_COLUMNS = ("variant", "seed", "heldout_accuracy", "heldout_loss", "train_loss",
                   "trainable_params", "num_A", "num_B")
PARTIAL_COLUMNS = ("variant", "subset", "modalities", "accuracy", "loss")
EFFICIENCY_COLUMNS = ("variant", "num_A", "num_B", "trainable", "total", "trainable_fraction",
                      "flops_analytic", "flops_instrumented", "flops_ratio", "time_median_s", "time_ratio")
RANK_COLUMNS = ("variant", "rank", "seed", "heldout_accuracy", "heldout_loss")

ABLATION_VARIANTS = ("lora", "multiple_lora", "moka_wo_ca", "moka")
INTERACTION_VARIANTS = ("lora", "multiple_lora", "moka_reversed_query", "moka_naive", "moka",
                        "moka_projected", "moka_extra_pair_audio", "moka_extra_pair_visual")
ACCEPTANCE_VARIANTS = ("lora", "multiple_lora", "unimodal_lora", "uni_plus_mm", "uni_plus_mm_gated",
                       "moka_wo_ca", "moka")


def references() -> dict:
    """Published full-scale numbers, shipped for side-by-side display only."""
    return json.loads(resources.files("moka.harness").joinpath("references.json").read_text())


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# single runs


def heldout_set(cfg: RunConfig, seed: int):
    """The held-out split :func:`train` evaluates on for ``seed``."""
    task = SyntheticTask(cfg.task_spec())
    rng = RngStream(seed, stream=0x51).child("heldout-data")
    seq, labels, _ = task.sample(rng, cfg.eval_size, resolve_dtype(cfg.precision))
    return task, seq, labels


def make_network(cfg: RunConfig, seed: int) -> ToyNetwork:
    task = SyntheticTask(cfg.task_spec())
    return build_network(task, cfg.net_dims(), cfg.adapter_spec(), seed, cfg.precision, cfg.backbone_seed)


def run_training(cfg: RunConfig, seed: int, out_dir: str | Path | None = None) -> RunReport:
    task = SyntheticTask(cfg.task_spec())
    net = make_network(cfg, seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(emit_config(cfg.replace(seeds=(seed,))))
    report = train(net, task, cfg.optim(), cfg.steps, seed, cfg.settings(), out_dir,
                   config_echo=cfg.to_dict())
    return report


def load_network(cfg: RunConfig, checkpoint: str | Path, seed: int | None = None) -> ToyNetwork:
    net = make_network(cfg, cfg.seeds[0] if seed is None else seed)
    net.load_state_dict(load_checkpoint(checkpoint))
    return net


def eval_network(net: ToyNetwork, cfg: RunConfig, seed: int, mask=None) -> tuple[float, float]:
    _, seq, labels = heldout_set(cfg, seed)
    return evaluate(net, seq, labels, mask)


def _run_row(args) -> dict:
    cfg, seed, extra = args
    rep = run_training(cfg, seed)
    s = rep.summary
    return {
        "variant": s["label"],
        "seed": seed,
        "heldout_accuracy": s["final_heldout_accuracy"],
        "heldout_loss": s["final_heldout_loss"],
        "train_loss": s["final_train_loss"],
        "initial_train_loss": s["initial_train_loss"],
        "trainable_params": rep.counts["trainable"],
        "num_A": rep.counts["num_A"],
        "num_B": rep.counts["num_B"],
        "seconds": s["seconds"],
        **extra,
    }


def run_grid(jobs: list[tuple[RunConfig, int, dict]], workers: int = 1) -> list[dict]:
    """Train every (config, seed) job; results come back in job order."""
    if workers <= 1:
        return [_run_row(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_row, jobs))


def summarize(rows: Sequence[dict], key: str = "heldout_accuracy") -> list[dict]:
    """Mean and standard error per variant (in first-appearance order)."""
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r["variant"] + (f"@r{r['rank']}" if "rank" in r else ""), []).append(r[key])
    out = []
    for name, vals in groups.items():
        se = statistics.stdev(vals) / len(vals) ** 0.5 if len(vals) > 1 else 0.0
        out.append({"variant": name, "n": len(vals), "mean": statistics.fmean(vals), "se": se,
                    "min": min(vals), "max": max(vals)})
    return out


def compare_variants(cfg: RunConfig, labels: Sequence[str], seeds: Sequence[int] | None = None,
                     workers: int = 1) -> RunReport:
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg.with_variant(v), s, {}) for v in labels for s in seeds]
    rows = run_grid(jobs, workers)
    report = RunReport(config=cfg.to_dict())
    report.tables = {"runs": rows, "summary": summarize(rows)}
    report.summary = {"variants": list(labels), "seeds": list(seeds)}
    return report


def ablate(cfg: RunConfig, seeds=None, workers: int = 1) -> RunReport:
    report = compare_variants(cfg, ABLATION_VARIANTS, seeds, workers)
    report.summary["reference"] = references().get("ablation")
    return report


def interaction_variants(cfg: RunConfig, seeds=None, workers: int = 1,
                         labels: Sequence[str] = INTERACTION_VARIANTS) -> RunReport:
    """Cross-modal interaction variants, all seed-matched (same A/B initial draws)."""
    report = compare_variants(cfg, labels, seeds, workers)
    refs = references()
    report.summary["reference"] = {k: refs.get(k) for k in ("interaction_variants", "extra_pair")}
    return report


def rank_sweep(cfg: RunConfig, ranks: Sequence[int] = (4, 8, 12), labels: Sequence[str] = ("lora", "moka"),
               seeds=None, workers: int = 1) -> RunReport:
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    jobs = [(cfg.with_variant(v).replace(rank=r), s, {"rank": r}) for v in labels for r in ranks for s in seeds]
    rows = run_grid(jobs, workers)
    report = RunReport(config=cfg.to_dict())
    report.tables = {"runs": rows, "summary": summarize(rows)}
    report.summary = {"ranks": list(ranks), "seeds": list(seeds), "reference": references().get("rank_sweep")}
    return report


# ---------------------------------------------------------------------------
# partial-modality inference


def subset_tag(subset: Sequence[str], all_names: Sequence[str]) -> str:
    if set(subset) == set(all_names):
        return "full"
    if not subset:
        return "none"
    return "+".join(n for n in all_names if n in subset) + "-only"


def partial_modality_protocol(net: ToyNetwork, cfg: RunConfig, seed: int,
                              subsets: Sequence[Sequence[str]] | None = None) -> list[dict]:
    """Held-out accuracy with only ``subset`` routed through the adapters.

    The full-modality row is always included (first). Default subsets are the
    full set plus each single modality.
    """
    task, seq, labels = heldout_set(cfg, seed)
    names = [m.name for m in task.modalities]
    subsets = [list(s) for s in (subsets if subsets is not None else [[n] for n in names])]
    if not any(set(s) == set(names) for s in subsets):
        subsets.insert(0, list(names))
    label = net.adapter_spec.label if net.adapter_spec else "frozen"
    rows = []
    for subset in subsets:
        mask = make_routing_mask(subset, names)
        loss, acc = evaluate(net, seq, labels, mask)
        rows.append({"variant": label, "subset": subset_tag(subset, names),
                     "modalities": "+".join(n for n in names if n in subset), "accuracy": acc, "loss": loss})
    return rows


# ---------------------------------------------------------------------------
# efficiency


def time_forward(net: ToyNetwork, seq: ModalitySegmentedSequence, repeats: int = 100, warmup: int = 10) -> float:
    for _ in range(warmup):
        net.forward(seq)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        net.forward(seq)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def efficiency_protocol(cfg: RunConfig, labels: Sequence[str] = ("lora", "multiple_lora", "moka"),
                        repeats: int = 100, seed: int = 0) -> RunReport:
    """Parameter fractions, matrix counts, FLOPs and timed forward ratios vs LoRA."""
    task = SyntheticTask(cfg.task_spec())
    seq, _, _ = task.sample(RngStream(seed, stream=0xEF), 1, np.float64)
    sample = seq.sample(0)
    n = len(task.modalities)
    rows, base_flops, base_time = [], None, None
    for name in ["lora"] + [v for v in labels if v != "lora"]:
        vcfg = cfg.with_variant(name)
        net = make_network(vcfg, seed)
        spec = net.adapter_spec
        analytic = net.analytic_flops(task.spans)
        counted = net.instrumented_flops(sample)
        median = time_forward(net, sample, repeats)
        if name == "lora":
            base_flops, base_time = analytic, median
        num_a, num_b = count_matrices(spec, n)
        trainable, frozen = net.num_trainable(), net.num_frozen()
        rows.append({
            "variant": spec.label,
            "num_A": num_a,
            "num_B": num_b,
            "trainable": trainable,
            "total": trainable + frozen,
            "trainable_fraction": trainable / (trainable + frozen),
            "flops_analytic": analytic,
            "flops_instrumented": counted,
            "flops_ratio": analytic / base_flops,
            "time_median_s": median,
            "time_ratio": median / base_time,
        })
    rows = [r for r in rows if r["variant"] in {cfg.with_variant(v).label for v in labels}]
    report = RunReport(config=cfg.to_dict())
    report.tables = {"efficiency": rows}
    report.timing = {r["variant"]: r["time_ratio"] for r in rows}
    report.summary = {"reference": references().get("efficiency")}
    return report


# ---------------------------------------------------------------------------
# attention dumps


def collect_attention(net: ToyNetwork, seq: ModalitySegmentedSequence) -> list[AttentionRecord]:
    records: list[AttentionRecord] = []
    tape = Tape(net.dtype, check_finite=False)
    net.forward_tape(tape, seq.tokens, seq.spans, records=records)
    return records


def dump_attention(net: ToyNetwork, cfg: RunConfig, seed: int, out_dir: str | Path, samples: int = 2) -> list[dict]:
    spec = net.adapter_spec
    if spec is None or spec.variant != "moka" or spec.cross_mode in ("none", "naive"):
        raise ProtocolError("attention dumps need a moka adapter with an attention cross_mode")
    _, seq, _ = heldout_set(cfg, seed)
    batch = ModalitySegmentedSequence(seq.tokens[:samples], seq.spans)
    written = []
    for rec in collect_attention(net, batch):
        rec.check()
        stem = f"{rec.tag.rstrip('.').replace('.', '_')}__{rec.query}_to_{rec.key.replace('+', '_')}"
        csv_path, json_path = write_attention_dump(rec, out_dir, stem)
        written.append({"csv": str(csv_path), "meta": str(json_path), "query": rec.query, "key": rec.key,
                        "attachment": rec.tag})
    return written
