"""Optimizer, schedule, synthetic multimodal task, trainer and gradient checks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .adapters import AdapterSpec, count_matrices
from .errors import ContractError, TrainingDiverged
from .netmodel import NetDims, ToyNetwork
from .numkernel import (
    RngStream,
    Tape,
    cross_entropy,
    fd_gradient,
    param_grads,
    relative_error,
)
from .report import RunReport
from .seqmodel import ModalitySegmentedSequence, RoutingMask, build_spans, make_modalities

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "split", "loss", "accuracy", "lr")


# ---------------------------------------------------------------------------
# Optimizer


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    batch_size: int = 16


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: OptimConfig = field(default_factory=OptimConfig)


def lr_at(position: int, total: int, peak: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup to ``peak`` then cosine decay to 0 at ``total``."""
    warmup = math.ceil(total * warmup_ratio)
    if position < warmup:
        return peak * position / warmup
    progress = (position - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def adamw_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update with decoupled weight decay.

    Returns new parameter arrays; ``state`` is updated in place.
    """
    cfg = state.config
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        q = p * (1.0 - lr * cfg.weight_decay) if cfg.weight_decay else p
        new[name] = (q - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return new


# ---------------------------------------------------------------------------
# Synthetic task


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Query-in-text / answer-in-one-modality classification.

    The last text token carries a codeword for a position ``q`` inside the
    ``target`` modality; the token at ``q`` carries one of ``classes``
    orthonormal class patterns (scaled by ``signal``) plus N(0, noise^2) per
    coordinate. All other
    non-text tokens are background noise, or random class patterns when
    ``distractors`` is set (then only the query disambiguates the label).
    """

    modalities: tuple[str, ...] = ("audio", "visual", "text")
    tokens: tuple[int, ...] = (8, 8, 16)
    text: str = "text"
    target: str = "visual"
    k: int = 32
    classes: int = 8
    noise: float = 0.1
    signal: float = 2.0
    distractors: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.modalities) != len(self.tokens):
            raise ContractError("one token count per modality required")
        if self.target == self.text or self.target not in self.modalities:
            raise ContractError(f"target {self.target!r} must be a non-text modality")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        if self.signal <= 0:
            raise ContractError("signal must be positive")
        if self.classes > self.target_tokens:
            raise ContractError(f"classes ({self.classes}) exceed target tokens ({self.target_tokens})")
        if self.classes > self.k:
            raise ContractError("classes must not exceed embedding dim")
        if self.tokens[self.modalities.index(self.text)] < 1:
            raise ContractError("text span must hold at least the query token")

    @property
    def target_tokens(self) -> int:
        return self.tokens[self.modalities.index(self.target)]

    @property
    def length(self) -> int:
        return sum(self.tokens)


class SyntheticTask:
    """Fixed codebooks (drawn from ``spec.seed``) plus a sampler."""

    def __init__(self, spec: SyntheticTaskSpec):
        self.spec = spec
        self.modalities = make_modalities(spec.modalities, spec.text)
        self.spans = build_spans(self.modalities, spec.tokens)
        gen = RngStream(spec.seed, stream=0x7A5C).generator()
        k = spec.k
        q, _ = np.linalg.qr(gen.normal(size=(k, k)))
        self.patterns = spec.signal * q[:, : spec.classes].T  # (C, k) orthogonal rows
        self.query_codes = gen.normal(0.0, 1.0 / math.sqrt(k), size=(spec.target_tokens, k))
        self.text_codes = gen.normal(0.0, 1.0 / math.sqrt(k), size=(spec.tokens[spec.modalities.index(spec.text)], k))
        self.position_codes = {
            s.name: gen.normal(0.0, 0.5 / math.sqrt(k), size=(s.length, k))
            for s in self.spans if not s.modality.is_text
        }

    def span(self, name: str):
        return next(s for s in self.spans if s.name == name)

    def sample(self, rng: RngStream | np.random.Generator, n: int, dtype=np.float64):
        """Return ``(sequence batch (n, L, k), labels (n,), queries (n,))``."""
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        spec, k = self.spec, self.spec.k
        labels = gen.integers(0, spec.classes, size=n)
        queries = gen.integers(0, spec.target_tokens, size=n)
        tokens = np.empty((n, spec.length, k))
        for s in self.spans:
            block = tokens[:, s.start:s.stop]
            if s.modality.is_text:
                block[:] = self.text_codes
                block[:, -1] += self.query_codes[queries]
                block += gen.normal(0.0, spec.noise, size=block.shape) if spec.noise else 0.0
                continue
            if spec.distractors and s.name == spec.target:
                fill = self.patterns[gen.integers(0, spec.classes, size=(n, s.length))]
                fill += gen.normal(0.0, spec.noise, size=fill.shape) if spec.noise else 0.0
            else:
                fill = gen.normal(0.0, 1.0 / math.sqrt(k), size=(n, s.length, k))
            block[:] = self.position_codes[s.name] + fill
            if s.name == spec.target:
                rows = np.arange(n)
                hit = self.position_codes[s.name][queries] + self.patterns[labels]
                if spec.noise:
                    hit = hit + gen.normal(0.0, spec.noise, size=(n, k))
                block[rows, queries] = hit
        seq = ModalitySegmentedSequence(tokens.astype(dtype), self.spans)
        return seq, labels, queries

    def probe_accuracy(self, seq: ModalitySegmentedSequence, labels, queries) -> float:
        """Linear probe that knows the query position: argmax_c <pattern_c, x_q - pos_q>."""
        s = self.span(self.spec.target)
        x = seq.tokens[np.arange(len(labels)), s.start + queries] - self.position_codes[s.name][queries]
        return float(np.mean((x @ self.patterns.T).argmax(axis=-1) == labels))


def generate_task(spec: SyntheticTaskSpec, rng: RngStream):
    """Draw one ``(sequence (L, k), label)`` pair."""
    seq, labels, _ = SyntheticTask(spec).sample(rng, 1)
    return seq.sample(0), int(labels[0])


# ---------------------------------------------------------------------------
# Trainer


def evaluate(net: ToyNetwork, seq: ModalitySegmentedSequence, labels, mask: RoutingMask | None = None,
             chunk: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a batch."""
    losses, correct = [], 0
    n = seq.tokens.shape[0]
    for lo in range(0, n, chunk):
        tape = Tape(net.dtype, check_finite=False)
        part = seq.tokens[lo:lo + chunk]
        logits = net.forward_tape(tape, part, seq.spans, mask)
        y = labels[lo:lo + chunk]
        losses.append(float(cross_entropy(logits, y).value[0, 0]) * len(y))
        correct += int((logits.value[..., 0, :].argmax(axis=-1) == y).sum())
    return sum(losses) / n, correct / n


def _global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    eval_every: int = 250
    eval_size: int = 512
    train_size: int = 4096
    precision: str = "f32"
    backbone_seed: int = 0


def build_network(task: SyntheticTask, dims: NetDims, adapter: AdapterSpec | None, seed: int,
                  precision="f32", backbone_seed: int = 0) -> ToyNetwork:
    if dims.k != task.spec.k:
        raise ContractError(f"network k={dims.k} != task embedding dim {task.spec.k}")
    if dims.classes != task.spec.classes:
        raise ContractError(f"network classes={dims.classes} != task classes {task.spec.classes}")
    spec = adapter.with_(seed=seed) if adapter is not None else None
    return ToyNetwork(task.modalities, dims, spec, seed=seed, backbone_seed=backbone_seed, dtype=precision)


def train(net: ToyNetwork, task: SyntheticTask | SyntheticTaskSpec, optim: OptimConfig = OptimConfig(),
          steps: int = 2000, seed: int = 0, settings: TrainSettings | None = None,
          out_dir: str | Path | None = None, config_echo: dict | None = None) -> RunReport:
    """Fine-tune adapters + head of ``net`` on the synthetic task.

    Deterministic for fixed (network, task, optimizer, seed, precision).
    Metrics go to the report and, with ``out_dir``, to ``metrics.csv`` plus a
    ``checkpoint.moka`` of the final network.
    """
    from .harness.checkpoint import save_checkpoint

    settings = settings or TrainSettings(steps=steps)
    task = task if isinstance(task, SyntheticTask) else SyntheticTask(task)
    dtype = net.dtype
    root = RngStream(seed, stream=0x51)
    train_seq, train_y, _ = task.sample(root.child("train-data"), settings.train_size, dtype)
    held_seq, held_y, _ = task.sample(root.child("heldout-data"), settings.eval_size, dtype)
    probe = ModalitySegmentedSequence(train_seq.tokens[: settings.eval_size], train_seq.spans)
    probe_y = train_y[: settings.eval_size]
    order = root.child("batches").generator()

    state = OptimizerState(config=optim)
    checksum_before = net.frozen_checksum()
    report = RunReport(config=config_echo or {})
    rows: list[dict] = []
    step_losses: list[float] = []

    def log_eval(step: int, lr: float) -> None:
        for split, (s, y) in (("train", (probe, probe_y)), ("heldout", (held_seq, held_y))):
            loss, acc = evaluate(net, s, y)
            rows.append({"step": step, "split": split, "loss": loss, "accuracy": acc, "lr": lr})

    t0 = time.perf_counter()
    log_eval(0, lr_at(0, steps, optim.lr, optim.warmup_ratio))
    spans = task.spans
    for step in range(steps):
        lr = lr_at(step, steps, optim.lr, optim.warmup_ratio)
        idx = order.integers(0, settings.train_size, size=optim.batch_size)
        tape = Tape(dtype, check_finite=False)
        logits = net.forward_tape(tape, train_seq.tokens[idx], spans)
        loss = cross_entropy(logits, train_y[idx])
        value = float(loss.value[0, 0])
        grads = param_grads(tape, loss)
        if not math.isfinite(value):
            raise TrainingDiverged(step, lr, _global_norm(grads))
        step_losses.append(value)
        params = net.trainable_parameters()
        net.set_trainable(adamw_step(state, params, grads, lr))
        if (step + 1) % settings.eval_every == 0 or step + 1 == steps:
            log_eval(step + 1, lr)
    elapsed = time.perf_counter() - t0

    checksum_after = net.frozen_checksum()
    final_train = [r for r in rows if r["split"] == "train"][-1]
    final_held = [r for r in rows if r["split"] == "heldout"][-1]
    initial_train = rows[0]
    n = len(task.modalities)
    num_a = num_b = 0
    if net.adapter_spec is not None:
        per = count_matrices(net.adapter_spec, n)
        num_a, num_b = per
    report.metrics = rows
    report.curves = {"step_loss": step_losses}
    report.counts = {
        "trainable": net.num_trainable(),
        "frozen": net.num_frozen(),
        "num_A": num_a,
        "num_B": num_b,
        "attachments": len(net.adapters),
    }
    report.summary = {
        "label": net.adapter_spec.label if net.adapter_spec else "frozen",
        "seed": seed,
        "steps": steps,
        "initial_train_loss": initial_train["loss"],
        "final_train_loss": final_train["loss"],
        "final_heldout_loss": final_held["loss"],
        "initial_heldout_accuracy": rows[1]["accuracy"],
        "final_heldout_accuracy": final_held["accuracy"],
        "chance": 1.0 / task.spec.classes,
        "frozen_checksum_before": checksum_before,
        "frozen_checksum_after": checksum_after,
        "seconds": elapsed,
    }
    report.network = net
    if checksum_before != checksum_after:
        raise AssertionError("frozen parameters changed during training")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", rows)
        save_checkpoint(out / "checkpoint.moka", net.state_dict())
        report.summary["checkpoint"] = str(out / "checkpoint.moka")
        report.write(out / "report.json")
    return report


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})


# ---------------------------------------------------------------------------
# Gradient checks


GRADCHECK_CASES: tuple[AdapterSpec, ...] = (
    AdapterSpec("lora", rank=2),
    AdapterSpec("multiple_lora", rank=2),
    AdapterSpec("unimodal_lora", rank=2),
    AdapterSpec("uni_plus_mm", rank=2),
    AdapterSpec("uni_plus_mm_gated", rank=2),
    AdapterSpec("moka", rank=2, cross_mode="none"),
    AdapterSpec("moka", rank=2, cross_mode="task_centric", lambdas={"audio": 0.7, "visual": 1.3}),
    AdapterSpec("moka", rank=2, cross_mode="reversed_query", lambdas={"text": 0.8}),
    AdapterSpec("moka", rank=2, cross_mode="naive"),
    AdapterSpec("moka", rank=2, cross_mode="projected"),
    AdapterSpec("moka", rank=2, cross_mode="extra_pair", extra_query="audio", extra_lambda=0.6),
    AdapterSpec("moka", rank=2, cross_mode="extra_pair", extra_query="visual"),
)


@dataclass
class GradcheckRow:
    label: str
    seed: int
    max_rel_error: float
    worst_param: str
    passed: bool

    def as_dict(self) -> dict:
        return asdict(self)


def randomize(net: ToyNetwork, rng: RngStream, scale: float = 0.5) -> None:
    """Replace every trainable tensor with N(0, scale^2) draws (B included)."""
    new = {}
    for name, arr in net.trainable_parameters().items():
        draw = rng.child(name).generator().normal(0.0, scale, size=arr.shape)
        if name.split(".")[-1].startswith("W") and ".proj." in name:
            draw = np.eye(arr.shape[0]) + 0.3 * draw
        new[name] = draw.astype(net.dtype)
    net.set_trainable(new)


def gradcheck_network(net: ToyNetwork, seq: ModalitySegmentedSequence, labels, step: float = 1e-5,
                      corrupt: Callable[[dict], dict] | None = None) -> tuple[float, str]:
    """Max relative error (per tensor) between backward and central differences."""
    tape = Tape("f64")
    loss = cross_entropy(net.forward_tape(tape, seq.tokens, seq.spans), labels)
    analytic = param_grads(tape, loss)
    if corrupt is not None:
        analytic = corrupt(analytic)
    base = {k: v.copy() for k, v in net.trainable_parameters().items()}

    def f(params):
        net.set_trainable(params)
        t = Tape("f64", check_finite=False)
        return cross_entropy(net.forward_tape(t, seq.tokens, seq.spans), labels).value[0, 0]

    try:
        numeric = fd_gradient(f, base, step)
    finally:
        net.set_trainable(base)
    worst, worst_name = 0.0, ""
    for name, g in numeric.items():
        err = relative_error(analytic[name], g)
        if err >= worst:
            worst, worst_name = err, name
    return worst, worst_name


def gradcheck_suite(cases: Sequence[AdapterSpec] = GRADCHECK_CASES, seeds: Sequence[int] = range(3),
                    threshold: float = 1e-4, k: int = 8, d: int = 8, tokens=(2, 3, 4),
                    batch: int = 2, corrupt: Callable[[dict], dict] | None = None) -> list[GradcheckRow]:
    """Backward vs finite differences for every case, f64 throughout."""
    mods = make_modalities(["audio", "visual", "text"])
    spans = build_spans(mods, tokens)
    rows = []
    for spec in cases:
        for seed in seeds:
            dims = NetDims(k=k, d=d, depth=2, classes=4)
            net = ToyNetwork(mods, dims, spec.with_(seed=seed), seed=seed, backbone_seed=seed, dtype="f64")
            rng = RngStream(seed, stream=0x6C)
            randomize(net, rng)
            gen = rng.child("data").generator()
            seq = ModalitySegmentedSequence(gen.normal(size=(batch, sum(tokens), k)), spans)
            labels = gen.integers(0, dims.classes, size=batch)
            err, name = gradcheck_network(net, seq, labels, corrupt=corrupt)
            rows.append(GradcheckRow(spec.label, seed, err, name, err < threshold))
    return rows
