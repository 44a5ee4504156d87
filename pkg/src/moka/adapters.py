"""Low-rank adapters that produce an additive update on a frozen linear map.

Each adapter owns plain ``numpy`` parameter arrays. ``delta`` registers them
on the tape of its input and returns the traced update rows ``(..., L, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import crossmodal
from .crossmodal import AttentionRecord
from .errors import ContractError, ProtocolError, ShapeError
from .numkernel import (
    SIGMOID_FLOPS,
    SOFTMAX_FLOPS,
    RngStream,
    Tape,
    Var,
    concat_rows,
    kaiming_uniform_init,
    matmul,
    mul,
    sigmoid,
    transpose,
)
from .seqmodel import ModalityId, ModalitySegmentedSequence, ModalitySpan, RoutingMask, slice_span

VARIANTS = ("lora", "multiple_lora", "unimodal_lora", "uni_plus_mm", "uni_plus_mm_gated", "moka")
CROSS_MODES = ("none", "task_centric", "reversed_query", "naive", "projected", "extra_pair")
ATTENTION_MODES = ("task_centric", "reversed_query", "projected", "extra_pair")


@dataclass(frozen=True)
class AdapterSpec:
    """Everything needed to construct one adapter deterministically.

    ``lambdas`` maps non-text modality names to their cross-modal strength;
    absent names default to 1.0. The reversed-query mode reads the text
    modality's entry for the strength of the text update.
    """

    variant: str = "moka"
    rank: int = 4
    lambdas: Mapping[str, float] = field(default_factory=dict)
    cross_mode: str | None = None
    seed: int = 0
    extra_query: str | None = None
    extra_key: str | None = None
    extra_lambda: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        mode = self.cross_mode
        if mode is None:
            mode = "task_centric" if self.variant == "moka" else "none"
        if mode not in CROSS_MODES:
            raise ContractError(f"unknown cross_mode {mode!r}; choose from {CROSS_MODES}")
        if mode != "none" and self.variant != "moka":
            raise ContractError(f"cross_mode {mode!r} is only valid for the moka variant")
        if self.rank < 1:
            raise ContractError("rank must be positive")
        for name, lam in self.lambdas.items():
            if lam < 0:
                raise ContractError(f"lambda for {name!r} must be >= 0")
        if self.extra_lambda < 0:
            raise ContractError("extra_lambda must be >= 0")
        object.__setattr__(self, "cross_mode", mode)
        object.__setattr__(self, "lambdas", dict(self.lambdas))

    def lam(self, modality: str) -> float:
        return float(self.lambdas.get(modality, 1.0))

    def with_(self, **changes) -> "AdapterSpec":
        return replace(self, **changes)

    @property
    def label(self) -> str:
        if self.variant != "moka":
            return self.variant
        if self.cross_mode == "none":
            return "moka_wo_ca"
        if self.cross_mode == "task_centric":
            return "moka"
        if self.cross_mode == "extra_pair" and self.extra_query:
            return f"moka_extra_pair_{self.extra_query}"
        return f"moka_{self.cross_mode}"


def check_rank(rank: int, d: int, k: int) -> None:
    if rank > min(d, k) / 2:
        raise ContractError(f"rank {rank} too large for d={d}, k={k} (need r <= min(d, k) / 2)")


# ---------------------------------------------------------------------------
# Adapters


class Adapter:
    """Base class: parameter bookkeeping, routing and the public ``delta``."""

    variant = ""

    def __init__(self, spec: AdapterSpec, modalities: Sequence[ModalityId], d: int, k: int,
                 dtype=np.float64, prefix: str = "", check: bool = True):
        if check:
            check_rank(spec.rank, d, k)
        self.spec = spec
        self.modalities = list(modalities)
        self.d, self.k, self.r = d, k, spec.rank
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.params: dict[str, np.ndarray] = {}
        self.roles: dict[str, str] = {}
        self._rng = RngStream(spec.seed)
        self._build()

    # construction helpers
    def _init_A(self, name: str) -> None:
        rng = self._rng.child(self.prefix + name)
        self.params[name] = kaiming_uniform_init(self.r, self.k, rng, self.dtype)
        self.roles[name] = "A"

    def _init_B(self, name: str) -> None:
        self.params[name] = np.zeros((self.d, self.r), dtype=self.dtype)
        self.roles[name] = "B"

    def _init_other(self, name: str, value: np.ndarray, role: str) -> None:
        self.params[name] = np.asarray(value, dtype=self.dtype)
        self.roles[name] = role

    def _build(self) -> None:
        raise NotImplementedError

    @property
    def text(self) -> ModalityId:
        return next(m for m in self.modalities if m.is_text)

    @property
    def nontext(self) -> list[ModalityId]:
        return [m for m in self.modalities if not m.is_text]

    def count(self, role: str) -> int:
        return sum(1 for r in self.roles.values() if r == role)

    def num_parameters(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {self.prefix + k: v for k, v in self.params.items()}

    def load(self, tensors: Mapping[str, np.ndarray]) -> None:
        for name in self.params:
            arr = np.asarray(tensors[self.prefix + name], dtype=self.dtype)
            if arr.shape != self.params[name].shape:
                raise ShapeError(f"{self.prefix + name}: expected {self.params[name].shape}, got {arr.shape}")
            self.params[name] = arr.copy()

    def bind(self, tape: Tape, trainable: bool = True) -> dict[str, Var]:
        return {k: tape.param(self.prefix + k, v, trainable) for k, v in self.params.items()}

    def _known(self, span: ModalitySpan) -> None:
        if span.name not in {m.name for m in self.modalities}:
            raise KeyError(f"adapter has no parameters for modality {span.name!r}")

    def check_mask(self, spans: Sequence[ModalitySpan], mask: RoutingMask) -> None:
        pass

    def delta(self, x: Var, spans: Sequence[ModalitySpan], mask: RoutingMask | None = None,
              records: list | None = None, trainable: bool = True) -> Var:
        if x.shape[-1] != self.k:
            raise ShapeError(f"input width {x.shape[-1]} != adapter k={self.k}")
        for s in spans:
            self._known(s)
        partial = mask is not None and not mask.is_full(spans)
        if partial:
            self.check_mask(spans, mask)
        P = self.bind(x.tape, trainable)
        out = self._delta(x, spans, P, records)
        if partial:
            out = mul(out, mask.row_mask(spans, x.tape.dtype))
        return out

    def _delta(self, x, spans, P, records):
        raise NotImplementedError


def _lowrank_update(x, A, B):
    return matmul(matmul(x, transpose(A)), transpose(B))


class LoraAdapter(Adapter):
    variant = "lora"

    def _build(self):
        self._init_A("A")
        self._init_B("B")

    def _known(self, span):
        pass  # one shared pair serves every modality

    def _delta(self, x, spans, P, records):
        return _lowrank_update(x, P["A"], P["B"])


class MultipleLoraAdapter(Adapter):
    """n full LoRA pairs, each over every token, summed."""

    variant = "multiple_lora"

    def _build(self):
        for i in range(len(self.modalities)):
            self._init_A(f"lora{i}.A")
            self._init_B(f"lora{i}.B")

    def _known(self, span):
        pass

    def _delta(self, x, spans, P, records):
        out = None
        for i in range(len(self.modalities)):
            term = _lowrank_update(x, P[f"lora{i}.A"], P[f"lora{i}.B"])
            out = term if out is None else out + term
        return out


class UnimodalLoraAdapter(Adapter):
    """One LoRA pair per modality, each applied only to its own span."""

    variant = "unimodal_lora"

    def _build(self):
        for m in self.modalities:
            self._init_A(f"A.{m.name}")
            self._init_B(f"B.{m.name}")

    def _delta(self, x, spans, P, records):
        parts = [_lowrank_update(slice_span(x, s), P[f"A.{s.name}"], P[f"B.{s.name}"]) for s in spans]
        return concat_rows(*parts)


class UniPlusMMAdapter(Adapter):
    """Routed per-modality A with one shared uni-B, plus a fully shared LoRA."""

    variant = "uni_plus_mm"

    def _build(self):
        for m in self.modalities:
            self._init_A(f"uni.A.{m.name}")
        self._init_B("uni.B")
        self._init_A("mm.A")
        self._init_B("mm.B")

    def _branches(self, x, spans, P):
        z_uni = concat_rows(*[matmul(slice_span(x, s), transpose(P[f"uni.A.{s.name}"])) for s in spans])
        z_mm = matmul(x, transpose(P["mm.A"]))
        return z_uni, z_mm

    def _delta(self, x, spans, P, records):
        z_uni, z_mm = self._branches(x, spans, P)
        return matmul(z_uni, transpose(P["uni.B"])) + matmul(z_mm, transpose(P["mm.B"]))


class GatedUniMMAdapter(UniPlusMMAdapter):
    """Uni+MM with a per-token logistic gate on the concatenated rank features.

    ``delta = g * delta_uni + (1 - g) * delta_mm`` with
    ``g = sigmoid(z_uni w_uni + z_mm w_mm + b)``.
    """

    variant = "uni_plus_mm_gated"

    def _build(self):
        super()._build()
        self._init_other("gate.w_uni", np.zeros((self.r, 1)), "gate")
        self._init_other("gate.w_mm", np.zeros((self.r, 1)), "gate")
        self._init_other("gate.b", np.zeros((1, 1)), "gate")

    def gate(self, x, spans, P):
        z_uni, z_mm = self._branches(x, spans, P)
        logit = matmul(z_uni, P["gate.w_uni"]) + matmul(z_mm, P["gate.w_mm"]) + P["gate.b"]
        return z_uni, z_mm, sigmoid(logit)

    def _delta(self, x, spans, P, records):
        z_uni, z_mm, g = self.gate(x, spans, P)
        d_uni = matmul(z_uni, transpose(P["uni.B"]))
        d_mm = matmul(z_mm, transpose(P["mm.B"]))
        return d_mm + mul(g, d_uni - d_mm)


class MokaAdapter(Adapter):
    """Per-modality down-projections, rank-space interaction, one shared B."""

    variant = "moka"

    def _build(self):
        for m in self.modalities:
            self._init_A(f"A.{m.name}")
        self._init_B("B")
        if self.spec.cross_mode == "projected":
            eye = np.eye(self.r)
            for m in self.nontext:
                self._init_other(f"proj.Wq.{m.name}", eye, "proj")
            self._init_other("proj.Wk", eye, "proj")
            self._init_other("proj.Wv", eye, "proj")
        if self.spec.cross_mode == "extra_pair":
            q, key = self.extra_pair()
            if q == key:
                raise ContractError("extra_pair query and key modality must differ")

    def extra_pair(self) -> tuple[str, str]:
        names = [m.name for m in self.nontext]
        q = self.spec.extra_query or (names[0] if names else None)
        if q not in names:
            raise ContractError(f"extra_pair query {q!r} is not a non-text modality ({names})")
        key = self.spec.extra_key or next((n for n in names if n != q), None)
        if key not in names:
            raise ContractError(f"extra_pair key {key!r} is not a non-text modality ({names})")
        return q, key

    def key_modalities(self, spans) -> set[str]:
        mode = self.spec.cross_mode
        if mode == "none":
            return set()
        text = self.text.name
        if mode == "reversed_query":
            return {s.name for s in spans if not s.modality.is_text} | {text}
        keys = {text}
        if mode == "extra_pair":
            keys.add(self.extra_pair()[1])
        return keys

    def check_mask(self, spans, mask):
        present = {s.name for s in spans}
        for name in self.key_modalities(spans):
            if name in present and not mask.passes(name):
                raise ProtocolError(
                    f"cross_mode={self.spec.cross_mode} needs {name!r} tokens in the adapter "
                    "path; use cross_mode='none' for partial-modality inference"
                )

    def lowrank(self, x, spans, P) -> dict[str, Var]:
        return {s.name: matmul(slice_span(x, s), transpose(P[f"A.{s.name}"])) for s in spans}

    def interact(self, z: dict, spans, P, records=None) -> dict:
        """Apply the configured rank-space interaction; returns updated features."""
        mode = self.spec.cross_mode
        if mode == "none":
            return z
        spec = self.spec
        text_span = next((s for s in spans if s.modality.is_text), None)
        nontext = [s for s in spans if not s.modality.is_text]
        if not nontext:
            return z
        if text_span is None:
            raise ProtocolError(f"cross_mode={mode} needs a text span")
        zt = z[text_span.name]
        out = dict(z)

        def keep(query, key, w):
            if records is not None:
                rec = AttentionRecord(query, key, np.array(w.value if isinstance(w, Var) else w), self.prefix)
                records.append(rec)

        if mode == "reversed_query":
            if not any(s.length for s in nontext):
                return z  # nothing to attend to: text-only reduces to LoRA
            pool = [z[s.name] for s in nontext]
            out[text_span.name], w = crossmodal.reversed_query_attention(zt, pool, spec.lam(text_span.name))
            keep(text_span.name, "+".join(s.name for s in nontext), w)
            return out
        if mode == "naive":
            for s in nontext:
                out[s.name] = crossmodal.naive_interaction(z[s.name], zt, spec.lam(s.name))
            return out
        if mode == "projected":
            k = matmul(zt, transpose(P["proj.Wk"]))
            v = matmul(zt, transpose(P["proj.Wv"]))
            for s in nontext:
                q = matmul(z[s.name], transpose(P[f"proj.Wq.{s.name}"]))
                att, w = crossmodal.attend(q, k, v)
                keep(s.name, text_span.name, w)
                out[s.name] = crossmodal.residual_enhance(z[s.name], att, spec.lam(s.name))
            return out
        # task_centric, optionally with one extra non-text pair on top
        for s in nontext:
            att, w = crossmodal.task_centric_attention(z[s.name], zt)
            keep(s.name, text_span.name, w)
            out[s.name] = crossmodal.residual_enhance(z[s.name], att, spec.lam(s.name))
        if mode == "extra_pair":
            q, key = self.extra_pair()
            if q in z and key in z and z[key].shape[-2] > 0:
                att, w = crossmodal.extra_pair_attention(z[q], z[key])
                keep(q, key, w)
                out[q] = crossmodal.residual_enhance(out[q], att, spec.extra_lambda)
        return out

    def _delta(self, x, spans, P, records):
        z = self.interact(self.lowrank(x, spans, P), spans, P, records)
        return matmul(concat_rows(*[z[s.name] for s in spans]), transpose(P["B"]))


ADAPTER_CLASSES = {
    cls.variant: cls
    for cls in (LoraAdapter, MultipleLoraAdapter, UnimodalLoraAdapter, UniPlusMMAdapter,
                GatedUniMMAdapter, MokaAdapter)
}


def build_adapter(spec: AdapterSpec, modalities: Sequence[ModalityId], d: int, k: int,
                  dtype=np.float64, prefix: str = "") -> Adapter:
    return ADAPTER_CLASSES[spec.variant](spec, modalities, d, k, dtype, prefix)


# ---------------------------------------------------------------------------
# Eager entry points


def adapter_delta(adapter: Adapter, seq: ModalitySegmentedSequence, mask: RoutingMask | None = None,
                  records: list | None = None, dtype=None) -> np.ndarray:
    tape = Tape(dtype or adapter.dtype)
    x = tape.const(seq.tokens, name="x")
    return adapter.delta(x, seq.spans, mask, records).value


def _expect(adapter, cls):
    if not isinstance(adapter, cls):
        raise TypeError(f"expected {cls.__name__}, got {type(adapter).__name__}")


def lora_forward(adapter: LoraAdapter, seq) -> np.ndarray:
    _expect(adapter, LoraAdapter)
    return adapter_delta(adapter, seq)


def multiple_lora_forward(adapter: MultipleLoraAdapter, seq) -> np.ndarray:
    _expect(adapter, MultipleLoraAdapter)
    return adapter_delta(adapter, seq)


def unimodal_lora_forward(adapter: UnimodalLoraAdapter, seq) -> np.ndarray:
    _expect(adapter, UnimodalLoraAdapter)
    return adapter_delta(adapter, seq)


def uni_plus_mm_forward(adapter: UniPlusMMAdapter, seq) -> np.ndarray:
    _expect(adapter, UniPlusMMAdapter)
    return adapter_delta(adapter, seq)


def gated_forward(adapter: GatedUniMMAdapter, seq) -> np.ndarray:
    _expect(adapter, GatedUniMMAdapter)
    return adapter_delta(adapter, seq)


def moka_forward(adapter: MokaAdapter, seq, mask: RoutingMask | None = None,
                 records: list | None = None) -> np.ndarray:
    _expect(adapter, MokaAdapter)
    return adapter_delta(adapter, seq, mask, records)


# ---------------------------------------------------------------------------
# Accounting


def count_matrices(spec: AdapterSpec, n: int) -> tuple[int, int]:
    """Number of low-rank (A, B) matrices for ``n`` modalities."""
    return {
        "lora": (1, 1),
        "multiple_lora": (n, n),
        "unimodal_lora": (n, n),
        "uni_plus_mm": (n + 1, 2),
        "uni_plus_mm_gated": (n + 1, 2),
        "moka": (n, 1),
    }[spec.variant]


def param_count(spec: AdapterSpec, d: int, k: int, n: int) -> int:
    """Trainable entries of one adapter instance (A, B, gate and projections)."""
    r = spec.rank
    num_a, num_b = count_matrices(spec, n)
    total = num_a * r * k + num_b * d * r
    if spec.variant == "uni_plus_mm_gated":
        total += 2 * r + 1
    if spec.cross_mode == "projected":
        total += (n - 1) * r * r + 2 * r * r
    return total


def _attention_flops(nq: int, nk: int, r: int) -> int:
    # scores, 1/sqrt(r) scaling, softmax, weighted sum
    return 2 * nq * nk * r + nq * nk + SOFTMAX_FLOPS * nq * nk + 2 * nq * nk * r


def flop_count(spec: AdapterSpec, d: int, k: int, spans: Sequence[ModalitySpan], n: int | None = None) -> int:
    """Closed-form FLOPs of one adapter delta over one sequence (full routing).

    Matmuls count 2 per multiply-add; elementwise adds/scales count 1 per entry.
    ``n`` is the adapter's modality count (only multiple_lora depends on it;
    defaults to the number of spans).
    """
    r = spec.rank
    L = sum(s.length for s in spans)
    base = 2 * L * r * (k + d)
    v = spec.variant
    if v in ("lora", "unimodal_lora"):
        return base
    if v == "multiple_lora":
        n = len(spans) if n is None else n
        return n * base + (n - 1) * L * d
    if v == "uni_plus_mm":
        return 2 * base + L * d
    if v == "uni_plus_mm_gated":
        return 2 * base + 4 * L * r + 2 * L + SIGMOID_FLOPS * L + 3 * L * d
    total = base
    mode = spec.cross_mode
    text = next((s for s in spans if s.modality.is_text), None)
    nontext = [s for s in spans if not s.modality.is_text]
    if mode == "none" or not nontext:
        return total
    nt = text.length if text is not None else 0
    if mode in ("task_centric", "extra_pair"):
        for s in nontext:
            total += _attention_flops(s.length, nt, r) + 2 * s.length * r
        if mode == "extra_pair":
            lengths = {s.name: s.length for s in nontext}
            q = spec.extra_query or nontext[0].name
            key = spec.extra_key or next((s.name for s in nontext if s.name != q), None)
            if q in lengths and key in lengths and lengths[key] > 0:
                total += _attention_flops(lengths[q], lengths[key], r) + 2 * lengths[q] * r
    elif mode == "naive":
        for s in nontext:
            total += nt * r + r + s.length * r  # text mean, scale, broadcast add
    elif mode == "projected":
        total += 2 * 2 * nt * r * r
        for s in nontext:
            total += 2 * s.length * r * r + _attention_flops(s.length, nt, r) + 2 * s.length * r
    elif mode == "reversed_query":
        m = sum(s.length for s in nontext)
        if m:
            total += _attention_flops(nt, m, r) + 2 * nt * r
    return total

