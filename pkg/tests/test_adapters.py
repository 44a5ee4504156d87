import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moka.adapters import (
    ATTENTION_MODES,
    CROSS_MODES,
    VARIANTS,
    AdapterSpec,
    adapter_delta,
    build_adapter,
    check_rank,
    count_matrices,
    flop_count,
    gated_forward,
    lora_forward,
    moka_forward,
    multiple_lora_forward,
    param_count,
    uni_plus_mm_forward,
    unimodal_lora_forward,
)
from moka.errors import ContractError, ProtocolError, ShapeError
from moka.numkernel import Tape
from moka.seqmodel import ModalitySegmentedSequence, build_spans, make_modalities, make_routing_mask

NAMES = ["audio", "visual", "text"]


def make_seq(lengths=(3, 4, 5), k=6, seed=0, names=NAMES):
    mods = make_modalities(names)
    tokens = np.random.default_rng(seed).normal(size=(sum(lengths), k))
    return mods, ModalitySegmentedSequence(tokens, build_spans(mods, lengths))


def make_adapter(spec, mods, d=6, k=6, seed=0, scale=0.5):
    """Adapter with every parameter (B included) drawn at random."""
    ad = build_adapter(spec, mods, d, k)
    g = np.random.default_rng(seed + 1000)
    for name, v in ad.params.items():
        if name.startswith("proj."):
            ad.params[name] = np.eye(v.shape[0]) + 0.3 * g.normal(size=v.shape)
        else:
            ad.params[name] = g.normal(scale=scale, size=v.shape)
    return ad


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rows(seq, name):
    s = seq.span(name)
    return seq.tokens[s.start:s.stop]


ALL_SPECS = [AdapterSpec(v, rank=2) for v in VARIANTS if v != "moka"] + [
    AdapterSpec("moka", rank=2, cross_mode=m) for m in CROSS_MODES
]


# --- zero init ------------------------------------------------------------

@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.label)
def test_fresh_adapter_delta_is_exactly_zero(spec):
    mods, seq = make_seq()
    ad = build_adapter(spec, mods, 6, 6)
    assert not adapter_delta(ad, seq).any()


def test_a_init_is_seed_matched_across_variants():
    mods, _ = make_seq()
    a = build_adapter(AdapterSpec("moka", 2, seed=3), mods, 6, 6)
    b = build_adapter(AdapterSpec("moka", 2, cross_mode="naive", seed=3), mods, 6, 6)
    c = build_adapter(AdapterSpec("unimodal_lora", 2, seed=3), mods, 6, 6)
    for m in NAMES:
        np.testing.assert_array_equal(a.params[f"A.{m}"], b.params[f"A.{m}"])
        np.testing.assert_array_equal(a.params[f"A.{m}"], c.params[f"A.{m}"])
    assert abs(a.params["A.audio"]).max() <= math.sqrt(6 / 6)


# --- LoRA -----------------------------------------------------------------

def test_lora_hand_example():
    mods = make_modalities(["text"])
    ad = build_adapter(AdapterSpec("lora", 1), mods, 2, 2)
    ad.params["A"] = np.array([[1.0, 0.0]])
    ad.params["B"] = np.array([[1.0], [0.0]])
    seq = ModalitySegmentedSequence(np.array([[3.0, 5.0]]), build_spans(mods, (1,)))
    np.testing.assert_array_equal(lora_forward(ad, seq), [[3.0, 0.0]])


def test_lora_linear_in_b():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("lora", 2), mods)
    once = lora_forward(ad, seq)
    ad.params["B"] = 2 * ad.params["B"]
    np.testing.assert_allclose(lora_forward(ad, seq), 2 * once, atol=1e-14)


def test_wrong_input_width():
    mods, seq = make_seq(k=5)
    ad = build_adapter(AdapterSpec("lora", 2), mods, 6, 6)
    with pytest.raises(ShapeError):
        adapter_delta(ad, seq)


def test_rank_limit():
    check_rank(3, 6, 8)
    with pytest.raises(ContractError):
        check_rank(4, 6, 8)
    with pytest.raises(ContractError):
        build_adapter(AdapterSpec("lora", 4), make_modalities(["text"]), 6, 6)


# --- dense oracles for attention-free variants ----------------------------

@pytest.mark.parametrize("seed", range(10))
def test_multiple_lora_dense(seed):
    mods, seq = make_seq(seed=seed)
    ad = make_adapter(AdapterSpec("multiple_lora", 2), mods, seed=seed)
    dw = sum(ad.params[f"lora{i}.B"] @ ad.params[f"lora{i}.A"] for i in range(3))
    np.testing.assert_allclose(multiple_lora_forward(ad, seq), seq.tokens @ dw.T, atol=1e-10)


def test_multiple_lora_identical_pairs_double():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("multiple_lora", 2), mods)
    for i in (1, 2):
        ad.params[f"lora{i}.B"] = np.zeros_like(ad.params["lora0.B"])
    single = multiple_lora_forward(ad, seq)
    ad.params["lora1.A"] = ad.params["lora0.A"].copy()
    ad.params["lora1.B"] = ad.params["lora0.B"].copy()
    np.testing.assert_allclose(multiple_lora_forward(ad, seq), 2 * single, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_unimodal_block_diagonal(seed):
    mods, seq = make_seq(seed=seed)
    ad = make_adapter(AdapterSpec("unimodal_lora", 2), mods, seed=seed)
    ref = np.concatenate([rows(seq, m) @ (ad.params[f"B.{m}"] @ ad.params[f"A.{m}"]).T for m in NAMES])
    np.testing.assert_allclose(unimodal_lora_forward(ad, seq), ref, atol=1e-10)


def test_unimodal_locality():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("unimodal_lora", 2), mods)
    ad.params["B.visual"] = np.zeros_like(ad.params["B.visual"])
    out = unimodal_lora_forward(ad, seq)
    s = seq.span("visual")
    assert not out[s.start:s.stop].any()
    assert np.abs(np.delete(out, range(s.start, s.stop), axis=0)).min() > 0


def test_unimodal_single_modality_equals_lora():
    mods, seq = make_seq(lengths=(4,), names=["text"])
    uni = make_adapter(AdapterSpec("unimodal_lora", 2), mods)
    lora = build_adapter(AdapterSpec("lora", 2), mods, 6, 6)
    lora.params.update(A=uni.params["A.text"], B=uni.params["B.text"])
    np.testing.assert_array_equal(unimodal_lora_forward(uni, seq), lora_forward(lora, seq))


def _uni_branch(ad, seq, prefix="uni"):
    z = np.concatenate([rows(seq, m) @ ad.params[f"{prefix}.A.{m}"].T for m in NAMES])
    return z


@pytest.mark.parametrize("seed", range(10))
def test_uni_plus_mm_branch_sum(seed):
    mods, seq = make_seq(seed=seed)
    ad = make_adapter(AdapterSpec("uni_plus_mm", 2), mods, seed=seed)
    uni = _uni_branch(ad, seq) @ ad.params["uni.B"].T
    mm = seq.tokens @ (ad.params["mm.B"] @ ad.params["mm.A"]).T
    np.testing.assert_allclose(uni_plus_mm_forward(ad, seq), uni + mm, atol=1e-10)


def test_uni_plus_mm_reductions():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("uni_plus_mm", 2), mods)
    lora = build_adapter(AdapterSpec("lora", 2), mods, 6, 6)
    lora.params.update(A=ad.params["mm.A"], B=ad.params["mm.B"])
    uni_b = ad.params["uni.B"]
    ad.params["uni.B"] = np.zeros_like(uni_b)
    np.testing.assert_allclose(uni_plus_mm_forward(ad, seq), lora_forward(lora, seq), atol=1e-14)
    ad.params["uni.B"] = uni_b
    ad.params["mm.B"] = np.zeros_like(ad.params["mm.B"])
    np.testing.assert_allclose(uni_plus_mm_forward(ad, seq), _uni_branch(ad, seq) @ uni_b.T, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gated_matches_oracle(seed):
    mods, seq = make_seq(seed=seed)
    ad = make_adapter(AdapterSpec("uni_plus_mm_gated", 2), mods, seed=seed)
    z_uni = _uni_branch(ad, seq)
    z_mm = seq.tokens @ ad.params["mm.A"].T
    g = 1 / (1 + np.exp(-(z_uni @ ad.params["gate.w_uni"] + z_mm @ ad.params["gate.w_mm"] + ad.params["gate.b"])))
    d_uni, d_mm = z_uni @ ad.params["uni.B"].T, z_mm @ ad.params["mm.B"].T
    np.testing.assert_allclose(gated_forward(ad, seq), g * d_uni + (1 - g) * d_mm, atol=1e-10)


def test_gate_at_half_is_branch_average():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("uni_plus_mm_gated", 2), mods)
    for name in ("gate.w_uni", "gate.w_mm", "gate.b"):
        ad.params[name] = np.zeros_like(ad.params[name])
    plain = build_adapter(AdapterSpec("uni_plus_mm", 2), mods, 6, 6)
    plain.params.update({k: v for k, v in ad.params.items() if not k.startswith("gate")})
    np.testing.assert_allclose(gated_forward(ad, seq), 0.5 * uni_plus_mm_forward(plain, seq), atol=1e-12)


def test_gate_saturated_selects_uni():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("uni_plus_mm_gated", 2), mods)
    ad.params["gate.b"] = np.array([[40.0]])
    ad.params["gate.w_uni"] = np.zeros((2, 1))
    ad.params["gate.w_mm"] = np.zeros((2, 1))
    np.testing.assert_allclose(gated_forward(ad, seq), _uni_branch(ad, seq) @ ad.params["uni.B"].T, atol=1e-6)


# --- MokA -----------------------------------------------------------------

def moka_oracle(ad, seq, mode, lambdas=None, extra=None):
    """Straight-line MokA: slice -> A_i -> interaction -> shared B."""
    lam = lambdas or {}
    p = ad.params
    r = p["B"].shape[1]
    z = {m: rows(seq, m) @ p[f"A.{m}"].T for m in NAMES}
    zt = z["text"]
    new = dict(z)
    if mode in ("task_centric", "extra_pair", "projected"):
        for m in ("audio", "visual"):
            q, kk, vv = z[m], zt, zt
            if mode == "projected":
                q, kk, vv = q @ p[f"proj.Wq.{m}"].T, zt @ p["proj.Wk"].T, zt @ p["proj.Wv"].T
            w = softmax(q @ kk.T / np.sqrt(r))
            new[m] = z[m] + lam.get(m, 1.0) * (w @ vv)
        if mode == "extra_pair":
            qm, km, le = extra
            w = softmax(z[qm] @ z[km].T / np.sqrt(r))
            new[qm] = new[qm] + le * (w @ z[km])
    elif mode == "naive":
        for m in ("audio", "visual"):
            new[m] = z[m] + lam.get(m, 1.0) * zt.mean(axis=0, keepdims=True)
    elif mode == "reversed_query":
        pool = np.concatenate([z["audio"], z["visual"]])
        w = softmax(zt @ pool.T / np.sqrt(r))
        new["text"] = zt + lam.get("text", 1.0) * (w @ pool)
    return np.concatenate([new[m] for m in NAMES]) @ p["B"].T


MODE_CASES = [
    ("none", {}, None),
    ("task_centric", {"audio": 0.7, "visual": 1.4}, None),
    ("naive", {"audio": 0.3}, None),
    ("projected", {"visual": 0.5}, None),
    ("reversed_query", {"text": 0.8}, None),
    ("extra_pair", {}, ("audio", "visual", 0.6)),
    ("extra_pair", {"visual": 2.0}, ("visual", "audio", 1.0)),
]


@pytest.mark.parametrize("mode,lambdas,extra", MODE_CASES)
@pytest.mark.parametrize("seed", range(4))
def test_moka_matches_straight_line_oracle(mode, lambdas, extra, seed):
    mods, seq = make_seq(seed=seed)
    kwargs = {}
    if extra:
        kwargs = {"extra_query": extra[0], "extra_key": extra[1], "extra_lambda": extra[2]}
    ad = make_adapter(AdapterSpec("moka", 2, lambdas, mode, **kwargs), mods, seed=seed)
    np.testing.assert_allclose(moka_forward(ad, seq), moka_oracle(ad, seq, mode, lambdas, extra), atol=1e-10)


@pytest.mark.parametrize("mode", [m for m in CROSS_MODES])
def test_moka_text_only_is_lora(mode):
    mods, seq = make_seq(lengths=(0, 0, 5))
    ad = make_adapter(AdapterSpec("moka", 2, cross_mode=mode), mods)
    lora = build_adapter(AdapterSpec("lora", 2), mods, 6, 6)
    lora.params.update(A=ad.params["A.text"], B=ad.params["B"])
    np.testing.assert_array_equal(moka_forward(ad, seq), lora_forward(lora, seq))


@pytest.mark.parametrize("mode", ["task_centric", "naive", "projected"])
def test_lambda_zero_is_without_ca(mode):
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("moka", 2, {"audio": 0.0, "visual": 0.0}, mode), mods)
    plain = build_adapter(AdapterSpec("moka", 2, cross_mode="none"), mods, 6, 6)
    plain.params.update({k: v for k, v in ad.params.items() if not k.startswith("proj.")})
    np.testing.assert_array_equal(moka_forward(ad, seq), moka_forward(plain, seq))


def test_extra_lambda_zero_is_plain_moka():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("moka", 2, cross_mode="extra_pair", extra_query="audio", extra_lambda=0.0), mods)
    plain = build_adapter(AdapterSpec("moka", 2), mods, 6, 6)
    plain.params.update(ad.params)
    np.testing.assert_array_equal(moka_forward(ad, seq), moka_forward(plain, seq))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.integers(0, 2**31))
def test_delta_is_affine_in_lambda(l1, l2, seed):
    mods, seq = make_seq(seed=seed % 1000)
    base = make_adapter(AdapterSpec("moka", 2, cross_mode="none"), mods, seed=seed % 1000)

    def run(lam):
        ad = build_adapter(AdapterSpec("moka", 2, {"audio": lam, "visual": lam}), mods, 6, 6)
        ad.params.update(base.params)
        return moka_forward(ad, seq)

    d0, d1 = run(0.0), run(1.0)
    np.testing.assert_allclose(run(l1), d0 + l1 * (d1 - d0), atol=1e-10)
    np.testing.assert_allclose(run(l1 + l2) - run(l2), run(l1) - d0, atol=1e-10)


@pytest.mark.parametrize("mode", ["task_centric", "naive", "projected", "extra_pair"])
@pytest.mark.parametrize("seed", range(50))
def test_text_rows_get_no_cross_modal_term(mode, seed):
    g = np.random.default_rng(seed)
    lengths = tuple(int(x) for x in g.integers(1, 5, size=3))
    mods, seq = make_seq(lengths=lengths, seed=seed)
    ad = make_adapter(AdapterSpec("moka", 2, {"audio": g.uniform(0, 2)}, mode, extra_query="visual"), mods, seed=seed)
    tape = Tape()
    P = ad.bind(tape)
    z = ad.lowrank(tape.const(seq.tokens), seq.spans, P)
    out = ad.interact(z, seq.spans, P)
    assert np.array_equal(out["text"].value - z["text"].value, np.zeros_like(z["text"].value))


def test_moka_attention_needs_text_for_partial_mask():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("moka", 2), mods)
    with pytest.raises(ProtocolError):
        moka_forward(ad, seq, make_routing_mask(["audio", "visual"], NAMES))
    # text alone is fine: non-text rows are zeroed after the interaction
    out = moka_forward(ad, seq, make_routing_mask(["text", "audio"], NAMES))
    s = seq.span("visual")
    assert not out[s.start:s.stop].any()


def test_reversed_query_needs_every_nontext_key():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("moka", 2, cross_mode="reversed_query"), mods)
    with pytest.raises(ProtocolError):
        moka_forward(ad, seq, make_routing_mask(["text", "audio"], NAMES))


def test_attention_records_are_row_stochastic():
    mods, seq = make_seq()
    ad = make_adapter(AdapterSpec("moka", 2), mods)
    records = []
    moka_forward(ad, seq, records=records)
    assert [(r.query, r.key) for r in records] == [("audio", "text"), ("visual", "text")]
    for r in records:
        r.check(1e-12)


def test_extra_pair_rejects_same_modality():
    mods, _ = make_seq()
    with pytest.raises(ContractError):
        build_adapter(AdapterSpec("moka", 2, cross_mode="extra_pair", extra_query="audio", extra_key="audio"),
                      mods, 6, 6)


def test_cross_mode_only_for_moka():
    with pytest.raises(ContractError):
        AdapterSpec("lora", 2, cross_mode="naive")


# --- counts ---------------------------------------------------------------

@pytest.mark.parametrize("variant,expected", [
    ("lora", (1, 1)), ("multiple_lora", (3, 3)), ("unimodal_lora", (3, 3)),
    ("uni_plus_mm", (4, 2)), ("uni_plus_mm_gated", (4, 2)), ("moka", (3, 1)),
])
def test_count_matrices_n3(variant, expected):
    assert count_matrices(AdapterSpec(variant), 3) == expected


@pytest.mark.parametrize("n", [2, 3, 4])
@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.label)
def test_counts_match_enumeration(spec, n):
    if spec.cross_mode == "extra_pair" and n < 3:
        pytest.skip("extra_pair needs two non-text modalities")
    names = ["m0", "m1", "m2", "m3"][: n - 1] + ["text"]
    mods = make_modalities(names)
    ad = build_adapter(spec, mods, 8, 10)
    assert (ad.count("A"), ad.count("B")) == count_matrices(spec, n)
    assert ad.num_parameters() == param_count(spec, 8, 10, n)


def test_param_count_examples():
    assert param_count(AdapterSpec("lora", 2), 8, 8, 3) == 32
    assert param_count(AdapterSpec("moka", 2), 8, 8, 3) == 64


# --- FLOPs ----------------------------------------------------------------

def test_flop_count_lora_example():
    mods, _ = make_seq()
    spans = build_spans(mods, (3, 3, 4))
    assert flop_count(AdapterSpec("lora", 2), 8, 8, spans) == 640


@pytest.mark.parametrize("spec", ALL_SPECS + [AdapterSpec("moka", 3, cross_mode="extra_pair", extra_query="visual")],
                         ids=lambda s: s.label)
@pytest.mark.parametrize("lengths", [(3, 4, 5), (1, 0, 7), (0, 0, 4)])
def test_flop_count_matches_instrumented(spec, lengths):
    mods, seq = make_seq(lengths=lengths, k=7)
    ad = make_adapter(spec, mods, d=9, k=7)
    tape = Tape()
    x = tape.const(seq.tokens)
    start = len(tape)
    ad.delta(x, seq.spans)
    assert tape.flop_count(start) == flop_count(spec, 9, 7, seq.spans)


def test_moka_overhead_positive():
    mods, _ = make_seq()
    spans = build_spans(mods, (2, 2, 6))
    assert flop_count(AdapterSpec("moka", 2), 8, 8, spans) > flop_count(AdapterSpec("lora", 2), 8, 8, spans)


def test_attention_modes_listed():
    assert set(ATTENTION_MODES) <= set(CROSS_MODES)
