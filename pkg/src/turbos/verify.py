"""Self-verification suites: every fast path against an independent slow oracle.

Each check returns a ``CheckResult``; the CLI prints them as
``CHECK <name> <pass|fail> <max_dev>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import attention as att
from . import cpsim, moe, numerics, rlmath, ssd
from .model import TINY, TURBOS_128_PATTERN, build_model, decode_step, generate, prefill, validate_production_pattern


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_dev: float

    def line(self) -> str:
        return f"CHECK {self.name} {'pass' if self.passed else 'fail'} {self.max_dev:.3e}"


def _within(name: str, dev: float, tol: float) -> CheckResult:
    dev = float(dev)
    return CheckResult(name, bool(np.isfinite(dev) and dev <= tol), dev)


def _exact(name: str, ok: bool) -> CheckResult:
    return CheckResult(name, bool(ok), 0.0 if ok else 1.0)


SUITES: dict[str, list[Callable]] = {k: [] for k in ("numerics", "ssd", "attention", "moe", "model", "cpsim", "rlmath")}


def check(suite: str):
    def deco(fn):
        SUITES[suite].append(fn)
        return fn

    return deco


def run_suite(suite: str, seed: int = 0, trials: int = 5) -> list[CheckResult]:
    names = list(SUITES) if suite == "all" else [suite]
    if any(n not in SUITES for n in names):
        raise KeyError(suite)
    out = []
    for n in names:
        for fn in SUITES[n]:
            rng = np.random.default_rng([seed, len(out)])
            res = fn(rng, trials)
            out.extend(res if isinstance(res, list) else [res])
    return out


# -- numerics -----------------------------------------------------------------


@check("numerics")
def _matmul(rng, trials):
    dev = 0.0
    for _ in range(trials):
        a, b = (rng.normal(size=(8, 8)).astype(np.float32) for _ in range(2))
        dev = max(dev, np.abs(numerics.matmul(a, b) - numerics.matmul_reference(a, b)).max())
    return _within("matmul-vs-triple-loop", dev, 1e-5)


@check("numerics")
def _matmul_transpose(rng, trials):
    dev = 0.0
    for _ in range(trials):
        a, b = (rng.normal(size=(8, 8)).astype(np.float32) for _ in range(2))
        dev = max(dev, np.abs(numerics.matmul(a, b).T - numerics.matmul(b.T.copy(), a.T.copy())).max())
    return _within("matmul-transpose-law", dev, 1e-5)


@check("numerics")
def _rmsnorm(rng, trials):
    dev = 0.0
    for _ in range(trials):
        x, g = rng.normal(size=(4, 16)), rng.normal(size=16)
        dev = max(dev, np.abs(numerics.rmsnorm(x, g) - numerics.rmsnorm_reference(x, g)).max())
    return _within("rmsnorm-vs-direct", dev, 1e-6)


@check("numerics")
def _softmax(rng, trials):
    direct = [math.exp(2) / (math.exp(2) + math.exp(1)), math.exp(1) / (math.exp(2) + math.exp(1))]
    dev = np.abs(numerics.softmax_lastdim(np.array([2.0, 1.0])) - direct).max()
    for _ in range(trials):
        x = rng.normal(size=(5, 9))
        p = numerics.softmax_lastdim(x)
        dev = max(dev, np.abs(p.sum(-1) - 1).max(), np.abs(numerics.softmax_lastdim(x + 3.7) - p).max())
    return _within("softmax-vs-direct", dev, 1e-7)


@check("numerics")
def _silu(rng, trials):
    return _within("silu-vs-direct", abs(float(numerics.silu(np.array(1.0))) - 1.0 / (1.0 + math.exp(-1.0))), 1e-7)


@check("numerics")
def _decay(rng, trials):
    dev = chain = 0.0
    for _ in range(trials):
        la = -rng.uniform(0, 0.5, size=16)
        L = numerics.decay_matrix(la)
        dev = max(dev, np.abs(L - numerics.decay_matrix_reference(la)).max())
        for i, j, m in rng.integers(0, 16, size=(20, 3)):
            i, j, m = sorted((i, j, m), reverse=True)
            chain = max(chain, abs(L[i, m] - L[i, j] * L[j, m]))
    return [_within("decay-matrix-vs-products", dev, 1e-6), _within("decay-matrix-chain", chain, 1e-6)]


@check("numerics")
def _bf16(rng, trials):
    x = (rng.normal(size=100_000) * np.exp(rng.uniform(-20, 20, size=100_000))).astype(np.float32)
    once = numerics.round_bf16(x)
    return _exact("bf16-round-idempotent", np.array_equal(once, numerics.round_bf16(once)))


# -- ssd ----------------------------------------------------------------------


def random_scan(rng, T, H=4, P=8, G=2, N=16, dtype=np.float64):
    inp = cpsim.ScanInputs.random(rng, T, H, P, G, N, dtype=dtype)
    h0 = rng.normal(size=(H, P, N)).astype(dtype)
    return inp, h0


def _f32(*arrs):
    return [a.astype(np.float32) for a in arrs]


@check("ssd")
def _chunked_vs_naive(rng, trials):
    dy = dh = 0.0
    for _ in range(trials):
        inp, h0 = random_scan(rng, 256)
        y0, hT0 = ssd.ssd_naive_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0)
        A, dt, x, B, C, D, h = _f32(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0)
        y, hT = ssd.ssd_chunked_scan(A, dt, x, B, C, D, h, chunk_size=32)
        dy, dh = max(dy, np.abs(y - y0).max()), max(dh, np.abs(hT - hT0).max())
    return [_within("chunked-vs-naive", dy, 1e-4), _within("chunked-vs-naive-state", dh, 1e-4)]


@check("ssd")
def _chunk_invariance(rng, trials):
    dev = 0.0
    for _ in range(trials):
        T = 64
        inp, h0 = random_scan(rng, T, dtype=np.float32)
        outs = [
            ssd.ssd_chunked_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0, chunk_size=q)
            for q in (1, 7, 32, T)
        ]
        for y, h in outs[1:]:
            dev = max(dev, np.abs(y - outs[0][0]).max(), np.abs(h - outs[0][1]).max())
    return _within("chunk-boundary-invariance", dev, 1e-4)


@check("ssd")
def _decode_vs_naive(rng, trials):
    dev = 0.0
    for _ in range(trials):
        inp, h0 = random_scan(rng, 1)
        y0, h1 = ssd.ssd_naive_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0)
        y, h = ssd.ssd_decode_step(inp.A, inp.D, h0, inp.x[0], inp.dt[0], inp.B[0], inp.C[0])
        dev = max(dev, np.abs(y - y0[0]).max(), np.abs(h - h1).max())
    return _within("decode-step-vs-naive", dev, 1e-5)


@check("ssd")
def _prefill_then_decode(rng, trials):
    dev = 0.0
    for _ in range(trials):
        inp, h0 = random_scan(rng, 48, dtype=np.float32)
        y_full, h_full = ssd.ssd_chunked_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0, chunk_size=16)
        pre = inp.shard(0, 47)
        _, h = ssd.ssd_chunked_scan(pre.A, pre.dt, pre.x, pre.B, pre.C, pre.D, h0, chunk_size=16)
        y, h = ssd.ssd_decode_step(inp.A, inp.D, h, inp.x[47], inp.dt[47], inp.B[47], inp.C[47])
        dev = max(dev, np.abs(y - y_full[47]).max(), np.abs(h - h_full).max())
    return _within("ssd-prefill-then-decode", dev, 1e-4)


@check("ssd")
def _h0_linearity(rng, trials):
    dev = 0.0
    for _ in range(trials):
        inp, s1 = random_scan(rng, 40, dtype=np.float32)
        s2 = rng.normal(size=s1.shape).astype(np.float32)
        a, b = rng.normal(size=2)

        def run(h):
            return ssd.ssd_chunked_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h, chunk_size=8)[0]

        y0 = run(np.zeros_like(s1))
        lhs = run((a * s1 + b * s2).astype(np.float32))
        rhs = a * (run(s1) - y0) + b * (run(s2) - y0) + y0
        dev = max(dev, np.abs(lhs - rhs).max())
    return _within("initial-state-linearity", dev, 1e-4)


@check("ssd")
def _contraction(rng, trials):
    ok = True
    for _ in range(trials):
        inp, h = random_scan(rng, 64, dtype=np.float32)
        zero = np.zeros_like(inp.x[0])
        for t in range(64):
            _, h_next = ssd.ssd_decode_step(inp.A, inp.D, h, zero, inp.dt[t], inp.B[t], inp.C[t])
            ok &= bool(np.linalg.norm(h_next) <= np.linalg.norm(h))
            h = h_next
    return _exact("zero-input-decay-contraction", ok)


def _layer_setup(rng, conv_width=4):
    cfg = ssd.SsdConfig(n_heads=4, d_head=8, d_state=16, n_groups=2, chunk_size=8, conv_width=conv_width)
    params = ssd.init_ssd_params(cfg, 32, rng)
    return cfg, params


@check("ssd")
def _layer_vs_shadow(rng, trials):
    dev = dev_dec = 0.0
    for _ in range(trials):
        cfg, params = _layer_setup(rng)
        r = rng.normal(size=(32, 32)).astype(np.float32)
        gain = rng.uniform(0.5, 1.5, size=32).astype(np.float32)
        out, st = ssd.ssd_layer_forward(cfg, params, r, norm_gain=gain)
        ref, h_ref = ssd.ssd_layer_reference(cfg, params, r, norm_gain=gain)
        dev = max(dev, np.abs(out - ref).max(), np.abs(st.h - h_ref).max())
        one, st1 = ssd.ssd_layer_forward(cfg, params, r[:1], norm_gain=gain)
        dec, st2 = ssd.ssd_layer_decode(cfg, params, r[:1], ssd.SsmState.zeros(cfg), norm_gain=gain)
        dev_dec = max(dev_dec, np.abs(one - dec).max(), np.abs(st1.h - st2.h).max())
    return [_within("layer-vs-f64-shadow", dev, 1e-4), _within("layer-t1-vs-decode", dev_dec, 1e-5)]


def precision_trial(rng, T: int = 4096, H: int = 2, P: int = 4, N: int = 8) -> tuple[float, float]:
    """Final-state error of float32 and bfloat16-emulated state against a float64 run."""
    inp = cpsim.ScanInputs.random(rng, T, H, P, 1, N, dtype=np.float64)
    # slow decays keep a long memory, which is where narrow state hurts
    dt = rng.uniform(1e-3, 2e-2, size=(T, H))
    A = -rng.uniform(0.5, 1.0, size=H)
    args = (A, dt, inp.x, inp.B, inp.C, inp.D)
    _, ref = ssd.ssd_naive_scan(*args, precision=numerics.Precision.F64)
    _, s32 = ssd.ssd_naive_scan(*args, precision=numerics.Precision.F32)
    _, s16 = ssd.ssd_naive_scan(*args, precision=numerics.Precision.BF16EMU)
    return float(np.abs(s32 - ref).max()), float(np.abs(s16 - ref).max())


# -- attention ----------------------------------------------------------------


@check("attention")
def _ntk(rng, trials):
    got = att.ntk_rope_base(att.RopeConfig(d_head=128, base=10000.0, ntk_alpha=50.0))
    want = 10000.0 * math.pow(50.0, 128.0 / 126.0)
    return _within("ntk-base-vs-formula", abs(got - want) / want, 1e-6)


@check("attention")
def _rope(rng, trials):
    rel = norm = 0.0
    for alpha in (1.0, 50.0, 1000.0):
        cfg = att.RopeConfig(d_head=16, ntk_alpha=alpha)
        for _ in range(trials):
            q, k = rng.normal(size=(2, 1, 1, 16))
            p1, p2, c = rng.integers(0, 5000, size=3)

            def dot(a, b):
                return float(att.apply_rope(q, [a], cfg).ravel() @ att.apply_rope(k, [b], cfg).ravel())

            rel = max(rel, abs(dot(p1, p2) - dot(p1 + c, p2 + c)))
            out = att.apply_rope(q, [p1], cfg)
            norm = max(norm, abs(np.linalg.norm(out) - np.linalg.norm(q)))
    return [_within("rope-relative-angle", rel, 1e-5), _within("rope-norm-preserving", norm, 1e-6)]


@check("attention")
def _qk_norm(rng, trials):
    dev = 0.0
    for _ in range(trials):
        q, k = rng.normal(size=(2, 5, 4, 16))
        gq, gk = rng.normal(size=(2, 16))
        q2, k2 = att.qk_norm(q, k, gq, gk)
        want_q = np.stack([[numerics.rmsnorm(q[t, h], gq) for h in range(4)] for t in range(5)])
        want_k = np.stack([[numerics.rmsnorm(k[t, h], gk) for h in range(4)] for t in range(5)])
        dev = max(dev, np.abs(q2 - want_q).max(), np.abs(k2 - want_k).max())
    return _within("qk-norm-vs-per-head-rmsnorm", dev, 1e-7)


def _attn_setup(rng, n_q=4, n_kv=2, d_head=8, d_model=32, alpha=1.0):
    cfg = att.AttnConfig(n_q, n_kv, d_head, att.RopeConfig(d_head=d_head, ntk_alpha=alpha))
    params = att.init_attn_params(cfg, d_model, rng)
    params.q_norm = rng.uniform(0.5, 1.5, size=d_head).astype(np.float32)
    params.k_norm = rng.uniform(0.5, 1.5, size=d_head).astype(np.float32)
    return cfg, params


@check("attention")
def _gqa_oracles(rng, trials):
    mha = gqa = prefix = dec0 = dec = 0.0
    for _ in range(trials):
        cfg, params = _attn_setup(rng, n_q=4, n_kv=4)
        r = rng.normal(size=(12, 32)).astype(np.float32)
        out, _ = att.gqa_prefill(cfg, params, r, att.KvCache(4, 8))
        mha = max(mha, np.abs(out - att.attention_reference(cfg, params, r)).max())

        cfg, params = _attn_setup(rng, n_q=4, n_kv=2, alpha=50.0)
        out, _ = att.gqa_prefill(cfg, params, r, att.KvCache(2, 8))
        gqa = max(gqa, np.abs(out - att.attention_reference(cfg, params, r)).max())
        longer, _ = att.gqa_prefill(cfg, params, np.concatenate([r, rng.normal(size=(5, 32)).astype(np.float32)]), att.KvCache(2, 8))
        prefix = max(prefix, np.abs(longer[:12] - out).max())

        first, _ = att.gqa_prefill(cfg, params, r[:1], att.KvCache(2, 8))
        d0, _ = att.gqa_decode_step(cfg, params, r[:1], att.KvCache(2, 8))
        dec0 = max(dec0, np.abs(first - d0).max())
        cache = att.KvCache(2, 8)
        att.gqa_prefill(cfg, params, r[:11], cache)
        last, _ = att.gqa_decode_step(cfg, params, r[11:], cache)
        dec = max(dec, np.abs(last[0] - out[11]).max())
    return [
        _within("gqa-mha-degenerate-vs-oracle", mha, 1e-5),
        _within("gqa-vs-oracle", gqa, 1e-5),
        _within("causal-prefix", prefix, 1e-5),
        _within("decode-pos0-vs-prefill", dec0, 1e-6),
        _within("gqa-prefill-then-decode", dec, 1e-5),
    ]


@check("attention")
def _cache_accounting(rng, trials):
    cfg, params = _attn_setup(rng, n_q=8, n_kv=2)
    cache = att.KvCache(2, 8)
    att.gqa_prefill(cfg, params, rng.normal(size=(6, 32)).astype(np.float32), cache)
    ok = cache.floats_per_token == 2 * 2 * 8 and cache.stored_floats() == 6 * 2 * 2 * 8
    return _exact("kv-cache-floats-per-token", ok)


# -- moe ----------------------------------------------------------------------


@check("moe")
def _route(rng, trials):
    d = moe.route_topk(np.array([[2.0, 1.0, 0.0, 0.0]]), 2)
    p = [math.exp(2), math.exp(1)]
    want = [p[0] / sum(p), p[1] / sum(p)]
    ok = list(d.indices[0]) == [0, 1]
    return _within("route-topk-vs-direct", np.abs(d.weights[0] - want).max() if ok else np.inf, 1e-6)


@check("moe")
def _capacity(rng, trials):
    ok = moe.expert_capacity(64, moe.MoeConfig(capacity_factor=1.5)) == 6
    for gamma in (0.25, 0.5, 1.0, 1.25, 1.5, 2.0):
        for T in (1, 3, 17, 64, 100):
            for k, E in ((1, 4), (2, 8), (2, 32)):
                cap = moe.expert_capacity(T, moe.MoeConfig(n_experts=E, top_k=k, capacity_factor=gamma))
                num = int(gamma * 4) * T * k  # gamma is a multiple of 1/4 here
                ok &= cap == max(1, -(-num // (4 * E)))
    return _exact("capacity-formula-grid", ok)


def _moe_setup(rng, E=4, k=2, d_model=16, d_ff=24, policy=moe.DropPolicy.NO_DROP, gamma=1.5):
    cfg = moe.MoeConfig(n_experts=E, top_k=k, d_ff=d_ff, capacity_factor=gamma, drop_policy=policy)
    return cfg, moe.init_moe_params(cfg, d_model, rng)


@check("moe")
def _dense_oracle(rng, trials):
    dev = 0.0
    for _ in range(trials):
        for policy in moe.DropPolicy:
            cfg, params = _moe_setup(rng, policy=policy, gamma=0.5)
            x = rng.normal(size=(8, 16)).astype(np.float32)
            dev = max(dev, np.abs(moe.moe_forward(cfg, params, x) - moe.moe_dense_reference(cfg, params, x)).max())
    return _within("moe-vs-dense-oracle", dev, 1e-5)


@check("moe")
def _load_recount(rng, trials):
    logits = rng.normal(size=(1024, 8))
    d = moe.route_topk(logits, 2)
    stats = moe.load_balance_stats(d, 8)
    recount = [0] * 8
    for row in logits:
        for e in sorted(range(8), key=lambda e: (-row[e], e))[:2]:
            recount[e] += 1
    return _exact("load-stats-recount", list(stats.counts) == recount)


@check("moe")
def _permutation(rng, trials):
    dev = 0.0
    for _ in range(trials):
        cfg, params = _moe_setup(rng)
        x = rng.normal(size=(8, 16)).astype(np.float32)
        perm = rng.permutation(cfg.n_experts)
        shuffled = moe.MoeParams(
            router=params.router[:, perm],
            experts=moe.ExpertParams(params.experts.gate[perm], params.experts.up[perm], params.experts.down[perm]),
            shared=params.shared,
        )
        dev = max(dev, np.abs(moe.moe_forward(cfg, params, x) - moe.moe_forward(cfg, shuffled, x)).max())
    return _within("moe-expert-relabel-invariance", dev, 1e-6)


# -- model --------------------------------------------------------------------


def tiny_model(seed: int, **overrides):
    return build_model(replace(TINY, seed=int(seed), **overrides))


def prefill_decode_gap(model, tokens) -> float:
    full, _ = prefill(model, tokens)
    logits, session = prefill(model, tokens[:1])
    rows = [logits[0]] + [decode_step(model, session, int(t)) for t in tokens[1:]]
    return float(np.abs(np.stack(rows) - full).max())


@check("model")
def _model_consistency(rng, trials):
    dev = 0.0
    for _ in range(trials):
        m = tiny_model(rng.integers(1 << 31))
        dev = max(dev, prefill_decode_gap(m, rng.integers(0, 259, size=32)))
    return _within("prefill-vs-decode-logits", dev, 1e-4)


@check("model")
def _model_causality(rng, trials):
    dev = 0.0
    for _ in range(trials):
        m = tiny_model(rng.integers(1 << 31))
        toks = rng.integers(0, 259, size=20)
        full, _ = prefill(m, toks)
        for j in (1, 5, 13):
            part, _ = prefill(m, toks[:j])
            dev = max(dev, np.abs(part[-1] - full[j - 1]).max())
    return _within("prefix-causality", dev, 1e-4)


@check("model")
def _greedy_oracle(rng, trials):
    m = tiny_model(rng.integers(1 << 31))
    prompt = [256] + list(rng.integers(0, 256, size=5))
    fast = generate(m, prompt, 32)
    seq = list(prompt)
    for _ in range(32):
        logits, _ = prefill(m, seq)
        seq.append(int(np.argmax(logits[-1])))
    return _exact("greedy-vs-from-scratch", fast == seq[len(prompt):])


@check("model")
def _census(rng, trials):
    try:
        validate_production_pattern(TURBOS_128_PATTERN)
        return _exact("production-census", True)
    except Exception:
        return _exact("production-census", False)


# -- cpsim --------------------------------------------------------------------


def longest_path_oracle(n_steps: int, edges) -> int:
    """Memoized DFS over predecessors."""
    preds = {i: [] for i in range(n_steps)}
    for a, b in edges:
        preds[b].append(a)
    memo = {}

    def depth(i):
        if i not in memo:
            memo[i] = 1 + max((depth(p) for p in preds[i]), default=0)
        return memo[i]

    return max((depth(i) for i in range(n_steps)), default=0)


@check("cpsim")
def _shards(rng, trials):
    plan = cpsim.shard_sequence(256, 4)
    sizes = [b - a for a, b in plan.bounds]
    return _exact("shard-recount", sizes == [64] * 4)


@check("cpsim")
def _cp_equivalence(rng, trials):
    seq = par = ref_dev = 0.0
    laws = True
    for _ in range(trials):
        for R in (2, 4):
            T = int(rng.choice([64, 256, 100]))
            chunk = int(rng.choice([7, 16, 32]))
            inp, h0 = random_scan(rng, T, dtype=np.float32)
            y1, h1 = ssd.ssd_chunked_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0, chunk_size=chunk)
            y0, hn = ssd.ssd_naive_scan(inp.A, inp.dt, inp.x, inp.B, inp.C, inp.D, h0)
            ref_dev = max(ref_dev, np.abs(y1 - y0).max(), np.abs(h1 - hn).max())
            plan = cpsim.shard_sequence(T, R, chunk)
            ys, hs, ts = cpsim.cp_sequential_scan(plan, inp, h0)
            yp, hp, tp = cpsim.cp_parallel_scan(plan, inp, h0)
            seq = max(seq, np.abs(ys - y1).max(), np.abs(hs - h1).max())
            par = max(par, np.abs(yp - y1).max(), np.abs(hp - h1).max())
            laws &= ts.point_to_point == R - 1 and ts.collectives == 0
            laws &= tp.point_to_point == 0 and tp.collectives == 2
            laws &= tp.count(cpsim.MessageKind.ALL_GATHER_DECAY_CHUNK) == 1
            laws &= tp.count(cpsim.MessageKind.REDUCE_SCATTER_STATES) == 1
    return [
        _within("cp-chunked-vs-naive", ref_dev, 1e-4),
        _within("cp-sequential-vs-single-rank", seq, 1e-4),
        _within("cp-parallel-vs-single-rank", par, 1e-4),
        _exact("cp-message-count-law", laws),
    ]


@check("cpsim")
def _critical_path(rng, trials):
    ok = True
    inp, _ = random_scan(rng, 64, dtype=np.float32)
    depths = {}
    for R in (1, 2, 4, 8):
        plan = cpsim.shard_sequence(64, R, 8)
        for name, fn in (("seq", cpsim.cp_sequential_scan), ("par", cpsim.cp_parallel_scan)):
            _, _, tr = fn(plan, inp)
            d = cpsim.trace_critical_path(tr)
            ok &= d == longest_path_oracle(len(tr.steps), tr.edges)
            depths[name, R] = d
    ok &= all(depths["seq", R] == R for R in (1, 2, 4, 8))
    ok &= len({depths["par", R] for R in (1, 2, 4, 8)}) == 1
    return _exact("critical-path-vs-longest-path", ok)


# -- rlmath -------------------------------------------------------------------


def grpo_direct_loss(groups, eps, beta, clip=(0.0, 10.0)) -> float:
    """Loop-level token-mean GRPO loss, written from the definitions."""
    total = kl = 0.0
    n = 0
    for g in groups:
        r = [float(v) for v in g.rewards]
        mu = sum(r) / len(r)
        sd = math.sqrt(sum((v - mu) ** 2 for v in r) / len(r))
        adv = [0.0 if sd == 0 else (v - mu) / sd for v in r]
        for i in range(len(r)):
            for t in range(len(g.logp_policy[i])):
                if not g.masks[i][t]:
                    continue
                rho = math.exp(g.logp_policy[i][t] - g.logp_old[i][t])
                rho_c = min(max(rho, 1 - eps), 1 + eps)
                total += min(rho * adv[i], rho_c * adv[i])
                lr = g.logp_ref[i][t] - g.logp_policy[i][t]
                kl += min(max(math.exp(lr) - lr - 1, clip[0]), clip[1])
                n += 1
    return -total / n + beta * kl / n


def random_group(rng, G=4, zero_var=False, pid="p"):
    lens = rng.integers(1, 9, size=G)
    rewards = np.full(G, 1.0) if zero_var else rng.integers(0, 3, size=G).astype(float)
    mk = lambda: [rng.normal(-1.0, 0.5, size=n) for n in lens]  # noqa: E731
    masks = [rng.random(n) > 0.2 for n in lens]
    for m in masks:
        m[0] = True
    return rlmath.SampleGroup(pid, rewards, mk(), mk(), mk(), masks)


@check("rlmath")
def _advantages(rng, trials):
    adv, _ = rlmath.group_advantages([1, 0, 1, 0])
    dev = np.abs(adv - [1, -1, 1, -1]).max()
    for _ in range(trials):
        r = rng.normal(size=6)
        a, _ = rlmath.group_advantages(r)
        dev = max(dev, abs(a.sum()), np.abs(rlmath.group_advantages(3.0 * r + 2.0)[0] - a).max())
    return _within("group-advantages", dev, 1e-9)


@check("rlmath")
def _k3(rng, trials):
    got = float(rlmath.k3_kl([0.0], [math.log(2.0)])[0])
    clipped = float(rlmath.k3_kl([0.0], [20.0])[0])
    return [_within("k3-vs-direct", abs(got - (2.0 - math.log(2.0) - 1.0)), 1e-9),
            _exact("k3-clip-upper", clipped == 10.0)]


@check("rlmath")
def _token_loss(rng, trials):
    dev = 0.0
    for _ in range(trials):
        groups = [random_group(rng, pid=str(i)) for i in range(3)]
        hyper = rlmath.GrpoHyper(clip_eps=0.2, kl_coef=0.05)
        loss, _ = rlmath.grpo_token_loss(groups, hyper)
        dev = max(dev, abs(loss - grpo_direct_loss(groups, 0.2, 0.05)))
    return _within("grpo-token-loss-vs-direct", dev, 1e-6)


@check("rlmath")
def _filters(rng, trials):
    ok = True
    for _ in range(trials):
        groups = [random_group(rng, zero_var=bool(rng.random() < 0.4), pid=str(i)) for i in range(8)]
        kept = rlmath.dynamic_filter(groups)
        ok &= [g.prompt_id for g in kept] == [g.prompt_id for g in groups if np.std(g.rewards) > 0]
        adv = rng.normal(size=7)
        ok &= list(rlmath.bon_mask(adv)) == [a > 0 for a in adv]
    return _exact("dynamic-filter-and-bon-recount", ok)


@check("ssd")
def _precision(rng, trials):
    wins = 0
    worst = 0.0
    for _ in range(trials):
        e32, e16 = precision_trial(rng)
        wins += e32 < e16
        worst = max(worst, e32)
    return CheckResult("fp32-state-beats-bf16", wins >= math.ceil(0.95 * trials), worst)
