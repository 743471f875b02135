"""Straight-line oracle for the toy runtime.

Written directly against numpy with plain integer matmuls, no tiling, no
Booth recoding and no streaming stages, so that agreement with
:mod:`ternsim.runtime` checks the datapath models rather than shared code.
It records the same named integer intermediates.
"""

from __future__ import annotations

import math

import numpy as np

from .runtime import RunConfig, ToyModel


def _quant(x):
    x = np.asarray(x, dtype=np.float64).ravel()
    m = np.abs(x).max()
    s = 127.0 / m if m > 0 else 1.0
    y = x * s
    q = np.sign(y) * np.floor(np.abs(y) + 0.5)
    return np.clip(q, -127, 127).astype(np.int64), s


TILE = 8


def _rmsnorm(x, w, eps=1e-5):
    # Reductions run as a running sum over 8-element tiles, the order the
    # streaming hardware uses; this keeps every float bit-reproducible.
    ss = 0.0
    for i in range(0, x.size, TILE):
        ss += float(np.dot(x[i:i + TILE], x[i:i + TILE]))
    return x * w * (1.0 / math.sqrt(ss / x.size + eps))


def _softmax(z, m):
    e = np.exp(z - m)
    total = 0.0
    for i in range(0, e.size, TILE):
        total += float(e[i:i + TILE].sum())
    return e / total


def _lo(v):
    v = np.asarray(v, dtype=np.int64)
    mag = np.abs(v)
    pos = np.zeros_like(mag)
    nz = mag > 0
    pos[nz] = np.floor(np.log2(mag[nz])).astype(np.int64)
    return np.sign(v), pos


def _surrogate(q, keys):
    qs, qp = _lo(q)
    out = []
    for k in keys:
        ks, kp = _lo(k)
        out.append(sum(int(a * b) << int(c + d) for a, b, c, d in zip(qs, ks, qp, kp)))
    return np.array(out, dtype=np.int64)


def _topk(scores, k):
    if len(scores) <= k:
        return np.arange(len(scores))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return np.array(sorted(order[:k]))


def _rope(x, pos, base=10000.0):
    half = x.size // 2
    ang = pos * base ** (-np.arange(half) / half)
    a, b = x[:half], x[half:2 * half]
    out = x.copy()
    out[:half] = a * np.cos(ang) - b * np.sin(ang)
    out[half:2 * half] = a * np.sin(ang) + b * np.cos(ang)
    return out


def _act(u, kind):
    if kind == "relu2":
        return np.maximum(u, 0) ** 2
    if kind == "relu":
        return np.maximum(u, 0)
    return u / (1 + np.exp(-u))


def reference_generate(model: ToyModel, prompt, cfg: RunConfig | None = None, record: dict | None = None):
    """Greedy tokens from the oracle; fills ``record`` like :func:`runtime.generate`."""
    cfg = cfg or RunConfig()
    spec = model.spec
    dk = spec.head_dim
    K = [[[] for _ in range(spec.kv_heads)] for _ in range(spec.layers)]
    V = [[[] for _ in range(spec.kv_heads)] for _ in range(spec.layers)]

    def rec(tok, layer, name, val):
        if record is not None:
            record[(tok, layer, name)] = np.array(val)

    def step(tok_id, tok, decode):
        pos = len(K[0][0])
        x = model.embedding[tok_id].astype(np.float64).copy()
        for li, W in enumerate(model.layers):
            hq, hs = _quant(_rmsnorm(x, W.attn_norm))
            rec(tok, li, "attn.in", hq[None, :])
            proj = {}
            for name in ("wq", "wk", "wv"):
                acc = W.__dict__[name].data.astype(np.int64) @ hq
                rec(tok, li, name, acc[None, :])
                proj[name] = acc / hs * W.scales[name]
            for g in range(spec.kv_heads):
                kh = proj["wk"][g * dk:(g + 1) * dk]
                if cfg.rope:
                    kh = _rope(kh, pos)
                K[li][g].append(_quant(kh))
                V[li][g].append(_quant(proj["wv"][g * dk:(g + 1) * dk]))
            lop = cfg.lop_enabled and (decode or cfg.lop_prefill)
            outs = []
            for h in range(spec.heads):
                g = h // spec.group_size
                qh = proj["wq"][h * dk:(h + 1) * dk]
                if cfg.rope:
                    qh = _rope(qh, pos)
                qq, qs = _quant(qh)
                keys = [kv[0] for kv in K[li][g]]
                if lop:
                    sc = _surrogate(qq, keys)
                    idx = _topk(list(sc), cfg.k)
                    rec(tok, li, f"h{h}.lop_scores", sc[idx])
                else:
                    idx = np.arange(len(keys))
                rec(tok, li, f"h{h}.idx", idx)
                kint = np.array([K[li][g][i][0] for i in idx])
                ksc = np.array([K[li][g][i][1] for i in idx])
                vint = np.array([V[li][g][i][0] for i in idx])
                vsc = np.array([V[li][g][i][1] for i in idx])
                s_int = kint @ qq
                rec(tok, li, f"h{h}.qk", s_int)
                z = s_int / (qs * ksc) / math.sqrt(dk)
                p = _softmax(z, cfg.unified_max)
                pq, ps = _quant(p / vsc)
                rec(tok, li, f"h{h}.p", pq[None, :])
                o = pq @ vint
                rec(tok, li, f"h{h}.sv", o)
                outs.append(o / ps)
            aq, as_ = _quant(np.concatenate(outs))
            rec(tok, li, "wo.in", aq[None, :])
            o = W.wo.data.astype(np.int64) @ aq
            rec(tok, li, "wo", o[None, :])
            x = x + o / as_ * W.scales["wo"]
            fq, fs = _quant(_rmsnorm(x, W.ffn_norm))
            rec(tok, li, "w_up.in", fq[None, :])
            up = W.w_up.data.astype(np.int64) @ fq
            rec(tok, li, "w_up", up[None, :])
            u = up / fs * W.scales["w_up"]
            a = _act(u, cfg.ffn_activation)
            if W.w_gate is not None:
                gt = W.w_gate.data.astype(np.int64) @ fq
                rec(tok, li, "w_gate", gt[None, :])
                a = _act(gt / fs * W.scales["w_gate"], cfg.ffn_activation) * u
            dq, ds = _quant(a)
            rec(tok, li, "w_down.in", dq[None, :])
            dn = W.w_down.data.astype(np.int64) @ dq
            rec(tok, li, "w_down", dn[None, :])
            x = x + dn / ds * W.scales["w_down"]
        return model.output_embedding @ _rmsnorm(x, model.final_norm)

    tokens = [int(t) for t in prompt]
    out = None
    for i, t in enumerate(tokens):
        out = step(t, i, False)
    for n in range(cfg.max_new_tokens):
        tokens.append(int(np.argmax(out)))
        if n < cfg.max_new_tokens - 1:
            out = step(tokens[-1], len(tokens) - 1, True)
    return tokens
