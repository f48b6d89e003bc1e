"""Independent reference implementations used as test oracles.

Nothing here imports the package's forward pass, metric or statistics code.
The forward oracle is a straight-line numpy float64 transformer that reads the
raw weight dict. The softmax and rank oracles use mpmath, and the
Mann-Whitney oracle enumerates every relabelling.
"""

from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np
from scipy.special import erf

mpmath.mp.dps = 50


def _np(t):
    return t.detach().cpu().double().numpy()


def _rms(x, w, eps):
    return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * w


def _ln(x, w, b, eps):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _inv_freq(cfg):
    hd = cfg.d_head
    inv = np.array([1.0 / cfg.rope_theta ** (2 * i / hd) for i in range(hd // 2)])
    rs = cfg.rope_scaling
    if rs and rs.get("rope_type", rs.get("type")) == "llama3":
        out = []
        lo_wl = rs["original_max_position_embeddings"] / rs["low_freq_factor"]
        hi_wl = rs["original_max_position_embeddings"] / rs["high_freq_factor"]
        for f in inv:
            wl = 2 * math.pi / f
            if wl < hi_wl:
                out.append(f)
            elif wl > lo_wl:
                out.append(f / rs["factor"])
            else:
                s = (rs["original_max_position_embeddings"] / wl - rs["low_freq_factor"]) / (
                    rs["high_freq_factor"] - rs["low_freq_factor"]
                )
                out.append((1 - s) * f / rs["factor"] + s * f)
        inv = np.array(out)
    return inv


def _rope(x, pos, inv):
    # x: [T, hd]; pairs (i, i + hd/2) rotate together
    half = x.shape[-1] // 2
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        ang = pos[t] * inv
        c, s = np.cos(ang), np.sin(ang)
        a, b = x[t, :half], x[t, half:]
        out[t, :half] = a * c - b * s
        out[t, half:] = b * c + a * s
    return out


class NumpyTransformer:
    """Float64 forward pass over a bundle's weights, with optional residual splices."""

    def __init__(self, bundle):
        self.cfg = bundle.config
        self.W = {k: _np(v) for k, v in bundle.weights.items()}

    def _norm(self, prefix, x):
        c = self.cfg
        if c.norm_kind == "layernorm":
            return _ln(x, self.W[prefix + ".weight"], self.W[prefix + ".bias"], c.norm_eps)
        return _rms(x, self.W[prefix + ".weight"], c.norm_eps)

    def _lin(self, prefix, x):
        y = x @ self.W[prefix + ".weight"].T
        b = self.W.get(prefix + ".bias")
        return y if b is None else y + b

    def residuals(self, tokens, mask=None, splices=None, upto=None):
        """Return the list of resid_pre arrays per layer and the final logits.

        ``splices`` maps (layer, position) -> vector. The vector replaces the
        residual entering that layer at that position.
        """
        c, W = self.cfg, self.W
        T = len(tokens)
        mask = [True] * T if mask is None else [bool(m) for m in mask]
        pos, k = [], -1
        for m in mask:
            k += int(m)
            pos.append(max(k, 0))
        x = W["model.embed_tokens.weight"][list(tokens)].copy()
        if c.position_encoding == "learned":
            x = x + W["model.embed_positions.weight"][pos]
        inv = _inv_freq(c) if c.position_encoding == "rotary" else None
        hd, rep = c.d_head, c.n_heads // c.n_kv_heads
        trace = []
        for l in range(c.n_layers):
            for (sl, sp), vec in (splices or {}).items():
                if sl == l:
                    x[sp] = np.asarray(vec, dtype=float)
            trace.append(x.copy())
            p = f"model.layers.{l}"
            h = self._norm(p + ".input_layernorm", x)
            q = self._lin(p + ".self_attn.q_proj", h)
            kk = self._lin(p + ".self_attn.k_proj", h)
            v = self._lin(p + ".self_attn.v_proj", h)
            heads = []
            for hi in range(c.n_heads):
                g = hi // rep
                qh = q[:, hi * hd:(hi + 1) * hd]
                kh = kk[:, g * hd:(g + 1) * hd]
                vh = v[:, g * hd:(g + 1) * hd]
                if inv is not None:
                    qh, kh = _rope(qh, pos, inv), _rope(kh, pos, inv)
                o = np.zeros((T, hd))
                for i in range(T):
                    keys = [j for j in range(i + 1) if mask[j] or j == i]
                    s = np.array([qh[i] @ kh[j] for j in keys]) / math.sqrt(hd)
                    w = np.exp(s - s.max())
                    w /= w.sum()
                    o[i] = w @ vh[keys]
                heads.append(o)
            x = x + self._lin(p + ".self_attn.o_proj", np.concatenate(heads, axis=1))
            h = self._norm(p + ".post_attention_layernorm", x)
            if c.mlp_kind == "gated_silu":
                g = self._lin(p + ".mlp.gate_proj", h)
                m = g / (1 + np.exp(-g)) * self._lin(p + ".mlp.up_proj", h)
            else:
                u = self._lin(p + ".mlp.up_proj", h)
                m = 0.5 * u * (1 + erf(u / math.sqrt(2)))
            x = x + self._lin(p + ".mlp.down_proj", m)
        final = self._norm("model.norm", x[-1])
        U = W["model.embed_tokens.weight"] if c.tie_embeddings else W["lm_head.weight"]
        return trace, U @ final

    def logits(self, tokens, mask=None, splices=None):
        return self.residuals(tokens, mask, splices)[1]


def naive_log_softmax(logits):
    """Log-softmax in 50-digit arithmetic, returned as float64."""
    xs = [mpmath.mpf(float(v)) for v in np.asarray(logits, dtype=float)]
    lse = mpmath.log(mpmath.fsum(mpmath.exp(x) for x in xs))
    return np.array([float(x - lse) for x in xs])


def naive_score(logits, pos_ids, neg_ids):
    lp = naive_log_softmax(logits)
    return float(np.mean([lp[i] for i in pos_ids]) - np.mean([lp[j] for j in neg_ids]))


def pairwise_u(a, b):
    return sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)


def mw_enumerated_p(a, b):
    """P(U >= observed) over every split of the pooled values into groups of sizes |a|, |b|."""
    pooled = list(a) + list(b)
    n1 = len(a)
    obs = pairwise_u(a, b)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), n1):
        chosen = set(idx)
        ga = [pooled[i] for i in idx]
        gb = [pooled[i] for i in range(len(pooled)) if i not in chosen]
        total += 1
        hits += pairwise_u(ga, gb) >= obs - 1e-12
    return hits / total


def naive_ranks(xs):
    """Average ranks by direct counting (1-based)."""
    return [sum(1 for y in xs if y < x) + (sum(1 for y in xs if y == x) + 1) / 2 for x in xs]


def spearman_oracle(xs, ys):
    """Pearson correlation of naive ranks in 50-digit arithmetic, with a t-based two-sided p."""
    rx = [mpmath.mpf(r) for r in naive_ranks(xs)]
    ry = [mpmath.mpf(r) for r in naive_ranks(ys)]
    n = len(rx)
    mx, my = mpmath.fsum(rx) / n, mpmath.fsum(ry) / n
    sxy = mpmath.fsum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = mpmath.fsum((a - mx) ** 2 for a in rx)
    syy = mpmath.fsum((b - my) ** 2 for b in ry)
    rho = sxy / mpmath.sqrt(sxx * syy)
    if abs(rho) == 1:
        return float(rho), 0.0
    df = n - 2
    t2 = rho**2 * df / (1 - rho**2)
    # two-sided tail of Student t via the regularized incomplete beta function
    p = mpmath.betainc(df / mpmath.mpf(2), mpmath.mpf(1) / 2, 0, df / (df + t2), regularized=True)
    return float(rho), float(p)
