"""Scalar-loop reference implementations used as independent test oracles.

Everything here is written with explicit Python loops over positions,
heads, and channels, in float64 numpy, trading speed for obviousness.
The ``p_*`` helpers pull weights out of torch modules so a module and its
oracle can be evaluated on the same parameters.
"""

import math

import numpy as np


def to_np(tensor):
    return tensor.detach().cpu().numpy().astype(np.float64)


def p_linear(mod):
    return to_np(mod.weight), to_np(mod.bias)


def p_norm(mod):
    return to_np(mod.weight), to_np(mod.bias)


def p_mha(mod):
    return {
        "wq": to_np(mod.q_proj.weight), "bq": to_np(mod.q_proj.bias),
        "wk": to_np(mod.k_proj.weight), "bk": to_np(mod.k_proj.bias),
        "wv": to_np(mod.v_proj.weight), "bv": to_np(mod.v_proj.bias),
        "wo": to_np(mod.out_proj.weight), "bo": to_np(mod.out_proj.bias),
        "heads": mod.num_heads,
    }


def p_ffn(mod):
    return {
        "w1": to_np(mod.inner.weight), "b1": to_np(mod.inner.bias),
        "w2": to_np(mod.outer.weight), "b2": to_np(mod.outer.bias),
    }


def linear(w, b, x):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        acc = b[i]
        for j in range(w.shape[1]):
            acc += w[i, j] * x[j]
        out[i] = acc
    return out


def relu(x):
    return np.array([v if v > 0.0 else 0.0 for v in x])


def softmax(x):
    m = max(x)
    exps = np.array([math.exp(v - m) for v in x])
    return exps / exps.sum()


def layer_norm(gamma, beta, x, eps=1e-5):
    mean = sum(x) / len(x)
    var = sum((v - mean) ** 2 for v in x) / len(x)
    return np.array(
        [gamma[i] * (x[i] - mean) / math.sqrt(var + eps) + beta[i] for i in range(len(x))]
    )


def ffn(params, x):
    return linear(params["w2"], params["b2"], relu(linear(params["w1"], params["b1"], x)))


def attention(params, query, key, value, blocked=None):
    """Single-example multi-head attention.

    query (Lq, d), key/value (Lk, d), blocked (Lq, Lk) bool or None.
    Returns (out (Lq, d), head-averaged probs (Lq, Lk)).
    """
    heads = params["heads"]
    lq, d = query.shape
    lk = key.shape[0]
    dh = d // heads
    q = np.stack([linear(params["wq"], params["bq"], query[i]) for i in range(lq)])
    k = np.stack([linear(params["wk"], params["bk"], key[i]) for i in range(lk)])
    v = np.stack([linear(params["wv"], params["bv"], value[i]) for i in range(lk)])

    context = np.zeros((lq, d))
    mean_probs = np.zeros((lq, lk))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(lq):
            if blocked is not None and all(blocked[i]):
                continue  # dead query: context stays zero
            scores = []
            for j in range(lk):
                if blocked is not None and blocked[i][j]:
                    scores.append(-math.inf)
                else:
                    scores.append(float(np.dot(q[i, sl], k[j, sl])) / math.sqrt(dh))
            probs = softmax(scores)
            mean_probs[i] += probs / heads
            for j in range(lk):
                context[i, sl] += probs[j] * v[j, sl]

    out = np.stack([linear(params["wo"], params["bo"], context[i]) for i in range(lq)])
    if blocked is not None:
        for i in range(lq):
            if all(blocked[i]):
                out[i] = 0.0
    return out, mean_probs


def init_node(tokens, pad):
    """Masked mean over (L, d) token states; all-pad gives zeros."""
    d = tokens.shape[1]
    total = np.zeros(d)
    count = 0
    for i in range(tokens.shape[0]):
        if not pad[i]:
            total += tokens[i]
            count += 1
    return total / count if count else total


def target_centered(att_params, score_params, refs, target, ref_pad):
    """Target-conditioned reference weights; returns (beta, weighted states)."""
    n_refs = refs.shape[0]
    blocked = np.array([[ref_pad[j] for j in range(n_refs)] for _ in range(n_refs)])
    mixed, _ = attention(att_params, refs, refs, refs, blocked)
    logits = []
    for i in range(n_refs):
        dot = float(np.dot(refs[i], target))
        logits.append(-math.inf if ref_pad[i] else float(ffn(score_params, np.array([dot]))[0]))
    beta = softmax(logits)
    weighted = np.stack([beta[i] * mixed[i] for i in range(n_refs)])
    return beta, weighted


def source_fusion(reduce_w, reduce_b, norm_merge, ffn_params, norm_ffn, residual, sources):
    """concat -> linear -> residual + LN -> FFN sublayer with LN."""
    concat = np.concatenate(sources)
    x = layer_norm(norm_merge[0], norm_merge[1], residual + linear(reduce_w, reduce_b, concat))
    return layer_norm(norm_ffn[0], norm_ffn[1], x + ffn(ffn_params, x))


def word_fusion(ffn_params, token_state, node):
    return ffn(ffn_params, token_state + node)


def hier_decoder_layer(mods, g, keys, keys_pad, target, target_pad, refs, refs_pad):
    """Eq. 5-7 path of one hierarchical decoder layer (single example).

    ``mods`` is the torch layer; g (Lg, d) is the post-embedding input.
    Returns (g_out, c_key, c_tgt, c_ref).
    """
    lg = g.shape[0]
    causal = np.array([[j > i for j in range(lg)] for i in range(lg)])
    self_out, _ = attention(p_mha(mods.self_attn), g, g, g, causal)
    g1 = np.stack([
        layer_norm(*p_norm(mods.self_norm), g[i] + self_out[i]) for i in range(lg)
    ])
    key_blocked = np.array([[keys_pad[j] for j in range(len(keys_pad))] for _ in range(lg)])
    c_key, _ = attention(p_mha(mods.key_attn), g1, keys, keys, key_blocked)
    tgt_blocked = np.array([[target_pad[j] for j in range(len(target_pad))] for _ in range(lg)])
    c_tgt, _ = attention(p_mha(mods.tgt_attn), c_key, target, target, tgt_blocked)
    ref_blocked = np.array([[refs_pad[j] for j in range(len(refs_pad))] for _ in range(lg)])
    c_ref, _ = attention(p_mha(mods.ref_attn), c_key, refs, refs, ref_blocked)
    fuse_w, fuse_b = p_linear(mods.fuse)
    g2 = np.stack([
        layer_norm(*p_norm(mods.fuse_norm),
                   g1[i] + linear(fuse_w, fuse_b, np.concatenate([c_key[i], c_tgt[i], c_ref[i]])))
        for i in range(lg)
    ])
    g3 = np.stack([
        layer_norm(*p_norm(mods.ffn_norm), g2[i] + ffn(p_ffn(mods.ffn), g2[i]))
        for i in range(lg)
    ])
    return g3, c_key, c_tgt, c_ref


def local_match(conv_w, conv_b, head_params, summary, tokens, pad):
    """Conv over [summary; token] pairs, masked max-pool, FFN head, sigmoid."""
    length, d = tokens.shape
    pairs = np.zeros((length, 2 * d))
    for t in range(length):
        pairs[t, :d] = summary
        pairs[t, d:] = 0.0 if pad[t] else tokens[t]
    out_ch = conv_w.shape[0]
    conv = np.zeros((length, out_ch))
    for t in range(length):
        for c in range(out_ch):
            acc = conv_b[c]
            for k in range(3):
                src = t + k - 1
                if 0 <= src < length:
                    for cin in range(2 * d):
                        acc += conv_w[c, cin, k] * pairs[src, cin]
            conv[t, c] = max(acc, 0.0)
    if all(pad):
        return 0.5
    pooled = np.array([max(conv[t, c] for t in range(length) if not pad[t]) for c in range(out_ch)])
    logit = ffn(head_params, pooled)[0]
    return 1.0 / (1.0 + math.exp(-logit))


def global_match(head_params, summary, nodes, node_pad):
    pooled = init_node(nodes, node_pad)
    logit = ffn(head_params, np.concatenate([summary, pooled]))[0]
    return 1.0 / (1.0 + math.exp(-logit))


def log_softmax(x):
    m = max(x)
    lse = m + math.log(sum(math.exp(v - m) for v in x))
    return np.array([v - lse for v in x])


def label_smoothed_nll(logits, targets, eps, pad_id=0):
    """Mean over non-pad steps; smoothing mass spread over non-pad vocab."""
    vocab = logits.shape[1]
    losses = []
    for t in range(len(targets)):
        if targets[t] == pad_id:
            continue
        lp = log_softmax(logits[t])
        loss = 0.0
        for v in range(vocab):
            if v == pad_id:
                continue
            q = eps / (vocab - 1)
            if v == targets[t]:
                q += 1.0 - eps
            loss -= q * lp[v]
        losses.append(loss)
    return sum(losses) / len(losses) if losses else 0.0


def local_loss(pos_scores, neg_scores):
    mean_pos = sum(math.log(p) for p in pos_scores) / len(pos_scores)
    mean_neg = sum(math.log(1.0 - n) for n in neg_scores) / len(neg_scores)
    return -(mean_pos + mean_neg)


def global_loss(pos_scores, neg_scores):
    return -(sum(math.log(p) for p in pos_scores) / len(pos_scores)
             + sum(math.log(1.0 - n) for n in neg_scores) / len(neg_scores))


def total_loss(l_s, l_local, l_global):
    return l_s + l_local + l_global


def _bf_counts(units):
    counts = {}
    for u in units:
        counts[u] = counts.get(u, 0) + 1
    return counts


def _bf_prf(cand_units, ref_units):
    cand_counts = _bf_counts(cand_units)
    ref_counts = _bf_counts(ref_units)
    overlap = 0
    for unit, c in cand_counts.items():
        overlap += min(c, ref_counts.get(unit, 0))
    p = overlap / len(cand_units) if cand_units else 0.0
    r = overlap / len(ref_units) if ref_units else 0.0
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def bf_ngram_score(cand, ref, n):
    """Clipped n-gram P/R/F by explicit unit enumeration."""
    if not ref:
        return 0.0, 0.0, 0.0
    cand_units = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
    ref_units = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    return _bf_prf(cand_units, ref_units)


def bf_lcs_score(cand, ref):
    """LCS P/R/F with the LCS found by enumerating all 2^n subsequences."""
    if not ref:
        return 0.0, 0.0, 0.0

    def is_subsequence(sub, seq):
        it = iter(seq)
        return all(any(tok == other for other in it) for tok in sub)

    best = 0
    for mask in range(1 << len(cand)):
        sub = [cand[i] for i in range(len(cand)) if mask >> i & 1]
        if len(sub) > best and is_subsequence(sub, ref):
            best = len(sub)
    p = best / len(cand) if cand else 0.0
    r = best / len(ref)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def bf_su4_score(cand, ref, skip=4):
    """Skip-bigram-with-unigram P/R/F by explicit unit enumeration."""
    if not ref:
        return 0.0, 0.0, 0.0

    def units(tokens):
        out = [(t,) for t in tokens]
        for i in range(len(tokens)):
            for j in range(i + 1, len(tokens)):
                if j - i <= skip + 1:
                    out.append((tokens[i], tokens[j]))
        return out

    return _bf_prf(units(cand), units(ref))
