"""Independent numpy re-derivations used as test oracles.

Nothing here imports the package's math: attention is written per head with
explicit loops, layer norm and GELU from their definitions, and the model
forward is composed step by step from raw weight arrays.
"""

import math

import numpy as np

_erf = np.vectorize(math.erf)


def layer_norm(x, w, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def attention(h, qkv_w, qkv_b, proj_w, proj_b, heads, prompt=None):
    """Single sequence ``h (L, D)``; ``prompt (L_p, D)`` halves join keys/values before projection."""
    L, D = h.shape
    dh = D // heads
    wq, wk, wv = qkv_w[:D], qkv_w[D:2 * D], qkv_w[2 * D:]
    bq, bk, bv = qkv_b[:D], qkv_b[D:2 * D], qkv_b[2 * D:]
    if prompt is not None and len(prompt):
        half = len(prompt) // 2
        k_in = np.concatenate([prompt[:half], h])
        v_in = np.concatenate([prompt[half:], h])
    else:
        k_in = v_in = h
    Q = h @ wq.T + bq
    K = k_in @ wk.T + bk
    V = v_in @ wv.T + bv
    out = np.zeros((L, D))
    for head in range(heads):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(L):
            scores = np.array([Q[i, sl] @ K[j, sl] for j in range(len(K))]) / math.sqrt(dh)
            a = softmax(scores)
            out[i, sl] = sum(a[j] * V[j, sl] for j in range(len(V)))
    return out @ proj_w.T + proj_b


def adapter(x, down_w, down_b, up_w, up_b):
    return gelu(x @ down_w.T + down_b) @ up_w.T + up_b


def block(h, W, prefix, heads, p_t=None, p_s=None, temporal=True, spatial_adapter=True,
          temporal_embed=None, feedforward=True):
    """One adapted block on ``h (T, P, D)``; ``W`` is a flat dict of numpy weights."""
    T, P, D = h.shape
    attn = lambda x, p: attention(x, W[f"{prefix}attn.qkv.weight"], W[f"{prefix}attn.qkv.bias"],  # noqa: E731
                                  W[f"{prefix}attn.proj.weight"], W[f"{prefix}attn.proj.bias"], heads, p)
    ln1 = lambda x: layer_norm(x, W[f"{prefix}norm1.weight"], W[f"{prefix}norm1.bias"])  # noqa: E731
    h = h.copy()
    if temporal:
        out = h.copy()
        for p in range(P):
            seq = ln1(h[:, p])
            if temporal_embed is not None:
                seq = seq + temporal_embed
            out[:, p] = h[:, p] + adapter(attn(seq, p_t), *W["adT"])
        h = out
    out = h.copy()
    for t in range(T):
        a = attn(ln1(h[t]), p_s)
        out[t] = h[t] + (adapter(a, *W["adS"]) if spatial_adapter else a)
    h = out
    if feedforward:
        y = layer_norm(h, W[f"{prefix}norm2.weight"], W[f"{prefix}norm2.bias"])
        h = h + gelu(y @ W[f"{prefix}fc1.weight"].T + W[f"{prefix}fc1.bias"]) @ W[f"{prefix}fc2.weight"].T + W[f"{prefix}fc2.bias"]
    return h


def patch_embed(clip, W, patch):
    """``clip (T, H, W, C)`` -> ``(T, N + 1, D)`` tokens, patches in row-major order."""
    T, H, Wd, C = clip.shape
    rows = []
    for t in range(T):
        toks = [W["backbone/cls_token"]]
        for i in range(H // patch):
            for j in range(Wd // patch):
                piece = clip[t, i * patch:(i + 1) * patch, j * patch:(j + 1) * patch, :].reshape(-1)
                toks.append(piece @ W["backbone/patch_proj.weight"].T + W["backbone/patch_proj.bias"])
        rows.append(np.stack(toks) + W["backbone/pos_embed"])
    return np.stack(rows)


def forward(clip, arrays, cfg, task, class_mask=None, ablate=None):
    """Logits for one clip from the checkpoint-style arrays of a model."""
    m = cfg.model
    h = patch_embed(clip, arrays, m.patch)
    te = arrays.get("backbone/temporal_embed")
    for layer in range(1, m.blocks + 1):
        prefix = f"backbone/blocks.{layer - 1}."
        W = dict(arrays)
        W["adT"] = [arrays[f"adapter/{layer}/T/{n}"] for n in ("down.weight", "down.bias", "up.weight", "up.bias")]
        W["adS"] = [arrays[f"adapter/{layer}/S/{n}"] for n in ("down.weight", "down.bias", "up.weight", "up.bias")]
        p_t = p_s = None
        ga, gb = cfg.prompts.agnostic_layers
        ea, eb = cfg.prompts.specific_layers
        if ga <= layer <= gb and ablate not in ("agnostic-prefix", "all-prefixes") and f"prompt/g_T/{layer}" in arrays:
            p_t, p_s = arrays[f"prompt/g_T/{layer}"], arrays[f"prompt/g_S/{layer}"]
        elif ea <= layer <= eb and ablate != "all-prefixes" and task is not None and f"prompt/e_T/{task}/{layer}" in arrays:
            p_t, p_s = arrays[f"prompt/e_T/{task}/{layer}"], arrays[f"prompt/e_S/{task}/{layer}"]
        h = block(h, W, prefix, m.heads, p_t, p_s,
                  temporal=ablate not in ("temporal-adapter", "all-adapters"),
                  spatial_adapter=ablate != "all-adapters", temporal_embed=te, feedforward=m.feedforward)
    h = layer_norm(h, arrays["backbone/norm.weight"], arrays["backbone/norm.bias"])
    feat = h[:, 0].mean(axis=0)
    n_tasks = sum(1 for k in arrays if k.startswith("key/"))
    Wh = np.concatenate([arrays[f"head/{t}/weight"] for t in range(1, n_tasks + 1)])
    bh = np.concatenate([arrays[f"head/{t}/bias"] for t in range(1, n_tasks + 1)])
    logits = Wh @ feat + bh
    if class_mask is not None:
        keep = np.zeros(len(logits), bool)
        keep[list(class_mask)] = True
        logits = np.where(keep, logits, -np.inf)
    return logits


def cosine_distance(q, k):
    return 1.0 - float(np.dot(q, k) / (math.sqrt(np.dot(q, q)) * math.sqrt(np.dot(k, k))))


def match_loss_scalar(d, t, tau):
    """``-log softmax(-d / tau)[t]`` over the first ``t`` distances via a shifted log-sum-exp."""
    z = [-d[i] / tau for i in range(t)]
    top = max(z)
    return top + math.log(sum(math.exp(v - top) for v in z)) - z[t - 1]


def brute_force_select(q, keys):
    best, best_d = None, math.inf
    for i, k in enumerate(keys):
        d = cosine_distance(q, k)
        if d < best_d:
            best, best_d = i + 1, d
    return best


def acc_bwf(R):
    """Metric formulas evaluated by hand loops."""
    N = len(R)
    acc = sum(R[N - 1][i] for i in range(N)) / N
    bwf = sum(R[i][i] - R[N - 1][i] for i in range(N - 1)) / (N - 1)
    return acc, bwf
