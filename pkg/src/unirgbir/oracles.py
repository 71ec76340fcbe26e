"""Loop-based float64 numpy references for the vectorized attention code.

These read weights out of the torch modules but share no computation with
them: every softmax, projection and bilinear sample is written out per query.
"""

from __future__ import annotations

import math

import numpy as np


def _np(t) -> np.ndarray:
    return t.detach().cpu().double().numpy()


def _linear(mod):
    return _np(mod.weight), _np(mod.bias)


def layer_norm(x: np.ndarray, weight, bias, eps: float) -> np.ndarray:
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * weight + bias
    return out


def softmax(logits) -> np.ndarray:
    top = max(logits)
    e = [math.exp(v - top) for v in logits]
    s = sum(e)
    return np.array([v / s for v in e])


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-head scaled dot-product attention, one query at a time."""
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    weights = np.zeros((q.shape[0], k.shape[0]))
    for i in range(q.shape[0]):
        logits = [float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(k.shape[0])]
        w = softmax(logits)
        weights[i] = w
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out, weights


def _gelu(x: np.ndarray) -> np.ndarray:
    return np.vectorize(lambda t: 0.5 * t * (1 + math.erf(t / math.sqrt(2))))(x)


def vit_block(block, x: np.ndarray) -> np.ndarray:
    """Reference for one pre-norm transformer block on (n, D) tokens."""
    n, d = x.shape
    heads = block.attn.heads
    dh = d // heads
    h = layer_norm(x, _np(block.norm1.weight), _np(block.norm1.bias), block.norm1.eps)
    wqkv, bqkv = _linear(block.attn.qkv)
    qkv = h @ wqkv.T + bqkv
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    attn_out = np.zeros((n, d))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        attn_out[:, sl] = attention(q[:, sl], k[:, sl], v[:, sl])[0]
    wp, bp = _linear(block.attn.proj)
    x = x + attn_out @ wp.T + bp
    h = layer_norm(x, _np(block.norm2.weight), _np(block.norm2.bias), block.norm2.eps)
    w1, b1 = _linear(block.mlp.fc1)
    w2, b2 = _linear(block.mlp.fc2)
    return x + _gelu(h @ w1.T + b1) @ w2.T + b2


def bilinear(level: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample an (h, w, d) grid at normalized (x, y); cell centers at (j+0.5)/w."""
    h, w, d = level.shape
    px, py = x * w - 0.5, y * h - 0.5
    out = np.zeros(d)
    for yi in range(h):
        for xi in range(w):
            wx = max(0.0, 1.0 - abs(px - xi))
            wy = max(0.0, 1.0 - abs(py - yi))
            if wx * wy > 0:
                out += wx * wy * level[yi, xi]
    return out


def cross_attend(cross, vit_tokens: np.ndarray, grid: tuple[int, int],
                 mfp_tokens: np.ndarray, levels) -> np.ndarray:
    """Reference for ``CrossAttend`` (both attention kinds) on unbatched tokens."""
    from .sfi import DeformableAttention

    gh, gw = grid
    q_in = layer_norm(vit_tokens, _np(cross.query_norm.weight), _np(cross.query_norm.bias), cross.query_norm.eps)
    f_in = layer_norm(mfp_tokens, _np(cross.feat_norm.weight), _np(cross.feat_norm.bias), cross.feat_norm.eps)
    attn = cross.attn
    if isinstance(attn, DeformableAttention):
        return _deformable(attn, q_in, (gh, gw), f_in, levels)
    return _global(attn, q_in, f_in)


def _global(attn, q_in, f_in):
    d = q_in.shape[1]
    heads = attn.heads
    dh = d // heads
    wq, bq = _linear(attn.q_proj)
    wk, bk = _linear(attn.k_proj)
    wv, bv = _linear(attn.v_proj)
    q = q_in @ wq.T + bq
    k = f_in @ wk.T + bk
    v = f_in @ wv.T + bv
    out = np.zeros_like(q)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        out[:, sl] = attention(q[:, sl], k[:, sl], v[:, sl])[0]
    wo, bo = _linear(attn.output_proj)
    return out @ wo.T + bo


def _deformable(attn, q_in, grid, f_in, levels):
    gh, gw = grid
    d = q_in.shape[1]
    nh, nl, nk = attn.heads, attn.levels, attn.points
    dh = d // nh
    wv, bv = _linear(attn.value_proj)
    wo_, bo_ = _linear(attn.sampling_offsets)
    wa, ba = _linear(attn.attention_weights)
    wout, bout = _linear(attn.output_proj)
    value = f_in @ wv.T + bv
    maps, start = [], 0
    for h, w in levels:
        maps.append(value[start:start + h * w].reshape(h, w, d))
        start += h * w
    out = np.zeros((q_in.shape[0], d))
    for qi in range(q_in.shape[0]):
        rx = (qi % gw + 0.5) / gw
        ry = (qi // gw + 0.5) / gh
        offs = (wo_ @ q_in[qi] + bo_).reshape(nh, nl, nk, 2)
        logits = (wa @ q_in[qi] + ba).reshape(nh, nl * nk)
        for hd in range(nh):
            probs = softmax(list(logits[hd])).reshape(nl, nk)
            for lvl, (h, w) in enumerate(levels):
                sub = maps[lvl][:, :, hd * dh:(hd + 1) * dh]
                for k in range(nk):
                    sx = rx + offs[hd, lvl, k, 0] / w
                    sy = ry + offs[hd, lvl, k, 1] / h
                    out[qi, hd * dh:(hd + 1) * dh] += probs[lvl, k] * bilinear(sub, sx, sy)
    return out @ wout.T + bout


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy for (N, K) logits and (N,) labels."""
    total = 0.0
    for row, lab in zip(logits, labels):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[lab]
    return total / len(labels)


def class_scores(pred: np.ndarray, gt: np.ndarray, n_classes: int):
    """Per-class IoU/accuracy by direct pixel counting; None where gt lacks the class."""
    pred, gt = np.ravel(pred), np.ravel(gt)
    iou, acc = [], []
    for c in range(n_classes):
        in_gt = sum(1 for g in gt if g == c)
        if in_gt == 0:
            iou.append(None)
            acc.append(None)
            continue
        tp = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        union = sum(1 for p, g in zip(pred, gt) if p == c or g == c)
        iou.append(tp / union)
        acc.append(tp / in_gt)
    return iou, acc
