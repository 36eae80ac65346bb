"""Independent reference implementations used as test oracles.

Everything here is deliberately written against plain numpy (no nanonet
tensor ops, no kernel backends) so that agreement with the package is a
genuine two-route check and not self-confirmation.
"""

import math

import numpy as np
from scipy.special import erf


def ref_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    return e / denom


def ref_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def ref_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    out = xhat * gain
    if bias is not None:
        out = out + bias
    return out


def ref_rope(x, positions, theta):
    t, d = x.shape
    half = d // 2
    inv_freq = theta ** (-2.0 * np.arange(half) / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    y = np.empty_like(x)
    y[:, 0::2] = x[:, 0::2] * cos - x[:, 1::2] * sin
    y[:, 1::2] = x[:, 0::2] * sin + x[:, 1::2] * cos
    return y


def padded_window_mask(length, pad_to, kind):
    """Additive mask for one padded sequence: rows/cols past `length` are
    invalid, and local kinds restrict |i - j| < window."""
    mask = np.full((pad_to, pad_to), -np.inf)
    for i in range(length):
        for j in range(length):
            if kind.kind == "global" or abs(i - j) < kind.window_size:
                mask[i, j] = 0.0
    return mask


def padded_forward_reference(model, seqs):
    """Forward the encoder over sequences padded to a common length, one
    padding mask per sequence, entirely in numpy.

    Returns (per-layer hidden states as [n_seqs][layer][len x d], logits).
    """
    cfg = model.config
    arr = {name: p.tensor.data for name, p in model.params.items()}
    pad_to = max(len(s) for s in seqs)
    pad_id = 0  # arbitrary: padded positions are masked out of attention

    hidden_all = []
    logits = np.zeros((len(seqs), cfg.n_classes))
    for si, seq in enumerate(seqs):
        length = len(seq)
        ids = list(seq) + [pad_id] * (pad_to - length)
        h = arr["embedding.table"][ids]
        per_layer = [h[:length].copy()]
        for l, kind in enumerate(cfg.attention_schedule):
            p = f"layers.{l}"
            mask = padded_window_mask(length, pad_to, kind)
            normed = ref_layer_norm(
                h,
                arr[f"{p}.attn.norm_gain"],
                arr.get(f"{p}.attn.norm_bias") if cfg.norm_bias else None,
            )
            d_head = cfg.d_head
            positions = np.arange(pad_to)
            heads = []
            q_all = normed @ arr[f"{p}.attn.wq"] + arr[f"{p}.attn.bq"]
            k_all = normed @ arr[f"{p}.attn.wk"] + arr[f"{p}.attn.bk"]
            v_all = normed @ arr[f"{p}.attn.wv"] + arr[f"{p}.attn.bv"]
            for a in range(cfg.n_heads):
                lo, hi = a * d_head, (a + 1) * d_head
                q = ref_rope(q_all[:, lo:hi], positions, kind.rope_theta)
                k = ref_rope(k_all[:, lo:hi], positions, kind.rope_theta)
                scores = q @ k.T / math.sqrt(d_head) + mask
                heads.append(ref_softmax(scores) @ v_all[:, lo:hi])
            ao = np.concatenate(heads, axis=-1) @ arr[f"{p}.attn.wo"] + arr[f"{p}.attn.bo"]
            stream = h + ao
            normed2 = ref_layer_norm(
                stream,
                arr[f"{p}.ffn.norm_gain"],
                arr.get(f"{p}.ffn.norm_bias") if cfg.norm_bias else None,
            )
            u = normed2 @ arr[f"{p}.ffn.wf"] + arr[f"{p}.ffn.bf"]
            d_ff = cfg.d_ff
            m = (u[:, :d_ff] * ref_gelu(u[:, d_ff:])) @ arr[f"{p}.ffn.wp"] + arr[f"{p}.ffn.bp"]
            h = stream + m
            per_layer.append(h[:length].copy())
        hidden_all.append(per_layer)
        logits[si] = h[0] @ arr["head.w"] + arr["head.b"]
    return hidden_all, logits
