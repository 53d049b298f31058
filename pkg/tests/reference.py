"""Plain-numpy re-derivation of the velocity model, used as a test oracle.

Written directly from the block definitions with explicit rotation matrices,
sharing no code with the package's forward pass.
"""

import numpy as np


def rotation_matrix(head_dim, pos, base=10000.0):
    R = np.eye(head_dim)
    quarter = head_dim // 4
    for axis in range(2):
        for k in range(quarter):
            theta = pos[axis] * base ** (-2.0 * k / (head_dim / 2))
            slot = axis * quarter + k
            i, j = 2 * slot, 2 * slot + 1
            c, s = np.cos(theta), np.sin(theta)
            # acts on column vectors: [x0, x1] -> [x0 c - x1 s, x0 s + x1 c]
            R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def layer_norm(x, g=None, b=None, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if g is not None:
        y = y * g + b
    return y


def silu(x):
    return x / (1 + np.exp(-x))


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def lin(P, name, x, lora=None):
    y = x @ P[name + ".weight"].T + P[name + ".bias"]
    if lora and name in lora[0]:
        A, B = lora[0][name]
        y = y + lora[1] * (x @ A.T @ B.T)
    return y


def softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def attention(P, cfg, i, h, positions, lora=None):
    L, d = h.shape
    H, hd = cfg.heads, cfg.d // cfg.heads
    pre = f"blocks.{i}.attn."
    q, k, v = (lin(P, pre + n, h, lora) for n in "qkv")
    out = np.zeros((L, d))
    weights = []
    for head in range(H):
        sl = slice(head * hd, (head + 1) * hd)
        qr = np.stack([rotation_matrix(hd, positions[a], cfg.rope_base) @ q[a, sl] for a in range(L)])
        kr = np.stack([rotation_matrix(hd, positions[a], cfg.rope_base) @ k[a, sl] for a in range(L)])
        A = softmax(qr @ kr.T / np.sqrt(hd))
        weights.append(A)
        out[:, sl] = A @ v[:, sl]
    return lin(P, pre + "o", out, lora), weights


def block(P, cfg, i, x, cond, positions, lora=None):
    d = cfg.d
    mod = lin(P, f"blocks.{i}.adaln", silu(cond), lora)
    sa, ca, ga, sm, cm, gm = (mod[j * d : (j + 1) * d] for j in range(6))
    h = layer_norm(x, P[f"blocks.{i}.norm1.weight"], P[f"blocks.{i}.norm1.bias"]) * (1 + ca) + sa
    x = x + ga * attention(P, cfg, i, h, positions, lora)[0]
    h = layer_norm(x, P[f"blocks.{i}.norm2.weight"], P[f"blocks.{i}.norm2.bias"]) * (1 + cm) + sm
    h = lin(P, f"blocks.{i}.mlp.fc2", gelu(lin(P, f"blocks.{i}.mlp.fc1", h, lora)), lora)
    return x + gm * h


def time_features(t, d):
    half = d // 2
    out = np.zeros(d)
    for k in range(half):
        f = np.exp(-np.log(10000.0) * k / half)
        out[k] = np.cos(1000 * t * f)
        out[half + k] = np.sin(1000 * t * f)
    return out


def forward(P, cfg, z, zpos, t, c, cpos, ids, lora=None):
    """Single-sample velocity; ``P`` maps names to float64 arrays."""
    x = np.concatenate([lin(P, "embed_in", z), lin(P, "embed_in", c), P["text_embed.weight"][ids]])
    positions = np.concatenate([zpos, cpos, np.zeros((len(ids), 2), dtype=int)])
    temb = lin(P, "time_mlp.2", silu(lin(P, "time_mlp.0", time_features(t, cfg.d))))
    for i in range(cfg.depth):
        x = block(P, cfg, i, x, temb, positions, lora)
    mod = lin(P, "final.adaln", silu(temb))
    shift, scale = mod[: cfg.d], mod[cfg.d :]
    h = layer_norm(x[: len(z)]) * (1 + scale) + shift
    return lin(P, "final.proj", h)
