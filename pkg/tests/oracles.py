"""
Independent reference computations used by the tests. Nothing here imports
the package's model code; weights are read straight from the checkpoint bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np
from scipy.special import erf


def read_dten(path):
    buf = Path(path).read_bytes()
    rank = buf[6]
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    return np.frombuffer(buf, "<f4", offset=7 + 4 * rank).reshape(shape).astype(np.float64)


def load_weights(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    return manifest["cfg"], {n: read_dten(ckpt_dir / f"{n}.dten") for n in manifest["tensors"]}


def layer_norm(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def bilinear(grid, out):
    """Resample (g, g, D) to (out, out, D); half-pixel centres, edge clamped."""
    g = grid.shape[0]
    res = np.zeros((out, out, grid.shape[2]))
    for i in range(out):
        for j in range(out):
            y = max((i + 0.5) * g / out - 0.5, 0.0)
            x = max((j + 0.5) * g / out - 0.5, 0.0)
            y0, x0 = min(int(np.floor(y)), g - 1), min(int(np.floor(x)), g - 1)
            y1, x1 = min(y0 + 1, g - 1), min(x0 + 1, g - 1)
            wy, wx = y - y0, x - x0
            res[i, j] = (
                grid[y0, x0] * (1 - wy) * (1 - wx)
                + grid[y0, x1] * (1 - wy) * wx
                + grid[y1, x0] * wy * (1 - wx)
                + grid[y1, x1] * wy * wx
            )
    return res


def vit_facets(cfg, W, x):
    """Brute-force forward; returns {layer: {"q","k","v","t","A"}} in float64."""
    x = (np.asarray(x, np.float64) - cfg["input_mean"]) / cfg["input_std"]
    B = x.shape[0]
    p, s, D, H = cfg["patch"], cfg["stride"], cfg["dim"], cfg["heads"]
    g = (cfg["image_side"] - p) // s + 1
    wpe = W["patch_embed.weight"].reshape(D, -1)
    patches = []
    for i in range(g):
        for j in range(g):
            win = x[:, :, i * s : i * s + p, j * s : j * s + p].reshape(B, -1)
            patches.append(win @ wpe.T + W["patch_embed.bias"])
    patches = np.stack(patches, axis=1)
    pos = W["pos_embed"][0]
    base = int(round(np.sqrt(pos.shape[0] - 1)))
    ppos = pos[1:]
    if base != g:
        ppos = bilinear(ppos.reshape(base, base, D), g).reshape(g * g, D)
    cls = np.broadcast_to(W["cls_token"][0] + pos[:1], (B, 1, D))
    t = np.concatenate([cls, patches + ppos], axis=1)
    out = {}
    hd = D // H
    for l in range(cfg["depth"]):
        pre = f"blocks.{l}."
        h = layer_norm(t, W[pre + "norm1.weight"], W[pre + "norm1.bias"])
        qkv = h @ W[pre + "attn.qkv.weight"].T + W[pre + "attn.qkv.bias"]
        q, k, v = qkv[..., :D], qkv[..., D : 2 * D], qkv[..., 2 * D :]
        heads_out = np.zeros_like(q)
        A = np.zeros((B, H, t.shape[1], t.shape[1]))
        for hh in range(H):
            sl = slice(hh * hd, (hh + 1) * hd)
            logits = q[..., sl] @ np.swapaxes(k[..., sl], 1, 2) / np.sqrt(hd)
            logits -= logits.max(-1, keepdims=True)
            e = np.exp(logits)
            A[:, hh] = e / e.sum(-1, keepdims=True)
            heads_out[..., sl] = A[:, hh] @ v[..., sl]
        t = t + heads_out @ W[pre + "attn.proj.weight"].T + W[pre + "attn.proj.bias"]
        h2 = layer_norm(t, W[pre + "norm2.weight"], W[pre + "norm2.bias"])
        z = h2 @ W[pre + "fc1.weight"].T + W[pre + "fc1.bias"]
        z = 0.5 * z * (1 + erf(z / np.sqrt(2)))
        t = t + z @ W[pre + "fc2.weight"].T + W[pre + "fc2.bias"]
        out[l + 1] = {"q": q, "k": k, "v": v, "t": t.copy(), "A": A}
    return out


def scalar_cosine(a, b):
    """Plain-Python cosine over flat sequences."""
    dot = sum(x * y for x, y in zip(a, b))
    na = sum(x * x for x in a) ** 0.5
    nb = sum(y * y for y in b) ** 0.5
    return dot / (na * nb)


def central_difference(f, x, coords, h):
    """Central finite differences of scalar f at the given flat coordinates (float64)."""
    x = np.array(x, np.float64)
    flat = x.reshape(-1)
    grads = []
    for c in coords:
        old = flat[c]
        flat[c] = old + h
        fp = f(x)
        flat[c] = old - h
        fm = f(x)
        flat[c] = old
        grads.append((fp - fm) / (2 * h))
    return np.array(grads)


def jacobi_eigenvalues(M, sweeps=100, tol=1e-14):
    """Cyclic Jacobi rotations for a small symmetric matrix."""
    A = np.array(M, np.float64)
    n = A.shape[0]
    for _ in range(sweeps):
        off = np.sqrt((A**2).sum() - (np.diag(A) ** 2).sum())
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t**2 + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]


def ifgsm(model, x, labels, epsilon, steps, alpha):
    """Minimal iterative FGSM: x <- clip_eps(x + alpha * sign(grad))."""
    import torch
    import torch.nn.functional as F

    x0 = x.detach()
    adv = x0.clone()
    for _ in range(steps):
        adv.requires_grad_(True)
        loss = F.cross_entropy(model(adv), labels)
        loss.backward()
        with torch.no_grad():
            adv = adv + alpha * adv.grad.sign()
            adv = torch.clamp(adv, x0 - epsilon, x0 + epsilon).clamp(0, 1)
    return adv.detach()
