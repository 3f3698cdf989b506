"""Shared test oracles: finite differences, naive kernels, union-find labeling,
and an independently wired plain U-Net forward in raw numpy."""

from __future__ import annotations

import numpy as np
from scipy.signal import correlate2d

from irstkit.tensor import backward


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def fd_grad(build_loss, tensor, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar build_loss() w.r.t. selected entries."""
    grads = []
    for idx in indices:
        orig = tensor.values[idx]
        tensor.values[idx] = orig + h
        fp = build_loss().item()
        tensor.values[idx] = orig - h
        fm = build_loss().item()
        tensor.values[idx] = orig
        grads.append((fp - fm) / (2.0 * h))
    return np.array(grads)


def check_grad(build_loss, tensors, rng, samples_per_tensor=4, tol=1e-4, h=1e-5):
    """Assert reverse-mode grads match central differences on random entries."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "missing gradient"
        flat = [tuple(idx) for idx in np.ndindex(t.shape)]
        picks = [flat[i] for i in rng.choice(len(flat),
                 size=min(samples_per_tensor, len(flat)), replace=False)]
        numeric = fd_grad(build_loss, t, picks, h=h)
        analytic = np.array([t.grad[idx] for idx in picks])
        for a, n in zip(analytic, numeric):
            worst = max(worst, rel_err(a, n))
    assert worst < tol, f"gradient mismatch: worst relative error {worst:.3g}"
    return worst


def naive_conv2d(x, w, b, stride=1, padding=0):
    """Direct sliding-window summation."""
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[ni, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def naive_dft2(img: np.ndarray) -> np.ndarray:
    """O(N^2) double-loop 2-D DFT of one (H, W) array."""
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for ky in range(h):
        for kx in range(w):
            acc = 0.0 + 0.0j
            for y in range(h):
                for x in range(w):
                    acc += img[y, x] * np.exp(-2j * np.pi * (ky * y / h + kx * x / w))
            out[ky, kx] = acc
    return out


def union_find_components(mask: np.ndarray) -> list[set[tuple[int, int]]]:
    """8-connected components via union-find, independent of scipy."""
    h, w = mask.shape
    parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(p):
        while parent[p] != p:
            parent[p] = parent[parent[p]]
            p = parent[p]
        return p

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    pixels = [(r, c) for r in range(h) for c in range(w) if mask[r, c]]
    for p in pixels:
        parent[p] = p
    for r, c in pixels:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                q = (r + dr, c + dc)
                if q != (r, c) and q in parent:
                    union((r, c), q)
    groups: dict[tuple[int, int], set] = {}
    for p in pixels:
        groups.setdefault(find(p), set()).add(p)
    return list(groups.values())


# -- independently wired plain U-Net ------------------------------------------


def _ref_conv(x, w, b):
    """correlate2d-based convolution, 'same' padding, stride 1."""
    n, c, h, wd = x.shape
    c_out = w.shape[0]
    out = np.zeros((n, c_out, h, wd), dtype=np.float64)
    for ni in range(n):
        for o in range(c_out):
            acc = np.zeros((h, wd), dtype=np.float64)
            for ci in range(c):
                acc += correlate2d(x[ni, ci], w[o, ci], mode="same", boundary="fill")
            out[ni, o] = acc + b[o]
    return out


def _ref_bn_eval(x, gamma, beta, rm, rv, eps=1e-5):
    g = gamma.reshape(1, -1, 1, 1)
    bt = beta.reshape(1, -1, 1, 1)
    return g * (x - rm.reshape(1, -1, 1, 1)) / np.sqrt(rv.reshape(1, -1, 1, 1) + eps) + bt


def _ref_lrelu(x, slope=0.01):
    return np.where(x > 0, x, slope * x)


def _ref_maxpool2(x):
    return np.maximum.reduce(
        [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]]
    )


def _ref_upsample2(x):
    """Bilinear 2x, align-corners-false, edge-clamped; explicit gather."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=np.float64)
    for i in range(2 * h):
        sy = (i + 0.5) / 2.0 - 0.5
        y0 = int(np.floor(sy))
        wy = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for j in range(2 * w):
            sx = (j + 0.5) / 2.0 - 0.5
            x0 = int(np.floor(sx))
            wx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            out[:, :, i, j] = (
                (1 - wy) * (1 - wx) * x[:, :, y0c, x0c]
                + (1 - wy) * wx * x[:, :, y0c, x1c]
                + wy * (1 - wx) * x[:, :, y1c, x0c]
                + wy * wx * x[:, :, y1c, x1c]
            )
    return out


def reference_unet_forward(state: dict, stages: int, x: np.ndarray) -> np.ndarray:
    """Plain U-Net eval forward from a checkpoint state dict, fp64 numpy only."""
    x = x.astype(np.float64)

    def conv(name, inp):
        return _ref_conv(inp, state[f"{name}.weight"].astype(np.float64),
                         state[f"{name}.bias"].astype(np.float64).reshape(-1))

    def bn(name, inp):
        return _ref_bn_eval(
            inp,
            state[f"{name}.gamma"].astype(np.float64).reshape(-1),
            state[f"{name}.beta"].astype(np.float64).reshape(-1),
            state[f"{name}.running_mean"].astype(np.float64),
            state[f"{name}.running_var"].astype(np.float64),
        )

    skips = []
    cur = x
    for l in range(1, stages + 1):
        if l > 1:
            cur = _ref_maxpool2(cur)
        cur = _ref_lrelu(bn(f"enc{l}.bn1", conv(f"enc{l}.conv1", cur)))
        cur = _ref_lrelu(bn(f"enc{l}.bn2", conv(f"enc{l}.conv2", cur)))
        skips.append(cur)

    d = skips[-1]
    for l in range(stages - 1, 0, -1):
        d_up = conv(f"dec{l}.proj", _ref_upsample2(d))
        cat = np.concatenate([skips[l - 1], d_up], axis=1)
        d = _ref_lrelu(bn(f"dec{l}.bn", conv(f"dec{l}.conv", cat)))
    logits = conv("head", d)
    return 1.0 / (1.0 + np.exp(-logits))
