"""Independent scalar-loop reference implementations.

Everything here is written with plain Python loops and float64 math, on
purpose: these are the oracles the vectorized kernels are checked against,
so they must not share any code path with the package.
"""

import math

import numpy as np


def conv2d_loops(x, w, b=None):
    """Same-padded cross-correlation via six nested loops."""
    cout, cin, kh, kw = w.shape
    _, h, wd = x.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((cout, h, wd), dtype=np.float64)
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = 0.0
                for c in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            yy = y + i - ph
                            xj = xx + j - pw
                            if 0 <= yy < h and 0 <= xj < wd:
                                acc += float(w[o, c, i, j]) * float(x[c, yy, xj])
                if b is not None:
                    acc += float(b[o])
                out[o, y, xx] = acc
    return out


def leaky_relu_loops(x, slope):
    """Scalar loop in the input's own precision (the op is elementwise-exact)."""
    out = np.zeros_like(x)
    s = x.dtype.type(slope)
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_in.size):
        v = flat_in[i]
        flat_out[i] = v if v >= 0 else s * v
    return out


def bilerp_at(img, row, col):
    """Clamp-to-border bilinear interpolation of every channel at one point."""
    c, h, w = img.shape
    row = min(max(row, 0.0), h - 1.0)
    col = min(max(col, 0.0), w - 1.0)
    r0 = min(int(math.floor(row)), max(h - 2, 0))
    c0 = min(int(math.floor(col)), max(w - 2, 0))
    r1 = min(r0 + 1, h - 1)
    c1 = min(c0 + 1, w - 1)
    fr = row - r0
    fc = col - c0
    out = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        top = float(img[ch, r0, c0]) * (1 - fc) + float(img[ch, r0, c1]) * fc
        bot = float(img[ch, r1, c0]) * (1 - fc) + float(img[ch, r1, c1]) * fc
        out[ch] = top * (1 - fr) + bot * fr
    return out


def bilinear_sample_loops(img, points):
    out = np.zeros((img.shape[0], len(points)), dtype=np.float64)
    for n, (row, col) in enumerate(points):
        out[:, n] = bilerp_at(img, float(row), float(col))
    return out


def sample_kv_loops(features, offsets):
    """Per-pixel deformable gather; offsets are (dx, dy) pairs per point."""
    c, h, w = features.shape
    k = offsets.shape[0] // 2
    out = np.zeros((k, c, h, w), dtype=np.float64)
    for i in range(k):
        for y in range(h):
            for x in range(w):
                row = y + float(offsets[2 * i + 1, y, x])
                col = x + float(offsets[2 * i, y, x])
                out[i, :, y, x] = bilerp_at(features, row, col)
    return out


def softmax_loops(logits, scale):
    z = [scale * float(v) for v in logits]
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return np.array([v / s for v in e], dtype=np.float64)


def embed_1x1_loops(x, w, b):
    """Pointwise channel map: (Cin,H,W) -> (Cout,H,W)."""
    cout, cin = w.shape[0], w.shape[1]
    _, h, wd = x.shape
    out = np.zeros((cout, h, wd), dtype=np.float64)
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = float(b[o])
                for c in range(cin):
                    acc += float(w[o, c, 0, 0]) * float(x[c, y, xx])
                out[o, y, xx] = acc
    return out


def grouped_attention_loops(q, keys, values, groups, scale):
    """Per-pixel, per-group softmax attention over k sampled points.

    q: (Cq,H,W); keys: (k,Cq,H,W); values: (k,Cv,H,W) -> (Cv,H,W).
    """
    k = keys.shape[0]
    cq, h, w = q.shape
    cv = values.shape[1]
    cg_q = cq // groups
    cg_v = cv // groups
    out = np.zeros((cv, h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            for g in range(groups):
                logits = []
                for i in range(k):
                    dot = 0.0
                    for c in range(g * cg_q, (g + 1) * cg_q):
                        dot += float(q[c, y, x]) * float(keys[i, c, y, x])
                    logits.append(dot)
                wts = softmax_loops(logits, scale)
                for c in range(g * cg_v, (g + 1) * cg_v):
                    acc = 0.0
                    for i in range(k):
                        acc += wts[i] * float(values[i, c, y, x])
                    out[c, y, x] = acc
    return out


def attend_level_loops(f_t, f_prev, offsets, wq, bq, wk, bk, wv, bv,
                       groups=4, scale=1.0 / math.sqrt(8.0)):
    q = embed_1x1_loops(f_t, wq, bq)
    sampled = sample_kv_loops(f_prev, offsets)
    keys = np.stack([embed_1x1_loops(sampled[i], wk, bk) for i in range(sampled.shape[0])])
    values = np.stack([embed_1x1_loops(sampled[i], wv, bv) for i in range(sampled.shape[0])])
    return grouped_attention_loops(q, keys, values, groups, scale)


def fuse_hidden_loops(q0, h_prev, offsets, key_layers, value_layers,
                      groups=4, scale=1.0 / math.sqrt(8.0)):
    """key_layers/value_layers: per-group (weight, bias) pairs."""
    n = h_prev.shape[0]
    cg = n // groups
    sampled = sample_kv_loops(h_prev, offsets)
    k = sampled.shape[0]
    keys = []
    values = []
    for i in range(k):
        key_parts = [embed_1x1_loops(sampled[i, g * cg:(g + 1) * cg], kw, kb)
                     for g, (kw, kb) in enumerate(key_layers)]
        val_parts = [embed_1x1_loops(sampled[i, g * cg:(g + 1) * cg], vw, vb)
                     for g, (vw, vb) in enumerate(value_layers)]
        keys.append(np.concatenate(key_parts, axis=0))
        values.append(np.concatenate(val_parts, axis=0))
    return grouped_attention_loops(q0, np.stack(keys), np.stack(values), groups, scale)


def imdn_block_loops(x, conv_ws, conv_bs, fuse_w, fuse_b, slope=0.1):
    n = x.shape[0]
    quarter = n // 4
    distilled = []
    rest = x.astype(np.float64)
    for i in range(3):
        full = leaky_relu_loops(conv2d_loops(rest, conv_ws[i], conv_bs[i]), slope)
        distilled.append(full[:quarter])
        rest = full[quarter:]
    distilled.append(conv2d_loops(rest, conv_ws[3], conv_bs[3]))
    cat = np.concatenate(distilled, axis=0)
    fused = conv2d_loops(cat, fuse_w, fuse_b)
    return fused + x.astype(np.float64)


def ssim_loops(a, b, win, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Sliding-window SSIM with explicit loops; multi-channel averaged."""
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    kh, kw = win.shape
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    ch_scores = []
    for ch in range(a.shape[0]):
        vals = []
        for y in range(a.shape[1] - kh + 1):
            for x in range(a.shape[2] - kw + 1):
                mx = my = 0.0
                for i in range(kh):
                    for j in range(kw):
                        mx += win[i, j] * float(a[ch, y + i, x + j])
                        my += win[i, j] * float(b[ch, y + i, x + j])
                vx = vy = cov = 0.0
                for i in range(kh):
                    for j in range(kw):
                        da = float(a[ch, y + i, x + j])
                        db = float(b[ch, y + i, x + j])
                        vx += win[i, j] * da * da
                        vy += win[i, j] * db * db
                        cov += win[i, j] * da * db
                vx -= mx * mx
                vy -= my * my
                cov -= mx * my
                num = (2 * mx * my + c1) * (2 * cov + c2)
                den = (mx * mx + my * my + c1) * (vx + vy + c2)
                vals.append(num / den)
        ch_scores.append(sum(vals) / len(vals))
    return sum(ch_scores) / len(ch_scores)


def max_rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b)) / den)
