"""Brute-force reference implementations used by the tests.

Written as plain loops over scalars, deliberately sharing no code with the
vectorised kernels they check.
"""

import math

import numpy as np


def matmul_loops(a, b):
    m, p = a.shape
    p2, q = b.shape
    assert p == p2
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            acc = 0.0
            for k in range(p):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, w, bias, stride, pad, dilation):
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride - pad + u * dilation
                                xx = j * stride - pad + v * dilation
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[b, ci, y, xx] * w[o, ci, u, v]
                    out[b, o, i, j] = acc
    return out


def bilinear_point(img, px, py):
    """Interpolate a single 2-D map at (px, py) after border clamping."""
    h, w = img.shape
    px = min(max(px, 0.0), w - 1.0)
    py = min(max(py, 0.0), h - 1.0)
    x0, y0 = int(math.floor(px)), int(math.floor(py))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = px - x0, py - y0
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def bilinear_sample_loops(x, coords):
    n, c, _, _ = x.shape
    ho, wo = coords.shape[2:]
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    out[b, ch, i, j] = bilinear_point(x[b, ch], coords[b, 0, i, j], coords[b, 1, i, j])
    return out


def resize_align_corners_loops(x, out_h, out_w):
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for i in range(out_h):
        sy = i * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        for j in range(out_w):
            sx = j * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            for b in range(n):
                for ch in range(c):
                    out[b, ch, i, j] = bilinear_point(x[b, ch], sx, sy)
    return out


def softmax_list(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def pooled_contexts_loops(mask_logits, feature):
    """Spatial-softmax masks and their weighted feature sums, one (k, c) at a time."""
    n, k, h, w = mask_logits.shape
    c = feature.shape[1]
    masks = np.zeros((n, k, h, w))
    cxt = np.zeros((n, k, c))
    for b in range(n):
        for kk in range(k):
            flat = softmax_list([mask_logits[b, kk, i, j] for i in range(h) for j in range(w)])
            for p, val in enumerate(flat):
                masks[b, kk, p // w, p % w] = val
            for ch in range(c):
                acc = 0.0
                for p, val in enumerate(flat):
                    acc += val * feature[b, ch, p // w, p % w]
                cxt[b, kk, ch] = acc
    return masks, cxt


def attend_loops(rgb, query_w, query_b, key_w, value_w, bank):
    """Per-pixel query -> softmax over bank keys -> weighted sum of values -> residual."""
    n, c, h, w = rgb.shape
    cq = query_w.shape[0]
    m = bank.shape[1]
    out = np.zeros_like(rgb, dtype=np.float64)
    for b in range(n):
        keys = [[sum(key_w[d, e] * bank[b, j, e] for e in range(c)) for d in range(cq)] for j in range(m)]
        vals = [[sum(value_w[d, e] * bank[b, j, e] for e in range(c)) for d in range(c)] for j in range(m)]
        for i in range(h):
            for jj in range(w):
                q = [query_b[d] + sum(query_w[d, e, 0, 0] * rgb[b, e, i, jj] for e in range(c)) for d in range(cq)]
                logits = [sum(q[d] * keys[j][d] for d in range(cq)) for j in range(m)]
                a = softmax_list(logits)
                for ch in range(c):
                    out[b, ch, i, jj] = rgb[b, ch, i, jj] + sum(a[j] * vals[j][ch] for j in range(m))
    return out


def confusion_loops(pred, label, k, ignore=255):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, l in zip(np.ravel(pred), np.ravel(label)):
        if l == ignore:
            continue
        cm[int(l), int(p)] += 1
    return cm


def miou_by_sets(pred, label, k, ignore=255):
    """mIoU from per-class pixel index sets."""
    pred, label = np.ravel(pred), np.ravel(label)
    scored = [i for i in range(label.size) if label[i] != ignore]
    ious = []
    for cls in range(k):
        gt = {i for i in scored if label[i] == cls}
        pr = {i for i in scored if pred[i] == cls}
        union = gt | pr
        if union:
            ious.append(len(gt & pr) / len(union))
    return sum(ious) / len(ious)
