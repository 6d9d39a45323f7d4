"""Built-in sanity suite for `mitoseg selftest`: quick independent checks of
the gradient engine, the attention blocks, connected components, metrics,
and volume IO. Each check prints one PASS/FAIL line."""

from __future__ import annotations

import tempfile
from collections import deque
from pathlib import Path

import numpy as np

from . import data, metrics, postproc
from .attention import AttentionConfig, AttentionMaps, AttentionWeights, attention_forward, deformable_fuse, spatial_attention, temporal_attention
from .tensor import Tensor, conv3d


def _fd_scalar(fn, arr, eps=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = fn()
        arr[i] = old - eps
        fm = fn()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def _rel_err(a, b):
    denom = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def check_gradients():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(1, 2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 1, 3, 3)) * 0.5, requires_grad=True)

    def loss():
        return float((conv3d(x.detach(), Tensor(w.data), None, (1, 1, 1), (0, 1, 1)).data ** 2).sum())

    out = conv3d(x, w, None, (1, 1, 1), (0, 1, 1))
    (out * out).sum().backward()
    return _rel_err(w.grad, _fd_scalar(loss, w.data)) < 1e-4


def check_attention_oracle():
    rng = np.random.default_rng(3)
    T, H, W, C = 2, 3, 3, 4
    x = rng.normal(size=(T, H, W, C))
    wts = AttentionWeights(AttentionConfig(d_model=C, fusion="addition"), rng)
    got = spatial_attention(Tensor(x), wts).data
    q = x.reshape(T, H * W, C) @ wts.w_qs.weight.data
    k = x.reshape(T, H * W, C) @ wts.w_ks.weight.data
    v = x.reshape(T, H * W, C) @ wts.w_vs.weight.data
    want = np.zeros((T, H * W, C))
    for t in range(T):
        for i in range(H * W):
            logits = np.array([q[t, i] @ k[t, j] for j in range(H * W)]) / np.sqrt(C)
            e = np.exp(logits - logits.max())
            want[t, i] = (e / e.sum()) @ v[t]
    ok = np.abs(got - want.reshape(T, H, W, C)).max() < 1e-10

    got_t = temporal_attention(Tensor(x), wts).data
    qt = x.reshape(T, H * W, C) @ wts.w_qt.weight.data
    kt = x.reshape(T, H * W, C) @ wts.w_kt.weight.data
    vt = x.reshape(T, H * W, C) @ wts.w_vt.weight.data
    want_t = np.zeros((T, H * W, C))
    for p in range(H * W):
        for a in range(T):
            logits = np.array([qt[a, p] @ kt[b, p] for b in range(T)]) / np.sqrt(C)
            e = np.exp(logits - logits.max())
            want_t[a, p] = sum((e / e.sum())[b] * vt[b, p] for b in range(T))
    return ok and np.abs(got_t - want_t.reshape(T, H, W, C)).max() < 1e-10


def check_deformable_degeneracy():
    rng = np.random.default_rng(5)
    C = 4
    cfg = AttentionConfig(d_model=C, fusion="def-conv")
    wts = AttentionWeights(cfg, rng)
    xs = rng.normal(size=(2, 4, 4, C))
    xt = rng.normal(size=(2, 4, 4, C))
    fused = deformable_fuse(AttentionMaps(Tensor(xs), Tensor(xt)), wts).data
    ref = conv3d(Tensor(xs.transpose(3, 0, 1, 2)[None]), Tensor(wts.deform_weight.data), None, (1, 1, 1), (0, 1, 1)).data
    return np.abs(fused - ref[0].transpose(1, 2, 3, 0)).max() < 1e-10


def check_residual_identity():
    rng = np.random.default_rng(11)
    cfg = AttentionConfig(d_model=4, fusion="concat")
    wts = AttentionWeights(cfg, rng)
    wts.out_proj.weight.data[:] = 0
    wts.out_proj.bias.data[:] = 0
    x = rng.normal(size=(2, 3, 3, 4))
    return np.array_equal(attention_forward(Tensor(x), wts).data, x)


def _flood_fill(mask, connectivity):
    offsets = postproc.neighbor_offsets(connectivity)
    labels = np.zeros(mask.shape, dtype=np.int32)
    nxt = 0
    for idx in np.argwhere(mask):
        idx = tuple(idx)
        if labels[idx]:
            continue
        nxt += 1
        labels[idx] = nxt
        queue = deque([idx])
        while queue:
            t, h, w = queue.popleft()
            for dt, dh, dw in offsets:
                n = (t + dt, h + dh, w + dw)
                if all(0 <= n[a] < mask.shape[a] for a in range(3)) and mask[n] and not labels[n]:
                    labels[n] = nxt
                    queue.append(n)
    return labels, nxt


def check_connected_components():
    rng = np.random.default_rng(13)
    for _ in range(25):
        mask = rng.random((8, 8, 8)) < rng.uniform(0.1, 0.5)
        for conn in (6, 26):
            got = postproc.connected_components_3d(mask, conn)
            want, n = _flood_fill(mask, conn)
            if got.instance_count != n:
                return False
            # same partition up to relabeling
            joint = {}
            for a, b in zip(got.labels[mask], want[mask]):
                if joint.setdefault(a, b) != b:
                    return False
    return True


def check_metrics():
    rng = np.random.default_rng(17)
    for _ in range(50):
        a = rng.random((6, 6, 6)) < 0.4
        b = rng.random((6, 6, 6)) < 0.4
        j, d = metrics.jaccard_dsc(a, b)
        if abs(d - 2 * j / (1 + j)) > 1e-12:
            return False
    lab = np.zeros((4, 8, 8), dtype=np.int32)
    lab[:, :3, :3] = 1
    lab[:, 5:, 5:] = 2
    vol = postproc.LabelVolume.from_array(lab)
    return metrics.ap75(vol, np.array([0.9, 0.8]), vol) == 1.0


def check_volume_io():
    rng = np.random.default_rng(19)
    arr = rng.random((3, 5, 5)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        base = data.save_volume(Path(tmp) / "vol", arr)
        back, _ = data.load_volume(base)
        return np.array_equal(back, arr)


CHECKS = [
    ("gradient engine vs finite differences", check_gradients),
    ("attention vs brute-force token loops", check_attention_oracle),
    ("deformable fusion zero-offset degeneracy", check_deformable_degeneracy),
    ("attention residual identity", check_residual_identity),
    ("connected components vs flood fill", check_connected_components),
    ("metric identities and perfect-match AP", check_metrics),
    ("volume IO round trip", check_volume_io),
]


def run_selftest(verbose=True):
    ok = True
    for name, fn in CHECKS:
        try:
            passed = bool(fn())
        except Exception as e:  # noqa: BLE001 - report, don't crash the suite
            passed = False
            name = f"{name} ({type(e).__name__}: {e})"
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
