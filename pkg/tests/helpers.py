"""Shared oracles and generators for the test suite."""

from __future__ import annotations

import numpy as np

from sparseprune.nn import (
    Architecture,
    Block,
    Conv2D,
    Flatten,
    Linear,
    MaxPool2D,
    ReLU,
)


def conv2d_naive(x, kernel, bias=None, stride=1, padding=0):
    """Direct six-nested-loop convolution, accumulating in float64."""
    c_in, h, w = x.shape
    k, ck, kh, kw = kernel.shape
    assert c_in == ck
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((k, ho, wo), dtype=np.float64)
    for kk in range(k):
        for i_o in range(ho):
            for j_o in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc += float(kernel[kk, c, i, j]) * float(xp[c, i_o * stride + i, j_o * stride + j])
                if bias is not None:
                    acc += float(bias[kk])
                out[kk, i_o, j_o] = acc
    return out


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar-valued f() w.r.t. arr, in place."""
    g = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = arr[ix]
        arr[ix] = orig + h
        f1 = f()
        arr[ix] = orig - h
        f2 = f()
        arr[ix] = orig
        g[ix] = (f1 - f2) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    num = np.abs(np.asarray(analytic) - np.asarray(numeric)).max()
    den = max(np.abs(numeric).max(), 1e-8)
    return num / den


def tiny_conv_net(in_shape=(2, 6, 6), classes=3):
    """2 conv + 1 linear, the smallest net exercising every layer kind."""
    c, h, w = in_shape
    layers = [
        Conv2D(out_channels=3, in_channels=c, kernel_h=3, kernel_w=3, stride=1, padding=1),
        ReLU(),
        MaxPool2D(window=2, stride=2),
        Conv2D(out_channels=4, in_channels=3, kernel_h=3, kernel_w=3, stride=1, padding=0),
        ReLU(),
        Flatten(),
    ]
    arch_head = Architecture.plain(in_shape, layers)
    flat = arch_head.validate()[0]
    layers.append(Linear(in_features=flat, out_features=classes))
    return Architecture.plain(in_shape, layers)


def random_plain_arch(rng, input_shape=None, classes=None, force_pool=False):
    """A random valid conv stack ending in flatten + linears."""
    if input_shape is None:
        c = int(rng.integers(1, 4))
        hw = int(rng.integers(6, 13))
        input_shape = (c, hw, hw)
    if classes is None:
        classes = int(rng.integers(2, 6))
    layers = []
    cur_c, cur_h, cur_w = input_shape
    n_conv = int(rng.integers(1, 4))
    for _ in range(n_conv):
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        out_c = int(rng.integers(2, 9))
        if cur_h + 2 * pad < k or cur_w + 2 * pad < k:
            k = 1
        layers.append(Conv2D(out_c, cur_c, k, k, stride=1, padding=pad))
        cur_c = out_c
        cur_h = cur_h + 2 * pad - k + 1
        cur_w = cur_w + 2 * pad - k + 1
        if rng.random() < 0.5:
            layers.append(ReLU())
        if (force_pool or rng.random() < 0.4) and cur_h >= 2 and cur_w >= 2:
            layers.append(MaxPool2D(window=2, stride=2))
            cur_h = (cur_h - 2) // 2 + 1
            cur_w = (cur_w - 2) // 2 + 1
            force_pool = False
    layers.append(Flatten())
    flat = cur_c * cur_h * cur_w
    if rng.random() < 0.5:
        hidden = int(rng.integers(2, 9))
        layers.append(Linear(flat, hidden))
        layers.append(ReLU())
        flat = hidden
    layers.append(Linear(flat, classes))
    return Architecture.plain(input_shape, layers)


def instrumented_forward_ops(arch, params, image):
    """Naive single-sample forward that counts executed multiplies and adds.

    Each kernel inner-product term costs one multiply plus one add (the
    accumulator starts at the bias); pooling, activations, flatten, and
    residual adds are free. Returns (output_vector, op_count).
    """
    from sparseprune.nn import weight_key, bias_key

    x = np.asarray(image, dtype=np.float64)
    ops = 0
    for block in arch.blocks:
        x_entry = x
        for idx in block.layers:
            spec = arch.layers[idx]
            if spec.kind == "conv2d":
                w = params[weight_key(idx)].astype(np.float64)
                b = params[bias_key(idx)].astype(np.float64)
                c, h, wd = x.shape
                p, s = spec.padding, spec.stride
                xp = np.zeros((c, h + 2 * p, wd + 2 * p))
                xp[:, p : p + h, p : p + wd] = x
                ho = (h + 2 * p - spec.kernel_h) // s + 1
                wo = (wd + 2 * p - spec.kernel_w) // s + 1
                out = np.zeros((spec.out_channels, ho, wo))
                for k in range(spec.out_channels):
                    wk = w[k].reshape(-1)
                    for i in range(ho):
                        for j in range(wo):
                            patch = xp[:, i * s : i * s + spec.kernel_h, j * s : j * s + spec.kernel_w]
                            out[k, i, j] = b[k] + wk @ patch.reshape(-1)
                            ops += 2 * wk.size
                x = out
            elif spec.kind == "linear":
                w = params[weight_key(idx)].astype(np.float64)
                b = params[bias_key(idx)].astype(np.float64)
                out = np.zeros(spec.out_features)
                for j in range(spec.out_features):
                    out[j] = b[j] + w[j] @ x
                    ops += 2 * w.shape[1]
                x = out
            elif spec.kind == "relu":
                x = np.maximum(x, 0)
            elif spec.kind == "maxpool2d":
                c, h, wd = x.shape
                ho = (h - spec.window) // spec.stride + 1
                wo = (wd - spec.window) // spec.stride + 1
                out = np.zeros((c, ho, wo))
                for i in range(ho):
                    for j in range(wo):
                        out[:, i, j] = x[
                            :, i * spec.stride : i * spec.stride + spec.window,
                            j * spec.stride : j * spec.stride + spec.window,
                        ].max(axis=(1, 2))
                x = out
            elif spec.kind == "flatten":
                x = x.reshape(-1)
        if block.residual:
            x = x + x_entry
    return x, ops


def softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ista_logistic(x, y, n_classes, lam, step=0.5, tol=1e-8, max_iter=200_000):
    """Deterministic full-batch proximal gradient on softmax logistic + L1.

    Self-contained oracle: its own gradients, its own soft threshold. Returns
    (weight, bias, objective).
    """
    n, d = x.shape
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(max_iter):
        p = softmax_rows(x @ w.T + b)
        gw = (p - onehot).T @ x / n
        gb = (p - onehot).mean(axis=0)
        zw = w - step * gw
        w_new = np.sign(zw) * np.maximum(np.abs(zw) - step * lam, 0.0)
        b_new = b - step * gb
        delta = max(np.abs(w_new - w).max(), np.abs(b_new - b).max())
        w, b = w_new, b_new
        if delta < tol:
            break
    p = softmax_rows(x @ w.T + b)
    f = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
    return w, b, f + lam * np.abs(w).sum()


def logistic_problem(seed, n_samples=200, n_features=20, n_true=5, label_noise=True):
    """Synthetic lasso-style logistic regression with a planted sparse support.

    With label_noise the labels are Bernoulli draws from the logistic model;
    without it they are the decision-boundary signs (separable data, wider
    support margins).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, n_features))
    w_true = np.zeros(n_features)
    support = rng.choice(n_features, size=n_true, replace=False)
    w_true[support] = rng.uniform(1.5, 2.5, size=n_true) * rng.choice([-1.0, 1.0], size=n_true)
    if label_noise:
        p = 1.0 / (1.0 + np.exp(-(x @ w_true)))
        y = (rng.random(n_samples) < p).astype(np.int64)
    else:
        y = (x @ w_true > 0).astype(np.int64)
    return x, y, w_true


def logistic_dataset(x, y, val_fraction=0.0):
    """Wrap a feature matrix as a (N, F, 1, 1) image dataset with 2 classes."""
    from sparseprune.data import DatasetHandle, Split

    images = x.astype(np.float32)[:, :, None, None]
    split = Split(images, y)
    if val_fraction:
        from sparseprune.data import make_dataset

        return make_dataset(split, split, 2, val_fraction=val_fraction, seed=0)
    return DatasetHandle(split, Split(images[:0], y[:0]), split, 2)


def logistic_arch(n_features, n_classes=2):
    return Architecture.plain((n_features, 1, 1), [Flatten(), Linear(n_features, n_classes)])


def random_residual_arch(rng, input_shape=(2, 8, 8), classes=3, width=None):
    """Stem conv, a few identity-skip residual blocks, then a classifier."""
    c, h, w = input_shape
    width = width or int(rng.integers(3, 7))
    layers = [Conv2D(width, c, 3, 3, 1, 1), ReLU()]
    blocks = [Block((0,)), Block((1,))]
    n_res = int(rng.integers(1, 4))
    for _ in range(n_res):
        bw = int(rng.integers(2, 7))
        i0 = len(layers)
        layers += [Conv2D(bw, width, 3, 3, 1, 1), ReLU(), Conv2D(width, bw, 3, 3, 1, 1)]
        blocks.append(Block((i0, i0 + 1, i0 + 2), residual=True))
        layers.append(ReLU())
        blocks.append(Block((len(layers) - 1,)))
    i0 = len(layers)
    layers += [Flatten(), Linear(width * h * w, classes)]
    blocks += [Block((i0,)), Block((i0 + 1,))]
    return Architecture(tuple(input_shape), tuple(layers), tuple(blocks))
