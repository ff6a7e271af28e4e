"""Direct 2D convolution primitives and their gradients.

Grids are plain 2D ``numpy`` arrays. Channel stacks are ``(C, H, W)`` arrays,
optionally with a leading batch axis ``(B, C, H, W)``. Layer weights are
``(out_channels, in_channels, 3, 3)`` arrays with no bias.

All convolutions here are true convolutions (kernel flipped), so the impulse
response of any chain of layers is the kernel that chain applies.
"""

import numpy as np

from .errors import ConfigError


def conv2d_full(a, b):
    """Full linear convolution of two 2D grids.

    Output has shape ``(Ha + Hb - 1, Wa + Wb - 1)`` with
    ``out[i, j] = sum_{m, n} a[m, n] * b[i - m, j - n]``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.size == 0 or b.size == 0:
        raise ConfigError("conv2d_full expects two non-empty 2D grids")
    # scatter the smaller grid's entries; loop count stays at most 51*51
    if a.size > b.size:
        a, b = b, a
    ha, wa = a.shape
    hb, wb = b.shape
    out = np.zeros((ha + hb - 1, wa + wb - 1))
    for m in range(ha):
        for n in range(wa):
            if a[m, n] != 0.0:
                out[m:m + hb, n:n + wb] += a[m, n] * b
    return out


def grid_sum(g):
    """Sum of all entries, i.e. the zero-frequency Fourier coefficient."""
    return float(np.sum(g, dtype=np.float64))


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ConfigError(f"expected a (C,H,W) or (B,C,H,W) stack, got shape {x.shape}")


def _check_weights(w, in_channels):
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ConfigError(f"weights must have shape (out, in, 3, 3), got {w.shape}")
    if w.shape[1] != in_channels:
        raise ConfigError(
            f"channel mismatch: input has {in_channels} channels, "
            f"weights expect {w.shape[1]}"
        )


def _pad_flat(x):
    # (C, B, H, W) -> zero-padded (C, B*(H+2)*(W+2)) plus a tail so every tap
    # offset can be sliced at full length
    c, b, h, w = x.shape
    hp, wp = h + 2, w + 2
    flat = np.zeros((c, b * hp * wp + 2 * wp + 2))
    flat[:, :b * hp * wp].reshape(c, b, hp, wp)[:, :, 1:-1, 1:-1] = x
    return flat


def _taps(h, w):
    # flat offset of tap (p, q) inside the padded frame
    wp = w + 2
    return [(p, q, p * wp + q) for p in range(3) for q in range(3)]


def conv_cm(x, w):
    """:func:`conv2d_same` on a channel-major ``(C, B, H, W)`` array.

    Output pixel ``(i, j)`` is anchored at padded position ``(i, j)``; each tap
    is then a fixed offset into the flattened padded input, so the layer is
    nine matrix products on strided views with no patch copies.
    """
    c, b, h, wd = x.shape
    o = w.shape[0]
    hp, wp = h + 2, wd + 2
    n = b * hp * wp
    xf = _pad_flat(x)
    # patch offset (p, q) pairs with kernel tap (2 - p, 2 - q)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1))
    acc = np.zeros((o, n))
    for p, q, d in _taps(h, wd):
        acc += wt[p, q] @ xf[:, d:d + n]
    return acc.reshape(o, b, hp, wp)[:, :, :h, :wd].copy()


def conv_cm_backward(x, w, g, need_input_grad=True):
    """Gradients of :func:`conv_cm`; ``grad_input`` is ``None`` when not requested."""
    c, b, h, wd = x.shape
    o = w.shape[0]
    hp, wp = h + 2, wd + 2
    n = b * hp * wp
    xf = _pad_flat(x)
    ga = np.zeros((o, b, hp, wp))
    ga[:, :, :h, :wd] = g
    ga = ga.reshape(o, n)

    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(2, 3, 1, 0))
    gwt = np.empty((3, 3, o, c))
    gxf = np.zeros_like(xf) if need_input_grad else None
    for p, q, d in _taps(h, wd):
        gwt[p, q] = ga @ xf[:, d:d + n].T
        if need_input_grad:
            gxf[:, d:d + n] += wt[p, q] @ ga
    grad_w = gwt.transpose(2, 3, 0, 1)[:, :, ::-1, ::-1].copy()
    if not need_input_grad:
        return None, grad_w
    grad_x = gxf[:, :n].reshape(c, b, hp, wp)[:, :, 1:-1, 1:-1].copy()
    return grad_x, grad_w


def conv2d_same(x, w):
    """Zero-padded 3x3 multi-channel convolution keeping the spatial size.

    ``out[o] = sum_c conv(x[c], w[o, c])`` cropped to the input frame.
    """
    xb, squeeze = _as_batch(x)
    w = np.asarray(w, dtype=np.float64)
    _check_weights(w, xb.shape[1])
    out = conv_cm(np.ascontiguousarray(xb.transpose(1, 0, 2, 3), dtype=np.float64), w)
    out = out.transpose(1, 0, 2, 3)
    return out[0] if squeeze else out


def conv2d_same_backward(x, w, grad_out):
    """Gradients of :func:`conv2d_same` with respect to its input and weights.

    Returns ``(grad_input, grad_w)`` for the upstream gradient ``grad_out``.
    """
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    w = np.asarray(w, dtype=np.float64)
    _check_weights(w, xb.shape[1])
    b, _, h, wd = xb.shape
    expected = (b, w.shape[0], h, wd)
    if gb.shape != expected:
        raise ConfigError(f"grad_out shape {gb.shape} does not match forward output {expected}")
    grad_x, grad_w = conv_cm_backward(
        np.ascontiguousarray(xb.transpose(1, 0, 2, 3), dtype=np.float64), w,
        np.ascontiguousarray(gb.transpose(1, 0, 2, 3), dtype=np.float64),
    )
    grad_x = grad_x.transpose(1, 0, 2, 3)
    return (grad_x[0] if squeeze else grad_x), grad_w
