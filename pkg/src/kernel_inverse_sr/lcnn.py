"""Linear convolutional network: five bias-free 3x3 layers, no activations.

Because every layer is linear and shift-invariant, the whole network is a
single convolution. :func:`effective_kernel` extracts that kernel from the
impulse response, and inference may use either path.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArchitectureMismatchError, FormatError
from .fileformat import read_container, write_container
from .tensor import conv_cm, conv_cm_backward

CHANNEL_PLAN = (1, 32, 32, 32, 32, 1)


@dataclass
class LcnnModel:
    layers: list
    provenance: dict = field(default_factory=dict)

    @property
    def channel_plan(self):
        return (self.layers[0].shape[1],) + tuple(w.shape[0] for w in self.layers)

    @property
    def receptive_field(self):
        return 1 + 2 * len(self.layers)

    def copy(self):
        return LcnnModel([w.copy() for w in self.layers], dict(self.provenance))


def init_model(seed=0, channel_plan=CHANNEL_PLAN):
    """Gaussian init with per-layer std ``1 / sqrt(in_channels * 9)``."""
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout in zip(channel_plan[:-1], channel_plan[1:]):
        std = 1.0 / np.sqrt(cin * 9)
        layers.append(rng.normal(0.0, std, size=(cout, cin, 3, 3)))
    return LcnnModel(layers, {"init_seed": int(seed)})


def identity_model(channel_plan=CHANNEL_PLAN):
    """Network whose every layer passes channel 0 through a centered one-hot tap."""
    layers = []
    for cin, cout in zip(channel_plan[:-1], channel_plan[1:]):
        w = np.zeros((cout, cin, 3, 3))
        w[0, 0, 1, 1] = 1.0
        layers.append(w)
    return LcnnModel(layers, {"identity": True})


def param_count(model):
    return int(sum(w.size for w in model.layers))


def _to_stack(x):
    # channel-major (1, B, H, W)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    raise ValueError(f"expected a 2D grid or a (B, H, W) batch, got shape {x.shape}")


def forward(model, x):
    """Apply the network to a 2D grid or to a ``(B, H, W)`` batch of grids."""
    h, ndim = _to_stack(x)
    for w in model.layers:
        h = conv_cm(h, w)
    return h[0, 0] if ndim == 2 else h[0]


def forward_cached(model, x):
    """Batched forward pass that also returns every layer input, for :func:`backward`."""
    h, _ = _to_stack(x)
    acts = []
    for w in model.layers:
        acts.append(h)
        h = conv_cm(h, w)
    return h[0], acts


def backward(model, acts, grad_out):
    """Weight gradients given cached layer inputs and ``d loss / d output``.

    ``grad_out`` has the ``(B, H, W)`` shape of the batched forward output.
    """
    g = np.asarray(grad_out, dtype=np.float64)[None]
    grads = [None] * len(model.layers)
    for i in reversed(range(len(model.layers))):
        g, grads[i] = conv_cm_backward(acts[i], model.layers[i], g, need_input_grad=i > 0)
    return grads


def impulse_field_size(model):
    return 2 * model.receptive_field - 1


def effective_kernel(model):
    """The single kernel the network applies: its impulse response.

    The impulse sits at the center of a field large enough that zero padding
    never truncates the response; the central receptive-field window is kept.
    """
    n = impulse_field_size(model)
    field_ = np.zeros((n, n))
    field_[n // 2, n // 2] = 1.0
    out = forward(model, field_)
    r = model.receptive_field
    lo = (n - r) // 2
    return out[lo:lo + r, lo:lo + r]


def save_model(model, path, optimizer_state=None):
    """Write a checkpoint. ``optimizer_state`` (Adam moments) is optional."""
    header = {
        "channel_plan": list(model.channel_plan),
        "kernel_size": 3,
        "provenance": model.provenance,
    }
    parts = [w.ravel() for w in model.layers]
    if optimizer_state is not None:
        header["optimizer"] = {"step": int(optimizer_state.step)}
        parts += [m.ravel() for m in optimizer_state.m]
        parts += [v.ravel() for v in optimizer_state.v]
    write_container(path, b"LCNN", header, np.concatenate(parts))


def _load(path, expected_plan):
    header, values = read_container(path, b"LCNN")
    try:
        plan = tuple(int(c) for c in header["channel_plan"])
        ksize = int(header["kernel_size"])
        provenance = dict(header.get("provenance", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint header is incomplete: {exc}") from None
    if ksize != 3:
        raise ArchitectureMismatchError(f"checkpoint uses {ksize}x{ksize} filters, expected 3x3")
    if expected_plan is not None and plan != tuple(expected_plan):
        raise ArchitectureMismatchError(
            f"checkpoint channel plan {plan} does not match expected {tuple(expected_plan)}"
        )
    shapes = [(co, ci, 3, 3) for ci, co in zip(plan[:-1], plan[1:])]
    n_weights = sum(int(np.prod(s)) for s in shapes)
    has_opt = "optimizer" in header
    expected = n_weights * (3 if has_opt else 1)
    if values.size != expected:
        raise FormatError(f"checkpoint holds {values.size} values, expected {expected}")

    def split(flat):
        out, pos = [], 0
        for s in shapes:
            k = int(np.prod(s))
            out.append(flat[pos:pos + k].reshape(s).copy())
            pos += k
        return out

    model = LcnnModel(split(values[:n_weights]), provenance)
    opt = None
    if has_opt:
        opt = (int(header["optimizer"]["step"]),
               split(values[n_weights:2 * n_weights]),
               split(values[2 * n_weights:]))
    return model, opt


def load_model(path, expected_plan=CHANNEL_PLAN):
    """Read a checkpoint, rejecting any architecture other than ``expected_plan``.

    Pass ``expected_plan=None`` to accept whatever plan the file declares.
    """
    return _load(path, expected_plan)[0]
