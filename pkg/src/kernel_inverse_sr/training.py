"""Identity-learning objective and the optimization loop.

For a degradation kernel ``K`` the network output ``f(K)`` should be the
discrete impulse. The loss is::

    ||f(K) - delta||^2 + lambda1 * |1 - sum(h)| + lambda2 * |1 - f(K)[center]|

where ``h`` is the network's effective kernel.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import lcnn
from .errors import ConfigError, DivergenceError
from .gallery import delta_target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DilLossTerms:
    identity_residual: float
    conv_area: float
    center: float
    total: float

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    # 0.1 diverges with this init and batch size; see the README
    learning_rate: float = 0.01
    step_size: int = 20
    gamma: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lambda1: float = 0.8
    lambda2: float = 0.2
    batch_size: int = 32
    rng_seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        for name in ("learning_rate", "gamma", "adam_epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.step_size < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and step_size >= 1 required")

    def lr_at(self, epoch):
        """Step-decayed learning rate for a zero-based epoch index."""
        return self.learning_rate * self.gamma ** (epoch // self.step_size)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    initial: dict = None

    def __len__(self):
        return len(self.epochs)

    def totals(self):
        return [e["total"] for e in self.epochs]


def _sign(x):
    # subgradient of |.| at 0 is 0
    return np.sign(x)


def _as_batch(kernels):
    k = np.asarray(kernels, dtype=np.float64)
    return k[None] if k.ndim == 2 else k


def dil_loss_and_grad(model, kernels, lambda1=0.8, lambda2=0.2, need_grad=True):
    """Batch-mean loss terms and their gradients with respect to every layer.

    ``kernels`` is one ``(n, n)`` kernel or a ``(B, n, n)`` batch. The identity
    and center terms are averaged over the batch; the area term depends only on
    the model and is counted once.
    """
    ks = _as_batch(kernels)
    b, n, _ = ks.shape
    c = n // 2
    delta = delta_target(n)

    out, acts = lcnn.forward_cached(model, ks)
    resid = out - delta
    ident = np.sum(resid * resid, axis=(1, 2))
    center_dev = 1.0 - out[:, c, c]

    m = lcnn.impulse_field_size(model)
    imp = np.zeros((1, m, m))
    imp[0, m // 2, m // 2] = 1.0
    imp_out, imp_acts = lcnn.forward_cached(model, imp)
    r = model.receptive_field
    lo = (m - r) // 2
    area_dev = 1.0 - imp_out[0, lo:lo + r, lo:lo + r].sum()

    terms = DilLossTerms(
        identity_residual=float(ident.mean()),
        conv_area=float(abs(area_dev)),
        center=float(np.abs(center_dev).mean()),
        total=float(ident.mean() + lambda1 * abs(area_dev)
                    + lambda2 * np.abs(center_dev).mean()),
    )
    if not need_grad:
        return terms, None

    g_out = 2.0 * resid / b
    g_out[:, c, c] -= lambda2 * _sign(center_dev) / b
    grads = lcnn.backward(model, acts, g_out)

    if lambda1 != 0.0 and area_dev != 0.0:
        g_imp = np.zeros((1, m, m))
        g_imp[0, lo:lo + r, lo:lo + r] = -lambda1 * _sign(area_dev)
        for g, gi in zip(grads, lcnn.backward(model, imp_acts, g_imp)):
            g += gi
    return terms, grads


def dil_loss(model, k, lambda1=0.8, lambda2=0.2):
    """Loss terms for a single kernel (a ``DegradationKernel`` or a 2D grid)."""
    grid = getattr(k, "grid", k)
    return dil_loss_and_grad(model, grid, lambda1, lambda2, need_grad=False)[0]


def evaluate(model, kernels, lambda1=0.8, lambda2=0.2, chunk=256):
    """Mean loss terms over many kernels, without gradients."""
    ks = _as_batch(kernels)
    if len(ks) == 0:
        raise ConfigError("cannot evaluate on an empty kernel set")
    ident = center = 0.0
    area = None
    for s in range(0, len(ks), chunk):
        part = ks[s:s + chunk]
        t = dil_loss_and_grad(model, part, lambda1, lambda2, need_grad=False)[0]
        ident += t.identity_residual * len(part)
        center += t.center * len(part)
        area = t.conv_area
    ident /= len(ks)
    center /= len(ks)
    return DilLossTerms(ident, area, center, ident + lambda1 * area + lambda2 * center)


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("parameter, gradient and optimizer state lists differ in length")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def _epoch_order(cfg, epoch, n):
    # per-epoch generator so a resumed run shuffles exactly like an unbroken one
    return np.random.default_rng([cfg.rng_seed, epoch]).permutation(n)


def train(model, gallery, cfg=None, run_dir=None, _resume=None):
    """Train a copy of ``model`` on the gallery; returns ``(model, history)``.

    With ``run_dir`` set, the config, a line-per-epoch history log and
    checkpoints (every ``cfg.checkpoint_every`` epochs and at the end) are
    written there. Use :func:`resume` to continue an interrupted run.
    """
    cfg = cfg or TrainConfig()
    kernels = gallery.grids() if hasattr(gallery, "grids") else _as_batch(gallery)
    if len(kernels) == 0:
        raise ConfigError("training needs a non-empty gallery")

    if _resume is None:
        model = model.copy()
        state = AdamState.zeros_like(model.layers)
        history = TrainHistory()
        history.initial = evaluate(model, kernels, cfg.lambda1, cfg.lambda2).as_dict()
        start = 0
    else:
        model, state, history = _resume
        start = len(history)

    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
        if start == 0:
            (run / "history.jsonl").write_text("")
            (run / "initial.json").write_text(json.dumps(history.initial))

    gallery_seed = getattr(gallery, "seed", None)
    for epoch in range(start, cfg.epochs):
        lr = cfg.lr_at(epoch)
        t0 = time.perf_counter()
        order = _epoch_order(cfg, epoch, len(kernels))
        sums = np.zeros(4)
        n_batches = 0
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = kernels[order[s:s + cfg.batch_size]]
            terms, grads = dil_loss_and_grad(model, batch, cfg.lambda1, cfg.lambda2)
            if not np.isfinite(terms.total) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}",
                    epoch=epoch + 1, batch=bi + 1,
                )
            adam_step(model.layers, grads, state, lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
            sums += (terms.identity_residual, terms.conv_area, terms.center, terms.total)
            n_batches += 1
        mean = sums / n_batches
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "identity_residual": mean[0],
            "conv_area": mean[1],
            "center": mean[2],
            "total": mean[3],
            "seconds": time.perf_counter() - t0,
        }
        history.epochs.append(record)
        model.provenance.update(gallery_seed=gallery_seed, epochs_completed=epoch + 1)
        log.info("epoch %d lr %.4g total %.6f", epoch + 1, lr, mean[3])

        if run is not None:
            with open(run / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            last = epoch + 1 == cfg.epochs
            if (epoch + 1) % cfg.checkpoint_every == 0 or last:
                lcnn.save_model(model, run / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt", state)
            if last:
                lcnn.save_model(model, run / "model.ckpt")
    return model, history


def latest_checkpoint(run_dir):
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def resume(run_dir, gallery, cfg=None):
    """Continue a run from its newest checkpoint.

    The history log is truncated to the checkpointed epoch, so the resumed
    trajectory is identical to an uninterrupted one.
    """
    run = Path(run_dir)
    if cfg is None:
        cfg = TrainConfig(**json.loads((run / "config.json").read_text()))
    ckpt = latest_checkpoint(run)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoint under {run / 'checkpoints'}")
    model, opt = lcnn._load(ckpt, None)
    if opt is None:
        raise ConfigError(f"{ckpt} carries no optimizer state")
    step, m, v = opt
    done = int(model.provenance.get("epochs_completed", 0))
    lines = (run / "history.jsonl").read_text().splitlines()[:done]
    (run / "history.jsonl").write_text("".join(line + "\n" for line in lines))
    history = TrainHistory([json.loads(line) for line in lines],
                           json.loads((run / "initial.json").read_text()))
    return train(model, gallery, cfg, run_dir=run, _resume=(model, AdamState(step, m, v), history))


def load_history(run_dir):
    run = Path(run_dir)
    lines = (run / "history.jsonl").read_text().splitlines()
    initial_path = run / "initial.json"
    initial = json.loads(initial_path.read_text()) if initial_path.exists() else None
    return TrainHistory([json.loads(line) for line in lines], initial)
