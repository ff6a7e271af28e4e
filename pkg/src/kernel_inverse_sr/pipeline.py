"""Image side: degradation simulator, bicubic resampling and SR inference.

Images are float arrays in ``[0, 1]`` shaped ``(H, W)`` or ``(H, W, C)``.
"""

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import lcnn
from .errors import FormatError, NumericError, ParameterError
from .gallery import (
    HIGH_SCALE_KERNEL_SIZES,
    HIGH_SCALE_SIGMA_RANGE,
    DegradationKernel,
    GaussianParams,
    sample_anisotropic_gaussian,
)

SUPPORTED_SCALES = (2, 3, 4, 8, 16, 32)


# -- resampling -------------------------------------------------------------

def cubic(x, a=-0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_size, out_size):
    """``(out_size, in_size)`` matrix of 1D bicubic interpolation weights.

    Pixel centers map as ``x_in = (x_out + 0.5) / scale - 0.5``. When
    shrinking, the kernel is stretched by ``1 / scale`` for antialiasing.
    Out-of-range taps are folded onto the nearest edge pixel.
    """
    scale = out_size / in_size
    stretch = 1.0 / scale if scale < 1 else 1.0
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    radius = 2.0 * stretch
    first = np.floor(centers - radius).astype(int) + 1
    taps = int(np.ceil(2 * radius)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic((centers[:, None] - idx) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_size - 1).ravel()), w.ravel())
    return mat


def bicubic_resize(img, out_h, out_w):
    """Separable bicubic resampling (a = -0.5, half-pixel centers, edge replicate)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    rh = resize_weights(img.shape[0], out_h)
    rw = resize_weights(img.shape[1], out_w)
    out = np.tensordot(rh, img, axes=([1], [0]))
    out = np.tensordot(rw, out, axes=([1], [1]))
    return np.swapaxes(out, 0, 1)


def upscale(img, s):
    return bicubic_resize(img, img.shape[0] * s, img.shape[1] * s)


# -- degradation --------------------------------------------------------------

def _per_channel(img, fn):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return fn(img)
    return np.stack([fn(img[..., c]) for c in range(img.shape[2])], axis=-1)


def blur(img, kernel):
    """Per-channel same-size convolution with edge-replicate padding."""
    k = getattr(kernel, "grid", kernel)
    return _per_channel(img, lambda ch: ndimage.convolve(ch, k, mode="nearest"))


def degrade(x, kernel, s):
    """Blur with ``kernel`` then keep every ``s``-th pixel, starting at ``s // 2``."""
    x = np.asarray(x, dtype=np.float64)
    if s < 1:
        raise ParameterError(f"scale factor must be positive, got {s}")
    if x.shape[0] % s or x.shape[1] % s:
        raise ParameterError(f"image size {x.shape[:2]} is not divisible by scale {s}")
    blurred = blur(x, kernel)
    ph = s // 2
    return blurred[ph::s, ph::s]


def crop_to_multiple(x, s):
    h, w = x.shape[0] - x.shape[0] % s, x.shape[1] - x.shape[1] % s
    return x[:h, :w]


# -- super-resolution ---------------------------------------------------------

def apply_model(model, img, collapse=False):
    """Run the learned operator on every channel of an image.

    The image is edge-replicated by the receptive radius before the network
    runs, so its internal zero padding never reaches an original pixel and the
    result equals replicate-padded convolution with the effective kernel.
    """
    img = np.asarray(img, dtype=np.float64)
    if collapse:
        h = lcnn.effective_kernel(model)
        return _per_channel(img, lambda ch: ndimage.convolve(ch, h, mode="nearest"))
    r = len(model.layers)
    chans = img[None] if img.ndim == 2 else np.moveaxis(img, -1, 0)
    padded = np.pad(chans, ((0, 0), (r, r), (r, r)), mode="edge")
    out = lcnn.forward(model, padded)[:, r:-r, r:-r]
    return out[0] if img.ndim == 2 else np.moveaxis(out, 0, -1)


def super_resolve(model, y, s, collapse=False):
    """Bicubic-upscale ``y`` by ``s``, apply the learned inverse kernel, clamp.

    The same model serves every scale factor.
    """
    out = apply_model(model, upscale(y, s), collapse=collapse)
    if not np.all(np.isfinite(out)):
        raise NumericError("super-resolution produced non-finite values")
    return np.clip(out, 0.0, 1.0)


def bicubic_baseline(y, s):
    return np.clip(upscale(y, s), 0.0, 1.0)


# -- evaluation sets ----------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """How evaluation kernels are drawn.

    ``noise`` is the half-width of a uniform multiplicative perturbation
    ``U[1 - noise, 1 + noise]`` applied per entry before renormalization.
    """

    size: int = 21
    sigma_min: float = 0.175
    sigma_max: float = 6.0
    noise: float = 0.0

    @classmethod
    def in_distribution(cls, s=2):
        if s in HIGH_SCALE_KERNEL_SIZES:
            lo, hi = HIGH_SCALE_SIGMA_RANGE
            return cls(size=HIGH_SCALE_KERNEL_SIZES[s], sigma_min=lo, sigma_max=hi)
        return cls()

    @classmethod
    def unseen(cls, s=2, noise=0.25):
        return cls(size=11 if s == 2 else 21, sigma_min=3.0, sigma_max=5.0, noise=noise)


def draw_kernel(spec, rng):
    s1, s2 = rng.uniform(spec.sigma_min, spec.sigma_max, size=2)
    theta = rng.uniform(0.0, np.pi)
    k = sample_anisotropic_gaussian(GaussianParams(float(s1), float(s2), float(theta)), spec.size)
    if spec.noise == 0:
        return k
    grid = k.grid * rng.uniform(1.0 - spec.noise, 1.0 + spec.noise, size=k.grid.shape)
    return DegradationKernel(grid=grid / grid.sum(), params=k.params)


@dataclass(frozen=True)
class EvalTriple:
    name: str
    hr: np.ndarray
    lr: np.ndarray
    kernel: DegradationKernel


def synth_eval_set(hr_images, kernel_spec, s, seed=0):
    """Degrade each HR image with its own random kernel.

    ``hr_images`` is a list of arrays or a dict ``name -> array``. Images are
    cropped to a multiple of ``s`` first.
    """
    items = hr_images.items() if isinstance(hr_images, dict) else (
        (f"img{i:03d}", im) for i, im in enumerate(hr_images))
    rng = np.random.default_rng(seed)
    triples = []
    for name, hr in items:
        hr = crop_to_multiple(np.asarray(hr, dtype=np.float64), s)
        k = draw_kernel(kernel_spec, rng)
        triples.append(EvalTriple(name, hr, degrade(hr, k, s), k))
    return triples


# -- files --------------------------------------------------------------------

def read_png(path):
    """8-bit PNG as float ``[0, 1]``; grayscale stays 2D, alpha is dropped."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(img):
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(path)


def bundled_hr_images():
    """The HR test images shipped with the package, as ``name -> array``."""
    root = resources.files("kernel_inverse_sr") / "data" / "hr"
    out = {}
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".png"):
            with resources.as_file(entry) as p:
                out[entry.name[:-4]] = read_png(p)
    return out


def write_manifest(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path):
    """Line-delimited records with ``hr``, ``lr``, ``kernel`` and ``scale`` keys.

    Relative paths are resolved against the manifest's directory.
    """
    base = Path(path).parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                rec = {k: r[k] for k in ("hr", "lr", "kernel")}
                rec["scale"] = int(r["scale"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"manifest line {lineno}: {exc}") from None
            for k in ("hr", "lr", "kernel"):
                rec[k] = str(base / rec[k])
            rec["name"] = r.get("name", Path(rec["hr"]).stem)
            records.append(rec)
    return records
