"""Random kernel gallery: anisotropic Gaussian degradation kernels.

The gallery is the whole training set. No images are involved; the network
learns to invert these kernels directly.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .fileformat import read_container, write_container

# Kernel support and sigma range used for the large scale factors.
HIGH_SCALE_KERNEL_SIZES = {8: 31, 16: 41, 32: 51}
HIGH_SCALE_SIGMA_RANGE = (0.175, 3.1)


@dataclass(frozen=True)
class GaussianParams:
    sigma1: float
    sigma2: float
    theta: float


@dataclass(frozen=True)
class DegradationKernel:
    grid: np.ndarray
    params: GaussianParams

    @property
    def size(self):
        return self.grid.shape[0]


@dataclass(frozen=True)
class GalleryConfig:
    count: int = 3200
    kernel_size: int = 21
    sigma_min: float = 0.175
    sigma_max: float = 6.0
    theta_min: float = 0.0
    theta_max: float = math.pi

    def __post_init__(self):
        if self.count < 0:
            raise ParameterError(f"count must be non-negative, got {self.count}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ParameterError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if not self.theta_min <= self.theta_max:
            raise ParameterError("theta_min must not exceed theta_max")

    @classmethod
    def for_scale(cls, scale, count=3200):
        """Gallery settings for scale factors 8/16/32 (larger support, narrower sigmas)."""
        if scale in HIGH_SCALE_KERNEL_SIZES:
            lo, hi = HIGH_SCALE_SIGMA_RANGE
            return cls(count=count, kernel_size=HIGH_SCALE_KERNEL_SIZES[scale],
                       sigma_min=lo, sigma_max=hi)
        return cls(count=count)


@dataclass
class KernelGallery:
    kernels: list
    seed: int
    config: GalleryConfig = field(default_factory=GalleryConfig)

    def __len__(self):
        return len(self.kernels)

    def grids(self):
        """All kernels stacked as a ``(count, size, size)`` array."""
        n = self.config.kernel_size
        if not self.kernels:
            return np.zeros((0, n, n))
        return np.stack([k.grid for k in self.kernels])


def sample_anisotropic_gaussian(params, size=21):
    """Anisotropic Gaussian evaluated at integer offsets from the center pixel.

    The covariance is ``R(theta) diag(sigma1^2, sigma2^2) R(theta)^T``; the
    result is normalized to unit sum, so mass outside the grid is dropped.
    """
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {size}")
    if not (params.sigma1 > 0 and params.sigma2 > 0):
        raise ParameterError(f"sigmas must be positive, got {params.sigma1}, {params.sigma2}")

    c, s = math.cos(params.theta), math.sin(params.theta)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([params.sigma1 ** 2, params.sigma2 ** 2]) @ rot.T
    prec = np.linalg.inv(cov)

    r = np.arange(size) - (size - 1) / 2
    di, dj = np.meshgrid(r, r, indexing="ij")
    q = prec[0, 0] * di * di + 2 * prec[0, 1] * di * dj + prec[1, 1] * dj * dj
    grid = np.exp(-0.5 * q)
    grid /= grid.sum()
    return DegradationKernel(grid=grid, params=params)


def generate_gallery(config=None, seed=0):
    """Draw ``config.count`` kernels with i.i.d. uniform sigmas and angle."""
    config = config or GalleryConfig()
    rng = np.random.default_rng(seed)
    draws = rng.uniform(
        low=[config.sigma_min, config.sigma_min, config.theta_min],
        high=[config.sigma_max, config.sigma_max, config.theta_max],
        size=(config.count, 3),
    )
    kernels = [
        sample_anisotropic_gaussian(GaussianParams(float(a), float(b), float(t)),
                                    config.kernel_size)
        for a, b, t in draws
    ]
    return KernelGallery(kernels=kernels, seed=int(seed), config=config)


def delta_target(size=21):
    """Discrete 2D impulse: one at the center pixel, zero elsewhere."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"impulse size must be odd, got {size}")
    d = np.zeros((size, size))
    d[size // 2, size // 2] = 1.0
    return d


def save_gallery(gallery, path):
    n = gallery.config.kernel_size
    header = {
        "seed": gallery.seed,
        "config": asdict(gallery.config),
        "count": len(gallery.kernels),
        "params": [[k.params.sigma1, k.params.sigma2, k.params.theta]
                   for k in gallery.kernels],
    }
    values = gallery.grids().reshape(-1) if gallery.kernels else np.zeros(0)
    assert values.size == len(gallery.kernels) * n * n
    write_container(path, b"GALL", header, values)


def load_gallery(path):
    header, values = read_container(path, b"GALL")
    try:
        config = GalleryConfig(**header["config"])
        count = int(header["count"])
        params = header["params"]
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"gallery header is incomplete: {exc}") from None
    n = config.kernel_size
    if count != config.count or len(params) != count:
        raise FormatError(
            f"declared count {count} disagrees with config count {config.count} "
            f"or {len(params)} parameter records"
        )
    if values.size != count * n * n:
        raise FormatError(f"payload holds {values.size} values, expected {count * n * n}")
    grids = values.reshape(count, n, n)
    kernels = [
        DegradationKernel(grid=grids[i].copy(), params=GaussianParams(*map(float, params[i])))
        for i in range(count)
    ]
    return KernelGallery(kernels=kernels, seed=seed, config=config)
