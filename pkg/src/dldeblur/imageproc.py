"""Pixel-level machinery: blur kernels, degradation, resampling, patches, I/O.

Images are 2-D float64 arrays with nominal intensities in [0, 255]. They are
never clipped inside the pipeline; clipping and rounding only happen in
:func:`write_image`.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage
from scipy import ndimage

from .dict_learn import PatchPairSet
from .errors import InvalidInputError

#: Divisor taking pixel intensities to the unit range the models work in.
INTENSITY_SCALE = 255.0

BINOMIAL_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0])
RATIONAL_DEFAULT_SIZE = 15
ANTIALIAS_SIGMA_SCALE = 0.4
# BT.601 luma
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class KernelSpec:
    """Recipe for a blur kernel.

    ``variant`` is one of ``uniform``, ``rational``, ``binomial``,
    ``gaussian`` or ``file``. ``size`` is the odd side length (uniform,
    rational), ``sigma`` the standard deviation of the Gaussian and ``path``
    the text file holding a kernel grid.
    """

    variant: str
    size: int | None = None
    sigma: float | None = None
    path: str | None = None

    def __post_init__(self):
        if self.variant not in ("uniform", "rational", "binomial", "gaussian", "file"):
            raise InvalidInputError(f"unknown kernel variant {self.variant!r}")
        if self.variant in ("uniform", "rational"):
            if self.size is None or self.size < 1 or self.size % 2 == 0:
                raise InvalidInputError(f"{self.variant} kernel needs an odd positive size")
        if self.variant == "gaussian" and not (self.sigma and self.sigma > 0):
            raise InvalidInputError("gaussian kernel needs sigma > 0")
        if self.variant == "file" and not self.path:
            raise InvalidInputError("file kernel needs a path")

    def __str__(self):
        if self.variant in ("uniform", "rational"):
            return f"{self.variant}:{self.size}"
        if self.variant == "gaussian":
            return f"gaussian:{self.sigma:g}"
        if self.variant == "file":
            return f"file:{self.path}"
        return "binomial"

    @classmethod
    def parse(cls, text):
        """Parse ``uniform:9``, ``rational[:15]``, ``binomial``, ``gaussian:1``
        or ``file:PATH``."""
        name, _, arg = text.strip().partition(":")
        name = name.lower()
        try:
            if name == "uniform":
                return cls("uniform", size=int(arg))
            if name == "rational":
                return cls("rational", size=int(arg) if arg else RATIONAL_DEFAULT_SIZE)
            if name == "binomial":
                return cls("binomial")
            if name == "gaussian":
                return cls("gaussian", sigma=float(arg))
            if name == "file":
                return cls("file", path=arg)
        except ValueError as exc:
            raise InvalidInputError(f"bad kernel spec {text!r}: {exc}") from None
        raise InvalidInputError(f"unknown kernel spec {text!r}")


#: Blur/noise settings of the six isotropic experiments (kernel, noise variance).
EXPERIMENTS = {
    "exp1": (KernelSpec("uniform", size=9), 0.308),
    "exp2": (KernelSpec("rational", size=RATIONAL_DEFAULT_SIZE), 2.0),
    "exp3": (KernelSpec("rational", size=RATIONAL_DEFAULT_SIZE), 8.0),
    "exp4": (KernelSpec("binomial"), 49.0),
    "exp5": (KernelSpec("gaussian", sigma=1.0), 25.0),
    "exp6": (KernelSpec("gaussian", sigma=2.0), 25.0),
}


def gaussian_kernel(sigma):
    half = math.ceil(4.0 * sigma)
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def load_kernel_file(path):
    """Kernel stored as whitespace-separated rows of numbers."""
    try:
        k = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read kernel file {path}: {exc}") from None
    return k


def make_kernel(spec):
    """Normalized 2-D blur kernel for ``spec`` (a KernelSpec or its string form)."""
    if isinstance(spec, str):
        spec = KernelSpec.parse(spec)
    if spec.variant == "uniform":
        k = np.ones((spec.size, spec.size))
    elif spec.variant == "rational":
        half = spec.size // 2
        x = np.arange(-half, half + 1, dtype=np.float64)
        k = 1.0 / (1.0 + x[:, None] ** 2 + x[None, :] ** 2)
    elif spec.variant == "binomial":
        k = np.outer(BINOMIAL_TAPS, BINOMIAL_TAPS)
    elif spec.variant == "gaussian":
        k = gaussian_kernel(spec.sigma)
    else:
        k = load_kernel_file(spec.path)
        if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise InvalidInputError(f"kernel file {spec.path} has even support {k.shape}")
    if not np.all(np.isfinite(k)):
        raise InvalidInputError("kernel has non-finite weights")
    total = k.sum()
    if total <= 0:
        raise InvalidInputError("kernel weights must have a positive sum")
    return k / total


def _as_image(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InvalidInputError(f"expected a non-empty 2-D image, got shape {img.shape}")
    return img


def convolve(img, kernel):
    """Same-size convolution with half-sample symmetric boundary extension."""
    img = _as_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise InvalidInputError(f"kernel must be 2-D with odd sides, got {kernel.shape}")
    if kernel.shape[0] > img.shape[0] or kernel.shape[1] > img.shape[1]:
        raise InvalidInputError(f"kernel {kernel.shape} larger than image {img.shape}")
    return ndimage.convolve(img, kernel, mode="reflect")


def add_gaussian_noise(img, variance, seed):
    img = _as_image(img)
    if variance < 0:
        raise InvalidInputError("noise variance must be non-negative")
    if variance == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, math.sqrt(variance), size=img.shape)


def degrade(sharp, kernel, variance, seed):
    """Blur then add white Gaussian noise."""
    return add_gaussian_noise(convolve(sharp, kernel), variance, seed)


def parse_denoiser(method):
    """Normalize a denoiser description to ``("passthrough", None)`` or
    ``("gaussian", sigma)``."""
    if method is None:
        return ("passthrough", None)
    if isinstance(method, tuple):
        return method
    name, _, arg = str(method).partition(":")
    if name in ("passthrough", "none", ""):
        return ("passthrough", None)
    if name == "gaussian":
        try:
            sigma = float(arg) if arg else 1.0
        except ValueError:
            raise InvalidInputError(f"bad denoiser {method!r}") from None
        if sigma <= 0:
            raise InvalidInputError("gaussian denoiser needs sigma > 0")
        return ("gaussian", sigma)
    raise InvalidInputError(f"unknown denoiser {method!r}")


def denoiser_name(method):
    name, sigma = parse_denoiser(method)
    return name if sigma is None else f"{name}:{sigma:g}"


def denoise(img, method="passthrough"):
    """Stand-in pre-denoiser: identity or a Gaussian smoothing."""
    img = _as_image(img)
    name, sigma = parse_denoiser(method)
    if name == "passthrough":
        return img.copy()
    return convolve(img, gaussian_kernel(sigma))


# -- resampling -------------------------------------------------------------

def keys_cubic(x, a=-0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _reflect_index(idx, n):
    # half-sample symmetric: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


def _resample_matrix(n_in, n_out, positions):
    """Rows of bicubic weights mapping ``n_in`` samples to ``positions``."""
    base = np.floor(positions).astype(np.int64)
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in range(-1, 3):
        taps = base + off
        w = keys_cubic(positions - taps)
        np.add.at(M, (rows, _reflect_index(taps, n_in)), w)
    return M


def _resample(img, out_shape, positions_fn):
    h, w = img.shape
    ho, wo = out_shape
    R = _resample_matrix(h, ho, positions_fn(np.arange(ho), h, ho))
    C = _resample_matrix(w, wo, positions_fn(np.arange(wo), w, wo))
    return R @ img @ C.T


def _check_factor(factor):
    if int(factor) != factor or factor < 2:
        raise InvalidInputError(f"resampling factor must be an integer >= 2, got {factor}")
    return int(factor)


def upsample_bicubic(img, factor):
    """Bicubic interpolation to ``factor`` times the size (pixel-center aligned)."""
    img = _as_image(img)
    f = _check_factor(factor)
    return _resample(img, (img.shape[0] * f, img.shape[1] * f),
                     lambda u, n, m: (u + 0.5) / f - 0.5)


def downsample_antialias(img, factor, sigma_scale=ANTIALIAS_SIGMA_SCALE):
    """Gaussian low-pass (sigma = sigma_scale * factor) then bicubic decimation."""
    img = _as_image(img)
    f = _check_factor(factor)
    smooth = ndimage.gaussian_filter(img, sigma_scale * f, mode="reflect", truncate=4.0)
    out = (math.ceil(img.shape[0] / f), math.ceil(img.shape[1] / f))
    return _resample(smooth, out, lambda u, n, m: (u + 0.5) * f - 0.5)


def zoom_degrade(sharp, factor, sigma_scale=ANTIALIAS_SIGMA_SCALE):
    """Low-resolution version of ``sharp`` interpolated back to its size.

    Sizes that are not multiples of ``factor`` are cropped so the round trip
    lands on the original grid.
    """
    sharp = _as_image(sharp)
    f = _check_factor(factor)
    h, w = (sharp.shape[0] // f) * f, (sharp.shape[1] // f) * f
    low = downsample_antialias(sharp[:h, :w], f, sigma_scale)
    return upsample_bicubic(low, f), (h, w)


# -- patches ----------------------------------------------------------------

def _check_sizes(m_s, m_b):
    if m_s < 1 or m_b < 1 or m_s % 2 == 0 or m_b % 2 == 0:
        raise InvalidInputError(f"patch sizes must be odd and positive, got {m_s}, {m_b}")
    if m_b < m_s:
        raise InvalidInputError(f"blurry patch size {m_b} smaller than sharp size {m_s}")


def patch_centers(shape, m_b, stride=1):
    """Row/column arrays of every center whose ``m_b`` window fits the image."""
    r = m_b // 2
    h, w = shape
    if h < m_b or w < m_b:
        raise InvalidInputError(f"image {shape} too small for {m_b}x{m_b} patches")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    rows = np.arange(r, h - r, stride)
    cols = np.arange(r, w - r, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def extract_patches(img, m, centers):
    """Row-major flattened ``m x m`` windows centered on each of ``centers``."""
    windows = sliding_window_view(_as_image(img), (m, m))
    half = m // 2
    return windows[centers[:, 0] - half, centers[:, 1] - half].reshape(len(centers), m * m)


def sample_centers(shape, m_b, stride=1, limit=None, seed=0):
    centers = patch_centers(shape, m_b, stride)
    if limit is not None and len(centers) > limit:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(centers), size=limit, replace=False))
        centers = centers[keep]
    return centers


def extract_patch_pairs(sharp, blurry, blurry_denoised, m_s, m_b, stride=1, limit=None, seed=0):
    """Co-centered sharp/blurry/denoised patch triples from one image pair."""
    sharp, blurry, blurry_denoised = (_as_image(a) for a in (sharp, blurry, blurry_denoised))
    if not sharp.shape == blurry.shape == blurry_denoised.shape:
        raise InvalidInputError("sharp, blurry and denoised images differ in size")
    _check_sizes(m_s, m_b)
    centers = sample_centers(sharp.shape, m_b, stride, limit, seed)
    return PatchPairSet(
        blurry=extract_patches(blurry, m_b, centers),
        blurry_denoised=extract_patches(blurry_denoised, m_b, centers),
        sharp=extract_patches(sharp, m_s, centers),
        centers=centers,
    )


def aggregate_predictions(patches, centers, shape, fallback, return_counts=False):
    """Average overlapping ``m x m`` patch predictions into an image.

    Pixels covered by no patch take their value from ``fallback``. The
    accumulation order is fixed (offset by offset), so the result does not
    depend on how the predictions were produced.
    """
    patches = np.asarray(patches, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    fallback = _as_image(fallback)
    if fallback.shape != tuple(shape):
        raise InvalidInputError("fallback image does not match the output shape")
    m = math.isqrt(patches.shape[1]) if patches.size else 1
    half = m // 2
    total = np.zeros(shape)
    count = np.zeros(shape, dtype=np.int64)
    if len(centers):
        if (centers.min(axis=0) < half).any() or (centers[:, 0].max() >= shape[0] - half) \
                or (centers[:, 1].max() >= shape[1] - half):
            raise InvalidInputError("patch centers too close to the border")
        # centers are distinct, so each offset writes every pixel at most once
        for di in range(m):
            for dj in range(m):
                rows = centers[:, 0] + (di - half)
                cols = centers[:, 1] + (dj - half)
                total[rows, cols] += patches[:, di * m + dj]
                count[rows, cols] += 1
    out = fallback.copy()
    covered = count > 0
    out[covered] = total[covered] / count[covered]
    if return_counts:
        return out, count
    return out


# -- image files ------------------------------------------------------------

def read_image(path):
    """Load a grayscale image as float64 in [0, 255].

    RGB(A) images are converted with BT.601 luma weights; 16-bit data is
    rescaled to the 8-bit range.
    """
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                maxval = 65535.0 if arr.max(initial=0) > 255 or im.mode.startswith("I;16") else 255.0
                return arr * (255.0 / maxval)
            if im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr", "LA", "PA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
                return rgb @ LUMA_WEIGHTS
            if im.mode == "1":
                return np.asarray(im.convert("L"), dtype=np.float64)
            return np.asarray(im.convert("L") if im.mode != "L" else im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read image {path}: {exc}") from None


def quantize(img, bits=8):
    """Clip to [0, 255] and round half away from zero to integer levels."""
    img = np.clip(_as_image(img), 0.0, 255.0)
    if bits == 8:
        return np.floor(img + 0.5).astype(np.uint8)
    if bits == 16:
        return np.floor(img * (65535.0 / 255.0) + 0.5).astype(np.uint16)
    raise InvalidInputError("bits must be 8 or 16")


def write_image(path, img, bits=8):
    """Write PNG or binary PGM depending on the file suffix."""
    path = Path(path)
    data = quantize(img, bits)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        maxval = 255 if bits == 8 else 65535
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n{maxval}\n".encode("ascii")
        body = data.astype(">u2").tobytes() if bits == 16 else data.tobytes()
        path.write_bytes(header + body)
        return
    if suffix != ".png":
        raise InvalidInputError(f"unsupported image format {suffix!r} (use .png or .pgm)")
    if bits == 16:
        im = PILImage.fromarray(data.astype(np.uint16))
    else:
        im = PILImage.fromarray(data)
    im.save(path, format="PNG")
