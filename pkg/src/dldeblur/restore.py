"""Test-time restoration: patch prediction, deblurring, zoom and metrics."""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import imageproc as ip
from .errors import ConvergenceError, InvalidInputError
from .sparse_coding import lasso_batch, lasso_solve

#: Pixels excluded from every border when computing PSNR.
BORDER_MARGIN = 13


@dataclass
class RestorationReport:
    psnr_input: float
    psnr_output: float
    isnr: float
    border_margin: int
    runtime: float | None = None

    def to_text(self):
        lines = [
            f"psnr_input: {format_db(self.psnr_input)}",
            f"psnr_output: {format_db(self.psnr_output)}",
            f"isnr: {format_db(self.isnr)}",
            f"border_margin: {self.border_margin}",
        ]
        if self.runtime is not None:
            lines.append(f"runtime: {self.runtime:.3f}")
        return "\n".join(lines) + "\n"


def format_db(value):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6f}"


def predict_patch(model, b, b_tilde):
    """``W bt + Ds alpha(b, Db)`` for one patch (unit intensity scale)."""
    b = np.asarray(b, dtype=np.float64)
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    n_b = model.patch_size_blurry ** 2
    if b.shape != (n_b,) or b_tilde.shape != (n_b,):
        raise InvalidInputError(f"patches must have length {n_b}")
    code = lasso_solve(b, model.dict_blurry, model.lam)
    return model.linear_predictor @ b_tilde + model.dict_sharp @ code.coefficients


def predict_patches(model, B, Bt, chunk=4096):
    """Row-wise :func:`predict_patch` for many patches."""
    out = np.empty((len(B), model.patch_size_sharp ** 2))
    use_dict = np.any(model.dict_sharp)
    for lo in range(0, len(B), chunk):
        b = np.asarray(B[lo:lo + chunk], dtype=np.float64)
        pred = np.asarray(Bt[lo:lo + chunk], dtype=np.float64) @ model.linear_predictor.T
        if use_dict:
            A, ok = lasso_batch(b, model.dict_blurry, model.lam, warm_start=True)
            if not ok.all():
                raise ConvergenceError(f"{int((~ok).sum())} patch codes did not converge")
            pred += A @ model.dict_sharp.T
        out[lo:lo + chunk] = pred
    return out


def deblur(model, blurry, denoiser="passthrough", stride=1, return_counts=False):
    """Restore a blurry image by averaging overlapping patch predictions.

    Pixels that no predicted patch covers keep the value of the denoised
    input.
    """
    blurry = np.asarray(blurry, dtype=np.float64)
    m_b, m_s = model.patch_size_blurry, model.patch_size_sharp
    if blurry.ndim != 2 or min(blurry.shape) < m_b:
        raise InvalidInputError(f"image {blurry.shape} smaller than the {m_b}x{m_b} patch")
    denoised = ip.denoise(blurry, denoiser)
    centers = ip.patch_centers(blurry.shape, m_b, stride)
    scale = ip.INTENSITY_SCALE
    B = ip.extract_patches(blurry / scale, m_b, centers)
    Bt = ip.extract_patches(denoised / scale, m_b, centers)
    pred = predict_patches(model, B, Bt) * scale
    return ip.aggregate_predictions(pred, centers, blurry.shape, denoised, return_counts)


def zoom(model, low, factor, denoiser="passthrough", stride=1):
    """Digital zoom: deblur the bicubic upsampling of ``low``."""
    return deblur(model, ip.upsample_bicubic(low, factor), denoiser, stride)


def _crop(img, margin):
    if margin == 0:
        return img
    return img[margin:img.shape[0] - margin, margin:img.shape[1] - margin]


def psnr(reference, test, margin=BORDER_MARGIN):
    """Peak SNR in dB for 8-bit dynamics, ignoring ``margin`` border pixels.

    Identical images give ``inf``.
    """
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise InvalidInputError(f"shape mismatch {reference.shape} vs {test.shape}")
    if margin < 0:
        raise InvalidInputError("margin must be >= 0")
    diff = _crop(reference, margin) - _crop(test, margin)
    if diff.size == 0:
        raise InvalidInputError("margin leaves no pixels")
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def isnr(reference, degraded, restored, margin=BORDER_MARGIN):
    """PSNR gain of ``restored`` over ``degraded``."""
    out, inp = psnr(reference, restored, margin), psnr(reference, degraded, margin)
    if math.isinf(out) and math.isinf(inp):
        return 0.0
    return out - inp


def evaluate(reference, degraded, restored, margin=BORDER_MARGIN, runtime=None):
    p_in = psnr(reference, degraded, margin)
    p_out = psnr(reference, restored, margin)
    gain = 0.0 if (math.isinf(p_in) and math.isinf(p_out)) else p_out - p_in
    return RestorationReport(p_in, p_out, gain, margin, runtime)


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
