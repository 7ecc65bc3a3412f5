"""Multi-coil Cartesian MRI operators.

Conventions used throughout the package:

* images are complex 2-D arrays of shape ``(kx, ky)``,
* multi-coil k-space / coil images are complex 3-D arrays ``(nc, kx, ky)``,
* ``ky`` (the last axis) is the phase-encoding axis that gets undersampled,
* Fourier transforms are centered (DC at index ``n // 2``) and orthonormal,
  so the adjoint of the forward operator needs no extra scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SamplingMask",
    "fft2c",
    "ifft2c",
    "apply_mask",
    "expand",
    "reduce",
    "forward_op",
    "adjoint_op",
    "rss",
    "estimate_sensitivity",
]

_FFT_AXES = (-2, -1)


@dataclass(frozen=True)
class SamplingMask:
    """Cartesian phase-encoding line mask.

    Parameters
    ----------
    lines : np.ndarray
        Binary vector of length ``ky``; 1 marks a sampled line.
    acs_width : int
        Number of contiguous auto-calibration lines at the k-space center,
        always sampled.
    acceleration : int
        Nominal acceleration factor the mask was built for.
    """

    lines: np.ndarray
    acs_width: int
    acceleration: int = 1

    def __post_init__(self):
        lines = np.asarray(self.lines, dtype=np.float64)
        if lines.ndim != 1:
            raise ValueError("mask lines must be a 1-D vector")
        if not np.all((lines == 0) | (lines == 1)):
            raise ValueError("mask lines must be binary")
        if not 0 <= self.acs_width <= lines.size:
            raise ValueError("acs_width out of range")
        lo, hi = _acs_bounds(lines.size, self.acs_width)
        if self.acs_width > 0 and not np.all(lines[lo:hi] == 1):
            raise ValueError("ACS center lines must all be sampled")
        object.__setattr__(self, "lines", lines)

    @property
    def ky(self) -> int:
        return self.lines.size

    @property
    def num_sampled(self) -> int:
        return int(self.lines.sum())

    @property
    def effective_acceleration(self) -> float:
        return self.ky / max(self.num_sampled, 1)

    def acs_only(self) -> "SamplingMask":
        """Mask keeping only the auto-calibration region."""
        lo, hi = _acs_bounds(self.ky, self.acs_width)
        lines = np.zeros(self.ky)
        lines[lo:hi] = 1.0
        return SamplingMask(lines=lines, acs_width=self.acs_width,
                            acceleration=self.acceleration)


def _acs_bounds(ky: int, acs_width: int) -> tuple[int, int]:
    # center line at ky // 2, ACS block symmetric around it
    lo = ky // 2 - acs_width // 2
    return lo, lo + acs_width


def _check_finite(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered, orthonormal 2-D FFT over the trailing two axes."""
    img = _check_finite(np.asarray(img, dtype=np.complex128), "fft2c input")
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(img, axes=_FFT_AXES), axes=_FFT_AXES, norm="ortho"),
        axes=_FFT_AXES,
    )


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c` (centered, orthonormal)."""
    ksp = _check_finite(np.asarray(ksp, dtype=np.complex128), "ifft2c input")
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(ksp, axes=_FFT_AXES), axes=_FFT_AXES, norm="ortho"),
        axes=_FFT_AXES,
    )


def _mask_weight(mask: SamplingMask, ky: int) -> np.ndarray:
    if mask.ky != ky:
        raise ValueError(f"mask length {mask.ky} does not match ky={ky}")
    return mask.lines  # broadcasts over the trailing axis


def apply_mask(ksp: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Zero the unsampled phase-encoding lines. Idempotent."""
    ksp = np.asarray(ksp, dtype=np.complex128)
    return ksp * _mask_weight(mask, ksp.shape[-1])


def expand(img: np.ndarray, sens: np.ndarray) -> np.ndarray:
    """Coil expansion: image -> per-coil images ``S_c * x``."""
    img = np.asarray(img, dtype=np.complex128)
    sens = np.asarray(sens, dtype=np.complex128)
    if sens.ndim != 3 or img.shape != sens.shape[1:]:
        raise ValueError(
            f"image shape {img.shape} incompatible with sensitivity shape {sens.shape}")
    return sens * img[None]


def reduce(coil_imgs: np.ndarray, sens: np.ndarray) -> np.ndarray:
    """Coil reduction: sum_c conj(S_c) * y_c, adjoint of :func:`expand`."""
    coil_imgs = np.asarray(coil_imgs, dtype=np.complex128)
    sens = np.asarray(sens, dtype=np.complex128)
    if coil_imgs.shape != sens.shape:
        raise ValueError(
            f"coil image shape {coil_imgs.shape} != sensitivity shape {sens.shape}")
    return np.sum(np.conj(sens) * coil_imgs, axis=0)


def forward_op(img: np.ndarray, sens: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Accelerated parallel-imaging forward model: mask(FFT(coil expansion))."""
    return apply_mask(fft2c(expand(img, sens)), mask)


def adjoint_op(ksp: np.ndarray, sens: np.ndarray, mask: SamplingMask) -> np.ndarray:
    """Adjoint of :func:`forward_op`: coil reduction(IFFT(mask))."""
    return reduce(ifft2c(apply_mask(ksp, mask)), sens)


def rss(coil_imgs: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares coil combination (real, nonnegative)."""
    coil_imgs = np.asarray(coil_imgs)
    if coil_imgs.ndim < 3 or coil_imgs.shape[0] < 1:
        raise ValueError("expected at least one coil image of shape (nc, kx, ky)")
    return np.sqrt(np.sum(np.abs(coil_imgs) ** 2, axis=0))


def estimate_sensitivity(ksp: np.ndarray, mask: SamplingMask,
                         epsilon: float = 1e-12) -> np.ndarray:
    """Estimate coil sensitivities from the auto-calibration region.

    Per-coil low-resolution images are obtained by inverse-transforming the
    ACS-only k-space, then normalized by their RSS so that the output RSS is
    1 on the supported voxels and 0 where the RSS falls below
    ``epsilon * max(RSS)``.

    Parameters
    ----------
    ksp : np.ndarray
        Multi-coil k-space, shape ``(nc, kx, ky)``.
    mask : SamplingMask
        Sampling mask whose ``acs_width`` defines the calibration region.
    epsilon : float
        Relative support threshold on the RSS of the low-resolution images.

    Returns
    -------
    np.ndarray
        Unit-RSS sensitivity maps, shape ``(nc, kx, ky)``.
    """
    ksp = np.asarray(ksp, dtype=np.complex128)
    if ksp.ndim != 3:
        raise ValueError("expected multi-coil k-space of shape (nc, kx, ky)")
    if mask.acs_width < 1:
        raise ValueError("sensitivity estimation needs a nonempty ACS region")
    low_res = ifft2c(apply_mask(ksp, mask.acs_only()))
    norm = rss(low_res)
    support = norm > epsilon * norm.max() if norm.max() > 0 else np.zeros_like(norm, bool)
    sens = np.zeros_like(low_res)
    np.divide(low_res, norm[None], out=sens, where=support[None])
    return sens
