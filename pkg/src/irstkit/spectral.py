"""Differentiable 2-D spectra: FFT/IFFT, polar views, phase rectification,
and the dataset-level spectrum profiler.

Transforms run per channel over the last two axes. The forward transform is
unnormalized; the inverse carries the 1/(H*W) factor. Both are linear maps, so
their vector-Jacobian products are again transforms of the incoming gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    Tensor,
    _result,
    batch_norm,
    conv2d,
    leaky_relu,
    tanh,
)

MAG_DELTA = 1e-8  # smoothing of the magnitude (and phase-grad denominator) at the origin


@dataclass
class ComplexGrid:
    """Cartesian complex spectrum as a pair of real tensors."""

    re: Tensor
    im: Tensor

    @property
    def shape(self):
        return self.re.shape

    def to_numpy(self) -> np.ndarray:
        return self.re.values + 1j * self.im.values


@dataclass
class PolarSpectrum:
    """Polar complex spectrum: amplitude >= 0 and phase in (-pi, pi]."""

    amplitude: Tensor
    phase: Tensor


def _require_pow2(h: int, w: int, what: str) -> None:
    for n in (h, w):
        if n < 1 or (n & (n - 1)) != 0:
            raise ShapeError(f"{what}: spatial dims must be powers of two, got {h}x{w}")


def _fft_kernel(a: np.ndarray) -> np.ndarray:
    return sfft.fft2(a, axes=(2, 3))


def _ifft_kernel(a: np.ndarray) -> np.ndarray:
    return sfft.ifft2(a, axes=(2, 3))


def fft2(x: Tensor) -> ComplexGrid:
    """Unnormalized forward transform of a real tensor."""
    _, _, h, w = x.shape
    _require_pow2(h, w, "fft2")
    z = _fft_kernel(x.values)
    re = _result(np.ascontiguousarray(z.real), (x,), lambda g: (_fft_kernel(g).real.copy(),))
    im = _result(np.ascontiguousarray(z.imag), (x,), lambda g: (_fft_kernel(g).imag.copy(),))
    return ComplexGrid(re=re, im=im)


def ifft2(z: ComplexGrid) -> ComplexGrid:
    """Inverse transform with the 1/(H*W) factor, complex in and complex out."""
    _, _, h, w = z.shape
    _require_pow2(h, w, "ifft2")
    wv = _ifft_kernel(z.re.values + 1j * z.im.values)

    def vjp_re(g):
        hh = _ifft_kernel(g)
        return (hh.real.copy(), -hh.imag)

    def vjp_im(g):
        hh = _ifft_kernel(g)
        return (hh.imag.copy(), hh.real.copy())

    re = _result(np.ascontiguousarray(wv.real), (z.re, z.im), vjp_re)
    im = _result(np.ascontiguousarray(wv.imag), (z.re, z.im), vjp_im)
    return ComplexGrid(re=re, im=im)


def to_polar(z: ComplexGrid) -> PolarSpectrum:
    """Amplitude sqrt(re^2 + im^2 + delta^2) and phase atan2(im, re)."""
    rv, iv = z.re.values, z.im.values
    amp = np.sqrt(rv * rv + iv * iv + MAG_DELTA * MAG_DELTA)
    ph = np.arctan2(iv, rv)
    ph = np.where(ph == -np.pi, np.pi, ph)  # keep phase in (-pi, pi]
    denom = rv * rv + iv * iv + MAG_DELTA * MAG_DELTA

    amplitude = _result(amp, (z.re, z.im), lambda g: (g * rv / amp, g * iv / amp))
    phase = _result(ph, (z.re, z.im), lambda g: (-g * iv / denom, g * rv / denom))
    return PolarSpectrum(amplitude=amplitude, phase=phase)


def from_polar(s: PolarSpectrum) -> ComplexGrid:
    av, pv = s.amplitude.values, s.phase.values
    cos_p, sin_p = np.cos(pv), np.sin(pv)
    re = _result(
        av * cos_p, (s.amplitude, s.phase), lambda g: (g * cos_p, -g * av * sin_p)
    )
    im = _result(
        av * sin_p, (s.amplitude, s.phase), lambda g: (g * sin_p, g * av * cos_p)
    )
    return ComplexGrid(re=re, im=im)


# -- phase rectification -------------------------------------------------------


@dataclass
class PrmParams:
    """Frequency-domain rectification branch parameters for one stage.

    Two 1x1-conv bottleneck branches act on the polar spectrum of the
    batch-normalized feature map: the phase branch produces a bounded additive
    correction, the amplitude branch a filtered amplitude. Hidden width is
    C/2 with a floor of 4.
    """

    bn: BatchNormParams
    phase_c1: ConvParams
    phase_c2: ConvParams
    amp_c1: ConvParams
    amp_c2: ConvParams

    @staticmethod
    def hidden_width(channels: int) -> int:
        return max(4, channels // 2)


def prm_forward(e: Tensor, p: PrmParams) -> Tensor:
    """Rectify a feature map through its spectrum and gate it residually.

    With all branch convolutions zero-initialized the output equals the input
    exactly: the phase correction is tanh(0)=0 and the filtered amplitude is 0,
    so the indication map vanishes and only the residual term remains.
    """
    _, _, h, w = e.shape
    _require_pow2(h, w, "prm_forward")
    spec = to_polar(fft2(batch_norm(e, p.bn)))
    phase_shift = tanh(conv2d(leaky_relu(conv2d(spec.phase, p.phase_c1)), p.phase_c2))
    new_phase = spec.phase + phase_shift
    new_amp = conv2d(leaky_relu(conv2d(spec.amplitude, p.amp_c1)), p.amp_c2)
    m = ifft2(from_polar(PolarSpectrum(amplitude=new_amp, phase=new_phase))).re
    return m * e + e


# -- dataset spectrum profiling -----------------------------------------------


@dataclass
class SpectrumProfile:
    """Radial frequency profile of an image set.

    magnitude[r] is the mean over images of the per-bin mean log(1+A);
    congruency[r] is the per-bin mean resultant length of the per-pixel unit
    phasors averaged across images (1 = identical phases, 0 = uniform).
    """

    radii: np.ndarray
    magnitude: np.ndarray
    congruency: np.ndarray
    image_count: int


def _radial_bins(h: int, w: int) -> tuple[np.ndarray, int]:
    yy = np.arange(h) - h // 2
    xx = np.arange(w) - w // 2
    r = np.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)
    bins = np.round(r).astype(np.int64)
    return bins, int(bins.max()) + 1


def dataset_spectrum_profile(images: list[np.ndarray]) -> SpectrumProfile:
    if len(images) < 2:
        raise ValueError("dataset_spectrum_profile: need at least 2 images")
    h, w = images[0].shape
    _require_pow2(h, w, "dataset_spectrum_profile")
    for img in images:
        if img.shape != (h, w):
            raise ShapeError(
                f"dataset_spectrum_profile: size mismatch {img.shape} vs {(h, w)}"
            )

    bins, nbins = _radial_bins(h, w)
    flat = bins.ravel()
    counts = np.bincount(flat, minlength=nbins).astype(np.float64)

    log_sum = np.zeros(nbins)
    phasor_sum = np.zeros((h, w), dtype=np.complex128)
    for img in images:
        z = np.fft.fftshift(np.fft.fft2(img.astype(np.float64)))
        a = np.abs(z)
        log_sum += np.bincount(flat, weights=np.log1p(a).ravel(), minlength=nbins)
        phase = np.angle(z)
        phasor_sum += np.exp(1j * phase)

    magnitude = log_sum / (counts * len(images))
    resultant = np.abs(phasor_sum) / len(images)
    congruency = np.bincount(flat, weights=resultant.ravel(), minlength=nbins) / counts
    return SpectrumProfile(
        radii=np.arange(nbins),
        magnitude=magnitude,
        congruency=congruency,
        image_count=len(images),
    )
