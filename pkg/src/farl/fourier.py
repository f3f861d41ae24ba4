"""2D discrete Fourier analysis and phase/amplitude reconstructions.

Convention: forward transform unnormalised, inverse carries 1/(H*W).
Power-of-two axes use an iterative radix-2 Cooley-Tukey; any other length
falls back to a direct O(N^2) transform along that axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# bins whose magnitude is below this fraction of the spectrum peak count as zero
ZERO_AMPLITUDE_RTOL = 1e-10


@dataclass(frozen=True)
class Spectrum:
    re: np.ndarray
    im: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    @property
    def amplitude(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    @property
    def phase(self) -> np.ndarray:
        return np.arctan2(self.im, self.re)

    def complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "Spectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_radix2(x: np.ndarray, sign: int) -> np.ndarray:
    """Iterative decimation-in-time FFT along the last axis."""
    n = x.shape[-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(a.shape[:-1] + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        blocks = np.concatenate([even + odd, even - odd], axis=-1)
        a = blocks.reshape(x.shape)
        size *= 2
    return a


def _dft_direct(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n)
    # reduce k*m mod n before scaling to keep the twiddle angles exact-ish
    w = np.exp(sign * 2j * np.pi * ((np.outer(k, k) % n) / n))
    return x.astype(np.complex128) @ w.T


def fft1(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised transform along the last axis (sign +1 when ``inverse``)."""
    sign = 1 if inverse else -1
    n = x.shape[-1]
    return _fft_radix2(x, sign) if _is_pow2(n) else _dft_direct(x, sign)


def _transform2(z: np.ndarray, inverse: bool) -> np.ndarray:
    z = fft1(z, inverse)
    z = np.swapaxes(fft1(np.swapaxes(z, -1, -2), inverse), -1, -2)
    return z


def dft2(channel: np.ndarray) -> Spectrum:
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise ValueError(f"dft2 expects a non-empty H x W array, got {x.shape}")
    return Spectrum.from_complex(_transform2(x, inverse=False))


def idft2_complex(s: Spectrum) -> np.ndarray:
    h, w = s.shape
    return _transform2(s.complex(), inverse=True) / (h * w)


def idft2(s: Spectrum) -> np.ndarray:
    """Real part of the normalised inverse transform."""
    return np.ascontiguousarray(idft2_complex(s).real)


def _channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {img.shape}")
    return img


def unit_phase(s: Spectrum) -> np.ndarray:
    """e^{jP}, with P := 0 on (numerically) zero-amplitude bins."""
    amp = s.amplitude
    peak = amp.max()
    zero = amp <= ZERO_AMPLITUDE_RTOL * peak
    phase = np.where(zero, 0.0, s.phase)
    return np.exp(1j * phase)


def phase_only(img: np.ndarray) -> np.ndarray:
    """Per channel Re(F^-1(1 * e^{jP})): unit amplitude, original phase."""
    chans = _channels(img)
    out = np.empty_like(chans)
    for c, ch in enumerate(chans):
        out[c] = idft2(Spectrum.from_complex(unit_phase(dft2(ch))))
    return out.reshape(np.shape(img))


def amp_only(img: np.ndarray) -> np.ndarray:
    """Per channel Re(F^-1(A * e^{j0})): original amplitude, zero phase."""
    chans = _channels(img)
    out = np.empty_like(chans)
    for c, ch in enumerate(chans):
        a = dft2(ch).amplitude
        out[c] = idft2(Spectrum(a, np.zeros_like(a)))
    return out.reshape(np.shape(img))


def normalize_component(img: np.ndarray, var_floor: float = 1e-12) -> np.ndarray:
    """Standardise each channel to zero mean and unit variance; flat channels become zeros."""
    chans = _channels(img)
    out = np.zeros_like(chans)
    for c, ch in enumerate(chans):
        mu = ch.mean()
        var = ((ch - mu) ** 2).mean()
        if var >= var_floor:
            out[c] = (ch - mu) / np.sqrt(var)
    return out.reshape(np.shape(img))


def log_amplitude(channel: np.ndarray) -> np.ndarray:
    return np.log1p(dft2(channel).amplitude)


def decompose(img: np.ndarray, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(phase image, amplitude image) for a raw (C, H, W) image, optionally standardised."""
    p, a = phase_only(img), amp_only(img)
    if normalize:
        p, a = normalize_component(p), normalize_component(a)
    return p, a
