"""Signal-domain operations: aligned STFT/ISTFT, Wiener masking, rate
conversion and phase-vocoder time stretching.

STFT convention
---------------
Hann analysis/synthesis windows of size n_fft = 4*hop, reflect padding of
(n_fft - hop)/2 on each side so a signal of length L (multiple of hop)
yields exactly L/hop frames. The transform keeps n_fft/2 complex bins:
the Nyquist coefficient (real for real input) is carried in the imaginary
slot of the DC bin instead of occupying a bin of its own, so no
information is lost and istft(stft(x)) reconstructs x to rounding error
for arbitrary signals. Bin f >= 1 holds the ordinary rfft coefficient f;
the highest retained ordinary bin is n_fft/2 - 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.fft as sfft

from .tensor import Tensor

WIENER_EPS = 1e-10

PV_NFFT = 2048
PV_HOP = 512


@dataclass
class AudioBuffer:
    """Multi-channel PCM signal; samples laid out [channels, length]."""

    samples: np.ndarray
    sample_rate: int = 44100

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.samples.ndim != 2:
            raise ValueError(f"AudioBuffer: samples must be [channels, length], got {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"AudioBuffer: sample_rate must be positive, got {self.sample_rate}")

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.length / self.sample_rate


@dataclass
class ComplexSpec:
    """channels x freq x frames complex spectrogram (see module docstring)."""

    bins: np.ndarray
    n_fft: int
    hop: int

    def __post_init__(self):
        self.bins = np.asarray(self.bins)
        if self.bins.ndim != 3:
            raise ValueError(f"ComplexSpec: bins must be [C, F, N], got {self.bins.shape}")
        if self.bins.shape[1] != self.n_fft // 2:
            raise ValueError(
                f"ComplexSpec: {self.bins.shape[1]} bins inconsistent with n_fft {self.n_fft}"
            )

    @property
    def frames(self):
        return self.bins.shape[2]


# -- window / padding helpers -------------------------------------------------


def _hann(n_fft, dtype):
    n = np.arange(n_fft)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_fft)).astype(dtype)


def _reflect_indices(length, pad):
    """Source index for each position of a reflect-padded axis."""
    if length == 1:
        return np.zeros(length + 2 * pad, dtype=np.int64)
    p = np.arange(-pad, length + pad)
    period = 2 * (length - 1)
    return (length - 1 - np.abs(np.mod(p, period) - (length - 1))).astype(np.int64)


def _check_stft_args(L, n_fft, hop):
    if n_fft != 4 * hop:
        raise ValueError(f"stft: n_fft ({n_fft}) must equal 4*hop ({4 * hop})")
    if hop % 2:
        raise ValueError(f"stft: hop must be even, got {hop}")
    if L % hop:
        raise ValueError(f"stft: length {L} is not a multiple of hop {hop}")


def pad_to_hop(x: AudioBuffer, hop: int):
    """Zero-pad the tail to the next hop multiple; returns (padded, original_length)."""
    L = x.length
    target = ((L + hop - 1) // hop) * hop
    if target == L:
        return x, L
    out = np.zeros((x.channels, target), dtype=x.samples.dtype)
    out[:, :L] = x.samples
    return AudioBuffer(out, x.sample_rate), L


# -- numpy stft/istft core ----------------------------------------------------


def _stft_np(x, n_fft, hop):
    """x: [M, L] real -> [M, F, N] complex with packed DC/Nyquist bin."""
    M, L = x.shape
    _check_stft_args(L, n_fft, hop)
    pad = (n_fft - hop) // 2
    idx = _reflect_indices(L, pad)
    xp = x[:, idx]
    N = L // hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft, axis=1)[:, ::hop, :]
    win = _hann(n_fft, x.dtype)
    full = sfft.rfft(frames * win, axis=2)  # [M, N, n_fft/2 + 1]
    n2 = n_fft // 2
    spec = np.empty((M, N, n2), dtype=full.dtype)
    spec[:, :, 0] = full[:, :, 0].real + 1j * full[:, :, n2].real
    spec[:, :, 1:] = full[:, :, 1:n2]
    return spec.transpose(0, 2, 1)


def _window_power_sum(n_fft, hop, N, dtype):
    win = _hann(n_fft, dtype)
    total = (N - 1) * hop + n_fft
    wsum = np.zeros(total, dtype=dtype)
    w2 = win * win
    for m in range(N):
        wsum[m * hop : m * hop + n_fft] += w2
    return wsum


def _istft_np(spec, n_fft, hop, target_length):
    """spec: [M, F, N] complex -> [M, target_length] real."""
    M, F, N = spec.shape
    if F != n_fft // 2:
        raise ValueError(f"istft: {F} bins inconsistent with n_fft {n_fft}")
    if target_length != N * hop:
        raise ValueError(f"istft: target_length {target_length} != frames*hop = {N * hop}")
    n2 = n_fft // 2
    sp = spec.transpose(0, 2, 1)  # [M, N, F]
    full = np.empty((M, N, n2 + 1), dtype=sp.dtype)
    full[:, :, 0] = sp[:, :, 0].real
    full[:, :, n2] = sp[:, :, 0].imag
    full[:, :, 1:n2] = sp[:, :, 1:]
    rdtype = np.float32 if sp.dtype == np.complex64 else np.float64
    frames = sfft.irfft(full, n=n_fft, axis=2).astype(rdtype)
    win = _hann(n_fft, rdtype)
    frames *= win
    pad = (n_fft - hop) // 2
    total = (N - 1) * hop + n_fft
    out = np.zeros((M, total), dtype=rdtype)
    for m in range(N):
        out[:, m * hop : m * hop + n_fft] += frames[:, m, :]
    wsum = _window_power_sum(n_fft, hop, N, rdtype)
    out /= np.maximum(wsum, np.finfo(rdtype).tiny)
    return out[:, pad : pad + target_length]


def stft(x: AudioBuffer, n_fft: int, hop: int) -> ComplexSpec:
    """Short-time Fourier transform with exactly length/hop frames."""
    bins = _stft_np(np.asarray(x.samples, dtype=np.float64 if x.samples.dtype == np.float64 else np.float32), n_fft, hop)
    return ComplexSpec(bins, n_fft, hop)


def istft(spec: ComplexSpec, target_length: int) -> AudioBuffer:
    """Inverse STFT; exact for specs produced by stft with these conventions."""
    out = _istft_np(spec.bins, spec.n_fft, spec.hop, target_length)
    return AudioBuffer(out)


# -- differentiable CaC transform ---------------------------------------------


def _stft_adjoint(g_spec, n_fft, hop, L, dtype):
    """Adjoint of _stft_np as a real-linear map; g_spec: [M, F, N] complex."""
    M = g_spec.shape[0]
    n2 = n_fft // 2
    N = L // hop
    gs = g_spec.transpose(0, 2, 1)  # [M, N, F]
    dfull = np.zeros((M, N, n2 + 1), dtype=np.complex128 if dtype == np.float64 else np.complex64)
    dfull[:, :, 0] = gs[:, :, 0].real
    dfull[:, :, n2] = gs[:, :, 0].imag
    dfull[:, :, 1:n2] = gs[:, :, 1:]
    # adjoint of rfft: N * irfft(half-weighted spectrum)
    dY = dfull.copy()
    dY[:, :, 1:n2] *= 0.5
    dxw = n_fft * sfft.irfft(dY, n=n_fft, axis=2).astype(dtype)
    win = _hann(n_fft, dtype)
    dxw *= win
    pad = (n_fft - hop) // 2
    total = (N - 1) * hop + n_fft
    gpad = np.zeros((M, total), dtype=dtype)
    for m in range(N):
        gpad[:, m * hop : m * hop + n_fft] += dxw[:, m, :]
    gx = gpad[:, pad : pad + L].copy()
    idx = _reflect_indices(L, pad)
    left, right = idx[:pad], idx[pad + L :]
    np.add.at(gx, (np.arange(M)[:, None], left[None, :]), gpad[:, :pad])
    np.add.at(gx, (np.arange(M)[:, None], right[None, :]), gpad[:, pad + L :])
    return gx


def _istft_adjoint(g_out, n_fft, hop, N, dtype):
    """Adjoint of _istft_np; g_out: [M, L] real -> [M, F, N] complex grads."""
    M, L = g_out.shape
    rdtype = dtype
    pad = (n_fft - hop) // 2
    total = (N - 1) * hop + n_fft
    gpad = np.zeros((M, total), dtype=rdtype)
    gpad[:, pad : pad + L] = g_out
    wsum = _window_power_sum(n_fft, hop, N, rdtype)
    gpad /= np.maximum(wsum, np.finfo(rdtype).tiny)
    win = _hann(n_fft, rdtype)
    gframes = np.lib.stride_tricks.sliding_window_view(gpad, n_fft, axis=1)[:, ::hop, :] * win
    n2 = n_fft // 2
    gf = sfft.rfft(gframes, axis=2)
    dfull = np.empty_like(gf)
    dfull[:, :, 0] = gf[:, :, 0] / n_fft
    dfull[:, :, n2] = gf[:, :, n2] / n_fft
    dfull[:, :, 1:n2] = gf[:, :, 1:n2] * (2.0 / n_fft)
    dspec = np.empty((M, N, n2), dtype=gf.dtype)
    dspec[:, :, 0] = dfull[:, :, 0].real + 1j * dfull[:, :, n2].real
    dspec[:, :, 1:] = dfull[:, :, 1:n2]
    return dspec.transpose(0, 2, 1)


def _interleave_cac(spec):
    """[M, C, F, N] complex -> [M, 2C, F, N] real, channels (re, im) per pair."""
    M, C, F, N = spec.shape
    rdtype = np.float32 if spec.dtype == np.complex64 else np.float64
    out = np.empty((M, 2 * C, F, N), dtype=rdtype)
    out[:, 0::2] = spec.real
    out[:, 1::2] = spec.imag
    return out


def _deinterleave_cac(x):
    """[M, 2C, F, N] real -> [M, C, F, N] complex."""
    return x[:, 0::2] + 1j * x[:, 1::2]


def stft_cac(x: Tensor, n_fft: int, hop: int) -> Tensor:
    """Differentiable STFT emitting complex-as-channels: [B, C, L] -> [B, 2C, F, N]."""
    if x.ndim != 3:
        raise ValueError(f"stft_cac: expected [B, C, L], got {x.shape}")
    B, C, L = x.shape
    spec = _stft_np(x.data.reshape(B * C, L), n_fft, hop)
    F, N = spec.shape[1], spec.shape[2]
    out = _interleave_cac(spec.reshape(B, C, F, N))
    dtype = x.dtype

    def vjp(g):
        gc = _deinterleave_cac(g).reshape(B * C, F, N)
        gx = _stft_adjoint(gc, n_fft, hop, L, dtype)
        return (gx.reshape(B, C, L),)

    return Tensor._node(out, (x,), vjp)


def istft_cac(spec: Tensor, n_fft: int, hop: int, target_length: int) -> Tensor:
    """Differentiable inverse of stft_cac: [B, 2C, F, N] -> [B, C, target_length]."""
    if spec.ndim != 4:
        raise ValueError(f"istft_cac: expected [B, 2C, F, N], got {spec.shape}")
    B, C2, F, N = spec.shape
    if C2 % 2:
        raise ValueError(f"istft_cac: channel count {C2} must be even (re/im pairs)")
    C = C2 // 2
    zc = _deinterleave_cac(spec.data).reshape(B * C, F, N)
    out = _istft_np(zc, n_fft, hop, target_length).reshape(B, C, target_length)
    dtype = out.dtype

    def vjp(g):
        dz = _istft_adjoint(g.reshape(B * C, target_length), n_fft, hop, N, dtype)
        return (_interleave_cac(dz.reshape(B, C, F, N)),)

    return Tensor._node(out, (spec,), vjp)


# -- Wiener filtering ----------------------------------------------------------


def wiener_filter(mag_estimates, mix: ComplexSpec, iterations: int = 0):
    """Power-ratio soft masking with optional EM refinement.

    mag_estimates: [S, C, F, N] nonnegative magnitudes (array or list of
    per-source arrays). Masks use v_i = mag_i^2 with an epsilon split so
    all-zero estimates yield uniform 1/S masks; the last source takes the
    residual so the estimates sum to the mixture bit-exactly.
    """
    mags = np.asarray(mag_estimates, dtype=np.float64)
    if mags.ndim != 4:
        raise ValueError(f"wiener_filter: expected [S, C, F, N] magnitudes, got {mags.shape}")
    S = mags.shape[0]
    if mags.shape[1:] != mix.bins.shape:
        raise ValueError(f"wiener_filter: estimate shape {mags.shape[1:]} != mix {mix.bins.shape}")
    if iterations < 0:
        raise ValueError("wiener_filter: iterations must be >= 0")
    v = mags**2
    for _ in range(iterations + 1):
        masks = (v + WIENER_EPS / S) / (np.sum(v, axis=0) + WIENER_EPS)
        est = masks * mix.bins
        v = np.abs(est) ** 2
    est[-1] = mix.bins - np.sum(est[:-1], axis=0)
    return [ComplexSpec(e, mix.n_fft, mix.hop) for e in est]


def wiener_masks(mag_estimates):
    """Just the soft masks (iteration 0), for inspection and tests."""
    v = np.asarray(mag_estimates, dtype=np.float64) ** 2
    S = v.shape[0]
    return (v + WIENER_EPS / S) / (np.sum(v, axis=0) + WIENER_EPS)


# -- resampling -----------------------------------------------------------------


def resample(x: AudioBuffer, ratio) -> AudioBuffer:
    """Windowed-sinc rate conversion; output length round(L * ratio).

    The sample_rate field is left untouched: played back at the original
    rate, frequencies scale by 1/ratio.
    """
    frac = ratio if isinstance(ratio, Fraction) else Fraction(ratio).limit_denominator(10000)
    if frac <= 0:
        raise ValueError(f"resample: ratio must be positive, got {ratio}")
    L = x.length
    L_out = int(round(L * float(frac)))
    if L_out == 0:
        return AudioBuffer(np.zeros((x.channels, 0), dtype=x.samples.dtype), x.sample_rate)
    taps = 32
    r = float(frac)
    cutoff = min(1.0, r)
    pos = np.arange(L_out, dtype=np.float64) / r
    left = np.floor(pos).astype(np.int64) - taps + 1
    offs = np.arange(2 * taps, dtype=np.int64)
    idx = left[:, None] + offs[None, :]
    t = idx - pos[:, None]
    win = np.where(np.abs(t) <= taps, 0.5 + 0.5 * np.cos(np.pi * t / taps), 0.0)
    kern = np.sinc(cutoff * t) * cutoff * win
    kern /= np.sum(kern, axis=1, keepdims=True)
    valid = (idx >= 0) & (idx < L)
    idxc = np.clip(idx, 0, L - 1)
    out = np.empty((x.channels, L_out), dtype=np.float64)
    for c in range(x.channels):
        gathered = x.samples[c, idxc] * valid
        out[c] = np.sum(gathered * kern, axis=1)
    return AudioBuffer(out.astype(x.samples.dtype, copy=False), x.sample_rate)


# -- phase vocoder ---------------------------------------------------------------


def _princarg(x):
    return x - 2.0 * np.pi * np.round(x / (2.0 * np.pi))


def time_stretch(x: AudioBuffer, rate: float) -> AudioBuffer:
    """Phase-vocoder stretch: output duration ~= input/rate, pitch preserved.

    Hann frames of 2048 with synthesis hop 512 and identity phase locking
    (bin phases follow their nearest spectral peak).
    """
    if not (0.5 <= rate <= 2.0):
        raise ValueError(f"time_stretch: rate {rate} outside [0.5, 2.0]")
    L = x.length
    target = int(round(L / rate))
    n_fft, hop_s = PV_NFFT, PV_HOP
    ha = hop_s * rate
    sig = np.concatenate(
        [x.samples.astype(np.float64), np.zeros((x.channels, n_fft + hop_s), dtype=np.float64)], axis=1
    )
    n_frames = max(2, int(np.floor(L / ha)) + 1)
    win = _hann(n_fft, np.float64)
    omega = 2.0 * np.pi * np.arange(n_fft // 2 + 1) / n_fft
    total = (n_frames - 1) * hop_s + n_fft
    out = np.zeros((x.channels, total), dtype=np.float64)
    wsum = np.zeros(total, dtype=np.float64)

    for c in range(x.channels):
        psi = None
        prev_phase = None
        prev_pos = 0
        for m in range(n_frames):
            pos = int(round(m * ha))
            frame = sig[c, pos : pos + n_fft] * win
            spec = np.fft.rfft(frame)
            mag = np.abs(spec)
            phase = np.angle(spec)
            if psi is None:
                psi = phase.copy()
            else:
                delta = max(pos - prev_pos, 1)
                dev = _princarg(phase - prev_phase - omega * delta)
                true_freq = omega + dev / delta
                psi_prop = psi + true_freq * hop_s
                psi = _lock_phases(mag, phase, psi_prop)
            prev_phase = phase
            prev_pos = pos
            y = np.fft.irfft(mag * np.exp(1j * psi), n=n_fft) * win
            out[c, m * hop_s : m * hop_s + n_fft] += y
            if c == 0:
                wsum[m * hop_s : m * hop_s + n_fft] += win * win

    out /= np.maximum(wsum, 1e-12)
    if out.shape[1] >= target:
        res = out[:, :target]
    else:
        res = np.concatenate([out, np.zeros((x.channels, target - out.shape[1]))], axis=1)
    return AudioBuffer(res.astype(x.samples.dtype, copy=False), x.sample_rate)


def _lock_phases(mag, phase, psi_prop):
    """Identity phase locking: non-peak bins inherit their peak's rotation."""
    f = mag
    interior = (f[1:-1] >= f[:-2]) & (f[1:-1] >= f[2:])
    peaks = np.flatnonzero(interior) + 1
    if peaks.size == 0:
        return psi_prop
    # region boundary between consecutive peaks: midpoint
    bounds = (peaks[:-1] + peaks[1:]) // 2 + 1
    owner = peaks[np.searchsorted(bounds, np.arange(f.size), side="right")]
    return psi_prop[owner] + (phase - phase[owner])


def pitch_shift(x: AudioBuffer, semitones: float) -> AudioBuffer:
    """Shift pitch, preserving duration: stretch then band-limited resample."""
    if abs(semitones) > 12:
        raise ValueError(f"pitch_shift: |semitones| must be <= 12, got {semitones}")
    factor = 2.0 ** (semitones / 12.0)
    if abs(factor - 1.0) < 1e-9:
        return AudioBuffer(x.samples.copy(), x.sample_rate)
    stretched = time_stretch(x, 1.0 / factor)
    return resample(stretched, Fraction(1) / Fraction(factor).limit_denominator(10000))
