"""Log-Mel spectrograms and the overlapped 10 s / 5 s segment windowing.

128 mel bins over 0-8 kHz at 16 kHz input, 25 ms Hann window, 10 ms hop;
the number of segments is floor((duration-10)/5)+1 with a minimum of one,
and trailing partial windows are zero-padded.
"""

from __future__ import annotations

import numpy as np

N_MELS = 128
WINDOW_SEC = 0.025
HOP_SEC = 0.010
N_FFT = 1024  # fine enough bins that every low-frequency triangle is populated
SAMPLE_RATE = 16000

SEGMENT_WINDOW_SEC = 10.0
SEGMENT_HOP_SEC = 5.0


def segment_count(duration: float) -> int:
    return max(1, int(np.floor((duration - SEGMENT_WINDOW_SEC) / SEGMENT_HOP_SEC)) + 1)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   rate: int = SAMPLE_RATE, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank (HTK mel scale): (n_mels, n_fft//2 + 1)."""
    fmax = fmax if fmax is not None else rate / 2.0
    mel_points = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(n_fft, 1.0 / rate)
    left = hz_points[:-2, None]
    center = hz_points[1:-1, None]
    right = hz_points[2:, None]
    rising = (bin_freqs[None, :] - left) / np.maximum(center - left, 1e-9)
    falling = (right - bin_freqs[None, :]) / np.maximum(right - center, 1e-9)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(samples: np.ndarray, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Log-mel frames: (n_frames, N_MELS) float32."""
    win = int(round(WINDOW_SEC * rate))
    hop = int(round(HOP_SEC * rate))
    if samples.shape[0] < win:
        samples = np.pad(samples, (0, win - samples.shape[0]))
    n_frames = 1 + (samples.shape[0] - win) // hop
    window = np.hanning(win).astype(np.float32)
    fb = mel_filterbank(rate=rate)
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n_frames]
    spec = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=-1)) ** 2
    mel = spec @ fb.T
    return np.log(mel + 1e-10).astype(np.float32)


def segment_windows(samples: np.ndarray, duration: float,
                    rate: int = SAMPLE_RATE) -> list[np.ndarray]:
    """Slice audio into the overlapped 10 s windows, zero-padding the tail."""
    n_segments = segment_count(duration)
    win = int(SEGMENT_WINDOW_SEC * rate)
    hop = int(SEGMENT_HOP_SEC * rate)
    out = []
    for p in range(n_segments):
        chunk = samples[p * hop: p * hop + win]
        if chunk.shape[0] < win:
            chunk = np.pad(chunk, (0, win - chunk.shape[0]))
        out.append(chunk)
    return out
