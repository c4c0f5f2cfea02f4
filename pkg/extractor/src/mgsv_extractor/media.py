"""Media decoding: frames at 1 FPS from video containers, mono PCM from WAV.

Frames are sampled at mid-second timestamps (0.5 s, 1.5 s, ...), skipping
first-frame container artifacts, and resized to 256x256 RGB. Durations come
from container metadata.
"""

from __future__ import annotations

import numpy as np

from .featfile import ExtractError

FRAME_SIZE = 256
TARGET_SAMPLE_RATE = 16000


def video_duration_and_frames(path) -> tuple[float, "np.ndarray"]:
    """Decode a video into (duration_sec, frames[F, 256, 256, 3] uint8)."""
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ExtractError(f"cannot decode video: {path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    frame_count = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    if fps <= 0 or frame_count <= 0:
        cap.release()
        raise ExtractError(f"zero-length or headerless video: {path}")
    duration = frame_count / fps

    n_frames = max(1, int(np.floor(duration)))
    targets = [min(frame_count - 1, int((t + 0.5) * fps)) for t in range(n_frames)]
    frames = []
    want = set(targets)
    decoded: dict[int, np.ndarray] = {}
    index = 0
    while index <= max(targets):
        ok, frame = cap.read()
        if not ok:
            break
        if index in want:
            resized = cv2.resize(frame, (FRAME_SIZE, FRAME_SIZE),
                                 interpolation=cv2.INTER_AREA)
            decoded[index] = cv2.cvtColor(resized, cv2.COLOR_BGR2RGB)
        index += 1
    cap.release()
    if not decoded:
        raise ExtractError(f"no decodable frames in {path}")
    last = None
    for t in targets:
        last = decoded.get(t, last if last is not None else next(iter(decoded.values())))
        frames.append(last)
    return duration, np.stack(frames)


def load_audio(path) -> tuple[float, np.ndarray]:
    """Decode a WAV file into (duration_sec, mono float32 at 16 kHz)."""
    from scipy.io import wavfile
    from scipy.signal import resample_poly

    try:
        rate, samples = wavfile.read(str(path))
    except (ValueError, FileNotFoundError) as exc:
        raise ExtractError(f"cannot decode audio: {path}: {exc}") from exc
    if samples.size == 0:
        raise ExtractError(f"zero-length audio stream: {path}")
    duration = samples.shape[0] / rate
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if np.issubdtype(samples.dtype, np.integer):
        samples = samples.astype(np.float32) / np.iinfo(samples.dtype).max
    samples = samples.astype(np.float32)
    if rate != TARGET_SAMPLE_RATE:
        gcd = np.gcd(int(rate), TARGET_SAMPLE_RATE)
        samples = resample_poly(samples, TARGET_SAMPLE_RATE // gcd,
                                int(rate) // gcd).astype(np.float32)
    return duration, samples
