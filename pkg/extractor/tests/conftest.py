import numpy as np
import pytest


def synth_video(path, duration_sec=12.0, fps=8.0, size=64):
    """Deterministic sample clip: a drifting gradient with a moving block."""
    import cv2

    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"),
                             fps, (size, size))
    assert writer.isOpened()
    n = int(round(duration_sec * fps))
    base = np.linspace(0, 255, size, dtype=np.uint8)
    for i in range(n):
        frame = np.zeros((size, size, 3), dtype=np.uint8)
        frame[:, :, 0] = np.roll(base, i)[None, :]
        frame[:, :, 1] = np.roll(base, 2 * i)[:, None]
        x = (i * 3) % (size - 8)
        frame[x: x + 8, x: x + 8, 2] = 255
        writer.write(frame)
    writer.release()
    return path


def synth_wav(path, duration_sec=24.0, rate=22050):
    """Deterministic sample track: a chirping two-tone mix."""
    from scipy.io import wavfile

    t = np.arange(int(duration_sec * rate)) / rate
    wave = 0.5 * np.sin(2 * np.pi * (220 + 6 * t) * t) \
        + 0.25 * np.sin(2 * np.pi * 440 * t)
    stereo = np.stack([wave, 0.8 * wave], axis=1)
    wavfile.write(str(path), rate, (stereo * 32767).astype(np.int16))
    return path


@pytest.fixture(scope="session")
def sample_video(tmp_path_factory):
    return synth_video(tmp_path_factory.mktemp("media") / "clip.avi")


@pytest.fixture(scope="session")
def sample_track(tmp_path_factory):
    return synth_wav(tmp_path_factory.mktemp("media") / "track.wav")
