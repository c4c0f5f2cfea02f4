"""Frozen per-frame and per-segment encoders.

The default backend is a deterministic random-projection featurizer whose
weights are fixed by a constant seed, so it is weights-frozen by
construction and needs no downloaded checkpoints: every run of the pipeline
emits identical tokens for identical media. Pretrained transformer backends
(a CLIP-style image tower and an audio-spectrogram transformer) can be
plugged in from a local weights directory when one is available; they expose
the same encode interface and token widths (512 video / 768 music).
"""

from __future__ import annotations

import numpy as np

from .featfile import ExtractError, MUSIC_WIDTH, VIDEO_WIDTH
from .mel import log_mel

_PROJECTION_SEED = 0x51AB


class ProjectionVideoEncoder:
    """Deterministic 512-d per-frame encoder (stand-in for a ViT tower).

    Pools each frame to an 8x8x3 intensity grid plus channel statistics and
    applies a fixed Gaussian projection.
    """

    width = VIDEO_WIDTH

    def __init__(self):
        rng = np.random.default_rng([_PROJECTION_SEED, 1])
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(198.0),
                                size=(198, VIDEO_WIDTH)).astype(np.float32)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ExtractError(f"expected (F, H, W, 3) frames, got {frames.shape}")
        scaled = frames.astype(np.float32) / 255.0
        f, h, w, _ = scaled.shape
        grid = scaled.reshape(f, 8, h // 8, 8, w // 8, 3).mean(axis=(2, 4))
        grid = grid.reshape(f, -1)  # (F, 192)
        stats = np.concatenate([scaled.mean(axis=(1, 2)), scaled.std(axis=(1, 2))],
                               axis=1)  # (F, 6)
        feats = np.concatenate([grid, stats], axis=1)
        return (feats @ self._proj).astype(np.float32)


class ProjectionMusicEncoder:
    """Deterministic 768-d per-segment encoder (stand-in for an AST tower).

    Summarizes each 10 s log-mel segment by mean/std over eight temporal
    chunks and applies a fixed Gaussian projection.
    """

    width = MUSIC_WIDTH
    _CHUNKS = 8

    def __init__(self):
        rng = np.random.default_rng([_PROJECTION_SEED, 2])
        in_dim = 2 * self._CHUNKS * 128
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(in_dim),
                                size=(in_dim, MUSIC_WIDTH)).astype(np.float32)

    def encode(self, segments: list) -> np.ndarray:
        tokens = []
        for samples in segments:
            mel = log_mel(samples)  # (n_frames, 128)
            usable = (mel.shape[0] // self._CHUNKS) * self._CHUNKS
            chunks = mel[:usable].reshape(self._CHUNKS, -1, mel.shape[1])
            summary = np.concatenate([chunks.mean(axis=1), chunks.std(axis=1)],
                                     axis=0).reshape(-1)
            tokens.append(summary @ self._proj)
        return np.stack(tokens).astype(np.float32)


def load_video_encoder(weights: str | None = None):
    """Default deterministic backend, or a CLIP-style tower from local weights."""
    if weights is None:
        return ProjectionVideoEncoder()
    return _PretrainedVideoEncoder(weights)


def load_music_encoder(weights: str | None = None):
    if weights is None:
        return ProjectionMusicEncoder()
    return _PretrainedMusicEncoder(weights)


class _PretrainedVideoEncoder:
    """CLIP ViT-B/32 image tower loaded from a local directory (512-d CLS)."""

    width = VIDEO_WIDTH

    def __init__(self, weights: str):
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as exc:
            raise ExtractError(f"pretrained video backend unavailable: {exc}") from exc
        self._torch = torch
        self._processor = CLIPImageProcessor.from_pretrained(weights)
        self._model = CLIPVisionModelWithProjection.from_pretrained(weights).eval()

    def encode(self, frames: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self._processor(images=list(frames), return_tensors="pt")
            out = self._model(**inputs)
        return out.image_embeds.numpy().astype(np.float32)


class _PretrainedMusicEncoder:
    """Audio-spectrogram transformer from a local directory (768-d pooled)."""

    width = MUSIC_WIDTH

    def __init__(self, weights: str):
        try:
            import torch
            from transformers import ASTFeatureExtractor, ASTModel
        except ImportError as exc:
            raise ExtractError(f"pretrained music backend unavailable: {exc}") from exc
        self._torch = torch
        self._extractor = ASTFeatureExtractor.from_pretrained(weights)
        self._model = ASTModel.from_pretrained(weights).eval()

    def encode(self, segments: list) -> np.ndarray:
        torch = self._torch
        tokens = []
        with torch.no_grad():
            for samples in segments:
                inputs = self._extractor(samples, sampling_rate=16000,
                                         return_tensors="pt")
                out = self._model(**inputs)
                tokens.append(out.pooler_output[0].numpy())
        return np.stack(tokens).astype(np.float32)
