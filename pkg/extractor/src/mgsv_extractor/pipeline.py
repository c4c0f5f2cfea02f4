"""Extraction jobs: media file -> validated token file."""

from __future__ import annotations

from dataclasses import dataclass

from . import encoders, media, mel
from .featfile import ExtractError, write_tokens

VIDEO = "video"
MUSIC = "music"


@dataclass
class ExtractionJob:
    media_path: str
    kind: str  # video | music
    output_path: str
    encoder_weights: str | None = None

    def validate(self) -> None:
        if self.kind not in (VIDEO, MUSIC):
            raise ExtractError(f"kind must be 'video' or 'music', got '{self.kind}'")


def extract_video_tokens(job: ExtractionJob) -> int:
    """One 512-d token per second of video (floor(duration) rows, min 1)."""
    job.validate()
    duration, frames = media.video_duration_and_frames(job.media_path)
    encoder = encoders.load_video_encoder(job.encoder_weights)
    tokens = encoder.encode(frames)
    write_tokens(job.output_path, tokens, duration)
    return tokens.shape[0]


def extract_music_tokens(job: ExtractionJob) -> int:
    """One 768-d token per overlapped 10 s / 5 s-hop segment (min 1 row)."""
    job.validate()
    duration, samples = media.load_audio(job.media_path)
    segments = mel.segment_windows(samples, duration)
    encoder = encoders.load_music_encoder(job.encoder_weights)
    tokens = encoder.encode(segments)
    write_tokens(job.output_path, tokens, duration)
    return tokens.shape[0]


def run(job: ExtractionJob) -> int:
    if job.kind == VIDEO:
        return extract_video_tokens(job)
    return extract_music_tokens(job)
