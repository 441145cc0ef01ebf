"""Offline feature exporter for the graphpool engine.

Runs a wav2vec2-base-architecture encoder over a list of audio files
and writes one feature file per utterance (13 layers x N frames x 768)
plus a JSON-lines manifest, both in the graphpool on-disk formats.
"""

from .export import (AudioItem, AudioReadError, DimensionError, ExportJob,
                     encode, expected_frames, export, load_audio,
                     load_encoder, read_audio_list)

__all__ = [
    "AudioItem",
    "AudioReadError",
    "DimensionError",
    "ExportJob",
    "encode",
    "expected_frames",
    "export",
    "load_audio",
    "load_encoder",
    "read_audio_list",
]
