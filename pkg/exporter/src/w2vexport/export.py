"""Encoder inference and feature-file export.

The encoder is a wav2vec2 base architecture: a 7-block conv feature
encoder feeding 12 transformer blocks.  With hidden states requested,
one forward pass yields 13 feature layers (the projected conv output,
then each block's output), each N x 768; the export writes them as one
feature stack per utterance plus a JSON-lines manifest.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from graphpool.dataio import FeatureStack, write_feature_stack

EXPECTED_LAYERS = 13
EXPECTED_DIM = 768
TARGET_SAMPLE_RATE = 16_000
# conv feature-encoder geometry: kernel sizes and strides of the 7 blocks
CONV_KERNELS = (10, 3, 3, 3, 3, 2, 2)
CONV_STRIDES = (5, 2, 2, 2, 2, 2, 2)
MIN_SAMPLES = 400  # one receptive field; shorter audio yields no frames
RANDOM_BASE_SEED = 0
RANDOM_BASE_ID = "random-base"

logger = logging.getLogger("w2vexport")


class ExportError(Exception):
    pass


class AudioReadError(ExportError):
    """Audio file missing, undecodable, or too short to encode."""


class DimensionError(ExportError):
    """Encoder output does not match the 13 x N x 768 contract."""


class ListFormatError(ExportError):
    """Malformed audio list."""


@dataclass
class AudioItem:
    path: str
    utt: str
    speaker: str


@dataclass
class ExportJob:
    items: list[AudioItem]
    checkpoint: str
    out_dir: str | os.PathLike
    sample_rate: int = TARGET_SAMPLE_RATE


def expected_frames(n_samples: int) -> int:
    """Frame count after the conv encoder: successive floor((n-k)/s)+1."""
    n = n_samples
    for k, s in zip(CONV_KERNELS, CONV_STRIDES):
        n = (n - k) // s + 1
    return n


def read_audio_list(path: str | os.PathLike) -> list[AudioItem]:
    """Parse a TSV of (audio path, utterance id, speaker label) rows.

    Relative audio paths are resolved against the list's directory.
    """
    base = Path(path).parent
    items: list[AudioItem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ListFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            audio, utt, speaker = (f.strip() for f in fields)
            if not (audio and utt and speaker):
                raise ListFormatError(f"{path}:{lineno}: empty field")
            if utt in seen:
                raise ListFormatError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
            seen.add(utt)
            resolved = audio if os.path.isabs(audio) else str(base / audio)
            items.append(AudioItem(path=resolved, utt=utt, speaker=speaker))
    return items


def load_audio(path: str | os.PathLike,
               target_rate: int = TARGET_SAMPLE_RATE) -> np.ndarray:
    """Decode a WAV file to mono float32 at the target rate.

    Integer PCM is scaled to [-1, 1]; multi-channel audio is averaged
    down to mono; other rates are polyphase-resampled.
    """
    from scipy.io import wavfile
    from scipy.signal import resample_poly

    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise AudioReadError(f"{path}: file not found") from exc
    except Exception as exc:
        raise AudioReadError(f"{path}: not decodable as WAV ({exc})") from exc

    x = np.asarray(data)
    if x.ndim not in (1, 2):
        raise AudioReadError(f"{path}: unsupported sample layout {x.shape}")
    # scale PCM to [-1, 1] before any channel averaging
    if x.dtype == np.uint8:
        x = (x.astype(np.float32) - 128.0) / 128.0
    elif np.issubdtype(x.dtype, np.integer):
        x = x.astype(np.float32) / float(2 ** (x.dtype.itemsize * 8 - 1))
    else:
        x = x.astype(np.float32)
    if x.ndim == 2:
        x = x.mean(axis=1).astype(np.float32)

    if rate != target_rate:
        g = math.gcd(int(rate), target_rate)
        x = resample_poly(x.astype(np.float64), target_rate // g, int(rate) // g)
        x = x.astype(np.float32)
    if x.shape[0] < MIN_SAMPLES:
        raise AudioReadError(
            f"{path}: only {x.shape[0]} samples at {target_rate} Hz; need >= {MIN_SAMPLES}")
    return x


def load_encoder(checkpoint: str):
    """Load the encoder in eval mode.

    ``random-base`` builds a seeded randomly initialized base
    architecture (for pipeline and shape testing without network
    access); anything else is passed to ``from_pretrained`` verbatim,
    so hub ids and local paths both work.
    """
    import torch
    from transformers import Wav2Vec2Config, Wav2Vec2Model

    if checkpoint == RANDOM_BASE_ID:
        torch.manual_seed(RANDOM_BASE_SEED)
        model = Wav2Vec2Model(Wav2Vec2Config())
    else:
        model = Wav2Vec2Model.from_pretrained(checkpoint)
    return model.eval()


def encode(model, samples: np.ndarray) -> np.ndarray:
    """One deterministic forward pass -> (13, N, 768) float32 stack."""
    import torch

    with torch.no_grad():
        out = model(torch.from_numpy(np.ascontiguousarray(samples, dtype=np.float32))
                    .unsqueeze(0), output_hidden_states=True)
    layers = out.hidden_states
    if len(layers) != EXPECTED_LAYERS:
        raise DimensionError(
            f"encoder produced {len(layers)} feature layers, expected {EXPECTED_LAYERS}")
    stacked = np.stack([l.squeeze(0).numpy() for l in layers]).astype(np.float32)
    if stacked.shape[2] != EXPECTED_DIM:
        raise DimensionError(
            f"encoder feature dim is {stacked.shape[2]}, expected {EXPECTED_DIM}")
    return stacked


def export(job: ExportJob, model=None, log: logging.Logger | None = None) -> Path:
    """Run the job; returns the manifest path.

    Unreadable audio is skipped with a warning; a dimension mismatch
    aborts the whole export.  Manifest lines are appended as each file
    lands, so a partial run leaves a valid manifest of what finished.
    """
    log = log or logger
    if model is None:
        model = load_encoder(job.checkpoint)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    written = 0
    with open(manifest_path, "w", encoding="utf-8") as mf:
        for item in job.items:
            try:
                samples = load_audio(item.path, target_rate=job.sample_rate)
            except AudioReadError as exc:
                log.warning("skipping %s: %s", item.utt, exc)
                continue
            feats = encode(model, samples)
            filename = f"{item.utt}.w2vf"
            write_feature_stack(FeatureStack(feats), out_dir / filename)
            mf.write(json.dumps({"utt": item.utt, "speaker": item.speaker,
                                 "path": filename, "frames": int(feats.shape[1])}) + "\n")
            mf.flush()
            written += 1
    log.info("exported %d/%d utterances to %s", written, len(job.items), out_dir)
    return manifest_path
