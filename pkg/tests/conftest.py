"""Shared synthetic-corpus helpers for the test suite."""

from __future__ import annotations

import os

import numpy as np

from graphpool.dataio import (FeatureStack, Manifest, ManifestEntry, Trial,
                              TrialList, write_feature_stack)


def make_corpus(root, n_speakers=3, utts_per_speaker=4, layers=1, frames=12,
                dim=8, separation=3.0, noise=1.0, seed=0, dtype=np.float32,
                prefix="spk"):
    """Write a synthetic corpus: per-speaker mean vector, frames = mean
    plus white noise.  Returns the manifest (paths under root)."""
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for s in range(n_speakers):
        center = separation * rng.normal(size=dim)
        for u in range(utts_per_speaker):
            utt = f"{prefix}{s:03d}_utt{u:03d}"
            vals = center[None, None, :] + noise * rng.normal(size=(layers, frames, dim))
            path = os.path.join(root, utt + ".w2vf")
            write_feature_stack(FeatureStack(vals.astype(dtype)), path)
            entries.append(ManifestEntry(utt=utt, speaker=f"{prefix}{s:03d}",
                                         path=path, frames=frames))
    return Manifest(entries)


def all_pairs_trials(manifest: Manifest) -> TrialList:
    """Every unordered utterance pair, labeled by speaker identity."""
    entries = sorted(manifest.entries, key=lambda e: e.utt)
    trials = []
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            a, b = entries[i], entries[j]
            trials.append(Trial(label=int(a.speaker == b.speaker),
                                enroll=a.utt, test=b.utt))
    return TrialList(trials)
