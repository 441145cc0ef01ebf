"""Verification scoring: full-length embeddings, cosine trial scores,
and interpolated equal error rate.

The EER comes from the ROC traced at every distinct score threshold
(accept iff score >= threshold) plus the all-rejected endpoint, with
linear interpolation between the two points where FAR - FRR changes
sign.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .dataio import Manifest, TrialList, read_feature_stack
from .diffcore import no_tape
from .errors import DomainError, NumericError, UsageError
from .model import ModelConfig, ModelParams

SCORE_NORM_FLOOR = 1e-12


def embed_utterance(path: str | os.PathLike, params: ModelParams,
                    config: ModelConfig) -> np.ndarray:
    """Embed one feature file at full length, no gradient bookkeeping."""
    stack = read_feature_stack(path)
    with no_tape():
        out = mdl.forward(stack, params, config)
    return np.asarray(out.data[0], dtype=np.float64)


def embed_all(manifest: Manifest, params: ModelParams, config: ModelConfig,
              workers: int = 0) -> dict[str, np.ndarray]:
    """Embeddings for every manifest utterance, keyed by utterance id.

    workers > 0 runs the forward passes on a thread pool; results are
    identical to the sequential path since each utterance is
    independent and parameters are only read.
    """
    entries = sorted(manifest.entries, key=lambda e: e.utt)
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vecs = list(pool.map(
                lambda e: embed_utterance(e.path, params, config), entries))
    else:
        vecs = [embed_utterance(e.path, params, config) for e in entries]
    return {e.utt: v for e, v in zip(entries, vecs)}


@dataclass
class ScoredTrials:
    scores: np.ndarray  # (M,)
    labels: np.ndarray  # (M,) 1 = same speaker

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise UsageError(
                f"scores {self.scores.shape} and labels {self.labels.shape} disagree")


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < SCORE_NORM_FLOOR or nb < SCORE_NORM_FLOOR:
        raise NumericError(
            f"cannot cosine-score embeddings with norms {na:.3e}, {nb:.3e}")
    return float(np.dot(a, b) / (na * nb))


def score_trials(trials: TrialList, embeddings: dict[str, np.ndarray]) -> ScoredTrials:
    scores = np.empty(len(trials.trials))
    labels = np.empty(len(trials.trials), dtype=np.int64)
    for i, trial in enumerate(trials.trials):
        for utt in (trial.enroll, trial.test):
            if utt not in embeddings:
                raise UsageError(f"trial references unembedded utterance {utt!r}")
        scores[i] = cosine_score(embeddings[trial.enroll], embeddings[trial.test])
        labels[i] = trial.label
    return ScoredTrials(scores=scores, labels=labels)


@dataclass
class EerResult:
    eer: float
    threshold: float


def compute_eer(scored: ScoredTrials) -> EerResult:
    """Interpolated EER over the threshold sweep of distinct scores."""
    labels = scored.labels
    targets = np.sort(scored.scores[labels == 1])
    nontargets = np.sort(scored.scores[labels == 0])
    if targets.size == 0 or nontargets.size == 0:
        raise DomainError(
            "EER needs both target and nontarget trials "
            f"(got {targets.size} targets, {nontargets.size} nontargets)")
    thresholds = np.unique(scored.scores)
    # Accept iff score >= threshold; one virtual threshold past the top
    # gives the all-rejected endpoint (FAR 0, FRR 1).
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    far = (nontargets.size - np.searchsorted(nontargets, thresholds, side="left"))
    far = far / nontargets.size
    frr = np.searchsorted(targets, thresholds, side="left") / targets.size
    diff = far - frr
    for i in range(len(thresholds) - 1):
        d1, d2 = diff[i], diff[i + 1]
        if d1 == 0.0:
            return EerResult(eer=float(far[i]), threshold=float(thresholds[i]))
        if d1 > 0.0 >= d2:
            t = d1 / (d1 - d2)
            eer = far[i] + t * (far[i + 1] - far[i])
            theta = thresholds[i] + t * (thresholds[i + 1] - thresholds[i])
            return EerResult(eer=float(eer), threshold=float(theta))
    # diff never crossed zero from above; it starts at +1 and the
    # virtual endpoint is -1, so this is unreachable for valid input.
    return EerResult(eer=float(far[-1]), threshold=float(thresholds[-1]))
