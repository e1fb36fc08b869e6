"""Detection scoring, FA/h-anchored FRR, and gradient-stop domain probes."""

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .datagen import REAL, SYNTHETIC, STACKED_FRAME_S, collate
from .errors import ConfigError, DataError
from .model import (canonical_taps, collect_adv_features, config_from_params, forward,
                    init_stream_state, stream_step)
from .training import AdamConfig, adam_init, adam_update, adv_forward, init_head, sigmoid

DEFAULT_TARGET_FA_PER_HOUR = 0.133

PROBE_TAP_SUBSETS = (
    ("en_0", "en_1", "en_2", "en_3", "de_0", "de_1", "de_2"),
    ("en_0", "en_1", "en_2", "en_3"),
    ("en_0", "en_1", "en_2"),
    ("en_0", "en_1"),
    ("en_2",),
    ("en_3",),
    ("en_1",),
    ("de_0", "de_1", "de_2"),
    ("de_0",),
    ("en_0",),
    ("de_1",),
    ("de_2",),
)


@dataclass(frozen=True)
class DetectionScore:
    uid: str
    score: float
    is_positive: bool
    duration_s: float


def _keyword_posterior(dec):
    z = dec - dec.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def score_utterances(params, examples, streaming=True, chunk=256):
    """Score = max over frames of the decoder keyword posterior.

    The streaming path pushes frames through ``stream_step`` with one stream
    per utterance; the batch path runs ``forward`` and is used as its oracle.
    """
    if not examples:
        raise DataError("evaluation set is empty")
    config = config_from_params(params)
    dtype = params["en_0.feature"].dtype
    scores = []
    for lo in range(0, len(examples), chunk):
        part = examples[lo:lo + chunk]
        batch = collate(part, dtype)
        lengths = batch.lengths
        if streaming:
            state = init_stream_state(params, len(part), config)
            best = np.full(len(part), -np.inf)
            for t in range(batch.features.shape[1]):
                _, dec, state = stream_step(params, state, batch.features[:, t], config)
                p = _keyword_posterior(dec)
                live = t < lengths
                best[live] = np.maximum(best[live], p[live])
        else:
            trace = forward(params, batch.features, lengths, config)
            post = _keyword_posterior(trace.decoder_logits)
            mask = np.arange(post.shape[1])[None, :] < lengths[:, None]
            best = np.where(mask, post, -np.inf).max(axis=1)
        for e, s in zip(part, best):
            scores.append(DetectionScore(e.uid, float(s), bool(e.labels.positive), e.duration_s))
    return scores


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fa_per_hour: np.ndarray
    frr: np.ndarray

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fa_per_hour", "frr"])
        for t, fa, fr in zip(self.thresholds, self.fa_per_hour, self.frr):
            w.writerow([repr(float(t)), f"{fa:.6f}", f"{fr:.6f}"])
        return buf.getvalue()


@dataclass
class FrrResult:
    curve: RocCurve
    frr: float
    threshold: float
    fa_per_hour: float
    target_fa_per_hour: float
    degenerate: bool = False


def roc_and_frr(scores, target_fa_per_hour=DEFAULT_TARGET_FA_PER_HOUR):
    """ROC over every distinct score plus the FRR at the FA/h anchor.

    FA/h(tau) counts negatives scoring >= tau per hour of negative audio;
    FRR(tau) is the fraction of positives scoring < tau. Candidate thresholds
    are the distinct scores plus the next float above the maximum (when that
    stays within [0, 1]). The anchor is the smallest candidate with
    FA/h <= target; if none qualifies the top candidate is returned with
    ``degenerate=True``.
    """
    s = np.array([x.score for x in scores], dtype=np.float64)
    pos = np.array([x.is_positive for x in scores], dtype=bool)
    if not pos.any() or pos.all():
        raise DataError("need at least one positive and one negative score")
    neg_hours = sum(x.duration_s for x in scores if not x.is_positive) / 3600.0
    if neg_hours <= 0:
        raise DataError("total negative duration must be positive")
    thresholds = np.unique(s)
    top = np.nextafter(thresholds[-1], np.inf)
    if top <= 1.0:
        thresholds = np.append(thresholds, top)
    neg = np.sort(s[~pos])
    psc = np.sort(s[pos])
    fa = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg_hours
    frr = np.searchsorted(psc, thresholds, side="left") / psc.size
    curve = RocCurve(thresholds, fa, frr)
    ok = np.flatnonzero(fa <= target_fa_per_hour)
    i = ok[0] if ok.size else thresholds.size - 1
    return FrrResult(curve, float(frr[i]), float(thresholds[i]), float(fa[i]),
                     target_fa_per_hour, degenerate=not ok.size)


# -- probes ---------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeReport:
    taps: tuple
    accuracy: float
    frozen: bool = True
    n_train: int = 0
    n_test: int = 0


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 32
    holdout: float = 0.3


def tap_features(params, examples, taps):
    """Per-utterance H sequences (padded) from a frozen forward pass."""
    config = config_from_params(params)
    batch = collate(examples, params["en_0.feature"].dtype)
    trace = forward(params, batch.features, batch.lengths, config)
    return collect_adv_features(trace, taps), batch.lengths, batch.domain


def probe_accuracy(params, taps, examples, seed=0, config=ProbeConfig(), features=None):
    """Train a fresh max-pool linear domain head on frozen taps; held-out accuracy.

    The KWS parameters are never updated (gradient stop). ``features`` may
    carry precomputed (H, lengths, domain) for ``taps``.
    """
    taps = canonical_taps(taps)
    if not taps:
        raise ConfigError("tap set must be nonempty")
    if hasattr(examples, "examples"):
        examples = examples.examples()
    domains = {e.labels.domain for e in examples}
    if domains != {REAL, SYNTHETIC}:
        raise DataError("probe needs examples from both domains")
    H, lengths, domain = features if features is not None else tap_features(params, examples, taps)
    H = H.astype(np.float64)
    rng = np.random.default_rng([seed, 31])
    order = rng.permutation(len(examples))
    n_test = max(1, int(round(config.holdout * len(examples))))
    test, train = order[:n_test], order[n_test:]
    # standardise with training-split statistics so one lr suits every tap set
    mask = (np.arange(H.shape[1])[None, :] < lengths[train, None])
    mu = H[train][mask].mean(axis=0)
    sd = H[train][mask].std(axis=0) + 1e-6
    Hn = (H - mu) / sd
    head = init_head(H.shape[-1], rng, np.float64)
    state = adam_init(head)
    adam = AdamConfig(lr=config.lr)
    for _ in range(config.steps):
        idx = train[rng.integers(train.size, size=config.batch_size)]
        Lb = int(lengths[idx].max())
        hb, lb, yb = Hn[idx, :Lb], lengths[idx], domain[idx]
        logits, frames = adv_forward(hb, head, lb)
        dY = (sigmoid(logits) - yb) / idx.size
        grads = {"adv.weight": dY @ hb[np.arange(idx.size), frames],
                 "adv.bias": np.array([dY.sum()])}
        head, state = adam_update(head, grads, state, adam)
    logits, _ = adv_forward(Hn[test], head, lengths[test])
    acc = float(np.mean((logits > 0) == (domain[test] == SYNTHETIC)))
    return ProbeReport(taps, acc, True, int(train.size), int(test.size))


def table2_sweep(params, examples, tap_subsets=PROBE_TAP_SUBSETS, seed=0, config=ProbeConfig()):
    """Probe every tap subset; reports sorted by accuracy (descending)."""
    if not tap_subsets:
        raise ConfigError("no tap subsets given")
    seen, subsets = set(), []
    for s in tap_subsets:
        key = canonical_taps(s)
        if not key:
            raise ConfigError("empty tap subset")
        if key in seen:
            warnings.warn(f"duplicate tap subset {key} dropped", stacklevel=2)
            continue
        seen.add(key)
        subsets.append(key)
    if hasattr(examples, "examples"):
        examples = examples.examples()
    all_taps = canonical_taps({t for s in subsets for t in s})
    H, lengths, domain = tap_features(params, examples, all_taps)
    dims = config_from_params(params).tap_dims()
    offsets = np.cumsum([0] + [dims[t] for t in all_taps])
    cols = {t: slice(offsets[i], offsets[i + 1]) for i, t in enumerate(all_taps)}
    reports = []
    for s in subsets:
        Hs = np.concatenate([H[..., cols[t]] for t in s], axis=-1)
        reports.append(probe_accuracy(params, s, examples, seed, config, (Hs, lengths, domain)))
    return sorted(reports, key=lambda r: -r.accuracy)


def probe_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["taps", "accuracy"])
    for r in reports:
        w.writerow([" ".join(r.taps), f"{r.accuracy:.6f}"])
    return buf.getvalue()


def negative_hours(examples):
    return sum(len(e) for e in examples if not e.labels.positive) * STACKED_FRAME_S / 3600.0


def relative_improvement(frr_baseline, frr_model):
    if frr_baseline == 0 or math.isnan(frr_baseline):
        return float("nan")
    return (frr_baseline - frr_model) / frr_baseline
