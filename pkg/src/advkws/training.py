"""Supervised + domain-adversarial objectives, manual gradients, Adam.

Loss layout (all batch means):

    L_sup   = (1 - alpha) * (CE_enc + CE_dec) + alpha * MP_dec
    L_head  = sigmoid-CE(max_t (w . H_t + b), domain)
    L_total = (1 - beta) * L_sup + beta * L_head

Gradient reversal sits between the taps H and the head: the head receives
``beta * dL_head``; the KWS weights receive ``(1 - beta) * dL_sup`` plus
``-lambda * beta * dL_head`` routed back through the taps.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .datagen import MixtureWeights, augment, collate, sample_batch
from .errors import ConfigError, NumericalError
from .model import (TAP_ORDER, ModelConfig, backward, canonical_taps, collect_adv_features,
                    config_from_params, forward, init_params)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.3
    lam: float = 0.4
    maxpool_window: int = 8

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.maxpool_window < 1:
            raise ConfigError("maxpool_window must be >= 1")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 32
    seed: int = 0
    adversarial: bool = True
    real_positive_weight: float = 1.0
    augment_noise: float = 0.0
    taps: tuple = TAP_ORDER
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    dtype: str = "float32"
    log_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "taps", canonical_taps(self.taps))
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.taps:
            raise ConfigError("taps must be nonempty")


class LossOutput(NamedTuple):
    value: float
    d_encoder: np.ndarray
    d_decoder: np.ndarray
    parts: dict


# -- small numerics ------------------------------------------------------------

def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def _ce_with_grad(z, target, weight):
    """sum(weight * CE(z, target)) and its gradient; frames with target < 0 ignored."""
    valid = target >= 0
    t = np.where(valid, target, 0)
    logp = log_softmax(z)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    w = np.where(valid, weight, 0).astype(z.dtype)
    loss = -float(np.sum(w * picked, dtype=np.float64))
    grad = np.exp(logp)
    np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], -1) - 1, -1)
    return loss, grad * w[..., None]


# -- supervised ------------------------------------------------------------------

def frame_ce_loss(trace, batch):
    """Per-frame softmax CE on encoder (vs c_t) and decoder (vs keyword mask).

    Each utterance contributes the mean over its own frames; the batch loss is
    the mean over utterances. ``parts`` holds the encoder and decoder terms.
    """
    if batch.classes.shape != trace.decoder_logits.shape[:2]:
        raise ConfigError("label length does not match trace length")
    B = len(batch)
    w = 1.0 / (batch.lengths[:, None].astype(np.float64) * B)
    w = np.broadcast_to(w, batch.classes.shape)
    enc, d_enc = _ce_with_grad(trace.encoder_logits, batch.classes, w)
    dec, d_dec = _ce_with_grad(trace.decoder_logits, batch.keyword, w)
    return LossOutput(enc + dec, d_enc, d_dec, {"encoder": enc, "decoder": dec})


def maxpool_frames(trace, batch, window):
    """Frame chosen per utterance by max-pooling the decoder keyword log-odds.

    Positives pool over [omega_end - window + 1, omega_end] (clamped at 0),
    negatives over the whole utterance. Ties go to the earliest frame.
    """
    dec = trace.decoder_logits
    margin = dec[..., 1] - dec[..., 0]
    pos = batch.positive.astype(bool)
    start = np.where(pos, np.maximum(batch.omega_end - window + 1, 0), 0)
    stop = np.where(pos, batch.omega_end + 1, batch.lengths)
    return _kernels.masked_argmax(margin, start, stop)


def maxpool_loss(trace, batch, window):
    B = len(batch)
    idx = maxpool_frames(trace, batch, window)
    rows = np.arange(B)
    z = trace.decoder_logits[rows, idx]
    y = batch.positive.astype(np.int64)
    loss, gz = _ce_with_grad(z, y, np.full(B, 1.0 / B))
    d_dec = np.zeros_like(trace.decoder_logits)
    d_dec[rows, idx] = gz
    return LossOutput(loss, np.zeros_like(trace.encoder_logits), d_dec, {"frames": idx})


def supervised_loss(trace, batch, cfg):
    ce = frame_ce_loss(trace, batch)
    mp = maxpool_loss(trace, batch, cfg.maxpool_window)
    a = cfg.alpha
    value = (1 - a) * ce.value + a * mp.value
    return LossOutput(
        value,
        (1 - a) * ce.d_encoder + a * mp.d_encoder,
        (1 - a) * ce.d_decoder + a * mp.d_decoder,
        {"ce": ce.value, "maxpool": mp.value, **{f"ce_{k}": v for k, v in ce.parts.items()},
         "frames": mp.parts["frames"]},
    )


# -- adversarial head --------------------------------------------------------------

def init_head(dim, rng, dtype=np.float32):
    limit = math.sqrt(6.0 / (dim + 1))
    return {
        "adv.weight": rng.uniform(-limit, limit, size=dim).astype(dtype),
        "adv.bias": np.zeros(1, dtype=dtype),
    }


def _as_padded(H, lengths):
    H = np.asarray(H)
    if H.ndim == 2:
        H = H[None]
    if lengths is None:
        lengths = np.full(H.shape[0], H.shape[1], dtype=np.int64)
    return H, np.asarray(lengths, dtype=np.int64)


def adv_forward(H, head, lengths=None):
    """Max over frames of the per-frame projection w . H_t + b.

    Returns (logits per utterance, argmax frame per utterance).
    """
    H, lengths = _as_padded(H, lengths)
    if H.shape[1] == 0 or np.any(lengths < 1):
        raise ConfigError("adversarial head needs at least one frame")
    if H.shape[-1] != head["adv.weight"].shape[0]:
        raise ConfigError(f"H dim {H.shape[-1]} != head dim {head['adv.weight'].shape[0]}")
    z = H @ head["adv.weight"] + head["adv.bias"][0]
    idx = _kernels.masked_argmax(z, np.zeros_like(lengths), lengths)
    return z[np.arange(H.shape[0]), idx], idx


def head_loss(logits, domain):
    """Mean sigmoid CE; domain 1 = synthetic."""
    y = np.asarray(domain, dtype=logits.dtype)
    return float(np.mean(softplus(logits) - y * logits, dtype=np.float64))


class AdversarialOutput(NamedTuple):
    loss: float
    head_grads: dict
    d_H: np.ndarray  # already multiplied by -lambda
    logits: np.ndarray
    frames: np.ndarray


def adversarial_backward(H, head, domain, lam, lengths=None):
    """Head gradients and the reversed (times -lambda) gradient w.r.t. H."""
    H, lengths = _as_padded(H, lengths)
    logits, idx = adv_forward(H, head, lengths)
    B = H.shape[0]
    y = np.asarray(domain, dtype=logits.dtype)
    dY = (sigmoid(logits) - y) / B
    rows = np.arange(B)
    h_star = H[rows, idx]
    grads = {
        "adv.weight": dY @ h_star,
        "adv.bias": np.array([dY.sum()], dtype=head["adv.bias"].dtype),
    }
    d_H = np.zeros_like(H)
    d_H[rows, idx] = (-lam) * (dY[:, None] * head["adv.weight"])
    return AdversarialOutput(head_loss(logits, y), grads, d_H, logits, idx)


def split_taps(d_H, taps, tap_dims):
    out, off = {}, 0
    for t in canonical_taps(taps):
        out[t] = d_H[..., off:off + tap_dims[t]]
        off += tap_dims[t]
    return out


# -- full objective -----------------------------------------------------------------

class StepGradients(NamedTuple):
    losses: dict
    grads: dict
    head_grads: dict
    trace: object


def compute_gradients(params, head, batch, loss_cfg, taps=TAP_ORDER, adversarial=True,
                      config=None):
    """Gradients of the training objective for one batch.

    With ``adversarial=False`` this is the baseline trainer: no head is
    evaluated and ``head_grads`` is None.
    """
    config = config or config_from_params(params)
    trace = forward(params, batch.features, batch.lengths, config)
    sup = supervised_loss(trace, batch, loss_cfg)
    losses = {"L_sup": sup.value, "L_adv": float("nan"), "L_total": sup.value,
              "head_accuracy": float("nan")}
    if not adversarial:
        grads = backward(params, trace, sup.d_encoder, sup.d_decoder)
        return StepGradients(losses, grads, None, trace)

    beta = loss_cfg.beta
    H = collect_adv_features(trace, taps)
    adv = adversarial_backward(H, head, batch.domain, loss_cfg.lam, batch.lengths)
    d_taps = split_taps(beta * adv.d_H, taps, config.tap_dims())
    grads = backward(params, trace, (1 - beta) * sup.d_encoder, (1 - beta) * sup.d_decoder,
                     d_taps)
    head_grads = {k: beta * g for k, g in adv.head_grads.items()}
    losses.update(
        L_adv=adv.loss,
        L_total=(1 - beta) * sup.value + beta * adv.loss,
        head_accuracy=float(np.mean((adv.logits > 0) == (batch.domain == 1))),
    )
    return StepGradients(losses, grads, head_grads, trace)


# -- optimizer ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(tensors):
    return AdamState({k: np.zeros_like(t) for k, t in tensors.items()},
                     {k: np.zeros_like(t) for k, t in tensors.items()})


def adam_update(tensors, grads, state, cfg):
    """One Adam step; returns new tensors and new state (inputs untouched)."""
    t = state.step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new, m_new, v_new = {}, {}, {}
    for k, p in tensors.items():
        g = grads[k]
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new[k] = (p - update).astype(p.dtype, copy=False)
        m_new[k], v_new[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new, AdamState(m_new, v_new, t)


def _check_finite(label, tensors, step):
    for k, t in tensors.items():
        if not np.all(np.isfinite(t)):
            raise NumericalError(f"non-finite {label} in {k!r} at step {step}")


def total_loss_step(batch, params, head, loss_cfg, opt_state, adam_cfg=AdamConfig(),
                    taps=TAP_ORDER, adversarial=True, config=None):
    """One optimizer step on L_total.

    ``opt_state`` is a pair (kws AdamState, head AdamState or None). Returns
    (losses, params, head, opt_state).
    """
    step = opt_state[0].step
    g = compute_gradients(params, head, batch, loss_cfg, taps, adversarial, config)
    if not math.isfinite(g.losses["L_total"]):
        raise NumericalError(f"non-finite loss at step {step}: {g.losses}")
    _check_finite("gradient", g.grads, step)
    params, kws_state = adam_update(params, g.grads, opt_state[0], adam_cfg)
    _check_finite("parameter", params, step)
    head_state = opt_state[1]
    if adversarial:
        _check_finite("head gradient", g.head_grads, step)
        head, head_state = adam_update(head, g.head_grads, head_state, adam_cfg)
        _check_finite("head parameter", head, step)
    return g.losses, params, head, (kws_state, head_state)


# -- training loop -------------------------------------------------------------------

LOG_FIELDS = ("step", "L_sup", "L_adv", "L_total", "head_accuracy")


@dataclass
class TrainResult:
    params: dict
    head: dict
    log: list

    def log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in self.log:
            w.writerow([row["step"]] + [_fmt(row[k]) for k in LOG_FIELDS[1:]])
        return buf.getvalue()


def _fmt(x):
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def train(corpus, model_config=ModelConfig(), loss_cfg=LossConfig(), train_cfg=TrainConfig(),
          mixture=None, params=None, callback=None):
    """Train a KWS model (and, when adversarial, its domain head) on ``corpus``.

    Randomness is split into independent streams derived from the seed, so the
    baseline and adversarial trainers draw identical batches.
    """
    dtype = np.dtype(train_cfg.dtype)
    seed = train_cfg.seed
    if params is None:
        params = init_params(model_config, seed, dtype)
    mixture = mixture or MixtureWeights.proportional(corpus, train_cfg.real_positive_weight)
    batch_rng = np.random.default_rng([seed, 101])
    aug_rng = np.random.default_rng([seed, 102])
    head = None
    head_state = None
    if train_cfg.adversarial:
        dims = model_config.tap_dims()
        head = init_head(sum(dims[t] for t in train_cfg.taps),
                         np.random.default_rng([seed, 103]), dtype)
        head_state = adam_init(head)
    state = (adam_init(params), head_state)
    log = []
    for step in range(1, train_cfg.steps + 1):
        examples = sample_batch(corpus, mixture, train_cfg.batch_size, batch_rng)
        if train_cfg.augment_noise > 0:
            examples = [augment(e, train_cfg.augment_noise, aug_rng) for e in examples]
        batch = collate(examples, dtype)
        losses, params, head, state = total_loss_step(
            batch, params, head, loss_cfg, state, train_cfg.optimizer, train_cfg.taps,
            train_cfg.adversarial, model_config)
        if step % train_cfg.log_every == 0 or step == train_cfg.steps:
            row = {"step": step, **losses}
            log.append(row)
            if callback:
                callback(row)
    return TrainResult(params, head, log)


# -- gradient checking ------------------------------------------------------------------

def objective(params, head, batch, loss_cfg, mode, taps=TAP_ORDER, config=None):
    """Scalar objective and the non-smooth pattern (ReLU masks, pooled frames).

    ``mode`` is one of ``supervised``, ``head``, ``total_kws`` (the surrogate
    whose gradient equals the reversed update for KWS weights) or
    ``total_head`` (beta * L_head).
    """
    config = config or config_from_params(params)
    trace = forward(params, batch.features, batch.lengths, config)
    pattern = list(trace.activation_pattern())
    sup = None
    if mode in ("supervised", "total_kws"):
        sup = supervised_loss(trace, batch, loss_cfg)
        pattern.append(sup.parts["frames"].tobytes())
    adv = None
    if mode in ("head", "total_kws", "total_head"):
        H = collect_adv_features(trace, taps)
        logits, idx = adv_forward(H, head, batch.lengths)
        adv = head_loss(logits, batch.domain)
        pattern.append(idx.tobytes())
    b, lam = loss_cfg.beta, loss_cfg.lam
    value = {
        "supervised": lambda: sup.value,
        "head": lambda: adv,
        "total_kws": lambda: (1 - b) * sup.value - b * lam * adv,
        "total_head": lambda: b * adv,
    }[mode]()
    return value, tuple(pattern)


def analytic_gradients(params, head, batch, loss_cfg, mode, taps=TAP_ORDER, config=None):
    """Analytic gradients matching ``objective(mode)``, keyed by tensor name."""
    config = config or config_from_params(params)
    if mode == "supervised":
        return compute_gradients(params, head, batch, loss_cfg, taps, False, config).grads
    if mode == "head":
        trace = forward(params, batch.features, batch.lengths, config)
        H = collect_adv_features(trace, taps)
        # lam = -1 turns the reversed gradient back into the true one
        adv = adversarial_backward(H, head, batch.domain, -1.0, batch.lengths)
        g = backward(params, trace, None, None, split_taps(adv.d_H, taps, config.tap_dims()))
        return {**g, **adv.head_grads}
    g = compute_gradients(params, head, batch, loss_cfg, taps, True, config)
    return {**g.grads, **g.head_grads}


@dataclass
class GradCheckReport:
    max_rel_error: dict
    checked: int
    skipped: int
    tolerance: float = 1e-4

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self):
        return self.checked > 0 and self.worst < self.tolerance

    def format(self):
        lines = [f"{k:28s} {v:.3e}" for k, v in self.max_rel_error.items()]
        lines.append(f"checked={self.checked} skipped={self.skipped} worst={self.worst:.3e} "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_difference_check(params, head, batch, loss_cfg, mode, taps=TAP_ORDER, step=1e-5,
                            tensors=None, max_per_tensor=None, rng=None, tolerance=1e-4):
    """Central differences against analytic gradients, skipping kink crossings.

    A coordinate is skipped when the perturbation changes any ReLU sign or
    pooled frame, since the one-sided derivatives differ there.
    """
    config = config_from_params(params)
    analytic = analytic_gradients(params, head, batch, loss_cfg, mode, taps, config)
    _, base = objective(params, head, batch, loss_cfg, mode, taps, config)
    kws_keys = list(params)
    head_keys = list(head) if head is not None and mode != "supervised" else []
    if mode == "total_kws":
        head_keys = []
    if mode == "total_head":
        kws_keys = []
    keys = [k for k in kws_keys + head_keys if tensors is None or k in tensors]
    rng = rng or np.random.default_rng(0)
    errors, checked, skipped = {}, 0, 0
    for key in keys:
        owner = params if key in params else head
        flat = owner[key].reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp, pp = objective(params, head, batch, loss_cfg, mode, taps, config)
            flat[i] = orig - step
            fm, pm = objective(params, head, batch, loss_cfg, mode, taps, config)
            flat[i] = orig
            if pp != base or pm != base:
                skipped += 1
                continue
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, relative_error(float(analytic[key].reshape(-1)[i]), numeric))
            checked += 1
        errors[key] = worst
    return GradCheckReport(errors, checked, skipped, tolerance)


def toy_batch(seed=0, n_per_bucket=2, dtype=np.float64):
    from .datagen import CorpusSpec, generate_corpus

    spec = CorpusSpec(seed=seed, counts=(n_per_bucket,) * 4, background_frames=(5, 8),
                      gap_frames=(4, 6), distractor_words=(1, 1), artifact_amplitude=1.0)
    return collate(generate_corpus(spec).examples(), dtype)


def gradient_check(config=None, seed=0, loss_cfg=LossConfig(beta=0.3, lam=0.35), mode="all",
                   zero_params=False, step=1e-5, max_per_tensor=None):
    """Finite-difference check of every tensor on a toy model in 64-bit.

    ``mode="all"`` runs supervised, head, and both halves of the full
    objective and merges the reports (worst error per tensor and mode).
    """
    from .model import toy_config

    config = config or toy_config()
    rng = np.random.default_rng([seed, 7])
    params = init_params(config, seed, np.float64)
    if zero_params:
        params = {k: np.zeros_like(v) for k, v in params.items()}
        for k in params:
            if k.endswith(".bias"):
                params[k] = rng.uniform(0.05, 0.1, size=params[k].shape) * rng.choice([-1, 1], params[k].shape)
    else:
        # keep biases off zero so ReLUs are not sitting on their kink
        for k in params:
            if k.endswith(".bias"):
                params[k] = rng.uniform(-0.1, 0.1, size=params[k].shape)
    head = init_head(sum(config.tap_dims().values()), rng, np.float64)
    batch = toy_batch(seed)
    modes = ("supervised", "head", "total_kws", "total_head") if mode == "all" else (mode,)
    merged, checked, skipped = {}, 0, 0
    for m in modes:
        rep = finite_difference_check(params, head, batch, loss_cfg, m, step=step,
                                      max_per_tensor=max_per_tensor, rng=rng)
        checked += rep.checked
        skipped += rep.skipped
        for k, v in rep.max_rel_error.items():
            merged[f"{m}:{k}"] = v
    return GradCheckReport(merged, checked, skipped)
