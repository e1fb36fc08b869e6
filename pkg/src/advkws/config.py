"""INI-style experiment configs.

Sections and keys (all optional, defaults from the dataclasses)::

    [corpus]       seed, n_phonemes, keyword, frames_per_phoneme, prototype_seed,
                   prototype_scale, noise_sigma_real, noise_sigma_syn,
                   artifact_seed, artifact_amplitude, counts, background_frames,
                   gap_frames, distractor_words, negative_styles
    [eval_corpus]  seed, n_positive, n_negative, probe_seed, probe_per_bucket
    [model]        encoder_nodes, encoder_memory, decoder_nodes, decoder_memory,
                   bottleneck, n_encoder_layers, n_decoder_layers
    [loss]         alpha, beta, lambda, maxpool_window
    [train]        steps, batch_size, seed, adversarial, real_positive_weight,
                   augment_noise, taps, lr, beta1, beta2, eps, log_every
    [grid]         lambdas, real_pos_weights, seeds
    [probe]        steps, lr, batch_size, holdout, seed, taps (one subset per
                   line, taps separated by spaces or commas)

Lists are comma separated.
"""

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import CorpusSpec
from .errors import ConfigError
from .evaluation import PROBE_TAP_SUBSETS, ProbeConfig
from .model import ModelConfig, SvdfLayerSpec
from .training import AdamConfig, LossConfig, TrainConfig


@dataclass(frozen=True)
class EvalCorpusConfig:
    seed: int = 1000
    n_positive: int = 400
    n_negative: int = 800
    probe_seed: int = 2000
    probe_per_bucket: int = 150


@dataclass(frozen=True)
class GridConfig:
    lambdas: tuple = (0.30, 0.35, 0.40, 0.50)
    real_pos_weights: tuple = (0.0, 0.01, 0.05, 0.20, 1.00)
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not self.lambdas or not self.real_pos_weights or not self.seeds:
            raise ConfigError("grid lists must be nonempty")
        if any(not 0 <= w <= 1 for w in self.real_pos_weights):
            raise ConfigError("real_pos_weights must lie in [0, 1]")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError("lambdas must be >= 0")


@dataclass(frozen=True)
class Experiment:
    corpus: CorpusSpec = CorpusSpec()
    eval_corpus: EvalCorpusConfig = EvalCorpusConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    grid: GridConfig = GridConfig()
    probe: ProbeConfig = ProbeConfig()
    probe_seed: int = 0
    probe_taps: tuple = PROBE_TAP_SUBSETS
    sections: frozenset = field(default_factory=frozenset)


def _split(value):
    return [v.strip() for v in value.replace("\n", ",").split(",") if v.strip()]


def _convert(value, default, key):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = _split(value)
            if default and isinstance(default[0], str):
                return tuple(items)
            if default and isinstance(default[0], float):
                return tuple(float(v) for v in items)
            return tuple(int(v) for v in items)
        return value.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from e


def _fill(cls_default, section, name, renames=None):
    renames = renames or {}
    known = {f.name for f in fields(cls_default)}
    updates = {}
    for key, value in section.items():
        attr = renames.get(key, key)
        if attr not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        updates[attr] = _convert(value, getattr(cls_default, attr), f"{name}.{key}")
    try:
        return replace(cls_default, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from e


def _model(section):
    known = {"encoder_nodes", "encoder_memory", "decoder_nodes", "decoder_memory", "bottleneck",
             "n_encoder_layers", "n_decoder_layers", "n_phonemes"}
    for key in section:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [model]")
    try:
        g = {k: int(v) for k, v in section.items()}
    except ValueError as e:
        raise ConfigError(f"[model]: {e}") from e
    ne, nd = g.get("n_encoder_layers", 4), g.get("n_decoder_layers", 3)
    enc = (SvdfLayerSpec(g.get("encoder_nodes", 16), g.get("encoder_memory", 8)),) * ne
    dec = (SvdfLayerSpec(g.get("decoder_nodes", 16), g.get("decoder_memory", 8)),) * nd
    b = g.get("bottleneck", 12)
    names = [f"en_{i}" for i in range(ne)] + [f"de_{i}" for i in range(nd)]
    # bottlenecks after en_1, en_3 and de_0 when those layers exist
    bott = tuple((n, b) for n in ("en_1", "en_3", "de_0") if n in names) if b else ()
    return ModelConfig(encoder_layers=enc, decoder_layers=dec, bottlenecks=bott,
                       encoder_classes=g.get("n_phonemes", 4) + 1)


def parse_config(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    allowed = {"corpus", "eval_corpus", "model", "loss", "train", "grid", "probe"}
    unknown = set(cp.sections()) - allowed
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    exp = Experiment(sections=frozenset(cp.sections()))
    corpus = _fill(exp.corpus, cp["corpus"], "corpus") if cp.has_section("corpus") else exp.corpus
    model_sec = dict(cp["model"]) if cp.has_section("model") else {}
    model_sec.setdefault("n_phonemes", str(corpus.n_phonemes))
    updates = {
        "corpus": corpus,
        "model": _model(model_sec),
    }
    if cp.has_section("eval_corpus"):
        updates["eval_corpus"] = _fill(exp.eval_corpus, cp["eval_corpus"], "eval_corpus")
    if cp.has_section("loss"):
        updates["loss"] = _fill(exp.loss, cp["loss"], "loss", {"lambda": "lam"})
    if cp.has_section("train"):
        sec = dict(cp["train"])
        opt = {k: sec.pop(k) for k in ("lr", "beta1", "beta2", "eps") if k in sec}
        train = _fill(exp.train, sec, "train")
        if opt:
            train = replace(train, optimizer=_fill(AdamConfig(), opt, "train"))
        updates["train"] = train
    if cp.has_section("grid"):
        updates["grid"] = _fill(exp.grid, cp["grid"], "grid")
    if cp.has_section("probe"):
        sec = dict(cp["probe"])
        taps = sec.pop("taps", None)
        seed = sec.pop("seed", None)
        updates["probe"] = _fill(exp.probe, sec, "probe")
        if seed is not None:
            updates["probe_seed"] = _convert(seed, 0, "probe.seed")
        if taps is not None:
            rows = tuple(tuple(t for t in line.replace(",", " ").split())
                         for line in taps.splitlines() if line.strip())
            if not rows:
                raise ConfigError(f"{source}: [probe] taps is empty")
            updates["probe_taps"] = rows
    return replace(exp, **updates)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))
