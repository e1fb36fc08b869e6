"""Two-domain (real vs. synthetic) toy corpus in spectral-frame space.

Utterances are strings of phoneme segments separated by background. Each
phoneme has a fixed 40-dim prototype shared across domains; frames are the
prototype plus Gaussian noise. Synthetic examples get two artifacts: a
constant offset ``artifact_amplitude * v`` on every frame, and their own
(typically smaller) noise level. Alignments are known exactly by
construction.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .frontend import N_MELS, FeatureSequence, stack_frames

REAL, SYNTHETIC = 0, 1
BUCKETS = ("real_positive", "real_negative", "synthetic_positive", "synthetic_negative")
BUCKET_KEYS = {name: (dom, pos) for name, dom, pos in zip(
    BUCKETS, (REAL, REAL, SYNTHETIC, SYNTHETIC), (True, False, True, False))}
STACKED_FRAME_S = 0.02

_MAGIC = b"KWSC"
_VERSION = 1


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_phonemes: int = 4
    keyword: tuple = (0, 1, 2, 3)
    frames_per_phoneme: tuple = (5, 10)
    prototype_seed: int = 1
    prototype_scale: float = 1.0
    noise_sigma_real: float = 1.0
    noise_sigma_syn: float = 1.0
    artifact_seed: int = 2
    artifact_amplitude: float = 2.0
    # real_positive, real_negative, synthetic_positive, synthetic_negative
    counts: tuple = (400, 800, 600, 500)
    background_frames: tuple = (10, 30)
    gap_frames: tuple = (4, 12)
    distractor_words: tuple = (1, 2)
    negative_styles: tuple = ("prefix", "suffix", "shuffle", "walk")

    def __post_init__(self):
        for name in ("keyword", "frames_per_phoneme", "counts", "background_frames",
                     "gap_frames", "distractor_words", "negative_styles"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_phonemes < 2:
            raise ConfigError("need at least two phonemes")
        if not self.keyword or any(not 0 <= p < self.n_phonemes for p in self.keyword):
            raise ConfigError(f"keyword {self.keyword} uses invalid phoneme ids")
        if any(a == b for a, b in zip(self.keyword, self.keyword[1:])):
            raise ConfigError("keyword may not repeat a phoneme back to back")
        if len(self.counts) != 4 or any(c < 0 for c in self.counts):
            raise ConfigError("counts must be four non-negative integers")
        if self.artifact_amplitude < 0:
            raise ConfigError("artifact_amplitude must be >= 0")
        if min(self.noise_sigma_real, self.noise_sigma_syn) < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.frames_per_phoneme[0] < 5:
            # guarantees every phoneme owns at least one stacked-frame centre
            raise ConfigError("frames_per_phoneme lower bound must be >= 5")
        if self.gap_frames[0] < 4:
            raise ConfigError("gap_frames lower bound must be >= 4")
        unknown = set(self.negative_styles) - {"prefix", "suffix", "shuffle", "walk"}
        if unknown or not self.negative_styles:
            raise ConfigError(f"bad negative_styles {self.negative_styles}")

    @property
    def background(self):
        return self.n_phonemes

    def spec_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class FrameLabels:
    classes: np.ndarray  # c_t per stacked frame; n_phonemes means background
    positive: bool
    omega_end: int = None
    keyword_start: int = None
    domain: int = REAL

    def __post_init__(self):
        if (self.omega_end is not None) != bool(self.positive):
            raise DataError("omega_end must be present exactly for positive utterances")
        if self.omega_end is not None and not 0 <= self.omega_end < len(self.classes):
            raise DataError("omega_end outside the utterance")

    def keyword_mask(self):
        """Per-frame decoder target: 1 on [keyword_start, omega_end]."""
        m = np.zeros(len(self.classes), dtype=np.int64)
        if self.positive:
            m[self.keyword_start: self.omega_end + 1] = 1
        return m


@dataclass
class LabeledExample:
    features: FeatureSequence
    labels: FrameLabels
    uid: str = ""

    def __len__(self):
        return len(self.features)

    @property
    def duration_s(self):
        return len(self) * STACKED_FRAME_S


@dataclass
class Corpus:
    buckets: dict  # bucket name -> list of LabeledExample
    spec: CorpusSpec = None

    def __getitem__(self, name):
        return self.buckets[name]

    def __len__(self):
        return sum(len(v) for v in self.buckets.values())

    def examples(self, names=BUCKETS):
        return [ex for n in names for ex in self.buckets.get(n, [])]


def prototypes(spec):
    rng = np.random.default_rng([spec.prototype_seed, 0])
    protos = rng.normal(size=(spec.n_phonemes, N_MELS)) * spec.prototype_scale
    return np.vstack([protos, np.zeros((1, N_MELS))])  # background last


def artifact_vector(spec):
    v = np.random.default_rng([spec.artifact_seed, 1]).normal(size=N_MELS)
    return v / np.linalg.norm(v)


def contains_keyword(words, keyword):
    k = len(keyword)
    kw = list(keyword)
    return any(list(w[i:i + k]) == kw for w in words for i in range(len(w) - k + 1))


def _negative_word(spec, rng):
    kw = list(spec.keyword)
    K = len(kw)
    for _ in range(100):
        style = spec.negative_styles[rng.integers(len(spec.negative_styles))]
        if style == "prefix" and K > 1:
            w = kw[: rng.integers(1, K)]
        elif style == "suffix" and K > 1:
            w = kw[rng.integers(1, K):]
        elif style == "shuffle":
            w = list(rng.permutation(kw))
        else:
            n = int(rng.integers(2, K + 2))
            w = [int(rng.integers(spec.n_phonemes))]
            while len(w) < n:
                p = int(rng.integers(spec.n_phonemes))
                if p != w[-1]:
                    w.append(p)
        if any(a == b for a, b in zip(w, w[1:])):
            continue
        if not contains_keyword([w], kw):
            return [int(p) for p in w]
    raise ConfigError("could not draw a distractor word; keyword too short for the styles")


def _example(spec, domain, positive, rng, protos, art):
    n_words = int(rng.integers(spec.distractor_words[0], spec.distractor_words[1] + 1))
    words = [_negative_word(spec, rng) for _ in range(n_words)]
    kw_word = None
    if positive:
        kw_word = int(rng.integers(n_words + 1))
        words.insert(kw_word, list(spec.keyword))
    bg = spec.background
    labels = [bg] * int(rng.integers(spec.background_frames[0], spec.background_frames[1] + 1))
    kw_span = None
    lo, hi = spec.frames_per_phoneme
    for wi, w in enumerate(words):
        if wi:
            labels += [bg] * int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))
        start = len(labels)
        for p in w:
            labels += [p] * int(rng.integers(lo, hi + 1))
        if wi == kw_word:
            kw_span = (start, len(labels) - 1)
    labels += [bg] * int(rng.integers(spec.background_frames[0], spec.background_frames[1] + 1))
    labels = np.asarray(labels, dtype=np.int64)

    sigma = spec.noise_sigma_syn if domain == SYNTHETIC else spec.noise_sigma_real
    frames = protos[labels] + sigma * rng.normal(size=(len(labels), N_MELS))
    if domain == SYNTHETIC:
        frames = frames + spec.artifact_amplitude * art

    feats = stack_frames(frames.astype(np.float32))
    centres = 2 * np.arange(len(feats)) + 1
    classes = labels[centres]
    omega_end = kw_start = None
    if positive:
        inside = np.flatnonzero((centres >= kw_span[0]) & (centres <= kw_span[1]))
        kw_start, omega_end = int(inside[0]), int(inside[-1])
    return LabeledExample(
        feats, FrameLabels(classes, positive, omega_end, kw_start, domain)
    )


def generate_corpus(spec):
    """Four buckets of labelled examples; per-example RNG streams keyed by (seed, bucket, index)."""
    protos, art = prototypes(spec), artifact_vector(spec)
    buckets = {}
    for b, name in enumerate(BUCKETS):
        domain, positive = BUCKET_KEYS[name]
        out = []
        for i in range(spec.counts[b]):
            rng = np.random.default_rng([spec.seed, b, i])
            ex = _example(spec, domain, positive, rng, protos, art)
            ex.uid = f"{name}/{i}"
            out.append(ex)
        buckets[name] = out
    return Corpus(buckets, spec)


def eval_spec(spec, seed, n_positive, n_negative):
    """Same world (prototypes, artifact) with fresh utterances: real buckets only."""
    return replace(spec, seed=seed, counts=(n_positive, n_negative, 0, 0))


# -- mixing ------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureWeights:
    """Bucket sampling weights; real positives are scaled by ``real_positive_weight``."""

    real_positive_weight: float = 1.0
    real_negative: float = 1.0
    synthetic_positive: float = 1.0
    synthetic_negative: float = 1.0
    real_positive_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.real_positive_weight <= 1.0:
            raise ConfigError("real_positive_weight must be in [0, 1]")
        if min(self.rates()) < 0 or sum(self.rates()) <= 0:
            raise ConfigError("mixture rates must be >= 0 with at least one positive")

    def rates(self):
        return (self.real_positive_weight * self.real_positive_rate, self.real_negative,
                self.synthetic_positive, self.synthetic_negative)

    def probabilities(self):
        r = np.asarray(self.rates(), dtype=np.float64)
        return r / r.sum()

    @classmethod
    def proportional(cls, corpus, real_positive_weight):
        """Bucket rates proportional to bucket sizes (the natural mixture)."""
        n = [len(corpus.buckets.get(b, [])) for b in BUCKETS]
        return cls(real_positive_weight, n[1], n[2], n[3], real_positive_rate=n[0])


def sample_batch(corpus, weights, batch_size, rng):
    p = weights.probabilities()
    for b, name in enumerate(BUCKETS):
        if p[b] > 0 and not corpus.buckets.get(name):
            raise DataError(f"bucket {name} is empty but has sampling weight {p[b]:.3g}")
    out = []
    for _ in range(batch_size):
        name = BUCKETS[rng.choice(4, p=p)]
        bucket = corpus.buckets[name]
        out.append(bucket[rng.integers(len(bucket))])
    return out


def augment(example, noise_level, rng):
    if noise_level < 0:
        raise ConfigError("noise_level must be >= 0")
    if noise_level == 0:
        return example
    v = example.features.vectors
    noisy = (v + noise_level * rng.normal(size=v.shape)).astype(v.dtype)
    return LabeledExample(FeatureSequence(noisy), example.labels, example.uid)


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray  # (B, L, D), zero-padded
    lengths: np.ndarray
    classes: np.ndarray  # (B, L) encoder targets, padded with -1
    keyword: np.ndarray  # (B, L) decoder targets, padded with -1
    positive: np.ndarray  # (B,) bool
    omega_end: np.ndarray  # (B,) -1 for negatives
    domain: np.ndarray  # (B,) 1 = synthetic

    def __len__(self):
        return self.lengths.shape[0]


def collate(examples, dtype=np.float32):
    if not examples:
        raise DataError("cannot collate an empty batch")
    lengths = np.array([len(e) for e in examples], dtype=np.int64)
    B, L = len(examples), int(lengths.max())
    D = examples[0].features.vectors.shape[1]
    x = np.zeros((B, L, D), dtype=dtype)
    classes = np.full((B, L), -1, dtype=np.int64)
    kw = np.full((B, L), -1, dtype=np.int64)
    for i, e in enumerate(examples):
        n = lengths[i]
        x[i, :n] = e.features.vectors
        classes[i, :n] = e.labels.classes
        kw[i, :n] = e.labels.keyword_mask()
    return Batch(
        x, lengths, classes, kw,
        np.array([e.labels.positive for e in examples]),
        np.array([-1 if e.labels.omega_end is None else e.labels.omega_end for e in examples]),
        np.array([e.labels.domain for e in examples], dtype=np.int64),
    )


# -- serialization -------------------------------------------------------------

def write_bucket(path, examples):
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<II", _VERSION, len(examples)))
        for e in examples:
            v = np.ascontiguousarray(e.features.vectors, dtype="<f4")
            lab = e.labels
            f.write(struct.pack("<II", v.shape[0], v.shape[1]))
            f.write(v.tobytes())
            f.write(np.asarray(lab.classes, dtype="<i4").tobytes())
            f.write(struct.pack(
                "<BiiB", int(lab.positive),
                -1 if lab.omega_end is None else lab.omega_end,
                -1 if lab.keyword_start is None else lab.keyword_start,
                lab.domain,
            ))


def read_bucket(path, name=None):
    name = name or Path(path).stem
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read corpus bucket {path}: {e}") from e
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: bad corpus magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != _VERSION:
            raise DataError(f"{path}: unsupported corpus version {version}")
        off = 12
        out = []
        for i in range(count):
            n, d = struct.unpack_from("<II", data, off)
            off += 8
            v = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
            off += 4 * n * d
            classes = np.frombuffer(data, dtype="<i4", count=n, offset=off).astype(np.int64)
            off += 4 * n
            pos, omega, kws, dom = struct.unpack_from("<BiiB", data, off)
            off += 10
            labels = FrameLabels(classes, bool(pos), None if omega < 0 else omega,
                                 None if kws < 0 else kws, dom)
            out.append(LabeledExample(FeatureSequence(v.astype(np.float32)), labels, f"{name}/{i}"))
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated or corrupt corpus bucket ({e})") from e
    return out


def save_corpus(corpus, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in BUCKETS:
        write_bucket(directory / f"{name}.bin", corpus.buckets.get(name, []))
    manifest = {
        "format_version": _VERSION,
        "spec": asdict(corpus.spec) if corpus.spec else None,
        "spec_hash": corpus.spec.spec_hash() if corpus.spec else None,
        "buckets": {n: len(corpus.buckets.get(n, [])) for n in BUCKETS},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_corpus(directory):
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no corpus manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: invalid JSON ({e})") from e
    spec = CorpusSpec(**manifest["spec"]) if manifest.get("spec") else None
    buckets = {n: read_bucket(directory / f"{n}.bin", n) for n in BUCKETS}
    for n, count in manifest["buckets"].items():
        if len(buckets[n]) != count:
            raise DataError(f"{directory}: bucket {n} has {len(buckets[n])} examples, manifest says {count}")
    return Corpus(buckets, spec)
