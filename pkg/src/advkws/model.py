"""Two-stage SVDF encoder/decoder network with manual backprop.

Each SVDF node n factors a (memory x input) convolution kernel into a feature
filter ``a_n`` and a time filter ``b_n``::

    s[t, n]   = a_n . x[t]
    out[t, n] = relu(sum_k b_n[k] * s[t - k, n] + bias_n)

with ``s`` taken as zero before the first frame. ``b_n[0]`` weights the
current frame.

Batched arrays are ``(batch, time, dim)`` and right-padded; every op is
causal so padded frames never influence valid ones.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError

TAP_ORDER = ("en_0", "en_1", "en_2", "en_3", "de_0", "de_1", "de_2")


@dataclass(frozen=True)
class SvdfLayerSpec:
    nodes: int
    memory: int

    def __post_init__(self):
        if self.nodes < 1 or self.memory < 1:
            raise ConfigError(f"invalid SVDF layer {self}")


@dataclass(frozen=True)
class ModelConfig:
    """Network shape.

    ``bottlenecks`` maps a layer name to the width of a bias-free linear
    projection applied right after that layer. A head with zero classes is
    omitted; then the decoder consumes the last encoder activation directly.
    """

    input_dim: int = 120
    encoder_layers: tuple = (SvdfLayerSpec(16, 8),) * 4
    decoder_layers: tuple = (SvdfLayerSpec(16, 8),) * 3
    bottlenecks: tuple = (("en_1", 12), ("en_3", 12), ("de_0", 12))
    encoder_classes: int = 5
    decoder_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(self.encoder_layers))
        object.__setattr__(self, "decoder_layers", tuple(self.decoder_layers))
        object.__setattr__(self, "bottlenecks", tuple(tuple(b) for b in self.bottlenecks))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        names = set(self.layer_names)
        for name, dim in self.bottlenecks:
            if name not in names:
                raise ConfigError(f"bottleneck after unknown layer {name!r}")
            if dim < 1:
                raise ConfigError(f"bottleneck width must be positive, got {dim}")
        if self.encoder_classes < 0 or self.decoder_classes < 0:
            raise ConfigError("class counts must be non-negative")

    @property
    def layer_names(self):
        return [f"en_{i}" for i in range(len(self.encoder_layers))] + [
            f"de_{i}" for i in range(len(self.decoder_layers))
        ]

    def ops(self):
        """Sequential op list: (kind, name, in_dim, out_dim, memory)."""
        bott = dict(self.bottlenecks)
        ops = []
        dim = self.input_dim
        stages = [("en", self.encoder_layers, "encoder_head", self.encoder_classes),
                  ("de", self.decoder_layers, "decoder_head", self.decoder_classes)]
        for prefix, layers, head, classes in stages:
            for i, spec in enumerate(layers):
                name = f"{prefix}_{i}"
                ops.append(("svdf", name, dim, spec.nodes, spec.memory))
                dim = spec.nodes
                if name in bott:
                    ops.append(("proj", f"{name}_bottleneck", dim, bott[name], 0))
                    dim = bott[name]
            if classes:
                ops.append(("head", head, dim, classes, 0))
                dim = classes
        return ops

    def tap_dims(self):
        return {name: d for kind, name, _, d, _ in self.ops() if kind == "svdf"}

    def param_shapes(self):
        shapes = {}
        for kind, name, din, dout, mem in self.ops():
            if kind == "svdf":
                shapes[f"{name}.feature"] = (dout, din)
                shapes[f"{name}.time"] = (dout, mem)
                shapes[f"{name}.bias"] = (dout,)
            elif kind == "proj":
                shapes[f"{name}.weight"] = (dout, din)
            else:
                shapes[f"{name}.weight"] = (dout, din)
                shapes[f"{name}.bias"] = (dout,)
        return shapes


def toy_config(nodes=8, memory=4, bottleneck=4, n_phonemes=4):
    return ModelConfig(
        encoder_layers=(SvdfLayerSpec(nodes, memory),) * 4,
        decoder_layers=(SvdfLayerSpec(nodes, memory),) * 3,
        bottlenecks=(("en_1", bottleneck), ("en_3", bottleneck), ("de_0", bottleneck)),
        encoder_classes=n_phonemes + 1,
    )


def full_scale_config(n_phonemes=40):
    """Sized to land near 320k parameters (the production layer widths are unknown)."""
    return ModelConfig(
        encoder_layers=(SvdfLayerSpec(256, 8),) * 4,
        decoder_layers=(SvdfLayerSpec(192, 32),) * 3,
        bottlenecks=(("en_1", 64), ("en_3", 64), ("de_0", 64)),
        encoder_classes=n_phonemes + 1,
    )


def param_count(config):
    """Closed form: N(D+T+1) per SVDF layer, out*in per projection, C(in+1) per head."""
    total = 0
    for kind, _, din, dout, mem in config.ops():
        if kind == "svdf":
            total += dout * (din + mem + 1)
        elif kind == "proj":
            total += dout * din
        else:
            total += dout * (din + 1)
    return total


def init_params(config, seed, dtype=np.float32):
    """Glorot-uniform weights (fan_in = shape[1], fan_out = shape[0]); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def config_from_params(params):
    """Recover the ModelConfig implied by tensor names and shapes."""
    try:
        enc, dec = [], []
        for prefix, out in (("en", enc), ("de", dec)):
            i = 0
            while f"{prefix}_{i}.feature" in params:
                n, _ = params[f"{prefix}_{i}.feature"].shape
                out.append(SvdfLayerSpec(n, params[f"{prefix}_{i}.time"].shape[1]))
                i += 1
        layers = [f"en_{i}" for i in range(len(enc))] + [f"de_{i}" for i in range(len(dec))]
        input_dim = params["en_0.feature"].shape[1]
        bott = tuple(
            (name, params[f"{name}_bottleneck.weight"].shape[0])
            for name in layers if f"{name}_bottleneck.weight" in params
        )
        enc_c = params["encoder_head.weight"].shape[0] if "encoder_head.weight" in params else 0
        dec_c = params["decoder_head.weight"].shape[0] if "decoder_head.weight" in params else 0
        config = ModelConfig(input_dim, tuple(enc), tuple(dec), tuple(bott), enc_c, dec_c)
    except (KeyError, ValueError, IndexError) as e:
        raise DataError(f"tensor set does not describe an SVDF model: {e}") from e
    check_params(config, params)
    return config


def check_params(config, params):
    """Raise DataError naming the first tensor that disagrees with config."""
    shapes = config.param_shapes()
    for name, shape in shapes.items():
        if name not in params:
            raise DataError(f"missing tensor {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise DataError(
                f"tensor {name!r} has shape {tuple(params[name].shape)}, expected {tuple(shape)}"
            )
    extra = sorted(set(params) - set(shapes))
    if extra:
        raise DataError(f"unexpected tensor {extra[0]!r}")


@dataclass
class ForwardTrace:
    """Per-frame outputs plus the caches backprop needs."""

    lengths: np.ndarray
    encoder_logits: np.ndarray  # (B, L, C_enc) or None
    decoder_logits: np.ndarray  # (B, L, C_dec) or None
    taps: dict  # name -> (B, L, N), post-activation
    cache: list = field(repr=False, default_factory=list)

    @property
    def logits(self):
        """Combined Y = [Y^E, Y^D] along the class axis."""
        return np.concatenate([self.encoder_logits, self.decoder_logits], axis=-1)

    def activation_pattern(self):
        return tuple(np.packbits(c["pre"] > 0).tobytes() for c in self.cache if "pre" in c)


def _as_batch(features, dtype):
    x = features.vectors if hasattr(features, "vectors") else np.asarray(features)
    if x.ndim == 2:
        x = x[None]
    return np.asarray(x, dtype=dtype)


def forward(params, x, lengths=None, config=None):
    """Whole-sequence forward on a padded batch ``x`` of shape (B, L, D)."""
    config = config or config_from_params(params)
    dtype = params["en_0.feature"].dtype
    x = _as_batch(x, dtype)
    if x.shape[-1] != config.input_dim:
        raise DataError(f"feature dim {x.shape[-1]} != model input dim {config.input_dim}")
    B, L, _ = x.shape
    lengths = np.full(B, L, dtype=np.int64) if lengths is None else np.asarray(lengths, np.int64)
    h = x
    taps, cache = {}, []
    enc = dec = None
    for kind, name, _, _, _ in config.ops():
        if kind == "svdf":
            s = h @ params[f"{name}.feature"].T
            pre = _kernels.time_filter(s, params[f"{name}.time"]) + params[f"{name}.bias"]
            out = np.maximum(pre, 0)
            cache.append({"kind": kind, "name": name, "x": h, "s": s, "pre": pre})
            taps[name] = out
            h = out
        elif kind == "proj":
            cache.append({"kind": kind, "name": name, "x": h})
            h = h @ params[f"{name}.weight"].T
        else:
            cache.append({"kind": kind, "name": name, "x": h})
            h = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
            if name == "encoder_head":
                enc = h
            else:
                dec = h
    return ForwardTrace(lengths, enc, dec, taps, cache)


def forward_sequence(params, features, config=None):
    """Single-utterance forward; returns a trace with batch dimension 1."""
    return forward(params, features, config=config)


def backward(params, trace, d_encoder=None, d_decoder=None, d_taps=None):
    """Reverse-mode pass; returns gradients keyed like ``params``.

    ``d_encoder``/``d_decoder`` are loss gradients w.r.t. the head logits and
    ``d_taps`` maps tap names to gradients w.r.t. those activations.
    """
    grads = {}
    d_taps = d_taps or {}
    g = d_decoder
    for c in reversed(trace.cache):
        kind, name, x = c["kind"], c["name"], c["x"]
        if kind == "head" and name == "encoder_head" and d_encoder is not None:
            g = d_encoder if g is None else g + d_encoder
        if g is None:
            # nothing flows into this op yet (e.g. decoder head without loss)
            if kind == "svdf" and name in d_taps:
                g = np.zeros_like(trace.taps[name])
            else:
                for pname in _op_params(kind, name):
                    grads[pname] = np.zeros_like(params[pname])
                continue
        if kind == "head":
            grads[f"{name}.weight"] = _outer_sum(g, x)
            grads[f"{name}.bias"] = g.sum(axis=(0, 1))
            g = g @ params[f"{name}.weight"]
        elif kind == "proj":
            grads[f"{name}.weight"] = _outer_sum(g, x)
            g = g @ params[f"{name}.weight"]
        else:
            if name in d_taps:
                g = g + d_taps[name]
            dpre = g * (c["pre"] > 0)
            grads[f"{name}.bias"] = dpre.sum(axis=(0, 1))
            ds, grads[f"{name}.time"] = _kernels.time_filter_grad(dpre, c["s"], params[f"{name}.time"])
            grads[f"{name}.feature"] = _outer_sum(ds, x)
            g = ds @ params[f"{name}.feature"]
    return {k: grads[k] for k in params}


def _op_params(kind, name):
    if kind == "svdf":
        return [f"{name}.feature", f"{name}.time", f"{name}.bias"]
    if kind == "proj":
        return [f"{name}.weight"]
    return [f"{name}.weight", f"{name}.bias"]


def _outer_sum(g, x):
    return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def collect_adv_features(trace, taps):
    """Concatenate selected taps per frame in canonical en_0..de_2 order."""
    taps = set(taps)
    if not taps:
        raise ConfigError("tap set must be nonempty")
    unknown = taps - set(trace.taps)
    if unknown:
        raise ConfigError(f"unknown taps {sorted(unknown)}")
    order = [t for t in TAP_ORDER if t in taps] + sorted(taps - set(TAP_ORDER))
    return np.concatenate([trace.taps[t] for t in order], axis=-1)


def canonical_taps(taps):
    taps = set(taps)
    return tuple([t for t in TAP_ORDER if t in taps] + sorted(taps - set(TAP_ORDER)))


# -- streaming ---------------------------------------------------------------

@dataclass
class StreamState:
    """Ring buffers of feature-filter outputs, one (streams, N, T) array per layer."""

    buffers: dict
    frames: np.ndarray  # frames consumed per stream

    @property
    def n_streams(self):
        return self.frames.shape[0]


def init_stream_state(params, n_streams=1, config=None):
    config = config or config_from_params(params)
    dtype = params["en_0.feature"].dtype
    buffers = {
        name: np.zeros((n_streams, n, mem), dtype=dtype)
        for kind, name, _, n, mem in config.ops() if kind == "svdf"
    }
    return StreamState(buffers, np.zeros(n_streams, dtype=np.int64))


def reset_stream(state):
    for buf in state.buffers.values():
        buf[...] = 0
    state.frames[...] = 0
    return state


def stream_step(params, state, x, config=None, return_taps=False):
    """Consume one 120-dim frame per stream; returns (enc logits, dec logits, state).

    ``x`` is (D,) for a single stream or (streams, D). Streams advance in
    lockstep, so they share one ring position.
    """
    config = config or config_from_params(params)
    dtype = params["en_0.feature"].dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    h = x[None] if single else x
    if h.shape != (state.n_streams, config.input_dim):
        raise DataError(f"frame shape {x.shape} incompatible with {state.n_streams} stream(s) "
                        f"of dim {config.input_dim}")
    if np.any(state.frames != state.frames[0]):
        raise DataError("streams in one state must advance in lockstep")
    t = int(state.frames[0])
    enc = dec = None
    taps = {}
    for kind, name, _, _, mem in config.ops():
        if kind == "svdf":
            buf = state.buffers[name]
            if buf.shape[1:] != params[f"{name}.time"].shape:
                raise DataError(f"stream state for {name} does not match params")
            buf[:, :, t % mem] = h @ params[f"{name}.feature"].T
            order = (t - np.arange(mem)) % mem  # newest first
            pre = np.einsum("snk,nk->sn", buf[:, :, order], params[f"{name}.time"])
            h = np.maximum(pre + params[f"{name}.bias"], 0)
            taps[name] = h
        elif kind == "proj":
            h = h @ params[f"{name}.weight"].T
        else:
            h = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
            if name == "encoder_head":
                enc = h
            else:
                dec = h
    state.frames += 1
    if single:
        enc = None if enc is None else enc[0]
        dec = None if dec is None else dec[0]
        taps = {k: v[0] for k, v in taps.items()}
    if return_taps:
        return enc, dec, state, taps
    return enc, dec, state
