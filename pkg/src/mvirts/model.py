"""Multi-view transformer for irregular multivariate series.

Three views of one sample feed three per-layer encoders:

* local: sensors as conv channels, a stack of dilated convolutions ending in
  ``tanh(e) * sigmoid(e)``;
* time: rows are time steps, a one-layer transformer encoder;
* sensor: rows are sensors, another one-layer transformer encoder.

Each layer concatenates the three token blocks, runs self-attention across all
of them (post-norm, with FFN), and splits the result back into the paths. The
irregularity gate encodes the observation mask with the layer-1 encoders
(same tensors, no extra weights), gates it, and adds it to each path's final
output before mean pooling and the linear head.

Every function broadcasts over leading axes; parameters may carry one extra
leading axis (stacked perturbations for the finite-difference oracle), which
``_lift`` aligns with the outermost activation axis.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import IrtsSample, build_masks
from .tensor import DimensionError, Tensor

VARIANTS = ("v1", "v2", "v3", "v4")
MAGIC = b"MVF1"


@dataclass
class ModelConfig:
    num_classes: int = 2
    length: int = 8
    n_sensors: int = 4
    embed_dim: int = 32
    heads: int = 4
    n_blocks: int = 2
    dilations: tuple[int, ...] = (1, 2, 3)
    kernel_width: int = 10
    variant: str = "v4"
    tc: bool = True
    time: bool = True
    sensor: bool = True
    ir_mask: bool = True
    ffn_width: int = 0          # 0 means 2 * embed_dim
    dropout: float = 0.0
    ln_eps: float = 1e-5
    gate_bias: float = 0.0      # added to the gate's sigmoid pre-activation only; not trained
    time_pos_encoding: bool = True

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        self.variant = self.variant.lower()
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilations must be non-empty positive integers")
        if self.kernel_width < 1:
            raise ValueError("kernel_width must be >= 1")
        if not (self.tc or self.time or self.sensor):
            raise ValueError("at least one of tc/time/sensor must be enabled")
        if self.length < 1 or self.n_sensors < 1 or self.num_classes < 2:
            raise ValueError("need length >= 1, n_sensors >= 1, num_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def ffn(self) -> int:
        return self.ffn_width or 2 * self.embed_dim

    @property
    def uses_gate(self) -> bool:
        return self.variant == "v4" and self.ir_mask

    @property
    def token_sizes(self) -> list[int]:
        """Row counts of the enabled views, in (local, time, sensor) order."""
        return [n for on, n in (
            (self.tc, self.length), (self.time, self.length), (self.sensor, self.n_sensors)
        ) if on]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FusedState:
    e_c: Tensor | None = None
    e_t: Tensor | None = None
    e_s: Tensor | None = None

    @property
    def views(self) -> list[Tensor]:
        return [v for v in (self.e_c, self.e_t, self.e_s) if v is not None]

    @property
    def fused(self) -> Tensor:
        return T.concat_rows(self.views)

    @property
    def sizes(self) -> list[int]:
        return [v.shape[-2] for v in self.views]


@dataclass
class GateState:
    g_c: Tensor | None = None
    g_t: Tensor | None = None
    g_s: Tensor | None = None


@dataclass
class Trace:
    """Optional capture of intermediate states for inspection and tests."""

    fused_rows: list[int] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    states: list[FusedState] = field(default_factory=list)
    gate: GateState | None = None
    pooled: Tensor | None = None


# -- parameters ---------------------------------------------------------------

def _input_widths(cfg: ModelConfig) -> tuple[int, int, int]:
    """Layer-1 input widths (time features, sensor features, conv channels)."""
    f = 2 if cfg.variant == "v3" else 1
    return f * cfg.n_sensors, f * cfg.length, f * cfg.n_sensors


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.Generator(np.random.Philox(seed))
    e, ffn = cfg.embed_dim, cfg.ffn
    shapes: list[tuple[str, tuple[int, ...], str]] = []

    def linear(name, n_in, n_out):
        shapes.append((name + ".w", (n_in, n_out), "w"))
        shapes.append((name + ".b", (n_out,), "zero"))

    def norm(name):
        shapes.append((name + ".g", (e,), "one"))
        shapes.append((name + ".b", (e,), "zero"))

    def encoder(name):
        for part in "qkvo":
            linear(f"{name}.attn.{part}", e, e)
        norm(f"{name}.norm1")
        linear(f"{name}.ffn1", e, ffn)
        linear(f"{name}.ffn2", ffn, e)
        norm(f"{name}.norm2")

    time_in, sensor_in, conv_in = _input_widths(cfg)
    for k in range(1, cfg.n_blocks + 1):
        if cfg.tc:
            c_in = conv_in if k == 1 else e
            for j, _ in enumerate(cfg.dilations):
                shapes.append((f"l{k}.tc.conv{j}.w", (e, c_in if j == 0 else e, cfg.kernel_width), "w"))
                shapes.append((f"l{k}.tc.conv{j}.b", (e,), "zero"))
        if cfg.time:
            if k == 1:
                linear("l1.time.proj", time_in, e)
            encoder(f"l{k}.time")
        if cfg.sensor:
            if k == 1:
                linear("l1.sensor.proj", sensor_in, e)
            encoder(f"l{k}.sensor")
        encoder(f"l{k}.fuse")
    linear("head", e, cfg.num_classes)

    params = {}
    for name, shape, kind in shapes:
        if kind == "w":
            fan_in = shape[0] if len(shape) == 2 else shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# -- building blocks ----------------------------------------------------------

def _lift(p: Tensor, nominal: int, rank: int) -> Tensor:
    if p.ndim == nominal:
        return p
    return T.reshape(p, (p.shape[0],) + (1,) * (rank - nominal - 1) + p.shape[1:])


def _linear(x: Tensor, params, name: str) -> Tensor:
    w = _lift(params[name + ".w"], 2, x.ndim)
    b = _lift(params[name + ".b"], 1, x.ndim)
    return T.matmul(x, w) + b


def _norm(x: Tensor, params, name: str, eps: float) -> Tensor:
    g = _lift(params[name + ".g"], 1, x.ndim)
    b = _lift(params[name + ".b"], 1, x.ndim)
    return T.layer_norm(x, g, b, eps)


def _conv(x: Tensor, params, name: str, dilation: int) -> Tensor:
    w = _lift(params[name + ".w"], 3, x.ndim + 1)
    b = _lift(params[name + ".b"], 1, x.ndim - 1)
    return T.dilated_conv1d(x, w, dilation, bias=b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    e = x.shape[-1]
    x = T.reshape(x, x.shape[:-1] + (heads, e // heads))
    return T.swapaxes(x, -2, -3)                           # [..., H, tokens, d_k]


def multi_head_attention(
    x: Tensor, params, name: str, heads: int, trace: Trace | None = None
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, then the output projection."""
    q = _split_heads(_linear(x, params, name + ".q"), heads)
    k = _split_heads(_linear(x, params, name + ".k"), heads)
    v = _split_heads(_linear(x, params, name + ".v"), heads)
    d_k = q.shape[-1]
    weights = T.softmax(T.matmul(q, T.swapaxes(k)) * (1.0 / np.sqrt(d_k)))
    if trace is not None:
        trace.attention.append(weights.data)
    out = T.swapaxes(T.matmul(weights, v), -2, -3)         # [..., tokens, H, d_k]
    out = T.reshape(out, out.shape[:-2] + (heads * d_k,))
    return _linear(out, params, name + ".o")


def encoder_layer(
    x: Tensor,
    params,
    name: str,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    trace: Trace | None = None,
) -> Tensor:
    """Post-norm transformer layer: norm(x + attn(x)) then norm(h + ffn(h))."""
    a = T.dropout(multi_head_attention(x, params, name + ".attn", cfg.heads, trace), cfg.dropout, rng)
    h = _norm(x + a, params, name + ".norm1", cfg.ln_eps)
    f = _linear(T.gelu(_linear(h, params, name + ".ffn1")), params, name + ".ffn2")
    f = T.dropout(f, cfg.dropout, rng)
    return _norm(h + f, params, name + ".norm2", cfg.ln_eps)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


def _check_width(x: Tensor, want: int, what: str) -> None:
    if x.shape[-1] != want:
        raise DimensionError(f"{what}: expected feature width {want}, got shape {x.shape}")


def encode_time_tokens(x: Tensor, params, cfg: ModelConfig, k: int, rng=None, trace=None) -> Tensor:
    """``[..., L, F] -> [..., L, E]``; F is the raw width at layer 1, E after."""
    x = T.as_tensor(x)
    if k == 1:
        _check_width(x, _input_widths(cfg)[0], "time path layer 1")
        x = _linear(x, params, "l1.time.proj")
        if cfg.time_pos_encoding:
            x = x + positional_encoding(x.shape[-2], cfg.embed_dim)
    else:
        _check_width(x, cfg.embed_dim, f"time path layer {k}")
    return encoder_layer(x, params, f"l{k}.time", cfg, rng, trace)


def encode_sensor_tokens(x: Tensor, params, cfg: ModelConfig, k: int, rng=None) -> Tensor:
    """``[..., N_s, F] -> [..., N_s, E]``; no positional encoding over sensors."""
    x = T.as_tensor(x)
    if k == 1:
        _check_width(x, _input_widths(cfg)[1], "sensor path layer 1")
        x = _linear(x, params, "l1.sensor.proj")
    else:
        _check_width(x, cfg.embed_dim, f"sensor path layer {k}")
    return encoder_layer(x, params, f"l{k}.sensor", cfg, rng)


def tc_block(x: Tensor, params, cfg: ModelConfig, k: int) -> Tensor:
    """``[..., C, L] -> [..., L, E]``: chained dilated convs, then tanh * sigmoid."""
    x = T.as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("tc_block: sequence length must be >= 1")
    want = _input_widths(cfg)[2] if k == 1 else cfg.embed_dim
    if x.shape[-2] != want:
        raise DimensionError(f"tc_block layer {k}: expected {want} channels, got shape {x.shape}")
    h = x
    for j, d in enumerate(cfg.dilations):
        h = _conv(h, params, f"l{k}.tc.conv{j}", d)
    return T.swapaxes(T.gated_activation(h))


def fuse_block(
    state: FusedState, params, cfg: ModelConfig, k: int, rng=None, trace: Trace | None = None
) -> FusedState:
    """Self-attention across all views' tokens, residual + norm, FFN, split back."""
    fused = state.fused
    if trace is not None:
        trace.fused_rows.append(fused.shape[-2])
    out = encoder_layer(fused, params, f"l{k}.fuse", cfg, rng, trace)
    parts = iter(T.split_rows(out, state.sizes))
    return FusedState(
        *(next(parts) if v is not None else None for v in (state.e_c, state.e_t, state.e_s))
    )


def irregularity_gate(m_t, m_s, params, cfg: ModelConfig) -> GateState:
    """Encode masks once with the layer-1 encoders and gate them.

    ``m_t`` is ``[..., L, N_s]`` and ``m_s`` ``[..., N_s, L]``.
    """
    m_t, m_s = T.as_tensor(m_t), T.as_tensor(m_s)

    def gate(e: Tensor) -> Tensor:
        return T.gated_activation(e, offset=cfg.gate_bias)

    return GateState(
        gate(tc_block(m_s, params, cfg, 1)) if cfg.tc else None,
        gate(encode_time_tokens(m_t, params, cfg, 1)) if cfg.time else None,
        gate(encode_sensor_tokens(m_s, params, cfg, 1)) if cfg.sensor else None,
    )


def forward_batch(
    values,
    mask,
    params,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    trace: Trace | None = None,
) -> Tensor:
    """Logits ``[..., num_classes]`` for zero-filled values and masks ``[..., L, N_s]``."""
    values = T.as_tensor(values)
    mask = T.as_tensor(mask)
    want = (cfg.length, cfg.n_sensors)
    if values.shape[-2:] != want or mask.shape[-2:] != want:
        raise DimensionError(
            f"inputs {values.shape} / {mask.shape} do not match config (L, N_s) = {want}"
        )
    v = cfg.variant
    if v == "v2":
        x_time = mask
    elif v == "v3":
        x_time = T.concat([values, mask], axis=-1)
    else:
        x_time = values
    if v == "v3":
        x_sensor = T.concat([T.swapaxes(values), T.swapaxes(mask)], axis=-1)
        x_conv = T.concat([T.swapaxes(values), T.swapaxes(mask)], axis=-2)
    else:
        x_sensor = T.swapaxes(x_time)
        x_conv = x_sensor

    state = FusedState(
        tc_block(x_conv, params, cfg, 1) if cfg.tc else None,
        encode_time_tokens(x_time, params, cfg, 1, rng) if cfg.time else None,
        encode_sensor_tokens(x_sensor, params, cfg, 1, rng) if cfg.sensor else None,
    )
    for k in range(1, cfg.n_blocks + 1):
        if k > 1:
            state = FusedState(
                tc_block(T.swapaxes(state.e_c), params, cfg, k) if cfg.tc else None,
                encode_time_tokens(state.e_t, params, cfg, k, rng) if cfg.time else None,
                encode_sensor_tokens(state.e_s, params, cfg, k, rng) if cfg.sensor else None,
            )
        state = fuse_block(state, params, cfg, k, rng, trace)
        if trace is not None:
            trace.states.append(state)

    if cfg.uses_gate:
        gate = irregularity_gate(mask, T.swapaxes(mask), params, cfg)
        if trace is not None:
            trace.gate = gate
        state = FusedState(
            *(e if g is None else e + g for e, g in (
                (state.e_c, gate.g_c), (state.e_t, gate.g_t), (state.e_s, gate.g_s)
            ))
        )
    pooled = T.mean(state.fused, axis=-2)
    if trace is not None:
        trace.pooled = pooled
    return _linear(pooled, params, "head")


def forward(sample: IrtsSample, params, cfg: ModelConfig) -> Tensor:
    """Logits ``[num_classes]`` for one sample."""
    if (sample.length, sample.n_sensors) != (cfg.length, cfg.n_sensors):
        raise DimensionError(
            f"sample is {sample.length}x{sample.n_sensors}, config expects "
            f"{cfg.length}x{cfg.n_sensors}"
        )
    m_t, _, x = build_masks(sample)
    return T.reshape(forward_batch(x[None], m_t[None], params, cfg), (cfg.num_classes,))


def predict_proba(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- checkpoints ------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    """``MVF1`` + u64 header length + JSON header + little-endian float64 blobs."""
    entries = []
    blob = io.BytesIO()
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": blob.tell()})
        blob.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    header = json.dumps({"version": 1, "config": cfg.to_dict(), "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(blob.getvalue())


def load_checkpoint(
    path: str | Path, expect: ModelConfig | None = None
) -> tuple[dict[str, Tensor], ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MVF1 checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + n])
    cfg = ModelConfig.from_dict(header["config"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = {k: (v, cfg.to_dict()[k]) for k, v in expect.to_dict().items() if cfg.to_dict()[k] != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    body = raw[12 + n:]
    params = {}
    for ent in header["params"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=ent["offset"])
        params[ent["name"]] = Tensor(arr.reshape(ent["shape"]).copy(), requires_grad=True, name=ent["name"])
    ref = init_params(cfg)
    if {k: v.shape for k, v in ref.items()} != {k: v.shape for k, v in params.items()}:
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return params, cfg


# -- ablation presets ---------------------------------------------------------------

ABLATION_ROWS: dict[str, dict] = {
    "tc": dict(tc=True, time=False, sensor=False, ir_mask=True),
    "time": dict(tc=False, time=True, sensor=False, ir_mask=True),
    "sensor": dict(tc=False, time=False, sensor=True, ir_mask=True),
    "tc-time": dict(tc=True, time=True, sensor=False, ir_mask=True),
    "tc-sensor": dict(tc=True, time=False, sensor=True, ir_mask=True),
    "time-sensor": dict(tc=False, time=True, sensor=True, ir_mask=True),
    "full": dict(tc=True, time=True, sensor=True, ir_mask=True),
    "irmask": dict(tc=True, time=True, sensor=True, ir_mask=False, variant="v2"),
}


def ablation_config(base: ModelConfig, row: str) -> ModelConfig:
    """Config for one component-ablation row; path rows keep ``base.variant``."""
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; choose from {list(ABLATION_ROWS)}")
    d = base.to_dict()
    d.update(ABLATION_ROWS[row])
    return ModelConfig.from_dict(d)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration used by gradient checks and synthetic experiments."""
    d = dict(length=8, n_sensors=4, embed_dim=16, heads=4, n_blocks=2,
             kernel_width=3, dilations=(1, 2), num_classes=2)
    d.update(overrides)
    return ModelConfig(**d)
