import hashlib
import itertools
import subprocess
import sys

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvirts import tensor as T
from mvirts.data import SyntheticSpec, gen_synthetic
from mvirts.model import (
    ABLATION_ROWS,
    CheckpointError,
    FusedState,
    Trace,
    ablation_config,
    encode_sensor_tokens,
    encode_time_tokens,
    forward,
    forward_batch,
    fuse_block,
    init_params,
    irregularity_gate,
    load_checkpoint,
    param_count,
    predict_proba,
    save_checkpoint,
    tc_block,
    toy_config,
)
from mvirts.tensor import DimensionError, Tensor


def random_inputs(cfg, n=3, seed=0, p=0.6):
    rng = np.random.default_rng(seed)
    mask = (rng.random((n, cfg.length, cfg.n_sensors)) < p).astype(float)
    return rng.standard_normal(mask.shape) * mask, mask


def zero_biases(params):
    for name, p in params.items():
        if name.endswith(".b"):
            p.data[...] = 0.0
    return params


def ln(x, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps)


def gelu(u):
    return 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u**3)))


def lin(x, params, name):
    return x @ params[name + ".w"].data + params[name + ".b"].data


def single_token_layer(x, params, name):
    """Encoder layer when there is one token: attention weight is exactly 1."""
    a = lin(lin(x, params, name + ".attn.v"), params, name + ".attn.o")
    h = ln(x + a) * params[name + ".norm1.g"].data + params[name + ".norm1.b"].data
    f = lin(gelu(lin(h, params, name + ".ffn1")), params, name + ".ffn2")
    return ln(h + f) * params[name + ".norm2.g"].data + params[name + ".norm2.b"].data


def randomize(params, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data += scale * rng.standard_normal(p.shape)
    return params


# -- config ----------------------------------------------------------------------

@pytest.mark.parametrize(
    "kw",
    [
        {"embed_dim": 10, "heads": 4},
        {"n_blocks": 0},
        {"dilations": ()},
        {"dilations": (1, 0)},
        {"tc": False, "time": False, "sensor": False},
        {"variant": "v5"},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        toy_config(**kw)


def test_config_dict_round_trip():
    cfg = toy_config(variant="v3", tc=False)
    assert type(cfg).from_dict(cfg.to_dict()) == cfg


# -- view encoders ---------------------------------------------------------------

def test_time_encoder_zero_input_gives_uniform_attention():
    cfg = toy_config(time_pos_encoding=False)
    params = zero_biases(init_params(cfg))
    trace = Trace()
    out = encode_time_tokens(Tensor(np.zeros((cfg.length, cfg.n_sensors))), params, cfg, 1, trace=trace)
    assert out.shape == (cfg.length, cfg.embed_dim)
    assert np.isfinite(out.data).all()
    assert np.allclose(trace.attention[-1], 1.0 / cfg.length, atol=1e-15)


def test_time_projection_equivariance():
    cfg = toy_config()
    params = randomize(init_params(cfg))
    x = np.random.default_rng(3).standard_normal((cfg.length, cfg.n_sensors))
    perm = np.array([2, 0, 3, 1])
    permuted = dict(params)
    permuted["l1.time.proj.w"] = Tensor(params["l1.time.proj.w"].data[perm])
    a = encode_time_tokens(Tensor(x), params, cfg, 1).data
    b = encode_time_tokens(Tensor(x[:, perm]), permuted, cfg, 1).data
    assert np.allclose(a, b, atol=1e-12)


def test_single_time_step_matches_hand_computation():
    cfg = toy_config(length=1, time_pos_encoding=False)
    params = randomize(init_params(cfg))
    x = np.random.default_rng(4).standard_normal((1, cfg.n_sensors))
    got = encode_time_tokens(Tensor(x), params, cfg, 1).data
    want = single_token_layer(lin(x, params, "l1.time.proj"), params, "l1.time")
    assert np.allclose(got, want, atol=1e-12)


def test_sensor_shape_and_symmetry():
    cfg = toy_config(length=16)
    params = randomize(init_params(cfg))
    x = np.random.default_rng(5).standard_normal((4, 16))
    x[3] = x[1]
    out = encode_sensor_tokens(Tensor(x), params, cfg, 1).data
    assert out.shape == (4, cfg.embed_dim)
    assert np.allclose(out[1], out[3], atol=1e-13)


def test_single_sensor_matches_hand_computation():
    cfg = toy_config(n_sensors=1)
    params = randomize(init_params(cfg))
    x = np.random.default_rng(6).standard_normal((1, cfg.length))
    got = encode_sensor_tokens(Tensor(x), params, cfg, 1).data
    want = single_token_layer(lin(x, params, "l1.sensor.proj"), params, "l1.sensor")
    assert np.allclose(got, want, atol=1e-12)


def test_encoder_width_mismatch():
    cfg = toy_config()
    with pytest.raises(DimensionError):
        encode_time_tokens(Tensor(np.zeros((cfg.length, cfg.n_sensors + 1))), init_params(cfg), cfg, 1)


# -- temporal convolution block ------------------------------------------------------

def test_tc_zero_input_zero_output():
    cfg = toy_config()
    params = zero_biases(init_params(cfg))
    out = tc_block(Tensor(np.zeros((cfg.n_sensors, cfg.length))), params, cfg, 1)
    assert out.shape == (cfg.length, cfg.embed_dim) and not out.data.any()


@pytest.mark.parametrize("length", [1, 2, 5])
def test_tc_preserves_short_lengths(length):
    cfg = toy_config(length=length, kernel_width=10, dilations=(1, 2, 3))
    x = np.random.default_rng(0).standard_normal((cfg.n_sensors, length))
    assert tc_block(Tensor(x), init_params(cfg), cfg, 1).shape == (length, cfg.embed_dim)


def test_tc_delta_kernel_reduces_to_gated_activation():
    cfg = toy_config(embed_dim=4, heads=2, dilations=(1,), kernel_width=3)
    params = init_params(cfg)
    w = np.zeros((4, 4, 3))
    w[np.arange(4), np.arange(4), 1] = 1.0
    params["l1.tc.conv0.w"].data[...] = w
    params["l1.tc.conv0.b"].data[...] = 0.0
    x = np.random.default_rng(7).standard_normal((4, cfg.length))
    got = tc_block(Tensor(x), params, cfg, 1).data
    want = (np.tanh(x) / (1 + np.exp(-x))).T
    assert np.allclose(got, want, atol=1e-15)


# -- fusion block -----------------------------------------------------------------------

def random_state(cfg, seed=0):
    rng = np.random.default_rng(seed)
    e = cfg.embed_dim
    return FusedState(
        Tensor(rng.standard_normal((cfg.length, e))),
        Tensor(rng.standard_normal((cfg.length, e))),
        Tensor(rng.standard_normal((cfg.n_sensors, e))),
    )


def test_fuse_preserves_shape_and_attention_spans_all_views():
    cfg = toy_config()
    state, trace = random_state(cfg), Trace()
    out = fuse_block(state, randomize(init_params(cfg)), cfg, 1, trace=trace)
    n = 2 * cfg.length + cfg.n_sensors
    assert out.fused.shape == (n, cfg.embed_dim)
    assert out.sizes == [cfg.length, cfg.length, cfg.n_sensors]
    weights = trace.attention[-1]
    assert weights.shape == (cfg.heads, n, n)
    assert np.allclose(weights.sum(-1), 1.0, atol=1e-12)


def test_fuse_with_zero_output_projection():
    cfg = toy_config()
    params = randomize(init_params(cfg))
    params["l1.fuse.attn.o.w"].data[...] = 0.0
    params["l1.fuse.attn.o.b"].data[...] = 0.0
    state = random_state(cfg, 2)
    got = fuse_block(state, params, cfg, 1).fused.data
    f = state.fused.data
    h = ln(f) * params["l1.fuse.norm1.g"].data + params["l1.fuse.norm1.b"].data
    ff = lin(gelu(lin(h, params, "l1.fuse.ffn1")), params, "l1.fuse.ffn2")
    want = ln(h + ff) * params["l1.fuse.norm2.g"].data + params["l1.fuse.norm2.b"].data
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("switches", [s for s in itertools.product([0, 1], repeat=3) if any(s)])
def test_fused_row_count_law(switches):
    tc, time, sensor = map(bool, switches)
    cfg = toy_config(tc=tc, time=time, sensor=sensor, length=5, n_sensors=3)
    trace = Trace()
    v, m = random_inputs(cfg, n=2)
    forward_batch(v, m, init_params(cfg), cfg, trace=trace)
    want = tc * cfg.length + time * cfg.length + sensor * cfg.n_sensors
    assert trace.fused_rows == [want] * cfg.n_blocks


# -- gate ------------------------------------------------------------------------------------

def test_zero_masks_zero_gates():
    cfg = toy_config(time_pos_encoding=False)
    params = zero_biases(init_params(cfg))
    m_t = np.zeros((cfg.length, cfg.n_sensors))
    g = irregularity_gate(m_t, m_t.T, params, cfg)
    for part in (g.g_c, g.g_t, g.g_s):
        assert not part.data.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_gate_range(seed):
    cfg = toy_config()
    rng = np.random.default_rng(seed)
    m_t = (rng.random((cfg.length, cfg.n_sensors)) < rng.random()).astype(float)
    g = irregularity_gate(m_t, m_t.T, randomize(init_params(cfg), seed), cfg)
    for part in (g.g_c, g.g_t, g.g_s):
        assert np.all(np.abs(part.data) < 1.0)


def test_gate_shares_layer_one_weights():
    cfg = toy_config()
    params = init_params(cfg)
    v, m = random_inputs(cfg, n=1, seed=8)
    m_t = m[0]

    def run(ps):
        trace = Trace()
        logits = forward_batch(v, m, ps, cfg, trace=trace)
        gate = irregularity_gate(m_t, m_t.T, ps, cfg)
        return trace.states[0].e_t.data.copy(), gate.g_t.data.copy(), logits.data

    base = run(params)
    params["l1.time.attn.v.w"].data[0, 0] += 0.5
    bumped = run(params)
    assert not np.allclose(base[0], bumped[0]) and not np.allclose(base[1], bumped[1])
    params["l1.time.attn.v.w"].data[0, 0] -= 0.5
    params["l2.time.attn.v.w"].data[0, 0] += 0.5
    layer2 = run(params)
    assert np.array_equal(base[1], layer2[1])
    assert not np.allclose(base[2], layer2[2])


# -- forward / variants ------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["v1", "v2", "v3", "v4"])
def test_logits_shape_and_batch_consistency(variant):
    cfg = toy_config(variant=variant, num_classes=3)
    params = init_params(cfg, seed=2)
    ds = gen_synthetic(SyntheticSpec(n_samples=4, num_classes=3, seed=1))
    values, masks, _ = ds.arrays()
    batch = forward_batch(values, masks, params, cfg).data
    assert batch.shape == (4, 3) and np.isfinite(batch).all()
    for i, s in enumerate(ds.samples):
        assert np.allclose(forward(s, params, cfg).data, batch[i], atol=1e-12)


def test_forward_shape_mismatch():
    cfg = toy_config()
    s = gen_synthetic(SyntheticSpec(n_samples=2, length=5)).samples[0]
    with pytest.raises(DimensionError):
        forward(s, init_params(cfg), cfg)


def test_gate_off_matches_values_only():
    v4 = toy_config(variant="v4", gate_bias=-1e6)
    v1 = toy_config(variant="v1")
    params = randomize(init_params(v4))
    values, masks = random_inputs(v4, n=20, seed=9)
    a = forward_batch(values, masks, params, v4).data
    b = forward_batch(values, masks, params, v1).data
    assert np.max(np.abs(a - b)) < 1e-6


def test_mask_only_variant_ignores_values():
    cfg = toy_config(variant="v2")
    params = init_params(cfg)
    values, masks = random_inputs(cfg, n=5, seed=10)
    a = forward_batch(values, masks, params, cfg).data
    b = forward_batch((values + 3.0) * masks, masks, params, cfg).data
    assert np.array_equal(a, b)


def test_parameter_counts():
    n = {v: param_count(init_params(toy_config(variant=v))) for v in ("v1", "v2", "v3", "v4")}
    assert n["v4"] == n["v1"] == n["v2"]
    assert n["v3"] > n["v1"]
    names = set(init_params(toy_config(variant="v4"))) ^ set(init_params(toy_config(variant="v1")))
    assert not names


def test_disabled_paths_have_no_parameters():
    params = init_params(toy_config(tc=False, sensor=False))
    assert not [n for n in params if ".tc." in n or ".sensor." in n]


def test_ablation_rows():
    base = toy_config()
    assert set(ABLATION_ROWS) == {"tc", "time", "sensor", "tc-time", "tc-sensor", "time-sensor", "full", "irmask"}
    assert ablation_config(base, "irmask").variant == "v2"
    assert ablation_config(base, "tc").token_sizes == [base.length]
    with pytest.raises(ValueError):
        ablation_config(base, "nope")


def test_logits_are_deterministic_across_processes():
    code = (
        "import hashlib, numpy as np\n"
        "from mvirts.model import toy_config, init_params, forward_batch\n"
        "cfg = toy_config()\n"
        "rng = np.random.default_rng(0)\n"
        "m = (rng.random((4, 8, 4)) < .5).astype(float)\n"
        "v = rng.standard_normal(m.shape) * m\n"
        "print(hashlib.sha256(forward_batch(v, m, init_params(cfg, 3), cfg).data.tobytes()).hexdigest())\n"
    )
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    cfg = toy_config()
    rng = np.random.default_rng(0)
    m = (rng.random((4, 8, 4)) < .5).astype(float)
    v = rng.standard_normal(m.shape) * m
    here = hashlib.sha256(forward_batch(v, m, init_params(cfg, 3), cfg).data.tobytes()).hexdigest()
    assert runs[0] == runs[1] == here + "\n"


# -- probabilities / checkpoints -----------------------------------------------------------------

def test_predict_proba_examples():
    assert np.array_equal(predict_proba(np.array([0.0, 0.0])), [0.5, 0.5])
    z = np.array([[0.3, -1.2, 2.0]])
    assert predict_proba(z).argmax() == predict_proba(z + 100).argmax()
    mpmath.mp.dps = 40
    den = sum(mpmath.exp(mpmath.mpf(float(v))) for v in z[0])
    ref = [float(mpmath.exp(mpmath.mpf(float(v))) / den) for v in z[0]]
    assert np.allclose(predict_proba(z)[0], ref, rtol=1e-15, atol=0)


def test_checkpoint_round_trip(tmp_path):
    cfg = toy_config(variant="v3")
    params = randomize(init_params(cfg))
    path = tmp_path / "m.mvf"
    save_checkpoint(path, params, cfg)
    assert path.read_bytes()[:4] == b"MVF1"
    back, cfg2 = load_checkpoint(path, expect=cfg)
    assert cfg2 == cfg
    for name in params:
        assert np.array_equal(back[name].data, params[name].data)


def test_checkpoint_mismatch_and_bad_magic(tmp_path):
    cfg = toy_config()
    path = tmp_path / "m.mvf"
    save_checkpoint(path, init_params(cfg), cfg)
    with pytest.raises(CheckpointError, match="embed_dim"):
        load_checkpoint(path, expect=toy_config(embed_dim=8))
    bad = tmp_path / "bad.mvf"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
