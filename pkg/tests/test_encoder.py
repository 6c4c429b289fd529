"""Encoder trunk, fusion, readout, and the checkpoint container."""

import math

import numpy as np
import pytest
import torch

from layergate.checkpoint import load_arrays, load_model, save_arrays, save_model
from layergate.encoder import (
    EncoderConfig,
    EncodingNetwork,
    ModelSpec,
    TemporalTransformer,
    apply_rotary,
    rotary_phases,
    sample_modality_mask,
    stack_windows,
)
from layergate.features import (
    BadMagicError,
    LayerResolvedFeatures,
    StimulusWindow,
    TruncatedPayloadError,
    VersionMismatchError,
    pool_matrix,
)

from conftest import tiny_model_spec


# ---------------------------------------------------------------------------
# Rotary phases
# ---------------------------------------------------------------------------

class TestRotary:
    def test_frozen_table(self):
        cos, sin = rotary_phases(3, 4, dtype=torch.float64)
        # Pair frequencies for head_dim 4 are 1 and 10000^(-1/2) = 0.01.
        assert np.allclose(cos[0].numpy(), [1.0, 1.0])
        assert np.allclose(sin[0].numpy(), [0.0, 0.0])
        assert np.allclose(cos[1].numpy(), [math.cos(1.0), math.cos(0.01)], atol=1e-12)
        assert np.allclose(sin[1].numpy(), [math.sin(1.0), math.sin(0.01)], atol=1e-12)
        assert np.allclose(cos[2].numpy(), [math.cos(2.0), math.cos(0.02)], atol=1e-12)

    def test_position_zero_is_identity(self, rng):
        x = torch.tensor(rng.standard_normal((2, 1, 6)))
        cos, sin = rotary_phases(1, 6, dtype=torch.float64)
        assert torch.allclose(apply_rotary(x, cos, sin), x)

    def test_rotation_preserves_pair_norms(self, rng):
        x = torch.tensor(rng.standard_normal((3, 5, 8)))
        cos, sin = rotary_phases(5, 8, dtype=torch.float64)
        y = apply_rotary(x, cos, sin)
        norms_x = (x[..., 0::2] ** 2 + x[..., 1::2] ** 2).numpy()
        norms_y = (y[..., 0::2] ** 2 + y[..., 1::2] ** 2).numpy()
        assert np.allclose(norms_x, norms_y, atol=1e-12)

    def test_inner_products_depend_on_relative_offset(self, rng):
        # <R_p x, R_q y> must equal <R_{p-q} x, R_0 y>.
        dh = 8
        x = torch.tensor(rng.standard_normal((1, dh)))
        y = torch.tensor(rng.standard_normal((1, dh)))
        cos, sin = rotary_phases(10, dh, dtype=torch.float64)

        def rotate(v, pos):
            return apply_rotary(v, cos[pos : pos + 1], sin[pos : pos + 1])

        lhs = (rotate(x, 7) * rotate(y, 4)).sum()
        rhs = (rotate(x, 3) * rotate(y, 0)).sum()
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_loop_oracle(self, rng):
        x = rng.standard_normal((2, 4, 6))
        cos, sin = rotary_phases(4, 6, dtype=torch.float64)
        got = apply_rotary(torch.tensor(x), cos, sin).numpy()
        expected = np.empty_like(x)
        for t in range(4):
            for pair in range(3):
                c, s = cos[t, pair].item(), sin[t, pair].item()
                e, o = x[:, t, 2 * pair], x[:, t, 2 * pair + 1]
                expected[:, t, 2 * pair] = e * c - o * s
                expected[:, t, 2 * pair + 1] = e * s + o * c
        assert np.allclose(got, expected, atol=1e-12)

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ValueError):
            rotary_phases(4, 5)


# ---------------------------------------------------------------------------
# Temporal trunk
# ---------------------------------------------------------------------------

def _np_layer_norm(v, ln):
    w = ln.weight.detach().numpy().astype(np.float64)
    b = ln.bias.detach().numpy().astype(np.float64)
    mu = v.mean(-1, keepdims=True)
    var = v.var(-1, keepdims=True)
    return (v - mu) / np.sqrt(var + 1e-5) * w + b


def _np_gelu(v):
    return 0.5 * v * (1.0 + np.vectorize(math.erf)(v / math.sqrt(2.0)))


def _np_attention(attn, x):
    B, T, W = x.shape
    h, dh = attn.heads, attn.head_dim
    w_qkv = attn.qkv.weight.detach().numpy().astype(np.float64)
    b_qkv = attn.qkv.bias.detach().numpy().astype(np.float64)
    w_o = attn.out_proj.weight.detach().numpy().astype(np.float64)
    b_o = attn.out_proj.bias.detach().numpy().astype(np.float64)

    qkv = x @ w_qkv.T + b_qkv
    q, k, v = np.split(qkv, 3, axis=-1)

    def heads(z):
        return z.reshape(B, T, h, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(q), heads(k), heads(v)
    if attn.rotary:
        inv = 10000.0 ** (-np.arange(0, dh, 2) / dh)
        ang = np.arange(T)[:, None] * inv[None, :]
        cos, sin = np.cos(ang), np.sin(ang)

        def rot(z):
            e, o = z[..., 0::2], z[..., 1::2]
            out = np.empty_like(z)
            out[..., 0::2] = e * cos - o * sin
            out[..., 1::2] = e * sin + o * cos
            return out

        q, k = rot(q), rot(k)
    logits = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    logits -= logits.max(axis=-1, keepdims=True)
    pi = np.exp(logits)
    pi /= pi.sum(axis=-1, keepdims=True)
    mixed = (pi @ v).transpose(0, 2, 1, 3).reshape(B, T, W)
    return mixed @ w_o.T + b_o


def _np_block(block, x):
    x = x + _np_attention(block.attn, _np_layer_norm(x, block.ln1))
    y = _np_layer_norm(x, block.ln2)
    w1 = block.mlp[0].weight.detach().numpy().astype(np.float64)
    b1 = block.mlp[0].bias.detach().numpy().astype(np.float64)
    w2 = block.mlp[2].weight.detach().numpy().astype(np.float64)
    b2 = block.mlp[2].bias.detach().numpy().astype(np.float64)
    return x + _np_gelu(y @ w1.T + b1) @ w2.T + b2


class TestTrunk:
    def test_matches_loop_oracle(self, rng):
        torch.manual_seed(0)
        trunk = TemporalTransformer(width=8, depth=2, heads=2, ff_mult=2).double().eval()
        x = rng.standard_normal((2, 3, 8))
        with torch.no_grad():
            got = trunk(torch.tensor(x)).numpy()
        expected = x
        for block in trunk.blocks:
            expected = _np_block(block, expected)
        assert np.allclose(got, expected, atol=1e-10)

    def test_depth_zero_is_identity(self, rng):
        trunk = TemporalTransformer(width=8, depth=0, heads=2)
        x = torch.tensor(rng.standard_normal((1, 4, 8)), dtype=torch.float32)
        assert torch.equal(trunk(x), x)

    def test_zeroed_branches_make_identity(self, rng):
        torch.manual_seed(1)
        trunk = TemporalTransformer(width=8, depth=1, heads=2, ff_mult=2).eval()
        block = trunk.blocks[0]
        with torch.no_grad():
            block.attn.out_proj.weight.zero_()
            block.attn.out_proj.bias.zero_()
            block.mlp[2].weight.zero_()
            block.mlp[2].bias.zero_()
        x = torch.tensor(rng.standard_normal((2, 5, 8)), dtype=torch.float32)
        with torch.no_grad():
            assert torch.allclose(trunk(x), x)

    def test_rotary_breaks_time_shuffle_invariance(self, rng):
        # Without rotary phases self-attention is equivariant to frame
        # permutations; the phases are the only thing that orders time inside
        # the attention itself.
        from layergate.encoder import _SelfAttention

        x = torch.tensor(rng.standard_normal((1, 6, 8)))
        perm = torch.tensor([3, 1, 5, 0, 2, 4])

        torch.manual_seed(2)
        plain = _SelfAttention(8, 2, 0.0, rotary=False).double().eval()
        with torch.no_grad():
            assert torch.allclose(plain(x)[:, perm], plain(x[:, perm]), atol=1e-10)

        torch.manual_seed(2)
        rot = _SelfAttention(8, 2, 0.0, rotary=True).double().eval()
        with torch.no_grad():
            assert not torch.allclose(rot(x)[:, perm], rot(x[:, perm]), atol=1e-6)

    def test_width_validation(self):
        with pytest.raises(ValueError):
            TemporalTransformer(width=9, depth=1, heads=2)
        with pytest.raises(ValueError):
            TemporalTransformer(width=10, depth=1, heads=2)  # per-head 5 is odd


# ---------------------------------------------------------------------------
# Modality dropout mask
# ---------------------------------------------------------------------------

class TestModalityMask:
    def test_never_empty(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            assert sample_modality_mask(0.9, rng)

    def test_zero_rate_keeps_everything(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            assert sample_modality_mask(0.0, rng) == frozenset(("vision", "audio", "text"))

    def test_conditional_rates(self):
        # With drop rate 0.3 the raw subset probabilities are 0.343 (all),
        # 0.147 (each pair), 0.063 (each singleton), renormalized by the 0.973
        # mass of non-empty draws.
        rng = np.random.default_rng(2)
        n = 30_000
        counts = {}
        for _ in range(n):
            key = tuple(sorted(sample_modality_mask(0.3, rng)))
            counts[key] = counts.get(key, 0) + 1
        assert abs(counts[("audio", "text", "vision")] / n - 0.343 / 0.973) < 0.02
        assert abs(counts[("audio", "vision")] / n - 0.147 / 0.973) < 0.02
        assert abs(counts[("text",)] / n - 0.063 / 0.973) < 0.02

    def test_rejects_certain_drop(self):
        with pytest.raises(ValueError):
            sample_modality_mask(1.0, np.random.default_rng(0))

    def test_respects_modality_subset(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            mask = sample_modality_mask(0.5, rng, modalities=("vision", "text"))
            assert mask <= {"vision", "text"} and mask


# ---------------------------------------------------------------------------
# Fusion and readout
# ---------------------------------------------------------------------------

def build_network(seed=0, **enc_overrides) -> EncodingNetwork:
    torch.manual_seed(seed)
    return EncodingNetwork(tiny_model_spec(**enc_overrides)).eval()


class TestFusion:
    def test_identity_projectors_expose_concat_order(self, rng):
        net = build_network(seed=1)
        hidden = net.spec.encoder.hidden
        streams = {
            m: torch.tensor(rng.standard_normal((2, 5, net.spec.stream_width(m))), dtype=torch.float32)
            for m in ("vision", "audio", "text")
        }
        with torch.no_grad():
            for m in streams:
                eye = torch.zeros(hidden, net.spec.stream_width(m))
                eye[:, :hidden] = torch.eye(hidden)
                net.projectors[m].weight.copy_(eye)
        fused = net.fuse(streams, active=("vision", "audio", "text"))
        assert fused.shape == (2, 5, 3 * hidden)
        assert torch.allclose(fused[..., :hidden], streams["vision"][..., :hidden], atol=1e-6)
        assert torch.allclose(fused[..., hidden : 2 * hidden], streams["audio"][..., :hidden], atol=1e-6)
        assert torch.allclose(fused[..., 2 * hidden :], streams["text"][..., :hidden], atol=1e-6)

    def test_masking_equals_zero_stream(self, rng):
        # Projectors carry no bias, so nulling audio at fusion must equal
        # feeding an all-zero audio stream.
        net = build_network(seed=2)
        streams = {
            m: torch.tensor(rng.standard_normal((3, 4, net.spec.stream_width(m))), dtype=torch.float32)
            for m in ("vision", "audio", "text")
        }
        masked = net.fuse(streams, active=("vision", "text"))
        zeroed = dict(streams)
        zeroed["audio"] = torch.zeros_like(streams["audio"])
        assert torch.allclose(masked, net.fuse(zeroed, active=("vision", "audio", "text")), atol=1e-7)

    def test_absent_equals_inactive(self, rng):
        net = build_network(seed=3)
        streams = {
            m: torch.tensor(rng.standard_normal((2, 4, net.spec.stream_width(m))), dtype=torch.float32)
            for m in ("vision", "audio", "text")
        }
        without = {m: s for m, s in streams.items() if m != "audio"}
        a = net.fuse(streams, active=("vision", "text"))
        b = net.fuse(without, active=("vision", "text"))
        assert torch.equal(a, b)

    def test_per_row_mask(self, rng):
        net = build_network(seed=4)
        streams = {
            m: torch.tensor(rng.standard_normal((2, 4, net.spec.stream_width(m))), dtype=torch.float32)
            for m in ("vision", "audio", "text")
        }
        mask = torch.tensor([[True, True, True], [True, False, True]])
        mixed = net.fuse(streams, active=mask)
        full = net.fuse(streams, active=("vision", "audio", "text"))
        no_audio = net.fuse(streams, active=("vision", "text"))
        assert torch.equal(mixed[0], full[0])
        assert torch.equal(mixed[1], no_audio[1])

    def test_learned_null_fills_missing_block(self, rng):
        net = build_network(seed=5, learned_null=True)
        hidden = net.spec.encoder.hidden
        with torch.no_grad():
            net.nulls["audio"].fill_(2.5)
        streams = {
            m: torch.tensor(rng.standard_normal((1, 3, net.spec.stream_width(m))), dtype=torch.float32)
            for m in ("vision", "text")
        }
        fused = net.fuse(streams, active=("vision", "text"))
        assert torch.all(fused[..., hidden : 2 * hidden] == 2.5)
        assert net.nulls["audio"].requires_grad

    def test_bad_mask_shape_rejected(self, rng):
        net = build_network(seed=6)
        streams = {
            "vision": torch.tensor(
                rng.standard_normal((2, 4, net.spec.stream_width("vision"))), dtype=torch.float32
            )
        }
        with pytest.raises(ValueError):
            net.fuse(streams, active=torch.ones(2, 2, dtype=torch.bool))


class TestReadout:
    def test_matches_linear_algebra_oracle(self, rng):
        net = build_network(seed=7)
        B, T = 3, 12
        latents = torch.tensor(rng.standard_normal((B, T, net.width)), dtype=torch.float32)
        subjects = torch.tensor([1, 0, 1])
        with torch.no_grad():
            got = net.readout(latents, subjects).numpy()
        w = net.subject_weight.detach().numpy()
        b = net.subject_bias.detach().numpy()
        pool = pool_matrix(T, net.spec.encoder.k_out, np.float64)
        for i, s in enumerate((1, 0, 1)):
            per_frame = latents[i].numpy() @ w[s] + b[s]
            assert np.allclose(got[i], pool @ per_frame, atol=1e-5)

    def test_max_frames_enforced(self, rng):
        net = build_network(seed=8)
        too_long = torch.zeros(1, net.spec.encoder.max_frames + 1, net.width)
        with pytest.raises(ValueError):
            net.trunk_forward(too_long)

    def test_predict_denormalizes(self, tiny_windows):
        net = build_network(seed=9)
        features, subjects, _ = stack_windows(tiny_windows[:3])
        mean = torch.linspace(-1, 1, net.spec.encoder.parcels)
        std = torch.linspace(0.5, 2.0, net.spec.encoder.parcels)
        net.target_mean.copy_(mean)
        net.target_std.copy_(std)
        with torch.no_grad():
            raw = net(features, subjects)
            scaled = net.predict(features, subjects)
        assert torch.allclose(scaled, raw * std + mean, atol=1e-6)

    def test_forward_shape_and_capture(self, tiny_windows):
        net = build_network(seed=10)
        features, subjects, targets = stack_windows(tiny_windows[:4])
        with torch.no_grad():
            out = net(features, subjects, capture=True)
        assert out.shape == targets.shape == (4, 6, 10)
        attn = net.captured_attention()
        assert set(attn) == {"vision", "audio", "text"}
        n_q = net.spec.pooler.n_queries
        heads = net.spec.pooler.heads
        assert attn["vision"].shape == (4, 24, heads, n_q, 4)


class TestStackWindows:
    def test_shapes_and_dtypes(self, tiny_windows):
        features, subjects, targets = stack_windows(tiny_windows[:5])
        assert features["vision"].shape == (5, 4, 24, 8)
        assert subjects.tolist() == [w.subject for w in tiny_windows[:5]]
        assert targets.dtype == torch.float32

    def test_ragged_batch_rejected(self, rng):
        def window(wid, n_channels):
            data = rng.standard_normal((2, 6, n_channels)).astype(np.float32)
            return StimulusWindow(
                window_id=wid,
                subject=0,
                features={"vision": LayerResolvedFeatures("vision", data)},
                target=np.zeros((3, 4), dtype=np.float32),
            )

        with pytest.raises(ValueError):
            stack_windows([window("a", 8), window("b", 6)])

    def test_modality_mismatch_rejected(self, tiny_windows, rng):
        data = rng.standard_normal((2, 24, 8)).astype(np.float32)
        odd = StimulusWindow(
            window_id="odd",
            subject=0,
            features={"vision": LayerResolvedFeatures("vision", data)},
            target=np.zeros((6, 10), dtype=np.float32),
        )
        with pytest.raises(ValueError):
            stack_windows([tiny_windows[0], odd])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stack_windows([])


class TestSpecConfig:
    def test_round_trip(self):
        spec = tiny_model_spec()
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_encoder_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(hidden=5, heads=4)  # fused width 15 not divisible
        with pytest.raises(ValueError):
            EncoderConfig(hidden=10, heads=6, depth=1)  # per-head width 5 odd
        EncoderConfig(hidden=10, heads=6, depth=0)  # fine without attention
        with pytest.raises(ValueError):
            EncoderConfig(modality_dropout=1.0)

    def test_model_spec_validation(self):
        with pytest.raises(ValueError):
            ModelSpec(channels={})
        with pytest.raises(ValueError):
            ModelSpec(channels={"vision": 8, "smell": 4})
        with pytest.raises(ValueError):
            ModelSpec(channels={"vision": 6})  # 6 % default 4 heads != 0


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_array_round_trip_bit_exact(self, tmp_path, rng):
        arrays = {
            "a": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(5),
            "c": np.arange(6, dtype=np.int32).reshape(2, 3),
            "d": np.array(7, dtype=np.int64),
        }
        path = save_arrays(tmp_path / "x.mirc", arrays, meta={"note": "hi"})
        loaded, meta = load_arrays(path)
        assert meta == {"note": "hi"}
        assert set(loaded) == set(arrays)
        for name in arrays:
            assert loaded[name].dtype == arrays[name].dtype
            assert np.array_equal(loaded[name], arrays[name])

    def test_bytes_deterministic(self, tmp_path, rng):
        arrays = {"w": rng.standard_normal((4, 4)), "b": rng.standard_normal(4)}
        first = save_arrays(tmp_path / "a.mirc", arrays).read_bytes()
        second = save_arrays(tmp_path / "b.mirc", arrays).read_bytes()
        assert first == second
        loaded, _ = load_arrays(tmp_path / "a.mirc")
        resaved = save_arrays(tmp_path / "c.mirc", loaded).read_bytes()
        assert resaved == first

    def test_error_types(self, tmp_path, rng):
        path = save_arrays(tmp_path / "x.mirc", {"a": rng.standard_normal(3)})
        raw = path.read_bytes()
        bad = tmp_path / "bad.mirc"
        bad.write_bytes(b"ZZZZ" + raw[4:])
        with pytest.raises(BadMagicError):
            load_arrays(bad)
        short = tmp_path / "short.mirc"
        short.write_bytes(raw[:-4])
        with pytest.raises(TruncatedPayloadError):
            load_arrays(short)
        versioned = bytearray(raw)
        versioned[4] = 9
        vpath = tmp_path / "v.mirc"
        vpath.write_bytes(bytes(versioned))
        with pytest.raises(VersionMismatchError):
            load_arrays(vpath)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_arrays(tmp_path / "x.mirc", {"a": np.zeros(3, dtype=np.float16)})

    def test_model_round_trip(self, tmp_path, tiny_windows):
        net = build_network(seed=11)
        features, subjects, _ = stack_windows(tiny_windows[:3])
        net.target_mean.uniform_(-1, 1)
        path = save_model(tmp_path / "m.mirc", net, extra_meta={"best_epoch": 4})
        loaded, meta = load_model(path)
        assert meta["best_epoch"] == 4
        assert loaded.spec == net.spec
        for name, tensor in net.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], tensor), name
        with torch.no_grad():
            assert torch.equal(net.predict(features, subjects), loaded.predict(features, subjects))
