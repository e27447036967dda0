import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masktune import kernels
from masktune.masking import (
    INPUT_CHANNEL,
    OUTPUT_CHANNEL,
    PARAMETER,
    EmptyDomainError,
    IncompatibleArtifactError,
    LayerMask,
    MaskArtifact,
    MaskedLinear,
    MaskFormatError,
    MaskStateError,
    apply_mask,
    binarize,
    mask_iou,
    pack_masks,
    sparsity,
    ste_gradient,
    unpack_masks,
)
from masktune.numerics import (
    DimensionError,
    GradTape,
    Tensor,
    finite_difference_grad,
    linear,
    relative_error,
    softmax_cross_entropy,
)


def artifact_from_bits(*arrays, names=None):
    names = names or [f"l{i}" for i in range(len(arrays))]
    layers = [LayerMask(n, a.shape, 5e-3, PARAMETER, a.astype(np.uint8)) for n, a in zip(names, arrays)]
    return MaskArtifact(layers, policy="amt", seed=3, config_hash="ab" * 16)


# -- binarize -------------------------------------------------------------------------

def test_binarize_threshold():
    out = binarize([0.010, 0.004, 0.0051], 0.005)
    np.testing.assert_array_equal(out, [1, 0, 1])


def test_binarize_default_init_all_ones():
    layer = MaskedLinear(np.ones((4, 3)), np.zeros(4), enabled=True)
    assert layer.mask_bin.min() == 1.0
    assert sparsity([layer]) == 0.0


def test_binarize_exact_threshold_is_zero():
    assert binarize([0.005], 0.005)[0] == 0.0


def test_binarize_rejects_nonfinite_alpha():
    with pytest.raises(ValueError):
        binarize([1.0], float("nan"))


def test_channel_granularity_shapes():
    rng = np.random.default_rng(1)
    M = rng.uniform(0, 0.01, (5, 7))
    cols = binarize(M, 0.005, INPUT_CHANNEL)
    rows = binarize(M, 0.005, OUTPUT_CHANNEL)
    assert np.all(cols == cols[0:1, :])
    assert np.all(rows == rows[:, 0:1])
    np.testing.assert_array_equal(cols[0], M.mean(axis=0) > 0.005)
    np.testing.assert_array_equal(rows[:, 0], M.mean(axis=1) > 0.005)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.02, 0.02), st.floats(-0.02, 0.02), st.integers(0, 2 ** 31))
def test_sparsity_monotone_in_alpha(a1, a2, seed):
    lo, hi = sorted((a1, a2))
    M = np.random.default_rng(seed).uniform(-0.01, 0.02, (6, 6))
    s_lo = 100 * (1 - binarize(M, lo).mean())
    s_hi = 100 * (1 - binarize(M, hi).mean())
    assert s_lo <= s_hi


# -- apply / STE ------------------------------------------------------------------------

def test_apply_mask_hand_example():
    layer = MaskedLinear([[2.0, -3.0], [4.0, 5.0]], [0.0, 0.0], enabled=True)
    layer.set_binary([[1, 0], [1, 1]])
    np.testing.assert_array_equal(apply_mask(layer, np.array([1.0, 1.0])).data, [2.0, 9.0])


def test_all_ones_bitwise_equals_unmasked():
    rng = np.random.default_rng(2)
    theta = rng.normal(size=(5, 4))
    x = rng.normal(size=(3, 4))
    b = rng.normal(size=5)
    masked = MaskedLinear(theta, b, enabled=True)
    plain = MaskedLinear(theta, b, enabled=False)
    assert np.array_equal(masked(x).data, plain(x).data)
    assert np.array_equal(masked(x).data, x @ theta.T + b)


def test_all_zero_mask_gives_bias():
    layer = MaskedLinear(np.ones((2, 3)), [0.5, -1.0], enabled=True)
    layer.set_binary(np.zeros((2, 3)))
    np.testing.assert_array_equal(layer(np.ones(3)).data, [0.5, -1.0])


def test_disabled_layer_uses_theta_and_has_no_gradient():
    layer = MaskedLinear(np.ones((2, 2)), np.zeros(2), enabled=False)
    layer.set_binary(np.zeros((2, 2)))
    np.testing.assert_array_equal(layer.effective_weight(), np.ones((2, 2)))
    assert layer.weight_tensor().requires_grad is False
    assert ste_gradient(layer, np.ones((2, 2))) is None


def test_theta_is_frozen():
    layer = MaskedLinear(np.ones((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        layer.theta[0, 0] = 3.0
    with pytest.raises(ValueError):
        layer.bias[0] = 3.0


def test_ste_chain_rule():
    layer = MaskedLinear([[3.0, -4.0]], [0.0], enabled=True)
    np.testing.assert_array_equal(ste_gradient(layer, [[1.0, 2.0]]), [[3.0, -8.0]])


def test_ste_zero_theta():
    layer = MaskedLinear([[0.0, 1.0]], [0.0], enabled=True)
    assert ste_gradient(layer, [[123.0, 1.0]])[0, 0] == 0.0


def test_ste_requires_backward():
    layer = MaskedLinear([[1.0]], [0.0], enabled=True)
    with pytest.raises(MaskStateError):
        ste_gradient(layer, None)


def test_ste_matches_fd_on_masked_weight():
    rng = np.random.default_rng(4)
    theta = rng.uniform(-1, 1, (3, 5))
    x = rng.uniform(-1, 1, (6, 5))
    labels = [0, 1, 2, 2, 1, 0]
    layer = MaskedLinear(theta, rng.uniform(-1, 1, 3), enabled=True)
    layer.set_binary(rng.integers(0, 2, (3, 5)))
    w = layer.weight_tensor()
    with GradTape() as tape:
        loss = softmax_cross_entropy(layer(x, w), labels)
    (g,) = tape.gradient(loss, [w])
    fd = finite_difference_grad(
        lambda wm: softmax_cross_entropy(linear(x, wm, layer.bias), labels).data, w.data, 1e-6)
    assert relative_error(ste_gradient(layer, g), theta * fd) <= 1e-4


def test_ste_identity_random_layers():
    rng = np.random.default_rng(5)
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=2))
        layer = MaskedLinear(rng.normal(size=shape), np.zeros(shape[0]), enabled=True)
        g = rng.normal(size=shape)
        assert np.abs(ste_gradient(layer, g) - layer.theta * g).max() <= 1e-12


def test_ste_channel_sums():
    theta = np.arange(6.0).reshape(2, 3)
    g = np.ones((2, 3))
    cols = MaskedLinear(theta, np.zeros(2), enabled=True, granularity=INPUT_CHANNEL)
    rows = MaskedLinear(theta, np.zeros(2), enabled=True, granularity=OUTPUT_CHANNEL)
    np.testing.assert_array_equal(ste_gradient(cols, g), [[3, 5, 7], [3, 5, 7]])
    np.testing.assert_array_equal(ste_gradient(rows, g), [[3, 3, 3], [12, 12, 12]])


def test_shape_mismatch():
    layer = MaskedLinear(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(DimensionError):
        layer(np.ones(4))


# -- sparsity / IoU ---------------------------------------------------------------------------

def test_sparsity_counts():
    layer = MaskedLinear(np.ones((2, 4)), np.zeros(2), enabled=True)
    layer.set_binary([[1, 0, 1, 1], [1, 1, 0, 1]])
    assert sparsity([layer]) == 25.0


def test_sparsity_only_enabled():
    on = MaskedLinear(np.ones((2, 2)), np.zeros(2), enabled=True)
    off = MaskedLinear(np.ones((2, 2)), np.zeros(2), enabled=False)
    off.set_binary(np.zeros((2, 2)))
    assert sparsity([on, off]) == 0.0
    with pytest.raises(EmptyDomainError):
        sparsity([off])


def test_sparsity_counting_oracle():
    rng = np.random.default_rng(6)
    bits = np.ones(500)
    k = 137
    bits[rng.choice(500, k, replace=False)] = 0
    art = artifact_from_bits(bits.reshape(20, 25))
    assert sparsity(art) == pytest.approx(100 * k / 500, abs=1e-12)


def test_iou_cases():
    a = np.ones(8)
    a[[1, 2, 3]] = 0
    b = np.ones(8)
    b[[2, 3, 4]] = 0
    c = np.ones(8)
    c[[6, 7]] = 0
    A, B, C = (artifact_from_bits(v.reshape(2, 4)) for v in (a, b, c))
    assert mask_iou(A, A) == 1.0
    assert mask_iou(A, C) == 0.0
    assert mask_iou(A, B) == pytest.approx(0.5)
    ones = artifact_from_bits(np.ones((2, 4)))
    assert mask_iou(ones, ones) == 1.0


def test_iou_incompatible():
    with pytest.raises(IncompatibleArtifactError):
        mask_iou(artifact_from_bits(np.ones((2, 4))), artifact_from_bits(np.ones((4, 2))))


# -- packing ---------------------------------------------------------------------------------

def test_pack_bit_order():
    bits = np.array([1, 0, 1, 1, 0, 0, 0, 1], dtype=np.uint8)
    assert kernels.pack_bits(bits).tobytes() == b"\xb1"
    assert kernels._pack_numpy(bits).tobytes() == b"\xb1"


def test_pack_nine_bits():
    out = kernels.pack_bits(np.ones(9, dtype=np.uint8))
    assert out.tobytes() == b"\xff\x80"


def test_artifact_roundtrip_random():
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        shape = tuple(int(s) for s in rng.integers(1, 6, size=rng.integers(1, 3)))
        bits = rng.integers(0, 2, size=shape)
        art = artifact_from_bits(bits)
        raw = pack_masks(art)
        back = unpack_masks(raw)
        assert pack_masks(back) == raw
        assert back.zero_count == art.zero_count


def test_artifact_header_fields():
    art = artifact_from_bits(np.array([[1, 0, 1, 1, 0, 0, 0, 1]]), names=["blocks.0.attn.q"])
    raw = pack_masks(art)
    assert raw[:4] == b"RMTM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert b"\xb1" in raw
    back = unpack_masks(raw)
    assert back.policy == "amt" and back.seed == 3 and back.config_hash == "ab" * 16
    assert back.layers[0].name == "blocks.0.attn.q"


@pytest.mark.parametrize("mutate, msg", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + (2).to_bytes(4, "little") + r[8:], "version"),
    (lambda r: r[:30], "truncated"),
])
def test_artifact_corruption(mutate, msg):
    raw = pack_masks(artifact_from_bits(np.ones((3, 5)), names=["proj"]))
    with pytest.raises(MaskFormatError, match=msg):
        unpack_masks(mutate(raw))


def test_truncation_names_layer():
    raw = pack_masks(artifact_from_bits(np.ones((40, 5)), names=["blocks.1.mlp.fc2"]))
    with pytest.raises(MaskFormatError, match="blocks.1.mlp.fc2"):
        unpack_masks(raw[:50])


def test_nonzero_padding_rejected():
    raw = bytearray(pack_masks(artifact_from_bits(np.ones((1, 9)), names=["x"])))
    idx = raw.index(b"\xff\x80") + 1
    raw[idx] |= 0x01
    with pytest.raises(MaskFormatError, match="padding"):
        unpack_masks(bytes(raw))


def test_from_layers_only_enabled():
    a = MaskedLinear(np.ones((2, 2)), np.zeros(2), enabled=True, name="a")
    b = MaskedLinear(np.ones((2, 2)), np.zeros(2), enabled=False, name="b")
    art = MaskArtifact.from_layers([a, b])
    assert [r.name for r in art.layers] == ["a"]
