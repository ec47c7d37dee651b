import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgcn.data import InputNorm, SkeletonClip, SkeletonTemplate
from stgcn.errors import ConfigurationError, DimensionError, FormatError, InputError
from stgcn.graph import Strategy, build_adjacency, build_openpose18_graph
from stgcn.net import (
    BlockParams,
    ModelConfig,
    backward,
    backward_batch,
    cross_entropy,
    finite_difference_check,
    forward,
    forward_batch,
    init_model,
    load_checkpoint,
    relative_error,
    save_checkpoint,
    softmax,
    spatial_graph_conv,
    temporal_conv,
)

from oracles import loop_graph_conv, loop_temporal_conv

STRATEGIES = [s.value for s in Strategy]
R = np.random.default_rng(11).uniform(0.05, 0.4, 18)
TEMPLATE = SkeletonTemplate(np.zeros(2), R, np.zeros((18, 2)))
SMALL = (3, 4, 4)


def small_config(strategy, mask=True, **kw):
    kw.setdefault("channels", SMALL)
    kw.setdefault("kt", 3)
    return ModelConfig(strategy, 3, mask=mask, template=TEMPLATE, **kw)


def random_clip(rng, T=6, second=False, label=0):
    t = np.zeros((2, 3, T, 18))
    t[0] = rng.normal(0, 0.3, (3, T, 18))
    t[0, 2] = rng.uniform(0.2, 1.0, (T, 18))
    if second:
        t[1] = rng.normal(0, 0.3, (3, T, 18))
        t[1, 2] = rng.uniform(0.2, 1.0, (T, 18))
    return SkeletonClip("c", label, t, T)


def block(rng, K, c_in, c_out, kt=3, mask=None):
    return BlockParams(
        graph_weight=rng.normal(size=(K, c_in, c_out)),
        graph_bias=rng.normal(size=c_out),
        temporal_weight=rng.normal(size=(c_out, c_out, kt)),
        temporal_bias=rng.normal(size=c_out),
        m_mask=mask,
    )


# -- layers ------------------------------------------------------------------

@pytest.mark.parametrize("strategy", STRATEGIES)
def test_graph_conv_matches_loops(strategy):
    rng = np.random.default_rng(0)
    pa = build_adjacency(strategy, R)
    bp = block(rng, pa.K, 3, 5, mask=rng.uniform(0.5, 1.5, (18, 18)))
    x = rng.normal(size=(3, 4, 18))
    for enabled in (False, True):
        got = spatial_graph_conv(x, pa, bp, mask_enabled=enabled)
        want = loop_graph_conv(x, pa.matrices, bp.m_mask if enabled else None, bp.graph_weight, bp.graph_bias)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_graph_conv_batched_leading_axes():
    rng = np.random.default_rng(1)
    pa = build_adjacency("index")
    bp = block(rng, 4, 3, 2)
    x = rng.normal(size=(2, 5, 3, 4, 18))
    got = spatial_graph_conv(x, pa, bp)
    assert got.shape == (2, 5, 2, 4, 18)
    np.testing.assert_allclose(got[1, 3], spatial_graph_conv(x[1, 3], pa, bp), rtol=1e-13)


@pytest.mark.parametrize("kt, T", [(3, 5), (9, 12), (9, 1), (1, 4)])
def test_temporal_conv_matches_loops(kt, T):
    rng = np.random.default_rng(kt * 100 + T)
    bp = block(rng, 1, 2, 3, kt=kt)
    x = rng.normal(size=(3, T, 18))
    np.testing.assert_allclose(temporal_conv(x, bp), loop_temporal_conv(x, bp.temporal_weight, bp.temporal_bias),
                               rtol=1e-12, atol=1e-12)


def test_temporal_single_frame_uses_centre_tap_only():
    rng = np.random.default_rng(2)
    bp = block(rng, 1, 2, 3, kt=9)
    x = rng.normal(size=(3, 1, 18))
    want = np.einsum("co,cv->ov", bp.temporal_weight[:, :, 4], x[:, 0])[:, None] + bp.temporal_bias[:, None, None]
    np.testing.assert_allclose(temporal_conv(x, bp), want, rtol=1e-12)


def test_temporal_constant_input_interior():
    rng = np.random.default_rng(3)
    bp = block(rng, 1, 2, 2, kt=3)
    x = np.ones((2, 7, 18))
    y = temporal_conv(x, bp)
    interior = bp.temporal_weight.sum(axis=(0, 2)) + bp.temporal_bias
    np.testing.assert_allclose(y[:, 1:-1, 0], np.repeat(interior[:, None], 5, axis=1), rtol=1e-12)
    edge = bp.temporal_weight[:, :, 1:].sum(axis=(0, 2)) + bp.temporal_bias
    np.testing.assert_allclose(y[:, 0, 0], edge, rtol=1e-12)


def test_temporal_even_kernel_rejected():
    rng = np.random.default_rng(4)
    with pytest.raises(ConfigurationError):
        temporal_conv(np.zeros((2, 3, 18)), block(rng, 1, 2, 2, kt=4))


def test_layer_dimension_errors_name_axis():
    rng = np.random.default_rng(5)
    pa = build_adjacency("index")
    with pytest.raises(DimensionError, match="channel"):
        spatial_graph_conv(np.zeros((4, 3, 18)), pa, block(rng, 4, 3, 2))
    with pytest.raises(DimensionError, match="joint"):
        spatial_graph_conv(np.zeros((3, 3, 17)), pa, block(rng, 4, 3, 2))
    with pytest.raises(DimensionError, match="partition"):
        spatial_graph_conv(np.zeros((3, 3, 18)), pa, block(rng, 3, 3, 2))


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_mask_of_ones_is_bitwise_neutral(strategy):
    rng = np.random.default_rng(6)
    pa = build_adjacency(strategy, R)
    bp = block(rng, pa.K, 3, 4, mask=np.ones((18, 18)))
    x = rng.normal(size=(3, 5, 18))
    assert np.array_equal(spatial_graph_conv(x, pa, bp, True), spatial_graph_conv(x, pa, bp, False))


def test_graph_conv_is_one_hop_local():
    rng = np.random.default_rng(7)
    g = build_openpose18_graph()
    pa = build_adjacency("index")
    bp = block(rng, 4, 3, 3)
    x = rng.normal(size=(3, 2, 18))
    for j in (0, 4, 8, 16):
        x2 = x.copy()
        x2[:, :, j] += 1.0
        changed = np.any(spatial_graph_conv(x2, pa, bp) != spatial_graph_conv(x, pa, bp), axis=(0, 1))
        expected = (g.adjacency[:, j] > 0) | (np.arange(18) == j)
        assert np.array_equal(changed, expected)


def test_model_receptive_field_grows_one_hop_per_block():
    rng = np.random.default_rng(8)
    g = build_openpose18_graph()
    hop2 = ((g.adjacency + np.eye(18)) @ (g.adjacency + np.eye(18))) > 0
    model = init_model(ModelConfig("index", 3, channels=(3, 4, 4), kt=1), seed=1)
    # positive weights keep every relu open, so any reachable change propagates
    for b in model.blocks:
        b.graph_weight = np.abs(b.graph_weight)
        b.temporal_weight = np.abs(b.temporal_weight)
        b.graph_bias += 1.0
    x = np.abs(rng.normal(size=(1, 3, 1, 18))) + 0.1

    def block_out(inp):
        out = inp[0]
        for b in model.blocks:
            out = np.maximum(temporal_conv(np.maximum(spatial_graph_conv(out, model.adjacency, b, True), 0), b), 0)
        return out

    base = block_out(x)
    j = 4
    x2 = x.copy()
    x2[0, :, 0, j] += 1.0
    changed = np.any(block_out(x2) != base, axis=(0, 1))
    assert np.array_equal(changed, hop2[:, j])


# -- forward -------------------------------------------------------------------

def test_zero_clip_scores_are_classifier_bias():
    model = init_model(small_config("index"), seed=0)
    model.classifier_bias = np.array([0.3, -0.2, 0.1])
    np.testing.assert_array_equal(forward(model, np.zeros((2, 3, 5, 18))), model.classifier_bias)


def test_duplicated_person_slot_matches_single():
    rng = np.random.default_rng(9)
    model = init_model(small_config("connection"), seed=2)
    clip = random_clip(rng)
    dup = clip.tensor.copy()
    dup[1] = dup[0]
    np.testing.assert_allclose(forward(model, dup), forward(model, clip), rtol=1e-12, atol=1e-14)


def test_second_person_averaged():
    rng = np.random.default_rng(10)
    model = init_model(small_config("index"), seed=3)
    clip = random_clip(rng, second=True)
    a = forward(model, clip.tensor[[0, 1]] * np.array([1, 0])[:, None, None, None])
    b = forward(model, clip.tensor[[1, 0]] * np.array([1, 0])[:, None, None, None])
    np.testing.assert_allclose(forward(model, clip), (a + b) / 2, rtol=1e-12)


def test_forward_batch_matches_single():
    rng = np.random.default_rng(12)
    model = init_model(small_config("spatial"), seed=4)
    clips = [random_clip(rng), random_clip(rng, second=True), SkeletonClip("z", 0, np.zeros((2, 3, 6, 18)), 6)]
    batch = forward_batch(model, clips)
    for c, s in zip(clips, batch):
        np.testing.assert_allclose(forward(model, c), s, rtol=1e-12, atol=1e-14)


def test_mask_on_off_forward_bitwise():
    rng = np.random.default_rng(13)
    for strategy in STRATEGIES:
        on = init_model(small_config(strategy, mask=True), seed=5)
        off = init_model(small_config(strategy, mask=False), seed=5)
        for _ in range(5):
            clip = random_clip(rng)
            assert np.array_equal(forward(on, clip), forward(off, clip))


def test_forward_rejects_wrong_joint_count():
    model = init_model(small_config("index"), seed=0)
    with pytest.raises(DimensionError, match="joint"):
        forward(model, np.zeros((2, 3, 5, 17)))
    with pytest.raises(DimensionError, match="channel"):
        forward(model, np.zeros((2, 2, 5, 18)))


def test_residual_model_runs_and_checks():
    rng = np.random.default_rng(14)
    model = init_model(small_config("index", residual=True, channels=(3, 4, 4)), seed=6)
    assert model.blocks[0].residual_weight is not None and model.blocks[1].residual_weight is None
    res = finite_difference_check(model, random_clip(rng, T=4), 1)
    assert res.max_rel_error < 1e-4


# -- loss and gradients --------------------------------------------------------

def test_cross_entropy_values():
    assert cross_entropy(np.zeros(4), 2) == pytest.approx(math.log(4), rel=1e-15)
    assert cross_entropy(np.array([1000.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-300)
    assert cross_entropy(np.array([1000.0, 0.0]), 1) == pytest.approx(1000.0)
    with pytest.raises(InputError):
        cross_entropy(np.zeros(3), 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.integers(0, 5))
def test_cross_entropy_non_negative_and_softmax_normalized(scores, label):
    scores = np.array(scores)
    label = label % len(scores)
    assert cross_entropy(scores, label) >= 0
    assert softmax(scores).sum() == pytest.approx(1.0, abs=1e-12)


def test_classifier_bias_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(15)
    model = init_model(small_config("index"), seed=7)
    clip = random_clip(rng, label=2)
    _, grads = backward(model, clip, 2)
    expected = softmax(forward(model, clip))
    expected[2] -= 1
    np.testing.assert_allclose(grads["classifier.bias"], expected, rtol=1e-12, atol=1e-15)


def test_batch_gradient_is_mean_of_sample_gradients():
    rng = np.random.default_rng(16)
    model = init_model(small_config("spatial"), seed=8)
    clips = [random_clip(rng), random_clip(rng, second=True)]
    loss, grads = backward_batch(model, clips, [0, 2])
    l0, g0 = backward(model, clips[0], 0)
    l1, g1 = backward(model, clips[1], 2)
    assert loss == pytest.approx((l0 + l1) / 2, rel=1e-12)
    for path in grads:
        np.testing.assert_allclose(grads[path], (g0[path] + g1[path]) / 2, rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_finite_difference_check(strategy):
    rng = np.random.default_rng(17)
    model = init_model(small_config(strategy), seed=9)
    res = finite_difference_check(model, random_clip(rng, T=4, second=True), 1)
    assert res.max_rel_error < 1e-4, res
    assert res.skipped == 0


def test_finite_difference_flags_corrupted_gradient():
    rng = np.random.default_rng(18)
    model = init_model(small_config("index"), seed=10)
    clip = random_clip(rng, T=4)
    _, grads = backward(model, clip, 0)
    bad = dict(grads)
    bad["blocks.1.graph_bias"] = grads["blocks.1.graph_bias"] * 1.1
    res = finite_difference_check(model, clip, 0, grads=bad)
    assert res.max_rel_error > 0.05
    assert res.path == "blocks.1.graph_bias"


def test_finite_difference_sign_of_step_irrelevant():
    rng = np.random.default_rng(19)
    model = init_model(small_config("distance", channels=(3, 2)), seed=11)
    clip = random_clip(rng, T=3)
    assert finite_difference_check(model, clip, 0, h=1e-3) == finite_difference_check(model, clip, 0, h=-1e-3)


def test_relative_error_both_zero():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_mask_gradient_absent_when_mask_off():
    rng = np.random.default_rng(20)
    model = init_model(small_config("index", mask=False), seed=12)
    _, grads = backward(model, random_clip(rng), 0)
    assert not any("m_mask" in k for k in grads)
    assert list(grads) == [k for k, _ in model.named_parameters()]


def test_mask_gradient_zero_off_graph():
    rng = np.random.default_rng(21)
    model = init_model(small_config("spatial"), seed=13)
    _, grads = backward(model, random_clip(rng), 1)
    support = build_openpose18_graph().adjacency + np.eye(18) > 0
    for b in range(len(model.blocks)):
        g = grads[f"blocks.{b}.m_mask"]
        assert not g[~support].any()
        assert np.abs(g[support]).sum() > 0


def test_backward_rejects_bad_labels():
    rng = np.random.default_rng(22)
    model = init_model(small_config("index"), seed=0)
    with pytest.raises(InputError):
        backward(model, random_clip(rng), 3)
    with pytest.raises(DimensionError):
        backward_batch(model, [random_clip(rng)], [0, 1])


# -- config, input normalization and checkpoints --------------------------------

def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig("spatial", 4)
    with pytest.raises(ConfigurationError):
        ModelConfig("index", 1)
    with pytest.raises(ConfigurationError):
        ModelConfig("index", 4, kt=4)
    assert ModelConfig("full_distance", 4, template=TEMPLATE).strategy is Strategy.FULL_DISTANCE


def test_float32_model_computes_in_float32():
    rng = np.random.default_rng(23)
    model = init_model(small_config("index"), seed=1).astype(np.float32)
    clip = random_clip(rng)
    assert forward(model, clip).dtype == np.float32
    _, grads = backward(model, clip, 0)
    assert all(g.dtype == np.float32 for g in grads.values())


def test_input_norm_statistics_and_zero_clip():
    rng = np.random.default_rng(24)
    clips = [random_clip(rng, T=5) for _ in range(3)]
    norm = InputNorm.from_clips(clips)
    obs = np.concatenate([c.tensor[0].reshape(3, -1, 18) for c in clips], axis=1)
    np.testing.assert_allclose(norm.mean, obs.mean(axis=1), rtol=1e-12)
    np.testing.assert_allclose(norm.std, obs.std(axis=1), rtol=1e-9)
    z = norm.apply(np.stack([c.tensor for c in clips]))
    assert not z[:, 1].any()  # empty second slot stays empty
    keep_c = InputNorm.from_clips(clips, passthrough=(2,)).apply(clips[0].tensor)
    assert np.array_equal(keep_c[0, 2], clips[0].tensor[0, 2])
    model = init_model(small_config("index", input_norm=norm), seed=0)
    model.classifier_bias = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(forward(model, np.zeros((2, 3, 5, 18))), model.classifier_bias)


def test_input_norm_constant_channel_uses_unit_scale():
    t = np.zeros((2, 3, 4, 18))
    t[0, 2] = 1.0
    t[0, 0] = 0.25
    norm = InputNorm.from_clips([SkeletonClip("a", 0, t, 4)])
    assert np.all(norm.std == 1.0)
    assert not norm.apply(t).any()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(25)
    clips = [random_clip(rng) for _ in range(2)]
    model = init_model(small_config("full-distance", residual=True, input_norm=InputNorm.from_clips(clips)), seed=14)
    path = tmp_path / "m.stgm"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config.to_json() == model.config.to_json()
    for (k, a), (k2, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert k == k2 and np.array_equal(a, b)
    assert np.array_equal(forward(model, clips[0]), forward(loaded, clips[0]))
    data = path.read_bytes()
    assert data[:4] == b"STGM"
    path.write_bytes(data[:-5])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_records_mask_flag(tmp_path):
    model = init_model(small_config("index", mask=False), seed=0)
    save_checkpoint(model, tmp_path / "m.stgm")
    loaded = load_checkpoint(tmp_path / "m.stgm")
    assert loaded.config.mask is False
    assert all(b.m_mask is None for b in loaded.blocks)
