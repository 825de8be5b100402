import io

import numpy as np
import pytest

from canfuse import neuralnet as nn
from canfuse.errors import ConfigMismatch, GeometryMismatch, MissingCanFeatures, UnexpectedCanFeatures
from canfuse.fusionmodel import (ModelConfig, build_can_mlp, build_dave2_branch, build_head, build_model,
                                 dumps_model, head_input_width, loads_model, parameters, predict,
                                 predict_batch, set_parameters)


def conv_out(n, k, s):
    return (n - k) // s + 1


def test_dave2_spatial_chain_by_formula():
    h, w = 66, 200
    sizes = []
    for k, s in [(5, 2), (5, 2), (5, 2), (3, 1), (3, 1)]:
        h, w = conv_out(h, k, s), conv_out(w, k, s)
        sizes.append((h, w))
    assert sizes == [(31, 98), (14, 47), (5, 22), (3, 20), (1, 18)]
    assert h * w * 64 == 1152


def test_dave2_branch_shapes_match_chain():
    branch = build_dave2_branch(ModelConfig(variant="vision_only"))
    shape = (66, 200, 3)
    seen = []
    for layer in branch.layers:
        shape = layer.output_shape(shape)
        if isinstance(layer, nn.Conv2D):
            seen.append(shape[:2])
        if isinstance(layer, nn.Flatten):
            assert shape == (1152,)
    assert seen == [(31, 98), (14, 47), (5, 22), (3, 20), (1, 18)]
    assert branch.output_shape((66, 200, 3)) == (10,)


def test_dave2_rejects_other_geometry():
    with pytest.raises(ConfigMismatch):
        build_dave2_branch(ModelConfig(input_h=64))


def test_can_mlp_parameter_count():
    mlp = build_can_mlp(ModelConfig())
    assert sum(p.size for p in mlp.params) == 5 * 64 + 64 + 64 * 32 + 32 == 2464


def test_head_widths_and_counts():
    assert head_input_width(ModelConfig(variant="fused")) == 42
    assert head_input_width(ModelConfig(variant="vision_only")) == 10
    head = build_head(ModelConfig(variant="fused"))
    assert head.output_shape((42,)) == (1,)
    with pytest.raises(ConfigMismatch):
        build_head(ModelConfig(variant="vision_only"), in_width=42)
    fused, vis = build_model(ModelConfig(variant="fused")), build_model(ModelConfig(variant="vision_only"))
    assert parameters(vis).size == 253105
    assert parameters(fused).size == 256593


def test_vision_init_shared_across_variants():
    a = build_model(ModelConfig(variant="fused", seed=4))
    b = build_model(ModelConfig(variant="vision_only", seed=4))
    assert all(np.array_equal(x, y) for x, y in zip(a.vision.params, b.vision.params))


def test_seeded_determinism_and_seed_sensitivity():
    a, b = build_model(ModelConfig(seed=3)), build_model(ModelConfig(seed=3))
    c = build_model(ModelConfig(seed=4))
    assert np.array_equal(parameters(a), parameters(b))
    assert not np.array_equal(parameters(a), parameters(c))


def test_predict_deterministic_and_checks_inputs():
    rng = np.random.default_rng(0)
    img, can = rng.random((66, 200, 3)), rng.normal(size=5)
    m = build_model(ModelConfig(seed=1))
    assert predict(m, img, can) == predict(m, img, can)
    with pytest.raises(MissingCanFeatures):
        predict(m, img)
    with pytest.raises(GeometryMismatch):
        predict(m, rng.random((64, 200, 3)), can)
    v = build_model(ModelConfig(variant="vision_only", seed=1))
    with pytest.raises(UnexpectedCanFeatures):
        predict(v, img, can)
    batch = predict_batch(m, np.stack([img, img * 0.5]), np.stack([can, can]), batch_size=1)
    assert batch[0] == predict(m, img, can)


def test_variants_agree_at_initialisation():
    rng = np.random.default_rng(1)
    fused = build_model(ModelConfig(variant="fused", seed=9))
    vis = build_model(ModelConfig(variant="vision_only", seed=9))
    imgs, can = rng.random((3, 66, 200, 3)), rng.normal(size=(3, 5)) * 50
    # zero columns add exactly 0, but BLAS may sum the wider product in another order
    assert np.allclose(fused.forward(imgs, can), vis.forward(imgs), rtol=1e-12, atol=1e-15)
    first = fused.head.layers[0]
    assert np.all(first.W[:, 10:] == 0)
    assert np.array_equal(first.W[:, :10], vis.head.layers[0].W)


def test_branch_separability():
    """With the vision embedding fixed, the CAN vector alone moves the output."""
    rng = np.random.default_rng(2)
    m = build_model(ModelConfig(seed=5))
    m.head.layers[0].W[:, 10:] = rng.normal(0.0, 0.3, size=(32, 32))
    img = rng.random((66, 200, 3))
    outs = {predict(m, img, rng.normal(size=5) * 3) for _ in range(4)}
    assert len(outs) > 1
    v = build_model(ModelConfig(variant="vision_only", seed=5))
    assert predict(v, img) == predict(v, img.copy())


def test_full_model_grad_check_sampled():
    rng = np.random.default_rng(8)
    m = build_model(ModelConfig(seed=2))
    for p in m.params:
        p += rng.normal(0.0, 0.02, size=p.shape)
    x = (rng.random((2, 66, 200, 3)), rng.normal(size=(2, 5)))
    rep = nn.grad_check(m, x, rng.normal(size=2), h=1e-4, rtol=1e-4, max_per_tensor=3, seed=1)
    assert rep.passed, rep
    assert rep.n_skipped <= 0.2 * (rep.n_checked + rep.n_skipped)


def test_flat_parameter_round_trip():
    m = build_model(ModelConfig(seed=6))
    flat = parameters(m) * 0.5
    set_parameters(m, flat)
    assert np.array_equal(parameters(m), flat)


def test_model_checkpoint_round_trip():
    m = build_model(ModelConfig(seed=7))
    m.can_mean = np.arange(5.0)
    m.can_std = np.arange(1.0, 6.0)
    state = nn.AdamState.for_params(m.params)
    data = dumps_model(m, state)
    back, st2 = loads_model(data)
    assert back.config == m.config
    assert np.array_equal(parameters(back), parameters(m))
    assert np.array_equal(back.can_std, m.can_std)
    assert st2.t == 0
