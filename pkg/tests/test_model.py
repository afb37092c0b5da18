"""Model assembly: variant topologies, training behavior, embedding taps."""

import numpy as np
import pytest

from deskreid.model import Model, ModelSpec, build_model, extract_embedding
from deskreid.optim import Adam

SMALL = dict(in_channels=3, channels=(4, 8), input_hw=(16, 8))


def make(variant, num_classes=4, seed=0, **kw):
    merged = {**SMALL, **kw}
    spec = ModelSpec(variant=variant, num_classes=num_classes, **merged)
    return build_model(spec, np.random.default_rng(seed))


def batch(rng, n=6, hw=(16, 8)):
    return rng.uniform(-1.0, 1.0, (n, 3, *hw))


# ----------------------------------------------------------------- spec

def test_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        ModelSpec(variant="mystery", num_classes=4)
    with pytest.raises(ValueError):
        ModelSpec(variant="good_practices", num_classes=1)
    with pytest.raises(ValueError):
        ModelSpec(variant="good_practices", num_classes=4, channels=())
    with pytest.raises(ValueError):
        ModelSpec(variant="bottleneck", num_classes=4, bottleneck_dim=0)
    with pytest.raises(ValueError):
        ModelSpec(variant="dropout_neck", num_classes=4, dropout_p=1.0)


def test_spec_dims():
    spec = ModelSpec(variant="good_practices", num_classes=4, **SMALL)
    assert spec.feature_dim == 8
    assert spec.embedding_dim == 8
    bspec = ModelSpec(variant="bottleneck", num_classes=4,
                      bottleneck_dim=5, **SMALL)
    assert bspec.embedding_dim == 5


# ----------------------------------------------------- variant topology

def test_variant_parameter_sets():
    names = {v: {n for n, _ in make(v).named_parameters()}
             for v in ("good_practices", "no_bn", "dropout_neck", "bottleneck")}
    base = {"conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias",
            "classifier.weight", "classifier.bias"}
    assert names["good_practices"] == base | {"bn.gamma", "bn.beta"}
    assert names["no_bn"] == base
    assert names["dropout_neck"] == base
    assert names["bottleneck"] == base | {"neck_fc.weight", "neck_fc.bias",
                                          "bn.gamma", "bn.beta"}


def test_embedding_dimensions_per_variant():
    rng = np.random.default_rng(1)
    x = batch(rng)
    for variant, dim in [("good_practices", 8), ("no_bn", 8),
                         ("dropout_neck", 8), ("bottleneck", 3)]:
        model = make(variant, bottleneck_dim=3)
        model.eval()
        assert model.embed(x).shape == (6, dim)


# ------------------------------------------------------------- training

def test_initial_loss_near_log_num_classes():
    rng = np.random.default_rng(2)
    for seed in range(10):
        model = make("good_practices", num_classes=5, seed=seed)
        x = batch(rng, n=10)
        labels = rng.integers(0, 5, 10)
        loss, _ = model.forward_train(x, labels)
        assert abs(loss.item() - np.log(5)) < 0.4 * np.log(5)


def test_duplicated_batch_same_loss():
    rng = np.random.default_rng(3)
    model = make("good_practices")
    x = batch(rng, n=4)
    labels = np.array([0, 1, 2, 3])
    loss_once, _ = model.forward_train(x, labels)
    loss_twice, _ = model.forward_train(np.concatenate([x, x]),
                                        np.concatenate([labels, labels]))
    np.testing.assert_allclose(loss_twice.item(), loss_once.item(), atol=1e-12)


def test_overfits_tiny_dataset():
    rng = np.random.default_rng(4)
    model = make("good_practices", num_classes=2)
    x = batch(rng, n=8)
    labels = np.array([0, 1] * 4)
    opt = Adam(model.parameters(), lr=0.005)
    for _ in range(200):
        loss, _ = model.forward_train(x, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    final, logits = model.forward_train(x, labels)
    assert final.item() < 0.01
    assert np.array_equal(np.argmax(logits.data, axis=1), labels)


def test_all_parameters_receive_gradients():
    rng = np.random.default_rng(5)
    for variant in ("good_practices", "no_bn", "dropout_neck", "bottleneck"):
        model = make(variant)
        loss, _ = model.forward_train(batch(rng), rng.integers(0, 4, 6),
                                      dropout_rng=np.random.default_rng(0))
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, f"{variant}: {name} got no gradient"


def test_forward_train_mode_guards():
    rng = np.random.default_rng(6)
    model = make("good_practices")
    model.eval()
    with pytest.raises(RuntimeError):
        model.forward_train(batch(rng), np.zeros(6, dtype=int))
    dmodel = make("dropout_neck")
    with pytest.raises(ValueError):
        dmodel.forward_train(batch(rng), np.zeros(6, dtype=int))


# ------------------------------------------------------------ embedding

def test_eval_is_per_sample_independent():
    # Same sample alone or inside a batch gives the same embedding; tolerance
    # covers BLAS blocking differences between the two matmul shapes.
    rng = np.random.default_rng(7)
    model = make("good_practices")
    model.eval()
    x = batch(rng)
    joint = model.embed(x)
    for i in range(len(x)):
        np.testing.assert_allclose(model.embed(x[i:i + 1])[0], joint[i],
                                   rtol=0, atol=1e-12)
    jl = model.logits_eval(x)
    np.testing.assert_allclose(model.logits_eval(x[2:3])[0], jl[2],
                               rtol=0, atol=1e-12)


def test_embedding_is_bn_output_when_bn_present():
    rng = np.random.default_rng(8)
    model = make("good_practices")
    mean = rng.standard_normal(8)
    var = rng.uniform(0.5, 2.0, 8)
    model.bn.load_buffers(mean, var)
    model.eval()
    x = batch(rng)
    emb = model.embed(x)
    # Re-derive the expected affine from the running statistics.
    from deskreid.tensor import Tensor
    gap = model._features(Tensor(x)).data
    expected = (gap - mean) / np.sqrt(var + 1e-5)
    expected = expected * model.bn.gamma.data + model.bn.beta.data
    np.testing.assert_allclose(emb, expected, atol=1e-12)


def test_embedding_is_pooled_feature_without_bn():
    rng = np.random.default_rng(9)
    model = make("no_bn")
    model.eval()
    x = batch(rng)
    from deskreid.tensor import Tensor
    gap = model._features(Tensor(x)).data
    np.testing.assert_array_equal(model.embed(x), gap)


def test_dropout_neck_inactive_at_eval():
    rng = np.random.default_rng(10)
    model = make("dropout_neck")
    model.eval()
    x = batch(rng)
    assert np.array_equal(model.embed(x), model.embed(x))
    from deskreid.tensor import Tensor
    gap = model._features(Tensor(x)).data
    np.testing.assert_array_equal(model.embed(x), gap)


def test_extract_embedding_refuses_train_mode():
    model = make("good_practices")
    with pytest.raises(RuntimeError):
        extract_embedding(model, np.zeros((2, 3, 16, 8)))


def test_flip_fusion_identity_on_mirror_symmetric_images():
    rng = np.random.default_rng(11)
    half = rng.uniform(0.0, 1.0, (3, 3, 16, 4))
    x = np.concatenate([half, half[:, :, :, ::-1]], axis=3)
    model = make("good_practices")
    model.eval()
    plain = extract_embedding(model, x, flip_fusion=False)
    fused = extract_embedding(model, x, flip_fusion=True)
    np.testing.assert_allclose(fused, plain, atol=1e-12)


def test_flip_fusion_averages_both_orientations():
    rng = np.random.default_rng(12)
    x = batch(rng)
    model = make("good_practices")
    model.eval()
    fused = extract_embedding(model, x, flip_fusion=True)
    manual = 0.5 * (model.embed(x) + model.embed(x[:, :, :, ::-1].copy()))
    np.testing.assert_allclose(fused, manual, atol=1e-12)


# ----------------------------------------------------------- state i/o

def test_state_roundtrip_reproduces_embeddings():
    rng = np.random.default_rng(13)
    model = make("bottleneck", bottleneck_dim=5)
    x = batch(rng)
    # Touch the running stats so the roundtrip covers them too.
    model.forward_train(x, rng.integers(0, 4, 6))
    model.eval()
    want = model.embed(x)

    state = {name: arr.copy() for name, arr in model.state_arrays().items()}
    clone = make("bottleneck", bottleneck_dim=5, seed=99)
    clone.load_state_arrays(state)
    clone.eval()
    assert np.array_equal(clone.embed(x), want)


def test_load_state_rejects_wrong_keys_and_shapes():
    model = make("good_practices")
    state = dict(model.state_arrays())
    incomplete = dict(state)
    incomplete.pop("bn.gamma")
    with pytest.raises(ValueError):
        model.load_state_arrays(incomplete)
    extra = dict(state)
    extra["mystery"] = np.zeros(3)
    with pytest.raises(ValueError):
        model.load_state_arrays(extra)
    bad_shape = {k: v.copy() for k, v in state.items()}
    bad_shape["bn.gamma"] = np.zeros(17)
    with pytest.raises(ValueError):
        model.load_state_arrays(bad_shape)


def test_input_shape_validation():
    model = make("good_practices")
    with pytest.raises(Exception):
        model.forward_train(np.zeros((2, 3, 16, 9)), np.zeros(2, dtype=int))
