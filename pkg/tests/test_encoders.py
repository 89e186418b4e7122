import numpy as np
import pytest

from epd_sgg.datamodel import GeneratorConfig, generate_synthetic
from epd_sgg.encoders import (
    EncoderDims,
    EncoderParams,
    decode_object,
    embed_spatial,
    encode_object,
    encode_predicate,
    semantic_features,
)
from epd_sgg.model import collate
from epd_sgg.numcore import DimensionError, Tensor, float64_oracle, sgd_step, softmax_cross_entropy
from gradcheck import TOL, numeric_grad_tensor, rel_error

DIMS = EncoderDims(d_v=5, d_s=3, d_g=4, d_o=6, d_p=7, num_object_classes=4)


@pytest.fixture
def params():
    return EncoderParams.create(np.random.default_rng(0), DIMS)


def _inputs(rng, n=3):
    v = rng.standard_normal((n, DIMS.d_v)).astype(np.float32)
    boxes = np.sort(rng.uniform(0, 1, (n, 2, 2)), axis=1).transpose(0, 2, 1).reshape(n, 4)
    labels = rng.integers(0, DIMS.num_object_classes, size=n)
    return v, boxes[:, [0, 2, 1, 3]].astype(np.float32), labels


def _full_path(params, v, boxes, labels):
    s = embed_spatial(params, boxes)
    g = semantic_features(params, labels)
    o = encode_object(params, v, s, g)
    return encode_predicate(params, g, o, v)


def test_zero_bbox_zero_bias_gives_zero(params):
    params.spatial_embed.b.value[:] = 0
    out = embed_spatial(params, np.zeros((2, 4)))
    np.testing.assert_array_equal(out.value, 0)


def test_identical_boxes_identical_embeddings(params):
    box = np.array([[0.1, 0.2, 0.5, 0.6]] * 2)
    out = embed_spatial(params, box).value
    np.testing.assert_array_equal(out[0], out[1])


def test_spatial_gradient(params, rng):
    boxes = Tensor(rng.uniform(0, 1, (3, 4)))
    R = rng.standard_normal((3, DIMS.d_s))
    embed_spatial(params, boxes).backward(R)
    W = params.spatial_embed.W
    num = numeric_grad_tensor(lambda: (embed_spatial(params, boxes).value * R).sum(), W)
    assert rel_error(W.grad, num) < TOL


def test_encoder_input_width():
    p = EncoderParams.create(np.random.default_rng(0), EncoderDims())
    assert p.object_encoder.d_in == 64
    assert p.predicate_encoder.d_in == 16 + 64 + 32


def test_encode_object_concat_order_is_v_s_g(params, rng):
    v, boxes, labels = _inputs(rng)
    s = embed_spatial(params, boxes).value
    g = semantic_features(params, labels).value
    # swapping two equal-width blocks would be invisible; use the concat input directly
    first = params.object_encoder.layers[0]
    W = np.zeros_like(first.W.value)
    W[: DIMS.d_v, 0] = 1.0  # first output unit reads only the visual block
    first.W.value[:] = W
    first.b.value[:] = 0
    params.object_encoder.activation = "none"
    params.object_encoder.layers[1].W.value[:] = np.eye(DIMS.d_o)
    params.object_encoder.layers[1].b.value[:] = 0
    out = encode_object(params, v, s, g).value
    np.testing.assert_allclose(out[:, 0], v.sum(axis=1), rtol=1e-6)


def test_encode_predicate_concat_order_is_g_o_v(params, rng):
    v, boxes, labels = _inputs(rng)
    g = semantic_features(params, labels).value
    o = rng.standard_normal((3, DIMS.d_o)).astype(np.float32)
    first = params.predicate_encoder.layers[0]
    first.W.value[:] = 0
    first.W.value[-DIMS.d_v:, 0] = 1.0  # last block is v
    first.W.value[: DIMS.d_g, 1] = 1.0  # first block is g
    first.b.value[:] = 0
    params.predicate_encoder.activation = "none"
    params.predicate_encoder.layers[1].W.value[:] = np.eye(DIMS.d_p)
    params.predicate_encoder.layers[1].b.value[:] = 0
    out = encode_predicate(params, g, o, v).value
    np.testing.assert_allclose(out[:, 0], v.sum(axis=1), rtol=1e-5)
    np.testing.assert_allclose(out[:, 1], g.sum(axis=1), rtol=1e-5)


def test_object_permutation_equivariance(params, rng):
    v, boxes, labels = _inputs(rng, n=4)
    perm = np.array([2, 0, 3, 1])
    a = _full_path(params, v, boxes, labels).value
    b = _full_path(params, v[perm], boxes[perm], labels[perm]).value
    np.testing.assert_array_equal(a[perm], b)


def test_identical_objects_identical_encodings(params, rng):
    v, boxes, labels = _inputs(rng, n=1)
    out = _full_path(params, np.repeat(v, 2, 0), np.repeat(boxes, 2, 0), np.repeat(labels, 2)).value
    np.testing.assert_array_equal(out[0], out[1])


def test_dimension_mismatch(params, rng):
    v, boxes, labels = _inputs(rng)
    with pytest.raises(DimensionError):
        encode_object(params, v[:, :-1], embed_spatial(params, boxes), semantic_features(params, labels))


def test_end_to_end_gradient_to_visual(params, rng):
    v, boxes, labels = _inputs(rng)
    vt = Tensor(v, requires_grad=True)
    vt.zero_grad()
    R = rng.standard_normal((3, DIMS.d_p))
    _full_path(params, vt, boxes, labels).backward(R)
    num = numeric_grad_tensor(lambda: (_full_path(params, vt, boxes, labels).value * R).sum(), vt)
    assert rel_error(vt.grad, num) < TOL


def test_semantic_row_of_label_gets_gradient(params, rng):
    v, boxes, _ = _inputs(rng, n=2)
    labels = np.array([1, 1])
    R = rng.standard_normal((2, DIMS.d_p))
    _full_path(params, v, boxes, labels).backward(R)
    table = params.semantic_table
    assert np.any(table.grad[1] != 0)
    assert np.all(table.grad[[0, 2, 3]] == 0)
    num = numeric_grad_tensor(lambda: (_full_path(params, v, boxes, labels).value * R).sum(), table)
    assert rel_error(table.grad, num) < TOL


def test_decode_object_uniform_bias_picks_class(params, rng):
    params.object_classifier.W.value[:] = 0
    params.object_classifier.b.value[:] = [0, 0, 5, 0]
    _, probs, labels = decode_object(params, rng.standard_normal((6, DIMS.d_o)))
    assert np.all(labels == 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_linear_path_is_homogeneous(rng):
    p = EncoderParams.create(np.random.default_rng(1), DIMS, activation="none")
    for layer in [p.spatial_embed, *p.object_encoder.layers, *p.predicate_encoder.layers]:
        layer.b.value[:] = 0
    v, boxes, labels = _inputs(rng)
    g = semantic_features(p, labels).value

    def path(scale):
        with float64_oracle():
            s = embed_spatial(p, boxes * scale)
            o = encode_object(p, v * scale, s, g * scale)
            return encode_predicate(p, g * scale, o, v * scale).value

    np.testing.assert_allclose(path(2.5), 2.5 * path(1.0), rtol=1e-6, atol=1e-6)


def test_outputs_finite(params, rng):
    v, boxes, labels = _inputs(rng, n=5)
    assert np.isfinite(_full_path(params, v * 100, boxes, labels).value).all()


def test_object_loss_drops_on_separable_data():
    # object path alone; at the relation-head learning rate the weight-1 object
    # term barely moves in five epochs, so this run uses its own step size
    ds = generate_synthetic(GeneratorConfig(num_images=300, noise=0.05), seed=0)
    p = EncoderParams.create(np.random.default_rng(0), EncoderDims())
    last = []
    for _ in range(5):
        last = []
        for start in range(0, len(ds.images), 12):
            b = collate(ds.images[start:start + 12])
            for t in p.parameters():
                t.zero_grad()
            o = encode_object(p, b.visual, embed_spatial(p, b.bboxes), semantic_features(p, b.labels))
            loss = softmax_cross_entropy(decode_object(p, o)[0], b.labels)
            loss.backward()
            sgd_step(p.parameters(), 0.3)
            last.append(loss.item())
    assert np.mean(last) < np.log(EncoderDims().num_object_classes) / 2
