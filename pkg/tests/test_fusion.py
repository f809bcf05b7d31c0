import numpy as np
import pytest

from cftmal.fusion import (
    FusionModel,
    MultimodalSample,
    TeacherModel,
    batch_arrays,
    init_fusion,
    init_teacher,
    teacher_train,
)
from cftmal.numeric import DenseLayer, ShapeError


def tiny_fusion(rng):
    """Small-width model so finite differences stay cheap."""
    attr_branch = [
        DenseLayer(rng.standard_normal((4, 3)) * 0.5, rng.standard_normal(4), "relu"),
        DenseLayer(rng.standard_normal((3, 4)) * 0.5, rng.standard_normal(3), "relu"),
    ]
    emb_branch = [DenseLayer(rng.standard_normal((3, 5)) * 0.5, rng.standard_normal(3), "identity")]
    fusion = DenseLayer(rng.standard_normal((4, 6)) * 0.5, rng.standard_normal(4), "relu")
    classifier = DenseLayer(rng.standard_normal((3, 4)) * 0.5, rng.standard_normal(3), "identity")
    return FusionModel(attr_branch, emb_branch, fusion, classifier)


def fd_param_grads(loss_fn, params, h=1e-6):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_fusion_shapes_and_branch_check():
    rng = np.random.default_rng(0)
    model = tiny_fusion(rng)
    attrs = rng.standard_normal((7, 3))
    embs = rng.standard_normal((7, 5))
    logits = model.forward(attrs, embs)
    assert logits.shape == (7, 3)
    assert model.attr_dim == 3 and model.emb_dim == 5 and model.n_classes == 3
    with pytest.raises(ShapeError):
        FusionModel(model.attr_branch, model.emb_branch,
                    DenseLayer(np.zeros((4, 7)), np.zeros(4), "relu"),
                    model.classifier)


def test_fusion_grads_match_fd():
    rng = np.random.default_rng(1)
    model = tiny_fusion(rng)
    attrs = rng.standard_normal((6, 3))
    embs = rng.standard_normal((6, 5))
    labels = rng.integers(0, 3, 6)
    _, grads = model.loss_and_grads(attrs, embs, labels)
    fd = fd_param_grads(lambda: model.loss_and_grads(attrs, embs, labels)[0],
                        model.get_params())
    for g, f in zip(grads, fd):
        assert np.abs(g - f).max() < 1e-5 * max(1.0, np.abs(f).max())


def test_fusion_hvp_matches_fd_of_gradient():
    rng = np.random.default_rng(2)
    model = tiny_fusion(rng)
    attrs = rng.standard_normal((5, 3))
    embs = rng.standard_normal((5, 5))
    labels = rng.integers(0, 3, 5)
    params = model.get_params()
    vec = [rng.standard_normal(p.shape) for p in params]
    hv = model.hvp(attrs, embs, labels, vec)
    h = 1e-6
    up_params = [p + h * v for p, v in zip(params, vec)]
    down_params = [p - h * v for p, v in zip(params, vec)]
    model.set_params(up_params)
    _, gu = model.loss_and_grads(attrs, embs, labels)
    model.set_params(down_params)
    _, gd = model.loss_and_grads(attrs, embs, labels)
    model.set_params(params)
    for hvi, u, d in zip(hv, gu, gd):
        fd = (u - d) / (2 * h)
        assert np.abs(hvi - fd).max() < 1e-4 * max(1.0, np.abs(fd).max())


def test_fusion_clone_is_independent():
    rng = np.random.default_rng(3)
    model = tiny_fusion(rng)
    clone = model.clone()
    clone.attr_branch[0].weights[:] = 0.0
    assert np.abs(model.attr_branch[0].weights).max() > 0.0


def test_fusion_save_load(tmp_path):
    model = init_fusion(attr_dim=6, emb_dim=4, n_classes=5, seed=4)
    rng = np.random.default_rng(5)
    attrs = rng.standard_normal((3, 6))
    embs = rng.standard_normal((3, 4))
    path = tmp_path / "m.fus1"
    model.save(path)
    back = FusionModel.load(path)
    ref = model.clone()
    for layer in ref.attr_branch + ref.emb_branch + ref.head:
        layer.weights = layer.weights.astype(np.float32).astype(np.float64)
        layer.bias = layer.bias.astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(back.forward(attrs, embs), ref.forward(attrs, embs))


def test_teacher_ignores_embeddings():
    teacher = init_teacher(attr_dim=4, n_classes=3, seed=6)
    rng = np.random.default_rng(7)
    attrs = rng.standard_normal((5, 4))
    a = teacher.forward(attrs, rng.standard_normal((5, 9)))
    b = teacher.forward(attrs, None)
    np.testing.assert_array_equal(a, b)


def test_teacher_grads_match_fd():
    teacher = init_teacher(attr_dim=3, n_classes=3, seed=8)
    rng = np.random.default_rng(9)
    attrs = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, 6)
    _, grads = teacher.loss_and_grads(attrs, None, labels)
    fd = fd_param_grads(lambda: teacher.loss_and_grads(attrs, None, labels)[0],
                        teacher.get_params())
    for g, f in zip(grads, fd):
        assert np.abs(g - f).max() < 1e-5 * max(1.0, np.abs(f).max())


def test_teacher_train_learns_separable_data():
    rng = np.random.default_rng(10)
    pool = []
    for c in range(3):
        center = np.zeros(6)
        center[c * 2] = 3.0
        for i in range(30):
            pool.append(MultimodalSample(
                f"c{c}-{i}", center + 0.3 * rng.standard_normal(6), np.zeros(1), c
            ))
    teacher, trace = teacher_train(pool, n_classes=3, attr_dim=6, lr=1e-2,
                                   epochs=15, seed=11)
    assert trace[-1] > 0.95
    assert trace[-1] >= trace[0]


def test_teacher_save_load(tmp_path):
    teacher = init_teacher(attr_dim=5, n_classes=4, seed=12)
    path = tmp_path / "t.tch1"
    teacher.save(path)
    back = TeacherModel.load(path)
    rng = np.random.default_rng(13)
    attrs = rng.standard_normal((4, 5))
    ref = teacher.clone()
    for layer in ref.layers:
        layer.weights = layer.weights.astype(np.float32).astype(np.float64)
        layer.bias = layer.bias.astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(back.forward(attrs), ref.forward(attrs))


def test_batch_arrays():
    pool = [MultimodalSample("a", np.ones(2), np.zeros(3), 1),
            MultimodalSample("b", np.ones(2) * 2, np.ones(3), 0)]
    attrs, embs, labels = batch_arrays(pool)
    assert attrs.shape == (2, 2) and embs.shape == (2, 3)
    assert labels.tolist() == [1, 0] and labels.dtype == np.int64
