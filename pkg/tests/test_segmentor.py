import math

import numpy as np
import pytest

from reflect_tta.autodiff import Adam, Tensor, checkpoint
from reflect_tta.data import SceneSpec, make_split
from reflect_tta.errors import DataError, ShapeError
from reflect_tta.segmentor import (
    Segmentor,
    SegmentorConfig,
    argmax_mask,
    cross_entropy_loss,
    evaluate,
    heatmap_from_probs,
    label_intensities,
    load_segmentor,
    one_hot,
    seg_forward,
    train_segmentor,
)
from reflect_tta.synthesizer import label_heatmap

TINY = SegmentorConfig(base_channels=4, depth=2)
SMALL_SCENE = SceneSpec(size=32, radius_range=(6.0, 9.0), thickness_range=(2.0, 3.0), center_jitter=3.0)


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_zeroed_head_gives_uniform_probabilities():
    model = Segmentor(TINY)
    model.net.head.zero_init()
    p = seg_forward(model, np.random.default_rng(0).uniform(size=(16, 16)))
    np.testing.assert_allclose(p.data, 1 / 3, atol=1e-7)


def test_probabilities_sum_to_one():
    model = Segmentor(TINY, seed=2)
    p = seg_forward(model, np.random.default_rng(1).uniform(size=(1, 1, 32, 16)))
    assert p.shape == (1, 3, 32, 16)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)


def test_input_extents_must_fit_depth():
    with pytest.raises(ShapeError):
        seg_forward(Segmentor(TINY), np.zeros((18, 16)))


def test_heatmap_cases():
    p = Tensor(np.stack([np.zeros((4, 4)), np.ones((4, 4))])[None])
    np.testing.assert_array_equal(heatmap_from_probs(p, (0, 255)).data, 255.0)
    uniform = Tensor(np.full((1, 4, 3, 3), 0.25))
    np.testing.assert_allclose(heatmap_from_probs(uniform, (0, 85, 170, 255)).data, 127.5)
    with pytest.raises(ShapeError):
        heatmap_from_probs(uniform, label_intensities(3))


def test_heatmap_of_one_hot_is_coded_label():
    label = np.random.default_rng(3).integers(0, 3, size=(8, 8))
    heat = heatmap_from_probs(Tensor(one_hot(label, 3)[None]), label_intensities(3))
    assert np.array_equal(heat.data[0, 0], label_heatmap(label, 3).astype(heat.data.dtype))
    assert np.array_equal(label_heatmap(label, 3), np.array([0.0, 127.5, 255.0])[label])


def test_argmax_cases():
    label = np.random.default_rng(4).integers(0, 3, size=(5, 6))
    assert np.array_equal(argmax_mask(one_hot(label, 3)[None]), label)
    assert not argmax_mask(np.full((1, 3, 4, 4), 1 / 3)).any()
    p = np.random.default_rng(5).uniform(size=(1, 3, 5, 6))
    mask = argmax_mask(p)
    for y in range(5):
        for x in range(6):
            vals = list(p[0, :, y, x])
            assert mask[y, x] == vals.index(max(vals))


def test_cross_entropy_cases():
    label = np.random.default_rng(6).integers(0, 3, size=(6, 6))
    assert cross_entropy_loss(Tensor(one_hot(label, 3)[None]), label).item() < 1e-5
    uniform = Tensor(np.full((1, 3, 6, 6), 1 / 3))
    assert cross_entropy_loss(uniform, label).item() == pytest.approx(math.log(3), rel=1e-6)
    p = softmax(np.random.default_rng(7).normal(size=(1, 3, 6, 6)))
    expected = 0.0
    for y in range(6):
        for x in range(6):
            expected -= math.log(p[0, label[y, x], y, x])
    assert cross_entropy_loss(Tensor(p), label).item() == pytest.approx(expected / 36, rel=1e-5)
    with pytest.raises(DataError):
        cross_entropy_loss(uniform, np.full((6, 6), 3))


def test_zero_learning_rate_leaves_parameters():
    sample = make_split(SMALL_SCENE, 1, 0)
    model = Segmentor(TINY)
    before = model.state_dict()
    train_segmentor(TINY, sample, [], epochs=1, lr=0.0, batch_size=1, model=model)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_loss_decreases_on_fixed_batch():
    samples = make_split(SMALL_SCENE, 4, 1)
    x = Tensor(np.stack([s.image for s in samples])[:, None])
    y = np.stack([s.label for s in samples])
    model = Segmentor(TINY, seed=3)
    opt = Adam(model.parameters(), lr=1e-3)
    losses = []
    for _ in range(6):
        opt.zero_grad()
        loss = cross_entropy_loss(seg_forward(model, x), y)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_outputs_resume_and_best_selection(tmp_path):
    train, val = make_split(SMALL_SCENE, 8, 0, "train"), make_split(SMALL_SCENE, 4, 0, "val")
    model, history = train_segmentor(TINY, train, val, epochs=0, out_dir=tmp_path)
    assert len(history) == 1 and history[0]["epoch"] == 0
    assert (tmp_path / "seg.ckpt").exists()
    assert len((tmp_path / "seg_train.csv").read_text().splitlines()) == 2

    model, history = train_segmentor(TINY, train, val, epochs=3, lr=3e-3, batch_size=4, out_dir=tmp_path)
    resumed = load_segmentor(tmp_path / "seg_last.ckpt", TINY)
    _, more = train_segmentor(TINY, train, val, epochs=2, lr=3e-3, batch_size=4, out_dir=tmp_path, model=resumed,
                              start_epoch=3, initial_best=(max(h["val_dice_mean"] for h in history), model.state_dict()))
    rows = [line.split(",") for line in (tmp_path / "seg_train.csv").read_text().splitlines()[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4, 5]

    best = max(history + more, key=lambda h: h["val_dice_mean"])
    chosen = load_segmentor(tmp_path / "seg.ckpt", TINY)
    assert evaluate(chosen, val, 3)[0] == pytest.approx(best["val_dice_mean"], abs=1e-6)


def test_checkpoint_round_trip(tmp_path):
    model = Segmentor(TINY, seed=9)
    checkpoint.save(tmp_path / "m.ckpt", model.state_dict())
    loaded = load_segmentor(tmp_path / "m.ckpt", TINY)
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert np.array_equal(seg_forward(model, x).data, seg_forward(loaded, x).data)
