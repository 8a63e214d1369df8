import numpy as np
import pytest

from batchformer import tensor as T
from batchformer.batch_attention import BatchFormerConfig
from batchformer.harness.gradcheck import check_tensors
from batchformer.models import ModelConfig, build_model
from batchformer.seeds import SeedStreams
from batchformer.tensor import Tensor
from batchformer.twostream import (PipelineError, TwoStreamBatch, apply_insert, duplicate_labels,
                                   forward_backbone, forward_two_stream, strip_for_export,
                                   transformed_half, two_stream_loss)

pytestmark = pytest.mark.usefixtures("f64")


def _double(t):
    return t * 2.0


def _models(arch="vit", positions=(0, 2), bf_dropout=0.0, seed=3):
    cfg = ModelConfig(arch=arch, depth=3, dim=8, heads=2, patch=4, channels=1, height=8, width=8,
                      num_classes=3)
    bf = BatchFormerConfig(heads=2, dropout=bf_dropout, insert_positions=positions)
    return build_model(cfg, bf, SeedStreams(seed)), build_model(cfg, None, SeedStreams(seed))


def test_insert_inactive_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 2)))
    assert apply_insert(x, _double, active=False, is_first=True) is x


def test_first_insert_concatenates_original_first(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    out = apply_insert(x, _double, active=True, is_first=True)
    assert out.shape == (4, 3, 4)
    np.testing.assert_array_equal(out.data[:2], x.data)
    np.testing.assert_array_equal(out.data[2:], 2.0 * x.data)


def test_later_insert_transforms_second_half_only(rng):
    x = Tensor(rng.normal(size=(4, 3)))
    out = apply_insert(x, _double, active=True, is_first=False)
    np.testing.assert_array_equal(out.data[:2], x.data[:2])
    np.testing.assert_array_equal(out.data[2:], 2.0 * x.data[2:])


def test_later_insert_odd_extent_is_pipeline_error(rng):
    with pytest.raises(PipelineError):
        apply_insert(Tensor(rng.normal(size=(3, 2))), _double, active=True, is_first=False)
    with pytest.raises(PipelineError):
        TwoStreamBatch(Tensor(np.zeros((3, 2))), np.zeros(3), True)


def test_single_stream_replaces_in_place(rng):
    x = Tensor(rng.normal(size=(2, 3)))
    out = apply_insert(x, _double, active=True, is_first=True, single_stream=True)
    assert out.shape == (2, 3)
    np.testing.assert_array_equal(out.data, 2.0 * x.data)


def test_duplicate_labels():
    assert duplicate_labels(np.array([3, 1])).tolist() == [3, 1, 3, 1]
    assert len(duplicate_labels(np.arange(7))) == 14


def test_loss_is_mean_over_all_rows(rng):
    logits = Tensor(rng.normal(size=(4, 3)))
    labels = np.array([2, 0])
    full = T.cross_entropy(logits, np.array([2, 0, 2, 0])).item()
    assert two_stream_loss(logits, labels).item() == pytest.approx(full, abs=1e-15)
    assert check_tensors(lambda: two_stream_loss(logits, labels), [logits], rng) <= 1e-6
    logits.grad = None
    two_stream_loss(logits, labels).backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True)
    p[np.arange(4), [2, 0, 2, 0]] -= 1
    np.testing.assert_allclose(logits.grad, p / 4, atol=1e-15)


def test_loss_stream_weight(rng):
    logits = Tensor(rng.normal(size=(4, 3)))
    y = np.array([1, 2])
    a = T.cross_entropy(Tensor(logits.data[:2]), y).item()
    b = T.cross_entropy(Tensor(logits.data[2:]), y).item()
    assert two_stream_loss(logits, y, bf_weight=3.0).item() == pytest.approx((a + 3 * b) / 4)


def test_loss_dense_labels_duplicated(rng):
    logits = Tensor(rng.normal(size=(4, 5, 3)))
    y = rng.integers(0, 3, size=(2, 5))
    ref = T.cross_entropy(Tensor(logits.data.reshape(20, 3)), np.concatenate([y, y]).reshape(20)).item()
    assert two_stream_loss(logits, y).item() == pytest.approx(ref, abs=1e-15)
    with pytest.raises(PipelineError):
        two_stream_loss(logits, y[:1])


@pytest.mark.parametrize("arch", ["vit", "dense"])
def test_eval_forward_equals_baseline_bitwise(arch, rng):
    model, base = _models(arch, bf_dropout=0.5)
    model.eval(), base.eval()
    images = rng.normal(size=(5, 1, 8, 8))
    np.testing.assert_array_equal(forward_two_stream(model, images).data, base(images).data)


@pytest.mark.parametrize("arch", ["vit", "dense"])
def test_training_first_half_equals_baseline_at_every_layer(arch, rng):
    model, base = _models(arch)
    images = rng.normal(size=(4, 1, 8, 8))
    rec, ref = [], []
    logits = model(images, record=rec)
    base_logits = base(images, record=ref)
    for layer, (a, b) in enumerate(zip(rec, ref)):
        if a.shape[0] == 2 * b.shape[0]:
            a = a[: b.shape[0]]
        np.testing.assert_array_equal(a, b, err_msg=f"layer input {layer}")
    assert logits.shape[0] == 8
    np.testing.assert_array_equal(logits.data[:4], base_logits.data)


def test_pairing_integrity_with_tracer(rng):
    model, _ = _models(positions=(0, 1, 2))
    tokens = model.patch_embed(rng.normal(size=(3, 1, 8, 8)))
    tokens = Tensor(tokens.data + np.arange(3)[:, None, None] * 100.0)   # per-sample tracer offset
    rec = []
    forward_backbone(model, tokens, active=True, transform=lambda t, layer: t, record=rec)
    for h in rec:
        np.testing.assert_array_equal(h[:3], h[3:])


def test_minibatch_inference_returns_both_halves(rng):
    model, base = _models()
    model.eval()
    images = rng.normal(size=(4, 1, 8, 8))
    out = model(images, minibatch_inference=True).data
    assert out.shape == (8, 3)
    np.testing.assert_array_equal(out[:4], base.eval()(images).data)
    assert not np.array_equal(transformed_half(out), out[:4])


def test_strip_for_export(rng):
    model, base = _models(bf_dropout=0.5)
    model.eval()
    stripped = strip_for_export(model)
    assert stripped.batchformer is None
    assert stripped.num_parameters() == base.num_parameters()
    images = rng.normal(size=(3, 1, 8, 8))
    np.testing.assert_array_equal(stripped(images).data, model(images).data)
    stripped.patch_embed.pos_embed.data += 1.0
    assert not np.array_equal(stripped.patch_embed.pos_embed.data, model.patch_embed.pos_embed.data)


def test_parameter_count_is_baseline_plus_modules():
    model, base = _models(positions=(0, 1))
    assert model.num_parameters() == base.num_parameters() + model.batchformer.num_parameters()
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
