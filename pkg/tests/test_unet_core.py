import numpy as np
import pytest
import torch
from conftest import make_blobs

from hsi_data import LabeledPixelSet
from patching import PatchDataset
from unet_core import (
    TrainConfig,
    UNetSpec,
    build_unet,
    classification_summary,
    compute_gradients,
    count_trainable_parameters,
    labels_from_probabilities,
    load_checkpoint,
    overall_accuracy,
    predict,
    save_checkpoint,
    train,
    weighted_loss,
)
from utils.errors import DimensionError, DivergenceError, LabelError, MetricError, SpecError


def pixel_set(samples, labels) -> LabeledPixelSet:
    coords = np.stack([np.arange(len(labels)), np.zeros(len(labels), dtype=int)], axis=1)
    return LabeledPixelSet(np.asarray(samples, dtype=np.float32), np.asarray(labels), coords)


def test_reference_configuration_parameter_count():
    net = build_unet(UNetSpec(input_spatial=(1, 1), input_features=30, num_classes=9))
    assert count_trainable_parameters(net) == 1_435_337


def test_patch_input_keeps_parameter_count():
    net = build_unet(UNetSpec(input_spatial=(10, 10), input_features=30, num_classes=9))
    assert count_trainable_parameters(net) == 1_435_337
    x = torch.zeros(2, 30, 10, 10)
    net.network.eval()
    assert net.network.logit_map(x).shape == (2, 9, 10, 10)
    assert net.network(x).shape == (2, 9)


def test_build_rejects_single_class():
    with pytest.raises(SpecError):
        build_unet(UNetSpec(num_classes=1))


def test_probabilities_are_normalized():
    rng = np.random.default_rng(0)
    net = build_unet(UNetSpec(input_features=8, num_classes=4), seed=1)
    data = pixel_set(rng.standard_normal((50, 8)), rng.integers(1, 5, 50))
    labels, probabilities = predict(net, data)
    assert probabilities.shape == (50, 4)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-6)
    assert labels.min() >= 1 and labels.max() <= 4


def test_inference_is_deterministic():
    net = build_unet(UNetSpec(input_features=5, num_classes=3))
    data = pixel_set(np.ones((2, 5)), [1, 1])
    labels, probabilities = predict(net, data)
    np.testing.assert_array_equal(probabilities[0], probabilities[1])
    again, _ = predict(net, data)
    np.testing.assert_array_equal(labels, again)


def test_single_epoch_records_one_loss():
    samples, labels = make_blobs(20, 2, 6)
    net = train(build_unet(UNetSpec(input_features=6, num_classes=2)), pixel_set(samples, labels),
                TrainConfig(epochs=1))
    assert net.epochs_trained == 1
    assert len(net.epoch_times) == 1


def test_training_leaves_the_input_network_untouched():
    samples, labels = make_blobs(20, 2, 6)
    untrained = build_unet(UNetSpec(input_features=6, num_classes=2), seed=1)
    before = {name: p.detach().clone() for name, p in untrained.network.named_parameters()}
    trained = train(untrained, pixel_set(samples, labels), TrainConfig(epochs=2, learning_rate=1e-2, batch_size=8))
    assert trained.network is not untrained.network
    assert untrained.loss_history == []
    assert trained.epochs_trained == 2
    for name, parameter in untrained.network.named_parameters():
        assert torch.equal(parameter, before[name])
    assert any(not torch.equal(p, before[name]) for name, p in trained.network.named_parameters())


def test_training_is_seeded():
    samples, labels = make_blobs(30, 3, 6, seed=2)
    data = pixel_set(samples, labels)
    spec = UNetSpec(input_features=6, num_classes=3)
    a = train(build_unet(spec, seed=4), data, TrainConfig(epochs=3, batch_size=16, seed=4))
    b = train(build_unet(spec, seed=4), data, TrainConfig(epochs=3, batch_size=16, seed=4))
    assert a.loss_history == b.loss_history


def test_separable_classes_are_learned():
    samples, labels = make_blobs(250, 2, 30, seed=3)
    data = pixel_set(samples, labels)
    net = train(build_unet(UNetSpec(input_features=30, num_classes=2)), data, TrainConfig(epochs=50, batch_size=32))
    predicted, _ = predict(net, data)
    assert overall_accuracy(predicted, labels) > 0.95


@pytest.mark.slow
def test_random_labels_can_be_memorized():
    rng = np.random.default_rng(5)
    data = pixel_set(rng.standard_normal((100, 30)), rng.integers(1, 10, 100))
    net = train(build_unet(UNetSpec(input_features=30, num_classes=9)), data,
                TrainConfig(epochs=500, learning_rate=1e-3, batch_size=32))
    predicted, _ = predict(net, data)
    assert overall_accuracy(predicted, data.labels) >= 0.99


def test_patch_training_runs():
    rng = np.random.default_rng(6)
    patches = rng.standard_normal((12, 3, 3, 4)).astype(np.float32)
    data = PatchDataset(patches, rng.integers(1, 3, 12), np.zeros((12, 2), dtype=int))
    net = train(build_unet(UNetSpec(input_spatial=(3, 3), input_features=4, num_classes=2)), data,
                TrainConfig(epochs=2, batch_size=4))
    labels, _ = predict(net, data)
    assert labels.shape == (12,)


def test_nan_loss_is_divergence():
    samples = np.full((8, 4), np.nan, dtype=np.float32)
    with pytest.raises(DivergenceError):
        train(build_unet(UNetSpec(input_features=4, num_classes=2)), pixel_set(samples, [1, 2] * 4),
              TrainConfig(epochs=1))


@pytest.mark.parametrize("bad", [0, 3])
def test_labels_out_of_range(bad):
    labels = np.array([1, 2, 1, bad])
    with pytest.raises(LabelError):
        train(build_unet(UNetSpec(input_features=4, num_classes=2)), pixel_set(np.zeros((4, 4)), labels),
              TrainConfig(epochs=1))


def test_feature_mismatch():
    net = build_unet(UNetSpec(input_features=4, num_classes=2))
    with pytest.raises(DimensionError):
        predict(net, pixel_set(np.zeros((3, 5)), [1, 1, 2]))
    with pytest.raises(DimensionError):
        predict(net, np.zeros((3, 2, 2, 4), dtype=np.float32))


def test_loss_weight_scales_gradients_linearly():
    samples, labels = make_blobs(5, 2, 6, seed=7)
    data = pixel_set(samples, labels)
    net = build_unet(UNetSpec(input_features=6, num_classes=2), seed=3)
    net.network.double()
    base = compute_gradients(net, data, loss_weight=1.0)
    scaled = compute_gradients(net, data, loss_weight=2.5)
    assert base.keys() == scaled.keys()
    for name, grad in base.items():
        np.testing.assert_allclose(scaled[name].numpy(), 2.5 * grad.numpy(), rtol=1e-6, atol=1e-12)


def test_output_layer_gradients_match_finite_differences():
    samples, labels = make_blobs(5, 2, 6, seed=8)
    assert len(samples) == 10
    data = pixel_set(samples, labels)
    net = build_unet(UNetSpec(input_features=6, num_classes=2), seed=9)
    network = net.network.double()
    grads = compute_gradients(net, data)

    x = torch.from_numpy(samples.astype(np.float64))[:, :, None, None]
    y = torch.from_numpy(labels - 1)
    parameter = network.deconv1.weight
    analytic = grads["deconv1.weight"]
    eps = 1e-6
    rng = np.random.default_rng(0)
    flat_indices = rng.choice(parameter.numel(), size=10, replace=False)
    with torch.no_grad():
        for flat in flat_indices:
            index = np.unravel_index(flat, parameter.shape)
            original = parameter[index].item()
            parameter[index] = original + eps
            plus = weighted_loss(network(x), y, 1.0).item()
            parameter[index] = original - eps
            minus = weighted_loss(network(x), y, 1.0).item()
            parameter[index] = original
            numeric = (plus - minus) / (2 * eps)
            assert numeric == pytest.approx(analytic[index].item(), rel=1e-4, abs=1e-8)


def test_labels_from_probabilities():
    np.testing.assert_array_equal(labels_from_probabilities([[0.1, 0.7, 0.2]]), [2])
    np.testing.assert_array_equal(labels_from_probabilities([[0.5, 0.5]]), [1])


@pytest.mark.parametrize(
    "pred, truth, expected",
    [([1, 2, 3, 4], [1, 2, 3, 4], 1.0), ([2, 3, 4, 1], [1, 2, 3, 4], 0.0), ([1, 2, 3, 4], [1, 2, 0, 4], 0.75)],
)
def test_overall_accuracy(pred, truth, expected):
    assert overall_accuracy(pred, truth) == pytest.approx(expected)


def test_overall_accuracy_errors():
    with pytest.raises(MetricError):
        overall_accuracy([], [])
    with pytest.raises(MetricError):
        overall_accuracy([1, 2], [1])


def test_classification_summary():
    summary = classification_summary(np.array([1, 1, 2, 2]), np.array([1, 1, 2, 2]), 3)
    assert summary == {"overall_accuracy": 1.0, "average_accuracy": 1.0, "kappa": 1.0}
    summary = classification_summary(np.array([1, 1, 1, 2]), np.array([1, 1, 2, 2]), 2)
    assert summary["overall_accuracy"] == pytest.approx(0.75)
    assert summary["average_accuracy"] == pytest.approx(0.75)
    assert summary["kappa"] == pytest.approx(0.5)


def test_checkpoint_roundtrip(tmp_path):
    samples, labels = make_blobs(10, 2, 5)
    data = pixel_set(samples, labels)
    net = train(build_unet(UNetSpec(input_features=5, num_classes=2)), data, TrainConfig(epochs=2))
    loaded = load_checkpoint(save_checkpoint(tmp_path / "unet.pt", net))
    assert loaded.loss_history == net.loss_history
    np.testing.assert_allclose(predict(loaded, data)[1], predict(net, data)[1], rtol=1e-6)
