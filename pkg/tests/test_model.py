import numpy as np
import pytest
import torch

from ichseq.errors import ConfigError
from ichseq.model import (
    ModelConfig,
    SequenceBatch,
    SliceSequenceModel,
    TinyConvBackbone,
    build_backbone,
    build_model,
    collate_scans,
)

torch.manual_seed(0)


def tiny_config(**overrides):
    base = dict(
        backbone="tiny",
        feature_dim=16,
        lstm_hidden=8,
        lstm_layers=1,
        input_size=(16, 16),
    )
    base.update(overrides)
    return ModelConfig(**base)


def sequence_head_param_count(feature_dim, hidden, layers, num_classes):
    """Closed-form parameter count of the bi-LSTM + linear head."""
    total = 0
    for layer in range(layers):
        d_in = feature_dim if layer == 0 else 2 * hidden
        total += 2 * (4 * hidden * (d_in + hidden) + 8 * hidden)  # x2 for both directions
    total += 2 * hidden * num_classes + num_classes
    return total


def actual_head_params(model):
    return sum(p.numel() for p in model.lstm.parameters()) + sum(
        p.numel() for p in model.head.parameters()
    )


def test_sequence_head_param_count_full_scale():
    cfg = ModelConfig(backbone="tiny", feature_dim=2048, lstm_hidden=512, lstm_layers=2)
    model = build_model(cfg)
    assert sequence_head_param_count(2048, 512, 2, 6) == 16_799_750
    assert actual_head_params(model) == 16_799_750


@pytest.mark.parametrize("dims", [(64, 32, 1), (20, 8, 3), (16, 8, 2)])
def test_sequence_head_param_count_formula(dims):
    d, h, layers = dims
    model = build_model(tiny_config(feature_dim=d, lstm_hidden=h, lstm_layers=layers))
    assert actual_head_params(model) == sequence_head_param_count(d, h, layers, 6)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=5)
    with pytest.raises(ConfigError):
        ModelConfig(lstm_layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        build_backbone(ModelConfig(backbone="vgg"))
    with pytest.raises(ConfigError):
        build_backbone(ModelConfig(backbone="resnet50", feature_dim=7))


def test_tiny_backbone_output_shape():
    net = TinyConvBackbone(24)
    out = net(torch.rand(5, 3, 32, 32))
    assert out.shape == (5, 24)


def make_scans(rng, lengths, h=16, w=16, with_labels=True):
    scans = []
    for n in lengths:
        imgs = rng.random((n, 3, h, w)).astype(np.float32)
        labs = rng.integers(0, 2, size=(n, 6)).astype(np.float32) if with_labels else None
        scans.append((imgs, labs))
    return scans


def test_collate_scans_pads_and_masks():
    rng = np.random.default_rng(1)
    scans = make_scans(rng, [3, 5, 2])
    batch = collate_scans(scans, study_ids=["a", "b", "c"])
    assert batch.images.shape == (3, 5, 3, 16, 16)
    assert batch.labels.shape == (3, 5, 6)
    assert batch.lengths.tolist() == [3, 5, 2]
    assert batch.n_valid == 10
    assert batch.study_ids == ["a", "b", "c"]
    assert batch.label_mask.tolist() == [
        [True, True, True, False, False],
        [True, True, True, True, True],
        [True, True, False, False, False],
    ]
    # padding is exactly zero
    assert torch.all(batch.images[0, 3:] == 0)
    assert torch.all(batch.labels[2, 2:] == 0)
    # valid content round-trips
    assert np.allclose(batch.images[0, :3].numpy(), scans[0][0])
    assert np.allclose(batch.labels[1].numpy(), scans[1][1])


def test_collate_scans_without_labels():
    rng = np.random.default_rng(2)
    batch = collate_scans(make_scans(rng, [2, 4], with_labels=False))
    assert torch.all(batch.labels == 0)
    assert batch.study_ids == ["scan0", "scan1"]
    with pytest.raises(ValueError):
        collate_scans([])


def test_sequence_batch_validates_mask():
    images = torch.zeros(2, 3, 3, 4, 4)
    lengths = torch.tensor([2, 3])
    labels = torch.zeros(2, 3, 6)
    good_mask = torch.arange(3).unsqueeze(0) < lengths.unsqueeze(1)
    SequenceBatch(images, lengths, labels, good_mask)
    with pytest.raises(ValueError):
        SequenceBatch(images, lengths, labels, torch.ones(2, 3, dtype=torch.bool))
    with pytest.raises(ValueError):
        SequenceBatch(images, torch.tensor([0, 3]), labels, good_mask)
    with pytest.raises(ValueError):
        SequenceBatch(images, torch.tensor([2, 4]), labels, good_mask)


def test_padding_cannot_influence_valid_outputs():
    torch.manual_seed(3)
    model = build_model(tiny_config()).eval()
    rng = np.random.default_rng(4)
    batch = collate_scans(make_scans(rng, [5, 3]))
    with torch.no_grad():
        base = model(batch)

    poisoned = SequenceBatch(
        images=batch.images.clone(),
        lengths=batch.lengths,
        labels=batch.labels,
        label_mask=batch.label_mask,
        study_ids=batch.study_ids,
    )
    poisoned.images[1, 3:] = 1e6  # garbage where scan 1 is padded
    with torch.no_grad():
        out = model(poisoned)

    assert torch.equal(out[0], base[0])
    assert torch.equal(out[1, :3], base[1, :3])


def test_padded_feature_rows_are_zero():
    torch.manual_seed(5)
    model = build_model(tiny_config())
    rng = np.random.default_rng(6)
    batch = collate_scans(make_scans(rng, [4, 2]))
    feats = model.extract_features(batch.images, batch.lengths)
    assert feats.shape == (2, 4, 16)
    assert torch.all(feats[1, 2:] == 0)
    assert not torch.all(feats[1, :2] == 0)


def test_extract_features_agrees_with_unmasked_path():
    torch.manual_seed(7)
    model = build_model(tiny_config()).eval()
    rng = np.random.default_rng(8)
    batch = collate_scans(make_scans(rng, [3, 3]))  # equal lengths: no padding
    with torch.no_grad():
        masked = model.extract_features(batch.images, batch.lengths)
        folded = model.extract_features(batch.images, None)
    assert torch.allclose(masked, folded, atol=1e-6)


def test_batch_composition_does_not_change_logits():
    torch.manual_seed(9)
    model = build_model(tiny_config()).eval()
    rng = np.random.default_rng(10)
    scans = make_scans(rng, [4, 2, 6])
    with torch.no_grad():
        together = model(collate_scans(scans))
        alone = [model(collate_scans([sc])) for sc in scans]
    for i, (imgs, _) in enumerate(scans):
        n = imgs.shape[0]
        assert torch.allclose(together[i, :n], alone[i][0, :n], atol=1e-5)


def test_predict_proba_bounds_and_mode_restore():
    torch.manual_seed(11)
    model = build_model(tiny_config(dropout=0.25, lstm_layers=2))
    model.train()
    rng = np.random.default_rng(12)
    batch = collate_scans(make_scans(rng, [3]))
    probs = model.predict_proba(batch)
    assert model.training  # restored
    assert probs.shape == (1, 3, 6)
    assert torch.all(probs > 0) and torch.all(probs < 1)


def test_sequence_head_validates_inputs():
    model = build_model(tiny_config())
    feats = torch.zeros(2, 4, 16)
    with pytest.raises(ValueError):
        model.sequence_head(torch.zeros(2, 4, 7), torch.tensor([4, 4]))
    with pytest.raises(ValueError):
        model.sequence_head(feats, torch.tensor([5, 4]))


def test_gradients_flow_to_all_parameters():
    torch.manual_seed(13)
    model = build_model(tiny_config())
    rng = np.random.default_rng(14)
    batch = collate_scans(make_scans(rng, [3, 2]))
    logits = model(batch)
    loss = (logits[batch.label_mask] ** 2).mean()
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.any(p.grad != 0), name
