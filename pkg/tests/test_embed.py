import json
import struct

import numpy as np
import pytest
import torch

from egosync import artifacts
from egosync.data import POSITIVE
from egosync.embed import (EMBED_DIM, STREAM_DIM, EmbeddingExtractor, SemiSiameseNet, TrainConfig,
                           contrastive_loss, embed, forward_first, forward_third, load_model,
                           pair_distances, parameter_checksum, save_model, train)
from egosync.exceptions import (BatchMismatch, ConfigError, CorruptCheckpoint, NonFiniteLoss,
                                ShapeMismatch)
from egosync.flow import GradientFlow
from egosync.pipeline import build_bank, mine_pairs, split_records
from egosync.synthetic import generate_synthetic_dataset


def pair_at_distance(d, dim=EMBED_DIM, seed=0):
    g = torch.Generator().manual_seed(seed)
    z_f = torch.randn(1, dim, generator=g, dtype=torch.float64)
    u = torch.randn(1, dim, generator=g, dtype=torch.float64)
    return z_f, z_f + d * u / u.norm()


@pytest.mark.parametrize("y,d,expected", [(1, 0.0, 0.0), (0, 1.2, 0.0), (0, 0.4, 0.25),
                                          (1, 0.5, 0.25)])
def test_loss_table(y, d, expected):
    z_f, z_t = pair_at_distance(d)
    loss = contrastive_loss(z_f, z_t, torch.tensor([y]), margin=0.9)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_loss_sums_over_batch_and_is_symmetric(rng):
    z_f = torch.from_numpy(rng.normal(size=(8, 4)) * 0.3)
    z_t = torch.from_numpy(rng.normal(size=(8, 4)) * 0.3)
    y = torch.tensor([1, 0] * 4)
    per = contrastive_loss(z_f, z_t, y, reduction="none")
    assert contrastive_loss(z_f, z_t, y).item() == pytest.approx(per.sum().item())
    assert contrastive_loss(z_t, z_f, y).item() == pytest.approx(contrastive_loss(z_f, z_t, y).item())
    d = (z_f - z_t).norm(dim=1).numpy()
    m = 0.9
    manual = np.where(y.numpy() == 1, d**2, np.maximum(0, m - d) ** 2)
    np.testing.assert_allclose(per.numpy(), manual, rtol=1e-12)


def test_loss_monotone_in_distance():
    ds = np.linspace(0, 2, 41)
    neg = [contrastive_loss(*pair_at_distance(d), torch.tensor([0])).item() for d in ds]
    pos = [contrastive_loss(*pair_at_distance(d), torch.tensor([1])).item() for d in ds]
    assert np.all(np.diff(neg) <= 1e-15) and np.all(np.diff(pos) >= -1e-15)


def test_loss_batch_mismatch():
    with pytest.raises(BatchMismatch):
        contrastive_loss(torch.zeros(3, 4), torch.zeros(2, 4), torch.zeros(3))
    with pytest.raises(BatchMismatch):
        contrastive_loss(torch.zeros(3, 4), torch.zeros(3, 4), torch.zeros(2))


def test_loss_gradient_matches_finite_differences(rng):
    for k in range(10):
        z_f = torch.tensor(rng.normal(size=(4, 6)) * 0.4, requires_grad=True)
        z_t = torch.tensor(rng.normal(size=(4, 6)) * 0.4)
        y = torch.tensor(rng.integers(0, 2, size=4))
        assert (np.abs((z_f - z_t).norm(dim=1).detach().numpy() - 0.9) > 1e-3).all()
        assert torch.autograd.gradcheck(lambda a: contrastive_loss(a, z_t, y), (z_f,),
                                        eps=1e-6, atol=1e-8, rtol=1e-4)


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.margin, c.lr, c.momentum, c.weight_decay, c.epochs) == (0.9, 1e-4, 0.9, 5e-4, 2)
    assert c.backbone == "tiny" and c.normalize is False
    for bad in (dict(margin=0), dict(lr=-1), dict(epochs=0), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_architecture_shares_only_the_last_layer():
    net = SemiSiameseNet(image_size=16)
    assert net.first_head is net.third_head is net.shared
    assert (net.shared.in_features, net.shared.out_features) == (STREAM_DIM, EMBED_DIM)
    first = {id(p) for p in net.first_backbone.parameters()} | {id(p) for p in net.first_fc.parameters()}
    third = {id(p) for p in net.third_backbone.parameters()} | {id(p) for p in net.third_fc.parameters()}
    assert not first & third
    with pytest.raises(ConfigError):
        SemiSiameseNet("vgg")


def test_forward_contracts(rng):
    net = SemiSiameseNet(image_size=16).eval()
    stack = rng.normal(size=(16, 16, 23)).astype(np.float32)
    z1 = forward_first(net, stack)
    assert z1.shape == (64,)
    np.testing.assert_array_equal(z1, forward_first(net, stack))
    assert not np.allclose(z1, forward_third(net, stack))
    with pytest.raises(ShapeMismatch):
        forward_first(net, stack[..., :22])
    with pytest.raises(ShapeMismatch):
        net.forward_first(torch.zeros(1, 22, 16, 16))
    batch = rng.normal(size=(3, 16, 16, 23)).astype(np.float32)
    np.testing.assert_allclose(EmbeddingExtractor(net).transform(batch), embed(net, batch))
    np.testing.assert_allclose(embed(net, np.moveaxis(batch, -1, 1)), embed(net, batch))


def test_same_seed_same_init():
    a, b = SemiSiameseNet(seed=4), SemiSiameseNet(seed=4)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(a) != parameter_checksum(SemiSiameseNet(seed=5))


@pytest.fixture(scope="module")
def tiny_setup():
    ds = generate_synthetic_dataset(1, 2, 80, seed=0)
    bank = build_bank(ds, GradientFlow())
    pairs = mine_pairs(split_records(ds, "train"))
    return ds, bank, pairs


def small_config(**kw):
    params = dict(lr=1e-3, frames_per_pair=16, batch_size=16, seed=0)
    params.update(kw)
    return TrainConfig(**params)


def test_training_history_and_curriculum(tiny_setup, tmp_path):
    ds, bank, pairs = tiny_setup
    net = SemiSiameseNet(image_size=16)
    log = tmp_path / "log.jsonl"
    hist = train(net, pairs, bank, small_config(), log=log)
    assert not net.training
    e1 = [h for h in hist if h["epoch"] == 1]
    e2 = [h for h in hist if h["epoch"] == 2]
    assert e1 and e2
    assert sum(h["hard_negative"] for h in e1) == 0
    assert sum(h["easy_negative"] for h in e2) == 0
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert lines == hist
    assert [h["step"] for h in hist] == list(range(len(hist)))


def test_training_is_deterministic(tiny_setup):
    ds, bank, pairs = tiny_setup
    a, b = SemiSiameseNet(), SemiSiameseNet()
    ha = train(a, pairs, bank, small_config(epochs=1))
    hb = train(b, pairs, bank, small_config(epochs=1))
    assert ha == hb
    assert parameter_checksum(a) == parameter_checksum(b)


def test_zero_learning_rate_leaves_parameters(tiny_setup):
    ds, bank, pairs = tiny_setup
    net = SemiSiameseNet()
    before = parameter_checksum(net)
    hist = train(net, pairs, bank, small_config(lr=0.0, weight_decay=0.0, epochs=1))
    assert parameter_checksum(net) == before
    assert hist


def test_shared_layer_identical_through_both_handles_after_step(tiny_setup):
    ds, bank, pairs = tiny_setup
    net = SemiSiameseNet()
    w0 = net.shared.weight.detach().clone()
    train(net, pairs, bank, small_config(epochs=1, frames_per_pair=2))
    assert not torch.equal(w0, net.first_head.weight)
    assert torch.equal(net.first_head.weight, net.third_head.weight)


def test_single_positive_pair_overfits(tiny_setup):
    ds, bank, pairs = tiny_setup
    pos = [p for p in pairs if p.difficulty == POSITIVE][:1]
    net = SemiSiameseNet()
    hist = train(net, pos, bank, small_config(epochs=6, frames_per_pair=32, lr=3e-3),
                 schedule=lambda p, epoch: list(p))
    losses = np.array([h["loss"] / h["batch"] for h in hist])
    k = len(losses) // 3
    assert losses[-k:].mean() < 0.2 * losses[:k].mean()


def test_non_finite_loss_reports_step_and_pairs(tiny_setup):
    ds, bank, pairs = tiny_setup
    net = SemiSiameseNet()
    with torch.no_grad():
        net.shared.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss) as exc:
        train(net, pairs, bank, small_config(epochs=1))
    assert exc.value.step == 0 and exc.value.pair_ids


def test_pair_distances_groups(tiny_setup):
    ds, bank, pairs = tiny_setup
    d = pair_distances(SemiSiameseNet(), pairs, bank, stride=5)
    assert len(d.positive) and len(d.easy_negative) and len(d.hard_negative)
    assert len(d.negative) == len(d.easy_negative) + len(d.hard_negative)


def test_checkpoint_round_trip(tmp_path, tiny_setup, rng):
    ds, bank, pairs = tiny_setup
    net = SemiSiameseNet(seed=2)
    probe = rng.normal(size=(4, 16, 16, 23)).astype(np.float32)
    path = tmp_path / "m.ckpt"
    save_model(path, net, bank.stats)
    back, stats = load_model(path)
    assert np.abs(embed(back, probe) - embed(net, probe)).max() < 1e-6
    np.testing.assert_array_equal(stats.mean, bank.stats.mean)
    assert parameter_checksum(back) == parameter_checksum(net)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(path, SemiSiameseNet())
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_model(tmp_path / "trunc.ckpt")
    flipped = bytearray(raw)
    flipped[-10] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        load_model(tmp_path / "flip.ckpt")
    versioned = raw[:8] + struct.pack("<I", 7) + raw[12:]
    (tmp_path / "v7.ckpt").write_bytes(versioned)
    with pytest.raises(CorruptCheckpoint, match="version 7"):
        load_model(tmp_path / "v7.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CorruptCheckpoint):
        load_model(tmp_path / "junk.ckpt")
    artifacts.write_checkpoint(tmp_path / "other.ckpt", "regressor", {"w": np.zeros(2)})
    with pytest.raises(CorruptCheckpoint):
        load_model(tmp_path / "other.ckpt")
