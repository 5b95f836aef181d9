import numpy as np
import pytest

from crpsd import nn
from crpsd.nets import (
    FusionNet,
    FusionNetConfig,
    PixelNet,
    PixelNetConfig,
    RegionNet,
    RegionNetConfig,
    RegionSample,
    TrainedModel,
    fuse_forward,
    fusion_input,
    joint_loss_and_grads,
    pixel_forward,
    region_saliency,
    region_window,
    region_windows,
    train_joint,
    train_region_net,
)
from crpsd.regions import RegionPartition, centerline_superpixels, generate_regions
from crpsd.synthetic import toy_dataset

SMALL_PIXEL = PixelNetConfig(block_channels=(4, 6), convs_per_block=2, up_channels=2)
SMALL_REGION = RegionNetConfig(window_size=15, conv_channels=(4, 6), fc_widths=(8, 1))
SMALL_FUSION = FusionNetConfig(layers=((6, 3), (6, 3), (1, 3)))


def small_model(seed=0, dtype=np.float32):
    return TrainedModel.init(SMALL_PIXEL, SMALL_REGION, SMALL_FUSION, seed=seed, dtype=dtype)


def zeroed(params):
    for v in params.values():
        v[...] = 0


@pytest.fixture(scope="module")
def toy_samples():
    out = []
    for img, mask in toy_dataset(5, 32, seed=1):
        labels, feats, part = generate_regions(img, n=40)
        out.append(RegionSample(img, mask, labels, part, feats))
    return out


def test_default_configs():
    assert PixelNetConfig().block_channels == (16, 32, 64, 64)
    assert PixelNetConfig().convs_per_block == 2
    assert RegionNetConfig().window_size == 51
    assert RegionNetConfig().conv_channels == (16, 32, 64)
    assert RegionNetConfig().fc_widths == (64, 1)
    assert FusionNetConfig().layers == ((16, 3), (16, 3), (1, 3))
    with pytest.raises(ValueError):
        PixelNetConfig(block_channels=(8,))
    with pytest.raises(ValueError):
        RegionNetConfig(fc_widths=(8, 2))
    with pytest.raises(ValueError):
        FusionNetConfig(layers=((4, 3), (2, 3)))


@pytest.mark.parametrize("h,w", [(8, 8), (13, 21), (32, 9)])
def test_pixel_map_keeps_input_shape(h, w):
    img = np.random.default_rng(h * w).integers(0, 256, (h, w, 3)).astype(np.uint8)
    pmap = pixel_forward(small_model(), img)
    assert pmap.shape == (h, w)
    assert np.all((pmap >= 0) & (pmap <= 1))


def test_pixel_map_rejects_tiny_images():
    with pytest.raises(ValueError):
        pixel_forward(small_model(), np.zeros((3, 8, 3), dtype=np.uint8))


def test_default_pixel_net_shape():
    img = np.random.default_rng(0).integers(0, 256, (20, 36, 3)).astype(np.uint8)
    assert pixel_forward(TrainedModel.init(), img).shape == (20, 36)


def test_zero_weights_give_one_half():
    model = small_model()
    zeroed(model.pixel.params)
    zeroed(model.fusion.params)
    img = np.random.default_rng(1).integers(0, 256, (12, 12, 3)).astype(np.uint8)
    pmap = pixel_forward(model, img)
    assert np.all(pmap == 0.5)
    fused = fuse_forward(model, img, pmap, np.random.default_rng(2).random((12, 12)))
    assert fused.shape == (12, 12) and np.all(fused == 0.5)


def test_forward_passes_are_deterministic():
    img = np.random.default_rng(3).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    a, b = small_model(seed=5), small_model(seed=5)
    pa, pb = pixel_forward(a, img), pixel_forward(b, img)
    assert pa.tobytes() == pb.tobytes()
    r = np.random.default_rng(4).random((16, 16))
    assert fuse_forward(a, img, pa, r).tobytes() == fuse_forward(b, img, pb, r).tobytes()
    assert pixel_forward(small_model(seed=6), img).tobytes() != pa.tobytes()


def test_fusion_input_layout_and_errors():
    img = np.full((4, 5, 3), 255, dtype=np.uint8)
    x = fusion_input(img, np.zeros((4, 5)), np.ones((4, 5)))
    assert x.shape == (1, 5, 4, 5)
    assert np.all(x[0, :3] == 1) and np.all(x[0, 3] == 0) and np.all(x[0, 4] == 1)
    with pytest.raises(ValueError):
        fusion_input(img, np.zeros((4, 4)), np.ones((4, 5)))


def test_window_at_exact_center_is_the_image():
    img = np.random.default_rng(5).integers(0, 256, (9, 9, 3)).astype(np.uint8)
    assert np.array_equal(region_window(img, (4, 4), 9), img)


def test_window_at_corner():
    img = np.random.default_rng(6).integers(0, 256, (6, 6, 3)).astype(np.uint8)
    win = region_window(img, (0, 0), 11)  # side 2*5+1, no resampling
    assert np.array_equal(win[5:, 5:], img)
    fill = np.floor(img.reshape(-1, 3).mean(axis=0) + 0.5)
    assert np.all(win[:5] == fill) and np.all(win[:, :5] == fill)


def test_window_always_contains_the_image():
    rng = np.random.default_rng(7)
    img = rng.integers(0, 256, (7, 12, 3)).astype(np.uint8)
    for _ in range(30):
        cx, cy = int(rng.integers(0, 12)), int(rng.integers(0, 7))
        side = 2 * max(cx, 11 - cx, cy, 6 - cy) + 1
        win = region_window(img, (cx, cy), side)
        half = side // 2
        assert np.array_equal(win[half - cy : half - cy + 7, half - cx : half - cx + 12], img)
    with pytest.raises(ValueError):
        region_window(img, (12, 0), 5)


def test_single_region_map_is_constant():
    img = np.random.default_rng(8).integers(0, 256, (20, 20, 3)).astype(np.uint8)
    labels = np.arange(400).reshape(20, 20) // 100
    part = RegionPartition(np.zeros(4, dtype=np.int64), 1)
    rmap = region_saliency(small_model(), img, part, labels, m=3, seed=0)
    assert np.all(rmap == rmap[0, 0])


def test_identical_window_scores_paint_that_value():
    model = small_model()
    zeroed(model.region.params)
    model.region.params["fc1.bias"][...] = 0.7
    img = np.random.default_rng(9).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    labels = np.arange(256).reshape(16, 16) // 64
    part = RegionPartition(np.array([0, 0, 1, 1]), 2)
    rmap = region_saliency(model, img, part, labels, m=2, seed=0)
    assert np.all(rmap == rmap[0, 0])
    assert rmap[0, 0] == pytest.approx(1 / (1 + np.exp(-0.7)), abs=1e-7)


def test_region_map_matches_straight_line_oracle(toy_samples):
    model = small_model(seed=3)
    s = toy_samples[0]
    rmap = region_saliency(model, s.image, s.partition, s.labels, m=3, seed=11, features=s.features)
    chosen = centerline_superpixels(s.partition, s.labels, m=3, seed=11, features=s.features)
    h, w = s.labels.shape
    expect = np.zeros((h, w))
    for r, sps in enumerate(chosen):
        scores = []
        for sp in sps:
            cx = min(max(int(np.rint(s.features.xy[sp, 0])), 0), w - 1)
            cy = min(max(int(np.rint(s.features.xy[sp, 1])), 0), h - 1)
            win = region_window(s.image, (cx, cy), SMALL_REGION.window_size)
            scores.append(model.region.predict(win[None])[0])
        expect[s.partition.pixel_regions == r] = sum(scores) / len(scores)
    assert np.allclose(rmap, expect, atol=1e-6)


def test_region_maps_are_piecewise_constant(toy_samples):
    for seed in range(20):
        s = toy_samples[seed % len(toy_samples)]
        rmap = region_saliency(small_model(seed=seed), s.image, s.partition, s.labels, m=5, seed=seed, features=s.features)
        for r in range(s.partition.region_count):
            vals = rmap[s.partition.pixel_regions == r]
            assert np.all(vals == vals[0])


def test_region_windows_report_owners(toy_samples):
    s = toy_samples[1]
    wins, owner = region_windows(s.image, s.partition, s.labels, m=2, seed=0, out_size=15, features=s.features)
    assert wins.shape == (len(owner), 15, 15, 3) and wins.dtype == np.uint8
    assert set(owner.tolist()) == set(range(s.partition.region_count))


def test_region_training_reduces_loss(toy_samples):
    net = RegionNet.init(SMALL_REGION, np.random.default_rng(0))
    hist = train_region_net(toy_samples, net, epochs=30, seed=0, lr=1e-2)
    assert len(hist.losses) == 30
    assert hist.losses[-1] < 0.5 * hist.losses[0]


def test_region_training_is_reproducible(toy_samples):
    nets = [RegionNet.init(SMALL_REGION, np.random.default_rng(1)) for _ in range(2)]
    for net in nets:
        train_region_net(toy_samples[:2], net, epochs=3, seed=4)
    assert nn.dumps_params(nets[0].params) == nn.dumps_params(nets[1].params)
    with pytest.raises(ValueError):
        train_region_net([], nets[0], epochs=1)


def test_region_labels_are_binary_for_pure_regions():
    from crpsd.nets import _region_training_set

    img = np.zeros((16, 16, 3), dtype=np.uint8)
    img[:, 8:] = 200
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[:, 8:] = 1
    labels = (np.arange(16)[None, :] // 4).repeat(16, axis=0)
    part = RegionPartition(np.array([0, 0, 1, 1]), 2)
    _, targets = _region_training_set([RegionSample(img, mask, labels, part)], 5, 9, np.random.default_rng(0))
    assert set(targets.tolist()) == {0.0, 1.0}


def _with_region_maps(samples, model):
    out = []
    for s in samples:
        rmap = region_saliency(model, s.image, s.partition, s.labels, m=3, seed=0, features=s.features)
        out.append(RegionSample(s.image, s.mask, s.labels, s.partition, s.features, rmap))
    return out


def test_frozen_pixel_joint_training_is_fusion_only(toy_samples):
    model = small_model(seed=2)
    samples = _with_region_maps(toy_samples[:3], model)
    pixel_before = nn.dumps_params(model.pixel.params)
    ref = FusionNet(SMALL_FUSION, {k: v.copy() for k, v in model.fusion.params.items()})
    hist = train_joint(samples, model.pixel, model.fusion, epochs=3, seed=9, lr=1e-2, lam=0.0, train_pixel=False)

    # hand-written fusion-only loop with the same visiting order
    rng = np.random.default_rng(9)
    opt = nn.SGD(lr=1e-2, momentum=0.9, clip_norm=1.0)
    losses = []
    for _ in range(3):
        total = 0.0
        for i in rng.permutation(len(samples)):
            s = samples[i]
            pmap = pixel_forward(model, s.image)
            logits, caches = ref.forward(fusion_input(s.image, pmap, s.region_map))
            loss, _, dl = nn.balanced_xent_with_logits(logits[0, 0], s.mask.astype(bool))
            grads, _ = ref.backward(dl[None, None].astype(np.float32), caches)
            opt.step(ref.params, {k: v / s.mask.size for k, v in grads.items()})
            total += loss
        losses.append(total / len(samples))
    assert np.allclose(hist.losses, losses, rtol=1e-6)
    assert nn.dumps_params(model.pixel.params) == pixel_before
    for k, v in ref.params.items():
        assert np.allclose(model.fusion.params[k], v, rtol=1e-5, atol=1e-7)


def test_joint_training_leaves_region_net_alone(toy_samples):
    model = small_model(seed=4)
    samples = _with_region_maps(toy_samples[:2], model)
    before = nn.dumps_params(model.region.params)
    hist = train_joint(samples, model.pixel, model.fusion, epochs=2, seed=0)
    assert nn.dumps_params(model.region.params) == before
    assert len(hist.losses) == len(hist.pixel_losses) == len(hist.fusion_losses) == 2
    with pytest.raises(ValueError):
        train_joint([], model.pixel, model.fusion, epochs=1)
    with pytest.raises(ValueError):
        train_joint([RegionSample(*toy_samples[0].__dict__.values())], model.pixel, model.fusion, epochs=1)


def test_composite_gradient_check():
    model = small_model(seed=7, dtype=np.float64)
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:6, 3:7] = 1
    rmap = rng.random((8, 8))
    flat = {k: v for k, v in model.all_params().items() if not k.startswith("region/")}
    assert sum(v.size for v in flat.values()) <= 10_000

    def loss_fn(_):
        total, _, _, grads = joint_loss_and_grads(img, mask, rmap, model.pixel, model.fusion, lam=1.0)
        return total, grads

    report = nn.grad_check(loss_fn, flat, fraction=0.05, step=1e-5, seed=1)
    assert report.max_error < 1e-4
    assert any(k.startswith("pixel/") for k in report.by_parameter())
    assert any(k.startswith("fusion/") for k in report.by_parameter())


def test_params_prefix_round_trip():
    model = small_model()
    parts = TrainedModel.split_params(model.all_params())
    assert set(parts) == {"pixel", "region", "fusion"}
    assert parts["pixel"].keys() == model.pixel.params.keys()
    with pytest.raises(nn.ModelFormatError):
        TrainedModel.split_params({"other/w": np.zeros(1)})


def test_parameter_counts_of_default_nets():
    model = TrainedModel.init()
    pixel = sum(v.size for v in model.pixel.params.values())
    region = sum(v.size for v in model.region.params.values())
    fusion = sum(v.size for v in model.fusion.params.values())
    assert 1e5 <= pixel <= 5e5 and 1e5 <= region <= 5e5
    assert fusion == 5 * 16 * 9 + 16 + 16 * 16 * 9 + 16 + 16 * 9 + 1
    assert isinstance(PixelNet.init(SMALL_PIXEL, np.random.default_rng(0)), PixelNet)
