import numpy as np
import pytest

from sparsesplat.data import Dataset, View
from sparsesplat.errors import InvalidInputError, NumericalError
from sparsesplat.gaussians import GaussianCloud, RenderSettings, eval_color
from sparsesplat.geometry import look_at
from sparsesplat.losses import LossWeights
from sparsesplat.optimizer import AdamState, TrainConfig, TrainLog, TrainRecord, prune, step, train, view_loss
from sparsesplat.rasterizer import render


def _scene(n_views=3, size=16):
    """Ground truth: one red blob; views on a ring around it."""
    truth = GaussianCloud.from_points([[0, 0, 0]], [[0.9, 0.2, 0.1]], np.log(0.4), opacity=0.9)
    views = []
    for k in range(n_views):
        az = 2 * np.pi * k / n_views
        cam = look_at((3 * np.cos(az), 3 * np.sin(az), 0.5), (0, 0, 0), width=size, height=size,
                      fov_x=np.deg2rad(45))
        out = render(truth, cam, RenderSettings())
        views.append(View(cam, out.color, out.alpha > 0.5, out.depth, f"v{k}"))
    return truth, Dataset(views)


def test_learning_rate_schedule():
    cfg = TrainConfig(iterations=100)
    assert cfg.learning_rates(0)["positions"] == pytest.approx(1.6e-4)
    assert cfg.learning_rates(100)["positions"] == pytest.approx(1.6e-6)
    assert cfg.learning_rates(50)["positions"] == pytest.approx(1.6e-5)
    assert cfg.learning_rates(50)["sh"] == 2.5e-3


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(lr_color=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(iterations=-1)
    assert TrainConfig(weights={"ssim": 0.2, "mask": 0.0, "depth": 0.0}).weights.mask == 0.0


def test_perfect_fit_does_not_move():
    truth, ds = _scene()
    # Raw depth: the aligned fit leaves ~1e-16 residuals, which Adam would amplify to full steps.
    cfg = TrainConfig(weights=LossWeights(ssim=0.0, mask=0.0, depth=0.05), depth_align=False)
    cloud = truth.copy()
    state = AdamState.for_cloud(cloud)
    value, parts = step(cloud, ds.views[0], cfg, state, 1)
    assert value == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_array_equal(cloud.positions, truth.positions)
    np.testing.assert_array_equal(cloud.sh, truth.sh)


def test_colour_moves_towards_target():
    truth, ds = _scene()
    cloud = truth.copy()
    cloud.sh[:, 0, 0] -= 0.5  # too little red
    cfg = TrainConfig(weights=LossWeights(ssim=0.0, mask=0.0, depth=0.0))
    state = AdamState.for_cloud(cloud)
    reds = [cloud.sh[0, 0, 0]]
    for it in range(1, 6):
        step(cloud, ds.views[0], cfg, state, it)
        reds.append(cloud.sh[0, 0, 0])
    assert np.all(np.diff(reds) > 0)
    # Adam's first step has size lr in every coordinate with a nonzero gradient.
    assert reds[1] - reds[0] == pytest.approx(cfg.lr_color, rel=1e-6)


def test_step_keeps_quaternions_normalised(rng):
    _, ds = _scene()
    cloud = GaussianCloud.from_points(rng.uniform(-0.3, 0.3, (6, 3)), rng.uniform(0, 1, (6, 3)), -1.5, 0.5)
    state = AdamState.for_cloud(cloud)
    for it in range(1, 4):
        step(cloud, ds.views[it % 3], TrainConfig(), state, it)
    np.testing.assert_allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0, atol=1e-12)


def test_prune():
    cloud = GaussianCloud.from_points(np.zeros((4, 3)), np.zeros((4, 3)), -1.0)
    cloud.opacity_logits = np.array([-10.0, 0.0, -6.0, -4.0])
    kept, keep = prune(cloud, 0.005)
    assert keep.tolist() == [False, True, False, True]
    assert len(kept) == 2


def test_prune_subsets_adam_state():
    cloud = GaussianCloud.from_points(np.zeros((3, 3)), np.zeros((3, 3)), -1.0)
    state = AdamState.for_cloud(cloud)
    state.m["positions"][:] = np.arange(3)[:, None]
    sub = state.subset(np.array([True, False, True]))
    assert sub.m["positions"][:, 0].tolist() == [0, 2]


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    truth, ds = _scene()
    start = truth.copy()
    start.positions += 0.15
    start.sh[:, :, 0] *= 0.5
    cfg = TrainConfig(iterations=60, log_interval=20, lr_position=1e-2, lr_position_final=1e-3)
    a, log_a = train(ds, start, cfg, log_path=tmp_path / "log.jsonl")
    b, log_b = train(ds, start, cfg)
    before = np.mean([view_loss(start, v, cfg, RenderSettings(), with_grad=False)[0] for v in ds.views])
    after = np.mean([view_loss(a, v, cfg, RenderSettings(), with_grad=False)[0] for v in ds.views])
    assert after < before
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.sh, b.sh)
    assert log_a.records == log_b.records
    assert [r.iteration for r in log_a.records] == [20, 40, 60]
    assert TrainLog.read(tmp_path / "log.jsonl").records == log_a.records
    # The input cloud is not modified.
    assert np.allclose(start.positions, truth.positions + 0.15)


def test_train_checkpoints(tmp_path):
    truth, ds = _scene(size=12)
    train(ds, truth, TrainConfig(iterations=4), checkpoint_dir=tmp_path, checkpoint_interval=2)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["iter_000002.ply", "iter_000004.ply"]


def test_train_pads_sh_degree():
    truth, ds = _scene(size=12)
    out, _ = train(ds, truth, TrainConfig(iterations=2, sh_degree=1))
    assert out.sh.shape == (1, 3, 4)


def test_nonfinite_loss_raises():
    truth, ds = _scene(size=12)
    view = ds.views[0]
    view.image = view.image.copy()
    view.image[0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        view_loss(truth, view, TrainConfig(), RenderSettings())


def test_log_requires_increasing_iterations():
    log = TrainLog()
    log.append(TrainRecord(1, 0.5, {}, 3))
    with pytest.raises(InvalidInputError):
        log.append(TrainRecord(1, 0.4, {}, 3))
