import csv
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from torch import nn

from srnam import degrader as deg
from srnam.checkpoint import weights_hash
from srnam.errors import ConfigError, DivergenceError, ShapeError
from srnam.imagedata import synth_dataset
from srnam.percept import RandomFeatures


def _rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype) * 2 - 1


# --- noise projection / pixel shuffle ------------------------------------------

@pytest.fixture(scope="module")
def small_gen():
    torch.manual_seed(0)
    return deg.DegraderGenerator(channels=8).eval()


def test_project_noise_shape_and_linearity(small_gen):
    g = small_gen
    a, b = torch.randn(100), torch.randn(100)
    assert deg.project_noise(g, a).shape == (1, 64, 64)
    with torch.no_grad():
        g.noise_proj.bias.zero_()
        assert torch.equal(deg.project_noise(g, torch.zeros(100)), torch.zeros(1, 64, 64))
        lhs = deg.project_noise(g, a + b)
        rhs = deg.project_noise(g, a) + deg.project_noise(g, b)
    assert torch.allclose(lhs, rhs, atol=1e-5)
    with pytest.raises(ShapeError):
        deg.project_noise(g, torch.zeros(99))


def test_pixel_shuffle_examples():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).view(4, 1, 1)
    assert torch.equal(deg.pixel_shuffle(x, 2), torch.tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    assert deg.pixel_shuffle(torch.zeros(12, 2, 2), 2).shape == (3, 4, 4)
    with pytest.raises(ShapeError):
        deg.pixel_shuffle(torch.zeros(6, 2, 2), 2)


def test_pixel_shuffle_convention_elementwise():
    r, c, h, w = 3, 2, 2, 3
    x = torch.arange(c * r * r * h * w, dtype=torch.float32).view(c * r * r, h, w)
    out = deg.pixel_shuffle(x, r)
    for ci in range(c):
        for hi in range(h):
            for wi in range(w):
                for dy in range(r):
                    for dx in range(r):
                        assert out[ci, r * hi + dy, r * wi + dx] == x[ci * r * r + dy * r + dx, hi, wi]


def test_pixel_shuffle_agrees_with_torch():
    x = _rand(2, 12, 3, 5)
    assert torch.equal(deg.pixel_shuffle(x, 2), F.pixel_shuffle(x, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_pixel_shuffle_bijection(r, c, h, w, seed):
    x = _rand(c * r * r, h, w, seed=seed)
    y = deg.pixel_shuffle(x, r)
    assert torch.equal(deg.pixel_unshuffle(y, r), x)
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)


# --- networks ---------------------------------------------------------------------

def test_degrade_shape_range_determinism(small_gen):
    hr, z = _rand(3, 64, 64), torch.randn(100)
    with torch.no_grad():
        a, b = deg.degrade(small_gen, hr, z), deg.degrade(small_gen, hr, z)
    assert a.shape == (3, 16, 16)
    assert torch.equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    with pytest.raises(ShapeError):
        deg.degrade(small_gen, _rand(3, 32, 32), z)
    with pytest.raises(ShapeError):
        deg.degrade(small_gen, hr, torch.randn(50))


def test_generator_input_has_four_channels(small_gen):
    assert small_gen.stem.in_channels == 4


def test_discriminator_structure_and_scores():
    torch.manual_seed(1)
    d = deg.DegraderDiscriminator(channels=8)
    assert not any(isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d, nn.LayerNorm)) for m in d.modules())
    assert len(d.blocks) == 6
    x = _rand(5, 3, 16, 16)
    with torch.no_grad():
        batched = deg.disc_score(d, x)
        single = torch.stack([deg.disc_score(d, x[i]) for i in range(5)])
        again = deg.disc_score(d, x)
    assert batched.shape == (5,)
    assert torch.isfinite(batched).all()
    assert torch.equal(batched, again)
    assert torch.allclose(batched, single, atol=1e-6)
    with pytest.raises(ShapeError):
        deg.disc_score(d, _rand(3, 64, 64))


# --- losses --------------------------------------------------------------------------

@pytest.mark.parametrize("real, fake, expected", [
    ([1.0, 1.0], [-1.0, -1.0], 0.0),
    ([0.0, 0.0, 0.0], [0.0], 2.0),
    ([2.0], [-3.0], 0.0),
])
def test_gan_loss_d_cases(real, fake, expected):
    assert deg.gan_loss_d(torch.tensor(real), torch.tensor(fake)).item() == expected


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_gan_loss_d_nonnegative(real, fake):
    assert deg.gan_loss_d(torch.tensor(real), torch.tensor(fake)).item() >= 0


def test_gan_losses_reject_empty():
    with pytest.raises(ValueError):
        deg.gan_loss_d(torch.tensor([]), torch.tensor([1.0]))
    with pytest.raises(ValueError):
        deg.gan_loss_g(torch.tensor([]))


def test_gan_loss_g():
    assert deg.gan_loss_g(torch.tensor([0.0])).item() == 0.0
    assert deg.gan_loss_g(torch.tensor([3.0, -1.0])).item() == -1.0
    base = torch.tensor([0.5, -2.0, 1.0])
    for i in range(3):
        bumped = base.clone()
        bumped[i] += 0.25
        assert deg.gan_loss_g(bumped) < deg.gan_loss_g(base)


def _linear_critic(scale, dim=3 * 16 * 16, seed=0):
    w = torch.randn(dim, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    w = scale * w / w.norm()
    return lambda x: x.flatten(1) @ w


def test_gradient_penalty_closed_forms():
    real, fake = _rand(4, 3, 16, 16, seed=1, dtype=torch.float64), _rand(4, 3, 16, 16, seed=2, dtype=torch.float64)
    assert deg.gradient_penalty(_linear_critic(1.0), real, fake, 10.0).item() == pytest.approx(0.0, abs=1e-6)
    const = lambda x: torch.full((x.shape[0],), 0.7, dtype=x.dtype)
    assert deg.gradient_penalty(const, real, fake, 10.0).item() == pytest.approx(10.0, abs=1e-9)
    const_graph = lambda x: x.flatten(1).sum(1) * 0 + 0.7
    assert deg.gradient_penalty(const_graph, real, fake, 10.0).item() == pytest.approx(10.0, abs=1e-9)
    assert deg.gradient_penalty(_linear_critic(3.0), real, fake, 10.0).item() == pytest.approx(40.0, abs=1e-9)
    with pytest.raises(ShapeError):
        deg.gradient_penalty(const, real, fake[:2])


def test_gradient_penalty_nonnegative_and_differentiable():
    torch.manual_seed(0)
    d = deg.DegraderDiscriminator(channels=4)
    gp = deg.gradient_penalty(d, _rand(3, 3, 16, 16, seed=3), _rand(3, 3, 16, 16, seed=4), 10.0,
                              generator=torch.Generator().manual_seed(0))
    assert gp.item() >= 0
    gp.backward()
    # the output bias cannot affect input gradients; every weight must
    assert all(p.grad is not None for n, p in d.named_parameters() if n.endswith("weight"))


def test_l1_loss():
    a = _rand(3, 16, 16) * 0.4
    assert deg.l1_loss(a, a).item() == 0.0
    assert deg.l1_loss(a, a + 0.5).item() == pytest.approx(0.5, abs=1e-6)
    b = _rand(3, 16, 16, seed=9)
    assert deg.l1_loss(a, b).item() == deg.l1_loss(b, a).item()
    with pytest.raises(ShapeError):
        deg.l1_loss(a, b[:, :8])


def test_upscale_constant_and_shape():
    lr = torch.full((3, 16, 16), 0.3)
    up = deg.upscale_F(lr)
    assert up.shape == (3, 64, 64)
    assert torch.allclose(up, torch.full((3, 64, 64), 0.3))
    with pytest.raises(ConfigError):
        deg.upscale_F(lr, factor=3)


def test_upscale_reproduces_ramp_in_interior():
    slope, offset = 0.1, -0.75
    cols = slope * torch.arange(16, dtype=torch.float64) + offset
    lr = cols.expand(3, 16, 16).clone()
    up = deg.upscale_F(lr)
    # output column j samples source coordinate (j + 0.5) / 4 - 0.5
    src = (torch.arange(64, dtype=torch.float64) + 0.5) / 4 - 0.5
    expected = slope * src + offset
    interior = (src >= 0) & (src <= 15)
    assert torch.allclose(up[0, 10, interior], expected[interior], atol=1e-12)
    assert up.min() >= -1 and up.max() <= 1


def test_pixel_loss_cases():
    fx = RandomFeatures(seed=0)
    hr = torch.full((3, 64, 64), -0.2)
    decimated = hr[:, ::4, ::4]
    w = deg.LossWeights(alpha=1, beta=0, gamma=1, delta=1)
    assert deg.pixel_loss(hr, decimated, w, fx).item() == pytest.approx(0.0, abs=1e-7)
    hr2, lr2 = _rand(3, 64, 64, seed=1), _rand(3, 16, 16, seed=2)
    l1_only = deg.LossWeights(alpha=1, beta=0, gamma=1, delta=0)
    assert deg.pixel_loss(hr2, lr2, l1_only, fx).item() == pytest.approx(
        deg.l1_loss(deg.upscale_F(lr2), hr2).item(), rel=1e-6)
    zero = deg.LossWeights(alpha=1, beta=1, gamma=0, delta=0)
    assert deg.pixel_loss(hr2, lr2, zero, fx).item() == 0.0


def test_total_loss():
    w = deg.LossWeights(alpha=1.0, beta=0.0)
    assert deg.total_loss(0.0, 0.0, deg.LossWeights()) == 0.0
    assert deg.total_loss(2.5, 7.0, w) == 2.5
    w2 = deg.LossWeights(alpha=0.3, beta=2.0)
    for p, g in [(1.0, 2.0), (-3.0, 0.5)]:
        assert deg.total_loss(2 * p, g, w2) - deg.total_loss(p, g, w2) == pytest.approx(0.3 * p)
        assert deg.total_loss(p, 2 * g, w2) - deg.total_loss(p, g, w2) == pytest.approx(2.0 * g)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        deg.LossWeights(-1, 0, 0, 0)
    with pytest.raises(ConfigError):
        deg.LossWeights(0, 0, 0, 0)


# --- tiny networks for the finite-difference check ----------------------------------

class TinyDegrader(nn.Module):
    """4x4 HR + 3-d noise -> 2x2 LR; exactly 64 parameters."""

    noise_dim = 3

    def __init__(self):
        super().__init__()
        self.noise_proj = nn.Linear(3, 16, bias=False)
        self.mix = nn.Conv2d(4, 3, 1)
        self.gain = nn.Parameter(torch.tensor(0.8))

    def forward(self, hr, z):
        noise = self.noise_proj(z).view(-1, 1, 4, 4)
        h = self.mix(torch.cat([hr, noise], dim=1))
        return torch.tanh(self.gain * F.avg_pool2d(h, 2))


def tiny_setup():
    torch.manual_seed(11)
    g = TinyDegrader().double()
    d = nn.Sequential(nn.Flatten(), nn.Linear(12, 1), nn.Flatten(0)).double()
    fx = RandomFeatures(seed=5, channels=(2, 2, 2, 2), input_size=4).double()
    hr = _rand(2, 3, 4, 4, seed=3, dtype=torch.float64)
    z = torch.randn(2, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    return g, d, fx, hr, z


def total_objective_fd_check(h=1e-6):
    """Relative error between autograd and central differences for the generator objective."""
    g, d, fx, hr, z = tiny_setup()
    w = deg.LossWeights(alpha=1.0, beta=0.5, gamma=1.0, delta=0.7)
    params = list(g.parameters())
    assert sum(p.numel() for p in params) == 64

    def f():
        return deg.generator_losses(g, d, fx, hr, z, w, factor=2)["total"]

    grads = torch.autograd.grad(f(), params)
    analytic = torch.cat([gr.flatten() for gr in grads])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return ((analytic - numeric).norm() / numeric.norm()).item()


def test_total_loss_gradient_matches_finite_differences():
    assert total_objective_fd_check() < 1e-3


# --- training ------------------------------------------------------------------------

SMOKE = dict(iterations=50, batch_size=8, channels=8, seed=3, data_seed=4)


@pytest.fixture(scope="module")
def smoke_data():
    return synth_dataset(32, 64, 0), synth_dataset(32, 16, 1)


@pytest.fixture(scope="module")
def smoke_run(smoke_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("deg")
    return deg.train_degrader(deg.DegraderTrainConfig(**SMOKE), *smoke_data, out_dir=out)


def test_smoke_run_finite_and_checkpointed(smoke_run):
    assert len(smoke_run.history) == 50
    for row in smoke_run.history:
        assert all(np.isfinite(v) for v in row.values())
    assert (smoke_run.path / "manifest.json").is_file()
    manifest = json.loads((smoke_run.path / "manifest.json").read_text())
    assert manifest["kind"] == "degrader" and manifest["iterations"] == 50
    with open(smoke_run.path / manifest["loss_history"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(deg.HISTORY_COLUMNS) and len(rows) == 51


def test_smoke_run_l1_decreases(smoke_run):
    h = smoke_run.history
    assert h[-1]["g_l1"] < h[0]["g_l1"]


def test_smoke_run_deterministic(smoke_run, smoke_data):
    again = deg.train_degrader(deg.DegraderTrainConfig(**SMOKE), *smoke_data)
    assert deg.history_csv(again.history) == deg.history_csv(smoke_run.history)


def test_distinct_noise_gives_distinct_lr(smoke_run, smoke_data):
    hr = smoke_data[0].images[0]
    with torch.no_grad():
        a = deg.degrade(smoke_run.generator, hr, deg.sample_noise(1, seed=0)[0])
        b = deg.degrade(smoke_run.generator, hr, deg.sample_noise(1, seed=1)[0])
    assert (a - b).abs().mean().item() > 0


def test_checkpoint_round_trip(smoke_run, smoke_data):
    g, d, manifest = deg.load_degrader(smoke_run.path)
    assert weights_hash(g) == weights_hash(smoke_run.generator)
    assert weights_hash(d) == weights_hash(smoke_run.discriminator)
    hr, z = smoke_data[0].images[:2], deg.sample_noise(2, seed=9)
    with torch.no_grad():
        assert torch.equal(g(hr, z), smoke_run.generator(hr, z))
    assert manifest["seeds"] == {"seed": 3, "data_seed": 4}


def test_training_rejects_bad_inputs(smoke_data):
    hr, lr = smoke_data
    with pytest.raises(ConfigError):
        deg.train_degrader(deg.DegraderTrainConfig(**SMOKE), lr, hr)
    with pytest.raises(ConfigError):
        deg.train_degrader(deg.DegraderTrainConfig(**SMOKE), synth_dataset(0, 64, 0), lr)
    with pytest.raises(ConfigError):
        deg.DegraderTrainConfig(d_steps_per_g_step=0)
    with pytest.raises(ConfigError):
        deg.DegraderTrainConfig(gp_lambda=-1)


def test_divergence_aborts(smoke_data):
    hr, lr = smoke_data
    poisoned = synth_dataset(8, 64, 0)
    poisoned.__dict__["images"] = torch.full((8, 3, 64, 64), float("nan"))
    cfg = deg.DegraderTrainConfig(**{**SMOKE, "iterations": 2})
    with pytest.raises(DivergenceError, match="iteration 0"):
        deg.train_degrader(cfg, poisoned, lr)
