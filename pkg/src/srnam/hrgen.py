"""Progressively grown HR face generator and its mirrored discriminator.

Both networks start at 4x4 and gain one 2x block per stage up to 64x64. While
a new stage fades in, the generator output is

    (1 - alpha) * upsample(toRGB_old(h)) + alpha * toRGB_new(block_new(h))

and the discriminator input path mirrors it with ``fromRGB`` layers.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_state, read_manifest, save_checkpoint, seeded
from .degrader import gan_loss_d, gan_loss_g, gradient_penalty
from .errors import CheckpointError, ConfigError, DivergenceError, ShapeError
from .imagedata import HR_SIZE, batch_iter, check_image_shape, image_grid, write_png

LATENT_DIM = 512
MAX_STAGE = 4
DEFAULT_CHANNELS = (256, 256, 128, 64, 32)
HISTORY_COLUMNS = ("stage", "resolution", "step", "alpha", "d_loss", "gp", "g_loss")


def stage_resolution(stage):
    return 4 * 2 ** stage


def fade_blend(low, high, alpha):
    """``(1 - alpha) * low + alpha * high``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if low.shape != high.shape:
        raise ShapeError(f"shape mismatch {tuple(low.shape)} vs {tuple(high.shape)}")
    return (1.0 - alpha) * low + alpha * high


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


class PixelNorm(nn.Module):
    """Normalise each pixel's feature vector to unit RMS."""

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class EqualizedConv2d(nn.Conv2d):
    """Conv with N(0, 1) weights rescaled by He's constant at run time."""

    def __init__(self, c_in, c_out, k, gain=math.sqrt(2), **kw):
        super().__init__(c_in, c_out, k, **kw)
        nn.init.normal_(self.weight)
        nn.init.zeros_(self.bias)
        self.scale = gain / math.sqrt(c_in * k * k)

    def forward(self, x):
        return self._conv_forward(x, self.weight * self.scale, self.bias)


class EqualizedLinear(nn.Linear):
    def __init__(self, n_in, n_out, gain=math.sqrt(2)):
        super().__init__(n_in, n_out)
        nn.init.normal_(self.weight)
        nn.init.zeros_(self.bias)
        self.scale = gain / math.sqrt(n_in)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class MinibatchStd(nn.Module):
    """Append one channel holding the average across-batch feature std."""

    def forward(self, x):
        std = x.std(dim=0, unbiased=False) if x.shape[0] > 1 else torch.zeros_like(x[0])
        feat = std.mean().expand(x.shape[0], 1, *x.shape[2:])
        return torch.cat([x, feat], dim=1)


def _conv(c_in, c_out, k, eq, gain=math.sqrt(2)):
    if eq:
        return EqualizedConv2d(c_in, c_out, k, gain=gain, padding=k // 2)
    return nn.Conv2d(c_in, c_out, k, padding=k // 2)


def _linear(n_in, n_out, eq, gain=math.sqrt(2)):
    return EqualizedLinear(n_in, n_out, gain) if eq else nn.Linear(n_in, n_out)


def _conv_block(c_in, c_out, pixel_norm=False, eq=False):
    norm = [PixelNorm()] if pixel_norm else []
    return nn.Sequential(
        _conv(c_in, c_out, 3, eq), nn.LeakyReLU(0.2), *norm,
        _conv(c_out, c_out, 3, eq), nn.LeakyReLU(0.2), *norm)


class FirstBlock(nn.Module):
    """Latent vector -> 4x4 feature map."""

    def __init__(self, latent_dim, channels, pixel_norm=False, eq=False):
        super().__init__()
        self.channels = channels
        self.fc = _linear(latent_dim, channels * 16, eq, gain=math.sqrt(2) / 4)
        self.conv = _conv(channels, channels, 3, eq)
        self.norm = PixelNorm() if pixel_norm else nn.Identity()

    def forward(self, z):
        h = self.norm(F.leaky_relu(self.fc(z), 0.2).view(-1, self.channels, 4, 4))
        return self.norm(F.leaky_relu(self.conv(h), 0.2))


class ProgressiveGenerator(nn.Module):
    """Generator whose output side is ``4 * 2**stage``; see :func:`grow`."""

    def __init__(self, latent_dim=LATENT_DIM, channels=DEFAULT_CHANNELS,
                 normalize_latent=True, pixel_norm=True, equalized_lr=False, seed=0):
        super().__init__()
        if len(channels) != MAX_STAGE + 1:
            raise ConfigError(f"need {MAX_STAGE + 1} channel widths, got {len(channels)}")
        self.latent_dim = latent_dim
        self.channels = tuple(channels)
        self.normalize_latent = normalize_latent
        self.pixel_norm = pixel_norm
        self.equalized_lr = equalized_lr
        self.seed = seed
        self.stage = 0
        self.alpha = 1.0
        with seeded(seed * 1000):
            self.blocks = nn.ModuleList([FirstBlock(latent_dim, channels[0], pixel_norm, equalized_lr)])
            self.to_rgb = nn.ModuleList([_conv(channels[0], 3, 1, equalized_lr, gain=1.0)])

    def arch(self):
        return {"latent_dim": self.latent_dim, "channels": list(self.channels),
                "normalize_latent": self.normalize_latent, "pixel_norm": self.pixel_norm,
                "equalized_lr": self.equalized_lr, "seed": self.seed}

    def _add_stage(self):
        s = len(self.blocks)
        with seeded(self.seed * 1000 + s):
            self.blocks.append(_conv_block(self.channels[s - 1], self.channels[s],
                                           self.pixel_norm, self.equalized_lr))
            self.to_rgb.append(_conv(self.channels[s], 3, 1, self.equalized_lr, gain=1.0))

    def prepare_latent(self, z):
        if self.normalize_latent:
            z = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        return z

    def branches(self, z, stage):
        """Return ``(low, high)`` RGB images for ``stage``; ``low`` is None at stage 0."""
        h = self.blocks[0](self.prepare_latent(z))
        if stage == 0:
            return None, torch.tanh(self.to_rgb[0](h))
        for s in range(1, stage):
            h = self.blocks[s](upsample2x(h))
        low = upsample2x(torch.tanh(self.to_rgb[stage - 1](h)))
        high = torch.tanh(self.to_rgb[stage](self.blocks[stage](upsample2x(h))))
        return low, high

    def forward(self, z, stage=None, alpha=None):
        stage = self.stage if stage is None else stage
        alpha = (self.alpha if stage == self.stage else 1.0) if alpha is None else alpha
        low, high = self.branches(z, stage)
        if low is None or alpha == 1.0:
            return high
        return fade_blend(low, high, alpha)


class ProgressiveDiscriminator(nn.Module):
    """Mirror of :class:`ProgressiveGenerator`: fromRGB at the current side, blocks down to 4x4."""

    def __init__(self, channels=DEFAULT_CHANNELS, equalized_lr=False, minibatch_std=False, seed=0):
        super().__init__()
        self.channels = tuple(channels)
        self.equalized_lr = equalized_lr
        self.minibatch_std = minibatch_std
        self.seed = seed
        self.stage = 0
        self.alpha = 1.0
        c0, eq = channels[0], equalized_lr
        head = [MinibatchStd()] if minibatch_std else []
        with seeded(seed * 1000 + 500):
            self.from_rgb = nn.ModuleList([_conv(3, c0, 1, eq)])
            self.blocks = nn.ModuleList([nn.Sequential(
                *head, _conv(c0 + len(head), c0, 3, eq), nn.LeakyReLU(0.2),
                nn.Flatten(), _linear(c0 * 16, c0, eq), nn.LeakyReLU(0.2), _linear(c0, 1, eq, gain=1.0))])

    def arch(self):
        return {"channels": list(self.channels), "equalized_lr": self.equalized_lr,
                "minibatch_std": self.minibatch_std, "seed": self.seed}

    def _add_stage(self):
        s = len(self.blocks)
        with seeded(self.seed * 1000 + 500 + s):
            self.from_rgb.append(_conv(3, self.channels[s], 1, self.equalized_lr))
            self.blocks.append(_conv_block(self.channels[s], self.channels[s - 1], eq=self.equalized_lr))

    def forward(self, x, stage=None, alpha=None):
        stage = self.stage if stage is None else stage
        alpha = (self.alpha if stage == self.stage else 1.0) if alpha is None else alpha
        new = F.leaky_relu(self.from_rgb[stage](x), 0.2)
        if stage == 0:
            return self.blocks[0](new).squeeze(1)
        new = F.avg_pool2d(self.blocks[stage](new), 2)
        if alpha == 1.0:
            h = new
        else:
            old = F.leaky_relu(self.from_rgb[stage - 1](F.avg_pool2d(x, 2)), 0.2)
            h = fade_blend(old, new, alpha)
        for s in range(stage - 1, 0, -1):
            h = F.avg_pool2d(self.blocks[s](h), 2)
        return self.blocks[0](h).squeeze(1)


def grow(net):
    """Add the next resolution stage in place; existing parameters are untouched."""
    if net.stage >= MAX_STAGE:
        raise ValueError(f"already at maximum stage {MAX_STAGE}")
    if len(net.blocks) <= net.stage + 1:
        net._add_stage()
    net.stage += 1
    net.alpha = 0.0
    return net


def _check_stage(net, stage):
    if not 0 <= stage <= net.stage:
        raise ValueError(f"invalid stage {stage}; network is grown to stage {net.stage}")


def gen_forward(g, z, stage=None, alpha=1.0):
    """Image(s) at side ``4 * 2**stage`` for latent(s) ``z`` (``(512,)`` or ``(B, 512)``)."""
    stage = g.stage if stage is None else stage
    _check_stage(g, stage)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if z.shape[-1] != g.latent_dim:
        raise ShapeError(f"latent must have dimension {g.latent_dim}, got {z.shape[-1]}")
    if z.dim() == 1:
        return g(z.unsqueeze(0), stage, alpha)[0]
    return g(z, stage, alpha)


def disc_forward_prog(d, x, stage=None, alpha=1.0):
    stage = d.stage if stage is None else stage
    _check_stage(d, stage)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    side = check_image_shape(x.shape)
    if side != stage_resolution(stage):
        raise ShapeError(f"stage {stage} expects {stage_resolution(stage)}px input, got {side}px")
    if x.dim() == 3:
        return d(x.unsqueeze(0), stage, alpha)[0]
    return d(x, stage, alpha)


# --- training --------------------------------------------------------------

@dataclass
class GrowthSchedule:
    resolutions: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    epochs: list = field(default_factory=lambda: [10, 20, 20, 20, 50])
    batch_sizes: list = field(default_factory=lambda: [64, 64, 64, 32, 16])
    fade_fraction: float = 0.5

    def __post_init__(self):
        self.resolutions = [int(r) for r in self.resolutions]
        self.epochs = [int(e) for e in self.epochs]
        self.batch_sizes = [int(b) for b in self.batch_sizes]
        n = len(self.resolutions)
        if n == 0 or len(self.epochs) != n or len(self.batch_sizes) != n:
            raise ConfigError("resolutions, epochs and batch_sizes must be non-empty and of equal length")
        if self.resolutions[0] != 4:
            raise ConfigError("schedule must start at 4x4")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if b != 2 * a:
                raise ConfigError(f"resolutions must strictly double, got {a} -> {b}")
        if self.resolutions[-1] > HR_SIZE:
            raise ConfigError(f"resolutions above {HR_SIZE} are not supported")
        if any(e < 1 for e in self.epochs) or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("epochs and batch sizes must be >= 1")
        if not 0.0 <= self.fade_fraction <= 1.0:
            raise ConfigError("fade_fraction must be in [0, 1]")


@dataclass
class ProgressiveTrainConfig:
    schedule: GrowthSchedule = field(default_factory=GrowthSchedule)
    latent_dim: int = LATENT_DIM
    channels: tuple = DEFAULT_CHANNELS
    normalize_latent: bool = True
    pixel_norm: bool = True
    equalized_lr: bool = True
    minibatch_std: bool = True
    gp_lambda: float = 10.0
    d_steps_per_g_step: int = 1
    lr: float = 1e-3
    betas: tuple = (0.0, 0.99)
    eps: float = 1e-8
    seed: int = 0
    data_seed: int = 0
    sample_seed: int = 1234

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = GrowthSchedule(**self.schedule)
        self.channels = tuple(self.channels)
        self.betas = tuple(self.betas)
        if self.gp_lambda < 0 or self.d_steps_per_g_step < 1:
            raise ConfigError("gp_lambda must be >= 0 and d_steps_per_g_step >= 1")


@dataclass
class ProgressiveCheckpoint:
    generator: ProgressiveGenerator
    discriminator: ProgressiveDiscriminator
    history: list
    stage_dirs: list
    final_loss: float = float("nan")


def resize_to(images, side):
    """Area-downsample ``(B, 3, 64, 64)`` images to ``side``."""
    if images.shape[-1] == side:
        return images
    return F.adaptive_avg_pool2d(images, side)


def sample_latents(n, latent_dim, seed):
    return torch.randn(n, latent_dim, generator=torch.Generator().manual_seed(int(seed)))


def history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["stage"], row["resolution"], row["step"]]
                        + [repr(row[k]) for k in HISTORY_COLUMNS[3:]])
    return buf.getvalue()


def train_progressive(cfg, hr, out_dir=None, log_every=0, log=print):
    """Train stage by stage; each new stage fades in over ``fade_fraction`` of its steps."""
    if hr.role != "HR":
        raise ConfigError(f"expected an HR dataset, got {hr.role}")
    if len(hr) == 0:
        raise ConfigError("training dataset must be non-empty")
    sched = cfg.schedule
    gen = ProgressiveGenerator(cfg.latent_dim, cfg.channels, cfg.normalize_latent,
                               cfg.pixel_norm, cfg.equalized_lr, cfg.seed)
    disc = ProgressiveDiscriminator(cfg.channels, cfg.equalized_lr, cfg.minibatch_std, cfg.seed)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    adam = dict(lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    history, stage_dirs = [], []
    g_loss = torch.tensor(float("nan"))

    for stage, (res, epochs, bs) in enumerate(zip(sched.resolutions, sched.epochs, sched.batch_sizes)):
        if stage > 0:
            grow(gen)
            grow(disc)
        # optimisers are rebuilt per stage so new parameters are included
        opt_g = torch.optim.Adam(gen.parameters(), **adam)
        opt_d = torch.optim.Adam(disc.parameters(), **adam)
        stream = batch_iter(hr, bs, cfg.data_seed + stage)
        total_steps = epochs * stream.batches_per_epoch()
        fade_steps = math.ceil(sched.fade_fraction * total_steps) if stage > 0 else 0
        batches = iter(stream)
        gen.train()
        disc.train()
        for step in range(total_steps):
            alpha = 1.0 if step >= fade_steps else step / fade_steps
            gen.alpha = disc.alpha = alpha
            disc.requires_grad_(True)
            for _ in range(cfg.d_steps_per_g_step):
                real = resize_to(next(batches).images, res)
                if alpha < 1.0:
                    real = fade_blend(upsample2x(F.avg_pool2d(real, 2)), real, alpha)
                z = torch.randn(len(real), cfg.latent_dim, generator=rng)
                with torch.no_grad():
                    fake = gen(z)
                d_loss = gan_loss_d(disc(real), disc(fake))
                gp = gradient_penalty(disc, real, fake, cfg.gp_lambda, generator=rng)
                opt_d.zero_grad(set_to_none=True)
                (d_loss + gp).backward()
                opt_d.step()
            disc.requires_grad_(False)
            z = torch.randn(bs, cfg.latent_dim, generator=rng)
            g_loss = gan_loss_g(disc(gen(z)))
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()

            row = {"stage": stage, "resolution": res, "step": step, "alpha": float(alpha),
                   "d_loss": d_loss.item(), "gp": gp.item(), "g_loss": g_loss.item()}
            if not all(math.isfinite(row[k]) for k in ("d_loss", "gp", "g_loss")):
                raise DivergenceError(f"non-finite loss at stage {stage} ({res}px), step {step}: {row}")
            history.append(row)
            if log_every and (step % log_every == 0 or step == total_steps - 1):
                log("progressive {resolution}px step {step}/{n}: alpha={alpha:.3f} d={d_loss:.4f} "
                    "gp={gp:.4f} g={g_loss:.4f}".format(n=total_steps, **row))
        gen.alpha = disc.alpha = 1.0
        disc.requires_grad_(True)
        gen.eval()
        disc.eval()
        if out_dir is not None:
            stage_dirs.append(save_stage(gen, disc, cfg, Path(out_dir), history))

    if out_dir is not None:
        (Path(out_dir) / "loss_history.csv").write_text(history_csv(history), encoding="utf-8")
    return ProgressiveCheckpoint(gen, disc, history, stage_dirs, final_loss=g_loss.item())


def render_samples(g, seed, n=64):
    """Fixed-seed samples at the generator's current stage, ``(n, 3, S, S)``."""
    z = sample_latents(n, g.latent_dim, seed)
    with torch.no_grad():
        return g(z, g.stage, 1.0)


def save_stage(gen, disc, cfg, out_dir, history=()):
    res = stage_resolution(gen.stage)
    d = out_dir / f"stage_{res}"
    samples = render_samples(gen, cfg.sample_seed)
    write_png(d / "samples.png", image_grid(samples, 8))
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "samples.npy", samples.numpy())
    cfg_d = asdict(cfg)
    cfg_d["channels"] = list(cfg_d["channels"])
    cfg_d["betas"] = list(cfg_d["betas"])
    save_checkpoint(
        d, "progressive_generator",
        arch={"generator": gen.arch(), "discriminator": disc.arch(), "stage": gen.stage,
              "resolution": res},
        modules={"generator": gen, "discriminator": disc},
        seeds={"seed": cfg.seed, "data_seed": cfg.data_seed, "sample_seed": cfg.sample_seed},
        iterations=sum(1 for r in history if r["stage"] == gen.stage),
        samples="samples.png",
        samples_raw="samples.npy",
        config=cfg_d,
    )
    return d


def latest_stage_dir(path):
    """Accept a stage directory or a run directory holding ``stage_<r>`` children."""
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    stages = sorted((p for p in path.glob("stage_*") if (p / "manifest.json").is_file()),
                    key=lambda p: int(p.name.split("_")[1]))
    if not stages:
        raise CheckpointError(f"no generator checkpoint under {path}")
    return stages[-1]


def load_progressive(path):
    """Return ``(generator, discriminator, manifest)`` at the saved stage, eval mode."""
    path = latest_stage_dir(path)
    manifest = read_manifest(path, kind="progressive_generator")
    arch = manifest["arch"]
    gen = ProgressiveGenerator(**arch["generator"])
    disc = ProgressiveDiscriminator(**arch["discriminator"])
    for _ in range(arch["stage"]):
        grow(gen)
        grow(disc)
    gen.alpha = disc.alpha = 1.0
    state = load_state(path, manifest)
    try:
        gen.load_state_dict(state["generator"])
        disc.load_state_dict(state["discriminator"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: weights do not match manifest architecture: {exc}") from exc
    manifest["path"] = str(path)
    return gen.eval(), disc.eval(), manifest
