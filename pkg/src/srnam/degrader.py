"""HR -> LR degradation network, its LR discriminator, losses and training loop.

The generator takes a 64px face plus a 100-d noise vector and emits a 16px
image; different noise vectors give different plausible degradations of the
same face. It is trained unpaired: a hinge-loss discriminator (with gradient
penalty) compares its outputs with real LR photos while a pixel loss keeps
the bilinearly re-upscaled output close to the HR input.
"""

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_state, read_manifest, save_checkpoint, seeded
from .errors import CheckpointError, ConfigError, DivergenceError, ShapeError
from .imagedata import HR_SIZE, LR_SIZE, SIDES, batch_iter, check_image_shape
from .percept import build_extractor, perceptual_distance

NOISE_DIM = 100
HISTORY_COLUMNS = ("iteration", "d_loss", "gp", "g_gan", "g_l1", "g_vgg", "total")


# --- layers ----------------------------------------------------------------

def pixel_shuffle(x, r):
    """Depth-to-space: ``out[c, r*h + dy, r*w + dx] = x[c*r*r + dy*r + dx, h, w]``."""
    *lead, ch, h, w = x.shape
    if ch % (r * r):
        raise ShapeError(f"channel count {ch} not divisible by r^2={r * r}")
    c = ch // (r * r)
    x = x.reshape(*lead, c, r, r, h, w)
    n = len(lead)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2)
    return x.reshape(*lead, c, h * r, w * r)


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle`."""
    *lead, c, hh, ww = x.shape
    if hh % r or ww % r:
        raise ShapeError(f"spatial size {hh}x{ww} not divisible by {r}")
    h, w = hh // r, ww // r
    x = x.reshape(*lead, c, h, r, w, r)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3)
    return x.reshape(*lead, c * r * r, h, w)


class PixelShuffle(nn.Module):
    def __init__(self, r):
        super().__init__()
        self.r = r

    def forward(self, x):
        return pixel_shuffle(x, self.r)


class ResBlock(nn.Module):
    """Pre-activation residual block (norm, ReLU, conv) x 2 with identity skip."""

    def __init__(self, channels, norm=True):
        super().__init__()
        layers = []
        for _ in range(2):
            if norm:
                layers.append(nn.BatchNorm2d(channels))
            layers += [nn.ReLU(), nn.Conv2d(channels, channels, 3, padding=1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


# --- networks --------------------------------------------------------------

class DegraderGenerator(nn.Module):
    """Encoder-decoder: 6 groups of 2 residual blocks, 64 -> 4 by average pooling,
    then 4 -> 8 -> 16 by pixel shuffle. The projected noise is the 4th input channel.
    """

    def __init__(self, channels=64, noise_dim=NOISE_DIM, norm=True):
        super().__init__()
        self.channels = channels
        self.noise_dim = noise_dim
        self.noise_proj = nn.Linear(noise_dim, HR_SIZE * HR_SIZE)
        self.stem = nn.Conv2d(4, channels, 3, padding=1)

        def group():
            return nn.Sequential(ResBlock(channels, norm), ResBlock(channels, norm))

        # 64 -> 32 -> 16 -> 8 -> 4
        self.encoder = nn.ModuleList(group() for _ in range(4))
        self.bottleneck = group()
        self.up1 = nn.Sequential(nn.Conv2d(channels, 4 * channels, 3, padding=1), PixelShuffle(2))
        self.decoder = group()
        self.up2 = nn.Sequential(nn.Conv2d(channels, 4 * channels, 3, padding=1), PixelShuffle(2))
        tail = [nn.BatchNorm2d(channels)] if norm else []
        self.head = nn.Sequential(*tail, nn.ReLU(), nn.Conv2d(channels, 3, 3, padding=1), nn.Tanh())

    def arch(self):
        return {"channels": self.channels, "noise_dim": self.noise_dim,
                "norm": any(isinstance(m, nn.BatchNorm2d) for m in self.modules())}

    def forward(self, hr, z):
        noise = self.noise_proj(z).view(-1, 1, HR_SIZE, HR_SIZE)
        h = self.stem(torch.cat([hr, noise], dim=1))
        for g in self.encoder:
            h = F.avg_pool2d(g(h), 2)
        h = self.up1(self.bottleneck(h))
        h = self.up2(self.decoder(h))
        return self.head(h)


class DegraderDiscriminator(nn.Module):
    """Six un-normalised residual blocks on 16px input; max-pool after the last two."""

    def __init__(self, channels=64):
        super().__init__()
        self.channels = channels
        self.stem = nn.Conv2d(3, channels, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(channels, norm=False) for _ in range(6))
        self.fc = nn.Linear(channels * 4 * 4, 1)

    def arch(self):
        return {"channels": self.channels}

    def forward(self, x):
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i >= 4:
                h = F.max_pool2d(h, 2)
        return self.fc(F.relu(h).flatten(1)).squeeze(1)


def project_noise(g, z):
    """Noise vector(s) -> one 64x64 channel per vector, shape ``(1, 64, 64)`` or ``(B, 1, 64, 64)``."""
    if z.shape[-1] != g.noise_dim:
        raise ShapeError(f"noise must have dimension {g.noise_dim}, got {z.shape[-1]}")
    out = g.noise_proj(z)
    return out.view(*z.shape[:-1], 1, HR_SIZE, HR_SIZE)


def sample_noise(n, noise_dim=NOISE_DIM, seed=None, generator=None):
    """i.i.d. standard-normal noise, ``(n, noise_dim)``."""
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    return torch.randn(n, noise_dim, generator=generator)


def degrade(g, hr, z):
    """Apply the degradation generator to one ``(3,64,64)`` image or a batch."""
    if check_image_shape(hr.shape) != HR_SIZE:
        raise ShapeError(f"degrade expects 64px HR input, got {hr.shape[-1]}px")
    if z.shape[-1] != g.noise_dim:
        raise ShapeError(f"noise must have dimension {g.noise_dim}, got {z.shape[-1]}")
    if hr.dim() == 3:
        return g(hr.unsqueeze(0), z.reshape(1, -1))[0]
    return g(hr, z.reshape(hr.shape[0], -1))


def disc_score(d, lr):
    if check_image_shape(lr.shape) != LR_SIZE:
        raise ShapeError(f"discriminator expects 16px input, got {lr.shape[-1]}px")
    if lr.dim() == 3:
        return d(lr.unsqueeze(0))[0]
    return d(lr)


# --- losses ----------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """``total = alpha*pixel + beta*gan`` and ``pixel = gamma*l1 + delta*perceptual``."""

    alpha: float = 1.0
    beta: float = 0.05
    gamma: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.delta)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ConfigError(f"loss weights must be finite and >= 0, got {vals}")
        if not any(vals):
            raise ConfigError("loss weights must not all be zero")


def _nonempty(t, name):
    t = torch.as_tensor(t)
    if t.numel() == 0:
        raise ValueError(f"{name} must be non-empty")
    return t


def gan_loss_d(real_scores, fake_scores):
    """Hinge discriminator loss, ``-(E[min(0, -1 + D(x))] + E[min(0, -1 - D(x_hat))])``."""
    real = _nonempty(real_scores, "real_scores")
    fake = _nonempty(fake_scores, "fake_scores")
    return -(torch.clamp(real - 1, max=0).mean() + torch.clamp(-fake - 1, max=0).mean())


def gan_loss_g(fake_scores):
    return -_nonempty(fake_scores, "fake_scores").mean()


def gradient_penalty(d, real, fake, lam=10.0, generator=None):
    """``lam * E[(||grad D(x_mix)||_2 - 1)^2]`` over random interpolates of real and fake."""
    if real.shape != fake.shape:
        raise ShapeError(f"batch mismatch {tuple(real.shape)} vs {tuple(fake.shape)}")
    b = real.shape[0]
    eps = torch.rand(b, *([1] * (real.dim() - 1)), generator=generator, dtype=real.dtype)
    x = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = d(x)
    grad = None
    if scores.requires_grad:
        grad, = torch.autograd.grad(scores.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    norms = grad.reshape(b, -1).norm(dim=1)
    return lam * ((norms - 1) ** 2).mean()


def l1_loss(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def upscale_F(lr, factor=4):
    """Bilinear up-scaling (``align_corners=False``) used to compare LR output with HR input."""
    if factor not in (2, 4):
        raise ConfigError(f"unsupported up-scaling factor {factor}")
    side = check_image_shape(lr.shape, sides=None)
    if side * factor not in SIDES:
        raise ShapeError(f"{side}px x{factor} is not a supported image size")
    x = lr.unsqueeze(0) if lr.dim() == 3 else lr
    out = F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    return out[0] if lr.dim() == 3 else out


def pixel_terms(hr, lr_fake, fx, factor=4, with_perceptual=True):
    up = upscale_F(lr_fake, factor)
    if up.shape != hr.shape:
        raise ShapeError(f"upscaled LR {tuple(up.shape)} does not match HR {tuple(hr.shape)}")
    l1 = l1_loss(up, hr)
    vgg = perceptual_distance(fx, up, hr) if with_perceptual else l1.new_zeros(())
    return l1, vgg


def pixel_loss(hr, lr_fake, w, fx, factor=4):
    """``gamma * L1(F(lr), hr) + delta * perceptual(F(lr), hr)``."""
    l1, vgg = pixel_terms(hr, lr_fake, fx, factor, with_perceptual=w.delta != 0)
    return w.gamma * l1 + w.delta * vgg


def total_loss(pixel, gan, w):
    return w.alpha * pixel + w.beta * gan


def generator_losses(g, d, fx, hr, z, w, factor=4):
    """All generator-side terms for one batch; ``total`` is what gets minimised."""
    fake = g(hr, z)
    l1, vgg = pixel_terms(hr, fake, fx, factor, with_perceptual=w.delta != 0)
    g_gan = gan_loss_g(d(fake)) if w.beta != 0 else l1.new_zeros(())
    total = total_loss(w.gamma * l1 + w.delta * vgg, g_gan, w)
    return {"g_gan": g_gan, "g_l1": l1, "g_vgg": vgg, "total": total, "fake": fake}


# --- training --------------------------------------------------------------

@dataclass
class DegraderTrainConfig:
    iterations: int = 500_000
    d_steps_per_g_step: int = 5
    gp_lambda: float = 10.0
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    upscale_factor: int = 4
    channels: int = 64
    noise_dim: int = NOISE_DIM
    norm: bool = True
    seed: int = 0
    data_seed: int = 0
    percept_backend: str = "random"
    percept_seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be >= 1")
        if self.gp_lambda < 0:
            raise ConfigError("gp_lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class DegraderCheckpoint:
    generator: DegraderGenerator
    discriminator: DegraderDiscriminator
    history: list
    config: DegraderTrainConfig
    path: Path = None


def history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row["iteration"]] + [repr(row[k]) for k in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def _finite_or_die(row, where):
    bad = [k for k, v in row.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite {', '.join(bad)} at {where}: {row}")


def train_degrader(cfg, hr, lr, out_dir=None, fx=None, log_every=0, log=print):
    """Alternate ``d_steps_per_g_step`` discriminator updates with one generator update."""
    if hr.role != "HR" or lr.role != "LR":
        raise ConfigError(f"expected HR and LR datasets, got {hr.role} and {lr.role}")
    if len(hr) == 0 or len(lr) == 0:
        raise ConfigError("training datasets must be non-empty")
    w = cfg.weights
    with seeded(cfg.seed):
        gen = DegraderGenerator(cfg.channels, cfg.noise_dim, cfg.norm)
        disc = DegraderDiscriminator(cfg.channels)
    if fx is None and w.delta != 0:
        fx = build_extractor(cfg.percept_backend, cfg.percept_seed)
    adam = dict(lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    opt_g = torch.optim.Adam(gen.parameters(), **adam)
    opt_d = torch.optim.Adam(disc.parameters(), **adam)
    hr_batches = iter(batch_iter(hr, cfg.batch_size, cfg.data_seed))
    lr_batches = iter(batch_iter(lr, cfg.batch_size, cfg.data_seed + 1))
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    gen.train()
    disc.train()

    history = []
    for it in range(cfg.iterations):
        disc.requires_grad_(True)
        for _ in range(cfg.d_steps_per_g_step):
            real = next(lr_batches).images
            hr_b = next(hr_batches).images
            n = min(len(real), len(hr_b))
            real, hr_b = real[:n], hr_b[:n]
            z = torch.randn(n, cfg.noise_dim, generator=rng)
            with torch.no_grad():
                fake = gen(hr_b, z)
            d_loss = gan_loss_d(disc(real), disc(fake))
            gp = gradient_penalty(disc, real, fake, cfg.gp_lambda, generator=rng)
            opt_d.zero_grad(set_to_none=True)
            (d_loss + gp).backward()
            opt_d.step()

        disc.requires_grad_(False)
        hr_b = next(hr_batches).images
        z = torch.randn(len(hr_b), cfg.noise_dim, generator=rng)
        losses = generator_losses(gen, disc, fx, hr_b, z, w, cfg.upscale_factor)
        opt_g.zero_grad(set_to_none=True)
        losses["total"].backward()
        opt_g.step()

        row = {"iteration": it, "d_loss": d_loss.item(), "gp": gp.item()}
        row.update({k: losses[k].item() for k in HISTORY_COLUMNS[3:]})
        _finite_or_die(row, f"iteration {it}")
        history.append(row)
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            log("degrader it {iteration}: d={d_loss:.4f} gp={gp:.4f} l1={g_l1:.4f} "
                "vgg={g_vgg:.4f} total={total:.4f}".format(**row))
    disc.requires_grad_(True)
    gen.eval()
    disc.eval()
    ckpt = DegraderCheckpoint(gen, disc, history, cfg)
    if out_dir is not None:
        ckpt.path = save_degrader(ckpt, out_dir)
    return ckpt


def save_degrader(ckpt, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "loss_history.csv").write_text(history_csv(ckpt.history), encoding="utf-8")
    cfg = asdict(ckpt.config)
    cfg["betas"] = list(cfg["betas"])
    save_checkpoint(
        out_dir, "degrader",
        arch={"generator": ckpt.generator.arch(), "discriminator": ckpt.discriminator.arch(),
              "hr_size": HR_SIZE, "lr_size": LR_SIZE},
        modules={"generator": ckpt.generator, "discriminator": ckpt.discriminator},
        seeds={"seed": ckpt.config.seed, "data_seed": ckpt.config.data_seed},
        iterations=len(ckpt.history),
        loss_history="loss_history.csv",
        config=cfg,
    )
    return out_dir


def load_degrader(path):
    """Return ``(generator, discriminator, manifest)`` in eval mode."""
    manifest = read_manifest(path, kind="degrader")
    arch = manifest["arch"]
    if arch.get("hr_size") != HR_SIZE or arch.get("lr_size") != LR_SIZE:
        raise CheckpointError(f"{path}: degrader sizes {arch.get('hr_size')}->{arch.get('lr_size')} "
                              f"incompatible with {HR_SIZE}->{LR_SIZE}")
    gen = DegraderGenerator(**arch["generator"])
    disc = DegraderDiscriminator(**arch["discriminator"])
    state = load_state(path, manifest)
    try:
        gen.load_state_dict(state["generator"])
        disc.load_state_dict(state["discriminator"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: weights do not match manifest architecture: {exc}") from exc
    return gen.eval(), disc.eval(), manifest
