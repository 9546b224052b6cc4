"""Latent inversion through frozen networks: LR image -> several HR candidates.

For an LR image ``y`` we search latent codes ``z`` minimising the mean
absolute difference between ``D(G(z))`` and ``y``, where ``G`` is the HR
generator and ``D`` the degradation network. Only ``z`` is optimised. The
objective is non-convex, so restarting from different random codes yields
different HR candidates that all explain the same LR input.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .degrader import degrade, load_degrader
from .errors import CheckpointError, ConfigError, DivergenceError, ShapeError
from .hrgen import gen_forward, load_progressive
from .imagedata import HR_SIZE, LR_SIZE


@dataclass(frozen=True)
class InversionOptions:
    iterations: int = 400
    num_solutions: int = 1
    seed: int = 0
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    init_scale: float = 1.0
    latent_dim: int = 512
    project_sphere: bool = False
    record_trace: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.num_solutions < 1:
            raise ConfigError("num_solutions must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class InversionResult:
    z_star: torch.Tensor
    hr_image: torch.Tensor
    lr_recon: torch.Tensor
    best_objective: float
    objective_trace: list = field(default_factory=list)
    seed: Optional[int] = None


def objective(z, lr, G, D):
    """Mean absolute difference between ``D(G(z))`` and ``lr``."""
    recon = D(G(z))
    if recon.shape != lr.shape:
        raise ShapeError(f"D(G(z)) has shape {tuple(recon.shape)}, target is {tuple(lr.shape)}")
    return (recon - lr).abs().mean()


def initial_latent(opts, seed, dtype=torch.float32):
    gen = torch.Generator().manual_seed(int(seed))
    return opts.init_scale * torch.randn(opts.latent_dim, generator=gen, dtype=dtype)


def _sphere(z):
    return z * math.sqrt(z.numel()) / z.norm().clamp_min(1e-12)


def invert(lr, G, D, opts=InversionOptions(), seed=None):
    """Adam on ``z`` for a fixed budget; returns the best iterate seen, not the last."""
    seed = opts.seed if seed is None else seed
    z = initial_latent(opts, seed, lr.dtype)
    if opts.project_sphere:
        z = _sphere(z)
    z.requires_grad_(True)
    opt = torch.optim.Adam([z], lr=opts.lr, betas=opts.betas, eps=opts.eps)
    trace = []
    best, best_z = math.inf, z.detach().clone()
    for _ in range(opts.iterations):
        loss = objective(z, lr, G, D)
        value = loss.item()
        trace.append(value)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite objective at iteration {len(trace) - 1}", trace=trace)
        if value < best:
            best, best_z = value, z.detach().clone()
        z.grad, = torch.autograd.grad(loss, z)
        opt.step()
        if opts.project_sphere:
            with torch.no_grad():
                z.copy_(_sphere(z))
    with torch.no_grad():
        hr = G(best_z)
        lr_recon = D(hr)
    return InversionResult(best_z, hr, lr_recon, best,
                           trace if opts.record_trace else [], seed)


def invert_multi(lr, G, D, opts=InversionOptions()):
    """``num_solutions`` independent inversions (seeds ``seed + k``), best first."""
    seeds = [opts.seed + k for k in range(opts.num_solutions)]
    if opts.workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            results = list(pool.map(lambda s: invert(lr, G, D, opts, seed=s), seeds))
    else:
        results = [invert(lr, G, D, opts, seed=s) for s in seeds]
    return sorted(results, key=lambda r: r.best_objective)


def random_baseline(lr, G, D, opts=InversionOptions(), n=100, seed=10_000):
    """Objectives of ``n`` random, un-optimised latent codes (seeds ``seed + i``)."""
    out = []
    with torch.no_grad():
        for i in range(n):
            z = initial_latent(opts, seed + i, lr.dtype)
            out.append(objective(z, lr, G, D).item())
    return np.asarray(out)


class FrozenPipeline:
    """Wraps a trained progressive generator and degrader as the ``G`` and ``D`` callables.

    A generator grown to less than 64px has its output nearest-upsampled to
    64px before degradation. The degrader's noise input is held fixed (zeros
    unless ``noise`` is given), so ``D`` is deterministic.
    """

    def __init__(self, generator, degrader, noise=None):
        self.generator = generator.eval()
        self.degrader = degrader.eval()
        if noise is None:
            noise = torch.zeros(degrader.noise_dim)
        if noise.shape != (degrader.noise_dim,):
            raise ShapeError(f"noise must have shape ({degrader.noise_dim},)")
        self.noise = noise
        self.latent_dim = generator.latent_dim

    def G(self, z):
        img = gen_forward(self.generator, z, self.generator.stage, 1.0)
        side = img.shape[-1]
        if side != HR_SIZE:
            img = F.interpolate(img.unsqueeze(0), scale_factor=HR_SIZE // side, mode="nearest")[0]
        return img

    def D(self, hr):
        return degrade(self.degrader, hr, self.noise)


def load_pipeline(degrader_dir, generator_dir, noise_seed=None):
    deg, _, dman = load_degrader(degrader_dir)
    gen, _, gman = load_progressive(generator_dir)
    noise = None
    if noise_seed is not None:
        noise = torch.randn(deg.noise_dim, generator=torch.Generator().manual_seed(int(noise_seed)))
    return FrozenPipeline(gen, deg, noise), {"degrader": dman, "generator": gman}


class Candidate(NamedTuple):
    hr_image: torch.Tensor
    lr_recon: torch.Tensor
    best_objective: float
    seed: int
    z_star: torch.Tensor


def super_resolve(lr, checkpoints, opts=InversionOptions(), noise_seed=None):
    """Load frozen networks from ``(degrader_dir, generator_dir)`` and return HR candidates."""
    if lr.shape != (3, LR_SIZE, LR_SIZE):
        raise ShapeError(f"expected a (3, 16, 16) LR image, got {tuple(lr.shape)}")
    if isinstance(checkpoints, FrozenPipeline):
        pipe = checkpoints
    else:
        if isinstance(checkpoints, dict):
            checkpoints = (checkpoints["degrader"], checkpoints["generator"])
        pipe, _ = load_pipeline(*checkpoints, noise_seed=noise_seed)
    if opts.latent_dim != pipe.latent_dim:
        if opts.latent_dim != InversionOptions.latent_dim:
            raise CheckpointError(
                f"generator latent size {pipe.latent_dim} != requested {opts.latent_dim}")
        opts = replace(opts, latent_dim=pipe.latent_dim)
    results = invert_multi(lr, pipe.G, pipe.D, opts)
    return [Candidate(r.hr_image, r.lr_recon, r.best_objective, r.seed, r.z_star) for r in results]
