"""Frozen feature extractors for the perceptual loss.

Two backends share one interface: ``features(x)`` returns a list of feature
maps, one per tap. ``"random"`` is a seeded stack of stride-2 convolutions
with frozen random weights; ``"pretrained"`` wraps torchvision's VGG-19 and
taps the end of each pooling stage.
"""

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import seeded
from .errors import ConfigError, ShapeError
from .imagedata import check_image_shape


class FeatureExtractor(nn.Module):
    """Base class: a frozen sequence of blocks with tapped outputs."""

    def __init__(self, blocks, block_ends, input_size=64):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.block_ends = tuple(block_ends)
        self.input_size = input_size
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def frozen(self):
        return True

    def train(self, mode=True):
        # always in inference mode
        return super().train(False)

    def prepare(self, x):
        return x

    def forward(self, x):
        single = x.dim() == 3
        if check_image_shape(x.shape, sides=None) != self.input_size:
            raise ShapeError(f"feature extractor expects {self.input_size}px input, got {x.shape[-1]}px")
        h = self.prepare(x.unsqueeze(0) if single else x)
        taps = []
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in self.block_ends:
                taps.append(h[0] if single else h)
        return taps


class RandomFeatures(FeatureExtractor):
    """Stride-2 conv stack with fixed-seed random weights; one tap per stage."""

    def __init__(self, seed=0, channels=(16, 32, 64, 64), input_size=64):
        blocks = []
        with seeded(seed):
            c_in = 3
            for c_out in channels:
                conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
                nn.init.kaiming_normal_(conv.weight, a=0.2)
                nn.init.normal_(conv.bias, std=0.1)
                blocks.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
                c_in = c_out
        super().__init__(blocks, range(len(blocks)), input_size)
        self.seed = seed


VGG19_POOL_ENDS = (4, 9, 18, 27, 36)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class VGG19Features(FeatureExtractor):
    """torchvision VGG-19 ``features``; taps after each max-pool layer.

    ``weights="DEFAULT"`` loads the ImageNet weights (downloaded by torchvision
    on first use); ``weights=None`` gives a randomly initialised network.
    """

    def __init__(self, weights="DEFAULT", taps=VGG19_POOL_ENDS, input_size=64):
        try:
            from torchvision.models import vgg19
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ConfigError("percept.backend='pretrained' needs torchvision") from exc
        layers = list(vgg19(weights=weights).features.children())
        last = max(taps)
        super().__init__(layers[:last + 1], taps, input_size)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def prepare(self, x):
        return ((x + 1) / 2 - self.mean) / self.std


def build_extractor(backend="random", seed=0, **kwargs):
    """Construct a backend from the ``percept.backend`` / ``percept.seed`` settings."""
    if backend == "random":
        return RandomFeatures(seed=seed, **kwargs)
    if backend == "pretrained":
        return VGG19Features(**kwargs)
    raise ConfigError(f"unknown percept.backend {backend!r}")


def features(fx, x):
    return fx(x)


def perceptual_distance(fx, a, b):
    """Sum over taps of the mean absolute difference between feature maps."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = fx(a), fx(b)
    total = a.new_zeros(())
    for x, y in zip(fa, fb):
        total = total + F.l1_loss(x, y)
    return total
