"""Image tensors, dataset manifests, seeded batching and synthetic face datasets.

Images travel through the library as float tensors of shape ``(3, S, S)``
with values in ``[-1, 1]``; on disk they are 8-bit RGB PNGs.
"""

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from PIL import Image

from .errors import ManifestError, ShapeError

SIDES = (4, 8, 16, 32, 64)
HR_SIZE = 64
LR_SIZE = 16
ROLE_RESOLUTION = {"HR": HR_SIZE, "LR": LR_SIZE}


def check_image_shape(shape, sides=SIDES):
    """Validate a ``(3, S, S)`` or ``(B, 3, S, S)`` shape and return S."""
    shape = tuple(shape)
    if len(shape) not in (3, 4) or shape[-3] != 3:
        raise ShapeError(f"expected (3, S, S) or (B, 3, S, S), got {shape}")
    h, w = shape[-2:]
    if h != w:
        raise ShapeError(f"image must be square, got {h}x{w}")
    if sides is not None and h not in sides:
        raise ShapeError(f"side {h} not in {sides}")
    return h


def normalize(image):
    """Map 8-bit intensities (or reals on the same scale) to ``[-1, 1]``."""
    arr = np.asarray(image)
    check_image_shape(arr.shape)
    out = torch.from_numpy(arr.astype(np.float64) / 127.5 - 1.0).to(torch.float32)
    return out.clamp_(-1.0, 1.0)


def denormalize(image):
    """Inverse of :func:`normalize`, rounded half away from zero and clamped to uint8."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    v = (np.asarray(image, dtype=np.float64) + 1.0) * 127.5
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def read_png(path):
    """Read an image file as a uint8 ``(3, H, W)`` array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, pixels):
    """Write a uint8 ``(3, H, W)`` array (or an image tensor in [-1, 1]) as PNG."""
    if isinstance(pixels, torch.Tensor) or np.asarray(pixels).dtype != np.uint8:
        pixels = denormalize(pixels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels).transpose(1, 2, 0)).save(path, format="PNG")


def image_grid(images, nrow):
    """Tile ``(N, 3, S, S)`` images row-major into one ``(3, rows*S, nrow*S)`` tensor."""
    n, c, s, _ = images.shape
    rows = math.ceil(n / nrow)
    grid = images.new_full((c, rows * s, nrow * s), -1.0)
    for k in range(n):
        r, col = divmod(k, nrow)
        grid[:, r * s:(r + 1) * s, col * s:(col + 1) * s] = images[k]
    return grid


@dataclass(frozen=True)
class ImageRecord:
    id: str
    resolution: int
    path: Optional[Path] = None
    pixels: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def load(self):
        if self.pixels is not None:
            return self.pixels
        return read_png(self.path)


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered, immutable collection of same-size images with an HR or LR role."""

    role: str
    items: tuple

    def __post_init__(self):
        if self.role not in ROLE_RESOLUTION:
            raise ManifestError(f"unknown role {self.role!r}")
        object.__setattr__(self, "items", tuple(self.items))
        expected = ROLE_RESOLUTION[self.role]
        seen = set()
        for rec in self.items:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)
            if rec.resolution != expected:
                raise ManifestError(
                    f"resolution mismatch: {rec.id!r} is {rec.resolution}px but role "
                    f"{self.role} requires {expected}px")

    @property
    def resolution(self):
        return ROLE_RESOLUTION[self.role]

    @property
    def ids(self):
        return [rec.id for rec in self.items]

    def __len__(self):
        return len(self.items)

    @cached_property
    def images(self):
        """All images as one ``(N, 3, S, S)`` float tensor, loaded once."""
        s = self.resolution
        if not self.items:
            return torch.empty(0, 3, s, s)
        return torch.stack([normalize(rec.load()) for rec in self.items])

    def stack(self, indices):
        return self.images[torch.as_tensor(indices, dtype=torch.long)]

    def save(self, directory):
        """Write every image as PNG plus ``manifest.jsonl``; returns the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"role": self.role, "resolution": self.resolution})]
        for rec in self.items:
            name = f"{rec.id}.png"
            write_png(directory / name, rec.load())
            lines.append(json.dumps({"id": rec.id, "path": name}))
        path = directory / "manifest.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def load_manifest(path):
    """Read a JSON-lines manifest; image paths resolve relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        role, resolution = header["role"], int(header["resolution"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}:1: malformed header: {exc}") from exc
    if ROLE_RESOLUTION.get(role) != resolution:
        raise ManifestError(f"{path}: header resolution {resolution} does not match role {role!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            entry = json.loads(line)
            rid, rel = str(entry["id"]), entry["path"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from exc
        img_path = (path.parent / rel).resolve()
        if not img_path.is_file():
            raise ManifestError(f"{path}:{lineno}: image not found: {img_path}")
        with Image.open(img_path) as im:
            w, h = im.size
        if w != h:
            raise ManifestError(f"{path}:{lineno}: non-square image {w}x{h}")
        records.append(ImageRecord(id=rid, resolution=h, path=img_path))
    return Dataset(role=role, items=records)


# --- synthetic faces -------------------------------------------------------

_SUPERSAMPLE = 4


def _render_face(rng, size):
    """Render one face-like RGB image in [0, 1], shape (3, size, size)."""
    n = size * _SUPERSAMPLE
    t = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    v, u = np.meshgrid(t, t, indexing="ij")

    bg = rng.uniform(0.05, 0.95, size=3)
    bg2 = np.clip(bg + rng.normal(0, 0.15, size=3), 0, 1)
    ramp = (v + 1) / 2
    img = bg[:, None, None] * (1 - ramp) + bg2[:, None, None] * ramp

    cx, cy = rng.normal(0, 0.06, size=2)
    rx, ry = rng.uniform(0.5, 0.68), rng.uniform(0.66, 0.86)
    roll = rng.uniform(-0.35, 0.35)
    yaw = rng.uniform(-0.2, 0.2)
    c, s = math.cos(roll), math.sin(roll)
    # head-local coordinates
    lu = c * (u - cx) + s * (v - cy)
    lv = -s * (u - cx) + c * (v - cy)

    skin = np.array([0.95, 0.75, 0.6]) * rng.uniform(0.45, 1.0) + rng.normal(0, 0.04, size=3)
    head = (lu / rx) ** 2 + (lv / ry) ** 2 <= 1.0
    img = np.where(head, skin[:, None, None], img)

    hair = rng.uniform(0, 0.5, size=3)
    hairline = head & (lv < -ry * rng.uniform(0.45, 0.7))
    img = np.where(hairline, hair[:, None, None], img)

    eye_r = rng.uniform(0.07, 0.12) * rx / 0.6
    eye_dx, eye_y = 0.36 * rx, -0.18 * ry
    eye_col = rng.uniform(0.0, 0.25, size=3)
    landmarks = []
    for sign in (-1, 1):
        ex = yaw + sign * eye_dx
        eye = ((lu - ex) ** 2 + ((lv - eye_y) * 1.4) ** 2) <= eye_r ** 2
        img = np.where(eye & head, eye_col[:, None, None], img)
        landmarks.append((ex, eye_y))

    mouth_w, mouth_h = rng.uniform(0.25, 0.45) * rx, rng.uniform(0.03, 0.07)
    mouth_y = 0.42 * ry
    mouth = (np.abs(lu - yaw) <= mouth_w / 2) & (np.abs(lv - mouth_y) <= mouth_h)
    mouth_col = np.array([0.55, 0.1, 0.12]) * rng.uniform(0.4, 1.0)
    img = np.where(mouth & head, mouth_col[:, None, None], img)
    landmarks.append((yaw, mouth_y))

    theta = rng.uniform(0, 2 * math.pi)
    gain = rng.uniform(0.0, 0.35)
    light = 1.0 + gain * (u * math.cos(theta) + v * math.sin(theta))
    img = img * light * rng.uniform(0.75, 1.15)

    img = img.reshape(3, size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(2, 4))
    # landmark centres back to image pixel coordinates (x, y)
    pix = []
    for lx, ly in landmarks:
        gx = c * lx - s * ly + cx
        gy = s * lx + c * ly + cy
        pix.append(((gx + 1) / 2 * size - 0.5, (gy + 1) / 2 * size - 0.5))
    return np.clip(img, 0.0, 1.0), pix


def _gaussian_kernel(sigma):
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img, sigma):
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    pad = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    tmp = sum(k[i] * pad[:, :, i:i + img.shape[2]] for i in range(len(k)))
    return sum(k[i] * tmp[:, i:i + img.shape[1], :] for i in range(len(k)))


def _camera_degrade(rng, img):
    """Blur, 4x area-downsample, colour cast and sensor noise: a crude real-LR look."""
    img = _blur(img, rng.uniform(0.6, 2.0))
    c, h, w = img.shape
    img = img.reshape(c, h // 4, 4, w // 4, 4).mean(axis=(2, 4))
    img = img * rng.uniform(0.85, 1.15, size=3)[:, None, None]
    img = img + rng.normal(0, rng.uniform(0.01, 0.07), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(count, resolution, seed):
    """Procedural face-like dataset, a pure function of ``(count, resolution, seed)``.

    64px images form an HR set. 16px images are rendered at 64px and passed
    through a randomized camera degradation, forming an LR set.
    """
    if resolution not in ROLE_RESOLUTION.values():
        raise ShapeError(f"synthetic resolution must be 16 or 64, got {resolution}")
    if count < 0:
        raise ValueError("count must be non-negative")
    role = "HR" if resolution == HR_SIZE else "LR"
    children = np.random.SeedSequence([int(seed), resolution]).spawn(count)
    records = []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        img, landmarks = _render_face(rng, HR_SIZE)
        if role == "LR":
            img = _camera_degrade(rng, img)
            landmarks = [((x + 0.5) / 4 - 0.5, (y + 0.5) / 4 - 0.5) for x, y in landmarks]
        pixels = np.rint(img * 255).astype(np.uint8)
        records.append(ImageRecord(id=f"{role.lower()}{k:05d}", resolution=resolution,
                                   pixels=pixels, meta={"landmarks": landmarks}))
    return Dataset(role=role, items=records)


# --- batching --------------------------------------------------------------

class Batch(NamedTuple):
    epoch: int
    ids: list
    indices: np.ndarray
    images: torch.Tensor


class BatchStream:
    """Seeded epoch-wise shuffling; the final short batch of an epoch is kept.

    Iterating yields batches forever, epoch after epoch. The order of epoch
    ``e`` depends only on ``(len(source), batch_size, seed, e)``.
    """

    def __init__(self, source, batch_size, seed):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(source) == 0:
            raise ValueError("cannot batch an empty dataset")
        self.source = source
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.epoch = 0

    def order(self, epoch):
        rng = np.random.default_rng([self.seed, int(epoch)])
        return rng.permutation(len(self.source))

    def epoch_batches(self, epoch):
        order = self.order(epoch)
        ids = self.source.ids
        out = []
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            out.append(Batch(epoch, [ids[i] for i in idx], idx, self.source.stack(idx)))
        return out

    def next_epoch(self):
        batches = self.epoch_batches(self.epoch)
        self.epoch += 1
        return batches

    def __iter__(self):
        while True:
            yield from self.next_epoch()

    def batches_per_epoch(self):
        return math.ceil(len(self.source) / self.batch_size)


def batch_iter(dataset, batch_size, seed):
    return BatchStream(dataset, batch_size, seed)
