"""Checkpoint directories: ``manifest.json`` plus a versioned weight blob."""

import contextlib
import hashlib
import json
from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
WEIGHTS_FILE = "weights.v1.pt"
MANIFEST_FILE = "manifest.json"


@contextlib.contextmanager
def seeded(seed):
    """Run a block (typically module construction) under a private torch RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def weights_hash(module):
    """SHA-256 over every parameter and buffer of ``module``, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_checkpoint(directory, kind, arch, modules, **extra):
    """Write ``modules`` (name -> nn.Module) and a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {name: m.state_dict() for name, m in modules.items()}
    torch.save(state, directory / WEIGHTS_FILE)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "weights": WEIGHTS_FILE,
    }
    manifest.update(extra)
    write_json(directory / MANIFEST_FILE, manifest)
    return directory


def read_manifest(directory, kind=None):
    directory = Path(directory)
    path = directory / MANIFEST_FILE
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    return manifest


def load_state(directory, manifest):
    path = Path(directory) / manifest.get("weights", WEIGHTS_FILE)
    if not path.is_file():
        raise CheckpointError(f"missing weight blob {path}")
    return torch.load(path, map_location="cpu", weights_only=True)
