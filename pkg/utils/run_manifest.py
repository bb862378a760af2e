import hashlib
import json
import logging
import os
import sys

import numpy as np

from analysis import __version__

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def canonical_json(value):
    return json.dumps(_plain(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command, arguments, config, seed=None, inputs=(), outputs=()):
    """Record what a run needs to be reproduced: arguments, config hash, seed, version, file digests."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "arguments": _plain(arguments),
        "config": _plain(config),
        "config_sha256": config_hash(config),
        "seed": seed,
        "version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "inputs": {path: file_hash(path) for path in inputs if path and os.path.isfile(path)},
        "outputs": [os.path.relpath(path, out_dir) for path in outputs],
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True, default=str)
    log.info("manifest written to %s (config %s)", path, manifest["config_sha256"][:12])
    return path
