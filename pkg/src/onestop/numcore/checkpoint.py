"""Checkpoint container.

A checkpoint is a numpy ``.npz`` archive (a zip of ``.npy`` files):

* ``param/<name>``     one array per model parameter, stored with its shape;
* ``adam_m/<name>``, ``adam_v/<name>``  optional Adam moments;
* ``__meta__``         a 0-d unicode array holding a JSON object with at
                       least ``format_version``, ``model_config`` and
                       ``optimizer`` (may be null) plus any extra keys.

Files are written to a temporary sibling and renamed into place so a
reader never observes a partial checkpoint.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict, optimizer=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    opt_meta = None
    if optimizer is not None:
        opt_meta = optimizer.config()
        for k, v in optimizer.first_moment.items():
            arrays[f"adam_m/{k}"] = v
        for k, v in optimizer.second_moment.items():
            arrays[f"adam_v/{k}"] = v
    full_meta = {"format_version": FORMAT_VERSION, "optimizer": opt_meta, **meta}
    arrays["__meta__"] = np.array(json.dumps(full_meta, sort_keys=True))

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(params, meta, optimizer_moments)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        params, moments = {}, {"m": {}, "v": {}}
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = z[key]
            elif key.startswith("adam_m/"):
                moments["m"][key[len("adam_m/"):]] = z[key]
            elif key.startswith("adam_v/"):
                moments["v"][key[len("adam_v/"):]] = z[key]
    return params, meta, moments
