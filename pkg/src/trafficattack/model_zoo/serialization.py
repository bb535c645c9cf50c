"""Model container format.

A model file is an uncompressed ``.npz`` archive holding

* ``meta``: a JSON document (stored as a 0-d unicode array) with keys
  ``format`` ("trafficattack-model"), ``version`` (1), ``kind``, ``role``
  ("target" or "substitute"), ``model_id``, ``config`` (constructor
  arguments), ``shapes`` (parameter name -> shape) and ``normalizer``
  (``{"mu", "sigma"}`` or null) and ``extra`` (free-form provenance such
  as the producing stage's manifest hash);
* one ``param/<name>`` float64 array per entry of the model's state dict.

Loading rebuilds the model from ``config`` and checks every shape, so a file
written by ``save_model`` predicts bit-identically after ``load_model``.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from ..dataset import Normalizer
from ..errors import FormatError
from .base import MODEL_KINDS, ModelBundle

FORMAT = "trafficattack-model"
VERSION = 1


def save_model(path: str | Path, bundle: ModelBundle, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model = bundle.model
    state = model.state_dict()
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "role": bundle.role,
        "model_id": model.model_id,
        "config": model.get_config(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "normalizer": None if bundle.normalizer is None
        else {"mu": bundle.normalizer.mu, "sigma": bundle.normalizer.sigma},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in state.items()}
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_model(path: str | Path) -> ModelBundle:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            state = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
    except (zipfile.BadZipFile, EOFError, ValueError, KeyError, OSError) as exc:
        raise FormatError(f"{path}: not a readable model file ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise FormatError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {meta.get('version')!r}")
    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        # the substitute registers itself on import
        from .. import substitute  # noqa: F401
    if kind not in MODEL_KINDS:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    shapes = meta.get("shapes", {})
    if set(shapes) != set(state) or any(list(state[k].shape) != shapes[k] for k in state):
        raise FormatError(f"{path}: parameter shapes do not match the header")
    try:
        model = MODEL_KINDS[kind].from_config(meta["config"], state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: cannot rebuild {kind} model ({exc})") from exc
    norm = meta.get("normalizer")
    normalizer = None if norm is None else Normalizer(float(norm["mu"]), float(norm["sigma"]))
    return ModelBundle(model, normalizer, meta.get("role", "target"))
