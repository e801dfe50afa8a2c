"""Text checkpoints.

Documents are JSON with every float written to 17 significant digits, so a
save/load cycle restores each double exactly. Matrices are written one row
per line to keep diffs readable.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from .corpus import LabelVocab, SyntheticSpec, TokenVocab
from .em import TrainConfig, TrainHistory
from .encoder import EncoderParams
from .model import DmrParams

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _float(x: float) -> str:
    if not math.isfinite(x):
        raise CheckpointError(f"cannot serialize non-finite value {x}")
    s = f"{x:.17g}"
    return s if any(ch in s for ch in ".e") else s + ".0"


def _scalar(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)) or x is None or isinstance(x, str):
        return json.dumps(x.item() if isinstance(x, np.bool_) else x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return _float(float(x))
    raise CheckpointError(f"cannot serialize {type(x).__name__}")


def dumps(obj: Any, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json.dumps(str(k))}: {dumps(v, indent + 1)}' for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if any(isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            items = [f"{pad}  {dumps(v, indent + 1)}" for v in obj]
            return "[\n" + ",\n".join(items) + f"\n{pad}]"
        return "[" + ", ".join(_scalar(v) for v in obj) + "]"
    return _scalar(obj)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"{path}: write failed: {exc}") from exc


def read_document(path: str | Path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: not UTF-8 (byte offset {exc.start})") from exc
    except json.JSONDecodeError as exc:
        # documents are ASCII, so the character position is the byte offset
        raise CheckpointError(f"{path}: parse error at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: top level must be an object")
    return doc


@dataclass
class Checkpoint:
    config: TrainConfig
    token_vocab: TokenVocab
    marker_vocab: LabelVocab
    encoder: EncoderParams
    params: DmrParams
    history_digest: dict
    format_version: int = FORMAT_VERSION


def history_digest(history: TrainHistory) -> dict:
    text = history.to_text()
    return {
        "iterations": len(history),
        "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
        "final_nll": history.records[-1].nll_after if history.records else None,
        "stopped_early": history.stopped_early,
    }


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    p = ckpt.params
    return {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "token_vocab": {"tokens": ckpt.token_vocab.id_to_token, "unk_id": ckpt.token_vocab.unk_id},
        "marker_vocab": {"markers": ckpt.marker_vocab.id_to_label},
        "encoder": {"embeddings": ckpt.encoder.embeddings},
        "dmr": {"w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2, "phi": p.phi},
        "history": ckpt.history_digest,
    }


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_text(path, dumps(checkpoint_to_dict(ckpt)) + "\n")


def _section(doc: dict, name: str) -> dict:
    if name not in doc or not isinstance(doc[name], dict):
        raise CheckpointError(f"missing section {name!r}")
    return doc[name]


def _matrix(section: dict, name: str, ndim: int) -> np.ndarray:
    if name not in section:
        raise CheckpointError(f"missing field {name!r}")
    try:
        arr = np.array(section[name], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"field {name!r} is not a numeric array") from exc
    if arr.ndim != ndim and not (arr.size == 0 and ndim == 2):
        raise CheckpointError(f"field {name!r} must have {ndim} dimensions")
    if not np.all(np.isfinite(arr)):
        raise CheckpointError(f"field {name!r} has non-finite entries")
    return arr


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unrecognized format_version {version!r}")
    cfg_doc = _section(doc, "config")
    known = {f.name for f in fields(TrainConfig)}
    try:
        config = TrainConfig(**{k: v for k, v in cfg_doc.items() if k in known})
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config: {exc}") from exc
    tv = _section(doc, "token_vocab")
    mv = _section(doc, "marker_vocab")
    try:
        token_vocab = TokenVocab(list(tv["tokens"]), unk_id=int(tv["unk_id"]))
        marker_vocab = LabelVocab(list(mv["markers"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"invalid vocabulary: {exc}") from exc

    emb = _matrix(_section(doc, "encoder"), "embeddings", 2)
    dmr = _section(doc, "dmr")
    w1, b1, w2, b2, phi = (_matrix(dmr, n, nd) for n, nd in
                          (("w1", 2), ("b1", 1), ("w2", 2), ("b2", 1), ("phi", 2)))
    k, d, d_e, v, n = config.k, config.d, config.d_e, len(token_vocab), len(marker_vocab)
    expected = {
        "embeddings": (emb, (v, d_e)),
        "w1": (w1, (d, 4 * d_e)),
        "b1": (b1, (d,)),
        "w2": (w2, (k, d)),
        "b2": (b2, (k,)),
        "phi": (phi, (k, n)),
    }
    for name, (arr, shape) in expected.items():
        if arr.shape != shape:
            raise CheckpointError(f"{name} has shape {arr.shape}, config and vocabularies imply {shape}")
    return Checkpoint(config, token_vocab, marker_vocab, EncoderParams(emb),
                      DmrParams(w1, b1, w2, b2, phi), dict(doc.get("history") or {}), version)


def load_checkpoint(path: str | Path) -> Checkpoint:
    doc = read_document(path)
    try:
        return checkpoint_from_dict(doc)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def spec_to_dict(spec: SyntheticSpec) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "transition_true": spec.transition_true,
        "latent_token_dists": spec.latent_token_dists,
        "latent_prior_weights": spec.latent_prior_weights,
        "sentence_length_range": list(spec.sentence_length_range),
    }


def save_spec(path: str | Path, spec: SyntheticSpec) -> None:
    atomic_write_text(path, dumps(spec_to_dict(spec)) + "\n")


def load_spec(path: str | Path) -> SyntheticSpec:
    doc = read_document(path)
    try:
        return SyntheticSpec(
            _matrix(doc, "transition_true", 2),
            _matrix(doc, "latent_token_dists", 2),
            _matrix(doc, "latent_prior_weights", 1),
            tuple(doc.get("sentence_length_range", (3, 8))),
        )
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid synthetic spec: {exc}") from exc
