"""Checkpoint persistence: a JSON manifest plus one raw little-endian float
file per tensor, named by tensor path. The manifest records shapes, dtypes
and SHA-256 digests; loading verifies every digest and reproduces bit-equal
forward outputs."""

import hashlib
import json
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import prompts as pr
from . import retrieval as rt
from .errors import DataError

MANIFEST = "manifest.json"


def _tensor_files(model: rt.DsiModel) -> dict[str, np.ndarray]:
    tensors = {f"encoder.{name}": arr for name, arr in model.encoder.params.items()}
    tensors["classifier.weights"] = model.classifier.weights
    if model.pool is not None:
        tensors.update(model.pool.params())
    return tensors


def _le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr, dtype=dt)


def save_checkpoint(dir_path, model: rt.DsiModel, timestep: int, config_hash: str = "") -> None:
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = _tensor_files(model)
    index = {}
    for path, arr in tensors.items():
        fname = path.replace("/", "_") + ".bin"
        raw = _le(arr).tobytes()
        (out / fname).write_bytes(raw)
        index[path] = {
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "file": fname,
            "sha256": hashlib.sha256(raw).hexdigest(),
        }
    manifest = {
        "config_hash": config_hash,
        "timestep": timestep,
        "dtype": str(model.dtype),
        "encoder_config": model.encoder.config.to_json(),
        "encoder_frozen": model.encoder.frozen,
        "registry": model.registry.to_json(),
        "classifier": {
            "segments": [list(s) for s in model.classifier.segments],
            "frozen": list(model.classifier.frozen),
        },
        "pool": None if model.pool is None else {
            "strategy": model.pool.strategy,
            "top_n": model.pool.top_n,
            "provenance": list(model.pool.provenance),
            "frozen": [bool(x) for x in model.pool.frozen],
            "version": model.pool.version,
        },
        "tensors": index,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _read_tensor(dir_path: Path, meta: dict) -> np.ndarray:
    raw = (dir_path / meta["file"]).read_bytes()
    if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise DataError(f"checkpoint tensor {meta['file']} fails its digest")
    dt = np.dtype(meta["dtype"]).newbyteorder("<")
    arr = np.frombuffer(raw, dtype=dt).reshape(meta["shape"])
    # frombuffer views are read-only; training needs writable tensors
    return np.array(arr, dtype=np.dtype(meta["dtype"]), copy=True)


def load_checkpoint(dir_path) -> tuple[rt.DsiModel, dict]:
    src = Path(dir_path)
    manifest_path = src / MANIFEST
    if not manifest_path.exists():
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    config = enc.EncoderConfig.from_json(manifest["encoder_config"])
    tensors = {path: _read_tensor(src, meta) for path, meta in manifest["tensors"].items()}

    params = {p[len("encoder."):]: a for p, a in tensors.items() if p.startswith("encoder.")}
    state = enc.EncoderState(config=config, params=params, frozen=manifest["encoder_frozen"])
    classifier = rt.Classifier(
        weights=tensors["classifier.weights"],
        segments=[tuple(s) for s in manifest["classifier"]["segments"]],
        frozen=list(manifest["classifier"]["frozen"]),
    )
    registry = rt.DocidRegistry.from_json(manifest["registry"])
    pool = None
    if manifest["pool"] is not None:
        meta = manifest["pool"]
        pool = pr.PromptPool(
            strategy=meta["strategy"],
            prompts=tensors["pool.prompts"],
            keys=tensors["pool.keys"],
            attn=tensors.get("pool.attn"),
            frozen=np.asarray(meta["frozen"], dtype=bool),
            top_n=meta["top_n"],
            provenance=list(meta["provenance"]),
            version=meta.get("version", 0),
        )
    model = rt.DsiModel(encoder=state, classifier=classifier, registry=registry, pool=pool)
    return model, manifest
