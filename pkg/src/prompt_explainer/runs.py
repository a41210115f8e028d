"""Run directories: what an optimization, sampling or audit leaves on disk.

Layout (all paths in report.json are relative to the run directory)::

    config.json      resolved configuration, including the seed
    trace.csv        restart, step, seed, per-seed loss
    heldout.csv      per-restart initial / final-train / held-out losses
    embeddings.bin   selected restart's N x d prompt embeddings
    prompt.txt       decoded text (hard runs)
    samples/         PNGs + samples.csv
    masks/           segmentation masks (PNG, 0/255)
    report.json      summary, validated against report.schema.json
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import struct
from importlib import resources
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from .sampler import SampleSet, Stats, save_samples
from .soft_prompt import RunRecord

SCHEMA_VERSION = 1


class SchemaViolation(ValueError):
    pass


# ---------------------------------------------------------------------------
# directories
# ---------------------------------------------------------------------------

def prepare_run_dir(path: str | Path) -> Path:
    """Create ``path``; if it already holds a finished run, return a new
    timestamped subdirectory instead so nothing completed is overwritten."""
    path = Path(path)
    if (path / "report.json").exists():
        stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
        path = path / f"rerun-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def timestamped(path: Path) -> Path:
    """``path`` itself if free, else ``stem-<timestamp>.suffix`` beside it."""
    if not path.exists():
        return path
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
    return path.with_name(f"{path.stem}-{stamp}{path.suffix}")


def rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


# ---------------------------------------------------------------------------
# embeddings.bin: little-endian uint32 N, uint32 d, then N*d float32 row-major
# ---------------------------------------------------------------------------

def write_embeddings(path: str | Path, matrix: torch.Tensor) -> None:
    m = matrix.detach().cpu().to(torch.float32).contiguous().numpy()
    if m.ndim != 2:
        raise ValueError("embeddings must be a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.astype("<f4").tobytes(order="C"))


def read_embeddings(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    n, d = struct.unpack("<II", data[:8])
    body = data[8:]
    if len(body) != 4 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} float32 payload, got {len(body)} bytes")
    return torch.from_numpy(np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32))


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------

def clean(x: Any) -> Any:
    """JSON-safe copy: non-finite floats -> None, tuples -> lists, numpy -> python."""
    if isinstance(x, dict):
        return {str(k): clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, Path):
        return x.as_posix()
    return x


def write_json(path: str | Path, obj: Any) -> None:
    with open(path, "w") as fh:
        json.dump(clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _float(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# optimization records
# ---------------------------------------------------------------------------

def write_trace(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["restart", "step", "seed", "loss"])
        for r in record.restarts:
            for st in r.trace:
                for seed, v in zip(st.seeds, st.per_seed):
                    w.writerow([r.restart, st.step, seed, _float(v)])


def read_trace(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"restart": int(r["restart"]), "step": int(r["step"]), "seed": int(r["seed"]),
                 "loss": float(r["loss"])} for r in csv.DictReader(fh)]


def write_heldout(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["restart", "restart_seed", "diverged", "initial_heldout", "final_train", "heldout", "selected"])
        for r in record.restarts:
            w.writerow([r.restart, r.seed, int(r.diverged), _float(r.initial_heldout),
                        _float(r.final_train), _float(r.heldout), int(r.restart == record.selected)])


def record_config(record: RunRecord) -> dict:
    return {
        "kind": record.kind,
        "template": record.template,
        "objective": {"kind": record.objective.kind, "class": record.objective.cls,
                      "feature": record.objective.feature, "lambda": record.objective.lam},
        "optimizer": record.config,
        "heldout_seeds": list(record.heldout_seeds),
    }


def write_record(record: RunRecord, directory: Path, root: Path, name: str) -> dict:
    """Persist one RunRecord under ``directory``; returns its report entry."""
    directory.mkdir(parents=True, exist_ok=True)
    arts = {}
    write_json(directory / "run.json", record_config(record))
    arts["run"] = rel(directory / "run.json", root)
    write_trace(directory / "trace.csv", record)
    arts["trace"] = rel(directory / "trace.csv", root)
    write_heldout(directory / "heldout.csv", record)
    arts["heldout"] = rel(directory / "heldout.csv", root)
    write_embeddings(directory / "embeddings.bin", record.final_embeddings)
    arts["embeddings"] = rel(directory / "embeddings.bin", root)
    if record.kind == "hard" and record.text is not None:
        (directory / "prompt.txt").write_text(record.text + "\n")
        arts["prompt"] = rel(directory / "prompt.txt", root)
    restarts = []
    for r in record.restarts:
        entry = {"restart": r.restart, "seed": r.seed, "diverged": r.diverged, "reason": r.reason,
                 "initial_heldout": r.initial_heldout, "final_train": r.final_train, "heldout": r.heldout}
        if "words" in r.extra:
            entry["words"] = list(r.extra["words"])
        restarts.append(entry)
    return clean({
        "name": name, "kind": record.kind, "objective": record.objective.describe(),
        "template": record.template, "text": record.text, "selected_restart": record.selected,
        "heldout_loss": record.heldout_loss, "final_train": record.best.final_train,
        "restarts": restarts, "artifacts": arts,
    })


def load_run(directory: str | Path) -> tuple[dict, torch.Tensor]:
    """(run.json contents, embeddings) of a persisted record."""
    directory = Path(directory)
    cfg = json.loads((directory / "run.json").read_text())
    return cfg, read_embeddings(directory / "embeddings.bin")


# ---------------------------------------------------------------------------
# samples and masks
# ---------------------------------------------------------------------------

def write_sample_set(samples: SampleSet, directory: Path, root: Path, name: str, seed_base: int,
                     targets=(), scores: dict[str, Stats] | None = None) -> dict:
    manifest = save_samples(samples, directory, targets)
    files = [rel(directory / f"sample_{s:08d}.png", root) for s in samples.seeds]
    return clean({
        "name": name, "n": len(samples), "seed_base": seed_base, "record_id": samples.record_id,
        "scores": {k: vars(v) for k, v in (scores or {}).items()},
        "artifacts": {"manifest": rel(manifest, root), "images": files},
    })


def write_mask(path: Path, mask: torch.Tensor) -> None:
    from PIL import Image

    arr = mask.detach().cpu().numpy().astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path)) > 127


# ---------------------------------------------------------------------------
# report.json
# ---------------------------------------------------------------------------

def report_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("report.schema.json").read_text())


def iter_artifact_paths(obj: Any) -> Iterator[str]:
    """Every path listed under an ``artifacts`` key, at any depth."""
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k == "artifacts" and isinstance(v, dict):
                for p in v.values():
                    if isinstance(p, str):
                        yield p
                    else:
                        yield from p
            else:
                yield from iter_artifact_paths(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from iter_artifact_paths(v)


def validate_report(report: dict, root: str | Path | None = None) -> None:
    import jsonschema

    try:
        jsonschema.validate(report, report_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaViolation(f"report.json invalid at {where}: {exc.message}") from None
    if root is not None:
        missing = [p for p in iter_artifact_paths(report) if not (Path(root) / p).exists()]
        if missing:
            raise SchemaViolation(f"report.json references missing artifacts: {missing[:5]}")


def write_report(root: Path, report: dict) -> Path:
    report = clean({"schema_version": SCHEMA_VERSION, **report})
    validate_report(report, root)
    path = root / "report.json"
    write_json(path, report)
    return path


def load_report(root: str | Path) -> dict:
    root = Path(root)
    path = root / "report.json" if root.is_dir() else root
    report = json.loads(path.read_text())
    validate_report(report, path.parent)
    return report
