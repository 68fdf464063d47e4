"""Dataset files and the on-disk model store.

Datasets are line-oriented TSV, one file per phase named
``phase_<t>.tsv``.  The first line is a header ``#dim <p>``; every data
line is

    label<TAB>type:id[,type:id...]<TAB>idx:val[ idx:val...]

with a binary label, optional entity ids and sparse features.  Floats
are written with ``repr`` so a parse of a serialization reproduces the
dataset exactly.

The model store keeps one directory per round holding ``fixed.model``,
one ``random_<type>.models`` file per entity type (JSON lines, one
record per entity id) and a ``meta`` file.  Every record stores the
mean weights and the full curvature payload, and round-trips
bit-exactly for all four representations.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ParseError,
    ShapeError,
    StoreIntegrityError,
    StoreVersionError,
    ValidationError,
)
from .hessian import (
    AdamMoment,
    DfpMemory,
    DiagonalHessian,
    FullHessian,
    HessianRepr,
    PriorDistribution,
)
from .model import GlmixModel, GlmModel, LabeledExample, PhaseDataset, SparseVector

__all__ = [
    "FORMAT_VERSION",
    "phase_path",
    "parse_phase",
    "serialize_phase",
    "write_stream",
    "read_stream",
    "save_round",
    "load_round",
    "latest_round",
]

FORMAT_VERSION = 1

_PHASE_RE = re.compile(r"phase_(\d+)\.tsv$")


def phase_path(directory, t: int) -> Path:
    return Path(directory) / f"phase_{t}.tsv"


def _parse_features(field: str, dim: int, where: str) -> SparseVector:
    if not field:
        return SparseVector.zeros(dim)
    pairs = []
    seen = set()
    for token in field.split(" "):
        if ":" not in token:
            raise ParseError(f"{where}: feature token {token!r} is not idx:val")
        idx_s, val_s = token.split(":", 1)
        try:
            idx = int(idx_s)
            val = float(val_s)
        except ValueError as exc:
            raise ParseError(f"{where}: bad feature token {token!r}") from exc
        if idx < 0 or idx >= dim:
            raise ParseError(f"{where}: feature index {idx} outside [0, {dim})")
        if idx in seen:
            raise ParseError(f"{where}: duplicate feature index {idx}")
        if not np.isfinite(val):
            raise ParseError(f"{where}: non-finite feature value {val_s!r}")
        seen.add(idx)
        pairs.append((idx, val))
    return SparseVector.from_pairs(pairs, dim)


def _parse_entities(field: str, where: str) -> dict[str, str]:
    if not field:
        return {}
    out: dict[str, str] = {}
    for token in field.split(","):
        if ":" not in token:
            raise ParseError(f"{where}: entity token {token!r} is not type:id")
        etype, eid = token.split(":", 1)
        if not etype or not eid:
            raise ParseError(f"{where}: empty entity type or id in {token!r}")
        if etype in out:
            raise ParseError(f"{where}: duplicate entity type {etype!r}")
        out[etype] = eid
    return out


def parse_phase(path, phase_index: Optional[int] = None) -> PhaseDataset:
    """Read one phase file; the index defaults to the one in the filename."""
    path = Path(path)
    if phase_index is None:
        match = _PHASE_RE.search(path.name)
        phase_index = int(match.group(1)) if match else 0
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#dim "):
        raise ParseError(f"{path}:1: missing '#dim <p>' header")
    try:
        dim = int(lines[0][len("#dim "):])
    except ValueError as exc:
        raise ParseError(f"{path}:1: bad dimension in header") from exc
    if dim < 0:
        raise ParseError(f"{path}:1: dimension must be non-negative")

    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        where = f"{path}:{lineno}"
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"{where}: expected 3 tab-separated fields, got {len(fields)}")
        label_s, entity_s, feature_s = fields
        if label_s not in ("0", "1"):
            raise ParseError(f"{where}: label must be 0 or 1, got {label_s!r}")
        examples.append(
            LabeledExample(
                _parse_features(feature_s, dim, where),
                int(label_s),
                _parse_entities(entity_s, where),
            )
        )
    return PhaseDataset(phase_index, examples, dim)


def serialize_phase(data: PhaseDataset, path) -> Path:
    """Write one phase file; inverse of :func:`parse_phase`.

    Only offset-free datasets are representable (offsets are an
    in-memory training device, not part of the interchange format).
    """
    if np.any(data.offsets != 0.0):
        raise ValidationError("datasets with non-zero offsets are not serializable")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"#dim {data.feature_dim}"]
    for ex in data.examples:
        for etype, eid in ex.entity_ids.items():
            if any(c in etype for c in ":,\t\n") or any(c in eid for c in ",\t\n"):
                raise ValidationError(
                    f"entity {etype!r}:{eid!r} contains a reserved character"
                )
        entity_s = ",".join(f"{t}:{i}" for t, i in sorted(ex.entity_ids.items()))
        feature_s = " ".join(f"{i}:{v!r}" for i, v in ex.features.pairs())
        lines.append(f"{ex.label}\t{entity_s}\t{feature_s}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_stream(phases: Sequence[PhaseDataset], directory) -> list[Path]:
    directory = Path(directory)
    return [serialize_phase(ph, phase_path(directory, ph.phase_index)) for ph in phases]


def read_stream(directory) -> list[PhaseDataset]:
    """Load every phase file in a directory; phases must be contiguous from 0."""
    directory = Path(directory)
    found = {}
    for path in directory.glob("phase_*.tsv"):
        match = _PHASE_RE.search(path.name)
        if match:
            found[int(match.group(1))] = path
    if not found:
        raise ValidationError(f"no phase_<t>.tsv files in {directory}")
    indices = sorted(found)
    if indices != list(range(len(indices))):
        raise ValidationError(f"phase indices must be contiguous from 0, got {indices}")
    return [parse_phase(found[t], t) for t in indices]


# --------------------------------------------------------------------------
# Model store
# --------------------------------------------------------------------------


def _encode_hessian(repr_: HessianRepr) -> dict:
    if isinstance(repr_, FullHessian):
        return {
            "type": "full",
            "dim": repr_.dim,
            "matrix": repr_.matrix.ravel().tolist(),
        }
    if isinstance(repr_, DiagonalHessian):
        return {"type": "diagonal", "values": repr_.values.tolist()}
    if isinstance(repr_, DfpMemory):
        return {
            "type": "dfp",
            "memory_size": repr_.memory_size,
            "steps": repr_.steps.tolist(),
            "grad_diffs": repr_.grad_diffs.tolist(),
            "rhos": repr_.rhos.tolist(),
        }
    if isinstance(repr_, AdamMoment):
        return {"type": "adam", "v_hat": repr_.v_hat.tolist(), "scale": repr_.scale}
    raise ValidationError(f"unknown Hessian representation {type(repr_).__name__}")


def _decode_hessian(payload: dict) -> HessianRepr:
    kind = payload.get("type")
    if kind == "full":
        dim = int(payload["dim"])
        matrix = np.asarray(payload["matrix"], dtype=np.float64).reshape(dim, dim)
        return FullHessian(matrix)
    if kind == "diagonal":
        return DiagonalHessian(np.asarray(payload["values"], dtype=np.float64))
    if kind == "dfp":
        return DfpMemory(
            np.asarray(payload["steps"], dtype=np.float64),
            np.asarray(payload["grad_diffs"], dtype=np.float64),
            np.asarray(payload["rhos"], dtype=np.float64),
            int(payload["memory_size"]),
        )
    if kind == "adam":
        return AdamMoment(
            np.asarray(payload["v_hat"], dtype=np.float64), float(payload["scale"])
        )
    raise StoreIntegrityError(f"unknown Hessian payload type {kind!r}")


def _encode_record(model: GlmModel, prior: PriorDistribution) -> dict:
    if model.weights != prior.mean:
        raise ValidationError("stored model weights must equal the posterior mean")
    return {
        "dim": model.dim,
        "l2_base": model.l2_base,
        "mean": [[i, v] for i, v in model.weights.pairs()],
        "hessian": _encode_hessian(prior.precision),
    }


def _decode_record(payload: dict) -> tuple[GlmModel, PriorDistribution]:
    dim = int(payload["dim"])
    mean = SparseVector.from_pairs(
        [(int(i), float(v)) for i, v in payload["mean"]], dim
    )
    model = GlmModel(mean, float(payload["l2_base"]))
    prior = PriorDistribution(mean, _decode_hessian(payload["hessian"]))
    return model, prior


def _round_dir(store_dir, t: int) -> Path:
    return Path(store_dir) / f"round_{t:06d}"


def latest_round(store_dir) -> Optional[int]:
    store_dir = Path(store_dir)
    if not store_dir.is_dir():
        return None
    rounds = []
    for path in store_dir.glob("round_*"):
        try:
            rounds.append(int(path.name.split("_", 1)[1]))
        except ValueError:
            continue
    return max(rounds) if rounds else None


def save_round(store_dir, t: int, model: GlmixModel, priors: dict, meta: dict) -> Path:
    """Persist one round: fixed model, per-type entity records and metadata.

    ``meta`` must provide lambda_f, hessian_mode and counter; format
    version and round index are added here.
    """
    for key in ("lambda_f", "hessian_mode", "counter"):
        if key not in meta:
            raise ValidationError(f"meta is missing required key {key!r}")
    round_dir = _round_dir(store_dir, t)
    round_dir.mkdir(parents=True, exist_ok=True)

    fixed_prior = priors.get("fixed")
    if fixed_prior is None:
        fixed_prior = PriorDistribution(
            model.fixed.weights,
            DiagonalHessian.scaled_identity(model.fixed.dim, model.fixed.l2_base),
        )
    (round_dir / "fixed.model").write_text(
        json.dumps(_encode_record(model.fixed, fixed_prior)) + "\n", encoding="utf-8"
    )

    for etype in model.entity_types():
        per_entity = model.random_effects[etype]
        per_priors = priors.get("random", {}).get(etype, {})
        lines = []
        for eid in sorted(per_entity):
            prior = per_priors.get(eid)
            if prior is None:
                raise ValidationError(f"missing prior for entity {etype}:{eid}")
            record = _encode_record(per_entity[eid], prior)
            record["entity_id"] = eid
            lines.append(json.dumps(record))
        (round_dir / f"random_{etype}.models").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
        )

    full_meta = dict(meta)
    full_meta["format_version"] = FORMAT_VERSION
    full_meta["t"] = int(t)
    (round_dir / "meta").write_text(json.dumps(full_meta) + "\n", encoding="utf-8")
    return round_dir


def _read_json(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StoreIntegrityError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise StoreIntegrityError(f"corrupt store file {path}: {exc}") from exc


def load_round(store_dir, t: Optional[int] = None) -> tuple[GlmixModel, dict, dict]:
    """Load one round (the latest when ``t`` is omitted).

    Returns (model, priors, meta).  A format-version mismatch raises
    StoreVersionError before any model state is reconstructed.
    """
    if t is None:
        t = latest_round(store_dir)
        if t is None:
            raise StoreIntegrityError(f"no rounds found under {store_dir}")
    round_dir = _round_dir(store_dir, t)
    if not round_dir.is_dir():
        raise StoreIntegrityError(f"round directory {round_dir} does not exist")

    meta = _read_json(round_dir / "meta")
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise StoreVersionError(
            f"store format version {version!r} is not supported (expected {FORMAT_VERSION})"
        )

    try:
        fixed_model, fixed_prior = _decode_record(_read_json(round_dir / "fixed.model"))
    except (KeyError, TypeError, ShapeError) as exc:
        raise StoreIntegrityError(f"corrupt fixed.model in {round_dir}: {exc}") from exc

    random_effects: dict[str, dict[str, GlmModel]] = {}
    random_priors: dict[str, dict[str, PriorDistribution]] = {}
    for path in sorted(round_dir.glob("random_*.models")):
        etype = path.name[len("random_") : -len(".models")]
        models: dict[str, GlmModel] = {}
        priors_for_type: dict[str, PriorDistribution] = {}
        text = path.read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                eid = payload["entity_id"]
                models[eid], priors_for_type[eid] = _decode_record(payload)
            except (json.JSONDecodeError, KeyError, TypeError, ShapeError) as exc:
                raise StoreIntegrityError(f"corrupt record {path}:{lineno}: {exc}") from exc
        random_effects[etype] = models
        random_priors[etype] = priors_for_type

    model = GlmixModel(fixed_model, random_effects)
    priors = {"fixed": fixed_prior, "random": random_priors}
    return model, priors, meta
