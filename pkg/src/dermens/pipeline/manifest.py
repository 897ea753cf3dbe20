"""Dataset manifests and the per-sample image contexts built from them."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import ManifestError
from ..imaging import ImageTensor, crop_to_mask, read_image, read_mask

log = logging.getLogger(__name__)

COLUMNS = ["sample_id", "image_path", "mask_path", "pred_mask_path", "label", "split"]
SPLITS = ("train", "validation", "test")
CONTEXTS = ("WI", "CR", "CRGT")


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    image_path: Path
    mask_path: Path | None = None
    pred_mask_path: Path | None = None
    label: int | None = None
    split: str = "train"

    def available_contexts(self) -> tuple[str, ...]:
        ctx = ["WI"]
        if self.pred_mask_path is not None:
            ctx.append("CR")
        if self.mask_path is not None:
            ctx.append("CRGT")
        return tuple(ctx)


def _resolve(base: Path, value: str, column: str, line: int, required: bool) -> Path | None:
    value = value.strip()
    if not value:
        if required:
            raise ManifestError(f"{column} is required", line)
        return None
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ManifestError(f"{column} {value!r} does not exist", line)
    return p


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestError("manifest is empty", 1) from None
        if header != COLUMNS:
            raise ManifestError(f"header must be {','.join(COLUMNS)}", 1)
        for line, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(COLUMNS):
                raise ManifestError(f"expected {len(COLUMNS)} fields, got {len(row)}", line)
            rec = dict(zip(COLUMNS, row))
            sid = rec["sample_id"].strip()
            if not sid:
                raise ManifestError("sample_id is empty", line)
            if sid in seen:
                raise ManifestError(f"duplicate sample_id {sid!r} (first seen on line {seen[sid]})", line)
            seen[sid] = line
            label_s = rec["label"].strip()
            if label_s == "":
                label = None
            elif label_s in ("0", "1"):
                label = int(label_s)
            else:
                raise ManifestError("label must be 0 or 1", line)
            split = rec["split"].strip() or "train"
            if split not in SPLITS:
                raise ManifestError(f"split must be one of {', '.join(SPLITS)}", line)
            if split == "train" and label is None:
                raise ManifestError("training entries must be labeled", line)
            entries.append(ManifestEntry(
                sid,
                _resolve(base, rec["image_path"], "image_path", line, True),
                _resolve(base, rec["mask_path"], "mask_path", line, False),
                _resolve(base, rec["pred_mask_path"], "pred_mask_path", line, False),
                label,
                split,
            ))
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for e in entries:
            w.writerow([
                e.sample_id, str(e.image_path),
                "" if e.mask_path is None else str(e.mask_path),
                "" if e.pred_mask_path is None else str(e.pred_mask_path),
                "" if e.label is None else str(e.label),
                e.split,
            ])


def assign_validation_split(entries, fraction: float = 0.2, seed: int = 0) -> list[ManifestEntry]:
    """Move a seeded, label-stratified fraction of training entries to validation."""
    entries = list(entries)
    rng = np.random.default_rng(seed)
    moved = set()
    for label in (0, 1):
        idx = [i for i, e in enumerate(entries) if e.split == "train" and e.label == label]
        n_val = int(round(len(idx) * fraction))
        for i in rng.permutation(len(idx))[:n_val]:
            moved.add(idx[i])
    return [replace(e, split="validation") if i in moved else e for i, e in enumerate(entries)]


def build_contexts(entry: ManifestEntry, threshold: int = 128) -> dict[str, ImageTensor]:
    """Whole image plus tight crops from the predicted and ground-truth masks."""
    img = read_image(entry.image_path)
    contexts = {"WI": img}
    if entry.pred_mask_path is not None:
        contexts["CR"] = crop_to_mask(img, read_mask(entry.pred_mask_path), threshold)
    if entry.mask_path is not None:
        contexts["CRGT"] = crop_to_mask(img, read_mask(entry.mask_path), threshold)
    return contexts
