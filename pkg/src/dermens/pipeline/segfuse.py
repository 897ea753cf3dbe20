"""Fusing per-network confidence masks into binary lesion masks on disk."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

from ..errors import ContractError, ValidationError
from ..imaging import read_mask, write_png
from ..nettopo import fuse_masks

MASK_SUFFIXES = (".png", ".ppm")


def group_masks(mask_dir) -> dict[str, list[Path]]:
    """Group mask files by sample.

    Subdirectories are samples holding one mask per network. Loose files are
    grouped by the stem before the last underscore (``ISIC_0001_net3.png``
    belongs to ``ISIC_0001``); a stem without an underscore is its own group.
    """
    mask_dir = Path(mask_dir)
    if not mask_dir.is_dir():
        raise ValidationError(f"{mask_dir} is not a directory")
    groups: dict[str, list[Path]] = defaultdict(list)
    for p in sorted(mask_dir.iterdir()):
        if p.is_dir():
            files = sorted(f for f in p.iterdir() if f.suffix.lower() in MASK_SUFFIXES)
            if files:
                groups[p.name].extend(files)
        elif p.suffix.lower() in MASK_SUFFIXES:
            stem = p.stem
            key = stem.rsplit("_", 1)[0] if "_" in stem else stem
            groups[key].append(p)
    if not groups:
        raise ValidationError(f"no mask files found in {mask_dir}")
    return dict(groups)


def segment_fuse(mask_dir, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for sample, files in group_masks(mask_dir).items():
        masks = [read_mask(f) for f in files]
        try:
            fused = fuse_masks(masks)
        except ContractError as exc:
            raise ValidationError(f"sample {sample}: {exc}") from exc
        target = out_dir / f"{sample}.png"
        write_png(target, fused)
        written[sample] = target
    return written
