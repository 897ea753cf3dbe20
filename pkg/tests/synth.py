"""Synthetic datasets on disk for pipeline, CLI and acceptance tests."""

from pathlib import Path

import numpy as np

from dermens.imaging import ImageTensor, MaskImage, write_png
from dermens.pipeline import FeatureRecord, FeatureStore, ManifestEntry, write_manifest

SIGNAL = "signal"
NOISE = ("noise_a", "noise_b", "noise_c")


def make_images(root: Path, n: int, seed: int, size: int = 24, labels=None):
    """Write one RGB image plus ground-truth and predicted masks per sample.

    When labels are given, positives are reddish and negatives bluish so the
    hand-coded color feature can separate them.
    """
    root = Path(root)
    (root / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        px = rng.random((size, size, 3)) * 0.3
        if labels is not None:
            px[:, :, 0 if labels[i] else 2] += 0.6
        img = ImageTensor(px)
        gt = np.zeros((size, size), np.uint8)
        gt[4:16, 6:18] = 255
        pred = np.zeros((size, size), np.uint8)
        pred[5:17, 5:17] = 255
        ip, gp, pp = (root / "img" / f"s{i:03d}{suffix}.png" for suffix in ("", "_gt", "_pred"))
        write_png(ip, img)
        write_png(gp, MaskImage(gt))
        write_png(pp, MaskImage(pred))
        paths.append((ip, gp, pp))
    return paths


def balanced_labels(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.permutation(np.r_[np.ones(n // 2, int), np.zeros(n - n // 2, int)])


def make_dataset(root, n: int = 60, seed: int = 0, test_fraction: float = 0.3, colored: bool = False):
    """Images, masks and a manifest with a stratified train/test split."""
    root = Path(root)
    labels = balanced_labels(n, seed)
    paths = make_images(root, n, seed + 1, labels=labels if colored else None)
    split = np.array(["train"] * n, dtype=object)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        split[idx[: int(round(len(idx) * test_fraction))]] = "test"
    entries = [
        ManifestEntry(f"s{i:03d}", ip.relative_to(root), gp.relative_to(root), pp.relative_to(root),
                      int(labels[i]), str(split[i]))
        for i, (ip, gp, pp) in enumerate(paths)
    ]
    write_manifest(root / "manifest.csv", entries)
    return root / "manifest.csv", labels


def fill_store(store_path, labels, seed: int = 0, dims: int = 4) -> FeatureStore:
    """One perfectly separating WI feature and three pure-noise WI features."""
    rng = np.random.default_rng(seed)
    store = FeatureStore(store_path)
    for i, y in enumerate(labels):
        sid = f"s{i:03d}"
        store.put(FeatureRecord(sid, "WI", SIGNAL, y + 0.1 * rng.random(dims)))
        for name in NOISE:
            store.put(FeatureRecord(sid, "WI", name, rng.random(dims)))
    return store


def experiment_config(selection: str = "greedy", dims: int = 4, **extra) -> dict:
    feats = (SIGNAL, *NOISE)
    cfg = {
        "components": [{"feature": f, "context": "WI"} for f in (NOISE[0], SIGNAL, *NOISE[1:])],
        "external_features": {f: {"dims": dims, "contexts": ["WI"]} for f in feats},
        "selection": selection,
        "fusion": "AVG",
        "folds": 3,
        "seed": 0,
        "n_jobs": 1,
    }
    cfg.update(extra)
    return cfg
