"""Experiment configuration and end-to-end orchestration."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import features as hand
from ..classify import CalibratedSvm, stratified_folds
from ..ensemble import FUSERS, ScoreTable, forward_selection, greedy_selection
from ..errors import ContractError, ValidationError
from ..imaging import ImageTensor, resize_long_side, to_gray
from ..metrics import evaluate, roc_curve
from ..sparse import DEFAULT_LAMBDA, Dictionary, encode_image
from .manifest import CONTEXTS, ManifestEntry, assign_validation_split, build_contexts
from .store import BUILTIN_FEATURES, FeatureRecord, FeatureSpec, FeatureStore

log = logging.getLogger(__name__)

HAND_CODED = ("color_hist", "edge_hist", "mslbp")
SPARSE = {"sc_rgb": "RGB", "sc_gray": "GRAY"}


@dataclass(frozen=True)
class ComponentSpec:
    feature: str
    context: str
    C: float = 1.0

    @property
    def name(self) -> str:
        return f"{self.context}:{self.feature}"


@dataclass
class ExperimentConfig:
    components: list
    fusion: str = "AVG"
    selection: str = "none"
    folds: int = 3
    seed: int = 0
    threshold: float = 0.5
    working_resolution: int = 256
    lam: float = DEFAULT_LAMBDA
    dictionaries: dict = field(default_factory=dict)
    external_features: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)
    validation_fraction: float | None = None
    n_jobs: int | None = None

    def __post_init__(self):
        comps = []
        for c in self.components:
            comps.append(c if isinstance(c, ComponentSpec) else ComponentSpec(**c))
        self.components = comps
        if not comps:
            raise ValidationError("config lists no components")
        names = [c.name for c in comps]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate components in config")
        if self.fusion not in FUSERS:
            raise ValidationError(f"fusion must be one of {sorted(FUSERS)}")
        if self.selection not in ("none", "greedy", "forward"):
            raise ValidationError("selection must be none, greedy or forward")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        for c in comps:
            if c.C <= 0:
                raise ValidationError(f"C for {c.name} must be positive")
            if c.context not in CONTEXTS:
                raise ValidationError(f"unknown context {c.context!r} in component {c.name}")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> ExperimentConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "components" not in d:
            raise ValidationError("config needs a 'components' list")
        d = dict(d)
        if base is not None:
            d["dictionaries"] = {
                name: ({ctx: str(_abs(base, p)) for ctx, p in v.items()} if isinstance(v, dict) else str(_abs(base, v)))
                for name, v in d.get("dictionaries", {}).items()
            }
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ValidationError(f"malformed config: {exc}") from exc
        for path in cfg.dictionary_paths():
            if not Path(path).exists():
                raise ValidationError(f"dictionary file {path} does not exist")
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["components"] = [asdict(c) for c in self.components]
        return d

    def dictionary_paths(self):
        for v in self.dictionaries.values():
            yield from (v.values() if isinstance(v, dict) else [v])

    def dictionary_path(self, feature: str, context: str) -> str | None:
        v = self.dictionaries.get(feature)
        if v is None or isinstance(v, str):
            return v
        # crops from either mask share the crop dictionary unless given their own
        for key in (context, "CR" if context == "CRGT" else None, "default"):
            if key and key in v:
                return v[key]
        return None

    def registry(self) -> dict[str, FeatureSpec]:
        reg = dict(BUILTIN_FEATURES)
        for name, spec in self.external_features.items():
            if name in BUILTIN_FEATURES:
                raise ValidationError(f"external feature {name!r} shadows a built-in feature")
            try:
                reg[name] = FeatureSpec(int(spec["dims"]), tuple(spec.get("contexts", CONTEXTS)), True)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"bad external feature declaration for {name!r}") from exc
        return reg


def _abs(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


class LabelVault:
    """Staged label access: evaluation labels unlock only after training ends."""

    def __init__(self, entries):
        self._labels = {e.sample_id: e.label for e in entries}
        self._splits = {e.sample_id: e.split for e in entries}
        self.evaluation_open = False
        self.access_log: list[tuple[str, str, bool]] = []

    def training_labels(self, ids) -> np.ndarray:
        out = []
        for sid in ids:
            if self._splits[sid] != "train":
                raise ContractError(f"sample {sid} is not a training sample")
            self.access_log.append((sid, "train", self.evaluation_open))
            out.append(self._labels[sid])
        return np.array(out, dtype=int)

    def open_evaluation(self) -> None:
        self.evaluation_open = True

    def evaluation_labels(self, ids) -> np.ndarray:
        if not self.evaluation_open:
            raise ContractError("evaluation labels requested before the evaluation phase")
        out = []
        for sid in ids:
            self.access_log.append((sid, self._splits[sid], True))
            label = self._labels[sid]
            out.append(-1 if label is None else label)
        return np.array(out, dtype=int)


# -- features -----------------------------------------------------------------


class FeatureExtractor:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._dicts: dict[str, Dictionary] = {}

    def computable(self, feature: str) -> bool:
        if feature in HAND_CODED:
            return True
        if feature in SPARSE:
            return self.cfg.dictionaries.get(feature) is not None
        return False

    def dictionary(self, feature: str, context: str) -> Dictionary:
        path = self.cfg.dictionary_path(feature, context)
        if path is None:
            raise ValidationError(f"no dictionary configured for {feature} in context {context}")
        if path not in self._dicts:
            d = Dictionary.load(path)
            if d.colorspace != SPARSE[feature]:
                raise ValidationError(f"dictionary {path} is {d.colorspace}, {feature} needs {SPARSE[feature]}")
            self._dicts[path] = d
        return self._dicts[path]

    def extract(self, feature: str, context: str, img: ImageTensor) -> np.ndarray:
        if feature in HAND_CODED:
            work = resize_long_side(img, self.cfg.working_resolution)
            return hand.EXTRACTORS[feature](work).values
        if feature in SPARSE:
            d = self.dictionary(feature, context)
            src = to_gray(img) if SPARSE[feature] == "GRAY" else img
            return encode_image(src, d, self.cfg.lam)
        raise ValidationError(f"feature {feature} is not computable; ingest it first")


def extract_features(cfg: ExperimentConfig, entries, store: FeatureStore) -> int:
    """Compute every missing computable feature; returns the number written."""
    extractor = FeatureExtractor(cfg)
    wanted = [c for c in cfg.components if extractor.computable(c.feature)]

    def work(entry: ManifestEntry):
        todo = [c for c in wanted
                if (entry.sample_id, c.context, c.feature) not in store
                and c.context in entry.available_contexts()]
        if not todo:
            return 0
        contexts = build_contexts(entry)
        for c in todo:
            vec = extractor.extract(c.feature, c.context, contexts[c.context])
            store.put(FeatureRecord(entry.sample_id, c.context, c.feature, vec))
        return len(todo)

    with ThreadPoolExecutor(max_workers=_jobs(cfg)) as pool:
        return sum(pool.map(work, entries))


def _jobs(cfg: ExperimentConfig) -> int:
    return cfg.n_jobs or os.cpu_count() or 1


# -- experiment ---------------------------------------------------------------


@dataclass
class ExperimentResult:
    report: dict
    table: ScoreTable
    fused: np.ndarray
    selected: list
    trace: object | None
    models: dict
    out_dir: Path | None = None


def _validate_inputs(cfg, entries, store, extractor, registry):
    problems = []
    for c in cfg.components:
        spec = registry.get(c.feature)
        if spec is None:
            problems.append(f"unknown feature {c.feature!r}")
            continue
        if c.context not in spec.contexts:
            problems.append(f"{c.feature} is not defined for context {c.context}")
            continue
        for e in entries:
            if (e.sample_id, c.context, c.feature) in store:
                vec = store.get(e.sample_id, c.context, c.feature)
                if vec.shape[0] != spec.dims and c.feature not in SPARSE:
                    problems.append(f"{c.name} for {e.sample_id} has {vec.shape[0]} dims, expected {spec.dims}")
            elif not extractor.computable(c.feature):
                problems.append(f"{c.name} missing for {e.sample_id} and not computable")
            elif c.context not in e.available_contexts():
                problems.append(f"{c.name} needs a {'predicted' if c.context == 'CR' else 'ground-truth'} "
                                f"mask for {e.sample_id}")
    train = [e for e in entries if e.split == "train"]
    labels = np.array([e.label for e in train])
    if len(train) == 0 or labels.min() == labels.max():
        problems.append("training split must contain both classes")
    else:
        outer = stratified_folds(labels, cfg.folds, cfg.seed) if min(np.bincount(labels)) >= cfg.folds else None
        if outer is None:
            problems.append(f"each class needs at least {cfg.folds} training samples")
        else:
            for f in range(cfg.folds):
                part = labels[outer != f]
                if min(np.bincount(part, minlength=2)) < cfg.folds:
                    problems.append(f"training part of fold {f} has a class smaller than {cfg.folds}")
    if problems:
        raise ValidationError("; ".join(problems[:20]) + (f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""))


def _matrix(store, ids, comp: ComponentSpec) -> np.ndarray:
    return np.vstack([store.get(sid, comp.context, comp.feature) for sid in ids])


def train_component(store, comp: ComponentSpec, train_ids, y, folds, seed):
    """Out-of-fold probabilities on the training set plus a model fit on all of it."""
    X = _matrix(store, train_ids, comp)
    assignment = stratified_folds(y, folds, seed)
    oof = np.empty(len(train_ids))
    for f in range(folds):
        held = assignment == f
        m = CalibratedSvm.fit(X[~held], y[~held], comp.C, folds, seed, comp.feature, comp.context)
        oof[held] = m.predict_proba(X[held])
    final = CalibratedSvm.fit(X, y, comp.C, folds, seed, comp.feature, comp.context)
    return oof, final


def run_experiment(cfg: ExperimentConfig, entries, store: FeatureStore, out_dir=None,
                   vault: LabelVault | None = None) -> ExperimentResult:
    entries = list(entries)
    if cfg.validation_fraction:
        entries = assign_validation_split(entries, cfg.validation_fraction, cfg.seed)
    vault = vault or LabelVault(entries)
    registry = cfg.registry()
    extractor = FeatureExtractor(cfg)
    _validate_inputs(cfg, entries, store, extractor, registry)

    extract_features(cfg, entries, store)

    train_ids = [e.sample_id for e in entries if e.split == "train"]
    other = [e for e in entries if e.split != "train"]
    other_ids = [e.sample_id for e in other]
    y = vault.training_labels(train_ids)

    with ThreadPoolExecutor(max_workers=_jobs(cfg)) as pool:
        futures = [pool.submit(train_component, store, c, train_ids, y, cfg.folds, cfg.seed)
                   for c in cfg.components]
        trained = [f.result() for f in futures]

    names = [c.name for c in cfg.components]
    models = {c.name: m for c, (_, m) in zip(cfg.components, trained)}
    train_scores = np.column_stack([oof for oof, _ in trained])
    train_table = ScoreTable(train_ids, names, train_scores, y, ["train"] * len(train_ids))

    trace = None
    if cfg.selection == "greedy":
        selected, trace = greedy_selection(train_table, cfg.folds, cfg.seed)
    elif cfg.selection == "forward":
        selected, trace = forward_selection(train_table, cfg.folds, cfg.seed)
    else:
        selected = list(range(len(names)))

    if other_ids:
        other_scores = np.column_stack([
            models[c.name].predict_proba(_matrix(store, other_ids, c)) for c in cfg.components
        ])
        scores = np.vstack([train_scores, other_scores])
    else:
        scores = train_scores
    all_ids = train_ids + other_ids
    splits = ["train"] * len(train_ids) + [e.split for e in other]

    # everything below may look at held-out labels
    vault.open_evaluation()
    labels = np.r_[y, vault.evaluation_labels(other_ids)] if other_ids else y
    table = ScoreTable(all_ids, names, scores, labels, splits)
    fused = FUSERS[cfg.fusion](table, selected)

    report = {
        "config": cfg.to_dict(),
        "selected": [names[k] for k in selected],
        "fusion": cfg.fusion,
        "splits": {},
        "components": {},
        "split_assignment": {sid: sp for sid, sp in zip(all_ids, splits)},
    }
    rocs = {}
    for split in ("train", "validation", "test"):
        rows = np.array([s == split for s in splits])
        if not rows.any():
            continue
        lab = labels[rows]
        if np.any(lab < 0):
            continue
        report["splits"][split] = evaluate(fused[rows], lab, cfg.threshold).to_dict()
        report["components"][split] = {
            n: evaluate(scores[rows, k], lab, cfg.threshold).to_dict() for k, n in enumerate(names)
        }
        if lab.min() != lab.max():
            rocs[split] = roc_curve(fused[rows], lab)

    result = ExperimentResult(report, table, fused, selected, trace, models)
    if out_dir is not None:
        result.out_dir = write_bundle(Path(out_dir), result, rocs)
    return result


def write_bundle(out: Path, result: ExperimentResult, rocs: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    (out / "scores.csv").write_text(result.table.to_csv({"fused": result.fused}))
    for split, curve in rocs.items():
        (out / f"roc_{split}.csv").write_text(curve.to_csv())
    if result.trace is not None:
        (out / "selection_trace.csv").write_text(result.trace.to_csv())
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for name, model in result.models.items():
        fname = name.replace(":", "_") + ".json"
        (models_dir / fname).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")
    return out


def load_models(models_dir) -> dict[str, CalibratedSvm]:
    models = {}
    for path in sorted(Path(models_dir).glob("*.json")):
        m = CalibratedSvm.from_dict(json.loads(path.read_text()))
        models[f"{m.context}:{m.feature_name}"] = m
    if not models:
        raise ValidationError(f"no model files in {models_dir}")
    return models


def score_entries(models: dict, entries, store: FeatureStore) -> ScoreTable:
    ids = [e.sample_id for e in entries]
    names = list(models)
    cols = []
    for name in names:
        m = models[name]
        comp = ComponentSpec(m.feature_name, m.context)
        cols.append(m.predict_proba(_matrix(store, ids, comp)))
    labels = np.array([-1 if e.label is None else e.label for e in entries])
    return ScoreTable(ids, names, np.column_stack(cols), None if np.all(labels < 0) else labels,
                      [e.split for e in entries])


__all__ = [
    "ComponentSpec", "ExperimentConfig", "ExperimentResult", "FeatureExtractor", "LabelVault",
    "extract_features", "load_models", "run_experiment", "score_entries", "train_component",
    "write_bundle",
]
