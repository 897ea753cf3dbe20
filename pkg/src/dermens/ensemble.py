"""Score fusion and ensemble component selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .classify import stratified_folds
from .errors import ContractError, ValidationError
from .metrics import average_precision

IMPROVEMENT_EPS = 1e-12


@dataclass
class ScoreTable:
    sample_ids: list
    components: list  # "CONTEXT:feature" names
    scores: np.ndarray  # samples x components
    labels: np.ndarray | None = None
    splits: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.sample_ids), len(self.components))
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ContractError("scores must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape[0] != len(self.sample_ids):
                raise ContractError("label count does not match sample count")

    def index(self, name: str) -> int:
        return self.components.index(name)

    def to_csv(self, extra: dict[str, np.ndarray] | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra = extra or {}
        header = ["sample_id", "split", "label", *self.components, *extra]
        w.writerow(header)
        for r, sid in enumerate(self.sample_ids):
            label = "" if self.labels is None or self.labels[r] < 0 else str(int(self.labels[r]))
            split = "" if self.splits is None else self.splits[r]
            row = [sid, split, label] + [repr(float(v)) for v in self.scores[r]]
            row += [repr(float(col[r])) for col in extra.values()]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, drop: tuple = ("fused",)) -> ScoreTable:
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty score table") from None
        if header[:3] != ["sample_id", "split", "label"]:
            raise ValidationError("score table header must start with sample_id,split,label")
        comps = [(i, c) for i, c in enumerate(header[3:], start=3) if c not in drop]
        ids, splits, labels, rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            ids.append(row[0])
            splits.append(row[1])
            labels.append(int(row[2]) if row[2] != "" else -1)
            rows.append([float(row[i]) for i, _ in comps])
        lab = np.array(labels)
        return cls(ids, [c for _, c in comps], np.array(rows).reshape(len(ids), len(comps)),
                   None if np.all(lab < 0) else lab, splits)

    def subset_rows(self, mask) -> ScoreTable:
        idx = np.flatnonzero(mask)
        return ScoreTable(
            [self.sample_ids[i] for i in idx], list(self.components), self.scores[idx],
            None if self.labels is None else self.labels[idx],
            None if self.splits is None else [self.splits[i] for i in idx],
        )


def _check_subset(t: ScoreTable, subset) -> list[int]:
    subset = list(subset)
    if not subset:
        raise ContractError("fusion subset must not be empty")
    for k in subset:
        if not 0 <= k < len(t.components):
            raise ContractError(f"component index {k} out of range")
    return subset


def average_fusion(t: ScoreTable, subset=None) -> np.ndarray:
    subset = _check_subset(t, range(len(t.components)) if subset is None else subset)
    return t.scores[:, subset].mean(axis=1)


def vote_fusion(t: ScoreTable, subset=None, threshold: float = 0.5) -> np.ndarray:
    """Fraction of components voting positive (score >= threshold)."""
    subset = _check_subset(t, range(len(t.components)) if subset is None else subset)
    return (t.scores[:, subset] >= threshold).mean(axis=1)


FUSERS = {"AVG": average_fusion, "VOTE": vote_fusion}


# -- selection ----------------------------------------------------------------


def _fold_criterion(t: ScoreTable, folds: int, seed: int):
    """Return a function scoring a fused score vector by mean per-fold AP."""
    if t.labels is None or np.any(t.labels < 0):
        raise ContractError("selection needs labels for every sample")
    y = t.labels.astype(int)
    assignment = stratified_folds(y, folds, seed)
    parts = [assignment == f for f in range(folds)]
    for f, m in enumerate(parts):
        if y[m].min() == y[m].max():
            raise ContractError(f"fold {f} lacks one of the classes")

    def criterion(scores: np.ndarray) -> float:
        return float(np.mean([average_precision(scores[m], y[m]) for m in parts]))

    return criterion


@dataclass
class SelectionTrace:
    kind: str
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.kind == "greedy":
            w.writerow(["component", "individual_ap", "cumulative_ap"])
            for r in self.rows:
                w.writerow([r["component"], repr(r["individual_ap"]), repr(r["cumulative_ap"])])
        else:
            # one row per component, one column per iteration; blank once selected
            n_iter = len(self.rows)
            comps = list(self.rows[0]["candidates"]) if self.rows else []
            w.writerow(["component", *[f"iter_{i + 1}" for i in range(n_iter)], "selected_at"])
            for c in comps:
                cells = []
                for r in self.rows:
                    v = r["candidates"].get(c)
                    cells.append("" if v is None else repr(v))
                sel = next((str(i + 1) for i, r in enumerate(self.rows) if r.get("chosen") == c and r["accepted"]), "")
                w.writerow([c, *cells, sel])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> SelectionTrace:
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header == ["component", "individual_ap", "cumulative_ap"]:
            return cls("greedy", [
                {"component": r[0], "individual_ap": float(r[1]), "cumulative_ap": float(r[2])} for r in body
            ])
        n_iter = len(header) - 2
        its = [{"candidates": {}, "chosen": None, "accepted": False} for _ in range(n_iter)]
        for r in body:
            for i in range(n_iter):
                if r[1 + i] != "":
                    its[i]["candidates"][r[0]] = float(r[1 + i])
            if r[-1]:
                its[int(r[-1]) - 1]["chosen"] = r[0]
                its[int(r[-1]) - 1]["accepted"] = True
        return cls("forward", its)


def _ranked(t: ScoreTable, criterion) -> list[tuple[int, float]]:
    individual = [(k, criterion(t.scores[:, k])) for k in range(len(t.components))]
    return sorted(individual, key=lambda kv: (-kv[1], t.components[kv[0]]))


def greedy_selection(t: ScoreTable, folds: int = 3, seed: int = 0):
    """Add components in order of individual AP; keep the best prefix."""
    criterion = _fold_criterion(t, folds, seed)
    ranked = _ranked(t, criterion)
    trace = SelectionTrace("greedy")
    best_len, best_ap = 0, -np.inf
    for step in range(1, len(ranked) + 1):
        prefix = [k for k, _ in ranked[:step]]
        cum = criterion(average_fusion(t, prefix))
        k, ind = ranked[step - 1]
        trace.rows.append({"component": t.components[k], "individual_ap": ind, "cumulative_ap": cum})
        if cum > best_ap + IMPROVEMENT_EPS:
            best_len, best_ap = step, cum
    return [k for k, _ in ranked[:best_len]], trace


def forward_selection(t: ScoreTable, folds: int = 3, seed: int = 0):
    """Repeatedly add the component that most improves the averaged ensemble."""
    criterion = _fold_criterion(t, folds, seed)
    selected: list[int] = []
    current = -np.inf
    trace = SelectionTrace("forward")
    while len(selected) < len(t.components):
        candidates = [k for k in range(len(t.components)) if k not in selected]
        results = {t.components[k]: criterion(average_fusion(t, selected + [k])) for k in candidates}
        best = min(candidates, key=lambda k: (-results[t.components[k]], t.components[k]))
        best_ap = results[t.components[best]]
        accepted = best_ap > current + IMPROVEMENT_EPS
        trace.rows.append({"candidates": results, "chosen": t.components[best], "accepted": accepted, "ap": best_ap})
        if not accepted:
            break
        selected.append(best)
        current = best_ap
    return selected, trace
