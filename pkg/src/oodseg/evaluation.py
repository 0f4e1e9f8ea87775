"""Metrics, fold aggregation and result tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

CSV_FIELDS = ("method", "env", "role", "dice_mean", "dice_std",
              "domacc_mean", "domacc_std", "n_folds")
ACCURACY_HEADER = "Dom. Pred. Acc."


def dice_score(pred_mask, gt_mask) -> float:
    """Dice overlap in percent; two empty masks score 100."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(a, b).sum()) / denom


def domain_accuracy(domain_logits, labels) -> float:
    """Percentage of rows whose argmax equals the label (ties go to the lowest index)."""
    logits = np.asarray(domain_logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class FoldResult:
    fold: int
    dice: Dict[int, float]
    roles: Dict[int, str]
    domain_accuracy: Optional[float] = None

    def __post_init__(self):
        for e, v in self.dice.items():
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"Dice for env {e} outside [0, 100]: {v}")
        if self.domain_accuracy is not None and not 0.0 <= self.domain_accuracy <= 100.0:
            raise ValueError(f"domain accuracy outside [0, 100]: {self.domain_accuracy}")
        for e, r in self.roles.items():
            if r not in ("train", "ood"):
                raise ValueError(f"role for env {e} must be 'train' or 'ood', got {r!r}")

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "dice": {str(e): v for e, v in sorted(self.dice.items())},
            "roles": {str(e): r for e, r in sorted(self.roles.items())},
            "domain_accuracy": self.domain_accuracy,
        }

    @classmethod
    def from_dict(cls, d) -> "FoldResult":
        return cls(
            fold=int(d["fold"]),
            dice={int(e): float(v) for e, v in d["dice"].items()},
            roles={int(e): r for e, r in d["roles"].items()},
            domain_accuracy=d.get("domain_accuracy"),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FoldResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class MethodReport:
    method: str
    dice: Dict[int, Tuple[float, float]]
    roles: Dict[int, str]
    n_folds: int
    domain_accuracy: Optional[Tuple[float, float]] = None
    env_names: Dict[int, str] = field(default_factory=dict)

    def env_name(self, env_id: int) -> str:
        return self.env_names.get(env_id, f"env{env_id}")


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(folds: Sequence[FoldResult], method: str = "",
              env_names: Optional[Mapping[int, str]] = None) -> MethodReport:
    """Mean and population std across folds, per environment.

    Folds are sorted first so the result does not depend on their order.
    """
    if not folds:
        raise ValueError("need at least one fold")
    folds = sorted(folds, key=lambda f: f.fold)
    envs = sorted({e for f in folds for e in f.dice})
    dice = {e: _mean_std([f.dice[e] for f in folds if e in f.dice]) for e in envs}
    roles = {}
    for f in folds:
        roles.update(f.roles)
    accs = [f.domain_accuracy for f in folds if f.domain_accuracy is not None]
    return MethodReport(
        method=method, dice=dice, roles={e: roles.get(e, "train") for e in envs},
        n_folds=len(folds), domain_accuracy=_mean_std(accs) if accs else None,
        env_names=dict(env_names or {}),
    )


def worst_env_report(report: MethodReport) -> Tuple[int, float]:
    """Environment with the lowest mean Dice (ties broken toward the lowest id)."""
    if not report.dice:
        raise ValueError("report has no environments")
    env_id = min(sorted(report.dice), key=lambda e: report.dice[e][0])
    return env_id, report.dice[env_id][0]


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.1f} ± {std:.1f}"


def emit_table(reports: Sequence[MethodReport], env_order: Optional[Sequence[int]] = None,
               training_envs: Optional[Sequence[int]] = None,
               env_labels: Optional[Mapping[int, str]] = None) -> Tuple[str, str]:
    """Render a Markdown results table and its CSV twin.

    Rows are methods, columns the environments (training environments in
    bold) plus a domain-accuracy column when any method reports one.
    """
    if not reports:
        raise ValueError("no reports to render")
    env_sets = {tuple(sorted(r.dice)) for r in reports}
    if len(env_sets) != 1:
        raise ValueError(f"inconsistent environment sets across reports: {sorted(env_sets)}")
    envs = list(env_order) if env_order is not None else list(next(iter(env_sets)))
    if sorted(envs) != list(next(iter(env_sets))):
        raise ValueError(f"env_order {envs} does not match report environments")
    first = reports[0]
    if training_envs is None:
        training_envs = [e for e in envs if first.roles.get(e) == "train"]
    training = set(training_envs)
    labels = {e: (env_labels or {}).get(e, first.env_name(e)) for e in envs}
    with_acc = any(r.domain_accuracy is not None for r in reports)

    header = ["Method"] + [f"**{labels[e]}**" if e in training else labels[e] for e in envs]
    if with_acc:
        header.append(ACCURACY_HEADER)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in reports:
        row = [r.method] + [format_cell(*r.dice[e]) for e in envs]
        if with_acc:
            row.append(format_cell(*r.domain_accuracy) if r.domain_accuracy else "-")
        lines.append("| " + " | ".join(row) + " |")
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in reports:
        acc = r.domain_accuracy
        for e in envs:
            writer.writerow([
                r.method, labels[e], "train" if e in training else "ood",
                repr(r.dice[e][0]), repr(r.dice[e][1]),
                "" if acc is None else repr(acc[0]), "" if acc is None else repr(acc[1]),
                r.n_folds,
            ])
    return text, buf.getvalue()


def parse_csv(text: str) -> List[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        rows.append({
            "method": row["method"], "env": row["env"], "role": row["role"],
            "dice_mean": float(row["dice_mean"]), "dice_std": float(row["dice_std"]),
            "domacc_mean": float(row["domacc_mean"]) if row["domacc_mean"] else None,
            "domacc_std": float(row["domacc_std"]) if row["domacc_std"] else None,
            "n_folds": int(row["n_folds"]),
        })
    return rows


def evaluate_fold(state, bank, plan, fold: int, with_domain: Optional[bool] = None) -> FoldResult:
    """Test-set Dice per environment and domain accuracy for a trained state."""
    # local import: trainer imports this module
    from .trainer import predict_logits

    model = state.model
    with_domain = state.config.uses_domain_head if with_domain is None else with_domain
    dice, roles = {}, {}
    dom_logits, dom_labels = [], []
    lookup = {e: i for i, e in enumerate(state.domain_envs)}
    for env_id in sorted(plan.envs):
        f = plan.fold(env_id, fold)
        is_train = bool(f.dp_train_ids or f.seg_train_ids)
        roles[env_id] = "train" if is_train else "ood"
        ids = list(f.test_ids)
        if not ids:
            continue
        seg, dom = predict_logits(model, np.stack([bank.images[i] for i in ids]))
        scores = [dice_score(s > 0, bank.masks[i]) for s, i in zip(seg, ids) if bank.masks[i] is not None]
        if scores:
            dice[env_id] = float(np.mean(scores))
        if env_id in lookup:
            dom_logits.append(dom)
            dom_labels += [lookup[env_id]] * len(ids)
    acc = None
    if with_domain and dom_logits:
        acc = domain_accuracy(np.concatenate(dom_logits), np.array(dom_labels))
    roles = {e: r for e, r in roles.items() if e in dice}
    return FoldResult(fold=fold, dice=dice, roles=roles, domain_accuracy=acc)
