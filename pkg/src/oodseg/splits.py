"""Cross-validation and semi-supervised split plans.

Per environment and fold a plan holds a test set, the domain-predictor
train/val sets (labeled and unlabeled samples) and the segmentor train/val
sets, which are labeled subsets of the domain-predictor ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

PLAN_FORMAT = "oodseg-splitplan-1"


@dataclass
class FoldSplit:
    dp_train_ids: List[str] = field(default_factory=list)
    dp_val_ids: List[str] = field(default_factory=list)
    seg_train_ids: List[str] = field(default_factory=list)
    seg_val_ids: List[str] = field(default_factory=list)
    test_ids: List[str] = field(default_factory=list)


@dataclass
class EnvSplit:
    env_id: int
    name: str
    sample_ids: List[str]
    labeled_ids: List[str]
    folds: Dict[int, FoldSplit] = field(default_factory=dict)


@dataclass
class SplitPlan:
    """Fold assignments for every environment; folds are numbered ``1..K``."""

    k: int
    seed: int
    val_fraction: float
    envs: Dict[int, EnvSplit]
    ood_env_id: Optional[int] = None
    budgets: Dict[int, Tuple[int, int]] = field(default_factory=dict)

    @property
    def folds(self) -> List[int]:
        return list(range(1, self.k + 1))

    def fold(self, env_id: int, fold: int) -> FoldSplit:
        return self.envs[env_id].folds[fold]

    def training_envs(self, fold: int = 1) -> List[int]:
        """Environments that contribute domain-predictor training samples."""
        return [e for e in sorted(self.envs) if self.envs[e].folds[fold].dp_train_ids]

    def segmentation_envs(self, fold: int = 1) -> List[int]:
        return [e for e in sorted(self.envs) if self.envs[e].folds[fold].seg_train_ids]

    # -------------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "k": self.k,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "ood_env_id": self.ood_env_id,
            "budgets": {str(e): list(b) for e, b in sorted(self.budgets.items())},
            "envs": {
                str(e): {
                    "name": env.name,
                    "sample_ids": env.sample_ids,
                    "labeled_ids": env.labeled_ids,
                    "folds": {
                        str(k): {
                            "test_ids": f.test_ids,
                            "dp_train_ids": f.dp_train_ids,
                            "dp_val_ids": f.dp_val_ids,
                            "seg_train_ids": f.seg_train_ids,
                            "seg_val_ids": f.seg_val_ids,
                        }
                        for k, f in sorted(env.folds.items())
                    },
                }
                for e, env in sorted(self.envs.items())
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitPlan":
        if d.get("format") != PLAN_FORMAT:
            raise ValueError(f"not a split plan (format={d.get('format')!r})")
        envs = {}
        for e, ed in d["envs"].items():
            folds = {int(k): FoldSplit(**fd) for k, fd in ed["folds"].items()}
            envs[int(e)] = EnvSplit(int(e), ed["name"], list(ed["sample_ids"]),
                                    list(ed["labeled_ids"]), folds)
        return cls(
            k=int(d["k"]), seed=int(d["seed"]), val_fraction=float(d["val_fraction"]),
            envs=envs, ood_env_id=d.get("ood_env_id"),
            budgets={int(e): tuple(b) for e, b in d.get("budgets", {}).items()},
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _env_rng(seed: int, env_id: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(env_id), *[int(x) for x in extra]])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_folds(envs, k: int = 5, val_fraction: float = 0.1,
               ood_env: Optional[int] = None, seed: int = 0) -> SplitPlan:
    """Build a K-fold plan over ``envs`` (``EnvironmentDataset``-like objects).

    Every non-OoD environment is shuffled (after sorting ids) and cut into K
    test folds whose sizes differ by at most one. In each fold the remaining
    samples are split into ``max(1, round(val_fraction * n))`` validation and
    the rest training samples. The OoD environment is test-only.
    """
    if k < 2:
        raise ValueError("need at least two folds")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    env_ids = [ds.env_id for ds in envs]
    if ood_env is not None and ood_env not in env_ids:
        raise ValueError(f"OoD env {ood_env} not among {env_ids}")
    plan_envs: Dict[int, EnvSplit] = {}
    for ds in envs:
        ids = sorted(s.sample_id for s in ds.samples)
        labeled = sorted(s.sample_id for s in ds.samples if s.mask is not None)
        split = EnvSplit(ds.env_id, ds.name, ids, labeled)
        labeled_set = set(labeled)
        if ds.env_id == ood_env:
            for fold in range(1, k + 1):
                split.folds[fold] = FoldSplit(test_ids=list(ids))
            plan_envs[ds.env_id] = split
            continue
        if len(ids) < k:
            raise ValueError(f"environment {ds.env_id} has {len(ids)} samples, fewer than {k} folds")
        order = [ids[i] for i in _env_rng(seed, ds.env_id).permutation(len(ids))]
        chunks = np.array_split(np.arange(len(order)), k)
        for fold, chunk in enumerate(chunks, 1):
            test = [order[i] for i in chunk]
            test_set = set(test)
            rest = [s for s in order if s not in test_set]
            n_val = max(1, _round_half_up(val_fraction * len(rest)))
            if n_val >= len(rest):
                raise ValueError(f"environment {ds.env_id} too small for a train/val split")
            val, train = rest[:n_val], rest[n_val:]
            split.folds[fold] = FoldSplit(
                dp_train_ids=sorted(train),
                dp_val_ids=sorted(val),
                seg_train_ids=sorted(s for s in train if s in labeled_set),
                seg_val_ids=sorted(s for s in val if s in labeled_set),
                test_ids=sorted(test),
            )
        plan_envs[ds.env_id] = split
    return SplitPlan(k=k, seed=seed, val_fraction=val_fraction, envs=plan_envs, ood_env_id=ood_env)


def restrict_segmentor(plan: SplitPlan, labeled_budget: Mapping[int, Sequence[int]]) -> SplitPlan:
    """Limit the segmentor's labeled train/val samples per environment.

    ``labeled_budget`` maps env id to ``(n_train, n_val)``; environments not
    listed keep every labeled sample. Selection is a seeded permutation of the
    sorted labeled ids, so repeated calls give identical plans.
    """
    new_envs = {}
    for env_id, env in plan.envs.items():
        labeled = set(env.labeled_ids)
        folds = {}
        for fold, f in env.folds.items():
            seg_train = sorted(s for s in f.dp_train_ids if s in labeled)
            seg_val = sorted(s for s in f.dp_val_ids if s in labeled)
            if env_id in labeled_budget:
                n_train, n_val = (int(x) for x in labeled_budget[env_id])
                if n_train > len(seg_train) or n_val > len(seg_val):
                    raise ValueError(
                        f"budget {(n_train, n_val)} for env {env_id} fold {fold} exceeds available "
                        f"labeled samples {(len(seg_train), len(seg_val))}"
                    )
                rng = _env_rng(plan.seed, env_id, fold, 1)
                seg_train = sorted(seg_train[i] for i in rng.permutation(len(seg_train))[:n_train])
                seg_val = sorted(seg_val[i] for i in rng.permutation(len(seg_val))[:n_val])
            folds[fold] = FoldSplit(
                dp_train_ids=list(f.dp_train_ids), dp_val_ids=list(f.dp_val_ids),
                seg_train_ids=seg_train, seg_val_ids=seg_val, test_ids=list(f.test_ids),
            )
        new_envs[env_id] = EnvSplit(env_id, env.name, list(env.sample_ids), list(env.labeled_ids), folds)
    for env_id in labeled_budget:
        if env_id not in plan.envs:
            raise ValueError(f"budget given for unknown env {env_id}")
    budgets = dict(plan.budgets)
    budgets.update({int(e): tuple(int(x) for x in b) for e, b in labeled_budget.items()})
    return SplitPlan(k=plan.k, seed=plan.seed, val_fraction=plan.val_fraction, envs=new_envs,
                     ood_env_id=plan.ood_env_id, budgets=budgets)


def verify_plan(plan: SplitPlan) -> List[str]:
    """Return one message per violated plan invariant (empty when valid)."""
    violations = []
    for env_id, env in sorted(plan.envs.items()):
        all_ids = set(env.sample_ids)
        labeled = set(env.labeled_ids)
        if set(env.folds) != set(range(1, plan.k + 1)):
            violations.append(f"env {env_id}: folds {sorted(env.folds)} do not match K={plan.k}")
        for fold, f in sorted(env.folds.items()):
            where = f"env {env_id} fold {fold}"
            parts = {"test": f.test_ids, "dp_train": f.dp_train_ids, "dp_val": f.dp_val_ids}
            for name, ids in parts.items():
                if len(set(ids)) != len(ids):
                    violations.append(f"{where}: duplicate ids in {name}")
                if not set(ids) <= all_ids:
                    violations.append(f"{where}: {name} contains unknown ids")
            names = list(parts)
            for i, a in enumerate(names):
                for b in names[i + 1:]:
                    shared = set(parts[a]) & set(parts[b])
                    if shared:
                        violations.append(f"{where}: disjointness violated between {a} and {b} "
                                          f"({sorted(shared)[:3]})")
            union = set(f.test_ids) | set(f.dp_train_ids) | set(f.dp_val_ids)
            if union != all_ids:
                violations.append(f"{where}: test/dp_train/dp_val do not cover the environment "
                                  f"({len(all_ids - union)} missing)")
            if not set(f.seg_train_ids) <= set(f.dp_train_ids):
                violations.append(f"{where}: nesting violated, seg_train not a subset of dp_train")
            if not set(f.seg_val_ids) <= set(f.dp_val_ids):
                violations.append(f"{where}: nesting violated, seg_val not a subset of dp_val")
            if not (set(f.seg_train_ids) | set(f.seg_val_ids)) <= labeled:
                violations.append(f"{where}: segmentor sets contain unlabeled ids")
            if env_id == plan.ood_env_id:
                if set(f.test_ids) != all_ids or f.dp_train_ids or f.dp_val_ids:
                    violations.append(f"{where}: OoD environment must be test-only")
        if env_id != plan.ood_env_id and env.folds:
            tests = [set(f.test_ids) for f in env.folds.values()]
            seen = set()
            for t in tests:
                if seen & t:
                    violations.append(f"env {env_id}: test folds overlap")
                    break
                seen |= t
            if seen != all_ids:
                violations.append(f"env {env_id}: test folds do not cover the environment")
    return violations
