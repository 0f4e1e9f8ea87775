"""Command-line experiment runner.

Directory layout under ``--out``::

    config.yaml          copy of the experiment config
    manifest.json        config digest, seed and completed stages
    data/                manifest.txt and raw volumes
    splits/plan.json
    runs/<run>/<fold>/   checkpoint.ckpt, metrics.jsonl, fold_result.json, done.json
    reports/             table.md, table.csv, curves.csv

Exit codes: 0 ok, 1 verification failures, 2 invalid config or usage,
3 training divergence, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace
from typing import List, Optional, Sequence

import yaml

from . import __version__
from .config import ConfigError, ExperimentConfig, default_config_text, load_config, parse_config
from .evaluation import FoldResult, aggregate, emit_table, evaluate_fold
from .network import load_checkpoint, save_checkpoint, verify_checkpoint
from .splits import SplitPlan, make_folds, restrict_segmentor, verify_plan
from .synthgen import MANIFEST_NAME, generate_suite, read_manifest, write_datasets
from .trainer import SampleBank, TrainingDiverged, train
from .volumes import CROP_PRESETS, VolumeFormatError, preprocess

logger = logging.getLogger("oodseg")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class Workspace:
    """Paths and cached artifacts of one experiment directory."""

    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.out = Path(out)
        self.cfg = cfg
        self._datasets = None
        self._plan = None
        self._bank = None

    data_dir = property(lambda self: self.out / "data")
    plan_path = property(lambda self: self.out / "splits" / "plan.json")
    reports_dir = property(lambda self: self.out / "reports")

    def run_dir(self, run: str, fold: int) -> Path:
        return self.out / "runs" / run / str(fold)

    # ------------------------------------------------------------------ stages

    def write_manifest(self, stage: str) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.yaml").write_text(self.cfg.source_text or yaml.safe_dump(self.cfg.to_dict()))
        path = self.out / "manifest.json"
        manifest = json.loads(path.read_text()) if path.exists() else {}
        if manifest.get("config_sha256") != self.cfg.digest:
            manifest = {}
        manifest.update({
            "config_sha256": self.cfg.digest,
            "seed": self.cfg.seed,
            "version": __version__,
            "config": self.cfg.to_dict(),
        })
        manifest["stages"] = sorted(set(manifest.get("stages", [])) | {stage})
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    def gen_data(self):
        cfg = self.cfg
        if cfg.data.source == "synthetic":
            write_datasets(generate_suite(cfg.env_specs()), self.data_dir)
        else:
            # ingested data are preprocessed once and stored in the same format
            datasets = _ingest(cfg)
            write_datasets(datasets, self.data_dir)
        (self.data_dir / "source.json").write_text(json.dumps({"digest": self._data_digest()}) + "\n")
        self._datasets = None
        self._plan = None
        self._bank = None
        self.write_manifest("gen-data")

    def _data_digest(self) -> str:
        d = self.cfg.to_dict()
        payload = {"data": d["data"], "seed": d["seed"]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def datasets(self):
        if self._datasets is None:
            manifest = self.data_dir / MANIFEST_NAME
            stamp = self.data_dir / "source.json"
            current = stamp.exists() and json.loads(stamp.read_text()).get("digest") == self._data_digest()
            if not (manifest.exists() and current):
                self.gen_data()
            self._datasets = read_manifest(manifest)
        return self._datasets

    def make_splits(self) -> SplitPlan:
        cfg = self.cfg
        plan = make_folds(self.datasets(), k=cfg.folds, val_fraction=cfg.val_fraction,
                          ood_env=cfg.ood_env, seed=cfg.seed)
        if cfg.budgets:
            plan = restrict_segmentor(plan, cfg.budgets)
        self.plan_path.parent.mkdir(parents=True, exist_ok=True)
        plan.save(self.plan_path)
        self._plan = plan
        self.write_manifest("make-splits")
        return plan

    def plan(self) -> SplitPlan:
        if self._plan is None:
            plan = SplitPlan.load(self.plan_path) if self.plan_path.exists() else None
            if plan is None or not self._plan_current(plan):
                plan = self.make_splits()
            self._plan = plan
        return self._plan

    def _plan_current(self, plan: SplitPlan) -> bool:
        cfg = self.cfg
        ids = {ds.env_id: sorted(ds.sample_ids) for ds in self.datasets()}
        labeled = {ds.env_id: sorted(ds.labeled_ids) for ds in self.datasets()}
        return (plan.k == cfg.folds and plan.seed == cfg.seed and plan.val_fraction == cfg.val_fraction
                and plan.ood_env_id == cfg.ood_env and plan.budgets == dict(cfg.budgets)
                and {e: env.sample_ids for e, env in plan.envs.items()} == ids
                and {e: env.labeled_ids for e, env in plan.envs.items()} == labeled)

    def bank(self) -> SampleBank:
        if self._bank is None:
            self._bank = SampleBank.from_datasets(self.datasets())
        return self._bank

    def _run_digest(self, run: str, fold: int) -> str:
        payload = {"train": self.cfg.train_config(run).to_dict(), "fold": fold,
                   "plan": self.plan().to_dict()}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def is_done(self, run: str, fold: int) -> bool:
        done = self.run_dir(run, fold) / "done.json"
        if not (done.exists() and (self.run_dir(run, fold) / "fold_result.json").exists()):
            return False
        return json.loads(done.read_text()).get("digest") == self._run_digest(run, fold)

    def train(self, run: str, fold: int):
        cfg = self.cfg.train_config(run)
        plan = self.plan()
        if fold not in plan.folds:
            raise ConfigError(f"fold {fold} outside 1..{plan.k}")
        rdir = self.run_dir(run, fold)
        rdir.mkdir(parents=True, exist_ok=True)
        (rdir / "done.json").unlink(missing_ok=True)
        logger.info("training %s fold %d", run, fold)
        state = train(self.datasets(), plan, fold, cfg, self.bank())
        with open(rdir / "metrics.jsonl", "w") as fh:
            for entry in state.history:
                fh.write(json.dumps(_jsonable(entry), sort_keys=True) + "\n")
        save_checkpoint(state.model, rdir / "checkpoint.ckpt", extra={
            "run": run, "fold": fold, "train_config": cfg.to_dict(),
            "domain_envs": state.domain_envs, "best_epoch": state.best_epoch,
            "final_risks": {str(k): v for k, v in state.final_risks.items()},
        })
        self.write_manifest("train")
        return state

    def evaluate(self, run: str, fold: int) -> FoldResult:
        rdir = self.run_dir(run, fold)
        model, extra = load_checkpoint(rdir / "checkpoint.ckpt")
        cfg = self.cfg.train_config(run)
        state = SimpleNamespace(model=model, config=cfg, domain_envs=list(extra["domain_envs"]))
        result = evaluate_fold(state, self.bank(), self.plan(), fold)
        result.save(rdir / "fold_result.json")
        (rdir / "done.json").write_text(json.dumps({"digest": self._run_digest(run, fold)}) + "\n")
        self.write_manifest("evaluate")
        return result

    def report(self) -> str:
        plan = self.plan()
        names = {e: env.name for e, env in plan.envs.items()}
        reports = []
        for run in self.cfg.methods:
            folds = [FoldResult.load(p) for p in sorted((self.out / "runs" / run).glob("*/fold_result.json"))]
            if folds:
                reports.append(aggregate(folds, self.cfg.display_name(run), names))
        if not reports:
            raise FileNotFoundError(f"no fold results under {self.out / 'runs'}")
        training = plan.training_envs(plan.folds[0])
        text, table_csv = emit_table(reports, sorted(names), training, names)
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        (self.reports_dir / "table.md").write_text(text)
        (self.reports_dir / "table.csv").write_text(table_csv)
        (self.reports_dir / "curves.csv").write_text(self._curves())
        self.write_manifest("report")
        return text

    def _curves(self) -> str:
        """Per-epoch learning curves of every run, for plotting."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "fold", "epoch", "stage", "train_objective", "risk_variance",
                    "val_dice", "val_domain_accuracy"])
        for run in self.cfg.methods:
            for path in sorted((self.out / "runs" / run).glob("*/metrics.jsonl")):
                for line in path.read_text().splitlines():
                    h = json.loads(line)
                    w.writerow([run, path.parent.name, h["epoch"], h["stage"], repr(h["train_objective"]),
                                repr(h["risk_variance"]), repr(h["val_dice"]),
                                "" if h["val_domain_accuracy"] is None else repr(h["val_domain_accuracy"])])
        return buf.getvalue()

    def verify(self) -> List[str]:
        problems = [f"plan: {v}" for v in verify_plan(self.plan())]
        for ckpt in sorted((self.out / "runs").glob("*/*/checkpoint.ckpt")):
            problems += verify_checkpoint(ckpt)
        return problems

    def run_all(self, resume: bool = True) -> str:
        self.plan()
        for run in self.cfg.methods:
            for fold in self.plan().folds:
                if resume and self.is_done(run, fold):
                    logger.info("skipping %s fold %d (complete)", run, fold)
                    continue
                self.train(run, fold)
                self.evaluate(run, fold)
        return self.report()


def _ingest(cfg: ExperimentConfig):
    crop = cfg.data.crop
    if isinstance(crop, str):
        crop = CROP_PRESETS[crop]

    def hook(volume, raw_mask):
        return preprocess(volume, raw_mask, crop=crop, pad_to=cfg.data.pad_to,
                          foreground_classes=cfg.data.foreground_classes, normalize=False)

    return read_manifest(cfg.data.manifest, preprocess_fn=hook)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.out and (Path(args.out) / "config.yaml").exists():
        cfg = load_config(Path(args.out) / "config.yaml")
    else:
        text = default_config_text(args.scale or "desk")
        cfg = parse_config(yaml.safe_load(text), text)
    if args.scale and args.scale != cfg.data.scale:
        raw = cfg.to_dict()
        raw["data"]["scale"] = args.scale
        cfg = parse_config(raw)
    if args.seed is not None and args.seed != cfg.seed:
        raw = cfg.to_dict()
        raw["seed"] = args.seed
        cfg = parse_config(raw)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oodseg", description="Multi-environment 3D segmentation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (default: <out>/config.yaml or built-in desk config)")
    common.add_argument("--out", help="experiment directory")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--scale", choices=("desk", "full"), help="synthetic suite size")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="all stages, skipping completed runs")
    sub.add_parser("gen-data", parents=[common], help="write the dataset to <out>/data")
    sub.add_parser("make-splits", parents=[common], help="write <out>/splits/plan.json")
    for name in ("train", "evaluate"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} one method run on one fold")
        sp.add_argument("--method", required=True, help="run name from the config's methods")
        sp.add_argument("--fold", type=int, required=True)
    sub.add_parser("report", parents=[common], help="tables and curves from completed runs")
    sub.add_parser("verify", parents=[common], help="check the split plan and checkpoints")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        out = Path(args.out or cfg.out or "experiment")
        ws = Workspace(out, cfg)
        if args.command == "run":
            print(ws.run_all(), end="")
        elif args.command == "gen-data":
            ws.gen_data()
        elif args.command == "make-splits":
            ws.make_splits()
        elif args.command == "train":
            ws.train(args.method, args.fold)
        elif args.command == "evaluate":
            print(json.dumps(ws.evaluate(args.method, args.fold).to_dict(), sort_keys=True))
        elif args.command == "report":
            print(ws.report(), end="")
        elif args.command == "verify":
            problems = ws.verify()
            for msg in problems:
                print(msg)
            return EXIT_VERIFY if problems else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, VolumeFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
