"""Training schedules: ERM, V-REx, iterative domain prediction and the combined method."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from . import objectives as obj
from .evaluation import dice_score, domain_accuracy
from .network import ArchConfig, TwoHeadUNet, apply_gradients, gradients, init_model
from .volumes import AugmentationConfig, augment_arrays, normalize_intensity

logger = logging.getLogger(__name__)

METHODS = ("erm", "vrex", "domain_prediction", "combined", "irmv1")
DOMAIN_METHODS = ("domain_prediction", "combined")

# stream tags for the per-epoch generators
_SEG_STREAM, _DP_STREAM, _SEG_AUG, _DP_AUG = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "erm"
    lambda_vrex: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    irm_weight: float = 0.0
    learning_rate: float = 5e-5
    dp_learning_rate: Optional[float] = None
    adam_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_budget: int = 6
    dp_batch_budget: int = 6
    dp_inner_steps: int = 1
    # in the joint stage the domain loss also shapes the representation
    joint_trains_repr: bool = True
    per_env_batch_sizes: Optional[Dict[int, int]] = None
    max_epochs: int = 100
    patience: int = 20
    warmup_epochs: int = 5
    joint_epochs: int = 5
    base_channels: int = 8
    levels: int = 3
    risk_reduction: Optional[str] = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    experimental: bool = False
    instrument: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augmentation, Mapping):
            aug = dict(self.augmentation)
            for k in ("rotation_degrees", "scale_range", "flip_axes", "motion_ghosts",
                      "bias_field_coefficient", "noise_std"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            self.augmentation = AugmentationConfig(**aug)
        self.adam_betas = tuple(self.adam_betas)
        if self.per_env_batch_sizes is not None:
            self.per_env_batch_sizes = {int(k): int(v) for k, v in self.per_env_batch_sizes.items()}
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "irmv1" and not self.experimental:
            raise ValueError("the irmv1 method requires experimental=True")
        obj.LossWeights(self.lambda_vrex, self.alpha, self.beta)
        if self.learning_rate <= 0 or (self.dp_learning_rate is not None and self.dp_learning_rate < 0):
            raise ValueError("learning rates must be positive")
        if self.batch_budget < 1 or self.dp_batch_budget < 1 or self.dp_inner_steps < 1:
            raise ValueError("batch budgets must be >= 1")
        if self.per_env_batch_sizes and min(self.per_env_batch_sizes.values()) < 1:
            raise ValueError("per-environment batch sizes must be >= 1")
        if self.max_epochs < 1 or self.patience < 1 or self.warmup_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("invalid epoch settings")
        if self.risk_reduction not in (None, "mean", "sum"):
            raise ValueError("risk_reduction must be 'mean', 'sum' or None")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def weights(self) -> obj.LossWeights:
        return obj.LossWeights(self.lambda_vrex, self.alpha, self.beta)

    @property
    def reduction(self) -> str:
        if self.risk_reduction is not None:
            return self.risk_reduction
        return "sum" if self.method in DOMAIN_METHODS else "mean"

    @property
    def uses_domain_head(self) -> bool:
        return self.method in DOMAIN_METHODS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["augmentation"] = {k: list(v) if isinstance(v, tuple) else v
                             for k, v in d["augmentation"].items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class TrainState:
    model: TwoHeadUNet
    config: TrainConfig
    domain_envs: List[int]
    epoch: int = 0
    best_val_score: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    history: List[dict] = field(default_factory=list)
    step_log: List[dict] = field(default_factory=list)
    snapshots: Dict[str, dict] = field(default_factory=dict)
    final_risks: Dict[int, float] = field(default_factory=dict)

    @property
    def final_risk_variance(self) -> float:
        vals = np.array(list(self.final_risks.values()), dtype=np.float64)
        return float(vals.var()) if len(vals) else float("nan")

    def domain_index(self, env_ids) -> np.ndarray:
        lookup = {e: i for i, e in enumerate(self.domain_envs)}
        return np.array([lookup[int(e)] for e in env_ids], dtype=np.int64)


# ------------------------------------------------------------------------ data


class SampleBank:
    """Preprocessed images/masks addressed by sample id."""

    def __init__(self):
        self.images: Dict[str, np.ndarray] = {}
        self.masks: Dict[str, Optional[np.ndarray]] = {}
        self.env: Dict[str, int] = {}

    def add(self, sample_id: str, image: np.ndarray, mask: Optional[np.ndarray], env_id: int):
        if sample_id in self.images:
            raise ValueError(f"duplicate sample id {sample_id}")
        self.images[sample_id] = np.asarray(image, dtype=np.float32)
        self.masks[sample_id] = None if mask is None else np.asarray(mask, dtype=np.uint8)
        self.env[sample_id] = int(env_id)

    @classmethod
    def from_datasets(cls, datasets, normalize: bool = True) -> "SampleBank":
        bank = cls()
        for ds in datasets:
            for s in ds.samples:
                vol = normalize_intensity(s.volume) if normalize else s.volume
                bank.add(s.sample_id, vol.voxels, None if s.mask is None else s.mask.voxels, ds.env_id)
        return bank

    @property
    def shape(self):
        return next(iter(self.images.values())).shape

    def labeled(self, ids) -> List[str]:
        return [i for i in ids if self.masks[i] is not None]


@dataclass
class FoldInputs:
    """Sample ids per environment for one training run."""

    seg_train: Dict[int, List[str]]
    seg_val: Dict[int, List[str]]
    dp_train: Dict[int, List[str]]
    dp_val: Dict[int, List[str]]

    @classmethod
    def from_plan(cls, plan, fold: int) -> "FoldInputs":
        def collect(attr):
            out = {}
            for env_id in sorted(plan.envs):
                ids = list(getattr(plan.fold(env_id, fold), attr))
                if ids:
                    out[env_id] = ids
            return out

        return cls(collect("seg_train_ids"), collect("seg_val_ids"),
                   collect("dp_train_ids"), collect("dp_val_ids"))

    @property
    def training_envs(self) -> List[int]:
        return sorted(set(self.seg_train) | set(self.dp_train))


# ------------------------------------------------------------------- batching


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def env_batch_sizes(sizes: Mapping[int, int], budget: int,
                    override: Optional[Mapping[int, int]] = None) -> Dict[int, int]:
    """Per-environment batch sizes proportional to environment size (min 1)."""
    sizes = {e: n for e, n in sizes.items() if n > 0}
    total = sum(sizes.values())
    out = {}
    for e, n in sizes.items():
        if override and e in override:
            b = override[e]
        else:
            b = max(1, _round_half_up(budget * n / total))
        out[e] = min(b, n)
    return out


class EnvBatchStream:
    """Yields, per step, one sub-batch of sample ids per environment.

    Environments are chunked into batches of their own size ``B_d``; an epoch
    has ``max_d ceil(n_d / B_d)`` steps and environments with fewer chunks
    cycle through theirs again.
    """

    def __init__(self, ids_by_env: Mapping[int, Sequence[str]], budget: int, seed: int,
                 tag: int, override: Optional[Mapping[int, int]] = None, n_steps: Optional[int] = None):
        self.ids_by_env = {e: sorted(ids) for e, ids in sorted(ids_by_env.items()) if ids}
        if not self.ids_by_env:
            raise ValueError("empty training set")
        self.batch_sizes = env_batch_sizes({e: len(v) for e, v in self.ids_by_env.items()},
                                           budget, override)
        self.seed, self.tag = seed, tag
        natural = max(math.ceil(len(v) / self.batch_sizes[e]) for e, v in self.ids_by_env.items())
        self.steps_per_epoch = natural if n_steps is None else n_steps

    def epoch(self, epoch: int) -> List[Dict[int, List[str]]]:
        rng = np.random.default_rng([self.seed, self.tag, epoch])
        chunks = {}
        for e, ids in self.ids_by_env.items():
            perm = [ids[i] for i in rng.permutation(len(ids))]
            b = self.batch_sizes[e]
            chunks[e] = [perm[i:i + b] for i in range(0, len(perm), b)]
        return [{e: c[s % len(c)] for e, c in chunks.items()} for s in range(self.steps_per_epoch)]


def make_env_batches(plan, fold: int, cfg: TrainConfig):
    """Segmentor and domain-predictor streams for one fold of a plan.

    The domain stream is aligned to the segmentor's step count; unlabeled
    samples only ever appear in it.
    """
    inputs = FoldInputs.from_plan(plan, fold)
    return _streams(inputs, cfg)


def _streams(inputs: FoldInputs, cfg: TrainConfig):
    seg = EnvBatchStream(inputs.seg_train, cfg.batch_budget, cfg.seed, _SEG_STREAM,
                         cfg.per_env_batch_sizes)
    dp = None
    if inputs.dp_train:
        dp = EnvBatchStream(inputs.dp_train, cfg.dp_batch_budget, cfg.seed, _DP_STREAM,
                            n_steps=seg.steps_per_epoch)
    return seg, dp


# ------------------------------------------------------------------ evaluation


def _to_tensor(arr, dtype):
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def predict_logits(model: TwoHeadUNet, images: np.ndarray, batch_size: int = 8):
    """Segmentation and domain logits for an ``(n, W, H, D)`` image stack."""
    dtype = next(model.parameters()).dtype
    seg_out, dom_out = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = _to_tensor(images[i:i + batch_size][:, None], dtype)
            f = model.features(x)
            seg_out.append(model.segment(f)[:, 0].numpy())
            dom_out.append(model.domain(f).numpy())
    if not seg_out:
        shape = (0,) + tuple(model.cfg.input_shape)
        return np.zeros(shape, np.float32), np.zeros((0, model.cfg.n_domains), np.float32)
    return np.concatenate(seg_out), np.concatenate(dom_out)


def validate(model: TwoHeadUNet, bank: SampleBank, seg_val: Mapping[int, Sequence[str]],
             dp_val: Optional[Mapping[int, Sequence[str]]] = None,
             domain_envs: Optional[Sequence[int]] = None) -> dict:
    """Mean validation Dice over environments and domain accuracy on ``dp_val``."""
    per_env = {}
    for env_id, ids in sorted(seg_val.items()):
        ids = bank.labeled(ids)
        if not ids:
            continue
        logits, _ = predict_logits(model, np.stack([bank.images[i] for i in ids]))
        scores = [dice_score(lg > 0, bank.masks[i]) for lg, i in zip(logits, ids)]
        per_env[env_id] = float(np.mean(scores))
    out = {
        "val_dice": float(np.mean(list(per_env.values()))) if per_env else float("nan"),
        "val_dice_per_env": per_env,
        "val_domain_accuracy": None,
    }
    if dp_val and domain_envs:
        lookup = {e: k for k, e in enumerate(domain_envs)}
        ids = [i for e in sorted(dp_val) if e in lookup for i in dp_val[e]]
        if ids:
            _, dom = predict_logits(model, np.stack([bank.images[i] for i in ids]))
            labels = np.array([lookup[bank.env[i]] for i in ids])
            out["val_domain_accuracy"] = domain_accuracy(dom, labels)
    return out


def env_risks(model: TwoHeadUNet, bank: SampleBank, ids_by_env: Mapping[int, Sequence[str]],
              batch_size: int = 8) -> Dict[int, float]:
    """Un-augmented segmentation risk per environment (mean of batch losses weighted by size)."""
    dtype = next(model.parameters()).dtype
    out = {}
    with torch.no_grad():
        for env_id, ids in sorted(ids_by_env.items()):
            ids = bank.labeled(ids)
            if not ids:
                continue
            x = _to_tensor(np.stack([bank.images[i] for i in ids])[:, None], dtype)
            y = _to_tensor(np.stack([bank.masks[i] for i in ids])[:, None], dtype)
            out[env_id] = float(obj.seg_loss(model.segment(model.features(x)), y))
    return out


# ---------------------------------------------------------------- the schedule


def _grad_norm(grads: Mapping[str, torch.Tensor]) -> float:
    return float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())))


class _Runner:
    def __init__(self, bank: SampleBank, inputs: FoldInputs, cfg: TrainConfig,
                 model: Optional[TwoHeadUNet] = None):
        self.bank, self.inputs, self.cfg = bank, inputs, cfg
        if not inputs.seg_train:
            raise ValueError("empty training set: no labeled samples for the segmentor")
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        domain_envs = sorted(inputs.dp_train) if inputs.dp_train else sorted(inputs.seg_train)
        if model is None:
            arch = ArchConfig(levels=cfg.levels, base_channels=cfg.base_channels,
                              n_domains=max(2, len(domain_envs)), input_shape=tuple(bank.shape))
            model = init_model(arch, cfg.seed)
        self.model = model.to(self.dtype)
        self.state = TrainState(model=self.model, config=cfg, domain_envs=domain_envs)
        self.seg_stream, self.dp_stream = _streams(inputs, cfg)
        betas = tuple(cfg.adam_betas)
        dp_lr = cfg.learning_rate if cfg.dp_learning_rate is None else cfg.dp_learning_rate
        self.opt = {
            "repr": torch.optim.Adam(model.group_parameters("repr"), lr=cfg.learning_rate,
                                     betas=betas, weight_decay=cfg.weight_decay),
            "seg": torch.optim.Adam(model.group_parameters("seg"), lr=cfg.learning_rate,
                                    betas=betas, weight_decay=cfg.weight_decay),
            "dp": torch.optim.Adam(model.group_parameters("dp"), lr=max(dp_lr, 0.0),
                                   betas=betas, weight_decay=cfg.weight_decay),
        }
        self.dp_lr = dp_lr
        self.all_envs = inputs.training_envs

    # stage boundaries (domain methods only)
    def stage(self, epoch: int) -> str:
        if not self.cfg.uses_domain_head:
            return "seg"
        if epoch < self.cfg.warmup_epochs:
            return "warmup"
        if epoch < self.cfg.warmup_epochs + self.cfg.joint_epochs:
            return "joint"
        return "adversarial"

    def selectable(self, epoch: int) -> bool:
        if not self.cfg.uses_domain_head:
            return True
        start = self.cfg.warmup_epochs + self.cfg.joint_epochs
        return epoch >= start or self.cfg.max_epochs <= start

    def _batch(self, ids_by_env, rng, with_masks: bool):
        imgs, masks, envs = [], [], []
        for env_id in sorted(ids_by_env):
            for sid in ids_by_env[env_id]:
                m = self.bank.masks[sid] if with_masks else None
                img, m = augment_arrays(self.bank.images[sid], m, self.cfg.augmentation, rng)
                imgs.append(img)
                masks.append(m)
                envs.append(env_id)
        x = _to_tensor(np.stack(imgs)[:, None], self.dtype)
        y = _to_tensor(np.stack(masks)[:, None], self.dtype) if with_masks else None
        return x, y, torch.tensor(envs)

    def _objective(self, logits, y, env_of):
        cfg = self.cfg
        if cfg.method == "irmv1":
            scale = torch.ones((), dtype=self.dtype, requires_grad=True)
            risks = obj.split_risks(logits * scale, y, env_of)
            base = obj.vrex_total(risks, 0.0, cfg.reduction)
            if cfg.irm_weight:
                base = base + cfg.irm_weight * obj.irmv1_penalty(risks, scale)
            return base, risks
        risks = obj.split_risks(logits, y, env_of)
        lam = cfg.lambda_vrex if cfg.method in ("vrex", "combined") else 0.0
        return obj.vrex_total(risks, lam, cfg.reduction), risks

    def _check_finite(self, value, what, epoch, step):
        if not torch.isfinite(value):
            raise TrainingDiverged(f"non-finite {what} ({value.item()}) at epoch {epoch} step {step} "
                                   f"(method={self.cfg.method}, lr={self.cfg.learning_rate})")

    def _seg_update(self, batch, rng, epoch, step, record):
        x, y, env_of = self._batch(batch, rng, with_masks=True)
        logits = self.model.segment(self.model.features(x))
        objective, risks = self._objective(logits, y, env_of)
        self._check_finite(objective, "segmentation objective", epoch, step)
        if record is not None:
            record["seg_counts"] = {e: len(batch.get(e, [])) for e in self.all_envs}
            record["seg_grad_norm"] = {}
            for e in self.all_envs:
                if e in risks.env_ids:
                    g = gradients(self.model, risks[e], ["seg"], retain_graph=True)
                    record["seg_grad_norm"][e] = _grad_norm(g)
                else:
                    record["seg_grad_norm"][e] = 0.0
        grads = gradients(self.model, objective, ["repr", "seg"])
        apply_gradients(self.model, grads)
        self.opt["repr"].step()
        self.opt["seg"].step()
        return objective.item(), risks.detached()

    def _dp_update(self, batch, rng, epoch, step, record, stage="adversarial"):
        x, _, env_of = self._batch(batch, rng, with_masks=False)
        labels = torch.from_numpy(self.state.domain_index(env_of.tolist()))
        if record is not None:
            record["dp_counts"] = {e: int((env_of == e).sum()) for e in self.all_envs}
        first = None
        active = self.cfg.alpha > 0 and self.dp_lr > 0
        if stage == "joint" and self.cfg.joint_trains_repr and active:
            l_d = obj.domain_loss(self.model.domain(self.model.features(x)), labels)
            self._check_finite(l_d, "domain loss", epoch, step)
            first = l_d.item()
            grads = gradients(self.model, self.cfg.alpha * l_d, ["repr", "dp"])
            apply_gradients(self.model, grads)
            self.opt["repr"].step()
            self.opt["dp"].step()
        if stage == "adversarial" and self.cfg.beta > 0:
            # the encoder is frozen until the confusion step, so its graph is reused there
            graph = self.model.features(x)
            feats = graph.detach()
        else:
            graph = None
            with torch.no_grad():
                feats = self.model.features(x)
        # features are fixed here, so extra head updates only cost the head
        for _ in range(self.cfg.dp_inner_steps):
            l_d = obj.domain_loss(self.model.domain(feats), labels)
            self._check_finite(l_d, "domain loss", epoch, step)
            if first is None:
                first = l_d.item()
            if not active:
                break
            grads = gradients(self.model, self.cfg.alpha * l_d, ["dp"])
            if record is not None and "dp_grad_norm" not in record:
                record["dp_grad_norm"] = _grad_norm(grads)
            apply_gradients(self.model, grads)
            self.opt["dp"].step()
        return first, x, graph

    def _confusion_update(self, x, epoch, step, feats=None):
        if feats is None:
            feats = self.model.features(x)
        l_conf = obj.confusion_loss(self.model.domain(feats))
        self._check_finite(l_conf, "confusion loss", epoch, step)
        if self.cfg.beta > 0:
            grads = gradients(self.model, self.cfg.beta * l_conf, ["repr"])
            apply_gradients(self.model, grads)
            self.opt["repr"].step()
        return l_conf.item()

    def run(self) -> TrainState:
        cfg, state = self.cfg, self.state
        best = None
        for epoch in range(cfg.max_epochs):
            stage = self.stage(epoch)
            if stage == "adversarial" and "adversarial_start" not in state.snapshots:
                state.snapshots["adversarial_start"] = copy.deepcopy(self.model.state_dict())
            seg_steps = self.seg_stream.epoch(epoch)
            dp_steps = self.dp_stream.epoch(epoch) if (self.dp_stream and stage in ("joint", "adversarial")) else None
            objectives, risk_sums, risk_counts = [], {}, {}
            d_losses, c_losses = [], []
            for step, batch in enumerate(seg_steps):
                record = {"epoch": epoch, "step": step, "stage": stage} if cfg.instrument else None
                seg_rng = np.random.default_rng([cfg.seed, _SEG_AUG, epoch, step])
                value, risks = self._seg_update(batch, seg_rng, epoch, step, record)
                objectives.append(value)
                for e, r in risks.items():
                    risk_sums[e] = risk_sums.get(e, 0.0) + r
                    risk_counts[e] = risk_counts.get(e, 0) + 1
                if dp_steps is not None:
                    dp_rng = np.random.default_rng([cfg.seed, _DP_AUG, epoch, step])
                    l_d, x_dp, feats = self._dp_update(dp_steps[step], dp_rng, epoch, step, record, stage)
                    d_losses.append(l_d)
                    if stage == "adversarial":
                        c_losses.append(self._confusion_update(x_dp, epoch, step, feats))
                if record is not None:
                    state.step_log.append(record)
            train_risks = {e: risk_sums[e] / risk_counts[e] for e in sorted(risk_sums)}
            rv = np.array(list(train_risks.values()))
            val = validate(self.model, self.bank, self.inputs.seg_val,
                           self.inputs.dp_val if cfg.uses_domain_head else None, state.domain_envs)
            entry = {
                "epoch": epoch,
                "stage": stage,
                "train_objective": float(np.mean(objectives)),
                "train_risks": train_risks,
                "risk_variance": float(rv.var()),
                "domain_loss": float(np.mean(d_losses)) if d_losses else None,
                "confusion_loss": float(np.mean(c_losses)) if c_losses else None,
                **val,
            }
            state.history.append(entry)
            state.epoch = epoch + 1
            logger.debug("epoch %d %s", epoch, entry)
            if self.selectable(epoch):
                score = val["val_dice"]
                if math.isnan(score):
                    # nothing to validate on: keep the latest weights
                    state.best_epoch = epoch
                    best = copy.deepcopy(self.model.state_dict())
                elif best is None or score > state.best_val_score:
                    state.best_val_score = score
                    state.best_epoch = epoch
                    state.epochs_since_improvement = 0
                    best = copy.deepcopy(self.model.state_dict())
                else:
                    state.epochs_since_improvement += 1
                    if state.epochs_since_improvement >= cfg.patience:
                        break
        if best is not None:
            self.model.load_state_dict(best)
        state.final_risks = env_risks(self.model, self.bank, self.inputs.seg_train)
        return state


def run_schedule(bank: SampleBank, inputs: FoldInputs, cfg: TrainConfig,
                 model: Optional[TwoHeadUNet] = None) -> TrainState:
    return _Runner(bank, inputs, cfg, model).run()


def train(data, plan, fold: int, cfg: TrainConfig, bank: Optional[SampleBank] = None) -> TrainState:
    """Train ``cfg.method`` on one fold of ``plan``; ``data`` are EnvironmentDatasets."""
    if bank is None:
        bank = SampleBank.from_datasets(data)
    inputs = FoldInputs.from_plan(plan, fold)
    if cfg.method in ("vrex", "combined", "domain_prediction") and len(inputs.training_envs) < 2:
        raise ValueError(f"{cfg.method} needs at least two training environments")
    return run_schedule(bank, inputs, cfg)


def _train_method(method):
    def runner(data, plan, fold, cfg: TrainConfig, bank=None) -> TrainState:
        if cfg.method != method:
            raise ValueError(f"config method is {cfg.method!r}, expected {method!r}")
        return train(data, plan, fold, cfg, bank)

    runner.__name__ = f"train_{method}"
    runner.__doc__ = f"Run the {method} schedule on one fold."
    return runner


train_erm = _train_method("erm")
train_vrex = _train_method("vrex")
train_domain_prediction = _train_method("domain_prediction")
train_combined = _train_method("combined")
