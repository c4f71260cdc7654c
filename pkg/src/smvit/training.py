"""Training and evaluation: optimizers, the gradual view-moving
curriculum versus the single-stage baseline, per-view within-view
evaluation, and the curriculum ablation comparison.

The curriculum starts at the standard view and introduces views in order
of increasing angular distance from it, warm-starting weights at each
stage and rebuilding the view-conversion factors (the embedding function
changes as the model trains). The baseline trains on all views in one
stage with no conversion.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ComparisonError, ConfigError, NumericError, ProtocolError
from .model import SiamesePair, SmvitModel
from .view_conversion import (
    STANDARD_VIEW,
    FactorRegistry,
    build_factor_registry,
    validate_view,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    kind: str = "adam"  # adam | sgd
    lr: float = 3e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


class Optimizer:
    """In-place parameter updates; gradients are cleared after each step."""

    def __init__(self, named_params, config: OptimizerConfig):
        self.named_params = list(named_params)
        self.config = config
        self.t = 0
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for name, p in self.named_params
        }

    def step(self):
        cfg = self.config
        self.t += 1
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            st = self.state[name]
            if cfg.kind == "sgd":
                st["m"] = cfg.momentum * st["m"] + g
                p.data -= (cfg.lr * st["m"]).astype(p.data.dtype)
            else:
                st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * g
                st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * g * g
                mhat = st["m"] / (1 - cfg.beta1 ** self.t)
                vhat = st["v"] / (1 - cfg.beta2 ** self.t)
                p.data -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)
            p.zero_grad()


def optimizer_step(optimizer: Optimizer):
    optimizer.step()


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------

@dataclass
class TrainPlan:
    mode: str  # base | gradual
    standard_view: int = STANDARD_VIEW
    stages: list = field(default_factory=list)  # [(views tuple, epochs), ...]
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    seed: int = 0
    # training-time view conversion; None resolves per mode (gradual on,
    # base off). Exposed separately so the conversion effect is ablatable.
    use_view_conversion: bool | None = None

    def __post_init__(self):
        if self.mode not in ("base", "gradual"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.mode == "base" and len(self.stages) != 1:
            raise ConfigError("base mode takes exactly one stage")
        if self.mode == "gradual" and self.stages:
            if set(self.stages[0][0]) != {self.standard_view}:
                raise ConfigError("gradual stage 0 must train the standard view only")

    @property
    def convert(self):
        if self.use_view_conversion is None:
            return self.mode == "gradual"
        return self.use_view_conversion


@dataclass
class EpochMetrics:
    stage: int
    epoch: int
    views_active: list
    train_loss: float
    val_accuracy_per_view: dict  # view -> accuracy in [0,1]
    wall_time_s: float


def gradual_schedule(standard, all_views, epochs_per_stage,
                     optimizer=None, batch_size=32, seed=0) -> TrainPlan:
    """Stages grow outward from the standard view by increasing angular
    distance; views missing from all_views are skipped, order kept."""
    standard = validate_view(standard)
    views = sorted({validate_view(v) for v in all_views})
    if standard not in views:
        raise ConfigError(f"standard view {standard} not among views {views}")
    by_distance = {}
    for v in views:
        by_distance.setdefault(abs(v - standard), []).append(v)
    stages = [(tuple(by_distance[d]), epochs_per_stage) for d in sorted(by_distance)]
    return TrainPlan(mode="gradual", standard_view=standard, stages=stages,
                     optimizer=optimizer or OptimizerConfig(),
                     batch_size=batch_size, seed=seed)


def base_schedule(standard, all_views, epochs, optimizer=None,
                  batch_size=32, seed=0) -> TrainPlan:
    standard = validate_view(standard)
    views = tuple(sorted({validate_view(v) for v in all_views}))
    return TrainPlan(mode="base", standard_view=standard, stages=[(views, epochs)],
                     optimizer=optimizer or OptimizerConfig(),
                     batch_size=batch_size, seed=seed)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _index_subjects(frames):
    return {s: i for i, s in enumerate(sorted({f.subject for f in frames}))}


def _stack(frames, dtype):
    return np.stack([f.image for f in frames])[:, None].astype(dtype)


def train(model: SmvitModel, plan: TrainPlan, split, deterministic=False,
          epoch_callback=None):
    """Run the plan on the split. Returns (model, metrics, registry).

    Pairing inside a batch: each active-view frame is paired with a
    standard-view frame of the same subject when one exists, else with a
    random standard-view frame (whose own subject labels branch a).
    """
    subjects = _index_subjects(split.train)
    if len(subjects) != model.config.num_subjects:
        raise ConfigError(
            f"model expects {model.config.num_subjects} subjects, "
            f"split has {len(subjects)}"
        )
    std = plan.standard_view
    train_views = {f.view for f in split.train}
    if std not in train_views:
        raise ProtocolError(f"training data lacks the standard view {std}")

    by_view = {}
    for f in split.train:
        by_view.setdefault(f.view, []).append(f)
    std_by_subject = {}
    for f in by_view[std]:
        std_by_subject.setdefault(f.subject, []).append(f)

    rng = np.random.default_rng(plan.seed)
    dtype = model.config.dtype
    metrics = []
    registry = None

    for stage_idx, (views, epochs) in enumerate(plan.stages):
        views = tuple(sorted(views))
        active = [f for f in split.train if f.view in views]
        if not active:
            raise ProtocolError(f"stage {stage_idx} views {views} have no training data")
        if plan.convert and len(train_views) > 1:
            # factors are recomputed from training data only, at stage
            # start, because the embedding function has moved
            registry = build_factor_registry(model, split.train, standard=std)
        optimizer = Optimizer(model.named_parameters(), plan.optimizer)

        for epoch in range(epochs):
            t0 = time.perf_counter()
            loss_sum, n_seen = 0.0, 0
            for view in views:
                group = by_view.get(view, [])
                order = rng.permutation(len(group))
                for start in range(0, len(group), plan.batch_size):
                    batch = [group[i] for i in order[start:start + plan.batch_size]]
                    partners, labels_a = [], []
                    for f in batch:
                        pool = std_by_subject.get(f.subject)
                        if pool:
                            partner = pool[int(rng.integers(len(pool)))]
                        else:
                            all_std = by_view[std]
                            partner = all_std[int(rng.integers(len(all_std)))]
                        partners.append(partner)
                        labels_a.append(subjects[partner.subject])
                    labels_b = np.array([subjects[f.subject] for f in batch])
                    pair = SiamesePair(
                        a_frames=_stack(partners, dtype),
                        b_frames=_stack(batch, dtype),
                        view_a=std, view_b=view, labels=labels_b,
                    )
                    emb_a, emb_b, la, lb = model.forward_pair(
                        pair, registry=registry, mode="train"
                    )
                    loss = T.mul(
                        T.add(T.cross_entropy(la, np.array(labels_a)),
                              T.cross_entropy(lb, labels_b)),
                        0.5,
                    )
                    if model.config.contrastive_weight > 0:
                        loss = model.loss(la, lb, labels_b, emb_a, emb_b)
                    model.zero_grad()
                    loss.backward()
                    optimizer.step()
                    loss_sum += loss.item() * len(batch)
                    n_seen += len(batch)
            val_acc = evaluate_per_view(model, registry, split.val, subjects)
            em = EpochMetrics(
                stage=stage_idx,
                epoch=epoch,
                views_active=list(views),
                train_loss=loss_sum / max(1, n_seen),
                val_accuracy_per_view=val_acc,
                wall_time_s=0.0 if deterministic else time.perf_counter() - t0,
            )
            metrics.append(em)
            if epoch_callback:
                epoch_callback(em)
    return model, metrics, registry


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_per_view(model: SmvitModel, registry, frames, subjects) -> dict:
    """Within-view accuracy: each view scored independently."""
    by_view = {}
    for f in frames:
        by_view.setdefault(f.view, []).append(f)
    result = {}
    for view in sorted(by_view):
        group = by_view[view]
        if not group:
            log.warning("view %s has no validation frames; omitted", view)
            continue
        if registry is not None and view != registry.standard_view and view not in registry.entries:
            log.warning("view %s missing from registry; evaluating raw", view)
            preds = model.predict(group, None, view)
        else:
            preds = model.predict(group, registry, view)
        truth = [subjects.get(f.subject, -1) for f in group]
        result[view] = float(np.mean([p == t for p, t in zip(preds, truth)]))
    return result


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    view: int
    initial_base: float
    initial_gradual: float
    max_base: float
    max_gradual: float

    @property
    def initial_delta(self):
        return self.initial_gradual - self.initial_base

    @property
    def max_delta(self):
        return self.max_gradual - self.max_base


@dataclass
class AblationReport:
    standard_view: int
    rows: list
    loss_summary_base: dict
    loss_summary_gradual: dict

    def off_standard_rows(self):
        return [r for r in self.rows if r.view != self.standard_view]


def _first_active_accuracy(metrics, view):
    for em in metrics:
        if view in em.views_active:
            return em.val_accuracy_per_view.get(view, 0.0)
    return metrics[0].val_accuracy_per_view.get(view, 0.0)


def _loss_summary(metrics):
    losses = [em.train_loss for em in metrics]
    return {"first": losses[0], "last": losses[-1],
            "min": min(losses), "mean": float(np.mean(losses))}


def ablation_report(metrics_base, metrics_gradual, standard_view=STANDARD_VIEW) -> AblationReport:
    """Per-view initial and best validation accuracy for the single-stage
    baseline vs the curriculum run, plus loss-curve summaries."""
    if not metrics_base or not metrics_gradual:
        raise ComparisonError("both metric streams must be non-empty")
    views_b = set(metrics_base[0].val_accuracy_per_view)
    views_g = set(metrics_gradual[0].val_accuracy_per_view)
    if views_b != views_g:
        raise ComparisonError(
            f"view sets differ: base {sorted(views_b)} vs gradual {sorted(views_g)}"
        )
    rows = []
    for view in sorted(views_b):
        rows.append(AblationRow(
            view=view,
            initial_base=_first_active_accuracy(metrics_base, view),
            initial_gradual=_first_active_accuracy(metrics_gradual, view),
            max_base=max(em.val_accuracy_per_view.get(view, 0.0) for em in metrics_base),
            max_gradual=max(em.val_accuracy_per_view.get(view, 0.0) for em in metrics_gradual),
        ))
    return AblationReport(
        standard_view=standard_view,
        rows=rows,
        loss_summary_base=_loss_summary(metrics_base),
        loss_summary_gradual=_loss_summary(metrics_gradual),
    )
