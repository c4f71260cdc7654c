"""Command-line entry point.

Subcommands: synth (write a synthetic silhouette dataset), train (fit a
model and persist checkpoint/registry/metrics/figures), eval (score a
saved checkpoint per view and per condition), gradcheck (finite-
difference verification of every differentiable op plus a miniature
end-to-end model).

Configuration comes from an optional JSON file; command-line flags win
over file values. Exit codes: 0 success, 2 configuration errors,
3 data/protocol/checkpoint errors, 4 numeric errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import (
    SynthSpec,
    export_casia_layout,
    load_casia_b,
    split_7_3,
    synth_generate,
)
from .errors import (
    ConfigError,
    DataError,
    CheckpointError,
    NumericError,
    ProtocolError,
    ShapeError,
    SmvitError,
)
from .model import ModelConfig, SmvitModel, load_checkpoint, save_checkpoint
from .reporting import (
    plot_accuracy_curves,
    plot_loss_curve,
    plot_view_accuracy,
    write_metrics_jsonl,
    write_view_table_csv,
)
from .tensor import Tensor
from .training import (
    OptimizerConfig,
    base_schedule,
    evaluate_per_view,
    gradual_schedule,
    train,
)
from .view_conversion import FactorRegistry

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _resolve(args, file_cfg: dict) -> dict:
    """Start from file values; any flag given on the command line wins."""
    cfg = dict(file_cfg)
    for key in ("mode", "data_root", "out", "seed", "precision"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "deterministic", False):
        cfg["deterministic"] = True
    cfg.setdefault("mode", "base")
    cfg.setdefault("seed", 0)
    cfg.setdefault("precision", 32)
    cfg.setdefault("deterministic", False)
    return cfg


def _require(cfg, key, command):
    if not cfg.get(key):
        raise ConfigError(f"{command} requires --{key.replace('_', '-')} "
                          f"(or {key!r} in the config file)")
    return cfg[key]


def _outdir(cfg, command) -> Path:
    out = Path(_require(cfg, "out", command))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(cfg) -> int:
    out = _outdir(cfg, "synth")
    synth_cfg = dict(cfg.get("synth", {}))
    synth_cfg.setdefault("seed", cfg["seed"])
    if "views" in synth_cfg:
        synth_cfg["views"] = tuple(synth_cfg["views"])
    if "conditions" in synth_cfg:
        synth_cfg["conditions"] = tuple(synth_cfg["conditions"])
    if "resolution" in synth_cfg:
        synth_cfg["resolution"] = tuple(synth_cfg["resolution"])
    try:
        spec = SynthSpec(**synth_cfg)
    except TypeError as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    frames = synth_generate(spec)
    manifest = export_casia_layout(frames, out)
    print(f"wrote {manifest['total_frames']} frames for "
          f"{manifest['n_subjects']} subjects to {out}")
    print(f"views: {manifest['views']}  conditions: {manifest['conditions']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _model_config(cfg, num_subjects) -> ModelConfig:
    model_cfg = dict(cfg.get("model", {}))
    model_cfg.setdefault("num_subjects", num_subjects)
    model_cfg["precision"] = int(cfg["precision"])
    model_cfg.setdefault("init_seed", cfg["seed"])
    try:
        return ModelConfig(**model_cfg)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _train_plan(cfg, views):
    train_cfg = dict(cfg.get("train", {}))
    opt = OptimizerConfig(**train_cfg.get("optimizer", {}))
    std = train_cfg.get("standard_view", 90)
    batch = train_cfg.get("batch_size", 32)
    if cfg["mode"] == "gradual":
        plan = gradual_schedule(std, views,
                                epochs_per_stage=train_cfg.get("epochs_per_stage", 15),
                                optimizer=opt, batch_size=batch, seed=cfg["seed"])
    else:
        plan = base_schedule(std, views, epochs=train_cfg.get("epochs", 15),
                             optimizer=opt, batch_size=batch, seed=cfg["seed"])
    if "use_view_conversion" in train_cfg:
        plan.use_view_conversion = bool(train_cfg["use_view_conversion"])
    return plan


def cmd_train(cfg) -> int:
    data_root = _require(cfg, "data_root", "train")
    out = _outdir(cfg, "train")
    resolution = tuple(cfg.get("model", {}).get("resolution", (64, 64)))
    frames = load_casia_b(data_root, resolution=resolution)
    split = split_7_3(frames, seed=cfg["seed"])
    subjects = sorted({f.subject for f in frames})
    views = sorted({f.view for f in frames})

    model = SmvitModel(_model_config(cfg, len(subjects)))
    plan = _train_plan(cfg, views)

    def progress(em):
        acc = " ".join(f"{v}:{a:.3f}" for v, a in sorted(em.val_accuracy_per_view.items()))
        print(f"stage {em.stage} epoch {em.epoch} "
              f"loss {em.train_loss:.4f} val[{acc}]")

    model, metrics, registry = train(
        model, plan, split, deterministic=cfg["deterministic"],
        epoch_callback=progress,
    )

    if registry is None:
        registry = FactorRegistry(standard_view=plan.standard_view)
    registry.save(out / "registry.json")
    save_checkpoint(
        model, out / "checkpoint.bin", seed=cfg["seed"],
        stage=len(plan.stages) - 1, subjects=subjects,
        extra={"mode": cfg["mode"], "deterministic": cfg["deterministic"],
               "standard_view": plan.standard_view},
    )
    write_metrics_jsonl(metrics, out / "metrics.jsonl")
    write_view_table_csv(metrics[-1].val_accuracy_per_view, out / "view_table.csv")
    plot_loss_curve(metrics, out / "loss_curve.png")
    plot_accuracy_curves(metrics, out / "accuracy_curves.png")
    plot_view_accuracy(metrics[-1].val_accuracy_per_view, out / "view_accuracy.png")
    print(f"final per-view accuracy: "
          + " ".join(f"{v}:{a:.4f}"
                     for v, a in sorted(metrics[-1].val_accuracy_per_view.items())))
    print(f"artifacts written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(cfg) -> int:
    data_root = _require(cfg, "data_root", "eval")
    out = _outdir(cfg, "eval")
    ckpt_path = out / "checkpoint.bin"
    if not ckpt_path.is_file():
        raise CheckpointError(f"no checkpoint at {ckpt_path}")
    model, header = load_checkpoint(ckpt_path)
    registry_path = out / "registry.json"
    registry = FactorRegistry.load(registry_path) if registry_path.is_file() else None
    if registry is not None and not registry.entries:
        registry = None

    frames = load_casia_b(data_root, resolution=model.config.resolution)
    split = split_7_3(frames, seed=header["seed"])
    subjects = {s: i for i, s in enumerate(header["subjects"])}
    if set(f.subject for f in frames) - set(subjects):
        raise ProtocolError("dataset holds subjects unknown to the checkpoint")

    acc_by_view = evaluate_per_view(model, registry, split.val, subjects)
    write_view_table_csv(acc_by_view, out / "eval_view_table.csv")
    plot_view_accuracy(acc_by_view, out / "eval_view_accuracy.png",
                       title="Held-out accuracy per view")

    # condition-averaged summary: accuracy per walking condition, all views pooled
    by_condition = {}
    for f in split.val:
        by_condition.setdefault(f.condition, []).append(f)
    lines = ["condition,accuracy,n_frames"]
    for cond in sorted(by_condition):
        group = by_condition[cond]
        hits = 0
        by_view = {}
        for f in group:
            by_view.setdefault(f.view, []).append(f)
        for view, vgroup in by_view.items():
            preds = model.predict(vgroup, registry, view)
            hits += sum(p == subjects.get(f.subject, -1)
                        for p, f in zip(preds, vgroup))
        lines.append(f"{cond},{hits / len(group):.4f},{len(group)}")
    (out / "eval_condition_summary.csv").write_text("\n".join(lines) + "\n")

    for v in sorted(acc_by_view):
        print(f"view {v:3d}: accuracy {acc_by_view[v]:.4f}")
    mean = float(np.mean(list(acc_by_view.values())))
    print(f"mean over views: {mean:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _faulty_silu(x):
    """Negative-control op: correct forward, doubled backward."""
    out = T.silu(x)
    orig = out._backward

    def backward(g):
        orig(2.0 * g)

    out._backward = backward
    return out


def gradcheck_cases(rng):
    """One pure closure per differentiable op; constants bound outside."""
    cases = []

    def case(name, builder, shape):
        f = builder()
        x = Tensor(rng.normal(size=shape))
        cases.append((name, f, x))

    case("add", lambda: (lambda x, c=Tensor(rng.normal(size=(3, 4))):
                         T.sum_all(T.add(x, c))), (3, 4))
    case("sub", lambda: (lambda x, c=Tensor(rng.normal(size=(3, 4))):
                         T.sum_all(T.sub(c, x))), (3, 4))
    case("mul", lambda: (lambda x, c=Tensor(rng.normal(size=(3, 4))):
                         T.sum_all(T.mul(x, c))), (3, 4))
    case("mean_all", lambda: (lambda x: T.mean_all(x)), (5, 2))
    case("silu", lambda: (lambda x: T.sum_all(T.silu(x))), (4, 4))
    case("softmax", lambda: (lambda x, c=Tensor(rng.normal(size=(3, 5))):
                             T.sum_all(T.mul(T.softmax(x), c))), (3, 5))
    case("reshape", lambda: (lambda x: T.sum_all(T.mul(T.reshape(x, (2, 6)),
                                                       T.reshape(x, (2, 6))))), (3, 4))
    case("transpose", lambda: (lambda x, c=Tensor(rng.normal(size=(4, 3))):
                               T.sum_all(T.mul(T.transpose(x, (1, 0)), c))), (3, 4))
    case("concat", lambda: (lambda x, c=Tensor(rng.normal(size=(2, 3))):
                            T.sum_all(T.mul(T.concat([x, c], axis=0),
                                            T.concat([c, x], axis=0)))), (2, 3))
    case("matmul", lambda: (lambda x, c=Tensor(rng.normal(size=(4, 2))):
                            T.sum_all(T.matmul(x, c))), (3, 4))
    case("linear", lambda: (lambda x, w=Tensor(rng.normal(size=(4, 2))),
                            b=Tensor(rng.normal(size=2)):
                            T.sum_all(T.linear(x, w, b))), (3, 4))
    case("conv2d", lambda: (lambda x, k=Tensor(rng.normal(size=(2, 3, 3, 3))):
                            T.sum_all(T.conv2d(x, k, stride=2, padding=1))),
         (2, 3, 6, 6))
    case("depthwise_conv2d",
         lambda: (lambda x, k=Tensor(rng.normal(size=(3, 3, 3))):
                  T.mean_all(T.depthwise_conv2d(x, k, stride=1, padding=1))),
         (2, 3, 5, 5))
    case("batchnorm2d",
         lambda: (lambda x, g=Tensor(rng.normal(size=3)),
                  b=Tensor(rng.normal(size=3)),
                  c=Tensor(rng.normal(size=(2, 3, 4, 4))):
                  T.sum_all(T.mul(
                      T.batchnorm2d(x, g, b, T.BatchNorm2dState.create(3),
                                    mode="train"), c))),
         (2, 3, 4, 4))
    case("layernorm",
         lambda: (lambda x, g=Tensor(rng.normal(size=6)),
                  b=Tensor(rng.normal(size=6)),
                  c=Tensor(rng.normal(size=(4, 6))):
                  T.sum_all(T.mul(T.layernorm(x, g, b), c))),
         (4, 6))
    case("global_avg_pool",
         lambda: (lambda x, c=Tensor(rng.normal(size=(2, 3))):
                  T.sum_all(T.mul(T.global_avg_pool(x), c))),
         (2, 3, 4, 4))
    case("unfold_patches",
         lambda: (lambda x, c=Tensor(rng.normal(size=(2, 4, 4, 3))):
                  T.sum_all(T.mul(T.unfold_patches(x, 2, 2), c))),
         (2, 3, 4, 4))
    case("fold_patches",
         lambda: (lambda x, c=Tensor(rng.normal(size=(2, 3, 4, 4))):
                  T.sum_all(T.mul(T.fold_patches(x, 4, 4, 2, 2), c))),
         (2, 4, 4, 3))
    case("cross_entropy",
         lambda: (lambda x: T.cross_entropy(x, np.array([0, 2, 1]))),
         (3, 4))
    return cases


def _miniature_model():
    from .blocks import CMBlockConfig

    return SmvitModel(ModelConfig(
        resolution=(8, 8), num_subjects=2, precision=64, init_seed=0,
        backbone=CMBlockConfig(
            stem_channels=2, mobile_channels=(3,), expansion_ratio=2.0,
            token_dim=4, transformer_depth=1, heads=2, patch_w=2, patch_h=2,
            ffn_dim=4, out_channels=4,
        ),
    ))


def run_gradcheck(seed=0, precision=64, inject_fault=False):
    """Returns the list of GradCheckReports (ops first, model last)."""
    if precision == 64:
        step, tol, model_tol = 1e-5, 1e-6, 1e-5
    else:
        step, tol, model_tol = 1e-3, 1e-3, 1e-2
    rng = np.random.default_rng(seed)
    reports = []
    for name, f, x in gradcheck_cases(rng):
        if precision == 32:
            x = Tensor(x.data.astype(np.float32))
        if inject_fault and name == "silu":
            f = lambda x: T.sum_all(_faulty_silu(x))  # noqa: E731
        reports.append(T.grad_check(f, x, step=step, tol=tol, name=name))

    model = _miniature_model()
    rng2 = np.random.default_rng(seed + 1)
    x = Tensor(rng2.normal(0.5, 0.3, size=(2, 1, 8, 8)))
    if precision == 32:
        x = Tensor(x.data.astype(np.float32))
    reports.append(T.grad_check(
        lambda t: T.mean_all(model.embed(t)), x,
        step=step, tol=model_tol, name="smvit_end_to_end",
    ))
    return reports


def cmd_gradcheck(cfg) -> int:
    t0 = time.perf_counter()
    reports = run_gradcheck(
        seed=cfg["seed"], precision=int(cfg["precision"]),
        inject_fault=bool(cfg.get("inject_fault")),
    )
    for rep in reports:
        print(rep)
    failures = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failures)}/{len(reports)} checks passed "
          f"in {time.perf_counter() - t0:.1f}s")
    if failures:
        print("FAILED: " + ", ".join(r.op_name for r in failures))
        raise NumericError(
            "gradient check failed for: " + ", ".join(r.op_name for r in failures)
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smvit",
        description="Multi-view gait recognition: synthesize data, train, "
                    "evaluate, and verify gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("synth", "write a synthetic silhouette dataset"),
        ("train", "train a model and persist run artifacts"),
        ("eval", "evaluate a saved checkpoint per view and condition"),
        ("gradcheck", "finite-difference check of all differentiable ops"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--mode", choices=("base", "gradual"))
        p.add_argument("--data-root", dest="data_root")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--precision", type=int, choices=(32, 64))
        if name == "gradcheck":
            p.add_argument("--inject-fault", dest="inject_fault",
                           action="store_true",
                           help="negative control: corrupt one backward pass")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args, _load_config_file(args.config))
        if getattr(args, "inject_fault", False):
            cfg["inject_fault"] = True
        return COMMANDS[args.command](cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProtocolError, CheckpointError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SmvitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
