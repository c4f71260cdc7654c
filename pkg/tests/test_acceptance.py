"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

These are the slow, integration-level guarantees: gradient correctness
of the whole op surface, the view-conversion algebra, structural
invariants of the blocks, training behavior on the synthetic dataset,
the curriculum comparison, attention cost scaling, bit-level
determinism of the command-line train path, and protocol fidelity of
the split and the evaluation table.
"""

import json
import time

import numpy as np
import numpy.testing as npt

from smvit import tensor as T
from smvit.blocks import CMBlockConfig, MobileViTBlock, MultiHeadSelfAttention
from smvit.cli import EXIT_OK, main, run_gradcheck
from smvit.dataset import SynthSpec, split_7_3, synth_generate
from smvit.model import ModelConfig, SiamesePair, SmvitModel
from smvit.tensor import Tensor
from smvit.training import (
    Optimizer,
    OptimizerConfig,
    ablation_report,
    base_schedule,
    evaluate_per_view,
    gradual_schedule,
    train,
)
from smvit.reporting import write_view_table_csv
from smvit.view_conversion import FeatureBatch, apply_it, compute_pfc


def report(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def test_gradient_suite():
    t0 = time.perf_counter()
    reports = run_gradcheck(seed=0, precision=64)
    elapsed = time.perf_counter() - t0
    failures = [r.op_name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    report(
        "gradient suite (all ops + end-to-end model, 64-bit)",
        not failures and elapsed < 120.0,
        f"{len(reports)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s"
        + (f", failed: {failures}" if failures else ""),
    )


# ---------------------------------------------------------------------------
# 2. view-conversion algebra
# ---------------------------------------------------------------------------

def _random_batch(rng, view, n, d):
    return FeatureBatch(view=view, embeddings=rng.normal(size=(n, d)),
                        sample_keys=[("s", "NM", 1, i) for i in range(n)])


def test_view_conversion_algebra():
    rng = np.random.default_rng(2024)
    worst_self, worst_anti, worst_mean, worst_rigid = 0.0, 0.0, 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(2, 30))
        d = int(rng.integers(1, 40))
        x = _random_batch(rng, 54, n, d)
        y = FeatureBatch(view=90, embeddings=rng.normal(size=(n, d)),
                         sample_keys=list(x.sample_keys))

        # self-conversion is exactly zero
        self_f = compute_pfc(x, x).factor
        worst_self = max(worst_self, float(np.abs(self_f).max()))

        # antisymmetry: PFC(x,y) == -PFC(y,x)
        fxy = compute_pfc(x, y).factor
        fyx = compute_pfc(y, x).factor
        worst_anti = max(worst_anti, float(np.abs(fxy + fyx).max()))

        # mean alignment: converting x by PFC(y,x) lands on y's mean
        factor = compute_pfc(y, x)
        converted = np.stack([apply_it(row, factor) for row in x.embeddings])
        worst_mean = max(worst_mean, float(np.abs(
            converted.mean(axis=0) - y.embeddings.mean(axis=0)).max()))

        # rigidity: conversion preserves pairwise distances
        before = np.linalg.norm(
            x.embeddings[:, None] - x.embeddings[None, :], axis=-1)
        after = np.linalg.norm(
            converted[:, None] - converted[None, :], axis=-1)
        worst_rigid = max(worst_rigid, float(np.abs(before - after).max()))

    ok = (worst_self == 0.0 and worst_anti <= 1e-12
          and worst_mean <= 1e-6 and worst_rigid <= 1e-9)
    report(
        "view-conversion algebra (50 randomized instances per law)",
        ok,
        f"self {worst_self:.1e}, antisym {worst_anti:.1e}, "
        f"mean-align {worst_mean:.1e}, rigidity {worst_rigid:.1e}",
    )


# ---------------------------------------------------------------------------
# 3. structural invariants
# ---------------------------------------------------------------------------

def _tiny_pair_model(seed=0):
    return SmvitModel(ModelConfig(
        resolution=(16, 16), num_subjects=3, precision=32, init_seed=seed,
        backbone=CMBlockConfig(
            stem_channels=4, mobile_channels=(6,), expansion_ratio=2.0,
            token_dim=8, transformer_depth=1, heads=2, patch_w=2, patch_h=2,
            ffn_dim=8, out_channels=8,
        ),
    ))


def test_structural_invariants():
    rng = np.random.default_rng(7)

    # fold(unfold(x)) is bitwise identity
    fold_ok = True
    for _ in range(10):
        H = int(rng.integers(1, 5)) * 2
        W = int(rng.integers(1, 5)) * 2
        x = Tensor(rng.normal(size=(2, 3, H, W)))
        back = T.fold_patches(T.unfold_patches(x, 2, 2), H, W, 2, 2)
        fold_ok = fold_ok and bool(np.array_equal(back.data, x.data))

    # mobilevit block preserves [B, C, H, W] across random valid configs
    shape_ok = True
    for _ in range(20):
        ch = int(rng.integers(2, 8))
        ph = int(rng.integers(1, 3))
        pw = int(rng.integers(1, 3))
        H = ph * int(rng.integers(1, 4))
        W = pw * int(rng.integers(1, 4))
        heads = int(rng.choice([1, 2]))
        blk = MobileViTBlock(ch, 2 * heads, depth=int(rng.integers(0, 3)),
                             heads=heads, patch_w=pw, patch_h=ph,
                             ffn_dim=int(rng.integers(2, 9)),
                             rng=np.random.default_rng(int(rng.integers(1 << 30))))
        out = blk.forward(Tensor(rng.normal(size=(2, ch, H, W))), mode="infer")
        shape_ok = shape_ok and out.shape == (2, ch, H, W)

    # softmax rows sum to one
    soft_worst = 0.0
    for _ in range(20):
        x = Tensor(rng.normal(scale=5.0, size=(int(rng.integers(1, 8)),
                                               int(rng.integers(1, 12)))))
        sums = T.softmax(x).data.sum(axis=-1)
        soft_worst = max(soft_worst, float(np.abs(sums - 1.0).max()))

    # 50 optimizer steps: the two Siamese branches share one parameter
    # set, so identical inputs embed identically after every update
    model = _tiny_pair_model()
    opt = Optimizer(model.named_parameters(), OptimizerConfig(lr=1e-3))
    share_ok = True
    for step in range(50):
        srng = np.random.default_rng(1000 + step)
        frames = (srng.random((4, 1, 16, 16)) > 0.5).astype(np.float32)
        labels = srng.integers(0, 3, size=4)
        pair = SiamesePair(frames, frames.copy(), 90, 54, labels)
        before = model.parameter_checksum()
        emb_a, emb_b, la, lb = model.forward_pair(pair, mode="train")
        share_ok = share_ok and bool(np.array_equal(emb_a.data, emb_b.data))
        share_ok = share_ok and model.parameter_checksum() == before
        loss = model.loss(la, lb, labels)
        model.zero_grad()
        loss.backward()
        opt.step()

    ok = fold_ok and shape_ok and soft_worst <= 1e-6 and share_ok
    report(
        "structural invariants (fold/unfold, block shapes, softmax, weight sharing)",
        ok,
        f"fold {fold_ok}, shapes {shape_ok}, softmax dev {soft_worst:.1e}, "
        f"sharing {share_ok}",
    )


# ---------------------------------------------------------------------------
# 4 & 5. synthetic training and the curriculum comparison
# ---------------------------------------------------------------------------

def _synthetic_split(seed):
    frames = synth_generate(SynthSpec(seed=seed))  # 4 subjects, 3 views, 40 fpv
    return split_7_3(frames, seed=seed), sorted({f.view for f in frames})


def test_synthetic_end_to_end():
    t0 = time.perf_counter()
    split, views = _synthetic_split(1234)
    subjects = {s: i for i, s in enumerate(sorted({f.subject for f in split.train}))}
    model = SmvitModel(ModelConfig(num_subjects=4, precision=32, init_seed=0))
    plan = base_schedule(90, views, epochs=15, seed=0)

    best_train, final_val = [0.0], {}

    def track(em):
        acc = evaluate_per_view(model, None, split.train, subjects)
        best_train[0] = max(best_train[0], float(np.mean(list(acc.values()))))
        final_val.update(em.val_accuracy_per_view)

    train(model, plan, split, deterministic=True, epoch_callback=track)
    elapsed = time.perf_counter() - t0
    val90 = final_val.get(90, 0.0)
    ok = best_train[0] >= 0.90 and elapsed < 600.0 and val90 >= 0.25 + 0.4
    report(
        "synthetic end-to-end training (4 subjects, 3 views, 15 epochs)",
        ok,
        f"best mean train acc {best_train[0]:.3f}, "
        f"final val acc at 90 deg {val90:.3f}, {elapsed:.0f}s",
    )


def test_curriculum_ablation():
    deltas_init, deltas_max = [], []
    for seed in range(3):
        split, views = _synthetic_split(500 + seed)

        def run(mode):
            model = SmvitModel(ModelConfig(num_subjects=4, precision=32,
                                           init_seed=seed))
            if mode == "base":
                plan = base_schedule(90, views, epochs=6, seed=seed)
            else:
                plan = gradual_schedule(90, views, epochs_per_stage=2, seed=seed)
            _, metrics, _ = train(model, plan, split, deterministic=True)
            return metrics

        rep = ablation_report(run("base"), run("gradual"), standard_view=90)
        rows = rep.off_standard_rows()
        deltas_init.append(float(np.mean([r.initial_gradual for r in rows]))
                           - float(np.mean([r.initial_base for r in rows])))
        deltas_max.append(float(np.mean([r.max_gradual for r in rows]))
                          - float(np.mean([r.max_base for r in rows])))

    mean_init = float(np.mean(deltas_init))
    mean_max = float(np.mean(deltas_max))
    ok = mean_init >= 0.0 and mean_max >= -0.02
    report(
        "curriculum ablation over 3 seeds (gradual vs single-stage)",
        ok,
        f"mean initial-epoch gain {mean_init:+.3f}, mean best-acc gain {mean_max:+.3f}",
    )


# ---------------------------------------------------------------------------
# 6. attention cost scaling
# ---------------------------------------------------------------------------

def test_attention_cost_scaling():
    mhsa = MultiHeadSelfAttention(64, 2, rng=np.random.default_rng(0),
                                  dtype=np.float32)
    rng = np.random.default_rng(1)

    def median_time(n, reps=9):
        x = Tensor(rng.normal(size=(1, 1, n, 64)).astype(np.float32))
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            mhsa.forward(x)
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    median_time(256, reps=3)  # warm both sizes before measuring
    median_time(512, reps=3)
    ratios = [median_time(512) / median_time(256) for _ in range(3)]
    ratio = float(np.median(ratios))
    report(
        "attention cost scaling (512 vs 256 tokens)",
        3.0 <= ratio <= 6.0,
        f"timing ratio {ratio:.2f}, expected in [3.0, 6.0]",
    )


# ---------------------------------------------------------------------------
# 7. command-line determinism
# ---------------------------------------------------------------------------

def test_cli_determinism(tmp_path):
    cfg = {
        "synth": {"n_subjects": 3, "views": [54, 90], "frames_per_sequence": 10,
                  "resolution": [16, 16]},
        "model": {
            "resolution": [16, 16],
            "backbone": {"stem_channels": 4, "mobile_channels": [6],
                         "expansion_ratio": 2.0, "token_dim": 8,
                         "transformer_depth": 1, "heads": 2, "patch_w": 2,
                         "patch_h": 2, "ffn_dim": 8, "out_channels": 8},
        },
        "train": {"epochs": 2, "epochs_per_stage": 1, "optimizer": {"lr": 1e-3}},
    }
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(cfg_path),
                 "--out", str(tmp_path / "data"), "--seed", "3"]) == EXIT_OK
    for run_dir in ("a", "b"):
        rc = main(["train", "--config", str(cfg_path),
                   "--data-root", str(tmp_path / "data"),
                   "--out", str(tmp_path / run_dir),
                   "--mode", "gradual", "--seed", "3", "--deterministic"])
        assert rc == EXIT_OK
    same = {
        name: (tmp_path / "a" / name).read_bytes() ==
              (tmp_path / "b" / name).read_bytes()
        for name in ("metrics.jsonl", "checkpoint.bin", "registry.json")
    }
    report(
        "deterministic train runs are byte-identical",
        all(same.values()),
        ", ".join(f"{k}={'same' if v else 'DIFFERS'}" for k, v in same.items()),
    )


# ---------------------------------------------------------------------------
# 8. protocol fidelity
# ---------------------------------------------------------------------------

def test_protocol_fidelity(tmp_path):
    all_views = tuple(range(0, 181, 18))
    frames = synth_generate(SynthSpec(
        n_subjects=2, views=all_views, frames_per_sequence=5,
        resolution=(16, 16), seed=9,
    ))
    split = split_7_3(frames, seed=9)

    ratio_ok = True
    strata = {}
    for f in frames:
        strata.setdefault((f.subject, f.view, f.condition), []).append(f)
    train_keys = {(f.subject, f.view, f.condition, f.sequence, f.frame_index)
                  for f in split.train}
    for key, members in strata.items():
        n_train = sum((m.subject, m.view, m.condition, m.sequence, m.frame_index)
                      in train_keys for m in members)
        if abs(n_train - 0.7 * len(members)) > 1.0:
            ratio_ok = False

    model = SmvitModel(ModelConfig(
        resolution=(16, 16), num_subjects=2, precision=32, init_seed=0,
        backbone=CMBlockConfig(
            stem_channels=4, mobile_channels=(6,), expansion_ratio=2.0,
            token_dim=8, transformer_depth=1, heads=2, patch_w=2, patch_h=2,
            ffn_dim=8, out_channels=8,
        ),
    ))
    subjects = {s: i for i, s in enumerate(sorted({f.subject for f in frames}))}
    acc = evaluate_per_view(model, None, split.val, subjects)
    table_path = tmp_path / "table.csv"
    write_view_table_csv(acc, table_path)
    header, row = table_path.read_text().splitlines()
    columns_ok = (len(header.split(",")) == 11 and len(row.split(",")) == 11
                  and set(acc) == set(all_views))

    report(
        "protocol fidelity (split ratios within 1 frame, 11-column table)",
        ratio_ok and columns_ok,
        f"strata {len(strata)}, ratios ok {ratio_ok}, "
        f"table columns {len(header.split(','))}",
    )
