"""Acceptance criteria, one test per criterion. Each prints a PASS/FAIL line
that is also collected in the terminal summary."""

import io
import math
import random
import time
from dataclasses import replace

import numpy as np
import torch

from metairnet.adaptation import AdaptConfig, adapt, earth_mover_1d
from metairnet.data import check_episode, index_from_mapping, sample_episode
from metairnet.fusion import fuse
from metairnet.generator import GeneratorConfig, ToyGenerator, bn_parameter_view
from metairnet.harness import ci95
from metairnet.pipeline import PipelineConfig, run_pipeline

from test_adaptation import adaptation_loss_and_grads, brute_force_em
from test_fewshot import fusion_logit_gradients, oracle_max_deviation


def _report(acceptance_log, name, checks: dict, detail=""):
    passed = all(checks.values())
    failed = [k for k, ok in checks.items() if not ok]
    acceptance_log(name, passed, detail + (f" (failed: {', '.join(failed)})" if failed else ""))
    assert passed, failed


def test_criterion_1_fusion_algebra(acceptance_log):
    start = time.perf_counter()
    worst = {"endpoints": 0.0, "identity": 0.0, "convex": 0.0, "affine": 0.0}
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        a = torch.rand(3, 16, 16, generator=g) * 2 - 1
        b = torch.rand(3, 16, 16, generator=g) * 2 - 1
        w1, w2 = torch.rand(2, 3, 3, generator=g)
        alpha = torch.rand((), generator=g).item()
        worst["endpoints"] = max(worst["endpoints"], (fuse(a, b, torch.ones(3, 3)) - a).abs().max().item(),
                                 (fuse(a, b, torch.zeros(3, 3)) - b).abs().max().item())
        worst["identity"] = max(worst["identity"], (fuse(a, a, w1) - a).abs().max().item())
        out = fuse(a, b, w1)
        below = (torch.minimum(a, b) - out).clamp(min=0).max().item()
        above = (out - torch.maximum(a, b)).clamp(min=0).max().item()
        worst["convex"] = max(worst["convex"], below, above)
        combo = alpha * fuse(a, b, w1) + (1 - alpha) * fuse(a, b, w2)
        worst["affine"] = max(worst["affine"], (fuse(a, b, alpha * w1 + (1 - alpha) * w2) - combo).abs().max().item())
    elapsed = time.perf_counter() - start
    checks = {k: v < 1e-6 for k, v in worst.items()}
    checks["runtime < 10 s"] = elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.2f}s"
    _report(acceptance_log, "1 fusion algebra", checks, detail)


def test_criterion_2_bn_freeze(acceptance_log):
    start = time.perf_counter()
    torch.manual_seed(0)
    g = ToyGenerator(GeneratorConfig(resolution=64))
    _, other = bn_parameter_view(g)

    def serialize():
        buf = io.BytesIO()
        torch.save({k: v.detach().clone() for k, v in other.items()}, buf)
        return buf.getvalue()

    before = serialize()
    target = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(1)) * 2 - 1
    res = adapt(g, target, AdaptConfig(steps=500), seed=0)
    elapsed = time.perf_counter() - start
    checks = {
        "500 steps": len(res.loss_trace["total"]) == 500,
        "non-BN bytes identical": serialize() == before,
        "runtime < 2 min": elapsed < 120,
    }
    _report(acceptance_log, "2 BN freeze", checks, f"{elapsed:.1f}s at 64x64")


def test_criterion_3_prototype_oracle(acceptance_log):
    dev = oracle_max_deviation(200)
    _report(acceptance_log, "3 prototype oracle", {"max deviation < 1e-9": dev < 1e-9}, f"max deviation {dev:.2e}")


def test_criterion_4_gradient_checks(acceptance_log):
    analytic, numeric, dz = adaptation_loss_and_grads()

    def rel(a, b):
        return (a - b).norm().item() / max(a.norm().item(), b.norm().item())

    e_z, e_bn = rel(analytic[:dz], numeric[:dz]), rel(analytic[dz:], numeric[dz:])
    fa, fn = fusion_logit_gradients()
    e_f = rel(fa, fn)
    checks = {"adaptation loss wrt z": e_z < 1e-4, "adaptation loss wrt BN": e_bn < 1e-4,
              "episode loss wrt fusion logits": e_f < 1e-4 and fa.abs().sum() > 0}
    _report(acceptance_log, "4 gradient checks", checks, f"rel errors z {e_z:.1e}, bn {e_bn:.1e}, fusion {e_f:.1e}")


def test_criterion_5_earth_mover(acceptance_log):
    rnd = random.Random(0)
    zero = perm = brute = 0.0
    for trial in range(200):
        d = rnd.randint(1, 6)
        z = torch.tensor([rnd.gauss(0, 1) for _ in range(d)], dtype=torch.float64)
        r = torch.tensor([rnd.gauss(0, 1) for _ in range(d)], dtype=torch.float64)
        zero = max(zero, earth_mover_1d(z, z).item())
        p = torch.randperm(d, generator=torch.Generator().manual_seed(trial))
        perm = max(perm, abs(earth_mover_1d(z[p], r).item() - earth_mover_1d(z, r).item()))
        brute = max(brute, abs(earth_mover_1d(z, r).item() - brute_force_em(z.tolist(), r.tolist())))
    # integer samples: sums are exact and both sides divide by the same count
    exact = True
    for d in range(1, 7):
        for _ in range(20):
            z = [float(rnd.randint(-9, 9)) for _ in range(d)]
            r = [float(rnd.randint(-9, 9)) for _ in range(d)]
            got = earth_mover_1d(torch.tensor(z, dtype=torch.float64), torch.tensor(r, dtype=torch.float64)).item()
            exact &= got == brute_force_em(z, r)
    checks = {"zero on identical": zero == 0.0, "permutation invariant": perm < 1e-12,
              "brute force (d <= 6)": brute < 1e-12, "exact on integers": exact}
    _report(acceptance_log, "5 earth mover", checks, f"max |EM-brute| {brute:.1e}")


def test_criterion_6_episode_protocol(acceptance_log):
    base = {f"b{c:02d}": [f"b{c:02d}/{i}.png" for i in range(20)] for c in range(20)}
    novel = {f"n{c:02d}": [f"n{c:02d}/{i}.png" for i in range(20)] for c in range(10)}
    novel_index = index_from_mapping("/data", novel)
    ok = {"sizes": True, "balance": True, "disjoint": True, "provenance": True}
    for seed in range(1000):
        ep = sample_episode(novel_index, 5, 1, 16, seed, load_images=False)
        check_episode(ep, novel_index.classes)
        ok["sizes"] &= len(ep.support_records) == 5 and len(ep.query_records) == 80
        ok["balance"] &= np.bincount(ep.query_labels.numpy(), minlength=5).tolist() == [16] * 5 and \
            np.bincount(ep.support_labels.numpy(), minlength=5).tolist() == [1] * 5
        ok["disjoint"] &= not {r.path for r in ep.support_records} & {r.path for r in ep.query_records}
        ok["provenance"] &= set(ep.class_ids) <= set(novel) and not set(ep.class_ids) & set(base) and all(
            r.class_id == ep.class_ids[y] for r, y in zip(ep.query_records, ep.query_labels.tolist())
        )
    acc = [50.0, 60.0, 70.0]
    ok["ci hand case"] = abs(np.mean(acc) - 60.0) < 1e-3 and abs(ci95(acc) - 11.316) < 1e-3
    _report(acceptance_log, "6 episode protocol", ok, f"ci95 {ci95(acc):.4f}")


def test_criterion_7_synthetic_benchmark(acceptance_log, tmp_path):
    start = time.perf_counter()
    cfg = PipelineConfig()
    result = run_pipeline(tmp_path, master_seed=0, config=cfg)
    elapsed = time.perf_counter() - start
    print("\n" + result.table)
    meta, proto = result.reports["metairnet"], result.reports["protonet"]
    first_epoch = result.train_losses["metairnet"][: cfg.run.episodes_train]
    tail = float(np.mean(first_epoch[-50:]))
    checks = {
        "dataset size": cfg.n_base >= 20 and cfg.n_novel >= 10 and cfg.images_per_class >= 30,
        "(a) loss < ln 5 in first epoch": tail < math.log(5),
        "(b) MetaIRNet >= 40%": meta.mean >= 40.0,
        "(c) MetaIRNet >= ProtoNet - 1": meta.mean >= proto.mean - 1.0,
        "1000 eval episodes": len(meta.accuracies) == 1000 and len(proto.accuracies) == 1000,
        "runtime <= 30 min": elapsed <= 1800,
    }
    detail = (f"MetaIRNet {meta.mean:.2f} +- {meta.ci95:.2f}, ProtoNet {proto.mean:.2f} +- {proto.ci95:.2f}, "
              f"epoch-0 tail loss {tail:.3f}, {elapsed / 60:.1f} min")
    _report(acceptance_log, "7 synthetic benchmark", checks, detail)


def test_criterion_8_determinism(acceptance_log, tmp_path):
    cfg = PipelineConfig(
        n_base=6, n_val=5, n_novel=5, images_per_class=8, image_size=16,
        generator=GeneratorConfig(noise_dim=8, embed_dim=4, widths=(8, 4), resolution=16),
        pretrain_steps=20, adapt=AdaptConfig(steps=5, n_variants=3),
    )
    cfg.run = replace(cfg.run, epochs=2, episodes_train=10, episodes_val=5, episodes_eval=30,
                      backbone_hidden=8, fusion_hidden=4, q=3)
    a = run_pipeline(tmp_path / "a", master_seed=7, config=cfg)
    b = run_pipeline(tmp_path / "b", master_seed=7, config=cfg)
    checks = {f"{m} report identical": a.reports[m].same_result(b.reports[m]) for m in cfg.methods}
    checks["training losses identical"] = a.train_losses == b.train_losses
    _report(acceptance_log, "8 determinism", checks, ", ".join(f"{m} {a.reports[m].mean:.2f}" for m in cfg.methods))
