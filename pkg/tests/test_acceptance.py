"""Acceptance suite: one test per shipping criterion.

Each test is self-contained (independent oracles, stated tolerances); the
3-seed efficacy run is shared between criteria 5 and 6 through a
session-scoped fixture.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from frest_kit import analysis, losses, runner
from frest_kit.config import (
    IGNORE_LABEL,
    DataConfig,
    Hyperparams,
    ModelConfig,
    RunConfig,
    TrainConfig,
)
from frest_kit.model import FeaturePack, build_model, strip_to_inference
from frest_kit.trainer import (
    PositiveQueue,
    adapt,
    init_state,
    pretrain_source,
    step1,
    step2,
)

RNG = lambda s: np.random.default_rng(s)  # noqa: E731


# --------------------------------------------------------------------------
# criterion 1: loss oracles, >= 100 random instances each, 1e-6; special
# values exact up to float rounding
# --------------------------------------------------------------------------


def _norm_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_criterion_01_loss_oracles():
    rng = RNG(10)

    # contrastive vs. float64 brute force
    for _ in range(100):
        n, d, k = rng.integers(1, 9), rng.integers(2, 7), rng.integers(1, 11)
        a = _norm_rows(rng.standard_normal((n, d)))
        b = _norm_rows(rng.standard_normal((n, d)))
        q = _norm_rows(rng.standard_normal((k, d)))
        tau = float(rng.uniform(0.2, 1.5))
        ref = []
        for i in range(n):
            pos = q[np.argmax(q @ a[i])]
            sp, sn = a[i] @ pos / tau, a[i] @ b[i] / tau
            ref.append(-np.log(np.exp(sp) / (np.exp(sp) + np.exp(sn))))
        got = float(losses.condition_specific_loss(
            torch.from_numpy(a), torch.from_numpy(b), torch.from_numpy(q), tau
        ))
        assert abs(got - np.mean(ref)) < 1e-6

    # restoration vs. float64 brute force
    for _ in range(100):
        n, d = rng.integers(1, 9), rng.integers(2, 7)
        x = rng.standard_normal((n, d))
        y = rng.standard_normal((n, d))
        got = float(losses.restoration_loss(torch.from_numpy(x), torch.from_numpy(y)))
        assert abs(got - np.mean(np.sum(np.abs(x - y), axis=1))) < 1e-6

    # discriminating vs. double-loop oracle sharing only the MLP forward
    model = build_model(ModelConfig(), seed=1)
    for _ in range(100):
        f = [torch.from_numpy(rng.standard_normal((8, 64))).float() for _ in range(4)]
        c = [torch.from_numpy(rng.standard_normal((8, 64))).float() for _ in range(4)]
        got = float(losses.discriminating_loss(FeaturePack(f), FeaturePack(c), model).detach())
        terms = []
        with torch.no_grad():
            for layer in range(4):
                for i in range(8):
                    df = float(model.discriminate(f[layer][i], layer + 1))
                    dc = float(model.discriminate(c[layer][i], layer + 1))
                    terms.append(np.log(np.clip(df, 1e-7, 1 - 1e-7)))
                    terms.append(np.log(np.clip(1 - dc, 1e-7, 1 - 1e-7)))
        # normalized per patch: summing layers and both cross-entropy terms
        # is what yields the 8*ln2 value at D == 0.5 with L = 4
        assert abs(got - (-np.sum(terms) / 8)) < 1e-6

    # self-training CE vs. float64 log-softmax oracle
    for _ in range(100):
        h = rng.integers(2, 7)
        logits = rng.standard_normal((h, h, 4))
        labels = rng.integers(0, 4, size=(h, h))
        labels[rng.random((h, h)) < 0.3] = IGNORE_LABEL
        got = float(losses.self_training_loss(
            torch.from_numpy(logits), torch.from_numpy(labels)
        ))
        lse = np.log(np.exp(logits).sum(axis=-1))
        mask = labels != IGNORE_LABEL
        if not mask.any():
            continue
        picked = np.take_along_axis(
            logits, np.where(mask, labels, 0)[..., None], axis=-1
        )[..., 0]
        assert abs(got - np.mean((lse - picked)[mask])) < 1e-6

    # entropy vs. float64 oracle
    for _ in range(100):
        h = rng.integers(2, 7)
        logits = rng.standard_normal((h, h, 4))
        p = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        ref = float(np.mean(-(p * np.log(p)).sum(axis=-1)))
        assert abs(float(losses.entropy_loss(torch.from_numpy(logits))) - ref) < 1e-6

    # analytic special values
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    sym = losses.condition_specific_loss(a, a.clone(), a.clone(), tau=0.7)
    assert float(sym) == pytest.approx(np.log(2.0), rel=1e-12)

    with torch.no_grad():
        for d in model.discs:
            d.fc2.weight.zero_()
            d.fc2.bias.zero_()
    f = [torch.zeros(2, 64) for _ in range(4)]
    half = losses.discriminating_loss(FeaturePack(f), FeaturePack(f), model)
    assert float(half.detach()) == pytest.approx(8 * np.log(2.0), rel=1e-6)

    uniform = losses.entropy_loss(torch.zeros(3, 3, 4, dtype=torch.float64))
    assert float(uniform) == pytest.approx(np.log(4.0), rel=1e-12)

    x = torch.from_numpy(rng.standard_normal((5, 8)))
    assert float(losses.restoration_loss(x, x.clone())) == 0.0


# --------------------------------------------------------------------------
# criterion 2: gradient checks, 20 probes per loss, rel err < 1e-4 (double)
# --------------------------------------------------------------------------


def _fd_check(make_loss, leaves, rng, n_probes=20, h=1e-5, tol=1e-4):
    grads = torch.autograd.grad(make_loss(), leaves)
    for _ in range(n_probes):
        li = int(rng.integers(len(leaves)))
        t, g = leaves[li], grads[li]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        with torch.no_grad():
            orig = float(t[idx])
            t[idx] = orig + h
            plus = float(make_loss())
            t[idx] = orig - h
            minus = float(make_loss())
            t[idx] = orig
        fd = (plus - minus) / (2 * h)
        ag = float(g[idx])
        assert abs(fd - ag) / max(abs(fd), abs(ag), 1e-8) < tol


def test_criterion_02_gradient_checks():
    rng = RNG(20)

    z_adv = torch.from_numpy(rng.standard_normal((10, 8))).requires_grad_(True)
    z_norm = torch.from_numpy(rng.standard_normal((10, 8))).requires_grad_(True)
    queue = torch.from_numpy(rng.standard_normal((7, 8)))
    _fd_check(
        lambda: losses.condition_specific_loss(
            torch.nn.functional.normalize(z_adv, dim=-1),
            torch.nn.functional.normalize(z_norm, dim=-1),
            queue, 0.7,
        ),
        [z_adv, z_norm], rng,
    )

    restored = torch.from_numpy(rng.standard_normal((10, 8))).requires_grad_(True)
    target = torch.from_numpy(rng.standard_normal((10, 8)))
    _fd_check(lambda: losses.restoration_loss(restored, target), [restored], rng)

    model = build_model(ModelConfig(), seed=2).double()
    f_leaves = [torch.from_numpy(rng.standard_normal((64, 64))).requires_grad_(True)
                for _ in range(4)]
    c_pack = FeaturePack([torch.from_numpy(rng.standard_normal((64, 64)))
                          for _ in range(4)])
    _fd_check(
        lambda: losses.discriminating_loss(FeaturePack(f_leaves), c_pack, model),
        f_leaves, rng,
    )

    logits = torch.from_numpy(rng.standard_normal((16, 16, 4))).requires_grad_(True)
    labels = torch.from_numpy(rng.integers(0, 4, size=(16, 16)))
    _fd_check(lambda: losses.self_training_loss(logits, labels), [logits], rng)
    _fd_check(lambda: losses.entropy_loss(logits), [logits], rng)


# --------------------------------------------------------------------------
# criterion 3: bit-exact structural contracts
# --------------------------------------------------------------------------


def test_criterion_03_structural_contracts():
    model = build_model(ModelConfig(), seed=0)
    rng = RNG(30)
    image = torch.from_numpy(rng.random((64, 64, 3))).float()

    # zero-init strainer identity: c == f at init
    with_s = model.encoder_forward(image, use_strainer=True)
    without = model.encoder_forward(image, use_strainer=False)
    assert all(torch.equal(a, b)
               for a, b in zip(with_s.per_layer, without.per_layer))

    # stop-gradient of L_resto w.r.t. the normal-path parameters feeding
    # its (detached) target
    strainer_params = model.group_parameters("strainer")
    norm = torch.from_numpy(rng.random((64, 64, 3))).float()
    z_norm = model.project(model.encoder_forward(norm, use_strainer=True).final)
    restored = model.project(model.encoder_forward(image, use_strainer=False).final)
    l_resto = losses.restoration_loss(restored, z_norm)
    grads = torch.autograd.grad(l_resto, strainer_params, allow_unused=True)
    assert all(g is None for g in grads)

    # strainer-bypass path carries zero gradient into strainer parameters
    out = model.encoder_forward(image, use_strainer=False).final.sum()
    grads = torch.autograd.grad(out, strainer_params, allow_unused=True)
    assert all(g is None for g in grads)

    # inference purity after stripping the auxiliary groups
    with torch.no_grad():
        model.blocks[0].strainer_attn.down.weight.fill_(0.2)
    stripped = strip_to_inference(model)
    assert torch.equal(model.predict(image), stripped.predict(image))

    # step-1/step-2 parameter isolation at every iteration of a 200-iter
    # smoke run
    from frest_kit.data import build_dataset

    splits = build_dataset(DataConfig(n_train=8, n_val=2, n_source=2))
    batches = [p.train_batch() for p in splits.train]
    model = build_model(ModelConfig(), seed=0)
    cfg = TrainConfig(total_iters=200, lr_scale=1.0, seed=0)
    state = init_state(model, Hyperparams(), cfg)
    groups = {g: {n for n, _ in model.param_groups()[g]}
              for g in ("encoder", "decoder", "strainer", "projection",
                        "discriminator")}
    step1_allowed = groups["strainer"] | groups["projection"]
    step2_allowed = groups["encoder"] | groups["decoder"] | groups["discriminator"]
    for t in range(200):
        state.iteration = t
        batch = batches[t % len(batches)]
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        step1(batch, state)
        changed = {n for n, p in model.named_parameters()
                   if not torch.equal(before[n], p)}
        assert changed <= step1_allowed, f"step1 leak at t={t}: {changed - step1_allowed}"
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        step2(batch, state)
        changed = {n for n, p in model.named_parameters()
                   if not torch.equal(before[n], p)}
        assert changed <= step2_allowed, f"step2 leak at t={t}: {changed - step2_allowed}"


# --------------------------------------------------------------------------
# criterion 4: queue semantics
# --------------------------------------------------------------------------


def test_criterion_04_queue_semantics():
    rng = RNG(40)

    # FIFO eviction + capacity bound on randomized push sequences
    for _ in range(50):
        cap = int(rng.integers(1, 10))
        values = [float(v) for v in rng.standard_normal(int(rng.integers(0, 30)))]
        q = PositiveQueue(cap, 1)
        for v in values:
            q.push(torch.tensor([v]))
            assert len(q) <= cap
        assert q.as_tensor().flatten().tolist() == pytest.approx(values[-cap:])

    # HIGHEST/LOWEST equal brute-force argmax/argmin with first-occurrence
    # tie-break (duplicated rows force ties)
    for _ in range(200):
        k, d = int(rng.integers(2, 12)), int(rng.integers(2, 5))
        queue = rng.standard_normal((k, d))
        queue[rng.integers(k)] = queue[rng.integers(k)]  # inject a tie
        anchor = rng.standard_normal(d)
        sims = queue @ anchor
        qt, at = torch.from_numpy(queue), torch.from_numpy(anchor)
        hi = losses.select_positive(at, qt, "HIGHEST")
        lo = losses.select_positive(at, qt, "LOWEST")
        assert torch.equal(hi, qt[int(np.argmax(sims))])
        assert torch.equal(lo, qt[int(np.argmin(sims))])


# --------------------------------------------------------------------------
# criteria 5 + 6: 3-seed efficacy run with default configuration
# --------------------------------------------------------------------------


@pytest.fixture(scope="session")
def efficacy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("efficacy")
    t0 = time.time()
    results = []
    for seed in (0, 1, 2):
        cfg = RunConfig()
        cfg.data.seed = seed * 100_000
        cfg.train.seed = seed
        splits = runner.build_splits(cfg)
        model = runner.fresh_model(cfg)
        pretrain_source(model, splits.source, cfg.train.pretrain_epochs,
                        cfg.train.pretrain_lr, seed=seed)
        src_adv = analysis.evaluate_pairs(model, splits.val, "adverse")["miou"]
        src_norm = analysis.evaluate_pairs(model, splits.val, "normal")["miou"]
        out = root / f"seed{seed}"
        state = init_state(model, cfg.hp, cfg.train)
        adapt(state, splits, cfg.train.total_iters, out)
        adapted_adv = analysis.evaluate_pairs(model, splits.val, "adverse")["miou"]
        adapted_norm = analysis.evaluate_pairs(model, splits.val, "normal")["miou"]
        results.append({
            "seed": seed,
            "out": out,
            "val": splits.val,
            "gain": adapted_adv - src_adv,
            "drop": src_norm - adapted_norm,
        })
    return {"results": results, "elapsed": time.time() - t0}


def test_criterion_05_toy_adaptation_efficacy(efficacy_runs):
    gains = [r["gain"] for r in efficacy_runs["results"]]
    drops = [r["drop"] for r in efficacy_runs["results"]]
    assert RunConfig().train.total_iters <= 3000
    assert np.mean(gains) >= 0.05, f"mean adverse gain {np.mean(gains):.4f} < 0.05"
    assert np.mean(drops) <= 0.02, f"mean normal drop {np.mean(drops):.4f} > 0.02"
    assert efficacy_runs["elapsed"] <= 900, f"{efficacy_runs['elapsed']:.0f}s > 15 min"


def test_criterion_06_feature_shift_and_convergence(efficacy_runs):
    inter0, interF, advF, normF = [], [], [], []
    for r in efficacy_runs["results"]:
        report = analysis.shift_report(
            [r["out"] / "epoch_0000.pt", r["out"] / "final.pt"],
            r["val"], subsample=512, seed=r["seed"],
        )
        inter0.append(report.d_inter[0])
        interF.append(report.d_inter[-1])
        advF.append(report.d_adv[-1])
        normF.append(report.d_normal[-1])
    assert np.mean(interF) < np.mean(inter0), (
        f"inter-domain distance did not shrink: {np.mean(interF):.4f} vs "
        f"{np.mean(inter0):.4f}"
    )
    assert np.mean(advF) > np.mean(normF), (
        f"adverse features moved less than normal ones: {np.mean(advF):.4f} "
        f"vs {np.mean(normF):.4f}"
    )

    # convergence: final-quarter mean of each step total below its
    # first-quarter mean, all values finite
    for key in ("step1", "step2"):
        firsts, lasts = [], []
        for r in efficacy_runs["results"]:
            records = [json.loads(line) for line in
                       (r["out"] / "metrics.jsonl").read_text().splitlines()]
            totals = [rec[key]["total"] for rec in records if rec[key] is not None]
            assert np.isfinite(totals).all()
            q = len(totals) // 4
            firsts.append(np.mean(totals[:q]))
            lasts.append(np.mean(totals[-q:]))
        assert np.mean(lasts) < np.mean(firsts), (
            f"{key} totals did not converge: {np.mean(lasts):.4f} vs "
            f"{np.mean(firsts):.4f}"
        )


# --------------------------------------------------------------------------
# criterion 7: metric oracles
# --------------------------------------------------------------------------


def test_criterion_07_metric_oracles():
    rng = RNG(70)
    for _ in range(200):
        gt = rng.integers(0, 4, size=(8, 8))
        pred = rng.integers(0, 4, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = IGNORE_LABEL
        ious, mean = analysis.miou(pred, gt, 4)
        ref = []
        valid = gt != IGNORE_LABEL
        for c in range(4):
            inter = ((pred == c) & (gt == c) & valid).sum()
            union = (((pred == c) & valid) | (gt == c)).sum()
            ref.append(inter / union if union else np.nan)
        present = ~np.isnan(ref)
        assert np.allclose(np.asarray(ious)[present], np.asarray(ref)[present])
        assert mean == pytest.approx(np.nanmean(ref))

    for _ in range(50):
        a = rng.standard_normal((int(rng.integers(1, 15)), 6))
        b = rng.standard_normal((int(rng.integers(1, 15)), 6))

        def d(u, v):
            return 1.0 - float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

        ref = max(max(min(d(u, v) for v in b) for u in a),
                  max(min(d(u, v) for u in a) for v in b))
        assert abs(analysis.hausdorff_cosine(a, b) - ref) < 1e-9


# --------------------------------------------------------------------------
# criterion 8: parameter-efficiency budget
# --------------------------------------------------------------------------


def test_criterion_08_parameter_budget():
    model = build_model(ModelConfig(), seed=0)
    backbone = model.param_count("encoder") + model.param_count("decoder")
    extra = model.param_count("strainer") + model.param_count("projection")
    assert extra / backbone < 0.06, f"{extra}/{backbone} = {extra / backbone:.4f}"


# --------------------------------------------------------------------------
# criterion 9: byte-identical reproducibility across processes
# --------------------------------------------------------------------------


def test_criterion_09_reproducibility(tmp_path):
    cfg = RunConfig()
    cfg.data.n_train, cfg.data.n_val, cfg.data.n_source = 8, 2, 4
    cfg.train.total_iters = 40
    cfg.train.pretrain_epochs = 2
    cfg.train.lr_scale = 1.0
    cfg_path = tmp_path / "config.json"
    cfg.save(cfg_path)

    def run(args):
        proc = subprocess.run(
            [sys.executable, "-c",
             "import sys; from frest_kit.cli import main; sys.exit(main())",
             *args],
            capture_output=True,
        )
        assert proc.returncode == 0, proc.stderr.decode()

    run(["pretrain", "--config", str(cfg_path), "--out", str(tmp_path / "pre")])
    logs = []
    for name in ("a", "b"):
        run(["adapt", "--config", str(cfg_path),
             "--set", f"pretrain_checkpoint={tmp_path / 'pre' / 'pretrain.pt'}",
             "--out", str(tmp_path / name)])
        logs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


# --------------------------------------------------------------------------
# criterion 10: ablation harness completes both headline grids
# --------------------------------------------------------------------------


def test_criterion_10_ablation_harness(tmp_path):
    from frest_kit import cli

    cfg = RunConfig()
    cfg.data.n_train, cfg.data.n_val, cfg.data.n_source = 4, 2, 2
    cfg.train.total_iters = 6
    cfg.train.pretrain_epochs = 1
    cfg.train.lr_scale = 1.0
    cfg_path = tmp_path / "config.json"
    cfg.save(cfg_path)

    import csv

    expected = {"selection": 3, "conf_threshold": 7}
    for grid, n_cells in expected.items():
        out = tmp_path / grid
        code = cli.main(["ablate", "--config", str(cfg_path), "--grid", grid,
                         "--out", str(out)])
        torch.set_num_threads(2)
        assert code == 0
        with (out / f"{grid}.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == n_cells
        assert all(r["status"] == "ok" for r in rows)
        assert all(np.isfinite(float(r["adverse_miou"])) for r in rows)
        refs = json.loads((out / f"{grid}_references.json").read_text())
        assert len(refs) == n_cells  # full-scale numbers logged, not gated
