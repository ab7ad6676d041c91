"""Acceptance criteria, one test each.

Every test prints one ``[ACCEPT n] PASS|FAIL <name>: <measurement>`` line
(run with ``-s`` to see them live; they also land in the captured output of
failures). Criterion 12 is informational and only runs with
``CAGAN_INFORMATIONAL=1``.
"""
import dataclasses
import hashlib
import os
import time

import numpy as np
import pytest
import torch

from cagan import datamodel as dm
from cagan import losses as L
from cagan import metrics as M
from cagan.networks import NetConfig, build_discriminator, build_generator
from cagan.trainer import (
    SampleBank,
    TrainConfig,
    init_state,
    load_checkpoint,
    save_checkpoint,
    synthesize,
    train,
    train_step,
)


def verdict(n, name, ok, detail):
    print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"criterion {n} ({name}) failed: {detail}"


def soft_masks(rng, h, w, c=8):
    m = rng.gamma(0.5, size=(c, h, w))
    return m / m.sum(0, keepdims=True)


def hard_masks(rng, h, w, c=8):
    return np.eye(c)[rng.integers(0, c, (h, w))].transpose(2, 0, 1)


def t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def digest(net):
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_1_loss_additivity():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        y, y_hat = rng.uniform(-1, 1, (2, 1, 16, 16))
        m = t(soft_masks(rng, 16, 16))
        total = sum(L.component_global_l1(t(y), t(y_hat), m, c) for c in range(8))
        worst = max(worst, abs(total.item() - L.global_l1(t(y), t(y_hat)).item()))
    elapsed = time.perf_counter() - start
    verdict(1, "loss additivity", worst <= 1e-5 and elapsed < 5, f"max gap {worst:.2e} (<=1e-5), {elapsed:.2f}s (<5s)")


def test_2_balanced_loss_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(4, 17, 2)
        y, y_hat = rng.uniform(-1, 1, (2, 1, h, w))
        m = hard_masks(rng, h, w)
        c = int(rng.integers(0, 8))
        # brute-force region-restricted mean absolute error
        total, count = 0.0, 0
        for i in range(h):
            for j in range(w):
                if m[c, i, j] == 1:
                    total += abs(y[0, i, j] - y_hat[0, i, j])
                    count += 1
        expected = total / count if count else 0.0
        got = L.balanced_component_l1(t(y), t(y_hat), t(m), c).item()
        worst = max(worst, abs(got - expected))
    verdict(2, "balanced-loss oracle", worst <= 1e-6, f"max gap {worst:.2e} (<=1e-6)")


def test_3_gamma_symmetry():
    m = torch.full((8, 16, 16), 1 / 8, dtype=torch.float64)
    gammas = [L.inverse_frequency(m, c).item() for c in range(8)]
    verdict(3, "gamma symmetry", all(g == 8.0 for g in gammas), f"gamma={gammas}")


def test_4_mix_endpoints():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        y, y_hat = rng.uniform(-1, 1, (2, 1, 12, 12))
        m = t(soft_masks(rng, 12, 12))
        g = L.global_l1(t(y), t(y_hat)).item()
        c = L.compositional_l1(t(y), t(y_hat), m).item()
        a0 = L.mixed_reconstruction_loss(t(y), t(y_hat), m, L.LossWeights(alpha=0.0)).item()
        a1 = L.mixed_reconstruction_loss(t(y), t(y_hat), m, L.LossWeights(alpha=1.0)).item()
        worst = max(worst, abs(a0 - g) / abs(g), abs(a1 - c) / abs(c))
    verdict(4, "mix endpoints", worst <= 1e-12, f"max relative gap {worst:.2e} (<=1e-12)")


def test_5_gradient_check():
    h = 1e-3
    fractions = []
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        y = rng.uniform(-1, 1, (1, 8, 8))
        # keep every residual at least 10h away from the L1 kink
        delta = rng.uniform(10 * h, 0.5, y.shape) * rng.choice([-1, 1], y.shape)
        m = t(soft_masks(rng, 8, 8))
        y_hat = t(y + delta).requires_grad_()
        (grad,) = torch.autograd.grad(L.mixed_reconstruction_loss(t(y), y_hat, m), y_hat)
        base = y_hat.detach()
        good = 0
        for idx in np.ndindex(*y.shape):
            plus, minus = base.clone(), base.clone()
            plus[idx] += h
            minus[idx] -= h
            fd = (L.mixed_reconstruction_loss(t(y), plus, m) - L.mixed_reconstruction_loss(t(y), minus, m)).item()
            fd /= 2 * h
            a = grad[idx].item()
            good += abs(a - fd) <= 1e-3 * max(abs(a), abs(fd), 1e-300)
        fractions.append(good / y.size)
    verdict(5, "gradient check", min(fractions) >= 0.95, f"worst seed agreement {min(fractions):.3f} (>=0.95)")


def test_6_architecture_contracts():
    cfg = NetConfig(64, 3, 8, 1)
    g = build_generator(cfg, seed=0)
    d = build_discriminator(cfg, seed=1)
    gen = torch.Generator().manual_seed(0)
    photo = torch.rand(1, 3, 64, 64, generator=gen) * 2 - 1
    masks = torch.from_numpy(soft_masks(np.random.default_rng(6), 64, 64)).float()[None]
    target = torch.rand(1, 1, 64, 64, generator=gen) * 2 - 1
    out = g(photo, masks)
    shape_ok = tuple(out.shape) == (1, 1, 64, 64) and out.min() >= -1 and out.max() <= 1
    g2 = build_generator(NetConfig(64, 3, 8, 1, stage="two"))
    extra = g2.appearance.blocks[0][0].in_channels - g.appearance.blocks[0][0].in_channels
    objective = L.generator_objective(L.generator_adv_loss_from_logits(d(photo, masks, out)),
                                      L.mixed_reconstruction_loss(target, out, masks))
    objective.backward()
    gnorm = g.composition.blocks[0][0].weight.grad.norm().item()
    verdict(6, "architecture contracts", shape_ok and extra == 1 and gnorm > 0,
            f"out {tuple(out.shape)} range [{out.min().item():.3f}, {out.max().item():.3f}], "
            f"stage-II extra channels {extra}, composition grad norm {gnorm:.3e}")


def test_7_update_order(tiny_samples, tiny_cfg):
    state = init_state(tiny_cfg)
    bank = SampleBank(tiny_samples, tiny_cfg)
    last = {k: digest(v) for k, v in state.nets.items()}
    seen = []

    def probe(name, st):
        now = {k: digest(v) for k, v in st.nets.items()}
        seen.append((name, sorted(k for k in now if now[k] != last[k])))
        last.update(now)

    for i in range(3):
        train_step(state, bank.batch([i]), probe)
    expected = [("d1", ["d1"]), ("d2", ["d2"]), ("g1", ["g1"]), ("g2", ["g2"])] * 3
    a = train(tiny_cfg, tiny_samples).logs
    b = train(tiny_cfg, tiny_samples).logs
    verdict(7, "update order", seen == expected and a == b,
            f"sub-steps {[s[0] for s in seen[:4]]} each touching only itself: {seen == expected}; "
            f"double run identical: {a == b}")


@pytest.mark.slow
def test_8_desk_scale_training():
    torch.manual_seed(0)
    samples = dm.generate_procedural_set(200, 64, seed=0)
    cfg = TrainConfig(stages=2, epochs=5, image_size=64, base_width=32, seed=0, log_every=0)
    start = time.perf_counter()
    state = train(cfg, samples)
    minutes = (time.perf_counter() - start) / 60
    recon = np.asarray(state.logs["recon1"]).reshape(5, 200).mean(axis=1)
    ratio = recon[-1] / recon[0]
    finite = all(np.isfinite(v).all() for v in state.logs.values())
    verdict(8, "desk-scale training", minutes <= 30 and ratio < 0.5 and finite,
            f"{minutes:.1f} min (<=30), stage-I recon per epoch {np.round(recon, 3).tolist()}, "
            f"last/first {ratio:.3f} (<0.5), all finite {finite}")


def test_9_frechet_oracle():
    rng = np.random.default_rng(9)
    x = M.EmbeddingSet(rng.standard_normal((40, 16)), "t")
    same = M.fid_from_embeddings(x, x)
    worst_1d = 0.0
    for _ in range(100):
        m1, m2 = rng.normal(size=2)
        s1, s2 = rng.uniform(0.05, 3, 2)
        a = M.GaussianStats(np.array([m1]), np.array([[s1 * s1]]))
        b = M.GaussianStats(np.array([m2]), np.array([[s2 * s2]]))
        worst_1d = max(worst_1d, abs(M.frechet_distance(a, b) - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))
    worst_sqrt = 0.0
    for d in (1, 2, 4, 8, 16, 32, 64):
        for rank in (d, max(1, d // 3)):
            bmat = rng.standard_normal((d, rank))
            s = bmat @ bmat.T
            r = M.matrix_sqrt_psd(s)
            worst_sqrt = max(worst_sqrt, np.linalg.norm(r @ r - s) / np.linalg.norm(s))
    verdict(9, "Frechet oracle", abs(same) <= 1e-6 and worst_1d <= 1e-8 and worst_sqrt <= 1e-6,
            f"identical {same:.1e} (<=1e-6), 1-d gap {worst_1d:.1e} (<=1e-8), sqrt rel err {worst_sqrt:.1e} (<=1e-6)")


def _clusters(rng, n_ids=20, d=64, per_id=1, sep=10.0, centre_dims=8):
    centres = np.zeros((n_ids, d))
    c = rng.standard_normal((n_ids, centre_dims))
    gaps = np.linalg.norm(c[:, None] - c[None], axis=-1)[np.triu_indices(n_ids, 1)]
    centres[:, :centre_dims] = c * sep / gaps.min()

    def draw():
        x = np.repeat(centres, per_id, axis=0)
        x[:, centre_dims:] += rng.standard_normal((len(x), d - centre_dims))
        return x

    ids = np.repeat(np.arange(n_ids), per_id)
    return draw(), ids, draw(), ids.copy()


def test_10_nlda_oracle():
    rng = np.random.default_rng(10)
    # two classes in the null-space regime: 6 samples in 40 dimensions
    x = rng.standard_normal((6, 40))
    labels = np.array([0, 0, 0, 1, 1, 1])
    w = M.nlda_fit(x, labels)
    sw = M.within_class_scatter(x, labels)
    annihilation = np.linalg.norm(w.T @ sw @ w) / np.linalg.norm(sw)
    g, gid, p, pid = _clusters(rng)
    acc = M.recognition_protocol(g, gid, p, pid, repeats=20, seed=0, featurizer=None).mean
    g, gid, p, pid = _clusters(rng, per_id=3)
    shuffled = np.random.default_rng(5).permutation(20)[gid]
    null = M.recognition_protocol(g, shuffled, p, pid, repeats=20, seed=0, featurizer=None).mean
    chance = 1 / (20 - 12)  # identities held out of each NLDA fit
    ok = annihilation <= 1e-8 and acc >= 0.99 and abs(null - chance) <= 0.1
    verdict(10, "NLDA oracle", ok, f"||W'SwW||/||Sw|| {annihilation:.1e} (<=1e-8), accuracy {acc:.3f} (>=0.99), "
                                   f"shuffled {null:.3f} vs chance {chance:.3f} (+-0.1)")


def test_11_round_trips(tmp_path, tiny_samples, tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, epochs=3)
    full = train(cfg, tiny_samples, max_iterations=15)
    part = train(cfg, tiny_samples, max_iterations=5)
    save_checkpoint(part, tmp_path / "ckpt")
    resumed = train(cfg, tiny_samples, state=load_checkpoint(tmp_path / "ckpt", cfg), max_iterations=10)
    resume_gap = max(np.max(np.abs(np.asarray(resumed.logs[k][5:]) - np.asarray(full.logs[k][5:])))
                     for k in full.logs)

    rng = np.random.default_rng(11)
    pad_ok = True
    for _ in range(50):
        h, w = rng.integers(1, 40, 2)
        img = rng.uniform(-1, 1, (h, w, 3)).astype(np.float32)
        out, rec = dm.zero_pad(img, h + int(rng.integers(0, 9)), w + int(rng.integers(0, 9)))
        pad_ok &= np.array_equal(rec.crop(out), img)

    manifest = dm.write_fixture_dataset(tmp_path / "fx", 12, size=32, seed=11)
    worst_sum = 0.0
    for s in dm.load_samples(dm.read_manifest(tmp_path / "fx" / "manifest.jsonl")):
        worst_sum = max(worst_sum, float(np.abs(s.masks.sum(-1) - 1).max()))
        pad_ok &= bool(s.masks.min() >= 0 and s.masks.max() <= 1)
    ok = resume_gap <= 1e-6 and pad_ok and worst_sum <= 1e-4 and len(manifest) == 12
    verdict(11, "pipeline round trips", ok, f"resume gap over 10 iters {resume_gap:.1e} (<=1e-6), "
                                            f"pad/crop exact {pad_ok}, mask sum error {worst_sum:.1e} (<=1e-4)")


INFO_TRAIN, INFO_TEST, INFO_EPOCHS, INFO_SEEDS = 60, 40, 20, 5


@pytest.mark.informational
@pytest.mark.skipif(os.environ.get("CAGAN_INFORMATIONAL") != "1", reason="informational; set CAGAN_INFORMATIONAL=1")
def test_12_stage_two_fid_informational():
    samples = dm.generate_procedural_set(INFO_TRAIN + INFO_TEST, 64, seed=12)
    train_set = samples[:INFO_TRAIN]
    test_set = samples[INFO_TRAIN:]
    embedder = M.ProjectionEmbedder(64)
    real = M.embed_set([s.sketch for s in test_set], embedder)
    fids = []
    for seed in range(INFO_SEEDS):
        cfg = TrainConfig(stages=2, epochs=INFO_EPOCHS, image_size=64, base_width=32, seed=seed, log_every=0)
        state = train(cfg, train_set)
        per_stage = []
        for stage in (1, 2):
            fake = M.embed_set([synthesize(state, s.photo, s.masks, stage) for s in test_set], embedder)
            per_stage.append(M.fid_from_embeddings(real, fake))
        fids.append(per_stage)
        print(f"\n  seed {seed}: FID stage I {per_stage[0]:.4f}, stage II {per_stage[1]:.4f}")
    med1, med2 = np.median(fids, axis=0)
    # non-gating: report the direction, never fail the suite
    print(f"\n[ACCEPT 12] {'PASS' if med2 <= med1 else 'FAIL'} (informational) stage-II FID <= stage-I: "
          f"median over {INFO_SEEDS} seeds {med2:.4f} vs {med1:.4f}")
