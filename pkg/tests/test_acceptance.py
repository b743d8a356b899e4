"""Acceptance suite: one test (or a small group) per criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the run.
"""
import hashlib
import math
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from hmae import tensor as T
from hmae.checkpoint import CheckpointError, decode_checkpoint, load_checkpoint, model_checkpoint, \
    restore_model, save_checkpoint
from hmae.config import load_config
from hmae.corpus import SizeDistribution, generate_corpus, quality_check, split_counts, stratified_split_labels
from hmae.gradcheck import grad_check, model_grad_check
from hmae.metrics import Stat, auc_ovr, confusion, f1_scores, repeated_runs
from hmae.nn import Attention, Block, LayerNorm, Linear, Mlp
from hmae.optim import AdamWState, cosine_lr
from hmae.pipeline import probe_experiment
from hmae.probe import EmbeddingRecord
from hmae.store import read_embeddings, write_embeddings
from hmae.synthetic import blank_with_texture, noise_slide
from hmae.tensor import Tensor
from hmae.tsne import tsne
from hmae.vit import MaeModel, ViTConfig, mae_loss, patchify, patchify_array, pretrain_step, random_mask

from test_metrics import auc_macro_oracle, f1_oracle, random_instance

crit = pytest.mark.criterion


# -- 1 ---------------------------------------------------------------------------------------
@crit(1, "gradient fidelity (layers < 1e-4, tiny MAE < 1e-3, < 60 s)")
def test_c01_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 8)))
    w = rng.normal(size=(2, 3, 8))
    layers = {
        "linear": Linear(8, 8, rng),
        "layer_norm": LayerNorm(8),
        "attention": Attention(8, 2, rng),
        "mlp": Mlp(8, 16, rng),
        "block": Block(8, 2, 4.0, rng),
    }
    layer_errs = {}
    for name, layer in layers.items():
        layer.astype(np.float64)
        if name == "layer_norm":
            layer.weight.data = rng.normal(size=8)
            layer.bias.data = rng.normal(size=8)
        errs = model_grad_check(lambda: T.tsum(layer(x) * w), list(layer.named_parameters()) + [("x", x)], h=1e-3)
        layer_errs[name] = max(errs.values())
    for name, fn in {"softmax": lambda t: T.tsum(T.softmax(t, -1) * w),
                     "gelu": lambda t: T.tsum(T.gelu(t) * w),
                     "mse": lambda t: T.mse(t, w)}.items():
        layer_errs[name] = grad_check(fn, Tensor(rng.normal(size=(2, 3, 8))), h=1e-3)

    cfg = ViTConfig(input_size=8, patch_size=4, encoder_dim=16, encoder_depth=1, encoder_heads=2,
                    decoder_dim=16, decoder_depth=1, decoder_heads=2).validate()
    model = MaeModel(cfg, seed=0).astype(np.float64)
    patches = patchify_array(rng.random((2, 8, 8, 3)), 4)
    plans = [random_mask(4, 0.75, i) for i in range(2)]
    # a deep composite has larger third derivatives than one layer, so the O(h^2) truncation term needs
    # a smaller step; 1e-4 sits where it meets the f64 roundoff floor
    e2e = max(model_grad_check(lambda: model.loss(patches, plans), list(model.named_parameters()), h=1e-4).values())
    elapsed = time.perf_counter() - t0
    print(f"layer errors {layer_errs}; end-to-end {e2e:.2e}; {elapsed:.1f}s")
    assert max(layer_errs.values()) < 1e-4, layer_errs
    assert e2e < 1e-3
    assert elapsed < 60


# -- 2 ---------------------------------------------------------------------------------------
@crit(2, "masking contract (counts, partition, frequency 0.75 +- 0.01 over 1e5 draws)")
@pytest.mark.parametrize("n", [4, 16, 64, 196])
def test_c02_masking_contract(n):
    gen = np.random.default_rng(n)
    k = math.floor(0.75 * n + 0.5)
    counts = np.zeros(n)
    draws = 100_000
    for i in range(draws):
        plan = random_mask(n, 0.75, gen)
        assert len(plan.masked_idx) == k
        if i < 1000:
            both = np.concatenate([plan.visible_idx, plan.masked_idx])
            assert np.array_equal(np.sort(both), np.arange(n))
        counts[plan.masked_idx] += 1
    freq = counts / draws
    assert np.all(np.abs(freq - 0.75) <= 0.01), (freq.min(), freq.max())


# -- 3 ---------------------------------------------------------------------------------------
def synthetic_images(n=8, size=32, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    imgs = []
    for _ in range(n):
        fy, fx, ph = rng.uniform(0.5, 3, size=3)
        base = 0.5 + 0.4 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
        colour = rng.uniform(0.3, 1.0, size=3)
        imgs.append(base[..., None] * colour)
    return np.stack(imgs).astype(np.float32)


def eval_masked_mse(model, images):
    cfg = model.config
    patches = patchify_array(images, cfg.patch_size)
    plans = [random_mask(cfg.num_patches, cfg.mask_ratio, np.random.default_rng([99, i])) for i in range(len(images))]
    with T.no_grad():
        return float(model.loss(patches, plans).data)


def train_tiny(steps=2000, seed=0):
    cfg = ViTConfig.preset("tiny", input_size=32, patch_size=8, encoder_dim=64, encoder_depth=2).validate()
    model = MaeModel(cfg, seed=seed)
    images = synthetic_images()
    state = AdamWState(lr=2e-3)
    initial = eval_masked_mse(model, images)
    curve = [pretrain_step(model, images, s, seed, state, lr=cosine_lr(s, 2e-3, steps, warmup_steps=100))
             for s in range(steps)]
    return initial, eval_masked_mse(model, images), curve, model


@crit(3, "self-supervised convergence (tiny, 8 images, < 10% of initial within 2000 steps, < 5 min, repeatable)")
def test_c03_convergence():
    t0 = time.perf_counter()
    initial, final, curve, model = train_tiny()
    elapsed = time.perf_counter() - t0
    print(f"masked MSE {initial:.4f} -> {final:.6f} ({final / initial:.2%}) in {elapsed:.1f}s")
    assert final < 0.1 * initial
    assert elapsed < 300
    _, final2, curve2, model2 = train_tiny()
    assert curve == curve2 and final == final2
    for (_, a), (_, b) in zip(model.named_parameters(), model2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


# -- 4 ---------------------------------------------------------------------------------------
@crit(4, "loss restriction (visible-pixel perturbation changes mae_loss by exactly 0)")
def test_c04_loss_restriction():
    rng = np.random.default_rng(4)
    cfg = ViTConfig.preset("tiny", input_size=32).validate()
    model = MaeModel(cfg, seed=1)
    assert not cfg.loss_on_all_patches
    for trial in range(50):
        img = rng.random((32, 32, 3)).astype(np.float32)
        g = patchify(img, cfg.patch_size)
        plan = random_mask(cfg.num_patches, cfg.mask_ratio, trial)
        with T.no_grad():
            lat = model.forward_encoder(g.patches[None], plan.visible_idx[None])
            pred = model.forward_decoder(lat, plan.visible_idx[None], plan.masked_idx[None]).data[0]
        base = mae_loss(pred, g.patches, plan).item()
        target = g.patches.copy()
        pred2 = pred.copy()
        v = plan.visible_idx
        target[v] = rng.normal(0, 100, size=target[v].shape)
        pred2[v] = rng.normal(0, 100, size=pred2[v].shape)
        assert mae_loss(pred2, target, plan).item() - base == 0.0


# -- 5 ---------------------------------------------------------------------------------------
@crit(5, "metric oracles (1000 instances to 1e-9; AUC monotone invariance to 1e-12)")
def test_c05_metric_oracles():
    rng = np.random.default_rng(5)
    for i in range(1000):
        k, y, s = random_instance(rng, ties=i % 3 == 0)
        pred = np.argmax(s, axis=1)
        f = f1_scores(confusion(y, pred, k))
        per, macro, weighted = f1_oracle(y.tolist(), pred.tolist(), k)
        assert max(abs(a - b) for a, b in zip(f.per_class, per)) <= 1e-9
        assert abs(f.macro - macro) <= 1e-9 and abs(f.weighted - weighted) <= 1e-9
        auc = auc_ovr(y, s).macro
        assert abs(auc - auc_macro_oracle(y.tolist(), s.tolist(), k)) <= 1e-9
        for fn in (np.exp, lambda v: 2.5 * v - 1.0):
            assert abs(auc_ovr(y, fn(s)).macro - auc) <= 1e-12


# -- 6 ---------------------------------------------------------------------------------------
@crit(6, "probe sanity (3 Gaussian classes 10 sigma apart, 100 runs, macro F1 >= 0.95, std <= 0.05)")
def test_c06_probe_sanity():
    rng = np.random.default_rng(6)
    dim, per_class = 16, 60
    means = np.zeros((3, dim))
    means[1, 0] = 10.0
    means[2, 1] = 10.0
    recs = [EmbeddingRecord(f"e{c}_{i}", rng.normal(means[c], 1.0).astype(np.float32), c)
            for c in range(3) for i in range(per_class)]
    cfg = load_config(None, ["probe.task=coarse", "eval.runs=100"])
    report = repeated_runs(probe_experiment(recs, 3, cfg), cfg.eval.runs, base_seed=0,
                           classes=["benign", "atypical", "malignant"])
    line = report.f1_macro.format()
    print(f"macro F1 over 100 runs: {line}")
    assert report.runs == 100
    assert report.f1_macro.mean >= 0.95 and report.f1_macro.std <= 0.05
    assert line == f"{report.f1_macro.mean:.3f}±{report.f1_macro.std:.3f}"
    assert Stat(0.704, 0.009).format() == "0.704±0.009"


# -- 7 ---------------------------------------------------------------------------------------
@crit(7, "corpus filter (constant crops rejected, noise > 99% at 0.05, >= 80% of crops hit texture)")
def test_c07_constant_crops_rejected():
    rng = np.random.default_rng(7)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 64, size=2))
        for value in (0, 255):
            q = quality_check(np.full((h, w, 3), value, dtype=np.uint8), float(rng.uniform(0, 1)))
            assert not q.accepted


@crit(7, "corpus filter (constant crops rejected, noise > 99% at 0.05, >= 80% of crops hit texture)")
def test_c07_noise_acceptance(tmp_path):
    m = generate_corpus([noise_slide(512, 512, 0)], SizeDistribution(96, 32, 32, 256), 300, 0.05, 0,
                        tmp_path, input_size=16)
    print(f"noise acceptance {m.acceptance_rate:.4f}")
    assert m.acceptance_rate > 0.99


@crit(7, "corpus filter (constant crops rejected, noise > 99% at 0.05, >= 80% of crops hit texture)")
def test_c07_blank_slide_texture_hits(tmp_path):
    slide, (x0, y0, x1, y1) = blank_with_texture(1024, 1024, 0.1, 1)
    blank_frac = 1 - (x1 - x0) * (y1 - y0) / (1024 * 1024)
    assert blank_frac >= 0.9 - 1e-3
    m = generate_corpus([slide], SizeDistribution(64, 16, 32, 128), 200, 0.1, 2, tmp_path, input_size=16)
    hits = sum(1 for r in m.rows if r.x < x1 and r.x + r.side > x0 and r.y < y1 and r.y + r.side > y0)
    print(f"{hits}/{len(m)} accepted crops intersect the textured band (acceptance {m.acceptance_rate:.3f})")
    assert hits >= 0.8 * len(m)


# -- 8 ---------------------------------------------------------------------------------------
@crit(8, "split contract (exact partition, 70/10/20 per class within largest-remainder rounding)")
def test_c08_split_contract():
    rng = np.random.default_rng(8)
    for trial in range(1000):
        k = int(rng.integers(1, 8))
        sizes = rng.integers(3, 60, size=k)
        labels = rng.permutation(np.repeat(np.arange(k), sizes)).tolist()
        tags = stratified_split_labels(labels, (0.7, 0.1, 0.2), rng=trial)
        assert len(tags) == len(labels) and set(tags) <= {"train", "val", "test"}
        for c in range(k):
            sub = [t for l, t in zip(labels, tags) if l == c]
            got = [sub.count(s) for s in ("train", "val", "test")]
            assert got == split_counts(len(sub), (0.7, 0.1, 0.2))
            for g, f in zip(got, (0.7, 0.1, 0.2)):
                assert abs(g - f * len(sub)) < 1


# -- 9 ---------------------------------------------------------------------------------------
@crit(9, "t-SNE separation (silhouette > 0.5 in >= 95/100 seeds; final KL < post-exaggeration KL)")
def test_c09_tsne_separation():
    good, kl_ok = 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(50, 64))
        b = rng.normal(size=(50, 64))
        b[:, 0] += 20.0
        X = np.concatenate([a, b])
        y = np.repeat([0, 1], 50)
        proj = tsne(X, perplexity=30, iterations=1000, rng=seed)
        good += silhouette_score(proj.coords, y) > 0.5
        kl_ok += proj.kl < proj.kl_history[250]
    print(f"silhouette > 0.5 in {good}/100 seeds; KL decreased in {kl_ok}/100")
    assert good >= 95
    assert kl_ok == 100


# -- 10 --------------------------------------------------------------------------------------
@crit(10, "persistence (bit-exact round-trips, killed writer never leaves a valid truncated checkpoint)")
def test_c10_round_trips(tmp_path):
    cfg = ViTConfig.preset("tiny").validate()
    model = MaeModel(cfg, seed=10)
    opt = AdamWState(lr=1e-3)
    pretrain_step(model, np.random.default_rng(0).random((2, 64, 64, 3)).astype(np.float32), 0, 10, opt)
    path = save_checkpoint(tmp_path / "m.ckpt", model_checkpoint(model, 1, opt, seed=10))
    m2, o2 = restore_model(load_checkpoint(path, expected_config=cfg))
    for (_, a), (_, b) in zip(model.named_parameters(), m2.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(opt.m + opt.v, o2.m + o2.v))
    recs = [EmbeddingRecord(f"r{i}", np.random.default_rng(i).normal(size=64).astype(np.float32), i % 3,
                            ["train", "val", "test", None][i % 4]) for i in range(20)]
    back = read_embeddings(write_embeddings(recs, tmp_path / "e.hmeb"))
    assert [(r.id, r.label, r.split, r.vector.tobytes()) for r in back] == \
           [(r.id, r.label, r.split, r.vector.tobytes()) for r in recs]


_WRITER = """
import sys
import numpy as np
from hmae.checkpoint import model_checkpoint, save_checkpoint
from hmae.vit import MaeModel, ViTConfig
model = MaeModel(ViTConfig.preset("tiny"), seed=0)
print("ready", flush=True)
step = 0
while True:
    model.patch_embed.weight.data[...] = step
    save_checkpoint(sys.argv[1], model_checkpoint(model, step))
    step += 1
"""


@crit(10, "persistence (bit-exact round-trips, killed writer never leaves a valid truncated checkpoint)")
def test_c10_killed_writer(tmp_path):
    target = tmp_path / "live.ckpt"
    rng = np.random.default_rng(10)
    kills = 0
    for _ in range(15):
        proc = subprocess.Popen([sys.executable, "-c", _WRITER, str(target)], stdout=subprocess.PIPE)
        assert proc.stdout.readline().strip() == b"ready"
        time.sleep(float(rng.uniform(0.0, 0.4)))
        proc.send_signal(signal.SIGKILL)
        proc.wait()
        proc.stdout.close()
        kills += 1
        for f in list(tmp_path.iterdir()):
            try:
                ck = decode_checkpoint(f.read_bytes())
            except CheckpointError:
                assert f != target
                f.unlink()
                continue
            model, _ = restore_model(ck)
            assert np.all(model.patch_embed.weight.data == ck.step)
            if f != target:
                f.unlink()
    assert kills == 15


# -- 11 --------------------------------------------------------------------------------------
def _pipeline(root: Path) -> dict:
    base = [sys.executable, "-m", "hmae.cli"]
    common = ["--seed", "11", "--set", "corpus.mu=96", "--set", "corpus.sigma=24", "--set", "corpus.clamp_min=48",
              "--set", "corpus.clamp_max=192", "--set", "training.steps=500", "--set", "training.lr=0.001",
              "--set", "training.warmup_steps=25", "--set", "eval.runs=10", "--set", "eval.perplexity=10",
              "--set", 'probe.classes=["Normal","Benign","UDH","ADH","FEA","DCIS","Invasive"]',
              "--threads", "1"]
    steps = [
        ["synth", "--out", str(root / "data"), "--slides", "2", "--slide-size", "512", "--per-class", "10"],
        ["generate", "--slides", str(root / "data/slides"), "--out", str(root / "corpus"),
         "--set", "corpus.count=200"],
        ["pretrain", "--manifest", str(root / "corpus/manifest.csv"), "--out", str(root / "model.ckpt")],
        ["embed", "--checkpoint", str(root / "model.ckpt"), "--manifest", str(root / "data/labeled/labeled.csv"),
         "--out", str(root / "emb.hmeb")],
        ["probe-eval", "--embeddings", str(root / "emb.hmeb"), "--out", str(root / "report.json")],
        ["project", "--embeddings", str(root / "emb.hmeb"), "--out", str(root / "proj.csv")],
    ]
    for argv in steps:
        out = subprocess.run(base + [argv[0]] + common + argv[1:], capture_output=True, text=True)
        assert out.returncode == 0, (argv[0], out.stderr)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@crit(11, "end-to-end determinism (full synthetic pipeline twice, byte-identical, < 15 min)")
def test_c11_end_to_end_determinism(tmp_path):
    t0 = time.perf_counter()
    first = _pipeline(tmp_path / "run1")
    elapsed = time.perf_counter() - t0
    second = _pipeline(tmp_path / "run2")
    print(f"pipeline: {len(first)} files, first run {elapsed:.1f}s")
    assert elapsed < 15 * 60
    assert first == second
    for name in ("corpus/manifest.csv", "model.ckpt", "emb.hmeb", "report.json", "proj.csv"):
        assert name in first
    assert sum(1 for k in first if k.startswith("corpus/images/")) == 200
