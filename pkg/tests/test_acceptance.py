"""The ten acceptance criteria, each at its stated tolerance.

Every test appends one ``[criterion N] PASS|FAIL ...`` line that is printed
in the terminal summary, then asserts.
"""
import itertools
import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from brainparc.augment import (
    add_gaussian_noise,
    add_speckle_noise,
    bias_field,
    elastic_deform,
    fft3_centered,
    ghosting,
    gibbs_ringing,
    ifft3_centered,
    random_crop_brain,
    rotate3d,
)
from brainparc.cli import run
from brainparc.fusion import distance_weights
from brainparc.hierarchy import (
    LabelTree,
    class_conditional,
    encode_targets,
    frontier_log_probs,
    hier_ce_grad,
    hier_ce_loss,
    sibling_softmax,
)
from brainparc.inference import segment_volume
from brainparc.metrics import bland_altman, dsc, icv, mann_whitney_u, vs, wilcoxon_signed_rank
from brainparc.standardize import gamma_transform
from brainparc.toy import generate_phantom, phantom_tree, validation_dsc

from . import conftest
from .conftest import central_diff, check_total_loss_grad, six_node_tree, random_tree, rel_err
from .test_augment import direct_dft
from .test_fusion import brute_distance
from .test_metrics import _count


def record(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_hierarchy():
    t0 = time.perf_counter()
    tree = six_node_tree()
    p = class_conditional(sibling_softmax(np.zeros(6), tree), tree)
    got = np.array([p[tree.index[i]] for i in range(1, 7)])
    err = np.abs(got - [0.5, 0.5, 0.25, 0.25, 0.125, 0.125]).max()
    fsum = np.exp(frontier_log_probs(np.zeros(6), tree)).sum()
    secs = time.perf_counter() - t0
    ok = err <= 1e-9 and abs(fsum - 1) <= 1e-9 and secs < 1.0
    record(1, ok, f"max prob error {err:.1e}, frontier sum - 1 = {fsum - 1:.1e}, {secs:.3f} s")


def test_criterion_02_gradients():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_ce = worst_total = 0.0
    n_ce = n_total = 0
    for trial in range(60):
        tree = six_node_tree() if trial % 2 == 0 else random_tree(rng, depth=4)
        s = rng.normal(size=(8, 8, tree.size)) * 1.5
        t = encode_targets(rng.choice(tree.ids, size=(8, 8)), tree)
        soft = rng.random((8, 8)) < 0.25
        t[soft] *= rng.uniform(0, 1, size=(int(soft.sum()), 1))
        g = hier_ce_grad(s, t, tree)
        fd = central_diff(lambda x: hier_ce_loss(x, t, tree), s)
        worst_ce = max(worst_ce, rel_err(g, fd))
        n_ce += 1
        worst_total = max(worst_total, check_total_loss_grad(rng, tree))
        n_total += 1
    secs = time.perf_counter() - t0
    ok = worst_ce < 1e-4 and worst_total < 1e-4 and n_ce + n_total >= 100 and secs < 60
    record(2, ok, f"{n_ce} hier_ce + {n_total} total_loss instances, worst rel err "
                  f"{worst_ce:.1e} / {worst_total:.1e}, {secs:.1f} s")


def test_criterion_03_flat_tree():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        tree = LabelTree.flat(range(k))
        s = rng.normal(size=(1, k)) * rng.uniform(0.1, 10)
        y = int(rng.integers(0, k))
        m = s.max()
        ref = -(s[0, y] - m - np.log(np.exp(s[0] - m).sum()))
        got = hier_ce_loss(s, encode_targets(np.array([y]), tree), tree)
        worst = max(worst, abs(got - ref))
    record(3, worst <= 1e-9, f"1000 instances, max |hier - softmax CE| {worst:.1e}")


def test_criterion_04_fft():
    rng = np.random.default_rng(4)
    worst = 0.0
    for shape in itertools.product(range(1, 9), repeat=3):
        v = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        ref = direct_dft(v)
        worst = max(worst, np.abs(fft3_centered(v) - ref).max() / np.abs(ref).max())
        ref_inv = direct_dft(v, inverse=True)
        worst = max(worst, np.abs(ifft3_centered(v) - ref_inv).max() / np.abs(ref_inv).max())
    big = rng.random((64, 64, 64))
    rt = np.abs(ifft3_centered(fft3_centered(big)) - big).max() / np.abs(big).max()
    ok = worst <= 1e-9 and rt <= 1e-9
    record(4, ok, f"512 shapes <= 8, worst rel err {worst:.1e}; 64^3 round trip {rt:.1e}")


def test_criterion_05_augmentation_identities():
    rng = np.random.default_rng(5)
    v = rng.random((16, 16, 16))
    lab = np.zeros((16, 16, 16), dtype=np.int32)
    lab[4:12, 3:13, 5:11] = 1
    neutral = {
        "rotate 0": rotate3d(v, None, (0, 0, 0))[0],
        "elastic alpha 0": elastic_deform(v, None, 3.0, 0.0, rng)[0],
        "gamma 1": gamma_transform(v, 1.0),
        "noise var 0": add_gaussian_noise(v, 0.0, rng),
        "speckle var 0": add_speckle_noise(v, 0.0, rng),
        "bias radius 1e12": bias_field(v, (8, 8, 8), 1e12),
        "crop full box": random_crop_brain(v, lab, box=[(0, 15)] * 3)[0],
        "ringing full band": gibbs_ringing(v, 8),
        "ghost factor 1": ghosting(v, 2, 1.0),
    }
    errs = {k: float(np.abs(out - v).max()) for k, out in neutral.items()}
    errs["ringing cutoff 0"] = float(np.abs(gibbs_ringing(v, 0) - v.mean()).max())
    worst = max(errs, key=errs.get)
    ok = all(e <= 1e-6 for e in errs.values())
    record(5, ok, f"{len(errs)} identities, worst {worst} {errs[worst]:.1e}")


def test_criterion_06_distance_weights():
    rng = np.random.default_rng(6)
    worst = 0.0
    for density in (0.002, 0.01, 0.05):
        labels = np.zeros((16, 16, 16), dtype=np.int32)
        labels[rng.random(labels.shape) < density] = 3
        labels[8, 8, 8] = 1
        d = brute_distance(labels != 0, (1.0, 1.0, 1.0))
        worst = max(worst, np.abs(distance_weights(labels) - np.exp(-d * d / 20.0)).max())
    record(6, worst <= 1e-9, f"3 volumes of 16^3, max |w - exp(-d^2/20)| {worst:.1e}")


def test_criterion_07_metrics():
    rng = np.random.default_rng(7)
    exact = dominance = True
    for _ in range(100):
        p = (rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)).astype(np.int32)
        q = (rng.random((8, 8, 8)) < rng.uniform(0.05, 0.6)).astype(np.int32)
        ny, nt, both = _count(p, q, 1)
        exact &= dsc(p, q, 1) == 2 * both / (ny + nt) and vs(p, q, 1) == 1 - abs(ny - nt) / (ny + nt)
        dominance &= vs(p, q, 1) >= dsc(p, q, 1)
    pw = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0]).pvalue
    pm = mann_whitney_u([1, 2, 3], [4, 5, 6]).pvalue
    ok = exact and dominance and abs(pw - 0.0625) < 1e-12 and abs(pm - 0.1) < 1e-12
    record(7, ok, f"100 mask pairs exact={exact} VS>=DSC={dominance}; Wilcoxon p={pw:g}; Mann-Whitney p={pm:g}")


def test_criterion_08_end_to_end(trained_phantom_model):
    m = trained_phantom_model
    tree, model = m["tree"], m["model"]
    with threadpool_limits(limits=1):
        val = validation_dsc(model, m["val"], tree)
        agree = total = 0
        for s in m["val"]:
            fused = segment_volume(s.image, model, tree, mode="fusion").data
            voted = segment_volume(s.image, model, tree, mode="vote").data
            fg = s.labels != 0
            agree += int(np.sum(fused[fg] == voted[fg]))
            total += int(fg.sum())
    agreement = agree / total
    ok = val >= 0.8 and agreement >= 0.9 and m["seconds"] < 600
    record(8, ok, f"validation DSC {val:.3f}, fusion/vote agreement {agreement:.3f}, "
                  f"training {m['seconds']:.0f} s single-threaded")


def test_criterion_09_icv_stability(trained_phantom_model):
    tree, model = trained_phantom_model["tree"], trained_phantom_model["model"]
    rng = np.random.default_rng(9)
    a, b = [], []
    with threadpool_limits(limits=1):
        for seed in range(1000, 1010):
            img, _ = generate_phantom(seed, 32, tree)
            angles = tuple(rng.uniform(-5, 5, size=3))
            moved = rotate3d(img, None, angles)[0]
            moved = add_gaussian_noise(moved, 1e-4, rng)
            a.append(icv(segment_volume(img, model, tree)))
            b.append(icv(segment_volume(moved, model, tree)))
    ba = bland_altman(a, b)
    span = ba.loa_high - ba.loa_low
    mean_icv = float(np.mean(a + b))
    ok = span < 0.05 * mean_icv
    record(9, ok, f"10 pairs, LoA span {span:.1f} mm^3 = {100 * span / mean_icv:.2f}% of mean ICV {mean_icv:.0f} mm^3")


def test_criterion_10_cli_determinism(tmp_path):
    (tmp_path / "tiny.json").write_text(json.dumps({
        "channels": 3, "eval_every": 10,
        "schedule": {"max_iters": 30, "patience_iters": 30, "lr_drop_period": 20},
    }))
    (tmp_path / "phantom.tree").write_text(phantom_tree().to_text())
    outputs = []
    for rep in ("r1", "r2"):
        d = tmp_path / rep
        d.mkdir()
        steps = [
            ["phantom", "--seed", "4", "--side", "16", "--out-image", str(d / "img.nii.gz"),
             "--out-labels", str(d / "lab.nii.gz")],
            ["augment", "--seed", "12", "--in", str(d / "img.nii.gz"), "--labels-in", str(d / "lab.nii.gz"),
             "--out", str(d / "aug.nii.gz"), "--labels-out", str(d / "auglab.nii.gz")],
            ["train", "--seed", "5", "--config", str(tmp_path / "tiny.json"), "--phantoms", "3", "--val", "1",
             "--side", "16", "--out", str(d / "m.bin")],
            ["segment", "--in", str(d / "aug.nii.gz"), "--model", str(d / "m.bin"),
             "--tree", str(tmp_path / "phantom.tree"), "--out", str(d / "seg.nii.gz")],
            ["standardize", "--in", str(d / "aug.nii.gz"), "--side", "20", "--out", str(d / "std.nii.gz")],
        ]
        codes = [run(["--threads", "1"] + s) for s in steps]
        assert codes == [0] * len(steps)
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name.endswith(".nii.gz")})
    same = outputs[0].keys() == outputs[1].keys() and all(outputs[0][k] == outputs[1][k] for k in outputs[0])
    record(10, same, f"{len(outputs[0])} NIfTI outputs byte-identical across two runs: {same}")
