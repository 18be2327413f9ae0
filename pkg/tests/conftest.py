import numpy as np
import pytest

from brainparc.hierarchy import LabelTree

ACCEPTANCE_LINES = []


def six_node_tree():
    """Six labelled nodes over three levels; frontier {1, 3, 5, 6}."""
    return LabelTree.from_parents({1: None, 2: None, 3: 2, 4: 2, 5: 4, 6: 4})


def random_tree(rng, depth=4, max_children=3):
    """Random tree whose deepest root path has exactly ``depth`` levels."""
    parents = {}
    next_id = [1]

    def grow(parent, level):
        n = int(rng.integers(1, max_children + 1))
        if parent is None:
            n = max(n, 2)
        kids = []
        for _ in range(n):
            i = next_id[0]
            next_id[0] += 1
            parents[i] = parent
            kids.append(i)
        return kids

    frontier = grow(None, 1)
    spine = frontier[0]
    for level in range(2, depth + 1):
        new = grow(spine, level)
        for k in frontier:
            if k != spine and rng.random() < 0.4:
                new += grow(k, level)
        frontier, spine = new, new[0]
    return LabelTree.from_parents(parents)


def central_diff(f, x, h=1e-5, coords=None):
    """Central finite differences of scalar ``f`` at ``x`` (all or selected flat coords)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for c in idx:
        old = flat[c]
        flat[c] = old + h
        fp = f(x)
        flat[c] = old - h
        fm = f(x)
        flat[c] = old
        out[c] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def rel_err(a, b):
    """Max-norm error relative to the larger max-norm of the two arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return float(np.abs(a - b).max(initial=0) / scale)


def random_batch(rng, tree, n=8, scale=1.5):
    """Random 8x8 planar batch with mixed hard and soft targets."""
    from brainparc.fusion import PlanarBatch
    from brainparc.hierarchy import encode_targets

    k = tree.size
    planes = [rng.normal(size=(n, n, k)) * scale for _ in range(3)]
    index = tuple(int(v) for v in rng.integers(0, n, size=3))
    targets = []
    for _ in range(3):
        t = encode_targets(rng.choice(tree.ids, size=(n, n)), tree)
        soft = rng.random((n, n)) < 0.25
        t[soft] *= rng.uniform(0, 1, size=(int(soft.sum()), 1))
        targets.append(t)
    return PlanarBatch(*planes, index), rng.normal(size=3), tuple(targets)


def check_total_loss_grad(rng, tree, coords=24, directions=3, h=1e-5):
    """Worst relative error of total_loss gradients against central differences.

    Compares every plane-weight parameter, ``coords`` random score entries per
    plane and ``directions`` random directional derivatives over all inputs.
    """
    from brainparc.fusion import PlanarBatch, total_loss

    batch, params, targets = random_batch(rng, tree)
    res = total_loss(batch, params, targets, tree)
    shapes = [batch.axial.shape, batch.coronal.shape, batch.sagittal.shape]
    sizes = [int(np.prod(s)) for s in shapes]

    def pack(a, c, s, w):
        return np.concatenate([a.ravel(), c.ravel(), s.ravel(), np.ravel(w)])

    def f(x):
        parts, off = [], 0
        for shp, sz in zip(shapes, sizes):
            parts.append(x[off : off + sz].reshape(shp))
            off += sz
        return total_loss(PlanarBatch(*parts, batch.index), x[off:], targets, tree).value

    x0 = pack(batch.axial, batch.coronal, batch.sagittal, params)
    g = pack(res.grad_axial, res.grad_coronal, res.grad_sagittal, res.grad_weight_params)
    picks = [int(sum(sizes)) + p for p in range(3)]
    off = 0
    for sz in sizes:
        picks += list(off + rng.choice(sz, size=min(coords, sz), replace=False))
        off += sz
    # always probe the fused voxel, where every path meets
    i, j, kk = batch.index
    for p, (shp, cell) in enumerate(zip(shapes, [(i, j), (i, kk), (j, kk)])):
        base = sum(sizes[:p]) + np.ravel_multi_index(cell + (0,), shp)
        picks += list(range(base, base + shp[-1]))
    fd = central_diff(f, x0, h=h, coords=picks)
    worst = rel_err(g[picks], fd[picks])
    for _ in range(directions):
        v = rng.normal(size=x0.size)
        num = (f(x0 + h * v) - f(x0 - h * v)) / (2 * h)
        worst = max(worst, abs(num - g @ v) / max(abs(num), abs(g @ v), 1e-12))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_phantom_model():
    """The acceptance training run, shared by every test that needs a fitted model."""
    import time

    from threadpoolctl import threadpool_limits

    from brainparc.toy import TrainConfig, best_model, phantom_dataset, phantom_tree, train

    tree = phantom_tree()
    config = TrainConfig(seed=42)
    train_set = phantom_dataset(20, 42, 32, tree)
    val_set = phantom_dataset(5, 43, 32, tree)
    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        state = train(train_set, val_set, tree, config)
        elapsed = time.perf_counter() - t0
    return {"tree": tree, "state": state, "model": best_model(state, tree), "val": val_set, "seconds": elapsed}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
