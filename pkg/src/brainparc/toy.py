"""Desk-scale training: a tiny shared 2D conv scorer, Adam and synthetic phantoms.

The scorer is ``scores = W2 @ tanh(conv_kxk(x) + b1) + b2`` applied with zero
"same" padding, one parameter set for all three orientations.  Gradients are
derived by hand.  Training draws orthogonal slice triples that share one
voxel and minimises :func:`brainparc.fusion.total_loss`.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .augment import AugmentConfig, random_augment
from .errors import DivergenceDetected, ModelShapeMismatch, ShapeMismatch
from .fusion import PlanarBatch, distance_weights, plane_weights, total_loss, weak_targets
from .hierarchy import LabelTree, encode_targets
from .nifti import LabelVolume, Volume

log = logging.getLogger(__name__)

MODEL_MAGIC = b"BPMODEL\x00"
MODEL_VERSION = 1
PARAM_NAMES = ("conv_w", "conv_b", "proj_w", "proj_b", "plane")


# --------------------------------------------------------------------------
# backbone


def init_params(n_nodes, channels=8, kernel=3, rng=None):
    rng = np.random.default_rng(rng)
    return {
        "conv_w": rng.normal(0.0, 1.0 / kernel, size=(channels, kernel, kernel)),
        "conv_b": rng.normal(0.0, 0.5, size=channels),
        "proj_w": rng.normal(0.0, 1.0 / math.sqrt(channels), size=(n_nodes, channels)),
        "proj_b": np.zeros(n_nodes),
        "plane": np.zeros(3),
    }


def forward(params, x):
    """Raw node scores ``(H, W, K)`` for one 2D slice, plus a cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    kernel = params["conv_w"].shape[-1]
    if x.ndim != 2 or min(x.shape) < kernel:
        raise ShapeMismatch(f"slice {x.shape} smaller than kernel {kernel}")
    r = kernel // 2
    patches = sliding_window_view(np.pad(x, r), (kernel, kernel))
    hidden = np.tanh(np.einsum("hwab,cab->hwc", patches, params["conv_w"]) + params["conv_b"])
    scores = hidden @ params["proj_w"].T + params["proj_b"]
    return scores, (patches, hidden)


def backward(params, cache, grad_scores):
    """Parameter gradients given ``dL/dscores``."""
    patches, hidden = cache
    grad_scores = np.asarray(grad_scores)
    if grad_scores.shape[:2] != hidden.shape[:2]:
        raise ShapeMismatch(f"gradient {grad_scores.shape} does not match activations {hidden.shape}")
    g_hidden = grad_scores @ params["proj_w"]
    g_pre = g_hidden * (1.0 - hidden * hidden)
    return {
        "conv_w": np.einsum("hwab,hwc->cab", patches, g_pre),
        "conv_b": g_pre.sum(axis=(0, 1)),
        "proj_w": np.einsum("hwk,hwc->kc", grad_scores, hidden),
        "proj_b": grad_scores.sum(axis=(0, 1)),
    }


class ToyModel:
    """Inference wrapper around a parameter dict."""

    def __init__(self, params, tree_digest=""):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.tree_digest = tree_digest

    @property
    def n_nodes(self):
        return self.params["proj_w"].shape[0]

    @property
    def plane_weights(self):
        return plane_weights(self.params["plane"])

    @property
    def parameter_count(self):
        return int(sum(v.size for v in self.params.values()))

    def score_slice(self, x):
        return forward(self.params, x)[0]

    def save(self, path):
        header = {
            "version": MODEL_VERSION,
            "tree_sha256": self.tree_digest,
            "arrays": [[name, list(self.params[name].shape)] for name in PARAM_NAMES],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
            fh.write(blob)
            for name in PARAM_NAMES:
                fh.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, tree: LabelTree | None = None):
        raw = Path(path).read_bytes()
        if raw[:8] != MODEL_MAGIC:
            raise ModelShapeMismatch(f"{path} is not a model file")
        version, n = struct.unpack_from("<II", raw, 8)
        if version != MODEL_VERSION:
            raise ModelShapeMismatch(f"unsupported model version {version}")
        header = json.loads(raw[16 : 16 + n])
        offset = 16 + n
        params = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
        model = cls(params, header["tree_sha256"])
        if tree is not None:
            if model.n_nodes != tree.size:
                raise ModelShapeMismatch(f"model scores {model.n_nodes} nodes, tree has {tree.size}")
            if model.tree_digest and model.tree_digest != tree.digest():
                raise ModelShapeMismatch("model was trained on a different label tree")
        return model


# --------------------------------------------------------------------------
# optimiser


@dataclass
class Schedule:
    """Early stopping and step-wise learning-rate decay, counted in iterations."""

    max_iters: int = 2000
    patience_iters: int = 160
    lr_drop_factor: float = 0.9
    lr_drop_period: int = 80

    def __post_init__(self):
        if min(self.max_iters, self.patience_iters, self.lr_drop_period) <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("schedule values must be positive")
        if self.patience_iters > self.max_iters:
            raise ValueError("patience cannot exceed max_iters")

    def lr(self, base, iteration):
        return base * self.lr_drop_factor ** (iteration // self.lr_drop_period)


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    iteration: int = 0
    best_params: dict | None = None
    best_score: float = -math.inf
    best_iteration: int = 0
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)

    @classmethod
    def create(cls, params):
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()})


def adam_step(state: TrainState, grads, lr, l2, beta1=0.9, beta2=0.99, eps=1e-8) -> TrainState:
    """One Adam update with bias correction; ``l2 * theta`` is added to each gradient."""
    t = state.iteration + 1
    params, m, v = {}, {}, {}
    for name, theta in state.params.items():
        g = grads.get(name)
        g = l2 * theta if g is None else np.asarray(g) + l2 * theta
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**t)
        v_hat = v[name] / (1.0 - beta2**t)
        params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return replace(state, params=params, m=m, v=v, iteration=t)


# --------------------------------------------------------------------------
# phantoms


def phantom_tree():
    """Background, cavity shell and a brain node with three inner structures."""
    return LabelTree.from_parents(
        {0: None, 1: None, 2: None, 3: 2, 4: 2, 5: 2},
        {0: "background", 1: "cranial cavity", 2: "brain", 3: "cortex", 4: "white matter", 5: "ventricle"},
    )


def _phantom_roles(tree: LabelTree):
    """Pick (background, cavity, [structures]) ids from a tree's top level."""
    top = [tree.ids[k] for k in tree.root_children]
    leaves = [int(i) for i in top if not tree.children[tree.index[int(i)]] and int(i) != 0]
    inner = [int(i) for i in top if tree.children[tree.index[int(i)]]]
    if 0 not in tree.index or not leaves or not inner:
        raise ValueError("tree needs background 0, a top-level cavity leaf and a top-level brain node")
    brain = tree.index[inner[0]]
    structures = [int(tree.ids[k]) for k in tree.frontier if tree.path[k, brain] and k != brain]
    if len(structures) < 3:
        raise ValueError("phantoms need at least three frontier structures under the brain node")
    return 0, leaves[0], structures[:3]


PHANTOM_INTENSITY = {"cavity": 0.35, "rim": 0.6, "core": 0.85, "ventricle": 0.15}


def generate_phantom(seed, side=32, tree: LabelTree | None = None, noise_sd=0.03):
    """Nested-ellipsoid head phantom as ``(Volume, LabelVolume)``.

    An outer ellipsoid shell is the cranial cavity; the brain inside it is a
    rim structure around a core structure holding a small ventricle.
    """
    if side < 16:
        raise ValueError("side must be at least 16")
    tree = tree or phantom_tree()
    _, cavity, (rim, core, ventricle) = _phantom_roles(tree)
    rng = np.random.default_rng(seed)
    center = side / 2.0 - 0.5 + rng.uniform(-0.04, 0.04, size=3) * side
    outer = rng.uniform(0.34, 0.42, size=3) * side
    shell = 0.1 * side
    brain = outer - shell
    vent_center = center + rng.uniform(-0.05, 0.05, size=3) * side
    vent = rng.uniform(0.1, 0.15, size=3) * side

    g = np.stack(np.meshgrid(*[np.arange(side, dtype=np.float64)] * 3, indexing="ij"))

    def radius(c, r):
        return np.sqrt(sum(((g[a] - c[a]) / r[a]) ** 2 for a in range(3)))

    labels = np.zeros((side,) * 3, dtype=np.int32)
    image = np.zeros((side,) * 3)
    r_outer, r_brain, r_vent = radius(center, outer), radius(center, brain), radius(vent_center, vent)
    regions = [
        (r_outer <= 1, cavity, "cavity"),
        (r_brain <= 1, rim, "rim"),
        (r_brain <= 0.7, core, "core"),
        (r_vent <= 1, ventricle, "ventricle"),
    ]
    for mask, label, key in regions:
        labels[mask] = label
        image[mask] = PHANTOM_INTENSITY[key]
    image = np.clip(image + rng.normal(0.0, noise_sd, size=image.shape), 0.0, 1.0)
    return Volume.from_array(image), LabelVolume.from_array(labels)


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    has_cavity: bool = True


def phantom_dataset(n, seed, side=32, tree=None, missing_cavity_fraction=0.0):
    """``n`` phantoms seeded from ``seed``; some may have cavity labels erased."""
    tree = tree or phantom_tree()
    _, cavity, _ = _phantom_roles(tree)
    seeds = np.random.SeedSequence(seed).generate_state(n)
    rng = np.random.default_rng(seed)
    out = []
    for s in seeds:
        img, lab = generate_phantom(int(s), side, tree)
        labels = lab.data
        has_cavity = not rng.random() < missing_cavity_fraction
        if not has_cavity:
            labels = np.where(labels == cavity, 0, labels)
        out.append(Sample(img.data, labels, has_cavity))
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    seed: int = 42
    lr: float = 1e-2
    l2: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    triples_per_batch: int = 4
    channels: int = 8
    kernel: int = 3
    eval_every: int = 20
    consistency: bool = True
    ancestors: bool = True
    augment_prob: float = 0.0
    weak_sigma: float = math.sqrt(10.0)
    schedule: Schedule = field(default_factory=Schedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        if "schedule" in raw:
            raw["schedule"] = Schedule(**raw["schedule"])
        if "augment" in raw:
            raw["augment"] = AugmentConfig(**raw["augment"])
        return cls(**raw)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


def sample_targets(sample: Sample, tree: LabelTree, config: TrainConfig):
    if sample.has_cavity or not np.any(sample.labels):
        return encode_targets(sample.labels, tree, ancestors=config.ancestors)
    _, cavity, _ = _phantom_roles(tree)
    w = distance_weights(sample.labels, config.weak_sigma)
    return weak_targets(sample.labels, w, tree, cavity, ancestors=config.ancestors)


def _foreground_indices(labels):
    fg = labels != 0
    idx = [np.nonzero(fg.any(axis=tuple(b for b in range(3) if b != a)))[0] for a in range(3)]
    return [ix if len(ix) else np.arange(labels.shape[a]) for a, ix in enumerate(idx)]


def triple_loss(params, image, targets, index, tree, consistency=True):
    """Loss and parameter gradients for one orthogonal slice triple through ``index``."""
    i, j, k = index
    slices = {"axial": image[:, :, k], "coronal": image[:, j, :], "sagittal": image[i, :, :]}
    tslices = (targets[:, :, k], targets[:, j, :], targets[i, :, :])
    outs = {name: forward(params, sl) for name, sl in slices.items()}
    batch = PlanarBatch(outs["axial"][0], outs["coronal"][0], outs["sagittal"][0], (i, j, k))
    res = total_loss(batch, params["plane"], tslices, tree, consistency=consistency)
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    for name, g in (("axial", res.grad_axial), ("coronal", res.grad_coronal), ("sagittal", res.grad_sagittal)):
        for key, val in backward(params, outs[name][1], g).items():
            grads[key] += val
    grads["plane"] = res.grad_weight_params
    return res.value, grads


def validation_dsc(model, samples, tree):
    """Mean frontier DSC (background excluded) with score fusion over ``samples``."""
    from .inference import segment_volume
    from .metrics import region_report

    scores = []
    for s in samples:
        pred = segment_volume(s.image, model, tree, mode="fusion")
        report = region_report(pred.data, s.labels, tree)
        scores.append(report.summary["dsc_mean"])
    return float(np.mean(scores))


def train(train_set, val_set, tree: LabelTree, config: TrainConfig | None = None, validate=None):
    """Fit the toy backbone and plane weights; returns the final :class:`TrainState`.

    ``validate(model) -> score`` (higher is better) defaults to mean
    validation DSC.  It runs every ``config.eval_every`` iterations; training
    stops once ``schedule.patience_iters`` pass without improvement.  The best
    parameters are kept in ``state.best_params``.
    """
    config = config or TrainConfig()
    if not train_set:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    params = init_params(tree.size, config.channels, config.kernel, rng)
    state = TrainState.create(params)
    if validate is None:
        def validate(model):
            return validation_dsc(model, val_set, tree)

    cached_targets = [sample_targets(s, tree, config) for s in train_set]
    fg_index = [_foreground_indices(s.labels) for s in train_set]
    sched = config.schedule
    digest = tree.digest()

    while state.iteration < sched.max_iters:
        total = 0.0
        grads = {name: np.zeros_like(v) for name, v in state.params.items()}
        for _ in range(config.triples_per_batch):
            n = int(rng.integers(len(train_set)))
            sample, targets, fg = train_set[n], cached_targets[n], fg_index[n]
            if config.augment_prob > 0 and rng.random() < config.augment_prob:
                img, lab, _ = random_augment(sample.image, sample.labels, config.augment, rng)
                sample = Sample(img, lab, sample.has_cavity)
                targets = sample_targets(sample, tree, config)
                fg = _foreground_indices(sample.labels)
            index = tuple(int(rng.choice(ix)) for ix in fg)
            value, g = triple_loss(state.params, sample.image, targets, index, tree, config.consistency)
            total += value
            for key in grads:
                grads[key] += g[key]
        scale = 1.0 / config.triples_per_batch
        grads = {k: v * scale for k, v in grads.items()}
        loss = total * scale
        if not math.isfinite(loss):
            raise DivergenceDetected(f"loss became {loss} at iteration {state.iteration}")
        state.history.append(loss)
        lr = sched.lr(config.lr, state.iteration)
        state = adam_step(state, grads, lr, config.l2, config.beta1, config.beta2, config.eps)

        if state.iteration % config.eval_every == 0 or state.iteration == sched.max_iters:
            score = float(validate(ToyModel(state.params, digest)))
            state.val_history.append((state.iteration, score))
            if score > state.best_score:
                state.best_score, state.best_iteration = score, state.iteration
                state.best_params = {k: v.copy() for k, v in state.params.items()}
            log.debug("iter %d loss %.4f val %.4f", state.iteration, loss, score)
            if state.iteration - state.best_iteration >= sched.patience_iters:
                log.info("early stop at iteration %d (best %d)", state.iteration, state.best_iteration)
                break
    if state.best_params is None:
        state.best_params = {k: v.copy() for k, v in state.params.items()}
    return state


def best_model(state: TrainState, tree: LabelTree) -> ToyModel:
    return ToyModel(state.best_params, tree.digest())
