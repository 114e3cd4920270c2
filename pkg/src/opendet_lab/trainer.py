"""Toy open-set training harness.

Proposals are synthetic feature vectors drawn from Gaussian class clusters.
The model has a shared trunk (FC, ReLU, FC) producing the classification
feature; a cosine classifier scores it over known + unknown + background,
and a contrastive head (FC, ReLU, FC, L2-norm) branches off the same
feature during training only. Backpropagation is written out by hand.
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .latent_core import ClassSpace, DegenerateVectorError, softmax
from .losses import ICConfig, UPLConfig, gamma_at, joint_loss
from .memory_bank import MemoryBank, MemoryBankConfig, Proposal, ic_anchor_mask
from .mining import MiningConfig, mine_hard_examples
from .openset_eval.metrics import DetectionRecord, EvalReport, GroundTruthRecord, evaluate, latent_statistics


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------- world

@dataclass
class SyntheticWorldConfig:
    num_known: int = 5
    num_unknown_clusters: int = 3
    feature_dim: int = 2
    cluster_means: np.ndarray | None = None  # (K + U, feature_dim); generated when None
    mean_radius: float = 4.0
    cluster_stddev: float = 0.5
    fg_iou_range: tuple = (0.5, 1.0)
    bg_iou_range: tuple = (0.0, 0.3)
    bg_fraction: float = 0.25
    bg_stddev: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.cluster_means is None:
            self.cluster_means = place_cluster_means(
                self.num_known + self.num_unknown_clusters, self.feature_dim,
                self.mean_radius, self.seed)
        self.cluster_means = np.asarray(self.cluster_means, dtype=np.float64)
        n = self.num_known + self.num_unknown_clusters
        if self.cluster_means.shape != (n, self.feature_dim):
            raise ValueError(f"cluster_means must have shape ({n}, {self.feature_dim})")
        if len(np.unique(self.cluster_means, axis=0)) != n:
            raise ValueError("cluster means must be pairwise distinct")
        if not 0.0 <= self.bg_fraction <= 1.0:
            raise ValueError("bg_fraction must lie in [0, 1]")

    @property
    def known_means(self) -> np.ndarray:
        return self.cluster_means[: self.num_known]

    @property
    def unknown_means(self) -> np.ndarray:
        return self.cluster_means[self.num_known:]


def place_cluster_means(n: int, dim: int, radius: float, seed: int) -> np.ndarray:
    """``n`` points on a sphere of ``radius``, spread by farthest-point picking."""
    rng = np.random.default_rng([seed, 7919])
    if dim == 2:
        # evenly spaced angles with a random rotation, known/unknown interleaved
        # by a random permutation
        theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(n) / n
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return radius * pts[rng.permutation(n)]
    pool = rng.standard_normal((64 * n, dim))
    pool /= np.linalg.norm(pool, axis=1, keepdims=True)
    chosen = [0]
    d = np.linalg.norm(pool - pool[0], axis=1)
    for _ in range(n - 1):
        j = int(np.argmax(d))
        chosen.append(j)
        d = np.minimum(d, np.linalg.norm(pool - pool[j], axis=1))
    return radius * pool[rng.permutation(chosen)]


@dataclass
class ProposalBatch:
    features: np.ndarray
    labels: np.ndarray
    ious: np.ndarray
    is_foreground: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def to_proposals(self) -> list[Proposal]:
        return [Proposal(f, int(c), float(i), bool(fg))
                for f, c, i, fg in zip(self.features, self.labels, self.ious, self.is_foreground)]


def generate_batch(world: SyntheticWorldConfig, rng: np.random.Generator, size: int) -> ProposalBatch:
    """Training draw: known-cluster foreground plus background, never unknowns."""
    space = ClassSpace(world.num_known)
    n_bg = int(round(world.bg_fraction * size))
    n_fg = size - n_bg
    cls = rng.integers(0, world.num_known, size=n_fg)
    fg = world.known_means[cls] + world.cluster_stddev * rng.standard_normal((n_fg, world.feature_dim))
    bg = world.bg_stddev * rng.standard_normal((n_bg, world.feature_dim))
    ious = np.concatenate([rng.uniform(*world.fg_iou_range, size=n_fg),
                           rng.uniform(*world.bg_iou_range, size=n_bg)])
    return ProposalBatch(
        np.concatenate([fg, bg]),
        np.concatenate([cls, np.full(n_bg, space.background_index)]).astype(np.int64),
        ious,
        np.concatenate([np.ones(n_fg, bool), np.zeros(n_bg, bool)]),
    )


@dataclass
class OpenSetDraw:
    features: np.ndarray
    labels: np.ndarray  # known index, unknown index (K) or background (K+1)
    cluster: np.ndarray  # generating cluster, -1 for background


def generate_open_set_draw(world: SyntheticWorldConfig, rng: np.random.Generator,
                           per_cluster: int, num_background: int) -> OpenSetDraw:
    space = ClassSpace(world.num_known)
    n_clusters = len(world.cluster_means)
    cluster = np.repeat(np.arange(n_clusters), per_cluster)
    x = world.cluster_means[cluster] + world.cluster_stddev * rng.standard_normal(
        (len(cluster), world.feature_dim))
    labels = np.where(cluster < world.num_known, cluster, space.unknown_index)
    bg = world.bg_stddev * rng.standard_normal((num_background, world.feature_dim))
    return OpenSetDraw(np.concatenate([x, bg]),
                       np.concatenate([labels, np.full(num_background, space.background_index)]),
                       np.concatenate([cluster, np.full(num_background, -1)]))


# ---------------------------------------------------------------- model

@dataclass
class TrainerConfig:
    total_iterations: int = 10000
    warmup_iterations: int = 100
    learning_rate: float = 0.05
    batch_size: int = 64
    hidden_dim: int = 32
    latent_dim: int = 16  # classification feature F(x)
    head_hidden_dim: int = 16
    embed_dim: int = 128
    scale: float = 20.0
    mask_unknown_without_upl: bool = True
    upl: UPLConfig = field(default_factory=UPLConfig)
    ic: ICConfig = field(default_factory=ICConfig)
    bank: MemoryBankConfig = field(default_factory=MemoryBankConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    eval_per_cluster: int = 200
    eval_background: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.warmup_iterations < self.total_iterations:
            raise ValueError("warmup_iterations must be smaller than total_iterations")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @property
    def upl_enabled(self) -> bool:
        return self.upl.beta > 0

    @property
    def cfl_enabled(self) -> bool:
        return self.ic.gamma_0 > 0


PARAM_ORDER = ("W0", "b0", "W1", "b1", "Wc", "H1", "c1", "H2", "c2")


@dataclass
class ToyModel:
    params: dict
    num_known: int
    scale: float = 20.0
    unknown_active: bool = True

    @classmethod
    def initialize(cls, input_dim: int, num_known: int, config: TrainerConfig,
                   rng: np.random.Generator) -> "ToyModel":
        h, m, hh, d = config.hidden_dim, config.latent_dim, config.head_hidden_dim, config.embed_dim
        C = num_known + 2

        def he(out, inp):
            return rng.standard_normal((out, inp)) * np.sqrt(2.0 / inp)

        params = {
            "W0": he(h, input_dim), "b0": np.zeros(h),
            "W1": he(m, h), "b1": np.zeros(m),
            "Wc": rng.standard_normal((C, m)),
            "H1": he(hh, m), "c1": np.zeros(hh),
            "H2": he(d, hh), "c2": np.zeros(d),
        }
        active = not (config.mask_unknown_without_upl and not config.upl_enabled)
        return cls(params, num_known, config.scale, active)

    @property
    def space(self) -> ClassSpace:
        return ClassSpace(self.num_known)

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.num_known,
                        self.scale, self.unknown_active)

    # -- forward

    def features(self, x):
        P = self.params
        a0 = x @ P["W0"].T + P["b0"]
        h = np.maximum(a0, 0.0)
        f = h @ P["W1"].T + P["b1"]
        return a0, h, f

    def logits_from_features(self, f):
        Wc = self.params["Wc"]
        fn = np.linalg.norm(f, axis=1, keepdims=True)
        wn = np.linalg.norm(Wc, axis=1, keepdims=True)
        if np.any(fn == 0) or np.any(wn == 0):
            raise DegenerateVectorError("zero-norm classification feature or class weight")
        fh, wh = f / fn, Wc / wn
        logits = self.scale * (fh @ wh.T)
        if not self.unknown_active:
            logits[:, self.space.unknown_index] = -np.inf
        return logits, (fn, wn, fh, wh)

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a0, h, f = self.features(x)
        logits, cos_cache = self.logits_from_features(f)
        return logits, (x, a0, h, f, cos_cache)

    def head(self, f):
        P = self.params
        e1 = f @ P["H1"].T + P["c1"]
        r = np.maximum(e1, 0.0)
        u = r @ P["H2"].T + P["c2"]
        un = np.linalg.norm(u, axis=1, keepdims=True)
        if np.any(un == 0):
            raise DegenerateVectorError("zero-norm contrastive head output")
        z = u / un
        return z, (f, e1, r, un, z)

    def latent(self, x) -> np.ndarray:
        """Classification features F(x) before the cosine normalisation."""
        _, _, f = self.features(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return f

    # -- backward

    def backward(self, cache, grad_logits, head_cache=None, grad_z=None, head_rows=None) -> dict:
        P = self.params
        x, a0, h, f, (fn, wn, fh, wh) = cache
        G = self.scale * grad_logits
        if not self.unknown_active:
            G = G.copy()
            G[:, self.space.unknown_index] = 0.0
        g_fh = G @ wh
        g_f = (g_fh - np.sum(g_fh * fh, axis=1, keepdims=True) * fh) / fn
        g_wh = G.T @ fh
        g_Wc = (g_wh - np.sum(g_wh * wh, axis=1, keepdims=True) * wh) / wn
        grads = {"Wc": g_Wc}

        if head_cache is not None and grad_z is not None and len(grad_z):
            fs, e1, r, un, z = head_cache
            g_u = (grad_z - np.sum(grad_z * z, axis=1, keepdims=True) * z) / un
            grads["H2"] = g_u.T @ r
            grads["c2"] = g_u.sum(axis=0)
            g_e1 = (g_u @ P["H2"]) * (e1 > 0)
            grads["H1"] = g_e1.T @ fs
            grads["c1"] = g_e1.sum(axis=0)
            g_f = g_f.copy()
            np.add.at(g_f, head_rows, g_e1 @ P["H1"])
        else:
            for k in ("H2", "c2", "H1", "c1"):
                grads[k] = np.zeros_like(P[k])

        grads["W1"] = g_f.T @ h
        grads["b1"] = g_f.sum(axis=0)
        g_a0 = (g_f @ P["W1"]) * (a0 > 0)
        grads["W0"] = g_a0.T @ x
        grads["b0"] = g_a0.sum(axis=0)
        return grads


# ---------------------------------------------------------------- training

@dataclass
class StepResult:
    iteration: int
    ce: float
    up: float
    ic: float
    gamma_t: float
    up_weight: float
    loss: float
    num_mined: int
    num_anchors: int


def compute_batch_loss(model: ToyModel, bank: MemoryBank | None, batch: ProposalBatch,
                       config: TrainerConfig, t: int, up_indices=None, mining_rng=None):
    """Joint loss and parameter gradients for one batch, without updating.

    When ``up_indices`` is None and UP is active, hard examples are mined
    from the current forward pass.
    """
    logits, cache = model.forward(batch.features)
    up_active = config.upl_enabled and t >= config.warmup_iterations
    if up_active and up_indices is None:
        probs = softmax(logits)
        up_indices = mine_hard_examples(probs, batch.is_foreground, config.mining, mining_rng)
    if not up_active:
        up_indices = np.zeros(0, dtype=np.int64)

    gamma_t = gamma_at(t, config.total_iterations, config.ic.gamma_0)
    anchors = z = head_cache = None
    if config.cfl_enabled:
        anchors = np.flatnonzero(ic_anchor_mask(batch.ious, batch.is_foreground, config.bank))
        f = cache[3]
        z, head_cache = model.head(f[anchors])

    jl = joint_loss(logits, batch.labels, config.upl, config.ic, t, config.total_iterations,
                    config.warmup_iterations, up_indices=up_indices, anchors=z,
                    anchor_classes=None if anchors is None else batch.labels[anchors], bank=bank)
    grads = model.backward(cache, jl.grad_logits, head_cache,
                           jl.grad_embeddings if gamma_t > 0 else None, anchors)
    return jl, grads, {"anchors": anchors, "embeddings": z, "up_indices": up_indices}


def train_step(model: ToyModel, bank: MemoryBank | None, batch: ProposalBatch,
               config: TrainerConfig, t: int, mining_rng=None) -> StepResult:
    """One gradient-descent update (in place) followed by the bank update."""
    if not 0 <= t < config.total_iterations:
        raise ValueError(f"iteration {t} outside [0, {config.total_iterations})")
    jl, grads, aux = compute_batch_loss(model, bank, batch, config, t, mining_rng=mining_rng)
    if not np.isfinite(jl.value):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {t}",
            {"iteration": t, "ce": jl.ce, "up": jl.up, "ic": jl.ic, "gamma_t": jl.gamma_t,
             "param_norms": {k: float(np.linalg.norm(v)) for k, v in model.params.items()}})
    lr = config.learning_rate
    with np.errstate(over="ignore", invalid="ignore"):
        for k, g in grads.items():
            model.params[k] -= lr * g
    bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
    if bad:
        raise TrainingDivergedError(
            f"non-finite parameters {bad} after iteration {t}",
            {"iteration": t, "ce": jl.ce, "up": jl.up, "ic": jl.ic, "gamma_t": jl.gamma_t,
             "grad_norms": {k: float(np.linalg.norm(g)) for k, g in grads.items()}})
    if bank is not None and aux["anchors"] is not None and len(aux["anchors"]):
        a = aux["anchors"]
        bank.enqueue_arrays(aux["embeddings"], batch.labels[a], batch.ious[a], batch.is_foreground[a])
    return StepResult(t, jl.ce, jl.up, jl.ic, jl.gamma_t, jl.up_weight, jl.value,
                      len(aux["up_indices"]), 0 if aux["anchors"] is None else len(aux["anchors"]))


TELEMETRY_HEADER = "iteration,L_CE,L_UP,L_IC,gamma_t,up_weight"


def telemetry_csv(steps: list[StepResult]) -> str:
    rows = [TELEMETRY_HEADER]
    rows += [f"{s.iteration},{s.ce!r},{s.up!r},{s.ic!r},{s.gamma_t!r},{s.up_weight!r}" for s in steps]
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- inference

@dataclass
class Prediction:
    classes: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    is_background: np.ndarray


def predict_from_probs(probs, num_known: int) -> Prediction:
    """Argmax over every class; ties resolve to the lowest class index."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    cls = np.argmax(probs, axis=1)
    return Prediction(cls, probs[np.arange(len(cls)), cls], probs,
                      cls == ClassSpace(num_known).background_index)


def infer(model: ToyModel, features) -> Prediction:
    """Open-set prediction; the contrastive head is not used."""
    logits, _ = model.forward(features)
    return predict_from_probs(softmax(logits), model.num_known)


# ---------------------------------------------------------------- experiment

@dataclass
class ExperimentResult:
    model: ToyModel
    bank: MemoryBank | None
    report: EvalReport
    telemetry: list
    close_set_accuracy: float
    unknown_as_known: int
    latent_init: tuple
    latent_final: tuple
    test_draw: OpenSetDraw = field(repr=False, default=None)


def evaluate_model(model: ToyModel, draw: OpenSetDraw) -> tuple[EvalReport, float, int]:
    """Score a held-out draw; every proposal is one image with a unit box."""
    space = model.space
    pred = infer(model, draw.features)
    box = (0.0, 0.0, 1.0, 1.0)
    gts = [GroundTruthRecord(i, int(c), box, bool(c == space.unknown_index), i)
           for i, c in enumerate(draw.labels) if c != space.background_index]
    dets = [DetectionRecord(i, int(c), float(s), box, i)
            for i, (c, s, bg) in enumerate(zip(pred.classes, pred.scores, pred.is_background)) if not bg]
    report = evaluate(gts, dets, range(space.num_known), space.unknown_index)
    known = draw.labels < space.num_known
    acc = float(np.mean(pred.classes[known] == draw.labels[known]))
    unk = draw.labels == space.unknown_index
    unknown_as_known = int(np.sum(pred.classes[unk] < space.num_known))
    return report, acc, unknown_as_known


def run_experiment(world: SyntheticWorldConfig, config: TrainerConfig, progress=None) -> ExperimentResult:
    """Train for ``total_iterations`` steps and evaluate on a fresh open-set draw."""
    root = np.random.SeedSequence([config.seed, world.seed])
    init_ss, data_ss, mine_ss, eval_ss = root.spawn(4)
    model = ToyModel.initialize(world.feature_dim, world.num_known, config, np.random.default_rng(init_ss))
    bank = MemoryBank(world.num_known, config.embed_dim, config.bank) if config.cfl_enabled else None
    data_rng = np.random.default_rng(data_ss)
    mine_rng = np.random.default_rng(mine_ss)
    draw = generate_open_set_draw(world, np.random.default_rng(eval_ss),
                                  config.eval_per_cluster, config.eval_background)
    known = draw.labels < world.num_known
    latent_init = latent_statistics(model.latent(draw.features[known]), draw.labels[known])

    steps = []
    for t in range(config.total_iterations):
        batch = generate_batch(world, data_rng, config.batch_size)
        steps.append(train_step(model, bank, batch, config, t, mine_rng))
        if progress is not None:
            progress(steps[-1])

    report, acc, unk_known = evaluate_model(model, draw)
    latent_final = latent_statistics(model.latent(draw.features[known]), draw.labels[known])
    report.intra_class_variance, report.inter_class_distance = latent_final
    return ExperimentResult(model, bank, report, steps, acc, unk_known, latent_init, latent_final, draw)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ODLCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ToyModel, path) -> bytes:
    """Write ``model`` as a versioned little-endian binary; returns the bytes."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    meta = json.dumps({"num_known": model.num_known, "scale": model.scale,
                       "unknown_active": model.unknown_active}, sort_keys=True).encode()
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(PARAM_ORDER)))
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    data = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    meta = json.loads(data[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return ToyModel(params, meta["num_known"], meta["scale"], meta["unknown_active"])


def config_snapshot(world: SyntheticWorldConfig, config: TrainerConfig) -> dict:
    """Plain-data view of both configs (enums as strings, arrays as lists)."""
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
            return obj.value
        return obj
    return {"world": clean(asdict(copy.deepcopy(world))), "trainer": clean(asdict(config))}
