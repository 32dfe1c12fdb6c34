"""Triplet training with geographic mining.

For every training query the positive is the geographically valid map window
(within ``pos_radius`` metres) whose cached embedding is nearest to the query
embedding; negatives are drawn uniformly among map windows farther than
``pos_radius``.  Embedding caches are refreshed at the start of each epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from . import retrieval
from .errors import ConfigError, UsageError
from .gpr_sim import GprSequence
from .network import EDENet, NetConfig, normalize_window, sequence_windows
from .numerics import Param, Tensor

log = logging.getLogger(__name__)


class MiningError(ValueError):
    """No valid positive or negative exists for a query."""


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    learning_rate: float = 1e-4
    negatives: int = 10
    epochs: int = 1
    seed: int = 0
    batch_queries: int = 4
    max_steps: int | None = None
    pos_radius: float = 3.0
    train_fraction: float = 0.7

    def __post_init__(self):
        if not (self.margin > 0 and self.learning_rate > 0 and self.pos_radius > 0):
            raise ConfigError("margin, learning_rate and pos_radius must be > 0")
        if self.negatives < 1 or self.batch_queries < 1:
            raise ConfigError("negatives and batch_queries must be >= 1")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("epochs and max_steps must be >= 0")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    net_config: NetConfig
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def of(cls, net: EDENet, step: int = 0, **extra) -> "Checkpoint":
        return cls({k: p.data.copy() for k, p in net.named_params().items()}, net.cfg, step, extra)

    def build(self) -> EDENet:
        net = EDENet(self.net_config)
        net.load_state(self.tensors)
        return net


def mine_positive(query_embedding: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the candidate embedding nearest to the query; ties go to the lowest index."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or len(candidates) == 0:
        raise MiningError("no positive candidates")
    d = np.linalg.norm(candidates - np.asarray(query_embedding), axis=1)
    return int(np.argmin(d))


def triplet_loss(F_q: Tensor, F_p: Tensor, F_ns: Tensor, margin: float) -> Tensor:
    """``sum_n max(0, margin + d(q, p) - d(q, n))`` with Euclidean ``d``.

    ``F_ns`` is ``N x d``; the query and positive are ``d`` vectors.
    """
    if not (F_q.shape == F_p.shape and F_q.ndim == 1 and F_ns.ndim == 2 and F_ns.shape[1] == F_q.shape[0]):
        raise nx.DimensionError(f"triplet shapes q{F_q.shape} p{F_p.shape} n{F_ns.shape}")
    d_pos = nx.euclidean_distance(F_q, F_p)
    d_neg = nx.euclidean_distance(F_q, F_ns)
    return nx.relu((d_pos + margin) - d_neg).sum()


class Adam:
    """Adam with bias correction.  A step with any non-finite gradient is skipped."""

    def __init__(self, params: Sequence[Param], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            log.warning("non-finite gradient; step skipped")
            self.zero_grad()
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()
        return True


@dataclass
class WindowSet:
    windows: np.ndarray  # M x C x D x w, already RMS-normalized
    poses: np.ndarray    # M x 2, pose of the centre frame


def split_windows(seq: GprSequence, window: int, train_fraction: float) -> tuple[WindowSet, WindowSet]:
    """Windows lying entirely inside the leading ``train_fraction`` of frames, and inside the rest."""
    cut = int(round(train_fraction * seq.S))
    parts = []
    for lo, hi in ((0, cut), (cut, seq.S)):
        if hi - lo < window:
            raise UsageError(f"segment of {hi - lo} frames cannot hold a {window}-frame window")
        sub = GprSequence(seq.frames[lo:hi], seq.poses[lo:hi])
        w, centres = sequence_windows(sub, window)
        parts.append(WindowSet(normalize_window(w), sub.poses[centres]))
    return parts[0], parts[1]


def _embed(net: EDENet, windows: np.ndarray, batch: int = 64) -> np.ndarray:
    # training-mode normalization: a window whose features die mid-training maps to zero
    with nx.no_grad():
        return np.concatenate([net.forward(Tensor(windows[i:i + batch]), train=True).data
                               for i in range(0, len(windows), batch)])


def _ground(a: np.ndarray, poses: np.ndarray) -> np.ndarray:
    return np.linalg.norm(poses - a, axis=1)


def sample_triplets(q_pose: np.ndarray, q_emb: np.ndarray, map_poses: np.ndarray, map_emb: np.ndarray,
                    cfg: TrainConfig, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Positive index and negative indices into the map for one query."""
    g = _ground(q_pose, map_poses)
    pos_idx = np.flatnonzero(g <= cfg.pos_radius)
    neg_idx = np.flatnonzero(g > cfg.pos_radius)
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise MiningError(f"query at {q_pose.tolist()}: {len(pos_idx)} positives, {len(neg_idx)} negatives")
    p = int(pos_idx[mine_positive(q_emb, map_emb[pos_idx])])
    n = rng.choice(neg_idx, size=min(cfg.negatives, len(neg_idx)), replace=False)
    assert g[p] <= cfg.pos_radius and np.all(g[n] > cfg.pos_radius)
    return p, np.sort(n)


def batch_loss(net: EDENet, q_windows: np.ndarray, map_windows: np.ndarray,
               triplets: Sequence[tuple[int, int, np.ndarray]], margin: float) -> Tensor:
    """Mean per-query triplet loss; ``triplets`` holds (query, positive, negatives) indices."""
    q_ids = [t[0] for t in triplets]
    m_ids = sorted({int(i) for _, p, ns in triplets for i in (p, *ns)})
    slot = {m: i for i, m in enumerate(m_ids)}
    X = np.concatenate([q_windows[q_ids], map_windows[m_ids]])
    F = net.forward(Tensor(X), train=True)
    total = None
    for j, (_, p, ns) in enumerate(triplets):
        base = len(q_ids)
        neg_rows = [base + slot[int(n)] for n in ns]
        term = triplet_loss(F[j], F[base + slot[p]], F[neg_rows], margin)
        total = term if total is None else total + term
    return total * (1.0 / len(triplets))


@dataclass
class TrainResult:
    net: EDENet
    step: int
    log: list[dict]
    step_losses: list[float]
    skipped: int


@dataclass
class Scene:
    """Train and validation windows of one surveyed track (poses are only comparable within it)."""

    map_tr: WindowSet
    map_val: WindowSet
    q_tr: WindowSet
    q_val: WindowSet


def prepare_scene(map_seq: GprSequence, query_seq: GprSequence, window: int,
                  train_fraction: float) -> Scene:
    if map_seq.S != query_seq.S or not np.array_equal(map_seq.poses, query_seq.poses):
        raise UsageError("map and query sequences must share frame poses")
    if map_seq.frames.shape[1:] != query_seq.frames.shape[1:]:
        raise UsageError("map and query sequences differ in depth or channel count")
    return Scene(*split_windows(map_seq, window, train_fraction), *split_windows(query_seq, window, train_fraction))


def validation_recall(net: EDENet, scenes: Sequence[Scene], dist_thresh: float) -> float:
    """recall@1 of validation queries against their own scene's validation map, pooled."""
    hits = total = 0
    for sc in scenes:
        index = retrieval.DescriptorIndex(_embed(net, sc.map_val.windows), sc.map_val.poses)
        r = retrieval.evaluate_recall(index, _embed(net, sc.q_val.windows), sc.q_val.poses, (1,), dist_thresh)[1]
        hits += r * len(sc.q_val.windows)
        total += len(sc.q_val.windows)
    return hits / total


def train(pairs: Sequence[tuple[GprSequence, GprSequence]], cfg: TrainConfig, net_cfg: NetConfig,
          net: EDENet | None = None, on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on the leading split of every scene, report validation recall@1 after every epoch.

    ``pairs`` holds one ``(map, queries)`` pair per surveyed scene.  Each epoch
    visits every training query once, in shuffled batches of ``cfg.batch_queries``;
    training stops early after ``cfg.max_steps`` optimizer steps.
    """
    if not pairs:
        raise UsageError("training needs at least one (map, queries) pair")
    for m, _ in pairs:
        if (m.D, m.C) != (net_cfg.depth, net_cfg.channels):
            raise ConfigError(f"sequences are D={m.D}, C={m.C}; network expects "
                              f"D={net_cfg.depth}, C={net_cfg.channels}")
    scenes = [prepare_scene(m, q, net_cfg.window, cfg.train_fraction) for m, q in pairs]
    net = net if net is not None else EDENet(net_cfg, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), lr=cfg.learning_rate)
    queries = [(si, qi) for si, sc in enumerate(scenes) for qi in range(len(sc.q_tr.windows))]
    records: list[dict] = []
    step_losses: list[float] = []
    skipped = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
        map_emb = [_embed(net, sc.map_tr.windows) for sc in scenes]
        q_emb = [_embed(net, sc.q_tr.windows) for sc in scenes]
        order = rng.permutation(len(queries))
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_queries):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch: dict[int, list] = {}
            for j in order[lo:lo + cfg.batch_queries]:
                si, qi = queries[j]
                sc = scenes[si]
                try:
                    p, ns = sample_triplets(sc.q_tr.poses[qi], q_emb[si][qi], sc.map_tr.poses,
                                            map_emb[si], cfg, rng)
                except MiningError as exc:
                    log.warning("skipping query: %s", exc)
                    skipped += 1
                    continue
                batch.setdefault(si, []).append((qi, p, ns))
            if not batch:
                continue
            n_triplets = sum(len(t) for t in batch.values())
            loss = None
            for si, triplets in sorted(batch.items()):
                part = batch_loss(net, scenes[si].q_tr.windows, scenes[si].map_tr.windows, triplets, cfg.margin)
                part = part * (len(triplets) / n_triplets)
                loss = part if loss is None else loss + part
            if not math.isfinite(loss.item()):
                raise nx.NumericError(f"non-finite training loss at step {step}")
            loss.backward()
            opt.step()
            net.snap_to_float32()
            step += 1
            step_losses.append(loss.item())
            epoch_losses.append(loss.item())
        rec = {"epoch": epoch, "step": step,
               "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
               "val_recall@1": validation_recall(net, scenes, cfg.pos_radius)}
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return TrainResult(net, step, records, step_losses, skipped)


def dataset_loss(net: EDENet, map_seq: GprSequence, query_seq: GprSequence, cfg: TrainConfig,
                 window: int, seed: int = 0) -> float:
    """Mean triplet loss over all training queries with fixed seeded negatives."""
    map_tr, _ = split_windows(map_seq, window, cfg.train_fraction)
    q_tr, _ = split_windows(query_seq, window, cfg.train_fraction)
    map_emb, q_emb = _embed(net, map_tr.windows), _embed(net, q_tr.windows)
    rng = np.random.default_rng(seed)
    losses = []
    for qi in range(len(q_tr.windows)):
        try:
            p, ns = sample_triplets(q_tr.poses[qi], q_emb[qi], map_tr.poses, map_emb, cfg, rng)
        except MiningError:
            continue
        q, pe, ne = (Tensor(a) for a in (q_emb[qi], map_emb[p], map_emb[ns]))
        with nx.no_grad():
            losses.append(triplet_loss(q, pe, ne, cfg.margin).item())
    if not losses:
        raise MiningError("no query has both positives and negatives")
    return float(np.mean(losses))
