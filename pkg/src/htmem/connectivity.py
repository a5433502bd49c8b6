"""Connectivity scoring between observation pairs.

The primary model is a context-conditioned encoder with a bilinear form
trained contrastively: the true short-horizon successor of an anchor must
outscore candidates drawn from the same context (and optionally from the
generative model). The baseline classifier shares the architecture but is
trained with binary cross-entropy on near/far pair labels.

Scores are directed: logit(o_from -> o_to) = g(o_to)^T W g(o_from), and no
operation symmetrizes them.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (
    MlpParams,
    Tape,
    adam_init,
    adam_step,
    derived_seed,
    load_checkpoint,
    mlp_apply,
    mlp_init,
    pack_mlp_meta,
    save_checkpoint,
    sigmoid,
    unpack_mlp,
)
from .data import TransitionDataset, split_context_ids
from .world import BlockWorld

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CpcConfig:
    d: int = 16
    hidden: tuple = (64, 64)
    horizon: int = 5  # positive offsets k in 1..horizon
    n_candidates: int = 16  # 1 positive + N-1 negatives per anchor
    batch_anchors: int = 64
    phi: float = 0.25  # fraction of negatives taken from the generative model
    lr: float = 1e-3
    epochs: int = 25
    steps_per_epoch: int = 200
    val_batches: int = 20
    seed: int = 22


@dataclass
class SptmConfig:
    d: int = 16
    hidden: tuple = (64, 64)
    horizon: int = 5
    negative_offset: int | None = None  # defaults to 4 * horizon
    batch_pairs: int = 128
    phi: float = 0.25
    lr: float = 1e-3
    epochs: int = 25
    steps_per_epoch: int = 200
    val_batches: int = 20
    seed: int = 33

    @property
    def l(self) -> int:
        return 4 * self.horizon if self.negative_offset is None else self.negative_offset


class _BilinearScorer:
    """Shared scoring surface: encoder + bilinear matrix."""

    def encode(self, obs, ctx) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        ctx = np.asarray(ctx, dtype=float)
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (obs.shape[0], ctx.shape[0]))
        return mlp_apply(self.encoder, np.concatenate([obs, ctx], axis=1))

    def pairwise_logits(self, obs_matrix, ctx) -> np.ndarray:
        """L[i, j] = logit of the directed edge j -> i over all node pairs."""
        z = self.encode(obs_matrix, ctx)
        return z @ self.bilinear @ z.T

    def score_pair(self, o_from, o_to, ctx) -> float:
        z_from = self.encode(o_from, ctx)[0]
        z_to = self.encode(o_to, ctx)[0]
        return float(z_to @ self.bilinear @ z_from)


@dataclass
class ConnectivityModel(_BilinearScorer):
    encoder: MlpParams
    bilinear: np.ndarray  # (d, d), zero-initialized
    obs_dim: int
    ctx_dim: int
    d: int
    horizon: int = 5
    history: list = field(default_factory=list, repr=False)

    def parameters(self):
        return self.encoder.parameters() + [self.bilinear]

    def save(self, path):
        meta = [self.obs_dim, self.ctx_dim, self.d, self.horizon] + pack_mlp_meta(self.encoder)
        save_checkpoint(path, "CPCE", meta, self.parameters())

    @classmethod
    def load(cls, path) -> "ConnectivityModel":
        meta, flat = load_checkpoint(path, "CPCE")
        obs_dim, ctx_dim, d, horizon = meta[:4]
        encoder, _, f_off = unpack_mlp(meta, flat, 4, 0)
        if flat.size - f_off != d * d:
            raise ad.CheckpointError(f"{path}: bilinear block size mismatch")
        w = flat[f_off:].reshape(d, d).copy()
        return cls(encoder, w, obs_dim, ctx_dim, d, horizon)


@dataclass
class SptmClassifier(_BilinearScorer):
    encoder: MlpParams
    bilinear: np.ndarray
    obs_dim: int
    ctx_dim: int
    d: int
    horizon: int = 5
    negative_offset: int = 20
    history: list = field(default_factory=list, repr=False)

    def parameters(self):
        return self.encoder.parameters() + [self.bilinear]

    def probability(self, o_from, o_to, ctx) -> float:
        return float(sigmoid(self.score_pair(o_from, o_to, ctx)))

    def save(self, path):
        meta = [
            self.obs_dim,
            self.ctx_dim,
            self.d,
            self.horizon,
            self.negative_offset,
        ] + pack_mlp_meta(self.encoder)
        save_checkpoint(path, "SPTM", meta, self.parameters())

    @classmethod
    def load(cls, path) -> "SptmClassifier":
        meta, flat = load_checkpoint(path, "SPTM")
        obs_dim, ctx_dim, d, horizon, l = meta[:5]
        encoder, _, f_off = unpack_mlp(meta, flat, 5, 0)
        if flat.size - f_off != d * d:
            raise ad.CheckpointError(f"{path}: bilinear block size mismatch")
        w = flat[f_off:].reshape(d, d).copy()
        return cls(encoder, w, obs_dim, ctx_dim, d, horizon, l)


def connectivity_init(obs_dim, ctx_dim, cfg: CpcConfig) -> ConnectivityModel:
    encoder = mlp_init(
        [obs_dim + ctx_dim, *cfg.hidden, cfg.d], "relu", seed=derived_seed(cfg.seed, "enc")
    )
    return ConnectivityModel(
        encoder, np.zeros((cfg.d, cfg.d)), obs_dim, ctx_dim, cfg.d, cfg.horizon
    )


def sptm_init(obs_dim, ctx_dim, cfg: SptmConfig) -> SptmClassifier:
    encoder = mlp_init(
        [obs_dim + ctx_dim, *cfg.hidden, cfg.d], "relu", seed=derived_seed(cfg.seed, "enc")
    )
    return SptmClassifier(
        encoder, np.zeros((cfg.d, cfg.d)), obs_dim, ctx_dim, cfg.d, cfg.horizon, cfg.l
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class CpcBatch:
    anchors: np.ndarray  # (B, obs)
    positives: np.ndarray  # (B, obs)
    negatives: np.ndarray  # (B, N-1, obs), same context as the anchor
    contexts: np.ndarray  # (B, ctx)
    offsets: np.ndarray  # (B,), k in 1..horizon
    halluc_mask: np.ndarray  # (B, N-1) True where the negative was generated

    def __len__(self):
        return len(self.anchors)


@dataclass
class SptmBatch:
    from_obs: np.ndarray
    to_obs: np.ndarray
    labels: np.ndarray  # 1.0 within horizon, 0.0 at >= negative_offset
    contexts: np.ndarray
    halluc_mask: np.ndarray

    def __len__(self):
        return len(self.labels)


def _context_arrays(dataset, world, ids):
    obs_by_ctx = {cid: [t.observations for t in dataset.trajectories[cid]] for cid in ids}
    enc_by_ctx = {cid: world.encode_context(dataset.context_by_id(cid)) for cid in ids}
    return obs_by_ctx, enc_by_ctx


def sample_cpc_batch(
    dataset: TransitionDataset,
    world: BlockWorld,
    context_ids,
    cfg: CpcConfig,
    seed: int,
    hallucinations: dict | None = None,
):
    """One contrastive batch: anchors with their k-step successors as the
    positive class and same-context candidates as negatives.

    Offsets are uniform on 1..horizon. A phi fraction of each negative set is
    drawn from ``hallucinations`` (context_id -> observation pool) when the
    anchor's context has a pool; the rest are uniform dataset observations
    from the anchor's context, never the positive's own index.
    """
    rng = np.random.default_rng(seed)
    obs_by_ctx, enc_by_ctx = _context_arrays(dataset, world, context_ids)
    b, n_neg = cfg.batch_anchors, cfg.n_candidates - 1
    obs_dim = world.obs_dim
    anchors = np.empty((b, obs_dim))
    positives = np.empty((b, obs_dim))
    negatives = np.empty((b, n_neg, obs_dim))
    contexts = np.empty((b, world.ctx_dim))
    offsets = np.empty(b, dtype=int)
    halluc_mask = np.zeros((b, n_neg), dtype=bool)
    for i in range(b):
        cid = context_ids[rng.integers(len(context_ids))]
        trajs = obs_by_ctx[cid]
        t_len = trajs[0].shape[0] - 1
        if t_len < 1:
            raise ValueError(f"context {cid} has no transitions")
        k = int(rng.integers(1, min(cfg.horizon, t_len) + 1))
        ti = int(rng.integers(len(trajs)))
        t0 = int(rng.integers(0, t_len - k + 1))
        anchors[i] = trajs[ti][t0]
        positives[i] = trajs[ti][t0 + k]
        contexts[i] = enc_by_ctx[cid]
        offsets[i] = k
        pool = hallucinations.get(cid) if hallucinations else None
        n_h = int(round(cfg.phi * n_neg)) if pool is not None and len(pool) else 0
        for j in range(n_neg):
            if j < n_h:
                negatives[i, j] = pool[rng.integers(len(pool))]
                halluc_mask[i, j] = True
                continue
            while True:
                tj = int(rng.integers(len(trajs)))
                tt = int(rng.integers(0, t_len + 1))
                if tj == ti and tt == t0 + k:
                    continue  # exact positive index excluded
                negatives[i, j] = trajs[tj][tt]
                break
    return CpcBatch(anchors, positives, negatives, contexts, offsets, halluc_mask)


def sample_sptm_batch(
    dataset: TransitionDataset,
    world: BlockWorld,
    context_ids,
    cfg: SptmConfig,
    seed: int,
    hallucinations: dict | None = None,
):
    """Labeled near/far pairs: positives are <= horizon steps apart on one
    trajectory; negatives are >= negative_offset apart or from another
    trajectory of the same context (random exploration makes unrelated
    rollouts temporally far); a phi fraction of negatives is generated."""
    rng = np.random.default_rng(seed)
    obs_by_ctx, enc_by_ctx = _context_arrays(dataset, world, context_ids)
    b = cfg.batch_pairs
    from_obs = np.empty((b, world.obs_dim))
    to_obs = np.empty((b, world.obs_dim))
    labels = np.empty(b)
    contexts = np.empty((b, world.ctx_dim))
    halluc_mask = np.zeros(b, dtype=bool)
    for i in range(b):
        cid = context_ids[rng.integers(len(context_ids))]
        trajs = obs_by_ctx[cid]
        t_len = trajs[0].shape[0] - 1
        ti = int(rng.integers(len(trajs)))
        positive = i % 2 == 0
        labels[i] = 1.0 if positive else 0.0
        contexts[i] = enc_by_ctx[cid]
        if positive:
            k = int(rng.integers(1, min(cfg.horizon, t_len) + 1))
            t0 = int(rng.integers(0, t_len - k + 1))
            from_obs[i] = trajs[ti][t0]
            to_obs[i] = trajs[ti][t0 + k]
            continue
        t0 = int(rng.integers(0, t_len + 1))
        from_obs[i] = trajs[ti][t0]
        pool = hallucinations.get(cid) if hallucinations else None
        if pool is not None and len(pool) and rng.random() < cfg.phi:
            to_obs[i] = pool[rng.integers(len(pool))]
            halluc_mask[i] = True
            continue
        while True:
            tj = int(rng.integers(len(trajs)))
            tt = int(rng.integers(0, t_len + 1))
            if tj == ti and abs(tt - t0) < cfg.l:
                continue
            to_obs[i] = trajs[tj][tt]
            break
    return SptmBatch(from_obs, to_obs, labels, contexts, halluc_mask)


# ---------------------------------------------------------------------------
# losses


def cpc_loss(model: ConnectivityModel, batch: CpcBatch, tape: Tape | None = None):
    """Softmax cross-entropy of picking the true successor among the
    candidate set, averaged over anchors; log-sum-exp keeps it overflow-free.
    Equals ln(n_candidates) exactly at the zero-bilinear initialization."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    b, n_neg, obs_dim = batch.negatives.shape
    n = n_neg + 1
    cands = np.concatenate([batch.positives[:, None, :], batch.negatives], axis=1)
    anchor_in = np.concatenate([batch.anchors, batch.contexts], axis=1)
    cand_ctx = np.broadcast_to(batch.contexts[:, None, :], (b, n, batch.contexts.shape[1]))
    cand_in = np.concatenate([cands, cand_ctx], axis=2).reshape(b * n, -1)

    own_tape = tape is None
    t = Tape() if own_tape else tape
    za = mlp_apply(model.encoder, anchor_in, t)
    zc = ad.reshape(mlp_apply(model.encoder, cand_in, t), (b, n, model.d))
    proj = ad.matmul(za, ad.transpose(t.watch(model.bilinear)))  # rows W @ z_anchor
    logits = ad.sum_axis(ad.mul(zc, ad.reshape(proj, (b, 1, model.d))), -1)
    pos = ad.reshape(ad.slice_cols(logits, 0, 1), (-1,))
    loss = ad.mean_all(ad.sub(ad.logsumexp(logits), pos))
    return float(loss.value) if own_tape else loss


def sptm_bce_loss(model: SptmClassifier, batch: SptmBatch, tape: Tape | None = None):
    """Mean binary cross-entropy of sigmoid(logit) against the near/far
    labels, in the numerically safe softplus form."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    from_in = np.concatenate([batch.from_obs, batch.contexts], axis=1)
    to_in = np.concatenate([batch.to_obs, batch.contexts], axis=1)

    own_tape = tape is None
    t = Tape() if own_tape else tape
    z_from = mlp_apply(model.encoder, from_in, t)
    z_to = mlp_apply(model.encoder, to_in, t)
    proj = ad.matmul(z_from, ad.transpose(t.watch(model.bilinear)))
    logits = ad.sum_axis(ad.mul(z_to, proj), -1)
    # bce(y, x) = softplus(x) - y * x
    loss = ad.mean_all(ad.sub(ad.softplus(logits), ad.mul(logits, t.leaf(batch.labels))))
    return float(loss.value) if own_tape else loss


def score_pair(model, o_from, o_to, ctx) -> float:
    """Directed log-score of moving from ``o_from`` to ``o_to``."""
    return model.score_pair(o_from, o_to, ctx)


# ---------------------------------------------------------------------------
# training


def _train_scorer(model, dataset, world, cfg, sample_fn, loss_fn, hallucinations, label):
    train_ids, val_ids, _ = split_context_ids(dataset)
    if not train_ids:
        raise ValueError("no training contexts after holdout/validation split")
    val_source = val_ids or train_ids[:1]
    val_batches = [
        sample_fn(dataset, world, val_source, cfg, derived_seed(cfg.seed, "val", i), hallucinations)
        for i in range(cfg.val_batches)
    ]

    def validate():
        return float(np.mean([loss_fn(model, b) for b in val_batches]))

    params = model.parameters()
    opt = adam_init(params, lr=cfg.lr)
    best = None
    best_snapshot = None
    model.history.append({"epoch": 0, "train_loss": None, "val_loss": validate()})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = 0.0
        for _ in range(cfg.steps_per_epoch):
            batch = sample_fn(
                dataset, world, train_ids, cfg, derived_seed(cfg.seed, "train", step), hallucinations
            )
            tape = Tape()
            loss = loss_fn(model, batch, tape)
            tape.backward(loss)
            adam_step(params, [tape.grad(p) for p in params], opt)
            epoch_loss += float(loss.value)
            step += 1
        if not np.isfinite(epoch_loss) or any(not np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(f"{label}: non-finite values at epoch {epoch}")
        val_loss = validate()
        model.history.append(
            {"epoch": epoch, "train_loss": epoch_loss / cfg.steps_per_epoch, "val_loss": val_loss}
        )
        log.info("%s epoch %d train %.4f val %.4f", label, epoch, epoch_loss / cfg.steps_per_epoch, val_loss)
        if best is None or val_loss < best:
            best = val_loss
            best_snapshot = [p.copy() for p in params]
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            np.copyto(p, snap)
    model.history.append({"epoch": "best", "train_loss": None, "val_loss": best})
    return model


def train_cpc(
    dataset: TransitionDataset,
    world: BlockWorld,
    cfg: CpcConfig,
    hallucinations: dict | None = None,
) -> ConnectivityModel:
    model = connectivity_init(world.obs_dim, world.ctx_dim, cfg)
    return _train_scorer(
        model, dataset, world, cfg, sample_cpc_batch, cpc_loss, hallucinations, "cpc"
    )


def train_sptm(
    dataset: TransitionDataset,
    world: BlockWorld,
    cfg: SptmConfig,
    hallucinations: dict | None = None,
) -> SptmClassifier:
    model = sptm_init(world.obs_dim, world.ctx_dim, cfg)
    return _train_scorer(
        model, dataset, world, cfg, sample_sptm_batch, sptm_bce_loss, hallucinations, "sptm"
    )


# ---------------------------------------------------------------------------
# diagnostics


def successor_ranking_rate(
    model,
    dataset: TransitionDataset,
    world: BlockWorld,
    context_id: int,
    n_anchors=100,
    n_candidates=300,
    top_fraction=0.1,
    seed=0,
) -> float:
    """Fraction of anchors whose true k-step successor ranks in the top
    ``top_fraction`` of a random same-context candidate set by logit."""
    rng = np.random.default_rng(seed)
    trajs = dataset.trajectories[context_id]
    ctx_enc = world.encode_context(dataset.context_by_id(context_id))
    all_obs = dataset.observations_for(context_id)
    horizon = model.horizon
    cutoff = max(1, int(math.floor(top_fraction * n_candidates)))
    hits = 0
    for _ in range(n_anchors):
        ti = int(rng.integers(len(trajs)))
        t_len = trajs[ti].observations.shape[0] - 1
        k = int(rng.integers(1, min(horizon, t_len) + 1))
        t0 = int(rng.integers(0, t_len - k + 1))
        anchor = trajs[ti].observations[t0]
        succ = trajs[ti].observations[t0 + k]
        cands = all_obs[rng.integers(len(all_obs), size=n_candidates - 1)]
        stack = np.concatenate([succ[None], cands])
        z_anchor = model.encode(anchor, ctx_enc)[0]
        z_cands = model.encode(stack, ctx_enc)
        logits = z_cands @ model.bilinear @ z_anchor
        rank = int((logits > logits[0]).sum())  # 0 = best
        if rank < cutoff:
            hits += 1
    return hits / n_anchors
