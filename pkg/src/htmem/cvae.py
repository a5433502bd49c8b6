"""Conditional variational generative model over (observation, context) pairs.

At test time the decoder is sampled with standard-normal latents conditioned
on an unseen context encoding, producing the candidate states the planner
builds its graph from.
"""

from __future__ import annotations

import copy
import logging
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
    unpack_mlp,
)
from .data import TransitionDataset, split_context_ids
from .world import BlockWorld

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class CvaeConfig:
    d_z: int = 8
    hidden: tuple = (64, 64)
    beta: float = 1.0
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 30
    seed: int = 11


@dataclass
class CvaeModel:
    encoder: MlpParams  # (obs + ctx) -> (mu, log var), 2 * d_z outputs
    decoder: MlpParams  # (z + ctx) -> reconstruction mean
    obs_dim: int
    ctx_dim: int
    d_z: int
    history: list = field(default_factory=list, repr=False)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def decode(self, z, ctx) -> np.ndarray:
        """Decoder mean for latents z, clamped to the observation range."""
        z = np.atleast_2d(z)
        ctx_rows = np.broadcast_to(ctx, (z.shape[0], len(ctx)))
        out = mlp_apply(self.decoder, np.concatenate([z, ctx_rows], axis=1))
        return np.clip(out, 0.0, 1.0)

    def save(self, path):
        meta = (
            [self.obs_dim, self.ctx_dim, self.d_z]
            + pack_mlp_meta(self.encoder)
            + pack_mlp_meta(self.decoder)
        )
        save_checkpoint(path, "CVAE", meta, self.encoder.parameters() + self.decoder.parameters())

    @classmethod
    def load(cls, path) -> "CvaeModel":
        meta, flat = load_checkpoint(path, "CVAE")
        obs_dim, ctx_dim, d_z = meta[0], meta[1], meta[2]
        encoder, m_off, f_off = unpack_mlp(meta, flat, 3, 0)
        decoder, m_off, f_off = unpack_mlp(meta, flat, m_off, f_off)
        if f_off != flat.size:
            raise ad.CheckpointError(f"{path}: parameter count mismatch")
        model = cls(encoder, decoder, obs_dim, ctx_dim, d_z)
        if model.encoder.sizes()[0] != obs_dim + ctx_dim or model.encoder.sizes()[-1] != 2 * d_z:
            raise ad.CheckpointError(f"{path}: encoder dims inconsistent with header")
        return model


def cvae_init(obs_dim, ctx_dim, cfg: CvaeConfig) -> CvaeModel:
    enc_sizes = [obs_dim + ctx_dim, *cfg.hidden, 2 * cfg.d_z]
    dec_sizes = [cfg.d_z + ctx_dim, *cfg.hidden, obs_dim]
    return CvaeModel(
        encoder=mlp_init(enc_sizes, "relu", seed=derived_seed(cfg.seed, "enc")),
        decoder=mlp_init(dec_sizes, "relu", seed=derived_seed(cfg.seed, "dec")),
        obs_dim=obs_dim,
        ctx_dim=ctx_dim,
        d_z=cfg.d_z,
    )


def cvae_elbo(model: CvaeModel, obs, ctx, noise_seed: int, beta=1.0, tape: Tape | None = None):
    """Negative evidence lower bound for a batch.

    Reconstruction is the batch mean of per-sample squared error summed over
    observation entries (unit decoder variance); the KL of the diagonal
    Gaussian posterior against N(0, I) is closed form. Returns
    (total, reconstruction, kl) as floats, or as tape nodes when recording.
    Reparameterization noise is drawn from ``noise_seed`` so a fixed seed
    freezes the estimate.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    ctx = np.atleast_2d(np.asarray(ctx, dtype=float))
    if obs.shape[0] == 0:
        raise ValueError("empty batch")
    if obs.shape[1] != model.obs_dim or ctx.shape[1] != model.ctx_dim:
        raise ad.ShapeError(
            f"batch dims {obs.shape[1]}/{ctx.shape[1]} do not match model "
            f"{model.obs_dim}/{model.ctx_dim}"
        )
    n = obs.shape[0]
    eps = np.random.default_rng(noise_seed).standard_normal((n, model.d_z))

    own_tape = tape is None
    t = Tape() if own_tape else tape
    enc_out = mlp_apply(model.encoder, np.concatenate([obs, ctx], axis=1), t)
    mu = ad.slice_cols(enc_out, 0, model.d_z)
    logvar = ad.slice_cols(enc_out, model.d_z, 2 * model.d_z)
    z = ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), t.leaf(eps)))
    recon_mean = mlp_apply(model.decoder, ad.concat_cols(z, t.leaf(ctx)), t)

    diff = ad.sub(recon_mean, t.leaf(obs))
    recon = ad.mean_all(ad.sum_axis(ad.mul(diff, diff), -1))
    kl_inner = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)), ad.add(logvar, 1.0))
    kl = ad.mean_all(ad.mul(ad.sum_axis(kl_inner, -1), 0.5))
    total = ad.add(recon, ad.mul(kl, float(beta)))
    if own_tape:
        return float(total.value), float(recon.value), float(kl.value)
    return total, recon, kl


def _gather_pairs(dataset: TransitionDataset, world: BlockWorld, ids):
    obs, ctx = [], []
    for cid in ids:
        o = dataset.observations_for(cid)
        obs.append(o)
        ctx.append(np.tile(world.encode_context(dataset.context_by_id(cid)), (len(o), 1)))
    return np.concatenate(obs), np.concatenate(ctx)


def train_cvae(dataset: TransitionDataset, world: BlockWorld, cfg: CvaeConfig) -> CvaeModel:
    """Adam training with held-out contexts excluded and the best-validation
    parameters restored at the end. Epoch 0 logs the pre-training losses."""
    train_ids, val_ids, _ = split_context_ids(dataset)
    if not train_ids:
        raise ValueError("no training contexts after holdout/validation split")
    x_train, c_train = _gather_pairs(dataset, world, train_ids)
    x_val, c_val = _gather_pairs(dataset, world, val_ids or train_ids[:1])

    model = cvae_init(world.obs_dim, world.ctx_dim, cfg)
    params = model.parameters()
    opt = adam_init(params, lr=cfg.lr)
    rng = np.random.default_rng(derived_seed(cfg.seed, "shuffle"))
    val_seed = derived_seed(cfg.seed, "val-noise")

    def validate():
        return cvae_elbo(model, x_val, c_val, val_seed, cfg.beta)

    best = None
    best_snapshot = None
    total, recon, kl = validate()
    model.history.append(
        {"epoch": 0, "train_loss": None, "val_loss": total, "val_recon": recon, "val_kl": kl}
    )
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            tape = Tape()
            loss, _, _ = cvae_elbo(
                model,
                x_train[idx],
                c_train[idx],
                derived_seed(cfg.seed, "noise", epoch, n_batches),
                cfg.beta,
                tape,
            )
            tape.backward(loss)
            adam_step(params, [tape.grad(p) for p in params], opt)
            epoch_loss += float(loss.value)
            n_batches += 1
        if not np.isfinite(epoch_loss) or any(
            not np.all(np.isfinite(p)) for p in params
        ):
            raise TrainingDiverged(f"non-finite values at epoch {epoch}")
        total, recon, kl = validate()
        model.history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "val_loss": total,
                "val_recon": recon,
                "val_kl": kl,
            }
        )
        log.info("cvae epoch %d train %.4f val %.4f", epoch, epoch_loss / n_batches, total)
        if best is None or total < best:
            best = total
            best_snapshot = [p.copy() for p in params]
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            np.copyto(p, snap)
    return model


@dataclass
class HallucinationSet:
    context_id: int
    observations: np.ndarray  # (M, obs_dim), entries in [0, 1]
    seed: int

    def __len__(self):
        return len(self.observations)


def hallucinate(model: CvaeModel, ctx_encoding, m: int, seed: int, context_id=-1) -> HallucinationSet:
    """Sample ``m`` decoder means from standard-normal latents, clamped to the
    observation range. Deterministic given (model, seed, m)."""
    if m < 0:
        raise ValueError("sample count must be >= 0")
    ctx_encoding = np.asarray(ctx_encoding, dtype=float)
    if m == 0:
        return HallucinationSet(context_id, np.zeros((0, model.obs_dim)), seed)
    z = np.random.default_rng(seed).standard_normal((m, model.d_z))
    return HallucinationSet(context_id, model.decode(z, ctx_encoding), seed)
