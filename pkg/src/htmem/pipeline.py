"""End-to-end orchestration: collect data, train every model, benchmark on
held-out contexts, and produce the score-model x weight-scheme ablation.
Shared by the command-line tool and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

from .autodiff import derived_seed
from .config import RunConfig, config_hash
from .connectivity import ConnectivityModel, SptmClassifier, train_cpc, train_sptm
from .controller import InverseModel, ModelBundle, train_inverse
from .cvae import CvaeModel, hallucinate, train_cvae
from .data import TransitionDataset, collect_dataset, split_context_ids
from .metrics import (
    ABLATION_SCHEMES,
    AblationGrid,
    MetricsReport,
    make_benchmark_tasks,
    run_ablation,
    run_benchmark,
)
from .world import BlockWorld

log = logging.getLogger(__name__)


@dataclass
class PipelineArtifacts:
    cfg: RunConfig
    world: BlockWorld
    dataset: TransitionDataset
    cvae: CvaeModel
    pools: dict  # context_id -> generated observation pool
    cpc: ConnectivityModel
    sptm: SptmClassifier
    inverse: InverseModel

    def htm_bundle(self) -> ModelBundle:
        return ModelBundle(self.cvae, self.cpc, self.inverse)

    def sptm_bundle(self) -> ModelBundle:
        return ModelBundle(self.cvae, self.sptm, self.inverse)

    def holdout_contexts(self):
        _, _, holdout = split_context_ids(self.dataset)
        return [self.dataset.context_by_id(cid) for cid in holdout]


def build_hallucination_pools(world, dataset, cvae, context_ids, size, seed) -> dict:
    """Per-context sample pools used as generated negatives during scorer
    training."""
    pools = {}
    for cid in context_ids:
        enc = world.encode_context(dataset.context_by_id(cid))
        pools[cid] = hallucinate(
            cvae, enc, size, derived_seed(seed, "pool", cid), context_id=cid
        ).observations
    return pools


def train_all(cfg: RunConfig, dataset: TransitionDataset | None = None) -> PipelineArtifacts:
    """Collect (unless given) and train generator, both scorers, and the
    policy. Scorer training consumes generated negatives from the trained
    generator, mirroring the intended deployment order."""
    world = BlockWorld(cfg.world)
    if dataset is None:
        log.info("collecting dataset")
        dataset = collect_dataset(world, cfg.data)
    log.info("training generator")
    cvae = train_cvae(dataset, world, cfg.cvae)
    train_ids, val_ids, _ = split_context_ids(dataset)
    pools = build_hallucination_pools(
        world, dataset, cvae, train_ids + val_ids, cfg.evaluation.halluc_pool, cfg.cvae.seed
    )
    log.info("training connectivity (contrastive)")
    cpc = train_cpc(dataset, world, cfg.cpc, pools)
    log.info("training connectivity (classifier baseline)")
    sptm = train_sptm(dataset, world, cfg.sptm, pools)
    log.info("training inverse model")
    inverse = train_inverse(dataset, world, cfg.inverse)
    return PipelineArtifacts(cfg, world, dataset, cvae, pools, cpc, sptm, inverse)


def benchmark_tasks(art: PipelineArtifacts, n_tasks=None, difficulty="cross-wall"):
    cfg = art.cfg
    return make_benchmark_tasks(
        art.world,
        art.holdout_contexts(),
        n_tasks or cfg.evaluation.n_tasks,
        cfg.evaluation.seed,
        difficulty=difficulty,
        success_threshold=cfg.execution.tau,
    )


def zero_shot_benchmark(art: PipelineArtifacts, tasks=None) -> MetricsReport:
    """The headline comparison: full planner vs classifier-scored plans vs
    the inverse model pursuing the goal directly."""
    cfg = art.cfg
    tasks = tasks if tasks is not None else benchmark_tasks(art)
    bundles = {
        "htm": (art.htm_bundle(), cfg.planning.scheme),
        "sptm": (art.sptm_bundle(), "sptm_exp"),
        "inverse_only": (art.htm_bundle(), None),
    }
    report = run_benchmark(
        art.world,
        tasks,
        bundles,
        cfg.planning,
        cfg.execution,
        cfg.evaluation.oracle_horizon,
        cfg.evaluation.seed,
        metadata={
            "config_hash": config_hash(cfg),
            "seed": cfg.evaluation.seed,
            "n_tasks": len(tasks),
            "difficulty": "cross-wall",
        },
    )
    return report


def weight_scheme_ablation(art: PipelineArtifacts, tasks=None, train_seed=None) -> AblationGrid:
    """2 x 3 grid of mean final distance; optionally retrains both scorers
    with a shifted seed so the grid can be repeated across training seeds."""
    cfg = art.cfg
    tasks = tasks if tasks is not None else benchmark_tasks(art, cfg.evaluation.ablation_tasks)
    cpc_model, sptm_model = art.cpc, art.sptm
    if train_seed is not None:
        cpc_cfg = dataclasses.replace(cfg.cpc, seed=derived_seed(cfg.cpc.seed, "ablate", train_seed))
        sptm_cfg = dataclasses.replace(
            cfg.sptm, seed=derived_seed(cfg.sptm.seed, "ablate", train_seed)
        )
        cpc_model = train_cpc(art.dataset, art.world, cpc_cfg, art.pools)
        sptm_model = train_sptm(art.dataset, art.world, sptm_cfg, art.pools)
    return run_ablation(
        art.world,
        tasks,
        art.cvae,
        {"cpc": cpc_model, "sptm": sptm_model},
        art.inverse,
        cfg.planning,
        cfg.execution,
        derived_seed(cfg.evaluation.seed, "ablation"),
        metadata={"config_hash": config_hash(cfg), "train_seed": train_seed},
    )
