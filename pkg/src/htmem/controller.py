"""Inverse-model policy and the closed-loop executor that follows plans.

The policy maps (current, target, context) to a bounded action and is
trained on one-step transitions with squared action error. The executor
pursues each plan node for a bounded number of steps, replans on a global
step period, and falls back to direct goal pursuit when planning yields no
path (the run is then marked planless). The same fallback doubles as the
inverse-model-only baseline.
"""

from __future__ import annotations

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
    unpack_mlp,
)
from .cvae import CvaeModel
from .data import TransitionDataset, split_context_ids
from .plangraph import NoPathError, Plan, PlanningConfig, plan_end_to_end
from .world import BlockWorld, Task

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class InverseConfig:
    hidden: tuple = (64, 64)
    lr: float = 3e-3
    batch_size: int = 128
    epochs: int = 40
    seed: int = 44


@dataclass
class InverseModel:
    net: MlpParams  # (obs + obs_target + ctx) -> 2, squashed by a_max * tanh
    a_max: float
    obs_dim: int
    ctx_dim: int
    history: list = field(default_factory=list, repr=False)

    def parameters(self):
        return self.net.parameters()

    def save(self, path):
        meta = [self.obs_dim, self.ctx_dim] + pack_mlp_meta(self.net)
        save_checkpoint(path, "INVM", meta, [np.array([self.a_max])] + self.parameters())

    @classmethod
    def load(cls, path) -> "InverseModel":
        meta, flat = load_checkpoint(path, "INVM")
        obs_dim, ctx_dim = meta[:2]
        a_max = float(flat[0])
        net, _, f_off = unpack_mlp(meta, flat[1:], 2, 0)
        if f_off != flat.size - 1:
            raise ad.CheckpointError(f"{path}: parameter count mismatch")
        return cls(net, a_max, obs_dim, ctx_dim)


def inverse_init(obs_dim, ctx_dim, a_max, cfg: InverseConfig) -> InverseModel:
    net = mlp_init(
        [2 * obs_dim + ctx_dim, *cfg.hidden, 2], "relu", seed=derived_seed(cfg.seed, "net")
    )
    return InverseModel(net, a_max, obs_dim, ctx_dim)


def infer_action(model: InverseModel, o_current, o_target, ctx) -> np.ndarray:
    """Bounded action toward the target observation; pure function."""
    x = np.concatenate([np.ravel(o_current), np.ravel(o_target), np.ravel(ctx)])
    return model.a_max * np.tanh(mlp_apply(model.net, x))


def inverse_loss(model: InverseModel, obs, targets, ctx, actions, tape: Tape | None = None):
    """Mean squared error between predicted and logged actions."""
    x = np.concatenate([obs, targets, ctx], axis=1)
    own_tape = tape is None
    t = Tape() if own_tape else tape
    raw = mlp_apply(model.net, x, t)
    pred = ad.mul(ad.tanh(raw), model.a_max)
    diff = ad.sub(pred, t.leaf(actions))
    loss = ad.mean_all(ad.sum_axis(ad.mul(diff, diff), -1))
    return float(loss.value) if own_tape else loss


def _gather_transitions(dataset, world, ids):
    obs, tgt, ctx, act = [], [], [], []
    for cid in ids:
        o, a, nxt = dataset.transitions_for(cid)
        obs.append(o)
        tgt.append(nxt)
        act.append(a)
        ctx.append(np.tile(world.encode_context(dataset.context_by_id(cid)), (len(o), 1)))
    return (
        np.concatenate(obs),
        np.concatenate(tgt),
        np.concatenate(ctx),
        np.concatenate(act),
    )


def train_inverse(dataset: TransitionDataset, world: BlockWorld, cfg: InverseConfig) -> InverseModel:
    train_ids, val_ids, _ = split_context_ids(dataset)
    if not train_ids:
        raise ValueError("no training contexts after holdout/validation split")
    x, tgt, ctx, act = _gather_transitions(dataset, world, train_ids)
    xv, tv, cv, av = _gather_transitions(dataset, world, val_ids or train_ids[:1])

    model = inverse_init(world.obs_dim, world.ctx_dim, world.spec.a_max, cfg)
    params = model.parameters()
    opt = adam_init(params, lr=cfg.lr)
    rng = np.random.default_rng(derived_seed(cfg.seed, "shuffle"))

    def validate():
        return inverse_loss(model, xv, tv, cv, av)

    best = None
    best_snapshot = None
    model.history.append({"epoch": 0, "train_loss": None, "val_loss": validate()})
    n = len(x)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            tape = Tape()
            loss = inverse_loss(model, x[idx], tgt[idx], ctx[idx], act[idx], tape)
            tape.backward(loss)
            adam_step(params, [tape.grad(p) for p in params], opt)
            epoch_loss += float(loss.value)
            n_batches += 1
        if not np.isfinite(epoch_loss) or any(not np.all(np.isfinite(p)) for p in params):
            raise TrainingDiverged(f"non-finite values at epoch {epoch}")
        val_loss = validate()
        model.history.append(
            {"epoch": epoch, "train_loss": epoch_loss / n_batches, "val_loss": val_loss}
        )
        log.info("inverse epoch %d train %.6f val %.6f", epoch, epoch_loss / n_batches, val_loss)
        if best is None or val_loss < best:
            best = val_loss
            best_snapshot = [p.copy() for p in params]
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            np.copyto(p, snap)
    return model


# ---------------------------------------------------------------------------
# execution


@dataclass
class ModelBundle:
    cvae: CvaeModel
    scorer: object  # ConnectivityModel or SptmClassifier
    inverse: InverseModel


@dataclass
class ExecutionConfig:
    n: int = 500  # step budget per task
    r: int = 200  # global replanning period
    tau: float = 0.5  # success distance on simulator states
    eps_wp: float = 0.1  # waypoint-reached radius in state mode
    waypoint_steps: int = 5  # give up on a waypoint after this many steps


@dataclass
class ExecutionResult:
    success: bool
    steps: int
    final_distance: float
    replan_count: int
    planless: bool
    state_trace: np.ndarray  # (steps + 1, 2)
    plans: list
    seed: int

    def to_dict(self) -> dict:
        return {
            "success": bool(self.success),
            "steps": self.steps,
            "final_distance": self.final_distance,
            "replan_count": self.replan_count,
            "planless": self.planless,
            "state_trace": self.state_trace.tolist(),
            "plans": [p.to_dict() for p in self.plans],
            "seed": self.seed,
        }


def plan_seed(seed: int, replan_index: int) -> int:
    """Seed of the ``replan_index``-th plan inside one execution."""
    return derived_seed(seed, "plan", replan_index)


def execute(
    world: BlockWorld,
    task: Task,
    models: ModelBundle,
    plan_cfg: PlanningConfig,
    exec_cfg: ExecutionConfig,
    seed: int,
    use_planner: bool = True,
) -> ExecutionResult:
    """Closed-loop run: plan, pursue waypoints, replan every ``r`` steps.

    With ``use_planner=False`` the goal is pursued directly (the
    inverse-model-only baseline); the result is marked planless.
    """
    ctx = task.context
    ctx_enc = world.encode_context(ctx)
    goal_obs = world.observe(ctx, task.goal)
    goal = np.array([task.goal.x, task.goal.y])

    state = task.start
    trace = [np.array([state.x, state.y])]
    plans: list = []
    planless = not use_planner
    replans = 0
    steps = 0
    plan = None
    plan_attempts = 0
    wp_idx = 0
    steps_on_wp = 0

    def distance():
        return math.hypot(state.x - goal[0], state.y - goal[1])

    def make_plan():
        nonlocal plan, plan_attempts, wp_idx, steps_on_wp, planless
        try:
            plan, _ = plan_end_to_end(
                ctx_enc,
                world.observe(ctx, state),
                goal_obs,
                models.cvae,
                models.scorer,
                plan_cfg,
                plan_seed(seed, plan_attempts),
            )
            plans.append(plan)
            wp_idx = 1 if len(plan) > 1 else 0
            steps_on_wp = 0
        except NoPathError:
            plan = None
            planless = True
        plan_attempts += 1

    success = distance() <= exec_cfg.tau
    while not success and steps < exec_cfg.n:
        if use_planner:
            boundary = steps > 0 and steps % exec_cfg.r == 0
            if boundary:
                replans += 1
            if boundary or plan_attempts == 0:
                make_plan()
        target_obs = plan.observations[wp_idx] if plan is not None else goal_obs
        action = infer_action(models.inverse, world.observe(ctx, state), target_obs, ctx_enc)
        state = world.step(ctx, state, action)
        steps += 1
        trace.append(np.array([state.x, state.y]))
        if distance() <= exec_cfg.tau:
            success = True
            break
        if plan is not None and wp_idx < len(plan) - 1:
            steps_on_wp += 1
            if steps_on_wp >= exec_cfg.waypoint_steps or _reached(
                world, models.scorer, ctx, ctx_enc, state, plan, wp_idx, exec_cfg.eps_wp
            ):
                wp_idx += 1
                steps_on_wp = 0
    return ExecutionResult(
        success=success,
        steps=steps,
        final_distance=distance(),
        replan_count=replans,
        planless=planless,
        state_trace=np.array(trace),
        plans=plans,
        seed=seed,
    )


def _reached(world, scorer, ctx, ctx_enc, state, plan: Plan, wp_idx, eps_wp) -> bool:
    target_obs = plan.observations[wp_idx]
    if world.spec.mode == "state":
        t = world.decode(target_obs)
        return math.hypot(state.x - t.x, state.y - t.y) <= eps_wp
    # raster mode: advance once the connectivity score from here to the
    # waypoint matches the plan edge that led into it
    cur_obs = world.observe(ctx, state)
    logit_now = scorer.score_pair(cur_obs, target_obs, ctx_enc)
    return logit_now >= plan.edge_logits[wp_idx - 1]
