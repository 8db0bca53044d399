import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from prompt_transfer.analysis.efficiency import format_k
from prompt_transfer.configuration.run_config import RunConfig
from prompt_transfer.data.sampling import MixingSpec, make_source_batches
from prompt_transfer.data.taskgen import Example, TaskCorpus, evaluate, few_shot, token_accuracy
from prompt_transfer.modelling.loss import DistillConfig, batch_objective
from prompt_transfer.modelling.model import FrozenModel
from prompt_transfer.modelling.numerics import Matrix, Rng
from prompt_transfer.modelling.prompts import (
    SharedPrompt, TaskFactors, VanillaPrompt, average_factors, compose, compress, identity_factors,
    init_vanilla_prompt, param_count,
)
from prompt_transfer.scripts.aux.optimizer import make_optimizer
from prompt_transfer.scripts.aux.status_tracker import StageStatusTracker
from prompt_transfer.scripts.aux.train_report import TrainReport
from prompt_transfer.scripts.train_source import multitask_step
from prompt_transfer.scripts.train_teacher import epoch_batches, steps_per_epoch
from prompt_transfer.utils import traces
from prompt_transfer.utils.timer import Timer

__all__ = [
    "AdaptedPrompt", "FewShotRow", "FewShotResult",
    "adapt_target", "adapt_target_group", "run_few_shot",
]


def _log_everywhere(message):
    logging.info(message)
    traces.log(message)


@dataclass
class AdaptedPrompt:
    task_id: str
    shared: SharedPrompt
    factors: Optional[TaskFactors]

    def composed(self) -> Matrix:
        if self.factors is None:
            return self.shared.matrix
        return compose(self.shared, self.factors)

    def compressed(self) -> VanillaPrompt:
        if self.factors is None:
            return VanillaPrompt(self.shared.matrix.copy())
        return compress(self.shared, self.factors)


def _step_factors(optimizer, f: TaskFactors, du: np.ndarray, dv: np.ndarray, lr: float) -> TaskFactors:
    return TaskFactors(
        f.task_id,
        optimizer.step(f"{f.task_id}.u", f.u, du, lr),
        optimizer.step(f"{f.task_id}.v", f.v, dv, lr),
    )


def adapt_target(
        model: FrozenModel,
        shared: SharedPrompt,
        source_factors: Sequence[TaskFactors],
        target: TaskCorpus,
        cfg: RunConfig,
        rng: Optional[Rng] = None,
        train_examples: Optional[Sequence[Example]] = None,
) -> Tuple[AdaptedPrompt, TrainReport]:
    """
    Re-compose P* with the averaged source factors and tune both on the
    target task loss, P* at lr_shared and (u_t, v_t) at lr_specific_target.
    Without source factors the shared matrix is tuned as a vanilla prompt.
    The input prompt objects are never modified.
    """
    rng = rng or Rng(cfg.seed).fork("target", target.task_id)
    examples = list(train_examples) if train_examples is not None else target.train
    shared = SharedPrompt(shared.matrix.copy())
    factors = average_factors(source_factors, target.task_id) if source_factors else None
    train_shared = not cfg.freeze_shared
    train_specific = factors is not None and not cfg.freeze_specific
    epochs = cfg.target_epochs if (train_shared or train_specific) else 0

    optimizer = make_optimizer(cfg)
    plain = DistillConfig.disabled()
    report = TrainReport(stage=f"target/{target.task_id}", seed=cfg.seed)
    tracker = StageStatusTracker(f"target {target.task_id}")
    loop = tracker.loop(epochs)
    with Timer(f"target {target.task_id} adapted in {{time_s:.1f}}s") as timer:
        for epoch in range(epochs):
            loss_sum = 0.0
            for batch in epoch_batches(examples, cfg.batch_size, rng.fork("epoch", epoch)):
                res = batch_objective(model, shared, factors, None, batch, plain)
                if train_shared:
                    shared = SharedPrompt(optimizer.step("shared", shared.matrix, res.grad_shared, cfg.lr_shared))
                if train_specific:
                    du, dv = res.grad_factors[factors.task_id]
                    factors = _step_factors(optimizer, factors, du, dv, cfg.lr_specific_target)
                loss_sum += res.l_plm * len(batch)
            l_plm = loss_sum / len(examples)
            report.add_epoch(epoch, l_plm, 0.0, 0.0, l_plm)
            loop.step(l_plm=l_plm, l_total=l_plm)
    adapted = AdaptedPrompt(target.task_id, shared, factors)
    report.accuracies[target.task_id] = evaluate(model, adapted.composed(), target, cfg.eval_split)
    report.token_accuracies[target.task_id] = token_accuracy(model, adapted.composed(), target, cfg.eval_split)
    report.wall_clock_s = timer.elapsed_s
    report.params["trainable"] = format_k(
        param_count(cfg.prompt_len, model.config.d_model, "single" if factors is not None else "vanilla"))
    tracker.update_status("finished")
    _log_everywhere(f"target {target.task_id}: {cfg.eval_split} accuracy {report.accuracies[target.task_id]:.3f}")
    return adapted, report


def adapt_target_group(
        model: FrozenModel,
        shared: SharedPrompt,
        source_factors: Sequence[TaskFactors],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        rng: Optional[Rng] = None,
) -> Tuple[SharedPrompt, List[TaskFactors], TrainReport]:
    """
    Multitask adaptation over a group of targets sharing one P*, with
    proportional mixing over the targets. Without source factors each
    target starts from identity factors.
    """
    if len(targets) < 2:
        raise ValueError(f"adapt_target_group: needs >= 2 target tasks, got {len(targets)}")
    rng = rng or Rng(cfg.seed).fork("group")
    l, d = shared.matrix.shape
    shared = SharedPrompt(shared.matrix.copy())
    factors = {
        t.task_id: average_factors(source_factors, t.task_id) if source_factors else identity_factors(t.task_id, l, d)
        for t in targets
    }
    by_id = {t.task_id: t for t in targets}
    group_cfg = dataclasses.replace(cfg, distillation=False)
    spec = MixingSpec({t.task_id: len(t.train) for t in targets}, cap=cfg.mixing_cap)
    per_epoch = steps_per_epoch(sum(len(t.train) for t in targets), cfg.batch_size)
    optimizer = make_optimizer(cfg)
    report = TrainReport(stage="target/group", seed=cfg.seed)
    tracker = StageStatusTracker("target group")
    loop = tracker.loop(cfg.target_epochs)

    epoch_losses = np.zeros(4)
    with Timer("target group adapted in {time_s:.1f}s") as timer:
        batches = make_source_batches(
            spec, cfg.batch_size, cfg.target_epochs * per_epoch, rng.fork("batches"), stochastic=False)
        for step, manifest in enumerate(batches):
            g_shared, g_factors, losses = multitask_step(model, manifest, by_id, shared, factors, None, group_cfg)
            if not cfg.freeze_shared:
                shared = SharedPrompt(optimizer.step("shared", shared.matrix, g_shared, cfg.lr_shared))
            if not cfg.freeze_specific:
                for task_id, (du, dv) in g_factors.items():
                    factors[task_id] = _step_factors(optimizer, factors[task_id], du, dv, cfg.lr_specific_target)
            epoch_losses += losses
            if (step + 1) % per_epoch == 0:
                l_plm = epoch_losses[0] / per_epoch
                report.add_epoch(step // per_epoch, l_plm, 0.0, 0.0, l_plm)
                loop.step(l_plm=l_plm, l_total=l_plm)
                epoch_losses = np.zeros(4)
    report.wall_clock_s = timer.elapsed_s
    for t in targets:
        composed = compose(shared, factors[t.task_id])
        report.accuracies[t.task_id] = evaluate(model, composed, t, cfg.eval_split)
        report.token_accuracies[t.task_id] = token_accuracy(model, composed, t, cfg.eval_split)
    report.params["per_task"] = format_k(param_count(l, d, "grouped", len(targets)))
    report.params["total"] = format_k(param_count(l, d, "grouped_total", len(targets)))
    tracker.update_status("finished")
    return shared, [factors[t.task_id] for t in targets], report


@dataclass
class FewShotRow:
    k: int
    draw: int
    mpt_accuracy: float
    pt_accuracy: float


@dataclass
class FewShotResult:
    task_id: str
    seed: int
    rows: List[FewShotRow] = field(default_factory=list)

    def mean(self, k: int) -> Tuple[float, float]:
        rows = [r for r in self.rows if r.k == k]
        return (float(np.mean([r.mpt_accuracy for r in rows])), float(np.mean([r.pt_accuracy for r in rows])))

    @property
    def ks(self) -> List[int]:
        return sorted({r.k for r in self.rows})

    def export(self) -> str:
        lines = [f"#few-shot {self.task_id} seed={self.seed}", "#k\tdraw\tmpt\tpt"]
        for r in self.rows:
            lines.append("%d\t%d\t%.6f\t%.6f" % (r.k, r.draw, r.mpt_accuracy, r.pt_accuracy))
        for k in self.ks:
            mpt, pt = self.mean(k)
            lines.append("mean\t%d\t%.6f\t%.6f" % (k, mpt, pt))
        return "\n".join(lines) + "\n"


def run_few_shot(
        model: FrozenModel,
        shared: SharedPrompt,
        source_factors: Sequence[TaskFactors],
        target: TaskCorpus,
        cfg: RunConfig,
        rng: Optional[Rng] = None,
) -> FewShotResult:
    """
    For every k, `few_shot_draws` seeded subsamples of the target train split;
    each draw adapts an MPT-initialized prompt and a freshly sampled vanilla
    prompt on the same k examples.
    """
    rng = rng or Rng(cfg.seed).fork("few_shot", target.task_id)
    result = FewShotResult(task_id=target.task_id, seed=cfg.seed)
    cells = [(k, draw) for k in cfg.few_shot_ks for draw in range(cfg.few_shot_draws)]
    for k, draw in tqdm(cells, desc=f"few-shot {target.task_id}"):
        sample = few_shot(target, k, rng.fork("draw", k, draw))
        _, mpt = adapt_target(model, shared, source_factors, target, cfg, rng.fork("mpt", k, draw), sample.examples)
        vanilla = SharedPrompt(init_vanilla_prompt(model, cfg.prompt_len, rng.fork("pt_init", k, draw)).matrix)
        _, pt = adapt_target(model, vanilla, [], target, cfg, rng.fork("pt", k, draw), sample.examples)
        result.rows.append(FewShotRow(
            k, draw,
            mpt.accuracies[target.task_id],
            pt.accuracies[target.task_id],
        ))
    for k in result.ks:
        mpt_acc, pt_acc = result.mean(k)
        _log_everywhere(f"few-shot {target.task_id} k={k}: mpt {mpt_acc:.3f} vs pt {pt_acc:.3f}")
    return result
