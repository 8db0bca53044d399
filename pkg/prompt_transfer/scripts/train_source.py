import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from prompt_transfer.configuration.run_config import RunConfig
from prompt_transfer.data.sampling import BatchManifest, MixingSpec, make_source_batches
from prompt_transfer.data.taskgen import TaskCorpus
from prompt_transfer.modelling.loss import multitask_objective
from prompt_transfer.modelling.model import FrozenModel
from prompt_transfer.modelling.numerics import Rng
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors, init_decomposition, init_vanilla_prompt
from prompt_transfer.scripts.aux.optimizer import make_optimizer
from prompt_transfer.scripts.aux.status_tracker import StageStatusTracker
from prompt_transfer.scripts.aux.train_report import TrainReport
from prompt_transfer.scripts.train_teacher import TeacherSet, steps_per_epoch
from prompt_transfer.utils import traces
from prompt_transfer.utils.timer import Timer

__all__ = ["train_source", "multitask_step"]


def _log_everywhere(message):
    logging.info(message)
    traces.log(message)


def multitask_step(
        model: FrozenModel,
        manifest: BatchManifest,
        corpora: Dict[str, TaskCorpus],
        shared: SharedPrompt,
        factors: Dict[str, TaskFactors],
        teachers: Optional[TeacherSet],
        cfg: RunConfig,
) -> Tuple[np.ndarray, Dict[str, Tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """
    One manifest in a single padded pass. Each represented task is weighted
    by its share of the batch slots. Returns (grad_shared, grad_factors,
    losses) with losses = [l_plm, l_logits, l_hidden, l_total].
    """
    dcfg = cfg.distill_config()
    batch = [(task_id, corpora[task_id].train[i]) for task_id, i in manifest.entries]
    res = multitask_objective(model, shared, factors, teachers if dcfg.distills else None, batch, dcfg,
                              manifest.batch_size)
    return res.grad_shared, res.grad_factors, np.array([res.l_plm, res.l_logits, res.l_hidden, res.l_total])


def train_source(
        model: FrozenModel,
        corpora: Sequence[TaskCorpus],
        teachers: Optional[TeacherSet],
        cfg: RunConfig,
        rng: Optional[Rng] = None,
        manifests_out: Optional[List[BatchManifest]] = None,
) -> Tuple[SharedPrompt, List[TaskFactors], TrainReport]:
    """
    Multitask student training. With decomposition off a single shared
    prompt is trained for all tasks and no factors are returned.
    """
    rng = rng or Rng(cfg.seed).fork("source")
    task_ids = [c.task_id for c in corpora]
    dcfg = cfg.distill_config()
    if dcfg.distills:
        missing = teachers.missing(task_ids) if teachers is not None else task_ids
        if missing:
            raise ValueError(f"train_source: no teacher prompt for {missing}")
    by_id = {c.task_id: c for c in corpora}

    if cfg.decomposition:
        shared, factor_list = init_decomposition(
            model, cfg.prompt_len, task_ids, rng.fork("init"), noise_std=cfg.factor_noise_std)
    else:
        shared = SharedPrompt(init_vanilla_prompt(model, cfg.prompt_len, rng.fork("init").fork("shared")).matrix)
        factor_list = []
    factors = {f.task_id: f for f in factor_list}

    spec = MixingSpec({c.task_id: len(c.train) for c in corpora}, cap=cfg.mixing_cap)
    per_epoch = steps_per_epoch(sum(len(c.train) for c in corpora), cfg.batch_size)
    optimizer = make_optimizer(cfg)
    report = TrainReport(stage="source", seed=cfg.seed)
    tracker = StageStatusTracker("source")
    loop = tracker.loop(cfg.source_epochs)
    _log_everywhere(f"source: {len(task_ids)} tasks, decomposition={cfg.decomposition}, "
                    f"distill={dcfg.to_dict()}, {per_epoch} steps/epoch")

    epoch_losses = np.zeros(4)
    with Timer("source stage took {time_s:.1f}s") as timer:
        batches = make_source_batches(
            spec, cfg.batch_size, cfg.source_epochs * per_epoch, rng.fork("batches"),
            stochastic=cfg.stochastic_sampling)
        for step, manifest in enumerate(batches):
            if manifests_out is not None:
                manifests_out.append(manifest)
            g_shared, g_factors, losses = multitask_step(model, manifest, by_id, shared, factors, teachers, cfg)
            shared = SharedPrompt(optimizer.step("shared", shared.matrix, g_shared, cfg.lr_shared))
            for task_id, (du, dv) in g_factors.items():
                f = factors[task_id]
                factors[task_id] = TaskFactors(
                    task_id,
                    optimizer.step(f"{task_id}.u", f.u, du, cfg.lr_specific_source),
                    optimizer.step(f"{task_id}.v", f.v, dv, cfg.lr_specific_source),
                )
            epoch_losses += losses
            if (step + 1) % per_epoch == 0:
                epoch = step // per_epoch
                l_plm, l_logits, l_hidden, l_total = epoch_losses / per_epoch
                report.add_epoch(epoch, l_plm, l_logits, l_hidden, l_total)
                loop.step(l_plm=l_plm, l_logits=l_logits, l_hidden=l_hidden, l_total=l_total)
                epoch_losses = np.zeros(4)
    report.wall_clock_s = timer.elapsed_s
    tracker.update_status("finished")
    return shared, [factors[t] for t in task_ids if t in factors], report
