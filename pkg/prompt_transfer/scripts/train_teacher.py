import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from tqdm import tqdm

from prompt_transfer.configuration.run_config import RunConfig
from prompt_transfer.data.taskgen import Example, TaskCorpus, evaluate
from prompt_transfer.modelling.loss import DistillConfig, prompt_objective
from prompt_transfer.modelling.model import FrozenModel
from prompt_transfer.modelling.numerics import Rng
from prompt_transfer.modelling.prompts import VanillaPrompt, init_vanilla_prompt
from prompt_transfer.scripts.aux.optimizer import make_optimizer
from prompt_transfer.scripts.aux.status_tracker import StageStatusTracker
from prompt_transfer.scripts.aux.train_report import TrainReport
from prompt_transfer.utils import traces
from prompt_transfer.utils.timer import Timer

__all__ = ["TeacherSet", "train_teacher", "train_teachers", "epoch_batches"]


def _log_everywhere(message):
    logging.info(message)
    traces.log(message)


@dataclass
class TeacherSet:
    prompts: Dict[str, VanillaPrompt] = field(default_factory=dict)

    def __getitem__(self, task_id: str) -> VanillaPrompt:
        return self.prompts[task_id]

    def __contains__(self, task_id: str) -> bool:
        return task_id in self.prompts

    def missing(self, task_ids: Iterable[str]) -> List[str]:
        return [t for t in task_ids if t not in self.prompts]

    def checksums(self) -> Dict[str, str]:
        return {t: hashlib.sha256(p.matrix.astype("<f8").tobytes()).hexdigest() for t, p in self.prompts.items()}


def epoch_batches(examples: Sequence[Example], batch_size: int, rng: Rng) -> List[List[Example]]:
    """One shuffled pass over `examples` cut into batches; the last one may be short."""
    order = rng.permutation(len(examples))
    return [
        [examples[int(i)] for i in order[start:start + batch_size]]
        for start in range(0, len(examples), batch_size)
    ]


def train_teacher(
        model: FrozenModel,
        corpus: TaskCorpus,
        cfg: RunConfig,
        rng: Optional[Rng] = None,
        report: Optional[TrainReport] = None,
) -> VanillaPrompt:
    """Vanilla prompt tuning of one source task on the task loss alone."""
    rng = rng or Rng(cfg.seed).fork("teacher", corpus.task_id)
    prompt = init_vanilla_prompt(model, cfg.prompt_len, rng.fork("init"))
    optimizer = make_optimizer(cfg)
    plain = DistillConfig.disabled()
    tracker = StageStatusTracker(f"teacher {corpus.task_id}")
    loop = tracker.loop(cfg.teacher_epochs)
    for epoch in range(cfg.teacher_epochs):
        loss_sum, seen = 0.0, 0
        for batch in epoch_batches(corpus.train, cfg.batch_size, rng.fork("epoch", epoch)):
            res = prompt_objective(model, prompt.matrix, None, batch, plain)
            prompt = VanillaPrompt(optimizer.step("prompt", prompt.matrix, res.grad_composed, cfg.lr_teacher))
            loss_sum += res.l_plm * len(batch)
            seen += len(batch)
        l_plm = loss_sum / max(seen, 1)
        if report is not None:
            report.add_epoch(epoch, l_plm, 0.0, 0.0, l_plm)
        loop.step(l_plm=l_plm, l_total=l_plm)
    tracker.update_status("finished")
    return prompt


def train_teachers(
        model: FrozenModel,
        corpora: Sequence[TaskCorpus],
        cfg: RunConfig,
        rng: Optional[Rng] = None,
        evaluate_split: Optional[str] = "dev",
) -> Tuple[TeacherSet, Dict[str, TrainReport]]:
    rng = rng or Rng(cfg.seed)
    teachers = TeacherSet()
    reports: Dict[str, TrainReport] = {}
    for corpus in tqdm(corpora, desc="teachers", disable=len(corpora) < 2):
        report = TrainReport(stage=f"teacher/{corpus.task_id}", seed=cfg.seed)
        with Timer(f"teacher {corpus.task_id} trained in {{time_s:.1f}}s") as timer:
            teachers.prompts[corpus.task_id] = train_teacher(
                model, corpus, cfg, rng.fork("teacher", corpus.task_id), report)
        report.wall_clock_s = timer.elapsed_s
        if evaluate_split is not None:
            report.accuracies[corpus.task_id] = evaluate(model, teachers[corpus.task_id].matrix, corpus, evaluate_split)
            _log_everywhere(f"teacher {corpus.task_id}: {evaluate_split} accuracy "
                            f"{report.accuracies[corpus.task_id]:.3f}")
        reports[corpus.task_id] = report
    return teachers, reports


def steps_per_epoch(total_examples: int, batch_size: int) -> int:
    return int(math.ceil(total_examples / batch_size))
