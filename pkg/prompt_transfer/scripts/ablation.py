import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from prompt_transfer.configuration.run_config import ConfigBuilder, RunConfig
from prompt_transfer.data.taskgen import TaskCorpus
from prompt_transfer.modelling.model import FrozenModel
from prompt_transfer.modelling.numerics import Rng
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors
from prompt_transfer.scripts.adapt_target import adapt_target
from prompt_transfer.scripts.train_source import train_source
from prompt_transfer.scripts.train_teacher import TeacherSet, train_teachers
from prompt_transfer.utils import traces
from prompt_transfer.utils.timer import Timer

__all__ = [
    "AblationTable", "GRID_CELLS",
    "mean_target_accuracy", "run_ablation_grid", "run_objective_ablation", "run_sampling_ablation",
    "run_prompt_length_sweep", "run_strategy_ablation",
]

# (decomposition, distillation)
GRID_CELLS = {
    "baseline": (False, False),
    "distill-only": (False, True),
    "decomp-only": (True, False),
    "full": (True, True),
}

GRID_ORDERINGS = (("full", "decomp-only"), ("decomp-only", "baseline"), ("full", "distill-only"))


def _log_everywhere(message):
    logging.info(message)
    traces.log(message)


@dataclass
class AblationTable:
    """
    Per-seed mean target accuracies of each cell: exact match in `per_seed`,
    teacher-forced token accuracy in `per_seed_tokens`.
    """
    name: str
    cells: List[str]
    per_seed: Dict[int, Dict[str, float]] = field(default_factory=dict)
    per_seed_tokens: Dict[int, Dict[str, float]] = field(default_factory=dict)
    orderings: Sequence[Tuple[str, str]] = ()

    def record(self, seed: int, cell: str, accuracy: Tuple[float, float]):
        self.per_seed.setdefault(seed, {})[cell] = accuracy[0]
        self.per_seed_tokens.setdefault(seed, {})[cell] = accuracy[1]

    def values(self, cell: str, tokens: bool = False) -> List[float]:
        table = self.per_seed_tokens if tokens else self.per_seed
        return [table[s][cell] for s in sorted(table)]

    def mean(self, cell: str, tokens: bool = False) -> float:
        return float(np.mean(self.values(cell, tokens)))

    def std(self, cell: str, tokens: bool = False) -> float:
        return float(np.std(self.values(cell, tokens)))

    def seeds_holding(self, lhs: str, rhs: str) -> int:
        """Number of seeds on which cell `lhs` is at least as accurate as `rhs`."""
        return sum(1 for s in self.per_seed if self.per_seed[s][lhs] >= self.per_seed[s][rhs])

    def seeds_strict(self, lhs: str, rhs: str) -> int:
        return sum(1 for s in self.per_seed if self.per_seed[s][lhs] > self.per_seed[s][rhs])

    def seeds_tied(self, lhs: str, rhs: str) -> int:
        return self.seeds_holding(lhs, rhs) - self.seeds_strict(lhs, rhs)

    def all_tied(self, tokens: bool = False) -> bool:
        table = self.per_seed_tokens if tokens else self.per_seed
        return all(len(set(table[s].values())) <= 1 for s in table)

    def seed_ranking(self, seed: int) -> List[str]:
        acc = self.per_seed[seed]
        return sorted(self.cells, key=lambda c: (acc[c], c))

    def export(self) -> str:
        lines = [f"#ablation {self.name} seeds={','.join(map(str, sorted(self.per_seed)))}",
                 "#cell\tmean\tstd\ttoken_mean\ttoken_std"]
        for cell in self.cells:
            lines.append("%s\t%.6f\t%.6f\t%.6f\t%.6f" % (
                cell, self.mean(cell), self.std(cell), self.mean(cell, tokens=True), self.std(cell, tokens=True)))
        for seed in sorted(self.per_seed):
            lines.append("seed\t%d\t%s" % (seed, "\t".join("%s=%.6f" % (c, self.per_seed[seed][c]) for c in self.cells)))
            lines.append("ranking\t%d\t%s" % (seed, " < ".join(self.seed_ranking(seed))))
        n = len(self.per_seed)
        for lhs, rhs in self.orderings:
            lines.append("ordering\t%s >= %s\t%d/%d\tstrict=%d/%d\tties=%d" % (
                lhs, rhs, self.seeds_holding(lhs, rhs), n, self.seeds_strict(lhs, rhs), n, self.seeds_tied(lhs, rhs)))
        if self.all_tied():
            lines.append("warning\tall cells tied on every seed")
        return "\n".join(lines) + "\n"

    def grid_text(self) -> str:
        """2x2 layout: rows decomposition off/on, columns distillation off/on."""
        lines = ["decomposition\\distillation\toff\ton"]
        for label, decomp in (("off", False), ("on", True)):
            row = [label]
            for distill in (False, True):
                cell = next(c for c, flags in GRID_CELLS.items() if flags == (decomp, distill))
                row.append("%.4f+-%.4f" % (self.mean(cell), self.std(cell)))
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def mean_target_accuracy(
        model: FrozenModel,
        shared: SharedPrompt,
        factors: Sequence[TaskFactors],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        rng: Rng,
) -> Tuple[float, float]:
    """Mean (exact-match, token) accuracy over the targets, each adapted from the same source prompt."""
    exact, tokens = [], []
    for target in targets:
        builder = ConfigBuilder(cfg).set_target_epochs_by_heuristics(len(target.train))
        _, report = adapt_target(model, shared, factors, target, builder.build(), rng.fork("target", target.task_id))
        exact.append(report.accuracies[target.task_id])
        tokens.append(report.token_accuracies[target.task_id])
    return float(np.mean(exact)), float(np.mean(tokens))


def _source_then_targets(
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        teachers: TeacherSet,
        cfg: RunConfig,
        seed_rng: Rng,
) -> Tuple[float, float]:
    shared, factors, _ = train_source(model, sources, teachers, cfg, seed_rng.fork("source"))
    return mean_target_accuracy(model, shared, factors, targets, cfg, seed_rng.fork("targets"))


def _run_cells(
        name: str,
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        cells: Dict[str, Callable[[ConfigBuilder], ConfigBuilder]],
        seeds: Optional[Sequence[int]] = None,
        orderings: Sequence[Tuple[str, str]] = (),
        teachers_per_cell: bool = False,
) -> AblationTable:
    """
    Every cell of one seed shares the seed's teachers and source batch
    stream; only the cell's config edits differ.
    """
    table = AblationTable(name=name, cells=list(cells), orderings=orderings)
    for seed in tqdm(list(seeds if seeds is not None else cfg.seeds), desc=f"ablation {name}"):
        seed_cfg = ConfigBuilder(cfg).set_seed(seed).build()
        seed_rng = Rng(seed)
        teachers = None
        if not teachers_per_cell:
            teachers, _ = train_teachers(model, sources, seed_cfg, seed_rng.fork("teachers"), evaluate_split=None)
        for cell, edit in cells.items():
            cell_cfg = edit(ConfigBuilder(seed_cfg)).build()
            with Timer(f"ablation {name} seed={seed} cell={cell}: {{time_s:.1f}}s"):
                cell_teachers = teachers
                if teachers_per_cell:
                    cell_teachers, _ = train_teachers(
                        model, sources, cell_cfg, seed_rng.fork("teachers", cell), evaluate_split=None)
                acc = _source_then_targets(model, sources, targets, cell_teachers, cell_cfg, seed_rng)
            table.record(seed, cell, acc)
            _log_everywhere(f"ablation {name} seed={seed} {cell}: mean target accuracy {acc[0]:.4f}, tokens {acc[1]:.4f}")
    return table


def run_ablation_grid(
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        seeds: Optional[Sequence[int]] = None,
) -> AblationTable:
    cells = {
        name: (lambda b, d=decomp, s=distill: b.set_ablation(decomposition=d, distillation=s))
        for name, (decomp, distill) in GRID_CELLS.items()
    }
    return _run_cells("grid", model, sources, targets, cfg, cells, seeds, GRID_ORDERINGS)


def run_objective_ablation(
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        seeds: Optional[Sequence[int]] = None,
) -> AblationTable:
    variants = {
        "none": (False, False, False),
        "logits": (True, False, False),
        "hidden": (False, True, False),
        "logits+hidden": (True, True, False),
        "prompt-distance": (False, False, True),
    }
    cells = {
        name: (lambda b, v=v: b.set_ablation(decomposition=True, distillation=True).set_objective(*v))
        for name, v in variants.items()
    }
    return _run_cells("objective", model, sources, targets, cfg, cells, seeds,
                      (("logits+hidden", "logits"), ("logits+hidden", "hidden"), ("logits+hidden", "prompt-distance")))


def run_sampling_ablation(
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        seeds: Optional[Sequence[int]] = None,
) -> AblationTable:
    cells = {
        "stochastic": lambda b: b.set_stochastic_sampling(True),
        "all-tasks": lambda b: b.set_stochastic_sampling(False),
    }
    return _run_cells("sampling", model, sources, targets, cfg, cells, seeds, (("stochastic", "all-tasks"),))


def run_prompt_length_sweep(
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        seeds: Optional[Sequence[int]] = None,
) -> AblationTable:
    # teachers must match the student prompt length
    cells = {f"l={l}": (lambda b, l=l: b.set_prompt_len(l)) for l in cfg.prompt_len_sweep}
    return _run_cells("prompt_length", model, sources, targets, cfg, cells, seeds, teachers_per_cell=True)


def run_strategy_ablation(
        model: FrozenModel,
        sources: Sequence[TaskCorpus],
        targets: Sequence[TaskCorpus],
        cfg: RunConfig,
        seeds: Optional[Sequence[int]] = None,
) -> AblationTable:
    """Full two-component adaptation against shared-only and specific-only updates of one source run."""
    strategies = {
        "full": (False, False),
        "shared-only": (False, True),
        "specific-only": (True, False),
    }
    table = AblationTable(name="strategy", cells=list(strategies),
                          orderings=(("full", "shared-only"), ("full", "specific-only")))
    for seed in tqdm(list(seeds if seeds is not None else cfg.seeds), desc="ablation strategy"):
        seed_cfg = ConfigBuilder(cfg).set_seed(seed).set_ablation(decomposition=True, distillation=True).build()
        seed_rng = Rng(seed)
        teachers, _ = train_teachers(model, sources, seed_cfg, seed_rng.fork("teachers"), evaluate_split=None)
        shared, factors, _ = train_source(model, sources, teachers, seed_cfg, seed_rng.fork("source"))
        for name, (freeze_shared, freeze_specific) in strategies.items():
            strategy_cfg = ConfigBuilder(seed_cfg).set_freeze(freeze_shared, freeze_specific).build()
            acc = mean_target_accuracy(model, shared, factors, targets, strategy_cfg, seed_rng.fork("targets"))
            table.record(seed, name, acc)
            _log_everywhere(f"ablation strategy seed={seed} {name}: mean target accuracy {acc[0]:.4f}, tokens {acc[1]:.4f}")
    return table
