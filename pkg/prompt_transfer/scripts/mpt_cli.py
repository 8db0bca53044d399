import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import termcolor

from prompt_transfer import env
from prompt_transfer.analysis.efficiency import efficiency_text
from prompt_transfer.analysis.similarity import prompt_embedding, render_heatmap, similarity_matrix
from prompt_transfer.configuration.run_config import ConfigBuilder, RunConfig, parse_config, serialize_config
from prompt_transfer.data.sampling import write_manifests
from prompt_transfer.data.taskgen import SPLITS, TaskCorpus, generate_suite, read_corpus, write_corpus
from prompt_transfer.modelling.checkpoint import (
    MAGIC_DECOMPOSITION, MAGIC_MODEL, MAGIC_VANILLA,
    load_decomposition, load_model, load_vanilla, save_decomposition, save_model, save_vanilla,
)
from prompt_transfer.modelling.model import FrozenModel, init_model
from prompt_transfer.modelling.numerics import Rng
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors, VanillaPrompt
from prompt_transfer.scripts.ablation import (
    run_ablation_grid, run_objective_ablation, run_prompt_length_sweep, run_sampling_ablation, run_strategy_ablation,
)
from prompt_transfer.scripts.adapt_target import adapt_target, adapt_target_group, run_few_shot
from prompt_transfer.scripts.aux.run_store import MissingArtifactError, RunStore
from prompt_transfer.scripts.aux.status_tracker import StageStatusTracker
from prompt_transfer.scripts.train_source import train_source
from prompt_transfer.scripts.train_teacher import TeacherSet, train_teachers
from prompt_transfer.utils import traces
from prompt_transfer.utils.timer import Timer

__all__ = ["main", "build_parser", "resolve_config", "StageError", "MissingArtifactError", "SUBCOMMANDS"]

SUBCOMMANDS = ("gen-tasks", "train-teachers", "train-source", "adapt-target", "adapt-group",
               "few-shot", "ablate", "analyze", "report")
ABLATION_SUITES = ("grid", "objective", "sampling", "prompt-length", "strategy", "all")
MODEL_STAGES = ("train-teachers", "train-source", "adapt-target", "adapt-group", "few-shot", "ablate")


class StageError(RuntimeError):
    pass


def _log_everywhere(message):
    logging.info(message)
    traces.log(message)


def _write_text(store: RunStore, rel: str, text: str) -> str:
    fn = store.path(rel)
    os.makedirs(os.path.dirname(fn), exist_ok=True)
    with open(fn + ".tmp", "w") as f:
        f.write(text)
    os.rename(fn + ".tmp", fn)
    return rel


def _load_model(store: RunStore, stage: str) -> FrozenModel:
    return load_model(store.require(env.MODEL_FILE, MAGIC_MODEL, stage))


def _load_corpora(store: RunStore, task_ids: Sequence[str], stage: str) -> List[TaskCorpus]:
    corpora = []
    for task_id in task_ids:
        for split in SPLITS:
            store.require(os.path.join(env.DIR_TASKS, task_id, f"{split}.tsv"), needed_by=stage)
        corpora.append(read_corpus(store.path(env.DIR_TASKS), task_id))
    return corpora


def _load_teachers(store: RunStore, task_ids: Sequence[str], stage: str) -> TeacherSet:
    return TeacherSet({
        t: load_vanilla(store.require(env.teacher_file(t), MAGIC_VANILLA, stage)) for t in task_ids
    })


def _load_source(store: RunStore, cfg: RunConfig, stage: str) -> Tuple[SharedPrompt, List[TaskFactors]]:
    if cfg.decomposition:
        return load_decomposition(store.require(env.SOURCE_FILE, MAGIC_DECOMPOSITION, stage))
    vanilla = load_vanilla(store.require(env.SOURCE_VANILLA_FILE, MAGIC_VANILLA, stage))
    return SharedPrompt(vanilla.matrix), []


def _target_ids(cfg: RunConfig, requested: Optional[Sequence[str]]) -> List[str]:
    known = [t.task_id for t in cfg.target_specs()]
    if not requested:
        return known
    unknown = [t for t in requested if t not in known]
    if unknown:
        raise StageError(f"tasks {unknown} are not target tasks {known}")
    return list(requested)


def stage_gen_tasks(store: RunStore, cfg: RunConfig, args, _model: Optional[FrozenModel]) -> None:
    with Timer("model init took {time_ms:.0f}ms"):
        model = init_model(cfg.model_config(), Rng(cfg.seed).fork("model"), cfg.init_scheme, cfg.init_std)
    save_model(model, store.path(env.MODEL_FILE))
    _log_everywhere(f"frozen model {model.config} checksum {model.checksum()[:16]}")
    sources, targets = generate_suite(
        cfg.vocab_size, cfg.split_sizes, cfg.len_range, Rng(cfg.seed).fork("tasks"),
        cfg.source_specs(), cfg.target_specs())
    for corpus in sources + targets:
        write_corpus(corpus.check(), store.path(env.DIR_TASKS))
        _log_everywhere(f"task {corpus.task_id} ({corpus.family}): "
                        f"{len(corpus.train)}/{len(corpus.dev)}/{len(corpus.test)} examples")
    _write_text(store, env.CONFIG_FILE, serialize_config(cfg))


def stage_train_teachers(store: RunStore, cfg: RunConfig, args, model: FrozenModel) -> None:
    corpora = _load_corpora(store, [s.task_id for s in cfg.source_specs()], "train-teachers")
    teachers, reports = train_teachers(model, corpora, cfg, Rng(cfg.seed).fork("teachers"))
    for task_id, prompt in teachers.prompts.items():
        save_vanilla(prompt, store.path(env.teacher_file(task_id)))
        reports[task_id].checkpoints.append(env.teacher_file(task_id))
        reports[task_id].write(store.path(env.DIR_REPORTS, f"teacher_{task_id}.txt"))


def stage_train_source(store: RunStore, cfg: RunConfig, args, model: FrozenModel) -> None:
    source_ids = [s.task_id for s in cfg.source_specs()]
    corpora = _load_corpora(store, source_ids, "train-source")
    teachers = _load_teachers(store, source_ids, "train-source") if cfg.distill_config().distills else None
    teacher_sums = teachers.checksums() if teachers else {}
    manifests = []
    shared, factors, report = train_source(model, corpora, teachers, cfg, Rng(cfg.seed).fork("source"), manifests)
    if teachers and teachers.checksums() != teacher_sums:
        raise StageError("teacher prompts changed during source training")
    if cfg.decomposition:
        save_decomposition(shared, factors, store.path(env.SOURCE_FILE))
        report.checkpoints.append(env.SOURCE_FILE)
    else:
        save_vanilla(VanillaPrompt(shared.matrix), store.path(env.SOURCE_VANILLA_FILE))
        report.checkpoints.append(env.SOURCE_VANILLA_FILE)
    write_manifests(store.path(env.DIR_REPORTS, "source_batches.tsv"), manifests)
    report.write(store.path(env.DIR_REPORTS, "source.txt"))


def stage_adapt_target(store: RunStore, cfg: RunConfig, args, model: FrozenModel) -> None:
    shared, factors = _load_source(store, cfg, "adapt-target")
    for target in _load_corpora(store, _target_ids(cfg, args.task), "adapt-target"):
        target_cfg = ConfigBuilder(cfg).set_target_epochs_by_heuristics(len(target.train)).build()
        adapted, report = adapt_target(model, shared, factors, target, target_cfg, Rng(cfg.seed).fork("target", target.task_id))
        tdir = env.target_dir(target.task_id)
        if adapted.factors is not None:
            save_decomposition(adapted.shared, [adapted.factors], store.path(tdir, "decomposition.mptp"))
            report.checkpoints.append(os.path.join(tdir, "decomposition.mptp"))
        save_vanilla(adapted.compressed(), store.path(tdir, "compressed.mptv"))
        report.checkpoints.append(os.path.join(tdir, "compressed.mptv"))
        report.write(store.path(env.DIR_REPORTS, f"target_{target.task_id}.txt"))


def stage_adapt_group(store: RunStore, cfg: RunConfig, args, model: FrozenModel) -> None:
    shared, factors = _load_source(store, cfg, "adapt-group")
    targets = _load_corpora(store, _target_ids(cfg, args.task), "adapt-group")
    group_shared, group_factors, report = adapt_target_group(model, shared, factors, targets, cfg, Rng(cfg.seed).fork("group"))
    save_decomposition(group_shared, group_factors, store.path(env.GROUP_FILE))
    report.checkpoints.append(env.GROUP_FILE)
    report.write(store.path(env.DIR_REPORTS, "target_group.txt"))


def stage_few_shot(store: RunStore, cfg: RunConfig, args, model: FrozenModel) -> None:
    shared, factors = _load_source(store, cfg, "few-shot")
    target = _load_corpora(store, [args.task[0] if args.task else cfg.few_shot_target], "few-shot")[0]
    result = run_few_shot(model, shared, factors, target, cfg, Rng(cfg.seed).fork("few_shot", target.task_id))
    _write_text(store, os.path.join(env.DIR_REPORTS, f"few_shot_{target.task_id}.txt"), result.export())


def stage_ablate(store: RunStore, cfg: RunConfig, args, model: FrozenModel) -> None:
    sources = _load_corpora(store, [s.task_id for s in cfg.source_specs()], "ablate")
    targets = _load_corpora(store, [t.task_id for t in cfg.target_specs()], "ablate")
    runners: Dict[str, Callable] = {
        "grid": run_ablation_grid,
        "objective": run_objective_ablation,
        "sampling": run_sampling_ablation,
        "prompt-length": run_prompt_length_sweep,
        "strategy": run_strategy_ablation,
    }
    suites = list(runners) if args.suite == "all" else [args.suite]
    for suite in suites:
        table = runners[suite](model, sources, targets, cfg)
        text = table.export()
        if suite == "grid":
            text += table.grid_text()
        _write_text(store, os.path.join(env.DIR_REPORTS, f"ablation_{suite.replace('-', '_')}.txt"), text)


def stage_analyze(store: RunStore, cfg: RunConfig, args, model: Optional[FrozenModel]) -> None:
    if not cfg.decomposition:
        raise StageError("similarity analysis needs a decomposed source prompt (decomposition = true)")
    source_shared, source_factors = _load_source(store, cfg, "analyze")
    embeddings = {f.task_id: prompt_embedding(source_shared, f) for f in source_factors}
    for task_id in _target_ids(cfg, args.task):
        shared, factors = load_decomposition(
            store.require(os.path.join(env.target_dir(task_id), "decomposition.mptp"), MAGIC_DECOMPOSITION, "analyze"))
        embeddings[task_id] = prompt_embedding(shared, factors[0])
    sim = similarity_matrix(embeddings)
    _write_text(store, os.path.join(env.DIR_REPORTS, "similarity.txt"), sim.to_text())
    render_heatmap(sim, store.path(env.DIR_REPORTS, "similarity.png"))
    tau = max(1, len(cfg.target_specs()))
    _write_text(store, os.path.join(env.DIR_REPORTS, "efficiency.txt"), efficiency_text(cfg.prompt_len, cfg.d_model, tau))


def stage_report(store: RunStore, cfg: RunConfig, args, model: Optional[FrozenModel]) -> None:
    tau = max(1, len(cfg.target_specs()))
    lines = [efficiency_text(cfg.prompt_len, cfg.d_model, tau).rstrip("\n"), "# accuracies"]
    reports_dir = store.path(env.DIR_REPORTS)
    for fn in sorted(os.listdir(reports_dir)):
        if not fn.endswith(".txt") or fn == "summary.txt":
            continue
        with open(os.path.join(reports_dir, fn)) as f:
            for line in f:
                if line.startswith(("eval\t", "token_eval\t", "mean\t", "ordering\t", "warning\t")):
                    lines.append(f"{fn[:-4]}\t{line.rstrip()}")
    _write_text(store, os.path.join(env.DIR_REPORTS, "summary.txt"), "\n".join(lines) + "\n")


STAGES: Dict[str, Callable[[RunStore, RunConfig, argparse.Namespace, Optional[FrozenModel]], None]] = {
    "gen-tasks": stage_gen_tasks,
    "train-teachers": stage_train_teachers,
    "train-source": stage_train_source,
    "adapt-target": stage_adapt_target,
    "adapt-group": stage_adapt_group,
    "few-shot": stage_few_shot,
    "ablate": stage_ablate,
    "analyze": stage_analyze,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpt", description="multitask prompt transfer pipeline")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="key = value run config; defaults to <output>/run.cfg if present")
    parser.add_argument("--output", default=env.WORK_DIR, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="overrides MPT_SEED and the config seed")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    parser.add_argument("--task", action="append", default=[], help="restrict to these target tasks")
    parser.add_argument("--suite", choices=ABLATION_SUITES, default="grid", help="ablation suite for 'ablate'")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config_path = args.config
    if config_path is None and args.subcommand != "gen-tasks":
        candidate = os.path.join(args.output, env.CONFIG_FILE)
        config_path = candidate if os.path.exists(candidate) else None
    cfg = parse_config(config_path) if config_path else RunConfig().validate()
    builder = ConfigBuilder(cfg).set_overrides(args.set)
    seed = args.seed if args.seed is not None else env.seed_override()
    if seed is not None:
        builder.set_seed(seed)
    return builder.build()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.subcommand
    store = RunStore(args.output)
    status_tracker: Optional[StageStatusTracker] = None
    try:
        cfg = resolve_config(args)
        with store.locked():
            traces.configure(task_dir=env.DIR_LOGS, task_name=stage, work_dir=store.out_dir)
            status_tracker = StageStatusTracker(stage)
            status_tracker.update_status("starting")
            _log_everywhere(f"{stage}: output {store.out_dir}, seed {cfg.seed}")
            model = _load_model(store, stage) if stage in MODEL_STAGES else None
            model_sum = model.checksum() if model is not None else None
            with Timer(f"{stage} finished in {{time_s:.1f}}s"):
                STAGES[stage](store, cfg, args, model)
            if model is not None and model.checksum() != model_sum:
                raise StageError("frozen model weights changed")
            store.write_manifest()
            status_tracker.update_status("finished")
    except KeyboardInterrupt:
        _log_everywhere(f"{stage}: interrupted")
        if status_tracker is not None:
            status_tracker.update_status("interrupted", error_message="interrupted by user")
        return 130
    except Exception as e:
        if traces.context() is not None:
            traces.log_exception(type(e), e, e.__traceback__)
        if status_tracker is not None:
            status_tracker.update_status("failed", error_message=str(e) or str(type(e)))
        sys.stderr.write(termcolor.colored(f"{stage}: {type(e).__name__}: {e}", "red") + "\n")
        return 1
    finally:
        traces.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
