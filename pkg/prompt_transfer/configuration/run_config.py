import dataclasses
import math
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dataclasses_json import config, dataclass_json

from prompt_transfer.configuration.run_defaults import run_defaults
from prompt_transfer.data.taskgen import FAMILIES, SPLITS, TaskSpec
from prompt_transfer.modelling.loss import DistillConfig
from prompt_transfer.modelling.model import INIT_SCHEMES, ModelConfig
from prompt_transfer.utils import traces

__all__ = [
    "RunConfig", "ConfigParseError", "InvalidRunConfigError", "OPTIMIZERS",
    "parse_config", "parse_config_text", "serialize_config", "config_keys", "ConfigBuilder",
]

OPTIMIZERS = ("sgd", "adam")


class ConfigParseError(ValueError):
    def __init__(self, message: str, lineno: Optional[int] = None, path: str = ""):
        self.lineno = lineno
        where = f"{path}:{lineno}: " if lineno is not None else (f"{path}: " if path else "")
        super().__init__(where + message)


class InvalidRunConfigError(ValueError):
    pass


def _d(key: str, **kwargs):
    return field(default=run_defaults[key], **kwargs)


@dataclass_json
@dataclass(frozen=True)
class RunConfig:
    seed: int = _d("seed")
    seeds: Tuple[int, ...] = _d("seeds")
    vocab_size: int = _d("vocab_size")
    d_model: int = _d("d_model")
    n_heads: int = _d("n_heads")
    enc_layers: int = _d("enc_layers")
    dec_layers: int = _d("dec_layers")
    ff_dim: int = _d("ff_dim")
    max_src_len: int = _d("max_src_len")
    max_tgt_len: int = _d("max_tgt_len")
    max_prompt_len: int = _d("max_prompt_len")
    init_scheme: str = _d("init_scheme")
    init_std: float = _d("init_std")
    source_tasks: Tuple[str, ...] = _d("source_tasks")
    target_tasks: Tuple[str, ...] = _d("target_tasks")
    min_len: int = _d("min_len")
    max_len: int = _d("max_len")
    train_size: int = _d("train_size")
    dev_size: int = _d("dev_size")
    test_size: int = _d("test_size")
    prompt_len: int = _d("prompt_len")
    factor_noise_std: float = _d("factor_noise_std")
    lambda_: float = _d("lambda", metadata=config(field_name="lambda"))
    temperature: float = _d("temperature")
    distillation: bool = _d("distillation")
    use_logits_kl: bool = _d("use_logits_kl")
    use_hidden_mse: bool = _d("use_hidden_mse")
    prompt_distance: bool = _d("prompt_distance")
    optimizer: str = _d("optimizer")
    adam_beta1: float = _d("adam_beta1")
    adam_beta2: float = _d("adam_beta2")
    adam_eps: float = _d("adam_eps")
    lr_teacher: float = _d("lr_teacher")
    lr_shared: float = _d("lr_shared")
    lr_specific_source: float = _d("lr_specific_source")
    lr_specific_target: float = _d("lr_specific_target")
    batch_size: int = _d("batch_size")
    teacher_epochs: int = _d("teacher_epochs")
    source_epochs: int = _d("source_epochs")
    target_epochs: int = _d("target_epochs")
    use_heuristics: bool = _d("use_heuristics")
    desk_epoch_scale: float = _d("desk_epoch_scale")
    mixing_cap: int = _d("mixing_cap")
    decomposition: bool = _d("decomposition")
    stochastic_sampling: bool = _d("stochastic_sampling")
    freeze_shared: bool = _d("freeze_shared")
    freeze_specific: bool = _d("freeze_specific")
    few_shot_ks: Tuple[int, ...] = _d("few_shot_ks")
    few_shot_draws: int = _d("few_shot_draws")
    few_shot_target: str = _d("few_shot_target")
    prompt_len_sweep: Tuple[int, ...] = _d("prompt_len_sweep")
    eval_split: str = _d("eval_split")

    def validate(self) -> 'RunConfig':
        def _need(cond: bool, msg: str):
            if not cond:
                raise InvalidRunConfigError(f"run config: {msg}")

        self.model_config()
        for key in ("lr_teacher", "lr_shared", "lr_specific_source", "lr_specific_target",
                    "temperature", "desk_epoch_scale"):
            value = getattr(self, key)
            _need(math.isfinite(value) and value > 0, f"{key}={value} must be > 0")
        _need(math.isfinite(self.lambda_) and self.lambda_ >= 0, f"lambda={self.lambda_} must be >= 0")
        _need(self.init_std > 0 and self.factor_noise_std >= 0, "init_std must be > 0, factor_noise_std >= 0")
        _need(self.init_scheme in INIT_SCHEMES, f"init_scheme={self.init_scheme!r}, expected one of {INIT_SCHEMES}")
        for key in ("batch_size", "train_size", "dev_size", "test_size", "few_shot_draws", "mixing_cap", "min_len"):
            _need(getattr(self, key) >= 1, f"{key}={getattr(self, key)} must be >= 1")
        for key in ("teacher_epochs", "source_epochs", "target_epochs"):
            _need(getattr(self, key) >= 0, f"{key}={getattr(self, key)} must be >= 0")
        _need(self.min_len <= self.max_len, f"min_len={self.min_len} > max_len={self.max_len}")
        _need(self.max_len <= self.max_src_len and self.max_len + 1 <= self.max_tgt_len,
              f"max_len={self.max_len} does not fit max_src_len/max_tgt_len")
        _need(1 <= self.prompt_len <= self.max_prompt_len,
              f"prompt_len={self.prompt_len} outside [1, {self.max_prompt_len}]")
        for l in self.prompt_len_sweep:
            _need(1 <= l <= self.max_prompt_len, f"prompt_len_sweep entry {l} outside [1, {self.max_prompt_len}]")
        _need(len(self.seeds) >= 1, "seeds must list at least one seed")
        _need(all(k >= 1 for k in self.few_shot_ks), f"few_shot_ks={self.few_shot_ks} must be >= 1")
        _need(self.optimizer in OPTIMIZERS, f"optimizer={self.optimizer!r}, expected one of {OPTIMIZERS}")
        _need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0, "adam betas/eps")
        _need(self.eval_split in SPLITS, f"eval_split={self.eval_split!r}")
        _need(not (self.prompt_distance and (self.use_logits_kl or self.use_hidden_mse)),
              "prompt_distance excludes use_logits_kl and use_hidden_mse")
        sources, targets = self.source_specs(), self.target_specs()
        _need(len(sources) >= 1, "no source tasks")
        _need(len(targets) >= 1, "no target tasks")
        ids = [s.task_id for s in sources + targets]
        _need(len(set(ids)) == len(ids), f"duplicate task ids in {ids}")
        _need(self.few_shot_target in {t.task_id for t in targets},
              f"few_shot_target={self.few_shot_target!r} is not a target task")
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers, ff_dim=self.ff_dim,
            max_src_len=self.max_src_len, max_tgt_len=self.max_tgt_len, max_prompt_len=self.max_prompt_len,
        ).validate()

    def distill_config(self) -> DistillConfig:
        if not self.distillation:
            return DistillConfig.disabled(self.lambda_, self.temperature)
        return DistillConfig(
            lambda_=self.lambda_,
            temperature=self.temperature,
            use_logits_kl=self.use_logits_kl,
            use_hidden_mse=self.use_hidden_mse,
            use_prompt_distance=self.prompt_distance,
        ).validate()

    @staticmethod
    def _specs(entries: Sequence[str], key: str) -> List[TaskSpec]:
        specs = []
        for entry in entries:
            if ":" not in entry:
                raise InvalidRunConfigError(f"run config: {key} entry {entry!r} is not 'task_id:family'")
            task_id, family = entry.split(":", 1)
            if family not in FAMILIES:
                raise InvalidRunConfigError(f"run config: {key} entry {entry!r} names unknown family")
            specs.append(TaskSpec(task_id, family))
        return specs

    def source_specs(self) -> List[TaskSpec]:
        return self._specs(self.source_tasks, "source_tasks")

    def target_specs(self) -> List[TaskSpec]:
        return self._specs(self.target_tasks, "target_tasks")

    @property
    def split_sizes(self) -> Tuple[int, int, int]:
        return self.train_size, self.dev_size, self.test_size

    @property
    def len_range(self) -> Tuple[int, int]:
        return self.min_len, self.max_len


def _key_of(f: dataclasses.Field) -> str:
    return "lambda" if f.name == "lambda_" else f.name


_FIELDS: Dict[str, dataclasses.Field] = {_key_of(f): f for f in dataclasses.fields(RunConfig)}
_TYPES = typing.get_type_hints(RunConfig)


def config_keys() -> List[str]:
    return list(_FIELDS.keys())


def _convert(key: str, raw: str) -> Any:
    tp = _TYPES[_FIELDS[key].name]
    if tp is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw
    item = typing.get_args(tp)[0]
    return tuple(item(x.strip()) for x in raw.split(",") if x.strip())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def apply_overrides(cfg: RunConfig, pairs: Dict[str, str], path: str = "", linenos: Optional[Dict[str, int]] = None) -> RunConfig:
    linenos = linenos or {}
    updates = {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ConfigParseError(f"unknown key {key!r}", linenos.get(key), path)
        try:
            updates[_FIELDS[key].name] = _convert(key, raw)
        except ValueError as e:
            raise ConfigParseError(f"{key}: {e}", linenos.get(key), path)
    return dataclasses.replace(cfg, **updates)


def parse_config_text(text: str, path: str = "<string>") -> RunConfig:
    pairs: Dict[str, str] = {}
    linenos: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", lineno, path)
        key, value = (x.strip() for x in line.split("=", 1))
        if not key:
            raise ConfigParseError("empty key", lineno, path)
        if key in pairs:
            raise ConfigParseError(f"duplicate key {key!r} (first on line {linenos[key]})", lineno, path)
        pairs[key] = value
        linenos[key] = lineno
    return apply_overrides(RunConfig(), pairs, path, linenos).validate()


def parse_config(path: str) -> RunConfig:
    with open(path) as f:
        return parse_config_text(f.read(), path)


def serialize_config(cfg: RunConfig) -> str:
    lines = ["# multitask prompt transfer run config"]
    for key, f in _FIELDS.items():
        lines.append(f"{key} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


class ConfigBuilder:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def _set(self, **kwargs) -> 'ConfigBuilder':
        self.cfg = dataclasses.replace(self.cfg, **kwargs)
        return self

    def set_seed(self, seed: int) -> 'ConfigBuilder':
        return self._set(seed=int(seed))

    def set_overrides(self, overrides: Sequence[str]) -> 'ConfigBuilder':
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigParseError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        self.cfg = apply_overrides(self.cfg, pairs, "--set")
        return self

    def set_prompt_len(self, l: int) -> 'ConfigBuilder':
        return self._set(prompt_len=l)

    def set_ablation(self, decomposition: bool, distillation: bool) -> 'ConfigBuilder':
        return self._set(decomposition=decomposition, distillation=distillation)

    def set_objective(self, use_logits_kl: bool, use_hidden_mse: bool, prompt_distance: bool) -> 'ConfigBuilder':
        return self._set(
            distillation=use_logits_kl or use_hidden_mse or prompt_distance,
            use_logits_kl=use_logits_kl, use_hidden_mse=use_hidden_mse, prompt_distance=prompt_distance)

    def set_stochastic_sampling(self, on: bool) -> 'ConfigBuilder':
        return self._set(stochastic_sampling=on)

    def set_freeze(self, shared: bool, specific: bool) -> 'ConfigBuilder':
        return self._set(freeze_shared=shared, freeze_specific=specific)

    def set_target_epochs_by_heuristics(self, ds_len: int) -> 'ConfigBuilder':
        if not self.cfg.use_heuristics:
            return self
        dslen_per_epochs = {
            (0, 10000): 20,
            (10000, 100000000): 10,
        }
        epochs = 20
        for (lhs_dslen, rhs_dslen), e in dslen_per_epochs.items():
            if lhs_dslen <= ds_len < rhs_dslen:
                epochs = e
                break
        epochs = max(1, int(round(epochs * self.cfg.desk_epoch_scale)))
        self._set(target_epochs=epochs)
        traces.log(f"Selected the target schedule by heuristics ds_len={ds_len}: {epochs} epochs")
        return self

    def build(self) -> RunConfig:
        return self.cfg.validate()
