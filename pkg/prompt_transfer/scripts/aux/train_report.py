from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from dataclasses_json import dataclass_json

from prompt_transfer.modelling.loss import InvalidLossValueException

__all__ = ["EpochLosses", "TrainReport"]


@dataclass_json
@dataclass
class EpochLosses:
    epoch: int
    l_plm: float
    l_logits: float
    l_hidden: float
    l_total: float


@dataclass_json
@dataclass
class TrainReport:
    stage: str
    seed: int
    epochs: List[EpochLosses] = field(default_factory=list)
    accuracies: Dict[str, float] = field(default_factory=dict)
    token_accuracies: Dict[str, float] = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    params: Dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def add_epoch(self, epoch: int, l_plm: float, l_logits: float, l_hidden: float, l_total: float) -> EpochLosses:
        for name, value in (("l_plm", l_plm), ("l_logits", l_logits), ("l_hidden", l_hidden), ("l_total", l_total)):
            if not np.isfinite(value):
                raise InvalidLossValueException(f"{self.stage} epoch {epoch}: {name} = {value}")
        row = EpochLosses(epoch, float(l_plm), float(l_logits), float(l_hidden), float(l_total))
        self.epochs.append(row)
        return row

    @property
    def final(self) -> EpochLosses:
        return self.epochs[-1]

    def export(self) -> str:
        # wall clock stays out of the export so reruns hash identically
        lines = [f"#stage {self.stage} seed={self.seed}", "#epoch\tl_plm\tl_logits\tl_hidden\tl_total"]
        for e in self.epochs:
            lines.append("%d\t%r\t%r\t%r\t%r" % (e.epoch, e.l_plm, e.l_logits, e.l_hidden, e.l_total))
        for task_id, acc in self.accuracies.items():
            lines.append("eval\t%s\t%.6f" % (task_id, acc))
        for task_id, acc in self.token_accuracies.items():
            lines.append("token_eval\t%s\t%.6f" % (task_id, acc))
        for name, value in self.params.items():
            lines.append("params\t%s\t%s" % (name, value))
        for ckpt in self.checkpoints:
            lines.append("checkpoint\t%s" % ckpt)
        return "\n".join(lines) + "\n"

    def write(self, path: str):
        with open(path, "w") as f:
            f.write(self.export())
