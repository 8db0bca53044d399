from dataclasses import dataclass
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import List, Optional, Union

from prompt_transfer.modelling.prompts import param_count

__all__ = ["EfficiencyRow", "format_k", "efficiency_report", "efficiency_text"]


def format_k(count: Union[int, Fraction]) -> str:
    """
    Counts of 1000 and more in K units with one decimal. Exact integers are
    truncated (77,668 -> "77.6K"); grouped per-task rationals round half-up
    (10,468 -> "10.5K").
    """
    if isinstance(count, Fraction):
        value = Decimal(count.numerator) / Decimal(count.denominator)
        rounding = ROUND_HALF_UP
    else:
        value = Decimal(int(count))
        rounding = ROUND_DOWN
    if value < 1000:
        return str(value.quantize(Decimal("1"), rounding=ROUND_HALF_UP))
    return "%sK" % (value / 1000).quantize(Decimal("0.1"), rounding=rounding)


@dataclass
class EfficiencyRow:
    name: str
    count: Union[int, Fraction]
    formatted: str


def efficiency_report(l: int, d: int, tau: int) -> List[EfficiencyRow]:
    rows = [
        ("vanilla PT", param_count(l, d, "vanilla")),
        ("MPT single-task", param_count(l, d, "single")),
        (f"MPT grouped per-task (tau={tau})", param_count(l, d, "grouped", tau)),
        ("compressed deployment", param_count(l, d, "compressed")),
    ]
    return [EfficiencyRow(name, count, format_k(count)) for name, count in rows]


def _exact(count: Union[int, Fraction]) -> str:
    if isinstance(count, Fraction) and count.denominator != 1:
        return f"{count.numerator}/{count.denominator}"
    return f"{int(count):,}"


def efficiency_text(l: int, d: int, tau: int, title: Optional[str] = None) -> str:
    lines = [title or f"# param/task l={l} d={d} tau={tau}"]
    for row in efficiency_report(l, d, tau):
        lines.append(f"{row.name}\t{_exact(row.count)}\t{row.formatted}")
    return "\n".join(lines) + "\n"
