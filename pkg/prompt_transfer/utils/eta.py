from typing import List

__all__ = ['EtaTracker']


class EtaTracker:
    def __init__(self, total_steps: int):
        self.total_steps = max(0, total_steps)
        self.observations: List[float] = []

    def append(self, seconds: float):
        if len(self.observations) >= self.total_steps:
            raise RuntimeError(f"EtaTracker is full ({self.total_steps} steps)")
        self.observations.append(seconds)

    def eta(self) -> float:
        if not self.observations:
            return 0.0
        return self.average_time() * (self.total_steps - len(self.observations))

    def average_time(self, window_size: int = 5) -> float:
        def _remove_outliers(data):
            q1 = sorted(data)[int(len(data) * 0.25)]
            q3 = sorted(data)[int(len(data) * 0.75)]
            iqr = q3 - q1
            return [x for x in data if q1 - 1.5 * iqr <= x <= q3 + 1.5 * iqr]

        def _running_avg(data, window_size):
            return [sum(data[i:i + window_size]) / window_size
                    for i in range(len(data) - window_size + 1)]

        observations = _remove_outliers(self.observations) or self.observations
        if len(observations) > (window_size * 2):
            observations = _running_avg(observations, window_size=window_size)
        return sum(observations) / len(observations)
