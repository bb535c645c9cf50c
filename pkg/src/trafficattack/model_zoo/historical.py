from __future__ import annotations

import numpy as np

from ..dataset import HOUR, STEPS, WEEK_HOURS, FlowSeries
from ..errors import ContractError, CoverageError
from .base import ForecastModel, check_batch, register_kind


@register_kind
class HAModel(ForecastModel):
    """Historical average: mean of the same hour-of-period in earlier periods.

    Works in raw units and never looks at input flow values; only the calendar
    position of each window matters. ``min_periods`` below ``k_periods`` lets
    short histories average over fewer weeks.
    """

    kind = "ha"

    def __init__(self, history: FlowSeries, period: int = WEEK_HOURS, k_periods: int = 4,
                 min_periods: int | None = None, model_id: str = "ha"):
        min_periods = k_periods if min_periods is None else min_periods
        if not 1 <= min_periods <= k_periods:
            raise ContractError("need 1 <= min_periods <= k_periods")
        self.history = history
        self.period = int(period)
        self.k_periods = int(k_periods)
        self.min_periods = int(min_periods)
        self.model_id = model_id
        self.n_sensors = history.n_sensors

    def predict(self, inputs, sample_times=None):
        check_batch(inputs, self.n_sensors)
        if sample_times is None:
            raise ContractError("historical average needs the sample time of every window")
        if len(sample_times) != np.shape(inputs)[0]:
            raise ContractError("one sample time per window is required")
        return ha_predict(self, sample_times)

    @property
    def warmup_hours(self) -> int:
        return self.min_periods * self.period

    def get_config(self):
        return {
            "model_id": self.model_id,
            "period": self.period,
            "k_periods": self.k_periods,
            "min_periods": self.min_periods,
            "start_time": str(self.history.start_time),
            "sensor_ids": list(self.history.sensor_ids),
        }

    def state_dict(self):
        return {"history": self.history.values.copy()}

    @classmethod
    def from_config(cls, config, state):
        history = FlowSeries(np.asarray(state["history"], dtype=np.float64),
                             np.datetime64(config["start_time"], "h"), tuple(config["sensor_ids"]))
        return cls(history, config["period"], config["k_periods"], config["min_periods"],
                   model_id=config["model_id"])


def ha_predict(model: HAModel, sample_times) -> np.ndarray:
    """Forecast the 12 hours after each window from the history alone.

    ``sample_times`` holds each window's first input hour; the forecast
    covers hours 12..23 after it.
    """
    times = np.asarray(sample_times, dtype="datetime64[h]")
    hist = model.history
    offset = (times - hist.start_time) // HOUR  # [B]
    target = offset[:, None] + STEPS + np.arange(STEPS)[None, :]  # [B, 12]
    lags = model.period * np.arange(1, model.k_periods + 1)
    src = target[:, :, None] - lags[None, None, :]  # [B, 12, K]
    valid = (src >= 0) & (src < hist.n_steps)
    counts = valid.sum(axis=-1)
    if counts.size and counts.min() < model.min_periods:
        b = int(np.argwhere(counts < model.min_periods)[0][0])
        raise CoverageError(
            f"window starting {times[b]} has {counts[b].min()} earlier periods in history, "
            f"needs {model.min_periods}")
    vals = hist.values[np.clip(src, 0, hist.n_steps - 1)]  # [B, 12, K, N]
    vals = np.where(valid[..., None], vals, 0.0)
    return vals.sum(axis=2) / counts[..., None]
