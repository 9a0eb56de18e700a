"""Motion forecasting from the trajectory representation.

The learned head maps a track's hidden state to six (du, dv) waypoint
offsets, each relative to the track's current refined position in the
current ego frame, at 0.5 s spacing over a 3 s horizon.  A constant-velocity
extrapolation serves as the reference predictor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .logs import FORECAST_STEPS, FORECAST_STEP_SECONDS
from .neural import ParamStore, Tape, constant, mlp_forward
from .trackcore import Track


@dataclass
class Forecast:
    track_id: int
    frame: int
    offsets: np.ndarray         # (FORECAST_STEPS, 2) meters


def predict(track: Track, params: ParamStore) -> Forecast:
    """Learned forecast; a pure function of (hidden state, params)."""
    tape = Tape(params)
    out = mlp_forward(tape, "predict", constant(track.lstm.hidden))
    return Forecast(track_id=track.track_id, frame=track.last_state.frame,
                    offsets=out.value.reshape(FORECAST_STEPS, 2).copy())


def cv_baseline(track: Track) -> Forecast:
    """Linear extrapolation of the finite-difference velocity.

    Newborn tracks carry zero velocity, so a single-state track forecasts
    staying put.
    """
    horizon = FORECAST_STEP_SECONDS * np.arange(1, FORECAST_STEPS + 1)
    return Forecast(track_id=track.track_id, frame=track.last_state.frame,
                    offsets=horizon[:, None] * np.asarray(track.velocity))
