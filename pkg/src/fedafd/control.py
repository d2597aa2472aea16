"""Dropout controllers deciding which sub-model each client trains.

``NoDropout`` and ``RandomDropout`` are the baseline and plain federated
dropout. ``MultiModelAFD`` keeps a score map, last loss and recorded flag per
client; ``SingleModelAFD`` keeps one of each on the server and hands every
selected client the same sub-model.

Loss bookkeeping: a client's (or the server's) first feedback only stores the
loss. Later feedback records the spec and bumps its scores when the loss
strictly improves on the stored one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import LayerSpec
from .submodel import (
    ScoreMap,
    SubModelSpec,
    empty_score_map,
    full_spec,
    select_random,
    select_weighted,
    update_score_map,
)


class NonIidWarning(UserWarning):
    pass


@dataclass
class AfdState:
    """Score map, last loss and recorded flag for one client (or the server)."""

    score_map: ScoreMap
    last_loss: float = 0.0
    recorded: bool = False
    last_spec: Optional[SubModelSpec] = None
    feedbacks: int = 0

    def copy(self) -> "AfdState":
        return AfdState(
            {i: s.copy() for i, s in self.score_map.items()},
            self.last_loss,
            self.recorded,
            self.last_spec,
            self.feedbacks,
        )


def plan(state: AfdState, arch: Sequence[LayerSpec], fdr: float, rng: np.random.Generator) -> SubModelSpec:
    if state.feedbacks == 0:
        return select_random(arch, fdr, rng)
    if state.recorded:
        return state.last_spec
    return select_weighted(arch, state.score_map, fdr, rng)


def feedback(state: AfdState, spec: SubModelSpec, loss: float) -> AfdState:
    """Apply one loss observation and return the new state (input untouched)."""
    if loss < 0:
        raise ValueError(f"loss must be nonnegative, got {loss}")
    new = state.copy()
    if state.feedbacks > 0 and loss < state.last_loss:
        new.last_spec = spec
        new.score_map = update_score_map(state.score_map, spec, state.last_loss, loss)
        new.recorded = True
    else:
        new.recorded = False
    new.last_loss = float(loss)
    new.feedbacks += 1
    return new


class NoDropout:
    name = "none"

    def __init__(self, arch: Sequence[LayerSpec]):
        self.spec = full_spec(arch)

    def plan_round(self, t: int, clients: Sequence[int], rng_for) -> dict[int, SubModelSpec]:
        return {c: self.spec for c in clients}

    def feedback_round(self, t: int, specs: dict[int, SubModelSpec], losses: dict[int, float]) -> dict:
        return {}


class RandomDropout:
    """Federated dropout: an independent uniform sub-model per client per round."""

    name = "fd"

    def __init__(self, arch: Sequence[LayerSpec], fdr: float):
        self.arch = list(arch)
        self.fdr = fdr

    def plan_round(self, t, clients, rng_for):
        return {c: select_random(self.arch, self.fdr, rng_for(c)) for c in clients}

    def feedback_round(self, t, specs, losses):
        return {}


class MultiModelAFD:
    name = "afd_multi"

    def __init__(self, arch: Sequence[LayerSpec], fdr: float, n_clients: int):
        self.arch = list(arch)
        self.fdr = fdr
        self.states = {c: AfdState(empty_score_map(arch)) for c in range(n_clients)}

    def mm_plan(self, c: int, rng: np.random.Generator) -> SubModelSpec:
        return plan(self.states[c], self.arch, self.fdr, rng)

    def mm_feedback(self, c: int, spec: SubModelSpec, loss: float) -> None:
        self.states[c] = feedback(self.states[c], spec, loss)

    def plan_round(self, t, clients, rng_for):
        return {c: self.mm_plan(c, rng_for(c)) for c in clients}

    def feedback_round(self, t, specs, losses):
        for c in sorted(losses):
            self.mm_feedback(c, specs[c], losses[c])
        return {c: self.states[c].recorded for c in sorted(losses)}


class SingleModelAFD:
    name = "afd_single"

    def __init__(self, arch: Sequence[LayerSpec], fdr: float):
        self.arch = list(arch)
        self.fdr = fdr
        self.state = AfdState(empty_score_map(arch))

    def sm_plan(self, rng: np.random.Generator) -> SubModelSpec:
        return plan(self.state, self.arch, self.fdr, rng)

    def sm_feedback(self, spec: SubModelSpec, client_losses: Sequence[float]) -> float:
        if len(client_losses) == 0:
            raise ValueError("need at least one client loss")
        avg = sum(client_losses) / len(client_losses)
        self.state = feedback(self.state, spec, avg)
        return avg

    def plan_round(self, t, clients, rng_for):
        spec = self.sm_plan(rng_for(-1))
        return {c: spec for c in clients}

    def feedback_round(self, t, specs, losses):
        order = sorted(losses)
        self.sm_feedback(specs[order[0]], [losses[c] for c in order])
        return {c: self.state.recorded for c in order}


def make_controller(mode: str, arch: Sequence[LayerSpec], fdr: float, n_clients: int, partition: str = "iid"):
    if mode == "none":
        return NoDropout(arch)
    if mode == "fd":
        return RandomDropout(arch, fdr)
    if mode == "afd_multi":
        return MultiModelAFD(arch, fdr, n_clients)
    if mode == "afd_single":
        if partition != "iid":
            warnings.warn(
                "Single-Model AFD compares average losses across different client sets "
                "and is not effective on non-IID data",
                NonIidWarning,
                stacklevel=2,
            )
        return SingleModelAFD(arch, fdr)
    raise ValueError(f"unknown dropout mode {mode!r}")
