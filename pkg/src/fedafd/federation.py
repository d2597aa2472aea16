"""FedAvg round loop with pluggable dropout controllers and codecs.

One round: pick clients, plan a sub-model per client, extract and encode it
for the downlink, train locally, encode the update for the uplink, rebuild
each client's full-shape model on the server (dropped coordinates keep the
current global values), average weighted by training-set size, then report
losses back to the controller.

Uplink content depends on the codec: with top-k sparsification clients send
the sparsified weight delta (server applies it to its exact copy of the
sub-model); otherwise they send the trained weights. Biases always go raw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import compression as cz
from .config import ExperimentConfig, validate
from .control import make_controller
from .data import FederatedDataset, round_half_up, synthesize
from .model import (
    Batch,
    LayerParams,
    LayerSpec,
    ModelParams,
    ShapeError,
    cnn,
    evaluate,
    init_params,
    local_train,
    mlp,
)
from .netsim import ClockLedger, LinkSampler, NetworkModel, round_time
from .submodel import SubModelSpec, coverage_mask, extract, lift

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("round", "cum_seconds", "cum_down_bytes", "cum_up_bytes", "train_loss", "test_accuracy")

# sub-streams of the experiment seed
_DATA, _INIT, _SELECT, _PLAN, _TRAIN, _LINK, _SIGN = range(7)


def select_clients(n: int, fraction: float, rng: np.random.Generator) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    m = min(n, max(1, round_half_up(fraction * n)))
    return sorted(int(c) for c in rng.choice(n, size=m, replace=False))


def _weighted_sum(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # sorting the terms per coordinate fixes the summation order, so the
    # result does not depend on the order clients were listed in
    terms = stack * weights.reshape((-1,) + (1,) * (stack.ndim - 1))
    return np.sort(terms, axis=0).sum(axis=0)


def aggregate(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Data-size weighted average of full-shape client models.

    Coordinates on which every client agrees are copied exactly.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    counts = np.array([n for _, n in updates], dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("client sample counts must be positive")
    weights = counts / counts.sum()
    first = updates[0][0]
    out = []
    for k in range(len(first)):
        layer = []
        for attr in ("weights", "biases"):
            arrays = [getattr(p[k], attr) for p, _ in updates]
            if any(a.shape != arrays[0].shape for a in arrays):
                raise ShapeError(f"param set {k}: client {attr} shapes differ")
            stack = np.stack(arrays)
            agree = np.all(stack == stack[0], axis=0)
            layer.append(np.where(agree, stack[0], _weighted_sum(stack, weights)))
        out.append(LayerParams(*layer))
    return out


def aggregate_trained_only(
    global_params: ModelParams, updates: Sequence[tuple[ModelParams, int, ModelParams]]
) -> ModelParams:
    """Average each coordinate over the clients whose sub-model contained it.

    ``updates`` holds ``(params, n_c, mask)``; untouched coordinates keep the
    global value.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    counts = np.array([n for _, n, _ in updates], dtype=np.float64)
    out = []
    for k, g in enumerate(global_params):
        layer = []
        for attr in ("weights", "biases"):
            stack = np.stack([getattr(p[k], attr) for p, _, _ in updates])
            mask = np.stack([getattr(m[k], attr) for _, _, m in updates]).astype(np.float64)
            wmask = mask * counts.reshape((-1,) + (1,) * (stack.ndim - 1))
            den = np.sort(wmask, axis=0).sum(axis=0)
            num = np.sort(stack * wmask, axis=0).sum(axis=0)
            base = getattr(g, attr)
            with np.errstate(invalid="ignore", divide="ignore"):
                avg = np.where(den > 0, num / np.where(den > 0, den, 1.0), base)
            first = np.take_along_axis(stack, np.argmax(mask, axis=0)[None], axis=0)[0]
            agree = np.all((stack == first) | (mask == 0), axis=0) & (den > 0)
            layer.append(np.where(agree, first, avg))
        out.append(LayerParams(*layer))
    return out


@dataclass(frozen=True)
class CodecConfig:
    quant8_down: bool = False
    quant8_up: bool = False
    dgc: bool = False
    dgc_ratio: float = 0.25
    dgc_clip: float = 1.0
    dgc_momentum: float = 0.9


@dataclass
class ClientResult:
    client: int
    spec: SubModelSpec
    up_blobs: list
    down_bytes: int
    up_bytes: int
    loss: float
    n_samples: int
    dgc_state: Optional[cz.DgcState] = None


@dataclass
class RoundMetrics:
    round: int
    clients: list[int]
    down_bytes: dict[int, int]
    up_bytes: dict[int, int]
    losses: dict[int, float]
    recorded: dict[int, bool]
    specs: dict[int, str]
    seconds: float
    train_loss: float

    @property
    def total_down(self) -> int:
        return sum(self.down_bytes.values())

    @property
    def total_up(self) -> int:
        return sum(self.up_bytes.values())


def encode_model(params: ModelParams, quant8: bool, sign_seed: Optional[int]) -> list:
    """Weights through the quantizer when enabled; biases always raw."""
    blobs = []
    for k, p in enumerate(params):
        w = cz.quant8_encode(p.weights, None if sign_seed is None else sign_seed + k) if quant8 else cz.raw_encode(p.weights)
        blobs += [w, cz.raw_encode(p.biases)]
    return blobs


def decode_model(blobs: Sequence[cz.CompressedBlob]) -> ModelParams:
    arrays = [cz.decode(b) for b in blobs]
    return [LayerParams(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]


def blob_bytes(blobs) -> int:
    return sum(cz.payload_size_bytes(b) for b in blobs)


def client_update(
    arch: Sequence[LayerSpec],
    global_params: ModelParams,
    spec: SubModelSpec,
    shard: Batch,
    *,
    lr: float,
    epochs: int,
    batch_size: int,
    codecs: CodecConfig,
    sign_seed: int,
    rng: np.random.Generator,
    dgc_state: Optional[cz.DgcState] = None,
    client: int = 0,
) -> ClientResult:
    """Everything one client does in a round, including both codec legs."""
    sub, sub_arch = extract(global_params, arch, spec)
    down = encode_model(sub, codecs.quant8_down, sign_seed)
    start = decode_model(down)
    trained, loss = local_train(sub_arch, start, shard, epochs, batch_size, lr, rng)
    if codecs.dgc:
        if dgc_state is None:
            dgc_state = cz.DgcState(codecs.dgc_ratio, codecs.dgc_clip, codecs.dgc_momentum)
        deltas = [s.weights - t.weights for s, t in zip(start, trained)]
        sparse, dgc_state = cz.dgc_encode(deltas, dgc_state)
        up = []
        for blob, t in zip(sparse, trained):
            up += [blob, cz.raw_encode(t.biases)]
    else:
        up = encode_model(trained, codecs.quant8_up, sign_seed + 7919 if codecs.quant8_up else None)
    return ClientResult(client, spec, up, blob_bytes(down), blob_bytes(up), loss, len(shard), dgc_state)


def server_rebuild(
    arch: Sequence[LayerSpec], global_params: ModelParams, result: ClientResult, codecs: CodecConfig
) -> ModelParams:
    """Decode a client's uplink and lift it to full shape."""
    decoded = decode_model(result.up_blobs)
    if codecs.dgc:
        sub, _ = extract(global_params, arch, result.spec)
        decoded = [LayerParams(s.weights - d.weights, d.biases) for s, d in zip(sub, decoded)]
    return lift(global_params, arch, result.spec, decoded)


def build_arch(cfg: ExperimentConfig) -> list[LayerSpec]:
    if cfg.model == "mlp":
        return mlp(cfg.dim, [cfg.hidden], cfg.n_classes)
    side = int(round(cfg.dim ** 0.5))
    return cnn(side, cfg.cnn_channels, cfg.hidden, cfg.n_classes)


def build_dataset(cfg: ExperimentConfig, seed: int) -> FederatedDataset:
    ds = synthesize(
        cfg.n_clients,
        cfg.samples_per_client,
        cfg.n_classes,
        cfg.dim,
        cfg.partition,
        np.random.default_rng([seed, _DATA]),
        separation=cfg.separation,
        classes_per_client=cfg.classes_per_client,
        seed=seed,
    )
    if cfg.model == "cnn":
        side = int(round(cfg.dim ** 0.5))
        ds = ds.reshaped((1, side, side))
    return ds


class Simulation:
    """State of one seeded experiment; ``step()`` runs a single round."""

    def __init__(self, cfg: ExperimentConfig, seed: int, dataset: FederatedDataset | None = None):
        self.cfg = validate(cfg)
        self.seed = seed
        self.arch = build_arch(cfg)
        self.data = dataset if dataset is not None else build_dataset(cfg, seed)
        self.clients = [c for c in range(len(self.data)) if len(self.data.clients[c].train) > 0]
        self.params = init_params(self.arch, np.random.default_rng([seed, _INIT]))
        self.controller = make_controller(cfg.mode, self.arch, cfg.fdr, len(self.data), cfg.partition)
        self.codecs = CodecConfig(
            cfg.quant8_down, cfg.quant8_up, cfg.dgc, cfg.dgc_ratio, cfg.dgc_clip, cfg.dgc_momentum
        )
        self.select_rng = np.random.default_rng([seed, _SELECT])
        self.links = LinkSampler(
            NetworkModel(cfg.down_mbps, cfg.up_mbps, cfg.link_sampling, cfg.compute_seconds),
            np.random.default_rng([seed, _LINK]),
        )
        self.ledger = ClockLedger()
        self.dgc_memory: dict[int, tuple[SubModelSpec, cz.DgcState]] = {}
        self.round = 0
        self.cum_down = 0
        self.cum_up = 0
        self.test = self.data.pooled_test()

    def _plan_rng(self, t: int):
        return lambda c: np.random.default_rng([self.seed, _PLAN, t, c + 1])

    def _dgc_state_for(self, c: int, spec: SubModelSpec) -> Optional[cz.DgcState]:
        if not self.codecs.dgc or c not in self.dgc_memory:
            return None
        old_spec, state = self.dgc_memory[c]
        # accumulators are only index-aligned with the sub-model they came from
        return state if spec.same_units(old_spec) else None

    def step(self) -> RoundMetrics:
        t = self.round + 1
        cfg = self.cfg
        chosen = [self.clients[i] for i in select_clients(len(self.clients), cfg.client_fraction, self.select_rng)]
        specs = self.controller.plan_round(t, chosen, self._plan_rng(t))
        sign_seed = int(np.random.SeedSequence([self.seed, _SIGN, t]).generate_state(1)[0])

        results = []
        for c in chosen:
            r = client_update(
                self.arch,
                self.params,
                specs[c],
                self.data.clients[c].train,
                lr=cfg.lr,
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                codecs=self.codecs,
                sign_seed=sign_seed,
                rng=np.random.default_rng([self.seed, _TRAIN, t, c]),
                dgc_state=self._dgc_state_for(c, specs[c]),
                client=c,
            )
            if r.dgc_state is not None:
                self.dgc_memory[c] = (specs[c], r.dgc_state)
            results.append(r)

        rebuilt = [server_rebuild(self.arch, self.params, r, self.codecs) for r in results]
        if cfg.aggregate == "trained_only":
            masks = [coverage_mask(self.params, self.arch, r.spec) for r in results]
            self.params = aggregate_trained_only(
                self.params, [(p, r.n_samples, m) for p, r, m in zip(rebuilt, results, masks)]
            )
        else:
            self.params = aggregate([(p, r.n_samples) for p, r in zip(rebuilt, results)])

        losses = {r.client: r.loss for r in results}
        recorded = self.controller.feedback_round(t, specs, losses)

        down = {r.client: r.down_bytes for r in results}
        up = {r.client: r.up_bytes for r in results}
        timing = round_time([(down[c], up[c]) for c in chosen], self.links.next(), cfg.compute_seconds)
        self.ledger.add(timing)
        self.cum_down += sum(down.values())
        self.cum_up += sum(up.values())
        self.round = t
        return RoundMetrics(
            t,
            chosen,
            down,
            up,
            losses,
            recorded,
            {c: specs[c].digest() for c in chosen},
            timing.total_s,
            float(np.mean([losses[c] for c in chosen])),
        )

    def evaluate(self) -> tuple[float, float]:
        return evaluate(self.arch, self.params, self.test)

    def row(self, train_loss: Optional[float]) -> dict:
        acc, _ = self.evaluate()
        return {
            "round": self.round,
            "cum_seconds": self.ledger.cumulative_seconds,
            "cum_down_bytes": self.cum_down,
            "cum_up_bytes": self.cum_up,
            "train_loss": train_loss,
            "test_accuracy": acc,
        }


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    *,
    dataset: FederatedDataset | None = None,
    on_row: Callable[[dict], None] | None = None,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> list[dict]:
    """Run ``cfg.rounds`` rounds and return one metrics row per evaluation.

    Rows are produced for round 0, every ``eval_every`` rounds, and the last round.
    """
    sim = Simulation(cfg, seed, dataset)
    rows = []

    def emit(row):
        rows.append(row)
        if on_row:
            on_row(row)

    emit(sim.row(None))
    for t in range(1, cfg.rounds + 1):
        m = sim.step()
        if on_round:
            on_round(m)
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            emit(sim.row(m.train_loss))
            log.debug("seed %d round %d acc %.4f", seed, t, rows[-1]["test_accuracy"])
    return rows
