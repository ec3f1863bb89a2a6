"""In-process federated training: clients, aggregation, round loop, checkpoints.

Clients talk to the server only through the message types defined here, so
images never leave the client that owns them. ParamSets are plain ordered
dicts of float64 arrays; BN running statistics travel with the learnable
parameters and are averaged with the same weights.
"""

from __future__ import annotations

import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .segnet import NetConfig, ParamSet, SegNet, build_segnet
from .tensor import AdamState, NonFiniteError, Tensor, adam_step, dice_loss, no_grad

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6
CHECKPOINT_MAGIC = b"MLBN"
CHECKPOINT_VERSION = 1


class SignatureError(ValueError):
    """ParamSets with different names or shapes cannot be combined."""


class CheckpointError(ValueError):
    pass


class ClientFailure(RuntimeError):
    def __init__(self, round_idx: int, domain: int, reason: str):
        super().__init__(f"client for domain {domain} failed in round {round_idx}: {reason}")
        self.round = round_idx
        self.domain = domain


# ParamSet algebra -----------------------------------------------------------

def signature(ps: ParamSet) -> Tuple[Tuple[str, tuple], ...]:
    return tuple((name, np.shape(arr)) for name, arr in ps.items())


def copy_param_set(ps: ParamSet) -> ParamSet:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in ps.items()}


def check_simplex(weights, n: Optional[int] = None, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if n is not None and w.size != n:
        raise ValueError(f"{w.size} weights for {n} models")
    if w.size == 0 or np.any(~np.isfinite(w)) or np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights are not on the probability simplex: {w.tolist()}")
    return w


def aggregate(models: Sequence[ParamSet], weights) -> ParamSet:
    """Elementwise convex combination ``sum_i w_i * models[i]``.

    Zero-weight models are skipped, so one-hot weights reproduce a model
    bitwise. Results are clipped to the per-element envelope of the inputs
    to absorb rounding in weights that sum to 1 only approximately.
    """
    if not models:
        raise ValueError("aggregate needs at least one model")
    w = check_simplex(weights, len(models))
    sig = signature(models[0])
    for i, m in enumerate(models[1:], start=1):
        if signature(m) != sig:
            raise SignatureError(f"model {i} signature differs from model 0")
    active = [i for i in range(len(models)) if w[i] != 0.0]
    out: ParamSet = {}
    for name, _ in sig:
        if len(active) == 1 and w[active[0]] == 1.0:
            out[name] = np.array(models[active[0]][name], dtype=np.float64, copy=True)
            continue
        acc = w[active[0]] * models[active[0]][name]
        for i in active[1:]:
            acc = acc + w[i] * models[i][name]
        stack = [models[i][name] for i in active]
        out[name] = np.clip(acc, np.minimum.reduce(stack), np.maximum.reduce(stack))
    return out


def fedavg_weights(clients_or_counts) -> np.ndarray:
    """Data-proportional weights ``n_i / sum(n)``."""
    counts = np.array([c.n_samples if isinstance(c, ClientState) else c for c in clients_or_counts],
                      dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return counts / total


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: ``base * factor ** (epoch // step)``."""
    base: float = 0.01
    step: int = 100
    factor: float = 0.8

    def __post_init__(self):
        if self.base <= 0 or self.step < 1 or not 0 < self.factor <= 1:
            raise ValueError("invalid learning-rate schedule")

    def __call__(self, epoch: int) -> float:
        return self.base * self.factor ** (epoch // self.step)


# Messages ---------------------------------------------------------------------

def _frozen_param_set(ps: ParamSet) -> ParamSet:
    out = {}
    for name, arr in ps.items():
        a = np.array(arr, dtype=np.float64, copy=True)
        a.setflags(write=False)
        out[name] = a
    return out


@dataclass(frozen=True)
class ServerToClient:
    round: int
    params: ParamSet

    def __post_init__(self):
        object.__setattr__(self, "params", _frozen_param_set(self.params))


@dataclass(frozen=True)
class ClientToServer:
    round: int
    domain: int
    params: ParamSet
    n_samples: int
    train_loss: float = float("nan")

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        object.__setattr__(self, "params", _frozen_param_set(self.params))


@dataclass(frozen=True)
class FeatureUpload:
    """Feature rows from one client: an (n, F) matrix, never an image."""
    domain: int
    features: np.ndarray

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64, copy=True)
        if f.ndim != 2:
            raise ValueError(f"feature upload must be an (n, F) matrix, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("feature upload contains non-finite values")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)


def encode_message(msg) -> bytes:
    """Wire form of a message: a tag byte, a small header, then the payload."""
    if isinstance(msg, ServerToClient):
        return b"S" + struct.pack("<I", msg.round) + param_set_to_bytes(msg.params)
    if isinstance(msg, ClientToServer):
        return (b"C" + struct.pack("<IIQd", msg.round, msg.domain, msg.n_samples, msg.train_loss)
                + param_set_to_bytes(msg.params))
    if isinstance(msg, FeatureUpload):
        n, f = msg.features.shape
        return b"F" + struct.pack("<IQI", msg.domain, n, f) + msg.features.astype("<f8").tobytes()
    raise TypeError(f"not a round message: {type(msg).__name__}")


# Clients ----------------------------------------------------------------------

@dataclass
class ClientState:
    domain: int
    images: np.ndarray  # (n, 1, H, W)
    masks: np.ndarray   # (n, S, H, W)
    net: SegNet
    adam: AdamState = field(default_factory=AdamState)
    last_round: int = -1

    def __post_init__(self):
        if len(self.images) == 0 or len(self.images) != len(self.masks):
            raise ValueError(f"client {self.domain}: need a nonempty dataset with one mask per image")

    @property
    def n_samples(self) -> int:
        return int(self.images.shape[0])


def make_clients(datasets: Sequence[Tuple[int, np.ndarray, np.ndarray]], config: NetConfig,
                 seed: int = 0) -> List[ClientState]:
    """One client per (domain, images, masks) triple, each with its own network copy."""
    return [ClientState(d, np.asarray(x, dtype=np.float64), np.asarray(y), build_segnet(config, seed))
            for d, x, y in datasets]


def client_rng(seed: int, domain: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([seed, domain, round_idx])


def local_train(client: ClientState, message: ServerToClient, epochs_per_round: int = 1,
                batch_size: int = 8, schedule: LrSchedule = LrSchedule(), global_epoch: Optional[int] = None,
                seed: int = 0) -> ClientToServer:
    """Load the global model, run local Adam epochs on Dice loss, report back."""
    if message.round <= client.last_round:
        raise ValueError(f"client {client.domain}: round {message.round} after {client.last_round}")
    client.last_round = message.round
    net = client.net
    net.load_param_set(message.params)
    epoch0 = message.round * epochs_per_round if global_epoch is None else global_epoch
    rng = client_rng(seed, client.domain, message.round)
    targets = client.masks.astype(np.float64)
    losses = []
    for e in range(epochs_per_round):
        lr = schedule(epoch0 + e)
        order = rng.permutation(client.n_samples)
        for start in range(0, client.n_samples, batch_size):
            idx = np.sort(order[start:start + batch_size])
            net.zero_grad()
            try:
                loss = dice_loss(net.forward(client.images[idx], training=True), targets[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise ClientFailure(message.round, client.domain, str(exc)) from exc
            adam_step(net.trainable(), net.gradients(), client.adam, lr)
            losses.append(loss.item())
    net.zero_grad()
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return ClientToServer(message.round, client.domain, net.param_set(), client.n_samples, mean_loss)


def dataset_loss(net: SegNet, images: np.ndarray, masks: np.ndarray, batch_size: int = 32) -> float:
    """Mean eval-mode Dice loss over a dataset, batch by batch."""
    vals = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out = net.forward(images[s:s + batch_size], training=False)
            vals.append(dice_loss(out, masks[s:s + batch_size].astype(np.float64)).item())
    return float(np.mean(vals))


@dataclass
class RoundLog:
    round: int
    lr: float
    client_loss: Dict[int, float]

    @property
    def client_dice(self) -> Dict[int, float]:
        return {d: 100.0 * (1.0 - l) for d, l in self.client_loss.items()}


@dataclass
class FederationResult:
    global_params: ParamSet
    local_params: List[ParamSet]
    domains: List[int]
    n_samples: List[int]
    logs: List[RoundLog] = field(default_factory=list)


def run_federation(clients: Sequence[ClientState], rounds: int, config: NetConfig, seed: int = 0,
                   mode: str = "fedavg", epochs_per_round: int = 1, batch_size: int = 8,
                   schedule: LrSchedule = LrSchedule(), threads: int = 1,
                   min_clients: int = 1) -> FederationResult:
    """Distribute, train locally (optionally in parallel), aggregate; repeat.

    The returned ``local_params`` are each client's model after the final
    round, which attention-weighted inference recombines later.
    """
    if mode != "fedavg":
        raise ValueError(f"unsupported federation mode {mode!r}")
    if len(clients) < min_clients:
        raise ValueError(f"need at least {min_clients} clients, got {len(clients)}")
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    global_params = build_segnet(config, seed).param_set()
    weights = fedavg_weights(clients)
    local = [copy_param_set(global_params) for _ in clients]
    logs: List[RoundLog] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(rounds):
            msg = ServerToClient(r, global_params)

            def work(c, msg=msg):
                return local_train(c, msg, epochs_per_round, batch_size, schedule, seed=seed)

            replies = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            local = [copy_param_set(rep.params) for rep in replies]
            global_params = aggregate(local, weights)
            logs.append(RoundLog(r, schedule(r * epochs_per_round),
                                 {rep.domain: rep.train_loss for rep in replies}))
            log.debug("round %d: %s", r, logs[-1].client_loss)
    finally:
        if pool:
            pool.shutdown()
    return FederationResult(global_params, local, [c.domain for c in clients],
                            [c.n_samples for c in clients], logs)


# Checkpoints --------------------------------------------------------------------

def param_set_to_bytes(ps: ParamSet) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(ps))]
    for name, arr in ps.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f8")
        if a.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {a.ndim} too large")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def param_set_from_bytes(buf: bytes) -> ParamSet:
    if len(buf) < 12 + 4:
        raise CheckpointError(f"file too short for a checkpoint header ({len(buf)} bytes)")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this reader supports {CHECKPOINT_VERSION})")
    end = len(buf) - 4
    pos = 12
    out: ParamSet = {}
    for i in range(count):
        where = f"parameter #{i}"
        if pos + 2 > end:
            raise CheckpointError(f"truncated header of {where}")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen + 1 > end:
            raise CheckpointError(f"truncated name of {where}")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"undecodable name of {where}") from exc
        where = f"parameter {name!r}"
        pos += nlen
        rank = buf[pos]
        pos += 1
        if pos + 4 * rank > end:
            raise CheckpointError(f"truncated shape of {where}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 8
        for extent in shape:
            nbytes *= extent
            if nbytes > end - pos:
                break  # stop early so absurd extents cannot overflow
        if nbytes > end - pos:
            raise CheckpointError(f"truncated data of {where}: shape {shape} needs more bytes than remain")
        if name in out:
            raise CheckpointError(f"duplicate {where}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != end:
        raise CheckpointError(f"{end - pos} unexpected trailing bytes before checksum")
    (crc,) = struct.unpack_from("<I", buf, end)
    actual = zlib.crc32(buf[:end]) & 0xFFFFFFFF
    if crc != actual:
        raise CheckpointError(f"CRC32 mismatch: stored {crc:#010x}, computed {actual:#010x}")
    return out


def save_checkpoint(params: ParamSet, path: Union[str, Path]) -> None:
    Path(path).write_bytes(param_set_to_bytes(params))


def load_checkpoint(path: Union[str, Path]) -> ParamSet:
    return param_set_from_bytes(Path(path).read_bytes())
