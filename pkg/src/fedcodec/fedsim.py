"""Federated fine-tuning simulator with a gradient codec on the uplink.

One round:

1. the server Poisson-samples clients;
2. each selected client trains its adapter from the round-start state on top
   of the dense global delta it last received, optionally clips and noises
   the factor increments, packs them into a canvas, encodes, and serialises
   the latent as float32 bytes;
3. the server deserialises, decodes, unpacks, adds back the round-start
   adapter, sums the factors in the LoRA subspace and folds
   ``eta * B~ @ A~`` into the dense global delta;
4. the update goes back down either as the dense delta (``plain``) or as
   the sum of client latents that clients decode themselves (``encoded``).

All transport goes through ``bytes`` so byte counts are measured, not
estimated.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import lora
from ._validation import check_xy
from .codec import AutoEncoderCodec, identity_codec
from .lora import LoraFactors, TargetModel
from .metrics import snr
from .privacy import PrivacySpec, client_rng, gdp_delta, gdp_mu, privatize

logger = logging.getLogger(__name__)

WIRE_DTYPE = np.dtype("<f4")
BYTES_PER_ELEMENT = WIRE_DTYPE.itemsize


@dataclass
class FedConfig:
    """Everything that determines a simulated federation."""

    n_clients: int = 10
    fraction: float = 1.0
    rounds: int = 20
    local_epochs: int = 1
    local_lr: float = 1e-2
    local_batch: int = 32
    eta: float = 1.0
    aggregation: str = "sum"
    downlink: str = "plain"
    codec: str = "identity"
    privacy: Optional[PrivacySpec] = None
    d: int = 64
    n_layers: int = 4
    rank: int = 4
    n_classes: int = 8
    n_samples: int = 6000
    n_test: int = 2000
    separation: float = 4.5
    dirichlet_alpha: float = 0.5
    capture_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.privacy, dict):
            self.privacy = PrivacySpec(**self.privacy)
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.aggregation not in ("sum", "mean"):
            raise ValueError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")
        if self.downlink not in ("plain", "encoded"):
            raise ValueError(f"downlink must be 'plain' or 'encoded', got {self.downlink!r}")
        if not 0 < self.capture_fraction < 1:
            raise ValueError("capture_fraction must be in (0, 1)")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if self.local_epochs < 0 or self.local_batch < 1 or not self.local_lr > 0:
            raise ValueError("invalid local training settings")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown FedConfig keys: {', '.join(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> FedConfig:
    """Desk defaults used by the examples and the acceptance suite.

    Identical to :class:`FedConfig` except that factors are averaged rather
    than summed: with ``eta = 1`` and ten clients the summed product
    ``(sum B)(sum A)`` is about K^2 times a single client's update and the
    run diverges to chance accuracy.
    """
    kw = {"aggregation": "mean"}
    kw.update(overrides)
    return FedConfig(**kw)


def canvas_shape(cfg: FedConfig) -> Tuple[int, int]:
    return lora.canvas_rows(cfg.rank, cfg.n_layers), cfg.d


# --------------------------------------------------------------------- data


def make_task(n_samples: int, d: int, n_classes: int, separation: float = 4.5, seed: int = 0):
    """Class-conditional Gaussians; class means have norm ``separation``."""
    rng = np.random.default_rng([seed, 7])
    means = rng.normal(size=(n_classes, d))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = rng.integers(0, n_classes, size=n_samples)
    X = means[y] + rng.normal(size=(n_samples, d))
    return X, y


@dataclass
class ExperimentData:
    X_capture: np.ndarray
    y_capture: np.ndarray
    X_finetune: np.ndarray
    y_finetune: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    def phase(self, name: str):
        if name == "capture":
            return self.X_capture, self.y_capture
        if name == "finetune":
            return self.X_finetune, self.y_finetune
        raise ValueError(f"unknown phase {name!r}")


def make_experiment_data(cfg: FedConfig) -> ExperimentData:
    """Training pool split into capture / fine-tune parts plus an IID test set."""
    X, y = make_task(cfg.n_samples + cfg.n_test, cfg.d, cfg.n_classes, cfg.separation, cfg.seed)
    Xtr, ytr = X[: cfg.n_samples], y[: cfg.n_samples]
    Xte, yte = X[cfg.n_samples :], y[cfg.n_samples :]
    n_cap = int(round(cfg.capture_fraction * cfg.n_samples))
    order = np.random.default_rng([cfg.seed, 11]).permutation(cfg.n_samples)
    cap, fin = order[:n_cap], order[n_cap:]
    return ExperimentData(Xtr[cap], ytr[cap], Xtr[fin], ytr[fin], Xte, yte)


def partition_dirichlet(
    labels, n_clients: int, alpha: float, seed: int = 0, max_retries: int = 100
) -> List[np.ndarray]:
    """Split sample indices into ``n_clients`` disjoint shards.

    For every class the share of each client is drawn from
    ``Dirichlet(alpha * ones(n_clients))``. The whole draw is repeated when a
    client ends up empty.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty dataset")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if n_clients > labels.size:
        raise ValueError("more clients than samples")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(max_retries):
        shards: List[List[int]] = [[] for _ in range(n_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                shards[k].extend(part.tolist())
        if all(shards):
            return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]
    raise RuntimeError(f"Dirichlet partition left a client empty after {max_retries} draws")


def sample_clients(n_clients: int, fraction: float, seed: int, round_index: int) -> np.ndarray:
    """Poisson sampling: each client joins independently with prob ``fraction``.

    An empty draw is redrawn once; if still empty one client is picked
    uniformly.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng([seed, round_index, 0x5A])
    for _ in range(2):
        chosen = np.flatnonzero(rng.random(n_clients) < fraction)
        if chosen.size:
            return chosen
    return np.array([rng.integers(n_clients)])


# ---------------------------------------------------------------- transport


def serialize(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=WIRE_DTYPE).tobytes()


def deserialize(buf: bytes, shape: Sequence[int]) -> np.ndarray:
    return np.frombuffer(buf, dtype=WIRE_DTYPE).reshape(tuple(shape)).astype(np.float64)


# ------------------------------------------------------------------- rounds


@dataclass
class ServerState:
    round: int
    delta: np.ndarray  # authoritative dense global delta, (L, 4, d, d)
    client_delta: np.ndarray  # the copy clients hold after the last downlink


@dataclass
class Environment:
    cfg: FedConfig
    model: TargetModel
    adapter0: LoraFactors
    shards: List[Tuple[np.ndarray, np.ndarray]]
    codec: AutoEncoderCodec
    X_eval: np.ndarray
    y_eval: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    on_upload: Optional[Callable[[int, int, np.ndarray], None]] = None
    on_clipped: Optional[Callable[[int, int, LoraFactors], None]] = None
    threads: int = 1


@dataclass
class RoundReport:
    round: int
    n_selected: int
    selected: str
    uplink_bytes: int
    uplink_bytes_per_client: int
    identity_bytes_per_client: int
    downlink_bytes: int
    recon_mse: float
    recon_mse_max: float
    recon_snr: float
    update_norm: float
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    privacy_mu: float
    privacy_delta: float
    codec_trained: bool
    downlink_nonlinearity: float
    recon_mse_per_client: str = ""

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def init_state(model: TargetModel) -> ServerState:
    z = np.zeros_like(model.base)
    return ServerState(0, z, z.copy())


def _client_update(env: Environment, state: ServerState, t: int, cid: int):
    cfg = env.cfg
    X, y = env.shards[cid]
    inc = lora.local_train(
        env.model,
        env.adapter0,
        X,
        y,
        epochs=cfg.local_epochs,
        lr=cfg.local_lr,
        batch_size=cfg.local_batch,
        seed=[cfg.seed, t, cid],
        delta=state.client_delta,
    )
    return inc


def _evaluate(model, delta, X, y):
    logits = lora.predict_logits(model, X, None, delta)
    return lora.cross_entropy_np(logits, y), float(np.mean(logits.argmax(axis=1) == y))


def run_round(state: ServerState, env: Environment) -> Tuple[ServerState, RoundReport]:
    cfg = env.cfg
    t = state.round
    codec = env.codec
    selected = sample_clients(cfg.n_clients, cfg.fraction, cfg.seed, t)
    K = len(selected)

    # -- clients
    if env.threads > 1:
        with ThreadPoolExecutor(max_workers=env.threads) as pool:
            incs = list(pool.map(lambda c: _client_update(env, state, t, int(c)), selected))
    else:
        incs = [_client_update(env, state, t, int(c)) for c in selected]

    uploads = []  # (cid, sent canvas, payload bytes)
    for cid, inc in zip(selected, incs):
        cid = int(cid)
        if cfg.privacy is not None:
            hook = None if env.on_clipped is None else (lambda f, c=cid: env.on_clipped(c, t, f))
            inc = privatize(inc, cfg.privacy, client_rng(cfg.privacy.seed, t, cid), K, on_clipped=hook)
        canvas = lora.pack(inc)
        if env.on_upload is not None:
            env.on_upload(cid, t, canvas)
        uploads.append((cid, canvas, serialize(codec.transform(canvas))))

    # -- server: decode each client separately
    latent_shape = codec.spec_.latent_shape
    latents, decoded, mses, snrs = [], [], [], []
    for cid, canvas, payload in uploads:
        F = deserialize(payload, latent_shape)
        rec = codec.inverse_transform(F)
        latents.append(F)
        decoded.append(rec)
        rep = snr(canvas, rec)
        mses.append(rep.mse)
        snrs.append(rep.snr)

    A0 = env.adapter0
    values = [lora.unpack(rec, cfg.rank, cfg.n_layers) + A0 for rec in decoded]
    agg = lora.aggregate(values, cfg.aggregation)
    nonlin = 0.0

    if cfg.downlink == "plain":
        new_delta = lora.apply_global_update(state.delta, agg, cfg.eta)
        down = serialize(new_delta)
        client_delta = deserialize(down, new_delta.shape)
    else:
        F_sum = np.zeros(latent_shape)
        for F in latents:
            F_sum += F
        down = serialize(F_sum)
        # what every client computes from the broadcast
        summed = codec.inverse_transform(deserialize(down, latent_shape))
        nonlin = float(np.linalg.norm(summed - np.sum(decoded, axis=0)))
        inc_sum = lora.unpack(summed, cfg.rank, cfg.n_layers)
        if cfg.aggregation == "sum":
            client_agg = inc_sum + A0.scaled(K)
        else:
            client_agg = inc_sum.scaled(1.0 / K) + A0
        new_delta = lora.apply_global_update(state.client_delta, client_agg, cfg.eta)
        client_delta = new_delta.copy()
        agg = client_agg

    update_norm = float(np.linalg.norm(cfg.eta * agg.effective()))
    if not np.all(np.isfinite(new_delta)):
        raise FloatingPointError(f"non-finite global update in round {t}")

    train_loss, train_acc = _evaluate(env.model, new_delta, env.X_eval, env.y_eval)
    test_loss, test_acc = _evaluate(env.model, new_delta, env.X_test, env.y_test)
    mu = dlt = float("nan")
    if cfg.privacy is not None and cfg.privacy.sigma > 0:
        mu = gdp_mu(cfg.fraction, t + 1, cfg.privacy.sigma)
        dlt = gdp_delta(cfg.privacy.epsilon, mu)

    per_client = len(uploads[0][2])
    report = RoundReport(
        round=t,
        n_selected=K,
        selected=";".join(str(int(c)) for c in selected),
        uplink_bytes=sum(len(u[2]) for u in uploads),
        uplink_bytes_per_client=per_client,
        identity_bytes_per_client=uploads[0][1].size * BYTES_PER_ELEMENT,
        downlink_bytes=len(down),
        recon_mse=float(np.mean(mses)),
        recon_mse_max=float(np.max(mses)),
        recon_snr=float(np.mean(snrs)),
        update_norm=update_norm,
        train_loss=train_loss,
        train_accuracy=train_acc,
        test_loss=test_loss,
        test_accuracy=test_acc,
        privacy_mu=mu,
        privacy_delta=dlt,
        codec_trained=bool(codec.trained_),
        downlink_nonlinearity=nonlin,
        recon_mse_per_client=";".join(f"{m:.6e}" for m in mses),
    )
    return ServerState(t + 1, new_delta, client_delta), report


# --------------------------------------------------------------- experiment


@dataclass
class Transcript:
    reports: List[RoundReport] = field(default_factory=list)
    state: Optional[ServerState] = None
    config: Optional[FedConfig] = None
    codec_id: str = ""

    def __len__(self):
        return len(self.reports)

    @property
    def final_accuracy(self) -> float:
        return self.reports[-1].test_accuracy

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.reports]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = RoundReport.columns()
        w.writerow(cols)
        for r in self.reports:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict() if self.config else None,
            "codec_id": self.codec_id,
            "rounds": len(self.reports),
            "seeds": {"seed": self.config.seed if self.config else None,
                      "privacy_seed": self.config.privacy.seed if self.config and self.config.privacy else None},
            "final_test_accuracy": self.final_accuracy if self.reports else None,
            "delta_sha256": hashlib.sha256(serialize(self.state.delta)).hexdigest() if self.state else None,
        }


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def build_environment(cfg: FedConfig, data: ExperimentData, phase: str, codec: Optional[AutoEncoderCodec] = None,
                      on_upload=None, on_clipped=None, threads: int = 1) -> Environment:
    model, adapter0 = lora.init_model(cfg.d, cfg.n_layers, cfg.rank, cfg.n_classes, cfg.seed)
    X, y = data.phase(phase)
    parts = partition_dirichlet(y, cfg.n_clients, cfg.dirichlet_alpha, seed=cfg.seed + (0 if phase == "finetune" else 1))
    shards = [(X[p], y[p]) for p in parts]
    if codec is None:
        codec = resolve_codec(cfg.codec, canvas_shape(cfg))
    if codec.spec_.input_shape != canvas_shape(cfg):
        raise ValueError(f"codec input {codec.spec_.input_shape} does not match canvas {canvas_shape(cfg)}")
    return Environment(cfg, model, adapter0, shards, codec, X, y, data.X_test, data.y_test,
                       on_upload=on_upload, on_clipped=on_clipped, threads=threads)


def resolve_codec(name: str, shape: Tuple[int, int]) -> AutoEncoderCodec:
    if name in (None, "", "identity"):
        return identity_codec(shape)
    return AutoEncoderCodec.load(name)


def run_experiment(
    cfg: FedConfig,
    codec: Optional[AutoEncoderCodec] = None,
    data: Optional[ExperimentData] = None,
    phase: str = "finetune",
    on_upload=None,
    on_clipped=None,
    threads: int = 1,
) -> Transcript:
    """Run ``cfg.rounds`` rounds; returns the per-round transcript and final state."""
    if data is None:
        data = make_experiment_data(cfg)
    env = build_environment(cfg, data, phase, codec, on_upload, on_clipped, threads)
    state = init_state(env.model)
    tr = Transcript(config=cfg, codec_id=env.codec.codec_id())
    for _ in range(cfg.rounds):
        state, rep = run_round(state, env)
        tr.reports.append(rep)
        logger.info("round %d acc %.4f uplink %d", rep.round, rep.test_accuracy, rep.uplink_bytes)
    tr.state = state
    return tr


def downlink(mode: str, state: ServerState, codec: Optional[AutoEncoderCodec] = None, latents=None) -> bytes:
    """Serialise the server broadcast for ``mode``.

    ``plain`` ships the dense accumulated delta; ``encoded`` ships the sum of
    the client latents and requires a codec.
    """
    if mode == "plain":
        return serialize(state.delta)
    if mode == "encoded":
        if codec is None or latents is None:
            raise ValueError("encoded downlink needs the codec and the client latents")
        F_sum = np.zeros(codec.spec_.latent_shape)
        for F in latents:
            F_sum += F
        return serialize(F_sum)
    raise ValueError(f"unknown downlink mode {mode!r}")


# ----------------------------------------------------------------- estimator


class FederatedLoRAClassifier(ClassifierMixin, BaseEstimator):
    """Federated LoRA fine-tuning of the toy model as a scikit-learn classifier.

    ``fit`` partitions ``(X, y)`` across ``config.n_clients`` clients and runs
    the compressed protocol; ``predict`` uses the resulting global model.
    """

    def __init__(self, config: Optional[FedConfig] = None, codec: Optional[AutoEncoderCodec] = None,
                 threads: int = 1):
        self.config = config
        self.codec = codec
        self.threads = threads

    def fit(self, X, y, X_test=None, y_test=None):
        cfg = self.config if self.config is not None else FedConfig()
        X, y = check_xy(X, y, cfg.d)
        self.classes_ = np.arange(cfg.n_classes)
        if X_test is None:
            X_test, y_test = X, y
        X_test, y_test = check_xy(X_test, y_test, cfg.d)
        data = ExperimentData(X[:0], y[:0], X, y, X_test, y_test)
        self.transcript_ = run_experiment(cfg, codec=self.codec, data=data, threads=self.threads)
        self.model_, _ = lora.init_model(cfg.d, cfg.n_layers, cfg.rank, cfg.n_classes, cfg.seed)
        self.delta_ = self.transcript_.state.delta
        return self

    def decision_function(self, X):
        check_is_fitted(self, "delta_")
        X, _ = check_xy(X, np.zeros(len(X)), self.model_.d)
        return lora.predict_logits(self.model_, X, None, self.delta_)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
