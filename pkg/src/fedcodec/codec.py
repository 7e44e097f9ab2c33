"""Autoencoder gradient codecs.

Two convolutional families plus an identity baseline:

``resnet2d``
    canvas ``(rows, cols)`` -> image ``(1, rows, cols)``; a stride-1 3x3 stem,
    one stride-2 3x3 conv per stage, then residual blocks. The decoder mirrors
    it with stride-2 transposed convs and ends with a 7x7 conv.
``cnn1d``
    every canvas row is a 1-D signal ``(1, cols)``; stride-2 kernel-3 convs
    per stage followed by a 1x1 conv to ``latent_channels``. The decoder uses
    stride-2 transposed convs and a final 1x1 conv.
``identity``
    latent == canvas.

:class:`AutoEncoderCodec` follows the scikit-learn transformer protocol:
``fit`` trains on canvases, ``transform`` encodes, ``inverse_transform``
decodes.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from ._validation import check_canvases
from .capture import load_tensors, save_tensors

logger = logging.getLogger(__name__)

FAMILIES = ("resnet2d", "cnn1d", "identity")


class UnsupportedFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    """Declarative codec architecture.

    ``channels`` gives the output channels of each stride-2 stage, so
    ``len(channels)`` is the number of halvings.
    """

    family: str = "resnet2d"
    input_shape: Tuple[int, int] = (128, 64)
    channels: Tuple[int, ...] = (2, 4, 8)
    n_res_blocks: int = 3
    kernel_size: int = 3
    head_kernel: int = 7
    latent_channels: Optional[int] = None  # cnn1d only

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.family not in FAMILIES:
            raise UnsupportedFamilyError(f"unsupported codec family {self.family!r}")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (rows, cols), got {self.input_shape}")
        if self.family == "identity":
            return
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty tuple of positive ints")
        if self.kernel_size % 2 != 1 or self.head_kernel % 2 != 1:
            raise ValueError("kernel sizes must be odd")
        f = 2 ** self.stages
        rows, cols = self.input_shape
        if cols % f:
            raise ValueError(f"cols={cols} not divisible by 2^{self.stages}")
        if self.family == "resnet2d" and rows % f:
            raise ValueError(f"rows={rows} not divisible by 2^{self.stages}")
        if self.family == "cnn1d" and (self.latent_channels is None or self.latent_channels < 1):
            raise ValueError("cnn1d needs latent_channels >= 1")

    @property
    def stages(self) -> int:
        return 0 if self.family == "identity" else len(self.channels)

    @property
    def network_input_shape(self) -> Tuple[int, ...]:
        """Per-canvas tensor shape fed to the encoder."""
        rows, cols = self.input_shape
        if self.family == "cnn1d":
            return (rows, 1, cols)
        if self.family == "resnet2d":
            return (1, rows, cols)
        return (rows, cols)

    @property
    def latent_shape(self) -> Tuple[int, ...]:
        rows, cols = self.input_shape
        f = 2 ** self.stages
        if self.family == "cnn1d":
            return (rows, self.latent_channels, cols // f)
        if self.family == "resnet2d":
            return (self.channels[-1], rows // f, cols // f)
        return (rows, cols)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def latent_size(self) -> int:
        return int(np.prod(self.latent_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecSpec":
        d = dict(d)
        if d.get("family") not in FAMILIES:
            raise UnsupportedFamilyError(f"unsupported codec family {d.get('family')!r}")
        d["input_shape"] = tuple(d["input_shape"])
        d["channels"] = tuple(d.get("channels", ()))
        return cls(**d)


def compression_ratio(spec: CodecSpec) -> float:
    """Latent element count over canvas element count."""
    return spec.latent_size / spec.input_size


# Full-scale presets (7B-model canvases). Shape-checked only; far too large to train here.
PRESETS: Dict[str, CodecSpec] = {
    "resnet2d-full": CodecSpec("resnet2d", (4096, 2048), (2, 4, 8, 16, 32, 64), 3, 3, 7),
    "cnn1d-full": CodecSpec("cnn1d", (128, 32768), (64, 128, 256, 64, 64, 64, 64), 0, 3, 1, latent_channels=4),
    "resnet2d-desk": CodecSpec("resnet2d", (128, 64), (2, 4, 8), 3, 3, 7),
    "cnn1d-desk": CodecSpec("cnn1d", (128, 64), (8, 16, 16), 0, 3, 1, latent_channels=2),
    "identity-desk": CodecSpec("identity", (128, 64), ()),
}

#: compression ratios as printed in the source tables, for side-by-side reporting
REPORTED_CR = {"cnn1d": 0.0321, "resnet2d": 0.0156}


def get_preset(name: str, input_shape: Optional[Tuple[int, int]] = None) -> CodecSpec:
    if name not in PRESETS:
        raise KeyError(f"unknown codec preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    if input_shape is not None:
        d = spec.to_dict()
        d["input_shape"] = tuple(input_shape)
        spec = CodecSpec.from_dict(d)
    return spec


# ------------------------------------------------------------------ networks


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(spec: CodecSpec, seed: int = 0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: Dict[str, np.ndarray] = {}
    k = spec.kernel_size
    if spec.family == "resnet2d":
        p["enc.stem.w"] = _he(rng, (1, 1, k, k), k * k)
        p["enc.stem.b"] = np.zeros(1)
        cin = 1
        for i, c in enumerate(spec.channels):
            p[f"enc.down{i}.w"] = _he(rng, (c, cin, k, k), cin * k * k)
            p[f"enc.down{i}.b"] = np.zeros(c)
            cin = c
        c = spec.channels[-1]
        for side in ("enc", "dec"):
            for j in range(spec.n_res_blocks):
                for m in (1, 2):
                    # second conv of each block starts small so blocks begin near identity
                    s = 1.0 if m == 1 else 0.1
                    p[f"{side}.res{j}.conv{m}.w"] = s * _he(rng, (c, c, k, k), c * k * k)
                    p[f"{side}.res{j}.conv{m}.b"] = np.zeros(c)
        outs = list(reversed(spec.channels[:-1])) + [1]
        cin = spec.channels[-1]
        for i, c in enumerate(outs):
            p[f"dec.up{i}.w"] = _he(rng, (cin, c, k, k), cin * k * k)
            p[f"dec.up{i}.b"] = np.zeros(c)
            cin = c
        h = spec.head_kernel
        p["dec.head.w"] = _he(rng, (1, 1, h, h), h * h) * 0.5
        p["dec.head.b"] = np.zeros(1)
    elif spec.family == "cnn1d":
        cin = 1
        for i, c in enumerate(spec.channels):
            p[f"enc.down{i}.w"] = _he(rng, (c, cin, k), cin * k)
            p[f"enc.down{i}.b"] = np.zeros(c)
            cin = c
        lc = spec.latent_channels
        p["enc.proj.w"] = _he(rng, (lc, cin, 1), cin)
        p["enc.proj.b"] = np.zeros(lc)
        cin = lc
        outs = list(reversed(spec.channels))
        for i, c in enumerate(outs):
            p[f"dec.up{i}.w"] = _he(rng, (cin, c, k), cin * k)
            p[f"dec.up{i}.b"] = np.zeros(c)
            cin = c
        p["dec.head.w"] = _he(rng, (1, cin, 1), cin) * 0.5
        p["dec.head.b"] = np.zeros(1)
    return p


def _res_block(t, P, prefix):
    h = ad.relu(ad.conv2d(t, P[prefix + ".conv1.w"], P[prefix + ".conv1.b"], padding=1))
    h = ad.conv2d(h, P[prefix + ".conv2.w"], P[prefix + ".conv2.b"], padding=1)
    return ad.add(t, h)


def encoder_graph(spec: CodecSpec, P, x: ad.Tensor) -> ad.Tensor:
    """Encoder on a batch ``(N, *network_input_shape)``; P maps names to tensors/arrays."""
    pad = spec.kernel_size // 2
    if spec.family == "resnet2d":
        h = ad.conv2d(x, P["enc.stem.w"], P["enc.stem.b"], padding=pad)
        last = len(spec.channels) - 1
        for i in range(len(spec.channels)):
            h = ad.conv2d(h, P[f"enc.down{i}.w"], P[f"enc.down{i}.b"], stride=2, padding=pad)
            if i < last:
                h = ad.relu(h)
        for j in range(spec.n_res_blocks):
            h = _res_block(h, P, f"enc.res{j}")
        return h
    if spec.family == "cnn1d":
        h = x
        for i in range(len(spec.channels)):
            h = ad.relu(ad.conv1d(h, P[f"enc.down{i}.w"], P[f"enc.down{i}.b"], stride=2, padding=pad))
        return ad.conv1d(h, P["enc.proj.w"], P["enc.proj.b"])
    return x


def decoder_graph(spec: CodecSpec, P, z: ad.Tensor) -> ad.Tensor:
    pad = spec.kernel_size // 2
    if spec.family == "resnet2d":
        h = z
        for j in range(spec.n_res_blocks):
            h = _res_block(h, P, f"dec.res{j}")
        n_up = len(spec.channels)
        for i in range(n_up):
            h = ad.conv_transpose2d(
                h, P[f"dec.up{i}.w"], P[f"dec.up{i}.b"], stride=2, padding=pad, output_padding=1
            )
            if i < n_up - 1:
                h = ad.relu(h)
        return ad.conv2d(h, P["dec.head.w"], P["dec.head.b"], padding=spec.head_kernel // 2)
    if spec.family == "cnn1d":
        h = z
        for i in range(len(spec.channels)):
            h = ad.relu(
                ad.conv_transpose1d(h, P[f"dec.up{i}.w"], P[f"dec.up{i}.b"], stride=2, padding=pad, output_padding=1)
            )
        return ad.conv1d(h, P["dec.head.w"], P["dec.head.b"])
    return z


# ------------------------------------------------------------------- codec


@dataclass
class EncodedFeature:
    latent: np.ndarray
    canvas_shape: Tuple[int, int]
    codec_id: str


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)


class AutoEncoderCodec(TransformerMixin, BaseEstimator):
    """Gradient-canvas autoencoder trained by reconstruction MSE with Adam.

    Parameters
    ----------
    spec : CodecSpec
        Architecture. ``None`` means the desk resnet2d preset.
    epochs : int
        Passes over the training canvases.
    lr : float
        Adam learning rate.
    batch_size : int
        Canvases per minibatch; batches are reshuffled every epoch.
    random_state : int
        Seeds both parameter initialisation and batch order.

    Attributes
    ----------
    params_ : dict of ndarray
    scale_ : float
        RMS of the training canvases. Inputs are divided by it before the
        encoder and outputs multiplied by it after the decoder.
    history_ : TrainingHistory
        Per-epoch train/test MSE in canvas units.
    trained_ : bool
        False for codecs built but never fitted.
    """

    def __init__(self, spec: Optional[CodecSpec] = None, epochs: int = 200, lr: float = 2e-4, batch_size: int = 4,
                 random_state: int = 0, verbose: bool = False):
        self.spec = spec
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state
        self.verbose = verbose

    # -- helpers
    @property
    def spec_(self) -> CodecSpec:
        return self.spec if self.spec is not None else PRESETS["resnet2d-desk"]

    def _initialize(self):
        spec = self.spec_
        self.params_ = init_params(spec, self.random_state)
        self.scale_ = 1.0
        self.history_ = TrainingHistory()
        self.trained_ = spec.family == "identity"
        return self

    def _check_ready(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("codec has not been built or fitted")

    def _to_net(self, X: np.ndarray) -> np.ndarray:
        spec = self.spec_
        n = X.shape[0]
        if spec.family == "cnn1d":
            return X.reshape(n * spec.input_shape[0], 1, spec.input_shape[1])
        if spec.family == "resnet2d":
            return X.reshape(n, 1, *spec.input_shape)
        return X

    def _from_net(self, Y: np.ndarray, n: int) -> np.ndarray:
        return Y.reshape(n, *self.spec_.input_shape)

    def _latent_batch(self, Z: np.ndarray, n: int) -> np.ndarray:
        return Z.reshape(n, *self.spec_.latent_shape)

    def _latent_to_net(self, F: np.ndarray) -> np.ndarray:
        spec = self.spec_
        n = F.shape[0]
        if spec.family == "cnn1d":
            return F.reshape(n * spec.input_shape[0], spec.latent_channels, -1)
        return F

    # -- training
    def _loss_graph(self, xb: np.ndarray):
        g = ad.Graph()
        P = {k: g.param(k, v) for k, v in self.params_.items()}
        x = g.input(xb)
        out = decoder_graph(self.spec_, P, encoder_graph(self.spec_, P, x))
        return g, ad.mse(out, x)

    def _eval_loss(self, Xn: np.ndarray) -> float:
        rec = self._reconstruct_scaled(Xn)
        return float(np.mean((rec - Xn) ** 2))

    def _reconstruct_scaled(self, Xn: np.ndarray, chunk: int = 16) -> np.ndarray:
        outs = []
        for s in range(0, len(Xn), chunk):
            xb = self._to_net(Xn[s : s + chunk])
            g = ad.Graph()
            out = decoder_graph(self.spec_, self.params_, encoder_graph(self.spec_, self.params_, g.input(xb)))
            outs.append(self._from_net(out.data, len(Xn[s : s + chunk])))
        return np.concatenate(outs)

    def fit(self, X, y=None, X_val=None):
        """Train from a fresh initialisation on canvases ``X`` (n, rows, cols)."""
        spec = self.spec_
        X = check_canvases(X, spec.input_shape)
        self._initialize()
        if spec.family == "identity":
            self.trained_ = True
            return self
        Xv = check_canvases(X_val, spec.input_shape) if X_val is not None and len(X_val) else None
        rms = float(np.sqrt(np.mean(X * X)))
        self.scale_ = rms if rms > 0 else 1.0
        Xn = X / self.scale_
        Xvn = Xv / self.scale_ if Xv is not None else None
        rng = np.random.default_rng([self.random_state, 1])
        opt = ad.Adam(lr=self.lr)
        s2 = self.scale_**2
        for epoch in range(self.epochs):
            order = rng.permutation(len(Xn))
            total = 0.0
            for start in range(0, len(Xn), self.batch_size):
                idx = order[start : start + self.batch_size]
                g, loss = self._loss_graph(self._to_net(Xn[idx]))
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise ad.NonFiniteError(f"TGAP loss diverged at epoch {epoch}")
                grads = g.backward(loss)
                opt.step(self.params_, grads)
                total += lv * len(idx)
            # epoch train loss is the average of minibatch losses seen while training
            self.history_.train_loss.append(total / len(Xn) * s2)
            if Xvn is not None:
                self.history_.test_loss.append(self._eval_loss(Xvn) * s2)
            if self.verbose and (epoch % 10 == 0 or epoch == self.epochs - 1):
                logger.info("epoch %d train %.3e test %s", epoch, self.history_.train_loss[-1],
                            self.history_.test_loss[-1] if Xvn is not None else "-")
        # parameters live on the 32-bit wire/disk grid so checkpoints reload exactly
        for k in self.params_:
            self.params_[k] = self.params_[k].astype(np.float32).astype(np.float64)
        self.scale_ = float(np.float32(self.scale_))
        self.trained_ = True
        return self

    # -- inference
    def transform(self, X):
        """Encode canvases ``(n, rows, cols)`` (or one canvas) to latents."""
        self._check_ready()
        spec = self.spec_
        single = np.ndim(X) == 2
        X = check_canvases(X, spec.input_shape)
        if spec.family == "identity":
            F = X.copy()
        else:
            g = ad.Graph()
            z = encoder_graph(spec, self.params_, g.input(self._to_net(X / self.scale_)))
            F = self._latent_batch(z.data, len(X))
        return F[0] if single else F

    def inverse_transform(self, F):
        """Decode latents ``(n, *latent_shape)`` back to canvases."""
        self._check_ready()
        spec = self.spec_
        F = np.asarray(F, dtype=np.float64)
        single = F.shape == spec.latent_shape
        if single:
            F = F[None]
        if F.shape[1:] != spec.latent_shape:
            raise ad.ShapeError(f"latent shape {F.shape[1:]} != {spec.latent_shape}")
        if spec.family == "identity":
            X = F.copy()
        else:
            g = ad.Graph()
            out = decoder_graph(spec, self.params_, g.input(self._latent_to_net(F)))
            X = self._from_net(out.data, len(F)) * self.scale_
        return X[0] if single else X

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    # -- identity / persistence
    def codec_id(self) -> str:
        self._check_ready()
        h = hashlib.sha256()
        h.update(json.dumps(self.spec_.to_dict(), sort_keys=True).encode())
        h.update(np.float32(self.scale_).tobytes())
        for k in sorted(self.params_):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params_[k], dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        self._check_ready()
        meta = {
            "spec": self.spec_.to_dict(),
            "scale": self.scale_,
            "trained": bool(self.trained_),
            "estimator": {"epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                          "random_state": self.random_state},
        }
        save_tensors(path, self.params_, meta)

    @classmethod
    def load(cls, path) -> "AutoEncoderCodec":
        tensors, meta = load_tensors(path)
        spec = CodecSpec.from_dict(meta["spec"])
        codec = cls(spec=spec, **meta.get("estimator", {}))
        codec.params_ = tensors
        codec.scale_ = float(meta["scale"])
        codec.history_ = TrainingHistory()
        codec.trained_ = bool(meta["trained"])
        return codec


def build(spec: CodecSpec, seed: int = 0) -> AutoEncoderCodec:
    """An initialised, untrained codec."""
    return AutoEncoderCodec(spec=spec, random_state=seed)._initialize()


def identity_codec(input_shape: Tuple[int, int]) -> AutoEncoderCodec:
    return build(CodecSpec("identity", tuple(input_shape), ()))


def encode(codec: AutoEncoderCodec, canvas) -> EncodedFeature:
    canvas = np.asarray(canvas, dtype=np.float64)
    return EncodedFeature(codec.transform(canvas), tuple(canvas.shape), codec.codec_id())


def decode(codec: AutoEncoderCodec, feature: EncodedFeature) -> np.ndarray:
    if feature.codec_id != codec.codec_id():
        raise ValueError("feature was produced by a different codec")
    return codec.inverse_transform(feature.latent)


def train_tgap(codec: AutoEncoderCodec, train, test=None, epochs: Optional[int] = None, lr: float = 2e-4):
    """Fit ``codec`` on snapshot canvases; returns ``(codec, history)``."""
    codec.set_params(lr=lr)
    if epochs is not None:
        codec.set_params(epochs=epochs)
    train = train.canvases() if hasattr(train, "canvases") else train
    if test is not None and hasattr(test, "canvases"):
        test = test.canvases()
    if len(train) == 0:
        raise ValueError("empty training set")
    codec.fit(train, X_val=test)
    return codec, codec.history_
