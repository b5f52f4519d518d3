"""Convolutional Gaussian VAE over fixed-length feature segments.

Encoder: a 1-by-F convolution collapses the frequency axis, two stride-2
3-by-1 convolutions halve the time axis twice, one dense layer follows; batch
norm then tanh after every layer.  Two linear heads with no batch norm and no
activation emit the posterior mean and log variance.  The decoder mirrors the
encoder with transposed convolutions and emits mean and log variance of the
output Gaussian through two 1-by-F transposed heads.

The deterministic autoencoder baseline is the identical network with the
Gaussian layer replaced by a single linear code layer, i.e. the VAE minus
exactly the posterior log-variance head, trained with squared error.

Inputs are z-scored per frequency bin with train-split statistics stored on
the model; encode/decode tensors live in normalized space, the *_np helpers
speak raw dB on the encode side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .nn import tensor as T
from .nn.layers import BatchNorm, Conv2d, Linear, TransposedConv2d
from .nn.conv import conv_out_len
from .rng import Rng

LOGVAR_CLAMP = 7.0
NORM_STD_FLOOR = 1e-3

KIND_VAE = "vae"
KIND_AE = "ae"


@dataclass
class ModelConfig:
    seg_len: int
    n_features: int
    feature_kind: str
    conv_channels: tuple = (64, 128, 256)
    fc_units: int = 512
    latent_dim: int = 128
    kind: str = KIND_VAE
    dtype: str = "f32"
    clamp_logvar: bool = True

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if len(self.conv_channels) != 3:
            raise DataError("expected exactly 3 conv channel widths")
        if self.kind not in (KIND_VAE, KIND_AE):
            raise DataError(f"unknown model kind {self.kind!r}")
        if self.dtype not in ("f32", "f64"):
            raise DataError(f"unknown dtype {self.dtype!r}")
        if min(self.seg_len, self.n_features, self.fc_units, self.latent_dim) < 1:
            raise DataError("all sizes must be positive")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def time_lens(self) -> tuple:
        t1 = self.seg_len
        t2 = conv_out_len(t1, 3, 2, 1)
        t3 = conv_out_len(t2, 3, 2, 1)
        return (t1, t2, t3)

    def to_header(self) -> dict:
        return {"seg_len": self.seg_len, "n_features": self.n_features,
                "feature_kind": self.feature_kind,
                "conv_channels": list(self.conv_channels), "fc_units": self.fc_units,
                "latent_dim": self.latent_dim, "kind": self.kind, "dtype": self.dtype,
                "clamp_logvar": self.clamp_logvar}

    @classmethod
    def from_header(cls, h: dict) -> "ModelConfig":
        return cls(seg_len=int(h["seg_len"]), n_features=int(h["n_features"]),
                   feature_kind=h["feature_kind"],
                   conv_channels=tuple(h["conv_channels"]), fc_units=int(h["fc_units"]),
                   latent_dim=int(h["latent_dim"]), kind=h["kind"], dtype=h["dtype"],
                   clamp_logvar=bool(h["clamp_logvar"]))


@dataclass
class GaussianParams:
    """Diagonal Gaussian as (mean, log variance), Tensors or arrays."""

    mean: object
    log_var: object


class Trunk:
    """Shared encoder body: conv1 -> conv2 -> conv3 -> fc, BN+tanh each."""

    def __init__(self, cfg: ModelConfig, rng: Rng, prefix: str):
        c1, c2, c3 = cfg.conv_channels
        dt = cfg.np_dtype
        t1, t2, t3 = cfg.time_lens()
        self.flat = c3 * t3
        self.conv1 = Conv2d(1, c1, (1, cfg.n_features), (1, 1), (0, 0),
                            rng.derive("conv1"), dt, f"{prefix}.conv1")
        self.bn1 = BatchNorm(c1, dt, f"{prefix}.bn1")
        self.conv2 = Conv2d(c1, c2, (3, 1), (2, 1), (1, 0), rng.derive("conv2"), dt, f"{prefix}.conv2")
        self.bn2 = BatchNorm(c2, dt, f"{prefix}.bn2")
        self.conv3 = Conv2d(c2, c3, (3, 1), (2, 1), (1, 0), rng.derive("conv3"), dt, f"{prefix}.conv3")
        self.bn3 = BatchNorm(c3, dt, f"{prefix}.bn3")
        self.fc = Linear(self.flat, cfg.fc_units, rng.derive("fc"), dt, f"{prefix}.fc")
        self.bn_fc = BatchNorm(cfg.fc_units, dt, f"{prefix}.bn_fc")
        self._layers = [self.conv1, self.bn1, self.conv2, self.bn2,
                        self.conv3, self.bn3, self.fc, self.bn_fc]

    def __call__(self, x: T.Tensor, train: bool) -> T.Tensor:
        h = self.bn1(self.conv1(x), train).tanh()
        h = self.bn2(self.conv2(h), train).tanh()
        h = self.bn3(self.conv3(h), train).tanh()
        h = h.reshape((h.shape[0], self.flat))
        return self.bn_fc(self.fc(h), train).tanh()

    def params(self):
        return [p for layer in self._layers for p in layer.params()]

    def stats(self):
        return [s for layer in self._layers for s in layer.stats()]


class _SegmentModelBase:
    """Normalization plumbing and parameter bookkeeping shared by VAE and AE."""

    cfg: ModelConfig

    def _init_norm(self):
        dt = self.cfg.np_dtype
        self.norm_mean = np.zeros(self.cfg.n_features, dtype=dt)
        self.norm_std = np.ones(self.cfg.n_features, dtype=dt)

    def fit_norm_stats(self, segments_db: np.ndarray) -> None:
        """Per-bin z-score statistics from raw dB train segments (N, T, F)."""
        flat = np.asarray(segments_db, dtype=np.float64).reshape(-1, self.cfg.n_features)
        mean = flat.mean(axis=0)
        std = np.maximum(flat.std(axis=0), NORM_STD_FLOOR)  # constant bins stay finite
        dt = self.cfg.np_dtype
        self.norm_mean = mean.astype(dt)
        self.norm_std = std.astype(dt)

    def normalize(self, x_db: np.ndarray) -> np.ndarray:
        x = np.asarray(x_db, dtype=self.cfg.np_dtype)
        return (x - self.norm_mean) / self.norm_std

    def denormalize(self, x_norm: np.ndarray) -> np.ndarray:
        return np.asarray(x_norm) * self.norm_std + self.norm_mean

    def as_input(self, x_db: np.ndarray) -> T.Tensor:
        """Raw dB (N, T, F) -> normalized network input Tensor (N, 1, T, F)."""
        x = np.asarray(x_db)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.cfg.seg_len or x.shape[2] != self.cfg.n_features:
            raise DataError(f"expected (N, {self.cfg.seg_len}, {self.cfg.n_features}) segments, "
                            f"got {x.shape}")
        return T.Tensor(self.normalize(x)[:, None])

    def params(self) -> list:
        raise NotImplementedError

    def stats(self) -> list:
        raise NotImplementedError

    def norm_stats(self):
        return [("norm.mean", self.norm_mean), ("norm.std", self.norm_std)]

    def n_params(self) -> int:
        return sum(p.data.size for _, p in self.params())

    def load_arrays(self, params: dict, stats: dict) -> None:
        """Overwrite parameters and state arrays by name; shapes must match."""
        own = dict(self.params())
        if set(own) != set(params):
            raise DataError("parameter name set mismatch with checkpoint")
        for name, p in own.items():
            arr = np.asarray(params[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DataError(f"shape mismatch for '{name}'")
            p.data = arr.copy()
        for name, arr in stats.items():
            self.set_stat(name, np.asarray(arr))

    def set_stat(self, name: str, arr: np.ndarray) -> None:
        dt = self.cfg.np_dtype
        if name == "norm.mean":
            self.norm_mean = arr.astype(dt).copy()
            return
        if name == "norm.std":
            self.norm_std = arr.astype(dt).copy()
            return
        for bn in self._batchnorms():
            if name == f"{bn.name}.running_mean":
                bn.running_mean = arr.astype(dt).copy()
                return
            if name == f"{bn.name}.running_var":
                bn.running_var = arr.astype(dt).copy()
                return
        raise DataError(f"unknown state array {name!r}")

    def _batchnorms(self):
        return [layer for layer in self._all_layers if isinstance(layer, BatchNorm)]


class Decoder:
    """Mirror of the trunk: dense up, two transposed convs, 1-by-F heads."""

    def __init__(self, cfg: ModelConfig, rng: Rng, prefix: str = "dec"):
        c1, c2, c3 = cfg.conv_channels
        dt = cfg.np_dtype
        self.t_lens = cfg.time_lens()
        self.c3 = c3
        self.cfg = cfg
        flat = c3 * self.t_lens[2]
        self.fc_z = Linear(cfg.latent_dim, cfg.fc_units, rng.derive("fc_z"), dt, f"{prefix}.fc_z")
        self.bn_z = BatchNorm(cfg.fc_units, dt, f"{prefix}.bn_z")
        self.fc_up = Linear(cfg.fc_units, flat, rng.derive("fc_up"), dt, f"{prefix}.fc_up")
        self.bn_up = BatchNorm(flat, dt, f"{prefix}.bn_up")
        self.tconv3 = TransposedConv2d(c3, c2, (3, 1), (2, 1), (1, 0),
                                       rng.derive("tconv3"), dt, f"{prefix}.tconv3")
        self.bn3 = BatchNorm(c2, dt, f"{prefix}.bn3")
        self.tconv2 = TransposedConv2d(c2, c1, (3, 1), (2, 1), (1, 0),
                                       rng.derive("tconv2"), dt, f"{prefix}.tconv2")
        self.bn2 = BatchNorm(c1, dt, f"{prefix}.bn2")
        self.head_mean = TransposedConv2d(c1, 1, (1, cfg.n_features), (1, 1), (0, 0),
                                          rng.derive("head_mean"), dt, f"{prefix}.head_mean")
        self.head_logvar = TransposedConv2d(c1, 1, (1, cfg.n_features), (1, 1), (0, 0),
                                            rng.derive("head_logvar"), dt, f"{prefix}.head_logvar")
        self._layers = [self.fc_z, self.bn_z, self.fc_up, self.bn_up, self.tconv3,
                        self.bn3, self.tconv2, self.bn2, self.head_mean, self.head_logvar]

    def __call__(self, z: T.Tensor, train: bool) -> GaussianParams:
        t1, t2, t3 = self.t_lens
        h = self.bn_z(self.fc_z(z), train).tanh()
        h = self.bn_up(self.fc_up(h), train).tanh()
        h = h.reshape((h.shape[0], self.c3, t3, 1))
        h = self.bn3(self.tconv3(h, (t2, 1)), train).tanh()
        h = self.bn2(self.tconv2(h, (t1, 1)), train).tanh()
        out_hw = (t1, self.cfg.n_features)
        mean = self.head_mean(h, out_hw)
        log_var = self.head_logvar(h, out_hw)
        if self.cfg.clamp_logvar:
            log_var = T.clip(log_var, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return GaussianParams(mean, log_var)

    def params(self):
        return [p for layer in self._layers for p in layer.params()]

    def stats(self):
        return [s for layer in self._layers for s in layer.stats()]


class VaeModel(_SegmentModelBase):
    def __init__(self, cfg: ModelConfig, init_rng: Rng | None = None):
        if cfg.kind != KIND_VAE:
            raise DataError("config kind must be 'vae'")
        self.cfg = cfg
        rng = init_rng if init_rng is not None else Rng.from_seed(0, "init")
        dt = cfg.np_dtype
        self.trunk = Trunk(cfg, rng.derive("enc"), "enc")
        self.head_z_mean = Linear(cfg.fc_units, cfg.latent_dim, rng.derive("z_mean"), dt, "enc.z_mean")
        self.head_z_logvar = Linear(cfg.fc_units, cfg.latent_dim, rng.derive("z_logvar"), dt, "enc.z_logvar")
        self.decoder = Decoder(cfg, rng.derive("dec"))
        self._all_layers = self.trunk._layers + [self.head_z_mean, self.head_z_logvar] + self.decoder._layers
        self._init_norm()

    def encode(self, x: T.Tensor, train: bool = False) -> GaussianParams:
        h = self.trunk(x, train)
        return GaussianParams(self.head_z_mean(h), self.head_z_logvar(h))

    def decode(self, z: T.Tensor, train: bool = False) -> GaussianParams:
        return self.decoder(z, train)

    def params(self):
        return (self.trunk.params() + self.head_z_mean.params()
                + self.head_z_logvar.params() + self.decoder.params())

    def stats(self):
        return self.trunk.stats() + self.decoder.stats() + self.norm_stats()

    # -- numpy conveniences (raw dB in, arrays out, no training) ----------

    def encode_np(self, x_db: np.ndarray, batch: int = 512):
        """Posterior parameters for raw dB segments; returns (mu, log_var)."""
        x = np.asarray(x_db)
        if x.ndim == 2:
            x = x[None]
        mus, lvs = [], []
        for i in range(0, x.shape[0], batch):
            g = self.encode(self.as_input(x[i:i + batch]), train=False)
            mus.append(g.mean.data)
            lvs.append(g.log_var.data)
        return np.concatenate(mus), np.concatenate(lvs)

    def decode_np(self, z: np.ndarray, batch: int = 512):
        """Output Gaussian in normalized space; returns (mu, log_var) arrays."""
        z = np.asarray(z, dtype=self.cfg.np_dtype)
        if z.ndim == 1:
            z = z[None]
        mus, lvs = [], []
        for i in range(0, z.shape[0], batch):
            g = self.decode(T.Tensor(z[i:i + batch]), train=False)
            mus.append(g.mean.data[:, 0])
            lvs.append(g.log_var.data[:, 0])
        return np.concatenate(mus), np.concatenate(lvs)


class AeModel(_SegmentModelBase):
    """Deterministic baseline: same trunk and decoder, single linear code layer."""

    def __init__(self, cfg: ModelConfig, init_rng: Rng | None = None):
        if cfg.kind != KIND_AE:
            raise DataError("config kind must be 'ae'")
        self.cfg = cfg
        rng = init_rng if init_rng is not None else Rng.from_seed(0, "init")
        dt = cfg.np_dtype
        self.trunk = Trunk(cfg, rng.derive("enc"), "enc")
        # single code head in place of the Gaussian pair; init stream matches
        # the VAE mean head so the two models start from the same weights there
        self.head_code = Linear(cfg.fc_units, cfg.latent_dim, rng.derive("z_mean"), dt, "enc.z_mean")
        self.decoder = Decoder(cfg, rng.derive("dec"))
        self._all_layers = self.trunk._layers + [self.head_code] + self.decoder._layers
        self._init_norm()

    def encode(self, x: T.Tensor, train: bool = False) -> T.Tensor:
        return self.head_code(self.trunk(x, train))

    def decode(self, z: T.Tensor, train: bool = False) -> GaussianParams:
        return self.decoder(z, train)

    def params(self):
        return self.trunk.params() + self.head_code.params() + self.decoder.params()

    def stats(self):
        return self.trunk.stats() + self.decoder.stats() + self.norm_stats()

    def encode_np(self, x_db: np.ndarray, batch: int = 512) -> np.ndarray:
        x = np.asarray(x_db)
        if x.ndim == 2:
            x = x[None]
        return np.concatenate([
            self.encode(self.as_input(x[i:i + batch]), train=False).data
            for i in range(0, x.shape[0], batch)])

    def decode_np(self, z: np.ndarray, batch: int = 512):
        z = np.asarray(z, dtype=self.cfg.np_dtype)
        if z.ndim == 1:
            z = z[None]
        mus, lvs = [], []
        for i in range(0, z.shape[0], batch):
            g = self.decode(T.Tensor(z[i:i + batch]), train=False)
            mus.append(g.mean.data[:, 0])
            lvs.append(g.log_var.data[:, 0])
        return np.concatenate(mus), np.concatenate(lvs)


def build_model(cfg: ModelConfig, init_rng: Rng | None = None):
    return VaeModel(cfg, init_rng) if cfg.kind == KIND_VAE else AeModel(cfg, init_rng)


# -- Gaussian building blocks ---------------------------------------------------


def reparameterize(g: GaussianParams, eps: T.Tensor) -> T.Tensor:
    """z = mean + exp(log_var / 2) * eps, differentiable in mean and log_var."""
    std = (g.log_var * 0.5).exp()
    return g.mean + std * eps


def kl_to_prior(g: GaussianParams) -> T.Tensor:
    """Closed-form KL(q || N(0, I)) per item, shape (B,)."""
    inner = 1.0 + g.log_var - g.mean.square() - g.log_var.exp()
    return inner.sum(axis=1) * (-0.5)


def gaussian_log_lik(x: T.Tensor, g: GaussianParams) -> T.Tensor:
    """log N(x; mean, diag exp(log_var)) summed over all non-batch dims."""
    axes = tuple(range(1, len(x.shape)))
    neg_lv = g.log_var * (-1.0)
    quad = (x - g.mean).square() * neg_lv.exp()
    per_dim = (quad + g.log_var + math.log(2.0 * math.pi)) * (-0.5)
    return per_dim.sum(axis=axes)


def elbo_parts(model: VaeModel, x: T.Tensor, eps_draws: list, train: bool):
    """Per-item evidence lower bound with L = len(eps_draws) samples.

    Returns (elbo, kl, recon), each a (B,) Tensor; recon is the average
    reconstruction log-likelihood over the L posterior samples.
    """
    if not eps_draws:
        raise DataError("need at least one epsilon draw")
    g_z = model.encode(x, train)
    kl = kl_to_prior(g_z)
    recon = None
    for eps in eps_draws:
        z = reparameterize(g_z, eps if isinstance(eps, T.Tensor) else T.Tensor(eps))
        g_x = model.decode(z, train)
        ll = gaussian_log_lik(x, g_x)
        recon = ll if recon is None else recon + ll
    recon = recon * (1.0 / len(eps_draws))
    return recon - kl, kl, recon


def vae_loss(model: VaeModel, x: T.Tensor, eps: np.ndarray, train: bool = True):
    """Negative mean ELBO (single-sample) plus float diagnostics."""
    elbo, kl, recon = elbo_parts(model, x, [T.Tensor(eps)], train)
    loss = elbo.mean() * (-1.0)
    parts = {"bound": float(elbo.data.mean()), "kl": float(kl.data.mean()),
             "recon": float(recon.data.mean())}
    return loss, parts


def ae_loss(model: AeModel, x: T.Tensor, train: bool = True):
    """Mean per-item squared error on the mean head; logvar head unused."""
    code = model.encode(x, train)
    g_x = model.decode(code, train)
    axes = tuple(range(1, len(x.shape)))
    err = (x - g_x.mean).square().sum(axis=axes)
    loss = err.mean()
    return loss, {"sq_err": float(err.data.mean())}
