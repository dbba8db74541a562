"""Decoupled (ED//GAN) and coupled (ED+GAN) training, plus checkpoints.

Decoupled: the L1 reconstruction loss updates Enc and Dec only; the
adversarial losses update G and D only. G reads the latent code as a constant
and the fake shown to D is ``I_ED + I_G`` with ``I_ED`` also constant, so no
adversarial gradient can reach Enc or Dec.

Coupled: Dec is the generator. Enc and Dec minimize ``L1 + lambda * L_adv``
through one backward pass; D is trained on Dec's output directly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import grad as G
from . import serialize
from .datagen import Dataset
from .grad import OptimizerState, Tape, Tensor
from .networks import (NetConfig, NetworkParams, build_network, compose_output, decode, discriminate,
                       encode, generate_residual)

log = logging.getLogger(__name__)

MODES = ("decoupled", "coupled")
SCHEDULES = ("alternating", "ed_first")
LAMBDA_SWEEP = (0.001, 0.01, 0.1, 1.0)


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "decoupled"
    lam: float = 0.0
    epochs: int = 200
    batch_size: int = 25
    seed: int = 0
    schedule: str = "alternating"
    d_steps: int = 1
    g_steps: int = 1
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    d_form: str = "nonsaturating"
    g_form: str = "minimax"
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise TrainConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.batch_size < 1 or (self.net.use_batchnorm and self.batch_size < 2):
            raise TrainConfigError("batch_size must be >= 2 when batch norm is enabled")
        if not self.lam >= 0:
            raise TrainConfigError("lambda must be >= 0")
        if self.d_steps < 0 or self.g_steps < 0:
            raise TrainConfigError("d_steps and g_steps must be >= 0")
        for name in ("d_form", "g_form"):
            if getattr(self, name) not in G.ADV_FORMS:
                raise TrainConfigError(f"{name} must be one of {G.ADV_FORMS}")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        net = d.pop("net", {})
        return cls(net=NetConfig(**net) if isinstance(net, dict) else net, **d)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)} - {"lam"} | {"lambda"}


@dataclass
class Models:
    """Everything one training run owns."""

    enc: NetworkParams
    dec: NetworkParams
    disc: NetworkParams
    gen: NetworkParams | None = None
    opt: dict[str, OptimizerState] = field(default_factory=dict)
    epoch: int = 0

    def networks(self) -> dict[str, NetworkParams]:
        nets = {"enc": self.enc, "dec": self.dec}
        if self.gen is not None:
            nets["gen"] = self.gen
        nets["disc"] = self.disc
        return nets

    def digests(self) -> dict[str, str]:
        return {k: v.digest() for k, v in self.networks().items()}


def init_models(cfg: TrainConfig) -> Models:
    m = Models(
        enc=build_network("enc", cfg.net, cfg.seed),
        dec=build_network("dec", cfg.net, cfg.seed),
        disc=build_network("disc", cfg.net, cfg.seed),
        gen=build_network("gen", cfg.net, cfg.seed) if cfg.mode == "decoupled" else None,
    )
    m.opt = {role: cfg.optimizer() for role in m.networks()}
    return m


@dataclass
class TrainResult:
    models: Models
    history: dict[str, list[float]]
    config: TrainConfig


# ----------------------------------------------------------------------- steps


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _update(net: NetworkParams, state: OptimizerState, loss: Tensor, tape: Tape) -> None:
    G.zero_grads(net.tensors())
    G.backward(loss, tape)
    G.optimizer_step(net.params, state)


def reconstruction_step(enc: NetworkParams, dec: NetworkParams, batch, opt_enc: OptimizerState,
                        opt_dec: OptimizerState, label=None) -> float:
    """One L1 step on Enc and Dec. Nothing else is touched."""
    x = _as_tensor(batch, enc.cfg.dtype)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    nets = (enc, dec)
    with Tape() as tape:
        if enc.cfg.use_skips:
            z, skips = encode(enc, x, return_skips=True)
        else:
            z, skips = encode(enc, x), None
        i_ed = decode(dec, z, label, skips)
        loss = G.l1_loss(i_ed, x)
    for net in nets:
        G.zero_grads(net.tensors())
    G.backward(loss, tape)
    G.optimizer_step(enc.params, opt_enc)
    G.optimizer_step(dec.params, opt_dec)
    return loss.item()


def ed_forward(enc: NetworkParams, dec: NetworkParams, batch, label=None, training: bool = True):
    """Constant ``(z, skips, I_ED)`` for the adversarial side.

    Training mode uses batch statistics without touching Enc/Dec running stats.
    """
    x = _as_tensor(batch, enc.cfg.dtype)
    e, d = (enc.frozen(), dec.frozen()) if training else (enc, dec)
    if enc.cfg.use_skips:
        z, skips = encode(e, x, training=training, return_skips=True)
    else:
        z, skips = encode(e, x, training=training), None
    i_ed = decode(d, z, label, skips, training=training)
    return G.detach(z), skips and [G.detach(s) for s in skips], G.detach(i_ed)


def _d_update(disc: NetworkParams, real: Tensor, fake: Tensor, opt: OptimizerState,
              label=None, form: str = "nonsaturating") -> tuple[float, float, float]:
    """Returns ``(minimax loss_D, mean D(real), mean D(fake))`` measured before the update."""
    if real.shape[0] != fake.shape[0]:
        raise G.ShapeError(f"real batch {real.shape[0]} != fake batch {fake.shape[0]}")
    with Tape() as tape:
        d_real = discriminate(disc, real, label)
        d_fake = discriminate(disc, G.detach(fake), label)
        loss = G.discriminator_loss(d_real, d_fake, form)
    _update(disc, opt, loss, tape)
    value, _ = G.minimax_values(d_real.data, d_fake.data)
    return value, float(d_real.data.mean()), float(d_fake.data.mean())


def discriminator_step(disc: NetworkParams, batch_real, i_ed, i_g, opt_d: OptimizerState, label=None,
                       form: str = "nonsaturating") -> float:
    """One step on D with fakes ``I_ED + I_G`` held constant.

    The return value is always ``mean log(1 - D(real)) + mean log D(fake)``
    before the update; ``form`` only picks the gradient (see
    :func:`edgan.grad.discriminator_loss`).
    """
    real = _as_tensor(batch_real, disc.cfg.dtype)
    fake = compose_output(G.detach(_as_tensor(i_ed, disc.cfg.dtype)), G.detach(_as_tensor(i_g, disc.cfg.dtype)))
    return _d_update(disc, real, fake, opt_d, label, form)[0]


def generator_step(gen: NetworkParams, disc: NetworkParams, i_ed, z, opt_g: OptimizerState, label=None,
                   skips=None, form: str = "minimax") -> float:
    """One step on G against a frozen D; ``I_ED`` and ``z`` are constants.

    Returns ``mean log(1 - D(I_ED + I_G))`` before the update.
    """
    i_ed = G.detach(_as_tensor(i_ed, gen.cfg.dtype))
    z = _as_tensor(z, gen.cfg.dtype)
    with Tape() as tape:
        i_g = generate_residual(gen, z, label, skips)
        if i_g.shape != i_ed.shape:
            raise G.ShapeError(f"residual {i_g.shape} vs reconstruction {i_ed.shape}")
        p = discriminate(disc.frozen(), compose_output(i_ed, i_g), label)
        loss = G.generator_loss(p, form)
    _update(gen, opt_g, loss, tape)
    return G.minimax_values(p.data, p.data)[1]


def coupled_step(models: Models, batch, lam: float, label=None, d_form: str = "nonsaturating",
                 g_form: str = "minimax") -> dict[str, float]:
    """One ED+GAN step: D on Dec's output, then Enc/Dec on ``L1 + lam * L_adv``."""
    enc, dec, disc = models.enc, models.dec, models.disc
    x = _as_tensor(batch, enc.cfg.dtype)
    tape = Tape()
    with tape:
        if enc.cfg.use_skips:
            z, skips = encode(enc, x, return_skips=True)
        else:
            z, skips = encode(enc, x), None
        out = decode(dec, z, label, skips)
        l1 = G.l1_loss(out, x)
    loss_d, d_real, d_fake = _d_update(disc, x, G.detach(out), models.opt["disc"], label, d_form)
    with tape:
        p = discriminate(disc.frozen(), out, label)
        adv = G.generator_loss(p, g_form)
        total = G.add_scalars(l1, G.scale(adv, lam))
    for net in (enc, dec):
        G.zero_grads(net.tensors())
    G.backward(total, tape)
    G.optimizer_step(enc.params, models.opt["enc"])
    G.optimizer_step(dec.params, models.opt["dec"])
    return {"recon": l1.item(), "d": loss_d, "g": G.minimax_values(p.data, p.data)[1],
            "d_real": d_real, "d_fake": d_fake}


# ---------------------------------------------------------------------- loops


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, min_batch: int = 2) -> list[np.ndarray]:
    """Shuffled index batches; the order depends only on ``(seed, epoch)``.

    A trailing batch smaller than ``min_batch`` is dropped.
    """
    order = np.random.default_rng([seed, 1000 + epoch]).permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= min_batch]


def _check_data(data: Dataset, cfg: TrainConfig) -> None:
    net = cfg.net
    expect = (net.image_size, net.image_size, net.in_channels)
    if data.images.shape[1:] != expect:
        raise TrainConfigError(f"data images are {data.images.shape[1:]}, network expects {expect}")
    if net.label_dim and (data.labels is None or data.labels.shape[1:] != (net.label_dim,)):
        raise TrainConfigError(f"network expects labels of size {net.label_dim}")
    if not net.label_dim and data.labels is not None:
        raise TrainConfigError("data carries labels but label_dim is 0")
    min_batch = 2 if net.use_batchnorm else 1
    if len(data) < min_batch:
        raise TrainConfigError("not enough images for one batch")


def _batch(data: Dataset, idx: np.ndarray, dtype):
    x = Tensor(data.images[idx].astype(dtype, copy=False))
    lab = None if data.labels is None else Tensor(data.labels[idx].astype(dtype, copy=False))
    return x, lab


EpochCallback = Callable[[int, Models, dict], None]


HISTORY_KEYS = ("recon", "d", "g", "d_real", "d_fake")


def _gan_steps(models: Models, cfg: TrainConfig, x: Tensor, lab, acc: dict[str, list[float]]) -> None:
    z, skips, i_ed = ed_forward(models.enc, models.dec, x, lab)
    for _ in range(cfg.d_steps):
        i_g = generate_residual(models.gen.frozen(), z, lab, skips)
        fake = compose_output(i_ed, i_g)
        loss, d_real, d_fake = _d_update(models.disc, x, fake, models.opt["disc"], lab, cfg.d_form)
        acc["d"].append(loss)
        acc["d_real"].append(d_real)
        acc["d_fake"].append(d_fake)
    for _ in range(cfg.g_steps):
        acc["g"].append(generator_step(models.gen, models.disc, i_ed, z, models.opt["gen"], lab, skips,
                                       cfg.g_form))


def _mean(xs: list[float]) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def _close_epoch(hist: dict[str, list[float]], acc: dict[str, list[float]], keys=HISTORY_KEYS) -> None:
    for k in keys:
        hist[k].append(_mean(acc.get(k, [])))


def train_decoupled(data: Dataset, cfg: TrainConfig, models: Models | None = None,
                    on_epoch: EpochCallback | None = None) -> TrainResult:
    """ED//GAN. ``cfg.lam`` is never read."""
    if cfg.mode != "decoupled":
        raise TrainConfigError("train_decoupled needs mode='decoupled'")
    _check_data(data, cfg)
    models = models or init_models(cfg)
    dt = np.dtype(cfg.net.dtype)
    min_batch = 2 if cfg.net.use_batchnorm else 1
    hist: dict[str, list[float]] = {k: [] for k in HISTORY_KEYS}
    gan_on = cfg.d_steps > 0 or cfg.g_steps > 0

    def batches(epoch):
        for idx in epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch, min_batch):
            yield _batch(data, idx, dt)

    def ed_step(x, lab, acc):
        acc["recon"].append(
            reconstruction_step(models.enc, models.dec, x, models.opt["enc"], models.opt["dec"], lab))

    start = models.epoch
    if cfg.schedule == "alternating":
        for epoch in range(start, cfg.epochs):
            acc: dict[str, list[float]] = {k: [] for k in HISTORY_KEYS}
            for x, lab in batches(epoch):
                ed_step(x, lab, acc)
                if gan_on:
                    _gan_steps(models, cfg, x, lab, acc)
            _close_epoch(hist, acc)
            models.epoch = epoch + 1
            if on_epoch:
                on_epoch(epoch + 1, models, hist)
    else:
        if start:
            raise TrainConfigError("resuming is only supported for the alternating schedule")
        for epoch in range(cfg.epochs):
            acc = {"recon": []}
            for x, lab in batches(epoch):
                ed_step(x, lab, acc)
            _close_epoch(hist, acc, ("recon",))
        for epoch in range(cfg.epochs):
            acc = {k: [] for k in HISTORY_KEYS}
            if gan_on:
                for x, lab in batches(epoch):
                    _gan_steps(models, cfg, x, lab, acc)
            _close_epoch(hist, acc, HISTORY_KEYS[1:])
            models.epoch = epoch + 1
            if on_epoch:
                on_epoch(epoch + 1, models, hist)
    return TrainResult(models, hist, cfg)


def train_coupled(data: Dataset, cfg: TrainConfig, models: Models | None = None,
                  on_epoch: EpochCallback | None = None) -> TrainResult:
    """ED+GAN baseline weighted by ``cfg.lam``."""
    if cfg.mode != "coupled":
        raise TrainConfigError("train_coupled needs mode='coupled'")
    _check_data(data, cfg)
    models = models or init_models(cfg)
    dt = np.dtype(cfg.net.dtype)
    min_batch = 2 if cfg.net.use_batchnorm else 1
    hist: dict[str, list[float]] = {k: [] for k in HISTORY_KEYS}
    for epoch in range(models.epoch, cfg.epochs):
        acc: dict[str, list[float]] = {k: [] for k in HISTORY_KEYS}
        for idx in epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch, min_batch):
            x, lab = _batch(data, idx, dt)
            for k, v in coupled_step(models, x, cfg.lam, lab, cfg.d_form, cfg.g_form).items():
                acc[k].append(v)
        _close_epoch(hist, acc)
        models.epoch = epoch + 1
        if on_epoch:
            on_epoch(epoch + 1, models, hist)
    return TrainResult(models, hist, cfg)


def train(data: Dataset, cfg: TrainConfig, **kw) -> TrainResult:
    fn = train_decoupled if cfg.mode == "decoupled" else train_coupled
    return fn(data, cfg, **kw)


# ------------------------------------------------------------------ generation


def reconstruct(models: Models, images, labels=None, batch_size: int = 100):
    """Eval-mode ``(I_ED, I_G, I_hat)`` as arrays. ``I_G`` is None without a G."""
    dt = models.enc.cfg.dtype
    images = np.asarray(images, dtype=dt)
    outs: tuple[list, list, list] = ([], [], [])
    for i in range(0, len(images), batch_size):
        x = Tensor(images[i:i + batch_size])
        lab = None if labels is None else Tensor(np.asarray(labels[i:i + batch_size], dtype=dt))
        z, skips, i_ed = ed_forward(models.enc, models.dec, x, lab, training=False)
        outs[0].append(i_ed.data)
        if models.gen is not None:
            i_g = generate_residual(models.gen, z, lab, skips, training=False)
            outs[1].append(i_g.data)
            outs[2].append(compose_output(i_ed, i_g).data)
        else:
            outs[2].append(i_ed.data)
    i_ed = np.concatenate(outs[0])
    i_g = np.concatenate(outs[1]) if outs[1] else None
    return i_ed, i_g, np.concatenate(outs[2])


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    models: Models
    config: TrainConfig
    version: int = serialize.VERSION

    @property
    def epoch(self) -> int:
        return self.models.epoch


def checkpoint_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {
        "meta/config": np.frombuffer(json.dumps(ckpt.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8),
        "meta/epoch": np.array(ckpt.models.epoch, dtype=np.int64),
    }
    for role, net in ckpt.models.networks().items():
        for name, arr in net.state_arrays().items():
            out[f"{role}/{name}"] = arr
    for role, st in sorted(ckpt.models.opt.items()):
        out[f"opt/{role}/step"] = np.array(st.step, dtype=np.int64)
        for name in sorted(st.m):
            out[f"opt/{role}/m/{name}"] = st.m[name]
            out[f"opt/{role}/v/{name}"] = st.v[name]
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    serialize.save(path, checkpoint_arrays(ckpt))
    return path


def _restore_network(net: NetworkParams, arrays: dict[str, np.ndarray], role: str) -> None:
    for name, arr in net.state_arrays().items():
        key = f"{role}/{name}"
        if key not in arrays:
            raise G.ShapeError(f"checkpoint lacks {key}")
        src = arrays[key]
        if src.shape != arr.shape:
            raise G.ShapeError(f"{key}: checkpoint shape {src.shape} != network shape {arr.shape}")
        arr[...] = src


def load_into(models: Models, arrays: dict[str, np.ndarray]) -> Models:
    """Copy checkpoint arrays into existing networks; shapes must agree exactly."""
    for role, net in models.networks().items():
        _restore_network(net, arrays, role)
    for role, st in models.opt.items():
        key = f"opt/{role}/step"
        if key in arrays:
            st.step = int(arrays[key])
        prefix_m = f"opt/{role}/m/"
        for k, v in arrays.items():
            if k.startswith(prefix_m):
                name = k[len(prefix_m):]
                if name not in models.networks()[role].params:
                    raise G.ShapeError(f"optimizer state for unknown parameter {role}/{name}")
                st.m[name] = v.copy()
                st.v[name] = arrays[f"opt/{role}/v/{name}"].copy()
    models.epoch = int(arrays.get("meta/epoch", 0))
    return models


def load_checkpoint(path) -> Checkpoint:
    arrays = serialize.load(path)
    if "meta/config" not in arrays:
        raise serialize.FormatError("checkpoint has no config record")
    cfg = TrainConfig.from_dict(json.loads(bytes(arrays["meta/config"]).decode()))
    models = load_into(init_models(cfg), arrays)
    return Checkpoint(models, cfg)


def with_net(cfg: TrainConfig, **net_overrides) -> TrainConfig:
    return replace(cfg, net=replace(cfg.net, **net_overrides))
