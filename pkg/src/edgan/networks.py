"""Encoder, decoder, residual generator and discriminator.

Enc and D share a topology: a ladder of stride-2 convolutions that halves the
spatial size and doubles the channel count down to a 4x4 bottleneck, then a
fully connected head (tanh latent for Enc, sigmoid probability for D). Dec and
G share the mirrored topology. G is built exactly like Dec, so the two have
identical parameter shapes.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .grad import BatchNormState, Tensor

ROLES = ("enc", "dec", "gen", "disc")
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 32
    in_channels: int = 3
    base_filters: int = 16
    z_dim: int = 16
    n_down_layers: int = 3
    use_batchnorm: bool = True
    use_skips: bool = False
    label_dim: int = 0
    kernel_size: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.n_down_layers < 1:
            raise ConfigError("n_down_layers must be >= 1")
        if s >> self.n_down_layers < 4:
            raise ConfigError(
                f"image_size {s} with {self.n_down_layers} down layers leaves a bottleneck below 4x4")
        if self.z_dim < 1:
            raise ConfigError("z_dim must be >= 1")
        if self.label_dim < 0:
            raise ConfigError("label_dim must be >= 0")
        if self.in_channels < 1 or self.base_filters < 1:
            raise ConfigError("in_channels and base_filters must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def desk(cls, **overrides) -> "NetConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "NetConfig":
        """The 128x128 ladder: 64 filters, 5 down layers, 50-d latent."""
        base = dict(image_size=128, in_channels=3, base_filters=64, z_dim=50, n_down_layers=5)
        base.update(overrides)
        return cls(**base)

    @property
    def bottleneck(self) -> int:
        return self.image_size >> self.n_down_layers

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def channels(self, layer: int) -> int:
        """Channel count of the ``layer``-th encoder feature map."""
        return self.base_filters << layer

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetworkParams:
    role: str
    cfg: NetConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def frozen(self) -> "NetworkParams":
        """A view whose tensors carry no gradient and whose BN stats are scratch copies.

        Running the view in training mode uses batch statistics but leaves this
        network untouched.
        """
        params = {k: Tensor(v.data, requires_grad=False, name=v.name) for k, v in self.params.items()}
        return NetworkParams(self.role, self.cfg, params, {k: s.copy() for k, s in self.bn.items()})

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array that defines this network, in a stable order."""
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _role_index(role: str) -> int:
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}; expected one of {ROLES}")
    return ROLES.index(role)


def build_network(role: str, cfg: NetConfig, seed: int) -> NetworkParams:
    """Fresh parameters: weights ~ N(0, 0.02), biases 0, BN gamma 1 / beta 0.

    Each role draws from its own stream of ``seed``, so adding or removing a
    network never perturbs the others' initialization.
    """
    rng = np.random.default_rng([seed, _role_index(role)])
    dt = np.dtype(cfg.dtype)
    net = NetworkParams(role, cfg)
    k, n = cfg.kernel_size, cfg.n_down_layers

    def weight(name, shape):
        net.params[name] = Tensor((rng.standard_normal(shape) * INIT_STD).astype(dt), True, name)

    def zeros(name, size):
        net.params[name] = Tensor(np.zeros(size, dtype=dt), True, name)

    def norm(name, size):
        if cfg.use_batchnorm:
            net.params[f"{name}.gamma"] = Tensor(np.ones(size, dtype=dt), True, f"{name}.gamma")
            net.params[f"{name}.beta"] = Tensor(np.zeros(size, dtype=dt), True, f"{name}.beta")
            net.bn[name] = BatchNormState.fresh(size, dt)

    if role in ("enc", "disc"):
        cin = cfg.in_channels
        for i in range(n):
            cout = cfg.channels(i)
            weight(f"conv{i}.w", (k, k, cin, cout))
            zeros(f"conv{i}.b", cout)
            norm(f"bn{i}", cout)
            cin = cout
        flat = cfg.bottleneck ** 2 * cin
        if role == "enc":
            weight("fc.w", (flat, cfg.z_dim))
            zeros("fc.b", cfg.z_dim)
        else:
            weight("fc.w", (flat + cfg.label_dim, 1))
            zeros("fc.b", 1)
    else:
        top = cfg.channels(n - 1)
        weight("fc.w", (cfg.z_dim + cfg.label_dim, cfg.bottleneck ** 2 * top))
        zeros("fc.b", cfg.bottleneck ** 2 * top)
        norm("bn_fc", top)
        cin = top
        for i in range(n):
            last = i == n - 1
            cout = cfg.in_channels if last else cfg.channels(n - 2 - i)
            skip = cfg.channels(n - 1 - i) if cfg.use_skips else 0
            weight(f"deconv{i}.w", (k, k, cout, cin + skip))
            zeros(f"deconv{i}.b", cout)
            if not last:
                norm(f"bn_d{i}", cout)
            cin = cout
    return net


def _bn_relu(net: NetworkParams, name: str, h: Tensor, training: bool) -> Tensor:
    if name in net.bn:
        h = G.batch_norm(h, net.params[f"{name}.gamma"], net.params[f"{name}.beta"], net.bn[name], training)
    return G.relu(h)


def _check_image(net: NetworkParams, image: Tensor) -> None:
    c = net.cfg
    if image.data.ndim != 4 or image.shape[1:] != (c.image_size, c.image_size, c.in_channels):
        raise G.ShapeError(
            f"{net.role}: expected images [N,{c.image_size},{c.image_size},{c.in_channels}], got {image.shape}")


def _conv_ladder(net: NetworkParams, image: Tensor, training: bool) -> list[Tensor]:
    _check_image(net, image)
    cfg = net.cfg
    feats = []
    h = image
    for i in range(cfg.n_down_layers):
        h = G.conv2d(h, net.params[f"conv{i}.w"], net.params[f"conv{i}.b"], stride=2, padding=cfg.padding)
        h = _bn_relu(net, f"bn{i}", h, training)
        feats.append(h)
    return feats


def encode(enc: NetworkParams, image: Tensor, training: bool = True,
           return_skips: bool = False):
    """Latent codes ``[N, z_dim]`` in [-1, 1]; optionally also the feature maps."""
    if enc.role != "enc":
        raise ConfigError(f"encode needs an enc network, got {enc.role}")
    feats = _conv_ladder(enc, image, training)
    flat = G.reshape(feats[-1], (image.shape[0], -1))
    z = G.tanh(G.fully_connected(flat, enc.params["fc.w"], enc.params["fc.b"]))
    return (z, feats) if return_skips else z


def _check_label(cfg: NetConfig, label: Tensor | None, batch: int) -> None:
    if cfg.label_dim == 0:
        if label is not None:
            raise ConfigError("network is unconditional but a label was given")
        return
    if label is None:
        raise ConfigError(f"network expects a label of size {cfg.label_dim}")
    if label.shape != (batch, cfg.label_dim):
        raise G.ShapeError(f"label must be [{batch},{cfg.label_dim}], got {label.shape}")


def _upsample(net: NetworkParams, z: Tensor, label: Tensor | None, skips, training: bool,
              trace: list | None = None) -> Tensor:
    cfg = net.cfg
    if z.data.ndim != 2 or z.shape[1] != cfg.z_dim:
        raise G.ShapeError(f"{net.role}: z must be [N,{cfg.z_dim}], got {z.shape}")
    n = z.shape[0]
    _check_label(cfg, label, n)
    if cfg.use_skips:
        if skips is None or len(skips) != cfg.n_down_layers:
            raise ConfigError(f"{net.role}: use_skips needs the {cfg.n_down_layers} encoder feature maps")
    elif skips is not None:
        raise ConfigError(f"{net.role}: skips given but use_skips is off")
    h = z if label is None else G.concat([z, label], axis=1)
    h = G.relu(G.fully_connected(h, net.params["fc.w"], net.params["fc.b"]))
    b = cfg.bottleneck
    h = G.reshape(h, (n, b, b, cfg.channels(cfg.n_down_layers - 1)))
    if "bn_fc" in net.bn:
        h = G.batch_norm(h, net.params["bn_fc.gamma"], net.params["bn_fc.beta"], net.bn["bn_fc"], training)
    if trace is not None:
        trace.append(h.shape[1:])
    last = cfg.n_down_layers - 1
    for i in range(cfg.n_down_layers):
        if skips is not None:
            h = G.concat([h, skips[last - i]], axis=-1)
        h = G.deconv2d(h, net.params[f"deconv{i}.w"], net.params[f"deconv{i}.b"],
                       stride=2, padding=cfg.padding, output_padding=1)
        h = G.tanh(h) if i == last else _bn_relu(net, f"bn_d{i}", h, training)
        if trace is not None:
            trace.append(h.shape[1:])
    return h


def decode(dec: NetworkParams, z: Tensor, label: Tensor | None = None, skips=None,
           training: bool = True) -> Tensor:
    """Reconstruction ``I_ED`` from latent codes."""
    if dec.role != "dec":
        raise ConfigError(f"decode needs a dec network, got {dec.role}")
    return _upsample(dec, z, label, skips, training)


def generate_residual(gen: NetworkParams, z: Tensor, label: Tensor | None = None, skips=None,
                      training: bool = True) -> Tensor:
    """Residual ``I_G``.

    ``z`` (and any skip maps) are cut from their history first, so nothing
    computed from the residual can send gradient back into the encoder.
    """
    if gen.role != "gen":
        raise ConfigError(f"generate_residual needs a gen network, got {gen.role}")
    z = G.detach(z)
    if skips is not None:
        skips = [G.detach(s) for s in skips]
    label = None if label is None else G.detach(label)
    return _upsample(gen, z, label, skips, training)


def compose_output(i_ed: Tensor, i_g: Tensor) -> Tensor:
    """``I_ED + I_G``, left unclamped."""
    return G.add(i_ed, i_g)


def discriminate(disc: NetworkParams, image: Tensor, label: Tensor | None = None,
                 training: bool = True) -> Tensor:
    """Probability of "real", one per batch element, clipped inside (0, 1)."""
    if disc.role != "disc":
        raise ConfigError(f"discriminate needs a disc network, got {disc.role}")
    feats = _conv_ladder(disc, image, training)
    n = image.shape[0]
    _check_label(disc.cfg, label, n)
    flat = G.reshape(feats[-1], (n, -1))
    if label is not None:
        flat = G.concat([flat, label], axis=1)
    logit = G.fully_connected(flat, disc.params["fc.w"], disc.params["fc.b"])
    return G.clamp_probability(G.sigmoid(G.reshape(logit, (n,))))


def layer_shapes(role: str, cfg: NetConfig) -> list[tuple[int, ...]]:
    """Per-layer output sizes ``(h, w, c)`` or ``(d,)``, read off an actual forward pass."""
    net = build_network(role, cfg, seed=0)
    dt = np.dtype(cfg.dtype)
    trace: list[tuple[int, ...]] = []
    if role in ("enc", "disc"):
        x = Tensor(np.zeros((1, cfg.image_size, cfg.image_size, cfg.in_channels), dtype=dt))
        feats = _conv_ladder(net, x, training=False)
        return [f.shape[1:] for f in feats] + [(net.params["fc.w"].shape[1],)]
    z = Tensor(np.zeros((1, cfg.z_dim), dtype=dt))
    label = Tensor(np.zeros((1, cfg.label_dim), dtype=dt)) if cfg.label_dim else None
    skips = None
    if cfg.use_skips:
        skips = [Tensor(np.zeros((1, cfg.image_size >> (i + 1), cfg.image_size >> (i + 1), cfg.channels(i)),
                                 dtype=dt)) for i in range(cfg.n_down_layers)]
    _upsample(net, z, label, skips, training=False, trace=trace)
    return trace
