"""Normalized relative discriminative score.

One binary classifier is trained to separate a real set from the union of
several fake sets. After every epoch its mean output on each set is recorded;
the area under each fake set's curve, divided by the sum of areas, is that
model's score. Fakes the classifier keeps confusing with real data decay
slowly and so earn larger areas. Only relative values carry meaning.
"""
from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad as G
from .datagen import SampleSet, make_gaussian_2d
from .grad import OptimizerState, Tape, Tensor
from .networks import INIT_STD, NetConfig, build_network, discriminate

CLASSIFIER_KINDS = ("mlp", "conv")
BALANCE_MODES = ("equal", "natural")

TOY_MEANS = {"real": (0.0, 0.0), "fake-close": (-0.5, 0.0), "fake-far": (1.5, 0.0)}
TOY_COUNT = 1000
TOY_EPOCHS = 300


class NrdsError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    """Shared classifier settings.

    ``kind="mlp"`` flattens each sample and applies ``hidden`` relu layers;
    ``kind="conv"`` reuses the adversarial discriminator topology described by
    ``net``.

    ``balance="equal"`` draws as many real samples per epoch as fake samples
    in total; ``"natural"`` uses every sample of every set once per epoch.
    """

    kind: str = "mlp"
    hidden: tuple[int, ...] = (32, 32)
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"
    balance: str = "equal"
    net: NetConfig | None = None

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise NrdsError(f"classifier kind must be one of {CLASSIFIER_KINDS}, got {self.kind!r}")
        if self.balance not in BALANCE_MODES:
            raise NrdsError(f"balance must be one of {BALANCE_MODES}, got {self.balance!r}")
        if self.batch_size < 1:
            raise NrdsError("batch_size must be >= 1")
        if self.kind == "conv" and self.net is None:
            raise NrdsError("conv classifier needs a NetConfig")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class Curve:
    """Mean classifier output per epoch; ``values[e - 1]`` belongs to epoch ``e``."""

    source_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) == 0:
            raise NrdsError("curve needs at least one value")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise NrdsError(f"curve {self.source_id!r} has values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class Curves:
    real: Curve
    fakes: list[Curve]


@dataclass
class ModelScore:
    source_id: str
    curve: Curve
    area: float
    score: float


@dataclass
class NrdsReport:
    models: list[ModelScore]
    real_curve: Curve
    extra: dict = field(default_factory=dict)

    def scores(self) -> dict[str, float]:
        return {m.source_id: m.score for m in self.models}

    def areas(self) -> dict[str, float]:
        return {m.source_id: m.area for m in self.models}


def curve_area(curve: Curve | np.ndarray) -> float:
    """Trapezoidal area with unit spacing between epochs."""
    v = curve.values if isinstance(curve, Curve) else np.asarray(curve, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise NrdsError("curve_area needs at least 2 points")
    return float(v.sum() - 0.5 * (v[0] + v[-1]))


def nrds_scores(areas) -> list[float]:
    a = np.asarray(areas, dtype=np.float64)
    if a.ndim != 1 or len(a) == 0:
        raise NrdsError("need at least one area")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise NrdsError(f"areas must be finite and positive, got {a.tolist()}")
    return (a / a.sum()).tolist()


# ----------------------------------------------------------------- classifier


class _Classifier:
    def __init__(self, cfg: ClassifierConfig, item_shape: tuple[int, ...], seed: int):
        self.cfg = cfg
        self.item_shape = item_shape
        self.opt = cfg.optimizer()
        if cfg.kind == "conv":
            net = cfg.net
            want = (net.image_size, net.image_size, net.in_channels)
            if item_shape != want:
                raise NrdsError(f"conv classifier expects samples of shape {want}, got {item_shape}")
            self.disc = build_network("disc", net, seed)
            self.params = self.disc.params
            return
        rng = np.random.default_rng([seed, 99])
        sizes = (int(np.prod(item_shape)), *cfg.hidden, 1)
        self.params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"fc{i}.w"] = Tensor((rng.standard_normal((a, b)) * INIT_STD).astype(cfg.dtype), True)
            self.params[f"fc{i}.b"] = Tensor(np.zeros(b, cfg.dtype), True)
        self.n_layers = len(sizes) - 1

    def forward(self, x: np.ndarray, training: bool) -> Tensor:
        if self.cfg.kind == "conv":
            return discriminate(self.disc, Tensor(x.astype(self.cfg.net.dtype)), training=training)
        h = Tensor(x.reshape(len(x), -1).astype(self.cfg.dtype))
        for i in range(self.n_layers):
            h = G.fully_connected(h, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i < self.n_layers - 1:
                h = G.relu(h)
        return G.clamp_probability(G.sigmoid(G.reshape(h, (len(x),))))

    def train_batch(self, x: np.ndarray, y: np.ndarray) -> float:
        with Tape() as tape:
            loss = G.binary_cross_entropy(self.forward(x, True), y)
        G.zero_grads(self.params.values())
        G.backward(loss, tape)
        G.optimizer_step(self.params, self.opt)
        return loss.item()

    def mean_output(self, x: np.ndarray, batch: int = 500) -> float:
        total = 0.0
        for i in range(0, len(x), batch):
            total += float(self.forward(x[i:i + batch], False).data.astype(np.float64).sum())
        return total / len(x)


# -------------------------------------------------------------------- fitting


def _check_sets(real: SampleSet, fakes: list[SampleSet]) -> None:
    if not fakes:
        raise NrdsError("need at least one fake set")
    if real.kind != "real" or any(f.kind != "fake" for f in fakes):
        raise NrdsError("expected exactly one real set and only fake sets otherwise")
    ids = [f.source_id for f in fakes]
    if len(set(ids)) != len(ids) or real.source_id in ids:
        raise NrdsError(f"source ids must be distinct, got {[real.source_id, *ids]}")
    for f in fakes:
        if f.item_shape != real.item_shape:
            raise NrdsError(f"fake set {f.source_id!r} has shape {f.item_shape}, real has {real.item_shape}")


def _set_key(source_id: str) -> int:
    return zlib.crc32(source_id.encode("utf-8"))


def _epoch_data(real: SampleSet, fakes: list[SampleSet], seed: int, epoch: int, balance: str = "equal"):
    """Training data for one epoch, independent of the order of ``fakes``.

    With ``"equal"`` every fake set contributes ``m`` samples and the real set
    ``m * len(fakes)``.
    """
    k = len(fakes)
    rng = np.random.default_rng([seed, epoch, 0])
    ordered = sorted(fakes, key=lambda s: s.source_id)
    if balance == "natural":
        x_real = real.samples
        parts = [f.samples for f in ordered]
    else:
        m = min(min(len(f) for f in fakes), max(1, len(real) // k))
        parts = []
        for f in ordered:
            sub = np.random.default_rng([seed, epoch, _set_key(f.source_id)])
            parts.append(f.samples[sub.permutation(len(f))[:m]])
        x_real = real.samples[rng.choice(len(real), size=m * k, replace=m * k > len(real))]
    n_fake = sum(len(p) for p in parts)
    x = np.concatenate([x_real, *parts])
    y = np.concatenate([np.ones(len(x_real)), np.zeros(n_fake)])
    order = rng.permutation(len(x))
    return x[order], y[order]


def fit_discriminator_curves(real: SampleSet, fakes: list[SampleSet], classifier_cfg: ClassifierConfig,
                             epochs: int, seed: int, on_epoch=None) -> Curves:
    """Train the shared classifier and record mean outputs after every epoch."""
    _check_sets(real, fakes)
    if epochs < 1:
        raise NrdsError("epochs must be >= 1")
    clf = _Classifier(classifier_cfg, real.item_shape, seed)
    bs = classifier_cfg.batch_size
    real_vals, fake_vals = [], [[] for _ in fakes]
    for epoch in range(1, epochs + 1):
        x, y = _epoch_data(real, fakes, seed, epoch, classifier_cfg.balance)
        for i in range(0, len(x), bs):
            if len(x) - i < 2 and classifier_cfg.kind == "conv":
                break
            clf.train_batch(x[i:i + bs], y[i:i + bs])
        real_vals.append(clf.mean_output(real.samples))
        for j, f in enumerate(fakes):
            fake_vals[j].append(clf.mean_output(f.samples))
        if on_epoch is not None:
            on_epoch(epoch, real_vals[-1], [v[-1] for v in fake_vals])
    return Curves(Curve(real.source_id, real_vals), [Curve(f.source_id, v) for f, v in zip(fakes, fake_vals)])


def score_curves(curves: Curves) -> NrdsReport:
    areas = [curve_area(c) for c in curves.fakes]
    scores = nrds_scores(areas)
    models = [ModelScore(c.source_id, c, a, s) for c, a, s in zip(curves.fakes, areas, scores)]
    return NrdsReport(models, curves.real)


def nrds(real: SampleSet, fakes: list[SampleSet], classifier_cfg: ClassifierConfig, epochs: int,
         seed: int, on_epoch=None) -> NrdsReport:
    return score_curves(fit_discriminator_curves(real, fakes, classifier_cfg, epochs, seed, on_epoch))


def toy_sets(seed: int, count: int = TOY_COUNT) -> tuple[SampleSet, list[SampleSet]]:
    sets = {
        name: make_gaussian_2d(mean, count, [seed, i], name, "real" if name == "real" else "fake")
        for i, (name, mean) in enumerate(TOY_MEANS.items())
    }
    return sets["real"], [sets["fake-close"], sets["fake-far"]]


def run_toy_example(seed: int, count: int = TOY_COUNT, epochs: int = TOY_EPOCHS,
                    classifier_cfg: ClassifierConfig | None = None) -> NrdsReport:
    """Real N([0,0], I) against fakes N([-0.5,0], I) and N([1.5,0], I)."""
    real, fakes = toy_sets(seed, count)
    report = nrds(real, fakes, classifier_cfg or ClassifierConfig(), epochs, seed)
    report.extra["seed"] = seed
    return report


# ------------------------------------------------------------------------ I/O


def write_report(path: str | os.PathLike, report: NrdsReport) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_id", "area", "nrds"])
        for m in report.models:
            w.writerow([m.source_id, repr(m.area), repr(m.score)])
    return path


def write_curves(path: str | os.PathLike, report: NrdsReport) -> Path:
    path = Path(path)
    cols = [report.real_curve] + [m.curve for m in report.models]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [c.source_id for c in cols])
        for e in range(len(report.real_curve)):
            w.writerow([e + 1] + [repr(float(c.values[e])) for c in cols])
    return path


def read_report(path: str | os.PathLike) -> dict[str, tuple[float, float]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {r["source_id"]: (float(r["area"]), float(r["nrds"])) for r in rows}
