"""Lambda-sensitivity comparison between the coupled and decoupled structures.

Coupled runs share one seed and differ only in lambda; decoupled runs ignore
lambda, so independent seeds stand in for the repeated runs. All eight models
are then ranked together by one NRDS run on a held-out real set.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import Dataset, SampleSet, SyntheticSpec, make_synthetic_images
from .networks import NetConfig
from .nrds import ClassifierConfig, NrdsReport, nrds
from .training import LAMBDA_SWEEP, TrainConfig, reconstruct, train


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = LAMBDA_SWEEP
    epochs: int = 200
    batch_size: int = 25
    train_count: int = 100
    heldout_count: int = 100
    nrds_epochs: int = 50
    nrds_batch_size: int = 32
    net: NetConfig = field(default_factory=NetConfig.desk)


@dataclass
class SweepResult:
    report: NrdsReport
    coupled: dict[str, float]
    decoupled: dict[str, float]
    recon: dict[str, float]
    seconds: float

    @property
    def coupled_std(self) -> float:
        return float(np.std(list(self.coupled.values())))

    @property
    def decoupled_std(self) -> float:
        return float(np.std(list(self.decoupled.values())))

    @property
    def contrast_holds(self) -> bool:
        return self.decoupled_std < self.coupled_std


def sweep_corpora(rep: int, cfg: SweepConfig) -> tuple[Dataset, Dataset]:
    """Training images and a disjoint held-out set for one repetition."""
    size, ch = cfg.net.image_size, cfg.net.in_channels
    train_set = make_synthetic_images(SyntheticSpec(cfg.train_count, size, ch, seed=2 * rep))
    heldout = make_synthetic_images(SyntheticSpec(cfg.heldout_count, size, ch, seed=2 * rep + 1))
    return train_set, heldout


def sweep_configs(rep: int, cfg: SweepConfig) -> dict[str, TrainConfig]:
    base = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, net=cfg.net)
    runs = {}
    for lam in cfg.lambdas:
        runs[f"coupled-lambda{lam:g}"] = replace(base, mode="coupled", lam=lam, seed=100 * rep)
    for j, lam in enumerate(cfg.lambdas):
        runs[f"decoupled-run{j + 1}"] = replace(base, mode="decoupled", lam=lam, seed=100 * rep + j)
    return runs


def lambda_sensitivity(rep: int, cfg: SweepConfig = SweepConfig(), log=None) -> SweepResult:
    """Train all eight models for repetition ``rep`` and score them together."""
    t0 = time.perf_counter()
    train_set, heldout = sweep_corpora(rep, cfg)
    fakes, recon = [], {}
    for name, tcfg in sweep_configs(rep, cfg).items():
        result = train(train_set, tcfg)
        recon[name] = result.history["recon"][-1]
        out = reconstruct(result.models, heldout.images)[2]
        fakes.append(SampleSet(name, out, "fake"))
        if log:
            log(f"rep {rep} {name}: final recon {recon[name]:.4f}")
    real = SampleSet("heldout", heldout.images, "real")
    clf = ClassifierConfig(kind="conv", net=cfg.net, dtype=cfg.net.dtype, batch_size=cfg.nrds_batch_size)
    report = nrds(real, fakes, clf, cfg.nrds_epochs, seed=rep)
    scores = report.scores()
    return SweepResult(
        report=report,
        coupled={k: v for k, v in scores.items() if k.startswith("coupled")},
        decoupled={k: v for k, v in scores.items() if k.startswith("decoupled")},
        recon=recon,
        seconds=time.perf_counter() - t0,
    )
