"""Command-line entry point: ``edgan {train,sweep,nrds,visualize}``.

Errors are reported as one JSON object on stderr, for example::

    {"error": "config", "message": "unknown key 'lamda'", "key": "lamda", "suggestion": "lambda"}
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, serialize
from .datagen import (Dataset, ParseError, SampleSet, SyntheticSpec, load_image_dir, make_synthetic_images,
                      read_pnm, read_sample_set, write_image)
from .experiments import SweepConfig, lambda_sensitivity
from .networks import ConfigError, NetConfig
from .nrds import ClassifierConfig, NrdsError, nrds, run_toy_example, write_curves, write_report
from .training import (LAMBDA_SWEEP, Checkpoint, TrainConfig, TrainConfigError, load_checkpoint, reconstruct,
                       save_checkpoint, train)

OUT_ENV = "EDGAN_OUT_DIR"
DEFAULT_SAMPLE_EVERY = 10
HOLDOUT_FRACTION = 0.1
N_PREVIEW = 4

RUN_KEYS = {"net", "data", "sample_every"}
DATA_KEYS = {"source", "count", "seed", "path"}


class CliError(Exception):
    """Reported as a single JSON line; ``kind`` selects the exit status."""

    def __init__(self, kind: str, message: str, **extra):
        super().__init__(message)
        self.kind = kind
        self.extra = extra

    def to_json(self) -> str:
        return json.dumps({"error": self.kind, "message": str(self), **self.extra})

    @property
    def status(self) -> int:
        return 2 if self.kind in ("usage", "config") else 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------------- config


def _unknown_key(key: str, known, where: str = "config") -> CliError:
    match = difflib.get_close_matches(key, sorted(known), n=1)
    hint = f"; did you mean '{match[0]}'?" if match else ""
    extra = {"key": key}
    if match:
        extra["suggestion"] = match[0]
    return CliError("config", f"unknown {where} key '{key}'{hint}", **extra)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise CliError("usage", f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    target = doc
    for p in parts[:-1]:
        target = target.setdefault(p, {})
        if not isinstance(target, dict):
            raise CliError("config", f"'{p}' is not a section", key=key)
    target[parts[-1]] = _parse_value(value)


def load_config_doc(path: str | None) -> dict:
    """Read a JSON config, or the ``config`` block of a run manifest."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("config", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError("config", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CliError("config", f"{path}: top level must be an object")
    if "run_id" in doc and "config" in doc:
        doc = doc["config"]
    return doc


@dataclasses.dataclass
class RunSpec:
    train: TrainConfig
    data: dict
    sample_every: int

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "data": self.data, "sample_every": self.sample_every}


def resolve_run(doc: dict, overrides=(), scale: str | None = None, seed: int | None = None) -> RunSpec:
    """File values, then ``--set`` overrides, then explicit flags."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        _apply_override(doc, item)
    if seed is not None:
        doc["seed"] = seed
    train_keys = TrainConfig.field_names() - {"net"}
    for key in doc:
        if key not in train_keys | RUN_KEYS:
            raise _unknown_key(key, train_keys | RUN_KEYS)
    net_doc = doc.get("net", {})
    if not isinstance(net_doc, dict):
        raise CliError("config", "'net' must be an object", key="net")
    net_keys = {f.name for f in dataclasses.fields(NetConfig)}
    for key in net_doc:
        if key not in net_keys:
            raise _unknown_key(key, net_keys, "net")
    data = {"source": "synthetic", "count": 100, "seed": 0, **doc.get("data", {})}
    for key in data:
        if key not in DATA_KEYS:
            raise _unknown_key(key, DATA_KEYS, "data")
    base = NetConfig.paper() if scale == "paper" else NetConfig.desk()
    try:
        net = replace(base, **net_doc)
        tdoc = {k: v for k, v in doc.items() if k in train_keys}
        cfg = TrainConfig.from_dict({**tdoc, "net": net})
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from None
    sample_every = int(doc.get("sample_every", DEFAULT_SAMPLE_EVERY))
    if sample_every < 1:
        raise CliError("config", "sample_every must be >= 1", key="sample_every")
    return RunSpec(cfg, data, sample_every)


def run_id(spec: RunSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    cfg = spec.train
    return f"{cfg.mode}-lambda{cfg.lam:g}-seed{cfg.seed}-{hashlib.sha1(blob).hexdigest()[:8]}"


# ------------------------------------------------------------------------ data


def load_dataset(data: dict, net: NetConfig) -> Dataset:
    source = data.get("source", "synthetic")
    if source == "synthetic":
        spec = SyntheticSpec(int(data.get("count", 100)), net.image_size, net.in_channels,
                             seed=int(data.get("seed", 0)))
        return make_synthetic_images(spec)
    if source == "dir":
        if "path" not in data:
            raise CliError("config", "data source 'dir' needs a path", key="data.path")
        try:
            return load_image_dir(data["path"], net.image_size, net.in_channels)
        except (FileNotFoundError, ValueError) as exc:
            raise CliError("data", str(exc)) from None
    raise CliError("config", f"unknown data source {source!r}; use 'synthetic' or 'dir'", key="data.source")


def _is_checkpoint(path: Path) -> bool:
    if not path.is_file():
        return False
    with path.open("rb") as fh:
        if fh.read(4) != serialize.MAGIC:
            return False
    try:
        return "meta/config" in serialize.load(path)
    except serialize.FormatError:
        return False


def _read_images(path: Path, net: NetConfig | None) -> np.ndarray:
    """Images from a directory, a single image file, or a binary sample set."""
    if path.is_dir():
        if net is None:
            raise CliError("usage", f"{path}: image size unknown; pass --image-size")
        try:
            return load_image_dir(path, net.image_size, net.in_channels).images
        except ValueError as exc:
            raise CliError("data", str(exc)) from None
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        try:
            return read_pnm(path)[None]
        except (ParseError, ValueError) as exc:
            raise CliError("data", f"{path}: {exc}") from None
    return _read_set(path, "real").samples


def _read_set(path: Path, kind: str) -> SampleSet:
    if not path.exists():
        raise CliError("data", f"no such file or directory: {path}")
    try:
        sset = read_sample_set(path, kind)
    except (ParseError, ValueError) as exc:
        raise CliError("data", str(exc)) from None
    return SampleSet(sset.source_id, sset.samples, kind)


def _synthetic_source(text: str, net: NetConfig) -> SampleSet:
    """``synthetic:COUNT[:SEED]`` for quick experiments."""
    parts = text.split(":")
    try:
        count = int(parts[1]) if len(parts) > 1 else 100
        seed = int(parts[2]) if len(parts) > 2 else 0
    except ValueError:
        raise CliError("usage", f"bad synthetic source {text!r}; use synthetic:COUNT[:SEED]") from None
    ds = make_synthetic_images(SyntheticSpec(count, net.image_size, net.in_channels, seed=seed))
    return SampleSet(text, ds.images, "real")


# ---------------------------------------------------------------------- output


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def _write_losses(path: Path, history: dict[str, list[float]]) -> None:
    keys = [k for k in ("recon", "d", "g", "d_real", "d_fake") if k in history]
    n = max(len(history[k]) for k in keys)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *keys])
        for e in range(n):
            row = [history[k][e] if e < len(history[k]) else "" for k in keys]
            w.writerow([e + 1, *[repr(float(v)) if v != "" else "" for v in row]])


def _montage(panes: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h, _, c = panes[0].shape
    sep = np.ones((h, gap, c), dtype=np.float64)
    parts = []
    for i, p in enumerate(panes):
        if i:
            parts.append(sep)
        parts.append(np.clip(p, -1, 1))
    return np.concatenate(parts, axis=1)


def export_triples(directory: Path, images: np.ndarray, models, prefix: str = "") -> list[Path]:
    """Write reconstruction, residual and output (plus a montage) per image.

    Without a G network the residual pane is skipped.
    """
    directory.mkdir(parents=True, exist_ok=True)
    i_ed, i_g, i_hat = reconstruct(models, images)
    written = []
    for n in range(len(images)):
        stem = f"{prefix}{n:03d}"
        written.append(write_image(directory / f"{stem}_recon.ppm", i_ed[n]))
        panes = [images[n], i_ed[n]]
        if i_g is not None:
            written.append(write_image(directory / f"{stem}_residual.ppm", i_g[n]))
            panes.append(i_g[n])
        written.append(write_image(directory / f"{stem}_output.ppm", i_hat[n]))
        panes.append(i_hat[n])
        written.append(write_image(directory / f"{stem}_montage.ppm", _montage(panes)))
    return written


@contextmanager
def deterministic(enabled: bool):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _log(msg: str, quiet: bool = False) -> None:
    if not quiet:
        print(msg, flush=True)


# -------------------------------------------------------------------- commands


def run_training(spec: RunSpec, root: Path, quiet: bool = False) -> Path:
    """Train one configuration into ``root/<run id>`` and return that directory."""
    cfg = spec.train
    data = load_dataset(spec.data, cfg.net)
    run_dir = root / run_id(spec)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    manifest = {
        "run_id": run_dir.name,
        "version": __version__,
        "seed": cfg.seed,
        "config": spec.to_dict(),
        "layout": {"losses": "losses.csv", "checkpoints": "checkpoints/", "samples": "samples/"},
        "loss_csv": ["losses.csv"],
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    preview = data.images[:N_PREVIEW]

    def on_epoch(epoch, models, hist):
        if epoch % spec.sample_every == 0 or epoch == cfg.epochs:
            save_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch:04d}.edgn", Checkpoint(models, cfg))
            export_triples(run_dir / "samples" / f"epoch_{epoch:04d}", preview, models)
            _write_losses(run_dir / "losses.csv", hist)
            _log(f"{run_dir.name} epoch {epoch}/{cfg.epochs} recon {hist['recon'][-1]:.4f}", quiet)

    result = train(data, cfg, on_epoch=on_epoch)
    _write_losses(run_dir / "losses.csv", result.history)
    save_checkpoint(run_dir / "checkpoints" / "final.edgn", Checkpoint(result.models, cfg))
    return run_dir


def cmd_train(args) -> int:
    spec = resolve_run(load_config_doc(args.config), args.set, args.scale, args.seed)
    root = out_root(args.out)
    specs = [spec]
    if args.lambda_sweep:
        specs = [RunSpec(replace(spec.train, mode="coupled", lam=lam), spec.data, spec.sample_every)
                 for lam in LAMBDA_SWEEP]
    for s in specs:
        print(run_training(s, root, args.quiet))
    return 0


def cmd_sweep(args) -> int:
    spec = resolve_run(load_config_doc(args.config), args.set, args.scale)
    cfg = SweepConfig(epochs=spec.train.epochs, batch_size=spec.train.batch_size, net=spec.train.net,
                      nrds_epochs=args.nrds_epochs)
    root = out_root(args.out) / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    first = args.seed if args.seed is not None else 0
    summary = []
    for rep in range(first, first + args.reps):
        res = lambda_sensitivity(rep, cfg, log=None if args.quiet else print)
        write_report(root / f"rep{rep}_report.csv", res.report)
        write_curves(root / f"rep{rep}_curves.csv", res.report)
        summary.append([rep, res.coupled_std, res.decoupled_std, int(res.contrast_holds)])
        _log(f"rep {rep}: std coupled {res.coupled_std:.4f} decoupled {res.decoupled_std:.4f}", args.quiet)
    with (root / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "std_coupled", "std_decoupled", "decoupled_lower"])
        w.writerows(summary)
    print(root / "summary.csv")
    return 0


def _nrds_source(text: str, kind: str, net: NetConfig | None) -> SampleSet | Checkpoint:
    if text.startswith("synthetic"):
        sset = _synthetic_source(text, net or NetConfig.desk())
        return SampleSet(sset.source_id, sset.samples, kind)
    path = Path(text)
    if _is_checkpoint(path):
        try:
            return load_checkpoint(path)
        except (serialize.FormatError, ValueError) as exc:
            raise CliError("data", f"{path}: {exc}") from None
    if path.is_dir() or path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return SampleSet(path.name, _read_images(path, net), kind)
    return _read_set(path, kind)


def _source_name(text: str, used: set[str]) -> str:
    base = Path(text).stem if not text.startswith("synthetic") else text
    name, i = base, 2
    while name in used:
        name, i = f"{base}-{i}", i + 1
    used.add(name)
    return name


def _image_net(size: int, channels: int) -> NetConfig:
    # desk preset, shallowed so small images keep a 4x4 bottleneck
    if size < 8 or size & (size - 1):
        raise CliError("shape", f"image classifier needs square power-of-two images of at least 8, got {size}")
    layers = min(NetConfig.desk().n_down_layers, size.bit_length() - 3)
    return NetConfig.desk(image_size=size, in_channels=channels, n_down_layers=layers)


def cmd_nrds(args) -> int:
    root = out_root(args.out) / "nrds"
    root.mkdir(parents=True, exist_ok=True)
    if args.toy:
        return _toy(args, root)
    if not args.real or not args.fake:
        raise CliError("usage", "nrds needs --real and at least one --fake (or --toy)")
    net = _image_net(args.image_size, args.channels) if args.image_size else None
    raw_fakes = [(_nrds_source(f, "fake", net), f) for f in args.fake]
    ckpts = [s for s, _ in raw_fakes if isinstance(s, Checkpoint)]
    if net is None and ckpts:
        net = ckpts[0].config.net
    real_src = _nrds_source(args.real, "real", net)
    if isinstance(real_src, Checkpoint):
        raise CliError("usage", "the real source cannot be a checkpoint")
    real = real_src
    if ckpts:
        n_hold = max(2, int(round(len(real) * HOLDOUT_FRACTION)))
        if n_hold >= len(real):
            raise CliError("data", f"real set of {len(real)} samples is too small for a held-out split")
        real = SampleSet(real.source_id, real.samples[-n_hold:], "real")
    used = {real.source_id}
    fakes = []
    for src, text in raw_fakes:
        name = _source_name(text, used)
        if isinstance(src, Checkpoint):
            want = (src.config.net.image_size, src.config.net.image_size, src.config.net.in_channels)
            if real.item_shape != want:
                raise CliError("shape", f"{text}: checkpoint expects images {want}, real set has {real.item_shape}")
            src = SampleSet(name, reconstruct(src.models, real.samples)[2], "fake")
        fakes.append(SampleSet(name, src.samples, "fake"))
    for f in fakes:
        if f.item_shape != real.item_shape:
            raise CliError("shape", f"fake source {f.source_id!r} has shape {f.item_shape}, "
                                    f"real has {real.item_shape}")
    if real.samples.ndim == 4:
        n, h, w, c = real.samples.shape
        if h != w:
            raise CliError("shape", f"image classifier needs square images, got {h}x{w}")
        cnet = net if net and (net.image_size, net.in_channels) == (h, c) else _image_net(h, c)
        clf = ClassifierConfig(kind="conv", net=cnet, dtype=cnet.dtype, batch_size=args.batch_size or 32)
        epochs = args.epochs or 50
    else:
        clf = ClassifierConfig(batch_size=args.batch_size or 64)
        epochs = args.epochs or 300
    seed = args.seed if args.seed is not None else 0
    try:
        report = nrds(real, fakes, clf, epochs, seed)
    except NrdsError as exc:
        raise CliError("nrds", str(exc)) from None
    write_report(root / "report.csv", report)
    write_curves(root / "curves.csv", report)
    for m in report.models:
        print(f"{m.source_id},{m.area!r},{m.score!r}")
    return 0


def _toy(args, root: Path) -> int:
    first = args.seed if args.seed is not None else 0
    rows = []
    for seed in range(first, first + args.seeds):
        t0 = time.perf_counter()
        report = run_toy_example(seed, epochs=args.epochs or 300)
        seconds = time.perf_counter() - t0
        write_report(root / f"toy_seed{seed}_report.csv", report)
        write_curves(root / f"toy_seed{seed}_curves.csv", report)
        s, a = report.scores(), report.areas()
        rows.append([seed, a["fake-close"], a["fake-far"], s["fake-close"], s["fake-far"], seconds])
        _log(f"seed {seed}: fake-close {s['fake-close']:.4f} fake-far {s['fake-far']:.4f}", args.quiet)
    with (root / "toy_summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "area_close", "area_far", "nrds_close", "nrds_far", "seconds"])
        w.writerows([[r[0], *map(repr, r[1:])] for r in rows])
    close = np.mean([r[3] for r in rows])
    print(f"mean nrds fake-close {close:.4f} fake-far {1 - close:.4f} over {len(rows)} seed(s)")
    return 0


def cmd_visualize(args) -> int:
    path = Path(args.checkpoint)
    if not _is_checkpoint(path):
        raise CliError("data", f"{path} is not a checkpoint")
    ckpt = load_checkpoint(path)
    net = ckpt.config.net
    if args.images.startswith("synthetic"):
        images = _synthetic_source(args.images, net).samples
    else:
        images = _read_images(Path(args.images), net)
    want = (net.image_size, net.image_size, net.in_channels)
    if images.shape[1:] != want:
        raise CliError("shape", f"checkpoint expects images {want}, got {images.shape[1:]}")
    out = out_root(args.out) / "visualize"
    if ckpt.models.gen is None:
        print("notice: coupled checkpoint has no G network; residual pane omitted", file=sys.stderr)
    for p in export_triples(out, images.astype(net.dtype), ckpt.models):
        print(p)
    return 0


# ---------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON config file or run manifest")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted keys for sections, e.g. net.z_dim=8)")
        p.add_argument("--scale", choices=("desk", "paper"), default="desk", help="network size preset")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for repeatable runs")
    p.add_argument("--quiet", action="store_true", help="only print result paths")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgan", description="Decoupled ED//GAN training and NRDS evaluation.")
    parser.add_argument("--version", action="version", version=f"edgan {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train one model (or a coupled lambda sweep)")
    _common(p)
    p.add_argument("--lambda-sweep", action="store_true",
                   help="train coupled models at lambda in " + ", ".join(f"{x:g}" for x in LAMBDA_SWEEP))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="coupled vs decoupled lambda-sensitivity comparison scored by NRDS")
    _common(p)
    p.add_argument("--reps", type=int, default=1, help="repetitions of the whole experiment")
    p.add_argument("--nrds-epochs", type=int, default=50, help="classifier epochs per NRDS run")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("nrds", help="score fake sources against a real source")
    _common(p, config=False)
    p.add_argument("--toy", action="store_true", help="run the 2-D Gaussian example")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive toy seeds")
    p.add_argument("--real", help="real source: CSV, sample-set file, image dir or synthetic:COUNT[:SEED]")
    p.add_argument("--fake", action="append", default=[], help="fake source (repeatable); may be a checkpoint")
    p.add_argument("--epochs", type=int, help="classifier epochs (default 300 for points, 50 for images)")
    p.add_argument("--batch-size", type=int, help="classifier batch size (default 64 for points, 32 for images)")
    p.add_argument("--image-size", type=int, help="resize image directories to this size")
    p.add_argument("--channels", type=int, default=3, help="channels for image directories")
    p.set_defaults(func=cmd_nrds)

    p = sub.add_parser("visualize", help="write reconstruction / residual / output triples")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="image file, image dir, sample set or synthetic:COUNT[:SEED]")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise CliError("usage", "missing command; choose train, sweep, nrds or visualize")
        with deterministic(args.deterministic):
            return args.func(args)
    except CliError as exc:
        print(exc.to_json(), file=sys.stderr)
        return exc.status
    except (ConfigError, TrainConfigError) as exc:
        print(CliError("config", str(exc)).to_json(), file=sys.stderr)
        return 2
    except (serialize.FormatError, ParseError, NrdsError, ValueError, OSError) as exc:
        print(CliError(type(exc).__name__, str(exc).replace("\n", " ")).to_json(), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
