"""Experiment runner: centralized, per-silo local and federated training.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
5 protocol abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .metrics import MetricRecord, MetricSink, evaluate_maps
from .nn import FcnConfig, NumericError, bce_with_logits, forward, init_params
from .paramset import ParamSet, ParamSetError
from .protocol import (Hyperparams, ProtocolError, WireError, epoch_seed, run_client, run_server,
                       train_centralized, train_epoch)
from .rng import SplitMix64, derive_seed
from .transport import InProcListener, TcpListener, TransportError, parse_address, tcp_connect

log = logging.getLogger("fedseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PROTOCOL = 0, 2, 3, 4, 5

RUN_MODES = ("centralized", "local", "federated", "serve", "join", "evaluate", "render")
DATASETS = ("synthetic", "camvid-dir", "coco-json")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "centralized"
    data: str = "synthetic"
    data_path: Optional[str] = None
    eval_path: Optional[str] = None
    eval_fraction: float = 0.2
    silos: int = 2
    rounds: int = 10
    epochs: int = 1
    lr: float = 5.0
    batch: int = 16
    seed: int = 0
    weighted: bool = False
    out: str = "runs/default"
    run_id: Optional[str] = None
    transport: str = "inproc"
    listen: str = "127.0.0.1:7878"
    connect: str = "127.0.0.1:7878"
    silo_index: int = 0
    timeout: float = 600.0
    # model
    hidden: list[int] = field(default_factory=lambda: [8, 16])
    kernel: int = 3
    dtype: str = "float32"
    # synthetic task
    n_train: int = 256
    n_eval: int = 64
    width: int = 32
    height: int = 32
    classes: int = 4
    noise: int = 24
    nearest: bool = False
    # evaluate / render
    model: Optional[str] = None
    render_count: int = 4

    def validate(self) -> None:
        if self.mode not in RUN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.data not in DATASETS:
            raise ConfigError(f"unknown dataset kind {self.data!r}")
        if self.data != "synthetic" and not self.data_path:
            raise ConfigError(f"--data {self.data} needs --data-path")
        if self.mode in ("evaluate", "render") and not self.model:
            raise ConfigError(f"--mode {self.mode} needs --model")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError("--transport must be inproc or tcp")
        if self.silos < 1:
            raise ConfigError("--silos must be >= 1")
        if self.mode == "join" and not 0 <= self.silo_index < self.silos:
            raise ConfigError("--silo-index must be in [0, silos)")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("--eval-fraction must be in (0, 1)")
        if self.classes < 2 or self.width < 1 or self.height < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("synthetic task sizes must be positive (and classes >= 2)")
        try:
            self.hyperparams()
            self.model_config(self.classes)
            for addr in (self.listen, self.connect):
                parse_address(addr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(epochs=self.epochs, lr=self.lr, batch_size=self.batch, rounds=self.rounds,
                           seed=self.seed, weighted=self.weighted)

    def model_config(self, num_classes: int) -> FcnConfig:
        return FcnConfig(3, num_classes, tuple(self.hidden), self.kernel, self.seed, self.dtype)

    @property
    def name(self) -> str:
        return self.run_id or f"{self.mode}-seed{self.seed}"


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    train: list
    eval: list
    class_names: tuple[str, ...]
    palette: D.Palette


def _split(samples: list, fraction: float, seed: int) -> tuple[list, list]:
    order = list(range(len(samples)))
    SplitMix64(derive_seed(seed, 3)).shuffle(order)
    n_eval = max(1, int(round(len(samples) * fraction)))
    if n_eval >= len(samples):
        raise D.DataError("not enough samples to hold out an evaluation split")
    return [samples[i] for i in order[n_eval:]], [samples[i] for i in order[:n_eval]]


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data == "synthetic":
        train = D.generate_synthetic(cfg.n_train, cfg.width, cfg.height, cfg.classes,
                                     derive_seed(cfg.seed, 1), cfg.noise)
        ev = D.generate_synthetic(cfg.n_eval, cfg.width, cfg.height, cfg.classes,
                                  derive_seed(cfg.seed, 2), cfg.noise)
        palette = D.synthetic_palette(cfg.classes)
    else:
        try:
            if cfg.data == "camvid-dir":
                samples, palette = D.load_dataset(cfg.data_path, nearest=cfg.nearest)
            else:
                samples, palette = D.load_coco_dataset(cfg.data_path)
            if cfg.eval_path:
                ev, _ = D.load_dataset(cfg.eval_path, palette, nearest=cfg.nearest)
                train = samples
            else:
                train, ev = _split(samples, cfg.eval_fraction, cfg.seed)
        except OSError as exc:
            raise D.DataError(str(exc)) from exc
    return Dataset(train, ev, palette.names, palette)


def _check_shapes(ds: Dataset, config: FcnConfig) -> None:
    s = config.total_stride
    for sample in ds.train + ds.eval:
        h, w = sample.target.shape
        if h % s or w % s:
            raise D.DataError(f"image size {w}x{h} is not divisible by the network stride {s}")


# --------------------------------------------------------------------------
# evaluation


def evaluate_params(params: ParamSet, config: FcnConfig, samples: Sequence, class_names: Sequence[str], *,
                    run_id: str, mode: str, round: int = 0, epoch: int = 0, batch: int = 16,
                    loss: Optional[float] = None) -> MetricRecord:
    """Argmax predictions over ``samples``; ``loss`` defaults to the evaluation BCE."""
    preds, losses, weights = [], [], []
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        images, targets = D.to_tensors(chunk, config.num_classes, config.dtype)
        logits = forward(params, config, images)
        batch_loss, _ = bce_with_logits(logits, targets)
        losses.append(batch_loss)
        weights.append(len(chunk))
        preds.append(logits.argmax(axis=1))
    pred = np.concatenate(preds)
    truth = np.stack([s.target for s in samples])
    if loss is None:
        loss = float(np.dot(losses, weights) / sum(weights))
    return evaluate_maps(pred, truth, class_names, run_id=run_id, mode=mode, loss=loss, round=round, epoch=epoch)


def save_params(params: ParamSet, path: Path) -> None:
    path.write_bytes(params.to_bytes())


def load_params(path: str | Path) -> ParamSet:
    try:
        return ParamSet.from_bytes(Path(path).read_bytes())
    except (OSError, ParamSetError) as exc:
        raise D.DataError(f"cannot read model file {path}: {exc}") from exc


def _fresh_sink(path: Path) -> MetricSink:
    path.write_text("")
    return MetricSink(path)


def _summary(rows: list[tuple[str, MetricRecord]]) -> str:
    lines = [f"{'model':<24} {'loss':>10} {'pix_acc':>8} {'mIoU':>8}"]
    for label, r in rows:
        miou = f"{r.mean_iou:.4f}" if r.mean_iou is not None else "n/a"
        lines.append(f"{label:<24} {r.loss:>10.5f} {r.pixel_accuracy:>8.4f} {miou:>8}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# modes


def _run_centralized(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    hp = cfg.hyperparams()
    silo = D.partition(ds.train, 1, cfg.seed)[0]
    with _fresh_sink(out / "metrics.jsonl") as sink:
        def on_epoch(t, params, loss):
            sink.append(evaluate_params(params, config, ds.eval, ds.class_names, run_id=cfg.name,
                                        mode="centralized", epoch=t, loss=loss))

        params = train_centralized(init_params(config), silo, config, hp, cfg.epochs, on_epoch)
    save_params(params, out / "model.fps")
    return [("centralized", sink.records[-1])] if sink.records else []


def _run_local(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    hp = cfg.hyperparams()
    rows = []
    for silo in D.partition(ds.train, cfg.silos, cfg.seed):
        if len(silo) == 0:
            raise D.DataError(f"silo {silo.id} is empty")
        with _fresh_sink(out / f"metrics_silo{silo.id}.jsonl") as sink:
            params = init_params(config)
            for t in range(cfg.epochs):
                params, losses = train_epoch(params, silo, config, hp.lr, hp.batch_size,
                                             epoch_seed(hp.seed, silo.id, t))
                sink.append(evaluate_params(params, config, ds.eval, ds.class_names,
                                            run_id=f"{cfg.name}-silo{silo.id}", mode="local",
                                            epoch=t + 1, loss=sum(losses) / len(losses)))
        save_params(params, out / f"model_silo{silo.id}.fps")
        if sink.records:
            rows.append((f"local silo {silo.id}", sink.records[-1]))
    return rows


def _round_logger(cfg: RunConfig, ds: Dataset, config: FcnConfig, sink: MetricSink):
    def on_round(rnd, params, updates):
        loss = sum(u.loss for u in updates) / len(updates)
        sink.append(evaluate_params(params, config, ds.eval, ds.class_names, run_id=cfg.name,
                                    mode="federated", round=rnd, epoch=rnd * cfg.epochs, loss=loss))

    return on_round


def _run_federated(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    hp = cfg.hyperparams()
    silos = D.partition(ds.train, cfg.silos, cfg.seed)
    if any(len(s) == 0 for s in silos):
        raise D.DataError("partition produced an empty silo")
    if cfg.transport == "tcp":
        listener = TcpListener(parse_address(cfg.listen)[0], 0)
        host, port = listener.address
        connect = lambda: tcp_connect(host, port, cfg.timeout)  # noqa: E731
    else:
        listener = InProcListener()
        connect = listener.connect

    errors: list[BaseException] = []

    def client(silo):
        try:
            run_client(connect(), silo, config, timeout=cfg.timeout)
        except BaseException as exc:  # surfaced after the server returns
            errors.append(exc)

    workers = [threading.Thread(target=client, args=(s,), name=f"federate-{s.id}", daemon=True) for s in silos]
    for w in workers:
        w.start()
    try:
        with _fresh_sink(out / "metrics.jsonl") as sink:
            try:
                params = run_server(listener, cfg.silos, hp, init_params(config), config,
                                    on_round=_round_logger(cfg, ds, config, sink), timeout=cfg.timeout)
            except ProtocolError:
                for w in workers:
                    w.join(timeout=5)
                for exc in errors:
                    if isinstance(exc, NumericError):
                        raise exc
                raise
    finally:
        listener.close()
    for w in workers:
        w.join()
    if errors:
        raise errors[0]
    save_params(params, out / "model.fps")
    return [("federated", sink.records[-1])] if sink.records else []


def _run_serve(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    listener = TcpListener(*parse_address(cfg.listen))
    log.info("listening on %s:%d for %d federates", *listener.address, cfg.silos)
    try:
        with _fresh_sink(out / "metrics.jsonl") as sink:
            params = run_server(listener, cfg.silos, cfg.hyperparams(), init_params(config), config,
                                on_round=_round_logger(cfg, ds, config, sink), timeout=cfg.timeout)
    finally:
        listener.close()
    save_params(params, out / "model.fps")
    return [("federated", sink.records[-1])] if sink.records else []


def _run_join(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    silo = D.partition(ds.train, cfg.silos, cfg.seed)[cfg.silo_index]
    channel = tcp_connect(*parse_address(cfg.connect), timeout=cfg.timeout)
    params = run_client(channel, silo, config, timeout=cfg.timeout)
    save_params(params, out / f"model_silo{cfg.silo_index}.fps")
    return []


def _run_evaluate(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    params = load_params(cfg.model)
    if not params.compatible(init_params(config)):
        raise ConfigError("model file does not match the configured architecture")
    rec = evaluate_params(params, config, ds.eval, ds.class_names, run_id=cfg.name, mode="centralized")
    print(rec.to_json())
    return [(Path(cfg.model).name, rec)]


def render_predictions(params: ParamSet, config: FcnConfig, samples: Sequence, palette: D.Palette,
                       out_dir: Path) -> list[Path]:
    """Write ``render_XXXX.ppm`` files: source | prediction | ground truth, side by side."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, sample in enumerate(samples):
        images, _ = D.to_tensors([sample], config.num_classes, config.dtype)
        pred = forward(params, config, images).argmax(axis=1)[0]
        panel = np.concatenate(
            [sample.image, D.class_to_rgb(pred, palette), D.class_to_rgb(sample.target, palette)], axis=1
        )
        path = out_dir / f"render_{i + 1:04d}.ppm"
        D.write_ppm_file(path, panel)
        paths.append(path)
    return paths


def _run_render(cfg: RunConfig, ds: Dataset, config: FcnConfig, out: Path) -> list:
    params = load_params(cfg.model)
    paths = render_predictions(params, config, ds.eval[: cfg.render_count], ds.palette, out / "renders")
    print(f"wrote {len(paths)} renders to {out / 'renders'}")
    return []


_MODES = {
    "centralized": _run_centralized,
    "local": _run_local,
    "federated": _run_federated,
    "serve": _run_serve,
    "join": _run_join,
    "evaluate": _run_evaluate,
    "render": _run_render,
}


def run_experiment(cfg: RunConfig) -> int:
    try:
        cfg.validate()
        ds = load_data(cfg)
        config = cfg.model_config(len(ds.class_names))
        _check_shapes(ds, config)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.mode not in ("evaluate", "render"):
            (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
        rows = _MODES[cfg.mode](cfg, ds, config, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except D.DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except (ProtocolError, TransportError, WireError) as exc:
        log.error("protocol abort: %s", exc)
        return EXIT_PROTOCOL
    if rows:
        print(_summary(rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedseg", description=__doc__.splitlines()[0],
                                argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--mode", choices=RUN_MODES)
    p.add_argument("--data", choices=DATASETS)
    p.add_argument("--data-path", dest="data_path")
    p.add_argument("--eval-path", dest="eval_path")
    p.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    p.add_argument("--silos", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int, help="local epochs per round (federated) or total epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--weighted", action="store_true", help="sample-weighted FedAvg")
    p.add_argument("--out")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--transport", choices=("inproc", "tcp"))
    p.add_argument("--listen", help="host:port for --mode serve")
    p.add_argument("--connect", help="host:port for --mode join")
    p.add_argument("--silo-index", dest="silo_index", type=int)
    p.add_argument("--timeout", type=float)
    p.add_argument("--hidden", type=lambda s: [int(v) for v in s.split(",")], help="e.g. 8,16")
    p.add_argument("--kernel", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--noise", type=int)
    p.add_argument("--nearest", action="store_true", help="map unknown mask colors to the nearest class")
    p.add_argument("--model", help="FPS1 model file for evaluate/render")
    p.add_argument("--render-count", dest="render_count", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(argv: Optional[Sequence[str]] = None) -> tuple[RunConfig, bool]:
    ns = vars(build_parser().parse_args(argv))
    verbose = ns.pop("verbose", False)
    merged: dict = {}
    if "config" in ns:
        path = ns.pop("config")
        try:
            merged.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    merged.update(ns)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**merged), verbose
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg, verbose = config_from_args(argv)
    except ConfigError as exc:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(levelname)s %(message)s")
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
