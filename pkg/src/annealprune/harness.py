"""Training runs, metrics CSVs and run averaging."""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, ExperimentConfig
from .data import BatchPlan, Dataset, batches, load_cifar10, load_mnist_idx, mnist_paths, synth_blobs
from .network import Network, backward, build_baseline_cnn, build_mlp, forward, sgd_step
from .pruning import MaskState, ap_epoch_end, nonzero_fraction
from .tensor import Rng

log = logging.getLogger(__name__)

CSV_VERSION_LINE = "# annealprune metrics v1"
CSV_COLUMNS = ("run", "epoch", "train_acc", "test_acc", "loss", "nonzero_frac", "seconds")
THREADS_ENV = "ANNEALPRUNE_THREADS"


@dataclass
class MetricsRow:
    run: int | str
    epoch: int
    train_acc: float
    test_acc: float
    loss: float
    nonzero_frac: float
    seconds: float

    def cells(self) -> list[str]:
        return [str(self.run), str(self.epoch)] + [
            repr(float(getattr(self, c))) for c in CSV_COLUMNS[2:]]


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_VERSION_LINE + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.cells())
    return buf.getvalue()


def write_metrics_csv(path, rows) -> None:
    Path(path).write_text(metrics_csv_text(rows))


def read_metrics_csv(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CSV_VERSION_LINE:
        raise ValueError(f"{path}: missing '{CSV_VERSION_LINE}' header")
    reader = csv.DictReader(lines[1:])
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
    rows = []
    for r in reader:
        run = int(r["run"]) if r["run"].isdigit() else r["run"]
        rows.append(MetricsRow(run, int(r["epoch"]), *(float(r[c]) for c in CSV_COLUMNS[2:])))
    return rows


def mean_rows(runs: list[list[MetricsRow]]) -> list[MetricsRow]:
    """Per-epoch arithmetic mean across runs."""
    out = []
    for epoch_rows in zip(*runs):
        vals = {c: float(np.mean([getattr(r, c) for r in epoch_rows])) for c in CSV_COLUMNS[2:]}
        out.append(MetricsRow("mean", epoch_rows[0].epoch, **vals))
    return out


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar10":
        train, test = load_cifar10(cfg.path)
    elif cfg.dataset == "mnist":
        if cfg.train_images:
            tr_img, tr_lab = cfg.train_images, cfg.train_labels
        else:
            tr_img, tr_lab = mnist_paths(cfg.path, "train")
        train = load_mnist_idx(tr_img, tr_lab)
        if cfg.test_images:
            test = load_mnist_idx(cfg.test_images, cfg.test_labels)
        elif cfg.path and Path(mnist_paths(cfg.path, "t10k")[0]).exists():
            test = load_mnist_idx(*mnist_paths(cfg.path, "t10k"))
        else:
            train, test = train.split(cfg.test_fraction, cfg.synth_seed)
    else:
        full = synth_blobs(cfg.synth_classes, cfg.synth_per_class, cfg.synth_dim,
                           cfg.synth_spread, cfg.synth_seed)
        train, test = full.split(cfg.test_fraction, cfg.synth_seed)
    if cfg.train_limit:
        train = train.head(cfg.train_limit)
    if cfg.test_limit:
        test = test.head(cfg.test_limit)
    return train, test


def build_network(cfg: ExperimentConfig, input_shape, classes: int, rng: Rng) -> Network:
    q = cfg.q if cfg.regularizer == "dropout" else None
    if cfg.model == "baseline-cnn":
        if tuple(input_shape) != (32, 32, 3) or classes != 10:
            raise ConfigError("baseline-cnn needs 32x32x3 inputs and 10 classes")
        return build_baseline_cnn(rng, q, cfg.dtype)
    return build_mlp(input_shape, cfg.hidden, classes, rng, q, cfg.dtype)


def target_layer(cfg: ExperimentConfig, net: Network) -> int:
    if cfg.target == "first-dense":
        return net.dense_layers()[0]
    index = int(cfg.target)
    if index >= len(net.specs) or not net.layer_params(index):
        raise ConfigError(f"regularizer.target {index} is not a layer with parameters")
    return index


def evaluate(net: Network, ds: Dataset, batch_size: int = 256) -> tuple[float, np.ndarray]:
    """(accuracy, confusion matrix indexed [true, predicted])."""
    probs = net.predict(ds.images, batch_size)
    pred = probs.argmax(axis=1)
    confusion = np.zeros((ds.classes, net.num_classes), dtype=np.int64)
    np.add.at(confusion, (ds.labels, pred), 1)
    acc = float(np.mean(pred == ds.labels)) if len(ds) else 0.0
    return acc, confusion


class Trainer:
    """One seeded training run; resumable from a checkpoint."""

    def __init__(self, cfg: ExperimentConfig, run: int, train: Dataset, test: Dataset,
                 resume: checkpoint.Checkpoint | None = None):
        self.cfg = cfg
        self.run = run
        self.seed = cfg.seed + run
        self.train_set = train
        self.test_set = test
        root = Rng(self.seed)
        if resume is None:
            self.net = build_network(cfg, train.sample_shape, train.classes, root.derive("init"))
            self.dropout_rng = root.derive("dropout")
            self.epoch = 0
            self.mask_state = None
            self.layer = target_layer(cfg, self.net)
            if cfg.regularizer == "ap":
                self.mask_state = MaskState.for_layer(self.net, self.layer, cfg.ap, cfg.epochs,
                                                      root.derive("reentry"))
        else:
            self.net = resume.network()
            self.dropout_rng = Rng.from_state(resume.rng_states["dropout"])
            self.epoch = resume.epoch
            self.mask_state = resume.mask_state
            self.layer = target_layer(cfg, self.net)
        if tuple(self.net.input_shape) != train.sample_shape:
            raise ConfigError(f"network input {self.net.input_shape} does not match data {train.sample_shape}")

    def run_epoch(self) -> MetricsRow:
        if self.epoch >= self.cfg.epochs:
            raise RuntimeError(f"run {self.run} already finished {self.cfg.epochs} epochs")
        self.epoch += 1
        started = time.perf_counter()
        plan = BatchPlan(self.cfg.batch_size, self.seed, self.epoch)
        loss_sum = 0.0
        correct = 0
        for images, labels in batches(self.train_set, plan):
            cache, _ = forward(self.net, images, "train", self.dropout_rng)
            report = backward(self.net, cache, labels)
            sgd_step(self.net, self.cfg.lr)
            loss_sum += report.loss * len(labels)
            correct += report.correct
        if self.mask_state is not None:
            ap_epoch_end(self.net, self.mask_state, self.epoch)
        test_acc, _ = evaluate(self.net, self.test_set)
        seconds = time.perf_counter() - started
        count = len(self.train_set)
        return MetricsRow(self.run, self.epoch, correct / count, test_acc, loss_sum / count,
                          nonzero_fraction(self.net, self.layer),
                          seconds if self.cfg.record_seconds else 0.0)

    def save(self, path) -> int:
        return checkpoint.save(path, self.net, self.mask_state, self.epoch,
                               {"dropout": self.dropout_rng.get_state()},
                               {"run": self.run, "seed": self.seed, "target_layer": self.layer})


def run_paths(out: Path, run: int) -> tuple[Path, Path]:
    return out / f"run_{run:02d}.csv", out / f"run_{run:02d}.ckpt"


def train_run(cfg: ExperimentConfig, run: int, train: Dataset, test: Dataset,
              out: Path | None = None) -> list[MetricsRow]:
    trainer = Trainer(cfg, run, train, test)
    rows = []
    for _ in range(cfg.epochs):
        row = trainer.run_epoch()
        log.info("run %d epoch %d: train %.4f test %.4f loss %.4f nonzero %.4f",
                 run, row.epoch, row.train_acc, row.test_acc, row.loss, row.nonzero_frac)
        rows.append(row)
    if out is not None:
        csv_path, ckpt_path = run_paths(out, run)
        write_metrics_csv(csv_path, rows)
        trainer.save(ckpt_path)
    return rows


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, value)


def run_experiment(cfg: ExperimentConfig, train: Dataset | None = None,
                   test: Dataset | None = None) -> dict:
    """Train ``cfg.repeats`` runs and write per-run CSVs, ``mean.csv`` and checkpoints."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    if train is None or test is None:
        train, test = load_datasets(cfg)
    workers = min(worker_count(), cfg.repeats)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            runs = list(pool.map(lambda r: train_run(cfg, r, train, test, out), range(cfg.repeats)))
    else:
        runs = [train_run(cfg, r, train, test, out) for r in range(cfg.repeats)]
    mean = mean_rows(runs)
    write_metrics_csv(out / "mean.csv", mean)
    return {"runs": runs, "mean": mean, "out": out}
