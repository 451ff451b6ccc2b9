"""Training loops and data assembly.

One loop serves every stage.  Plain fitting (seed training, fine-tuning) is
the degenerate case with no architecture parameters; the search stages use
the full protocol:

* a warmup phase where only network weights train,
* then per-batch alternation: a weight step on a training batch minimizing
  task MSE, followed by an architecture step on a cycled validation batch
  minimizing task MSE plus lambda times the problem's regularizer,
* epoch-level validation, early stopping on patience, and restoration of
  the best-validation snapshot (weights, architecture parameters, and norm
  running stats together).

Data handling standardizes inputs and targets with statistics computed on
the training split only; the constants ride along for later denormalization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, tmean
from .optim import Adam

MODE_VALUE = "value"    # (SBP, DBP) pair per window
MODE_SIGNAL = "signal"  # full-length waveform per window


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    d = pred - target
    return tmean(d * d)


# ---------------------------------------------------------------------------
# data assembly
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    x_mean: float
    x_std: float
    y_mean: np.ndarray
    y_std: np.ndarray

    def norm_x(self, x):
        return (x - self.x_mean) / self.x_std

    def norm_y(self, y):
        return (y - self.y_mean) / self.y_std

    def denorm_y(self, y):
        return y * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean, "x_std": self.x_std,
                "y_mean": list(np.atleast_1d(self.y_mean).astype(float)),
                "y_std": list(np.atleast_1d(self.y_std).astype(float))}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(float(d["x_mean"]), float(d["x_std"]),
                   np.asarray(d["y_mean"], dtype=float), np.asarray(d["y_std"], dtype=float))


@dataclass
class TaskData:
    mode: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    norm: Normalizer
    train_subjects: list[str]
    val_subjects: list[str]


def _stack_x(windows) -> np.ndarray:
    return np.stack([w.ppg for w in windows]).astype(np.float64)[:, None, :]


def _stack_y(windows, mode: str) -> np.ndarray:
    if mode == MODE_VALUE:
        return np.array([[w.sbp, w.dbp] for w in windows], dtype=np.float64)
    missing = sorted({w.subject_id for w in windows if w.abp is None})
    if missing:
        raise ValueError(
            f"waveform targets need a full ABP trace; subjects without one: {missing}")
    return np.stack([w.abp for w in windows]).astype(np.float64)[:, None, :]


def assemble_task(train_windows, val_windows, mode: str = MODE_VALUE) -> TaskData:
    """Build standardized train/val arrays from windows.

    Statistics come from the training windows alone.  For value targets the
    two columns are standardized independently; waveform targets share one
    global mean/std.
    """
    if mode not in (MODE_VALUE, MODE_SIGNAL):
        raise ValueError(f"unknown task mode {mode!r}")
    if not train_windows or not val_windows:
        raise ValueError("both train and val window lists must be nonempty")
    xtr, xva = _stack_x(train_windows), _stack_x(val_windows)
    ytr, yva = _stack_y(train_windows, mode), _stack_y(val_windows, mode)
    x_mean, x_std = float(xtr.mean()), float(xtr.std())
    if x_std == 0:
        x_std = 1.0
    if mode == MODE_VALUE:
        y_mean, y_std = ytr.mean(axis=0), ytr.std(axis=0)
    else:
        y_mean, y_std = np.array([ytr.mean()]), np.array([ytr.std()])
    y_std = np.where(y_std == 0, 1.0, y_std)
    norm = Normalizer(x_mean, x_std, y_mean, y_std)
    return TaskData(
        mode=mode,
        x_train=norm.norm_x(xtr), y_train=norm.norm_y(ytr),
        x_val=norm.norm_x(xva), y_val=norm.norm_y(yva),
        norm=norm,
        train_subjects=sorted({w.subject_id for w in train_windows}),
        val_subjects=sorted({w.subject_id for w in val_windows}))


def iter_batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng):
    order = rng.permutation(len(x))
    for i in range(0, len(order), batch_size):
        idx = order[i: i + batch_size]
        yield x[idx], y[idx]


def _val_cycler(x, y, batch_size, rng):
    while True:
        order = rng.permutation(len(x))
        for i in range(0, len(order), batch_size):
            idx = order[i: i + batch_size]
            yield x[idx], y[idx]


# ---------------------------------------------------------------------------
# search problems
# ---------------------------------------------------------------------------

class Problem:
    """What the loop needs from a trainable model.

    Weight parameters train on task loss; architecture parameters (possibly
    none) train on validation loss plus the scaled regularizer.  Snapshots
    cover both groups plus any buffers so restoring reproduces evaluation
    behavior exactly.
    """

    def forward(self, x: np.ndarray, training: bool) -> Tensor:
        raise NotImplementedError

    def weight_params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def arch_params(self) -> dict[str, Tensor]:
        return {}

    def regularizer(self) -> Tensor | None:
        return None

    def weight_loss_extra(self) -> Tensor | None:
        """Optional penalty added to the weight-step loss, kept out of the log."""
        return None

    def expected_cost(self) -> float:
        reg = self.regularizer()
        return float(reg.item()) if reg is not None else math.nan

    def on_epoch(self, epoch: int):
        pass

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_buffer(self, name: str, arr: np.ndarray):
        raise KeyError(name)

    def snapshot(self) -> dict[str, np.ndarray]:
        st = {}
        for k, t in {**self.weight_params(), **self.arch_params()}.items():
            st["p:" + k] = t.data.copy()
        for k, b in self.buffers().items():
            st["b:" + k] = np.array(b, copy=True)
        return st

    def restore(self, st: dict[str, np.ndarray]):
        params = {**self.weight_params(), **self.arch_params()}
        for k, v in st.items():
            if k.startswith("p:"):
                params[k[2:]].data = v.copy()
            else:
                self.set_buffer(k[2:], v)


def graph_buffers(graph) -> dict[str, np.ndarray]:
    out = {}
    for nid, node in graph.nodes.items():
        for name, b in node.layer.buffers().items():
            out[f"{nid}.{name}"] = b
    return out


def set_graph_buffer(graph, name: str, arr: np.ndarray):
    nid, bname = name.split(".", 1)
    graph.nodes[nid].layer.set_buffer(bname, arr)


class GraphProblem(Problem):
    """Plain supervised training of a ModelGraph, no architecture search."""

    def __init__(self, graph):
        self.graph = graph

    def forward(self, x, training):
        return self.graph.forward(x, training=training)

    def weight_params(self):
        return self.graph.params()

    def expected_cost(self):
        return float(self.graph.param_count())

    def buffers(self):
        return graph_buffers(self.graph)

    def set_buffer(self, name, arr):
        set_graph_buffer(self.graph, name, arr)


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "task_loss", "reg_value", "val_mse", "expected_cost")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1

    def append(self, epoch, task_loss, reg_value, val_mse, expected_cost):
        self.rows.append({"epoch": int(epoch), "task_loss": float(task_loss),
                          "reg_value": float(reg_value), "val_mse": float(val_mse),
                          "expected_cost": float(expected_cost)})

    def to_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (row[k] if k == "epoch" else repr(row[k])) for k in LOG_COLUMNS})

    @classmethod
    def from_csv(cls, path: str) -> "TrainLog":
        log = cls()
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                log.append(int(row["epoch"]), float(row["task_loss"]),
                           float(row["reg_value"]), float(row["val_mse"]),
                           float(row["expected_cost"]))
        if log.rows:
            best = min(log.rows, key=lambda r: r["val_mse"])
            log.best_val, log.best_epoch = best["val_mse"], best["epoch"]
        return log


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class SearchSettings:
    epochs: int = 200
    warmup: int = 20
    patience: int = 40
    batch_size: int = 32
    lr_w: float = 1e-3
    lr_arch: float = 1e-2
    lambda_: float = 0.0
    seed: int = 0


def evaluate_mse(problem: Problem, x: np.ndarray, y: np.ndarray,
                 batch_size: int = 256) -> float:
    se, n = 0.0, 0
    with no_grad():
        for i in range(0, len(x), batch_size):
            pred = problem.forward(x[i: i + batch_size], False).data
            se += float(((pred - y[i: i + batch_size]) ** 2).sum())
            n += pred.size
    return se / n


def run_search(problem: Problem, data: TaskData, s: SearchSettings) -> TrainLog:
    """Train ``problem`` on ``data`` under the staged alternation protocol.

    Weight steps minimize task MSE on training batches.  Once past warmup,
    each weight step is followed by an architecture step on the next
    validation batch, minimizing task MSE + lambda * regularizer.  The side
    with no parameters simply skips its step.  Early stopping watches
    epoch-level validation MSE with the configured patience, and the best
    snapshot is restored before returning.
    """
    rng = np.random.default_rng(s.seed)
    opt_w = Adam(problem.weight_params(), lr=s.lr_w)
    arch = problem.arch_params()
    opt_a = Adam(arch, lr=s.lr_arch) if arch else None
    val_batches = _val_cycler(data.x_val, data.y_val, s.batch_size,
                              np.random.default_rng(s.seed + 1))
    log = TrainLog()
    best_state = None
    since_best = 0
    for epoch in range(s.epochs):
        problem.on_epoch(epoch)
        task_sum, nb = 0.0, 0
        for xb, yb in iter_batches(data.x_train, data.y_train, s.batch_size, rng):
            opt_w.zero_grad()
            if opt_a is not None:
                opt_a.zero_grad()
            loss = mse_loss(problem.forward(xb, True), yb)
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"non-finite task loss {loss.item()} at epoch {epoch}")
            extra = problem.weight_loss_extra()
            (loss if extra is None else loss + extra).backward()
            opt_w.step()
            task_sum += loss.item()
            nb += 1
            if opt_a is not None and epoch >= s.warmup:
                xv, yv = next(val_batches)
                opt_w.zero_grad()
                opt_a.zero_grad()
                total = mse_loss(problem.forward(xv, True), yv)
                reg = problem.regularizer()
                if reg is not None:
                    total = total + reg * s.lambda_
                total.backward()
                opt_a.step()
        with no_grad():
            reg_t = problem.regularizer()
            reg_val = float(reg_t.item()) if reg_t is not None else 0.0
            cost = problem.expected_cost()
        val_mse = evaluate_mse(problem, data.x_val, data.y_val, s.batch_size)
        log.append(epoch, task_sum / max(nb, 1), reg_val, val_mse, cost)
        if val_mse < log.best_val:
            log.best_val, log.best_epoch = val_mse, epoch
            best_state = problem.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= s.patience:
                break
    if best_state is not None:
        problem.restore(best_state)
    return log


def fit(graph, data: TaskData, epochs: int = 200, lr: float = 1e-3,
        patience: int = 40, batch_size: int = 32, seed: int = 0) -> TrainLog:
    """Plain training of a graph: the search loop with no architecture side."""
    return run_search(GraphProblem(graph), data,
                      SearchSettings(epochs=epochs, warmup=epochs, patience=patience,
                                     batch_size=batch_size, lr_w=lr, seed=seed))
