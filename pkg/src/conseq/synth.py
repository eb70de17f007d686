"""Coupled linear-sequence forecasting benchmark.

Each sample is a pair of length-16 sequences over x = 1..16:

    y1(x) = a*x + b
    y2(x) = c*x + d + y1(x)        a, b, c, d ~ U(5, 15)

Two decoders forecast y(2..16) conditioned on [coefficients] at the first
step and y(1) at the second. Decoded alone, y2 is unlearnable beyond the
conditional mean (its slope depends on a, which only y1 reveals), so the
gap between independent and fused decoding is large by construction.

Training is free-running: from the third step each decoder consumes the
embedding of its own previous emission, and gradients flow through the
whole rollout. Inputs and targets are standardized by training-set
statistics; reported MSE is in raw units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .cells import LstmParams, linear, lstm_step, uniform_init
from .decoder import input_combine
from .diffcore import Parameter, Tensor
from .errors import ConfigError, TrainingDivergedError
from .fusion import FusionParams, fuse_pair

X_GRID = np.arange(1, 17, dtype=np.float64)
N_STEPS = 16  # conditioning step + 15 forecast emissions
N_FORECAST = 15

DATASET_HEADER = "# conseq-synth v1"


@dataclass
class PairedSequences:
    a: float
    b: float
    c: float
    d: float
    y1: np.ndarray
    y2: np.ndarray


def make_pair(a: float, b: float, c: float, d: float) -> PairedSequences:
    y1 = a * X_GRID + b
    y2 = c * X_GRID + d + y1
    return PairedSequences(a, b, c, d, y1, y2)


def sample_pair(rng: np.random.Generator) -> PairedSequences:
    a, b, c, d = rng.uniform(5.0, 15.0, size=4)
    return make_pair(a, b, c, d)


@dataclass
class SynthSplit:
    """Column arrays for one dataset split."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    y1: np.ndarray  # [n, 16]
    y2: np.ndarray  # [n, 16]

    def __len__(self):
        return self.a.shape[0]

    @classmethod
    def from_pairs(cls, pairs: list[PairedSequences]) -> "SynthSplit":
        return cls(
            a=np.array([p.a for p in pairs]),
            b=np.array([p.b for p in pairs]),
            c=np.array([p.c for p in pairs]),
            d=np.array([p.d for p in pairs]),
            y1=np.stack([p.y1 for p in pairs]) if pairs else np.zeros((0, 16)),
            y2=np.stack([p.y2 for p in pairs]) if pairs else np.zeros((0, 16)),
        )


def generate_split(rng: np.random.Generator, n: int) -> SynthSplit:
    coeffs = rng.uniform(5.0, 15.0, size=(n, 4))
    a, b, c, d = coeffs.T
    y1 = a[:, None] * X_GRID + b[:, None]
    y2 = c[:, None] * X_GRID + d[:, None] + y1
    return SynthSplit(a, b, c, d, y1, y2)


@dataclass
class SynthConfig:
    n_train: int = 8000
    n_val: int = 1000
    n_test: int = 1000
    hidden: int = 256
    embed: int = 32
    lr: float = 1e-2
    momentum: float = 0.98
    batch_size: int = 40
    epochs: int = 12
    seed: int = 0
    k: int = 1
    fusion_mode: str = "full"
    min_lr: float = 1e-6
    plateau_factor: float = 0.5
    scale: str = "desk"

    @classmethod
    def desk(cls, **overrides) -> "SynthConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "SynthConfig":
        """The full-size configuration (70K/5K/5K, hidden 2048, lr 1e-6).

        Kept for completeness; the test suite never trains at this scale.
        """
        base = dict(
            n_train=70000, n_val=5000, n_test=5000, hidden=2048, embed=32,
            lr=1e-6, epochs=50, scale="full",
        )
        base.update(overrides)
        return cls(**base)


def build_dataset(config: SynthConfig) -> dict[str, SynthSplit]:
    """Seeded disjoint train/val/test splits."""
    rng = np.random.default_rng(config.seed)
    return {
        "train": generate_split(rng, config.n_train),
        "val": generate_split(rng, config.n_val),
        "test": generate_split(rng, config.n_test),
    }


def save_split(path, split: SynthSplit):
    """Versioned CSV: one record per pair (a, b, c, d, y1[16], y2[16])."""
    with open(path, "w", newline="") as fh:
        fh.write(DATASET_HEADER + "\n")
        writer = csv.writer(fh)
        cols = ["a", "b", "c", "d"] + [f"y1_{x}" for x in range(1, 17)] + [f"y2_{x}" for x in range(1, 17)]
        writer.writerow(cols)
        for i in range(len(split)):
            row = [split.a[i], split.b[i], split.c[i], split.d[i], *split.y1[i], *split.y2[i]]
            writer.writerow([f"{v:.17g}" for v in row])


def load_split(path) -> SynthSplit:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if header != DATASET_HEADER:
            raise ConfigError(f"unrecognized dataset header {header!r} in {path}")
        reader = csv.reader(fh)
        next(reader)  # column names
        rows = np.array([[float(v) for v in row] for row in reader])
    if rows.size == 0:
        rows = rows.reshape(0, 36)
    return SynthSplit(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], rows[:, 4:20], rows[:, 20:36])


@dataclass
class Normalization:
    """Training-set standardization constants, stored with the model."""

    coeff_mean: float
    coeff_std: float
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, train: SynthSplit) -> "Normalization":
        coeffs = np.concatenate([train.a, train.b, train.c, train.d])
        ys = np.concatenate([train.y1.ravel(), train.y2.ravel()])
        return cls(float(coeffs.mean()), float(coeffs.std()), float(ys.mean()), float(ys.std()))

    def norm_coeff(self, v: np.ndarray) -> np.ndarray:
        return (v - self.coeff_mean) / self.coeff_std

    def norm_y(self, v: np.ndarray) -> np.ndarray:
        return (v - self.y_mean) / self.y_std

    def denorm_y(self, v: np.ndarray) -> np.ndarray:
        return v * self.y_std + self.y_mean


@dataclass
class SynthLane:
    """One decoder: conditioning embed, value embed, LSTM, scalar head."""

    first_w: Parameter
    first_b: Parameter
    value_w: Parameter
    value_b: Parameter
    lstm: LstmParams
    out_w: Parameter
    out_b: Parameter

    @classmethod
    def init(cls, rng: np.random.Generator, embed: int, hidden: int, d_in: int, name: str) -> "SynthLane":
        return cls(
            first_w=Parameter(uniform_init(rng, (embed, 2), 2), f"{name}.first_w"),
            first_b=Parameter(np.zeros(embed), f"{name}.first_b"),
            value_w=Parameter(uniform_init(rng, (embed, 1), 1), f"{name}.value_w"),
            value_b=Parameter(np.zeros(embed), f"{name}.value_b"),
            lstm=LstmParams.init(rng, d_in, hidden, f"{name}.lstm"),
            out_w=Parameter(uniform_init(rng, (1, hidden), hidden), f"{name}.out_w"),
            out_b=Parameter(np.zeros(1), f"{name}.out_b"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.first_w, self.first_b, self.value_w, self.value_b, self.out_w, self.out_b] + self.lstm.parameters()


class SynthModel:
    """Two coupled forecasting decoders (distinct parameters per lane).

    The lanes run a sample-batched two-lane loop; in consistent mode they
    are coupled each step through the fully connected two-node fusion
    specialization. This mirrors the row-batched orchestration in
    decoder.decode for the case of per-decoder parameters.
    """

    def __init__(self, config: SynthConfig, mode: str, norm: Normalization, rng: np.random.Generator):
        if mode not in ("independent", "baseline2x", "consistent"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        self.norm = norm
        d_in = config.embed if mode == "independent" else 2 * config.embed
        self.lanes = [
            SynthLane.init(rng, config.embed, config.hidden, d_in, f"lane{i}") for i in range(2)
        ]
        self.fusion = FusionParams.init(rng, config.embed, "fusion") if mode == "consistent" else None

    def parameters(self) -> list[Parameter]:
        """Trainable set: the two-node specialization never exercises the
        attention net (singleton softmax is constant 1), so only the kernel
        and GRU join the optimizer in consistent mode."""
        params = [p for lane in self.lanes for p in lane.parameters()]
        if self.fusion is not None:
            params += self.fusion.active_parameters(self.config.fusion_mode, pairwise=True)
        return params

    def checkpoint_parameters(self) -> list[Parameter]:
        params = [p for lane in self.lanes for p in lane.parameters()]
        if self.fusion is not None:
            params += self.fusion.parameters()
        return params

    # ------------------------------------------------------------------
    def rollout(self, batch: dict[str, np.ndarray]) -> tuple[Tensor, Tensor]:
        """Free-running forecast; returns standardized predictions [B, 15] per lane.

        Step 0 consumes the embedded coefficient pair, step 1 the given
        y(1); later steps re-embed the lane's own previous emission. The
        second input slot is zero for the first two steps, then the fused
        (or duplicated) context.
        """
        cond = [
            Tensor(np.stack([self.norm.norm_coeff(batch["a"]), self.norm.norm_coeff(batch["b"])], axis=1)),
            Tensor(np.stack([self.norm.norm_coeff(batch["c"]), self.norm.norm_coeff(batch["d"])], axis=1)),
        ]
        first_val = [
            Tensor(self.norm.norm_y(batch["y1"][:, :1])),
            Tensor(self.norm.norm_y(batch["y2"][:, :1])),
        ]
        n = batch["a"].shape[0]
        h = [Tensor(np.zeros((n, self.config.hidden))) for _ in range(2)]
        c = [Tensor(np.zeros((n, self.config.hidden))) for _ in range(2)]
        prev_emit: list[Tensor | None] = [None, None]
        outputs: list[list[Tensor]] = [[], []]
        for t in range(N_STEPS):
            own = []
            for v, lane in enumerate(self.lanes):
                if t == 0:
                    own_v = linear(cond[v], lane.first_w, lane.first_b)
                elif t == 1:
                    own_v = linear(first_val[v], lane.value_w, lane.value_b)
                else:
                    own_v = linear(prev_emit[v], lane.value_w, lane.value_b)
                own.append(own_v)
            if self.mode == "independent":
                seconds = [None, None]
            elif t < 2:
                zeros = Tensor(np.zeros((n, self.config.embed)))
                seconds = [zeros, zeros]
            elif self.mode == "baseline2x":
                seconds = own
            else:
                fused0, fused1 = fuse_pair(own[0], own[1], self.fusion, self.config.k, self.config.fusion_mode)
                seconds = [fused0, fused1]
            for v, lane in enumerate(self.lanes):
                if self.mode == "independent":
                    x = input_combine(own[v], None, "independent")
                else:
                    x = dc.concat(seconds[v], own[v])
                h[v], c[v] = lstm_step(x, h[v], c[v], lane.lstm)
                if t >= 1:
                    emit = linear(h[v], lane.out_w, lane.out_b)
                    prev_emit[v] = emit
                    outputs[v].append(emit)
        pred = [dc.concat(*outs) for outs in outputs]
        return pred[0], pred[1]

    def predict(self, split: SynthSplit, batch_size: int = 200) -> tuple[np.ndarray, np.ndarray]:
        """Raw-unit forecasts for every pair; returns ([n, 15], [n, 15])."""
        preds1, preds2 = [], []
        with dc.no_grad():
            for start in range(0, len(split), batch_size):
                sl = slice(start, start + batch_size)
                batch = _batch_view(split, sl)
                p1, p2 = self.rollout(batch)
                preds1.append(self.norm.denorm_y(p1.data))
                preds2.append(self.norm.denorm_y(p2.data))
        return np.concatenate(preds1), np.concatenate(preds2)


def _batch_view(split: SynthSplit, sl) -> dict[str, np.ndarray]:
    return {
        "a": split.a[sl],
        "b": split.b[sl],
        "c": split.c[sl],
        "d": split.d[sl],
        "y1": split.y1[sl],
        "y2": split.y2[sl],
    }


def batch_loss(model: SynthModel, batch: dict[str, np.ndarray]) -> Tensor:
    """Mean of the two lanes' standardized forecast MSE."""
    p1, p2 = model.rollout(batch)
    t1 = model.norm.norm_y(batch["y1"][:, 1:])
    t2 = model.norm.norm_y(batch["y2"][:, 1:])
    return dc.scale(dc.add(dc.mse_loss(p1, t1), dc.mse_loss(p2, t2)), 0.5)


def train_synth(dataset: dict[str, SynthSplit], config: SynthConfig, mode: str,
                progress=None, resume_state: dict | None = None):
    """Train one model variant; returns (model, trace).

    SGD with momentum on the averaged batch loss. The learning rate halves
    after two consecutive epochs without validation improvement (momentum
    0.98 makes single-epoch wobble routine), with a floor at min_lr.
    Trace rows: (epoch, train_loss, val_loss, lr), standardized units.
    """
    train, val = dataset["train"], dataset["val"]
    norm = Normalization.fit(train)
    init_rng = np.random.default_rng(config.seed + 1)
    model = SynthModel(config, mode, norm, init_rng)
    order_rng = np.random.default_rng(config.seed + 2)
    params = model.parameters()
    lr = config.lr
    best_val = np.inf
    stall = 0
    trace = []
    start_epoch = 0
    if resume_state is not None:
        _apply_state(model, resume_state)
        order_rng.bit_generator.state = resume_state["rng_state"]
        start_epoch = resume_state["epoch"]
        lr = resume_state["lr"]
        best_val = resume_state["best_val"]
        stall = resume_state.get("stall", 0)
        trace = list(resume_state.get("trace", []))
    n = len(train)
    for epoch in range(start_epoch, config.epochs):
        order = order_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = _batch_view(train, idx)
            loss = batch_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value) or abs(value) > 1e30:
                raise TrainingDivergedError(epoch, f"batch loss {value}")
            dc.zero_grads(params)
            dc.backward(loss)
            dc.sgd_step(params, lr, config.momentum)
            dc.tape().clear()
            total += value
            batches += 1
        val_loss = _eval_std_loss(model, val)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, f"validation loss {val_loss}")
        trace.append((epoch, total / max(batches, 1), val_loss, lr))
        if progress is not None:
            progress(epoch, total / max(batches, 1), val_loss, lr)
        if val_loss < best_val * 0.999:
            best_val = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= 2:
                lr = max(lr * config.plateau_factor, config.min_lr)
                stall = 0
        model._train_state = {"lr": lr, "best_val": best_val, "stall": stall,
                              "rng_state": order_rng.bit_generator.state,
                              "epoch": epoch + 1, "trace": trace}
    if not hasattr(model, "_train_state"):
        model._train_state = {"lr": lr, "best_val": best_val, "stall": stall,
                              "rng_state": order_rng.bit_generator.state,
                              "epoch": start_epoch, "trace": trace}
    return model, trace


def _apply_state(model: SynthModel, state: dict):
    arrays = state["params"]
    momenta = state["momenta"]
    for p in model.parameters():
        p.data = arrays[p.name].copy()
        p.momentum = momenta[p.name].copy()


def _eval_std_loss(model: SynthModel, split: SynthSplit, batch_size: int = 200) -> float:
    total, count = 0.0, 0
    with dc.no_grad():
        for start in range(0, len(split), batch_size):
            sl = slice(start, start + batch_size)
            batch = _batch_view(split, sl)
            loss = batch_loss(model, batch)
            b = batch["a"].shape[0]
            total += loss.item() * b
            count += b
    return total / max(count, 1)


def eval_mse(model: SynthModel, split: SynthSplit) -> tuple[float, float]:
    """Raw-unit global MSE over the 15 forecast values, per sequence."""
    p1, p2 = model.predict(split)
    mse1 = float(np.mean((p1 - split.y1[:, 1:]) ** 2))
    mse2 = float(np.mean((p2 - split.y2[:, 1:]) ** 2))
    return mse1, mse2


def mse_from_predictions(pred1: np.ndarray, pred2: np.ndarray, split: SynthSplit) -> tuple[float, float]:
    """Oracle-friendly scorer for externally produced forecasts."""
    mse1 = float(np.mean((pred1 - split.y1[:, 1:]) ** 2))
    mse2 = float(np.mean((pred2 - split.y2[:, 1:]) ** 2))
    return mse1, mse2


def forecast_pair(model: SynthModel, pair: PairedSequences) -> tuple[np.ndarray, np.ndarray]:
    """Raw-unit forecasts of y1(2..16), y2(2..16) for one injected pair."""
    split = SynthSplit.from_pairs([pair])
    p1, p2 = model.predict(split)
    return p1[0], p2[0]
