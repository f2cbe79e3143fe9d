"""Training loop: Adam with cosine-decayed learning rate, input-noise
augmentation, teacher-forced temporal smoothness, sequence-level validation
split, and early stopping. Deterministic for a fixed seed."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..cage import CageGrid
from ..sensor import MotionSequence, filter_chain
from . import autodiff as ad
from .autodiff import Tensor
from .direct import DirectRegressor, forward_direct
from .model import DeformerModel, ModelError, cage_scale, deformer_loss, forward_batch


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 1e-3
    lambda_smooth: float = 0.1
    noise_std: float = 0.02
    early_stop_patience: int = 10
    batch: int = 16
    val_fraction: float = 0.1
    seed: int = 0
    cutoff_hz: float = 10.0
    restore_best: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.lr0 <= 0 or self.batch < 1:
            raise ModelError("epochs, lr0 and batch must be positive")
        if self.lambda_smooth < 0 or self.noise_std < 0:
            raise ModelError("lambda_smooth and noise_std must be >= 0")


def cosine_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class PreparedSequence:
    """Filtered inputs and scaled targets for one motion sequence."""

    inputs: np.ndarray       # [T,H,W] filtered normalized sensor grids
    targets: np.ndarray      # [T,M,3] scaled labels (cage) or gt (direct)
    t_norms: np.ndarray      # [T]


def prepare_sequences(sequences: list[MotionSequence], scale: float,
                      use_labels: bool = True,
                      cutoff_hz: float = 10.0) -> list[PreparedSequence]:
    out = []
    for seq in sequences:
        if use_labels and seq.labels is None:
            raise ModelError(
                f"sequence {seq.geometry_id}/{seq.mode} has no cage labels; "
                "run label extraction first")
        filtered = np.stack([f.grid for f in
                             filter_chain(seq.frames, cutoff_hz, seq.sample_hz)])
        raw = seq.labels if use_labels else seq.gt
        targets = (np.asarray(raw, dtype=np.float32) / scale).astype(np.float32)
        t_norms = np.array([s.phase for s in seq.states], dtype=np.float64)
        out.append(PreparedSequence(inputs=filtered.astype(np.float32),
                                    targets=targets, t_norms=t_norms))
    return out


@dataclass
class History:
    epochs: list = field(default_factory=list)   # (epoch, train, val, lr)
    stopped_early: bool = False
    best_val: float = float("inf")
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for row in self.epochs:
                w.writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.8g}", f"{row[3]:.8g}"])


def _tail_split(p: PreparedSequence, val_fraction: float):
    cut = max(1, int(round((1.0 - val_fraction) * len(p.inputs))))
    cut = min(cut, len(p.inputs) - 1)
    return (PreparedSequence(p.inputs[:cut], p.targets[:cut], p.t_norms[:cut]),
            PreparedSequence(p.inputs[cut:], p.targets[cut:], p.t_norms[cut:]))


def _split(prepared: list[PreparedSequence], val_fraction: float,
           rng: np.random.Generator):
    """Sequence-level 90/10 split; with few sequences hold out each
    sequence's trailing frames instead so every actuation pattern stays in
    training."""
    if len(prepared) >= 4:
        n_val = max(1, int(round(val_fraction * len(prepared))))
        idx = rng.permutation(len(prepared))
        val_ids = set(idx[:n_val].tolist())
        train = [p for i, p in enumerate(prepared) if i not in val_ids]
        val = [p for i, p in enumerate(prepared) if i in val_ids]
        return train, val
    pairs = [_tail_split(p, val_fraction) for p in prepared]
    return [a for a, _ in pairs], [b for _, b in pairs]


def _chunks(n: int, size: int):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _run_epoch(fwd, prepared, cfg: TrainConfig, weights, lam: float,
               optimizer=None, lr: float = 0.0, noise_rng=None):
    """One pass over the sequences; trains when an optimizer is given."""
    total = 0.0
    count = 0
    for p in prepared:
        t = len(p.inputs)
        prev_tail = None                      # last prediction of previous chunk
        for lo, hi in _chunks(t, cfg.batch):
            b = hi - lo
            inputs = p.inputs[lo:hi]
            if noise_rng is not None and cfg.noise_std > 0:
                inputs = inputs + noise_rng.normal(
                    0.0, cfg.noise_std, size=inputs.shape).astype(np.float32)
            pred = fwd(inputs, p.t_norms[lo:hi])              # [b*M, 3]
            m = pred.shape[0] // b
            gt = p.targets[lo:hi].reshape(b * m, 3)
            w = np.tile(weights, (b, 1)) if weights is not None else None
            loss = deformer_loss(pred, gt, None, 0.0, node_weights=w)
            if lam > 0.0 and b > 1:
                rows_t = np.arange(m, b * m)
                rows_p = np.arange(0, (b - 1) * m)
                ds = ad.sub(ad.gather_rows(pred, rows_t), ad.gather_rows(pred, rows_p))
                loss = ad.add(loss, ad.scale(ad.sum_all(ad.mul(ds, ds)),
                                             lam / float(b * m)))
            if lam > 0.0 and prev_tail is not None:
                head = ad.gather_rows(pred, np.arange(m))
                ds = ad.sub(head, Tensor(prev_tail))
                loss = ad.add(loss, ad.scale(ad.sum_all(ad.mul(ds, ds)),
                                             lam / float(b * m)))
            lval = loss.item()
            if not np.isfinite(lval):
                raise RuntimeError(
                    f"non-finite loss {lval} (batch {lo}:{hi}); "
                    "check inputs and learning rate")
            total += lval * b
            count += b
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step(lr)
            prev_tail = pred.data[(b - 1) * m:].copy()
    return total / max(count, 1)


def train(model, sequences: list[MotionSequence], cfg: TrainConfig, *,
          cage: CageGrid | None = None, scene=None,
          node_weights: np.ndarray | None = None,
          history_path=None) -> History:
    """Fit the model; returns per-epoch history.

    For a DeformerModel pass the cage (targets are the extracted labels); for
    a DirectRegressor pass the scene (targets are per-Gaussian ground truth).
    node_weights restricts the cage regression loss to supported nodes.
    """
    cfg.validate()
    if not sequences:
        raise ModelError("no training sequences")
    rng = np.random.default_rng(cfg.seed)

    if isinstance(model, DirectRegressor):
        from .direct import normalized_points, scene_scale
        if scene is None:
            raise ModelError("direct regressor training needs the scene")
        scale = scene_scale(scene)
        pts = normalized_points(scene)
        prepared = prepare_sequences(sequences, scale, use_labels=False,
                                     cutoff_hz=cfg.cutoff_hz)

        def fwd(inputs, t_norms):
            return forward_direct(model, inputs, t_norms, pts)

        weights = None
    else:
        if cage is None:
            raise ModelError("cage model training needs the cage")
        scale = cage_scale(cage)
        prepared = prepare_sequences(sequences, scale, use_labels=True,
                                     cutoff_hz=cfg.cutoff_hz)

        def fwd(inputs, t_norms):
            return forward_batch(model, inputs, t_norms, cage)

        weights = None
        if node_weights is not None:
            weights = np.asarray(node_weights, dtype=np.float32).reshape(-1, 1)
            if weights.shape[0] != cage.n_nodes:
                raise ModelError("node_weights length must match the cage")

    train_seqs, val_seqs = _split(prepared, cfg.val_fraction, rng)
    optimizer = Adam(model.params())
    history = History()
    best_params = None
    bad_epochs = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
        order = rng.permutation(len(train_seqs))
        train_loss = _run_epoch(
            fwd, [train_seqs[i] for i in order], cfg, weights,
            cfg.lambda_smooth, optimizer=optimizer, lr=lr, noise_rng=rng)
        val_loss = _run_epoch(fwd, val_seqs, cfg, weights, cfg.lambda_smooth)
        history.epochs.append((epoch, train_loss, val_loss, lr))
        if val_loss < history.best_val - 1e-12:
            history.best_val = val_loss
            history.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                history.stopped_early = True
                break
    if cfg.restore_best and best_params is not None:
        for k, p in model.params().items():
            p.data = best_params[k]
    if history_path is not None:
        history.write_csv(history_path)
    return history
