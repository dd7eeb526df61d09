"""Training loop: CE warm-up with memory-bank updates, NCut grouping, then the
grouped sharpness-aware + knowledge-preservation objective, plus the CE, SAM
and ablation variants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gkp, grouping, gsa, probes
from .config import TrainConfig
from .ltdata import FEW, MANY, MED, SPLITS, DataBundle, LongTailDataset
from .net import MLP, Architecture
from .quality import quality_scores

log = logging.getLogger(__name__)

# variant -> (grouped data term, perturbation, GKP)
_VARIANTS = {
    "CE": (False, None, False),
    "CE+SAM": (False, "sam", False),
    "CE+GKP": (True, None, True),
    "CE+GSA": (True, "residual", False),
    "CE+GKP+GSA": (True, "residual", True),
    "GSA-proj": (True, "projection", True),
}


class NumericalError(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


def alpha(t, cfg: TrainConfig) -> float:
    """Cosine-annealed weight of the sharpness-aware term at epoch ``t``."""
    T = cfg.epochs
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    if T == 0:
        return cfg.alpha_start
    return cfg.alpha_end + 0.5 * (cfg.alpha_start - cfg.alpha_end) * (1 + math.cos(t * math.pi / T))


@dataclass
class EvalReport:
    epoch: int
    overall: float
    split_acc: dict
    per_class_acc: np.ndarray
    per_class_q: np.ndarray | None = None

    @property
    def many(self):
        return self.split_acc[MANY]

    @property
    def med(self):
        return self.split_acc[MED]

    @property
    def few(self):
        return self.split_acc[FEW]


def evaluate_predictions(pred, y, split, num_classes, epoch=0, q=None) -> EvalReport:
    pred = np.asarray(pred)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    correct = pred == y
    per_class = np.array([correct[y == c].mean() if np.any(y == c) else np.nan
                          for c in range(num_classes)])
    tags = np.asarray(split)
    split_acc = {}
    for s in SPLITS:
        mask = np.isin(y, np.flatnonzero(tags == s))
        split_acc[s] = float(correct[mask].mean()) if mask.any() else float("nan")
    return EvalReport(epoch, float(correct.mean()), split_acc, per_class, q)


def evaluate(net: MLP, theta, ds: LongTailDataset, epoch=0, q=None) -> EvalReport:
    return evaluate_predictions(net.predict(theta, ds.X), ds.y, ds.split, ds.num_classes, epoch, q)


@dataclass
class RunResult:
    cfg: TrainConfig
    net: MLP
    theta: np.ndarray
    reports: list
    metrics: list
    metric_fields: list
    quality: list
    bank: grouping.MemoryBank
    partition: grouping.GroupPartition | None
    probes: dict = field(default_factory=dict)

    @property
    def final(self) -> EvalReport:
        return self.reports[-1]


class Trainer:
    def __init__(self, data: DataBundle, cfg: TrainConfig):
        self.data = data
        self.cfg = cfg
        train = data.train
        self.net = MLP(Architecture(train.X.shape[1], tuple(cfg.hidden), train.num_classes))
        self.grouped, self.perturb, self.use_gkp = _VARIANTS[cfg.variant]
        if self.grouped and cfg.groups > train.num_classes:
            raise ValueError(f"groups={cfg.groups} exceeds class count {train.num_classes}")
        self.theta = self.net.init_params([cfg.seed, 0])
        self.velocity = np.zeros(self.net.d)
        self.shuffle_rng = np.random.default_rng([cfg.seed, 1])
        self.bank = grouping.MemoryBank(train.num_classes, self.net.n_enc)
        self.partition = None
        self.step_count = 0
        steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
        self.total_steps = max(1, steps_per_epoch * cfg.epochs)
        G = cfg.groups if self.grouped else 0
        self.metric_fields = ["step", "epoch", "alpha", "lr", "loss", "gkp"] + [
            f"{k}_g{g}" for g in range(G) for k in ("loss", "gkp", "rho", "resid", "inner")]

    # -- pieces -----------------------------------------------------------
    def learning_rate(self) -> float:
        return self.cfg.lr * 0.5 * (1 + math.cos(math.pi * self.step_count / self.total_steps))

    def quality(self) -> np.ndarray:
        h = self.data.holdout
        return quality_scores(self.net.features(self.theta, h.X), h.y, h.num_classes,
                              self.cfg.beta)

    def regroup(self, epoch: int):
        cfg, train = self.cfg, self.data.train
        if cfg.groups == 1:
            assignment = np.zeros(train.num_classes, dtype=np.int64)
        else:
            W = grouping.build_affinity(self.bank)
            assignment = grouping.ncut_partition(W, cfg.groups, seed=cfg.seed)
        part = grouping.group_optima(self.bank, assignment, train.class_counts)
        gkp.estimate_group_fishers(self.net, self.theta, part, train.X, train.y)
        self.partition = part
        log.info("epoch %d: groups %s (sizes %s)", epoch, assignment.tolist(),
                 part.n_samples.tolist())

    def in_main_phase(self, epoch: int) -> bool:
        return self.grouped and epoch >= self.cfg.warmup_epochs

    def train_step(self, X, y, epoch: int) -> dict:
        cfg, net, theta = self.cfg, self.net, self.theta
        if len(y) == 0:
            raise ValueError("empty batch")
        row = {"step": self.step_count, "epoch": epoch, "lr": self.learning_rate()}
        if not self.in_main_phase(epoch):
            row["alpha"] = ""
            if self.perturb == "sam":
                _, g = net.loss_and_grad(theta, X, y)
                eps = gsa.plain_sam_perturbation(theta, g, len(self.data.train), cfg.z)
                loss, grad = net.loss_and_grad(theta + eps, X, y)
            else:
                loss, grad = net.loss_and_grad(theta, X, y)
            row["loss"], row["gkp"] = loss, ""
        else:
            loss, grad = self._grouped_gradient(X, y, epoch, row)
        self._check_finite(loss, grad, row)
        grad = grad + cfg.weight_decay * theta
        self.velocity = cfg.momentum * self.velocity + grad
        self.theta = theta - row["lr"] * self.velocity
        self.step_count += 1
        return row

    def _grouped_gradient(self, X, y, epoch, row):
        cfg, net, theta, part = self.cfg, self.net, self.theta, self.partition
        a = alpha(epoch, cfg)
        row["alpha"] = a
        group_of = part.assignment[y]
        present = [g for g in range(part.G) if np.any(group_of == g)]
        # perturbation norm sqrt(d) * rho is capped at max_perturb * |theta|
        max_rho = (cfg.max_perturb * np.linalg.norm(theta) / np.sqrt(len(theta))
                   if cfg.max_perturb > 0 else None)
        global_grad = net.loss_and_grad(theta, X, y)[1] if self.perturb else None
        total = np.zeros_like(theta)
        loss = 0.0
        for g in range(part.G):
            for k in ("loss", "gkp", "rho", "resid", "inner"):
                row[f"{k}_g{g}"] = ""
        for g in present:
            Xg, yg = X[group_of == g], y[group_of == g]
            if self.perturb:
                res = gsa.gsa_loss_and_grad(
                    lambda th: net.loss_and_grad(th, Xg, yg), theta, global_grad,
                    part.n_samples[g], cfg.z, cfg.regularizer, self.perturb, cfg.radius_exponent,
                    max_rho)
                lg, gg = res.data_loss, res.grad
                row[f"rho_g{g}"], row[f"resid_g{g}"], row[f"inner_g{g}"] = (
                    res.rho, res.resid_norm, res.inner)
            else:
                lg, gg = net.loss_and_grad(theta, Xg, yg)
            row[f"loss_g{g}"] = lg
            loss += lg
            total += a * gg
        gkp_total = 0.0
        if self.use_gkp and cfg.lam > 0:
            scale = 1.0 if cfg.gkp_per_group else 1.0 / len(present)
            for g in present:
                pv, pg = gkp.gkp_penalty(theta, part, g, cfg.lam, cfg.size_mode)
                row[f"gkp_g{g}"] = pv
                gkp_total += scale * pv
                total += (1 - a) * scale * pg
        row["loss"], row["gkp"] = loss, gkp_total
        return loss, total

    def _check_finite(self, loss, grad, row):
        if np.isfinite(loss) and np.all(np.isfinite(grad)):
            return
        dump = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}
        dump.update(theta_norm=float(np.linalg.norm(self.theta)),
                    theta_finite=bool(np.all(np.isfinite(self.theta))),
                    grad_nonfinite=int(np.sum(~np.isfinite(grad))))
        raise NumericalError(f"non-finite loss or gradient at step {self.step_count}", dump)

    # -- loop -------------------------------------------------------------
    def run(self) -> RunResult:
        cfg, train = self.cfg, self.data.train
        metrics, qrows = [], []

        def end_of_epoch(epoch):
            q = self.quality()
            if not np.all(np.isfinite(q)):
                raise NumericalError(f"non-finite feature quality after epoch {epoch}", {
                    "epoch": epoch, "step": self.step_count, "q": q.tolist(),
                    "theta_finite": bool(np.all(np.isfinite(self.theta)))})
            grouping.update_bank(self.bank, self.theta[: self.net.n_enc], q, epoch)
            qrows.extend((epoch, c, float(v)) for c, v in enumerate(q))
            reports.append(evaluate(self.net, self.theta, self.data.test, epoch, q))

        reports = []
        end_of_epoch(0)
        for epoch in range(cfg.epochs):
            if self.in_main_phase(epoch) and (
                    self.partition is None
                    or (cfg.regroup_every and (epoch - cfg.warmup_epochs) % cfg.regroup_every == 0)):
                self.regroup(epoch)
            order = self.shuffle_rng.permutation(len(train))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                metrics.append(self.train_step(train.X[idx], train.y[idx], epoch))
            end_of_epoch(epoch + 1)
        result = RunResult(cfg, self.net, self.theta, reports, metrics, self.metric_fields,
                           qrows, self.bank, self.partition)
        result.probes = sharpness_probes(self.net, self.theta, train, cfg.probe_iters, cfg.seed)
        return result


def split_batch(ds: LongTailDataset, split: str):
    classes = [c for c, s in enumerate(ds.split) if s == split]
    return ds.subset(classes)


def sharpness_probes(net, theta, ds: LongTailDataset, iters=100, seed=0) -> dict:
    """Head (Many) and tail (Few) sub-batch lambda_max and Hessian trace."""
    out = {}
    for split, key in ((FEW, "tail"), (MANY, "head")):
        X, y = split_batch(ds, split)
        if len(y) == 0:
            continue
        gf = probes.batch_grad_fn(net, X, y)
        out[f"{key}_lambda_max"] = probes.lambda_max(gf, theta, iters=iters, seed=seed)
        out[f"{key}_trace"] = probes.hessian_trace(gf, theta, probes_n=20, seed=seed)
    return out


def run(data: DataBundle, cfg: TrainConfig) -> RunResult:
    return Trainer(data, cfg).run()
