"""The dual-model training algorithm: fixed-ratio mixup of source and target
samples, confidence-gated mutual teaching, self-penalization of low-confidence
predictions, and consistency regularization on the half-half mixup domain.

Loss conventions
----------------
All four objectives are non-negative losses to be minimized:

* ``loss_fm``  - cross-entropy of the model's prediction on a mixed sample
  against the convex label mixture.
* ``loss_bim`` - cross-entropy of the student on target samples against the
  teacher's argmax, only where the teacher's confidence strictly exceeds the
  adaptive threshold; teacher predictions are constants.
* ``loss_sp``  - negative log of (1 - p) at the model's own top-1 class,
  only where its confidence is strictly below the threshold. The penalized
  probability is computed with the model's learnable temperature; the
  gate and the argmax use the plain T = 1 confidences so that the matching
  and penalization index sets partition cleanly around the threshold.
* ``loss_cr``  - mean squared L2 distance between the two models'
  predictions on the half-half mixup batch.

Logs inside the losses are clamped at 1e-12.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import MetricsRow, TrainConfig
from .data import Dataset, one_hot, paired_minibatches
from .models import (ClassifierModel, DualState, clone_model, ensemble_predict,
                     forward, forward_logits, predict_labels, predict_probs)
from .numerics import (Array, Tensor, backward, lr_schedule, sgd_step,
                       softmax_t)

LOG_CLAMP = 1e-12

_RATIO_STREAM = 3  # rng namespace for the per-iteration ratio draws


class NonFiniteLossError(RuntimeError):
    """A loss term left the finite range; names the term and iteration.

    ``rows`` carries the metrics of the epochs completed before the abort so
    callers can preserve partial results.
    """

    def __init__(self, term: str, epoch: int, iteration: int, value: float):
        super().__init__(
            f"non-finite loss {term}={value!r} at epoch {epoch} iteration {iteration}")
        self.term = term
        self.epoch = epoch
        self.iteration = iteration
        self.rows: list[MetricsRow] = []


@dataclass
class MixupBatch:
    """Convex blend of a source and a target batch (features and labels)."""

    x_mix: Array          # (B, d)
    y_mix: Array          # (B, C), rows on the probability simplex
    lambda_used: float


def _check_simplex(rows: Array, what: str) -> None:
    if rows.ndim != 2:
        raise ValueError(f"{what} must be 2-D, got shape {rows.shape}")
    if (rows < 0).any():
        raise ValueError(f"{what} rows must be non-negative")
    if rows.shape[0] and not np.allclose(rows.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError(f"{what} rows must sum to 1")


def mixup(xs: Array, ys_onehot: Array, xt: Array, yt_onehot: Array,
          lam: float) -> MixupBatch:
    """Per-sample convex combination ``lam * source + (1 - lam) * target``.

    ``lam`` of exactly 0 or 1 returns bit-exact copies of the corresponding
    side.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup ratio must be in [0, 1], got {lam}")
    xs = np.asarray(xs, dtype=np.float64)
    xt = np.asarray(xt, dtype=np.float64)
    ys_onehot = np.asarray(ys_onehot, dtype=np.float64)
    yt_onehot = np.asarray(yt_onehot, dtype=np.float64)
    if xs.shape != xt.shape:
        raise ValueError(f"feature shapes differ: {xs.shape} vs {xt.shape}")
    if ys_onehot.shape != yt_onehot.shape or ys_onehot.shape[0] != xs.shape[0]:
        raise ValueError("label shapes must match and align with features")
    _check_simplex(ys_onehot, "source labels")
    _check_simplex(yt_onehot, "target labels")
    if lam == 1.0:
        return MixupBatch(xs.copy(), ys_onehot.copy(), 1.0)
    if lam == 0.0:
        return MixupBatch(xt.copy(), yt_onehot.copy(), 0.0)
    return MixupBatch(lam * xs + (1.0 - lam) * xt,
                      lam * ys_onehot + (1.0 - lam) * yt_onehot, lam)


def pseudo_labels(model: ClassifierModel, xt: Array) -> tuple[Array, Array]:
    """Argmax labels and top-1 confidences of the model's T = 1 predictions."""
    probs = predict_probs(model, xt)
    return np.argmax(probs, axis=1), probs.max(axis=1)


@dataclass
class ThresholdStats:
    """Adaptive confidence threshold of one mini-batch: mean - 2 * std."""

    tau: float
    batch_mean: float
    batch_std: float
    num_above: int     # confidences strictly above tau
    num_below: int     # the rest (confidence <= tau)


def adaptive_threshold(confidences) -> ThresholdStats:
    """Threshold ``mean - 2 * population std``, clamped to [0, 1]."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if conf.size == 0:
        raise ValueError("adaptive_threshold needs a non-empty confidence batch")
    if not np.isfinite(conf).all() or (conf < 0).any() or (conf > 1).any():
        raise ValueError("confidences must lie in [0, 1]")
    if conf.min() == conf.max():
        # constant batch: the statistics are exact; summing would otherwise
        # put tau an ulp below the value and break the strict gate counts
        mean, std = float(conf[0]), 0.0
    else:
        mean = float(conf.mean())
        std = float(conf.std())  # population (divide by B)
    tau = min(1.0, max(0.0, mean - 2.0 * std))
    num_above = int((conf > tau).sum())
    return ThresholdStats(tau, mean, std, num_above, conf.size - num_above)


def loss_fm(model: ClassifierModel, batch: MixupBatch) -> Tensor:
    """Cross-entropy against the mixed label, averaged over the batch."""
    _check_simplex(batch.y_mix, "y_mix")
    b = batch.x_mix.shape[0]
    _, probs = forward(model, batch.x_mix)
    logp = probs.clamp_min(LOG_CLAMP).log()
    return (batch.y_mix * logp).sum() * (-1.0 / b)


def loss_bim(teacher_probs: Array, student: ClassifierModel, xt: Array,
             tau: float) -> Tensor:
    """Teach the student the teacher's confident argmax labels.

    Samples whose teacher confidence is not strictly above ``tau``
    contribute zero. Teacher probabilities are plain arrays, so no gradient
    reaches the teacher.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    b, c = teacher_probs.shape
    conf = teacher_probs.max(axis=1)
    labels = np.argmax(teacher_probs, axis=1)
    mask = np.zeros((b, c))
    selected = conf > tau
    mask[np.arange(b)[selected], labels[selected]] = 1.0
    _, q = forward(student, xt)
    logq = q.clamp_min(LOG_CLAMP).log()
    return (mask * logq).sum() * (-1.0 / b)


def loss_sp(model: ClassifierModel, xt: Array, tau: float) -> Tensor:
    """Push the probability of low-confidence top-1 predictions toward zero.

    The gate compares the model's T = 1 confidence strictly against ``tau``;
    the penalized probability itself uses the learnable temperature, so its
    gradient also trains the temperature parameter.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    xt = np.asarray(xt, dtype=np.float64)
    b = xt.shape[0]
    _, logits = forward_logits(model, xt)
    plain = softmax_t(Tensor(logits.data), 1.0).data  # gate view, no gradient
    conf = plain.max(axis=1)
    labels = np.argmax(plain, axis=1)
    mask = np.zeros_like(plain)
    selected = conf < tau
    mask[np.arange(b)[selected], labels[selected]] = 1.0

    temperature = model.params["log_temperature"].exp()
    tempered = softmax_t(logits, temperature)
    log_rest = (1.0 - tempered).clamp_min(LOG_CLAMP).log()
    return (mask * log_rest).sum() * (-1.0 / b)


def loss_cr(sdm: ClassifierModel, tdm: ClassifierModel, xs: Array, ys: Array,
            xt: Array, yt_pseudo: Array) -> Tensor:
    """Squared-L2 disagreement of the two models on the half-half mixup.

    The mixed labels are built for interface completeness but the objective
    only consumes the mixed features; gradients flow into both models.
    """
    c = sdm.num_classes
    batch = mixup(xs, one_hot(ys, c), xt, one_hot(yt_pseudo, c), 0.5)
    b = batch.x_mix.shape[0]
    _, p = forward(sdm, batch.x_mix)
    _, q = forward(tdm, batch.x_mix)
    d = p - q
    return (d * d).sum() * (1.0 / b)


def ratio_rule_sample(rule: str, alpha: float, lambda_fixed_pair: tuple[float, float],
                      rng: np.random.Generator) -> tuple[float, float]:
    """Draw the (source-dominant, target-dominant) mixup ratios for one step.

    fixed:  the configured pair, verbatim.
    random: two independent Beta(alpha, alpha) draws, one per model.
    range:  lam ~ Beta(alpha, alpha), lam' = max(lam, 1 - lam),
            returning (lam', 1 - lam').
    """
    if rule == "fixed":
        return lambda_fixed_pair
    if rule not in ("random", "range"):
        raise ValueError(f"unknown ratio rule {rule!r}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if rule == "random":
        return float(rng.beta(alpha, alpha)), float(rng.beta(alpha, alpha))
    lam = float(rng.beta(alpha, alpha))
    lam_prime = max(lam, 1.0 - lam)
    return lam_prime, 1.0 - lam_prime


@dataclass
class LossBundle:
    """One model's loss components for a single iteration."""

    fm: float = 0.0
    bim: float = 0.0
    sp: float = 0.0
    cr: float = 0.0

    @property
    def total(self) -> float:
        return self.fm + self.bim + self.sp + self.cr


def _loss_value(term: Tensor | None) -> float:
    if term is None:
        return 0.0
    return term.item() + 0.0  # normalizes -0.0 from empty gated sums


def _check_finite(name: str, value: float, epoch: int, iteration: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(name, epoch, iteration, value)


def _accuracy(pred: Array, truth: Array) -> float:
    return float(np.mean(pred == truth)) if truth.size else 0.0


def _evaluate(sdm: ClassifierModel, tdm: ClassifierModel, source: Dataset,
              target: Dataset) -> dict[str, float]:
    ys = source.eval_labels()
    yt = target.eval_labels()
    return {
        "acc_src_sd": _accuracy(predict_labels(sdm, source.features), ys),
        "acc_src_td": _accuracy(predict_labels(tdm, source.features), ys),
        "acc_tgt_sd": _accuracy(predict_labels(sdm, target.features), yt),
        "acc_tgt_td": _accuracy(predict_labels(tdm, target.features), yt),
        "acc_tgt_ens": _accuracy(ensemble_predict(sdm, tdm, target.features), yt),
    }


def train_fixbi(cfg: TrainConfig, source: Dataset, target: Dataset,
                init_weights: ClassifierModel) -> tuple[DualState, list[MetricsRow]]:
    """Run the full dual-model procedure from pretrained baseline weights.

    Both models start as copies of ``init_weights``. Every iteration builds
    each model's mixup batch from its own current pseudo-labels (or the
    frozen baseline's, per ``cfg.pseudo_label_source``) and updates it with
    the mixup loss plus self-penalization. After ``cfg.warmup_epochs``,
    bidirectional matching and consistency regularization join in. All
    losses of one iteration are evaluated on the pre-update weights, then
    each model takes a single SGD step.

    Returns the final dual state and one metrics row per epoch.
    """
    frozen = clone_model(init_weights) if cfg.pseudo_label_source == "frozen-baseline" else None
    state = DualState(sdm=clone_model(init_weights), tdm=clone_model(init_weights))
    rows: list[MetricsRow] = []
    try:
        _run_epochs(cfg, source, target, state, rows, frozen)
    except NonFiniteLossError as exc:
        exc.rows = rows
        raise
    return state, rows


def _run_epochs(cfg: TrainConfig, source: Dataset, target: Dataset,
                state: DualState, rows: list[MetricsRow],
                frozen: ClassifierModel | None) -> None:
    sdm, tdm = state.sdm, state.tdm
    n_batches = max(source.n, target.n) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    ratio_rng = np.random.default_rng([cfg.seed, _RATIO_STREAM])
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        matching_open = epoch > cfg.warmup_epochs
        sums_sd = LossBundle()
        sums_td = LossBundle()
        tau_sum = [0.0, 0.0]
        n_above_sum = [0, 0]

        for it, batch in enumerate(
                paired_minibatches(source, target, cfg.batch_size, epoch, cfg.seed), start=1):
            lr = lr_schedule(cfg.lr0, step / total_steps if total_steps else 0.0)
            lam_sd, lam_td = ratio_rule_sample(
                cfg.ratio_rule, cfg.alpha, (cfg.lambda_sd, cfg.lambda_td), ratio_rng)

            # per-model view of the target batch, all from pre-update weights
            probs_sd = predict_probs(sdm, batch.xt)
            probs_td = predict_probs(tdm, batch.xt)
            if not np.isfinite(probs_sd).all():
                raise NonFiniteLossError("target_probs_sd", epoch, it, float("nan"))
            if not np.isfinite(probs_td).all():
                raise NonFiniteLossError("target_probs_td", epoch, it, float("nan"))
            stats_sd = adaptive_threshold(probs_sd.max(axis=1))
            stats_td = adaptive_threshold(probs_td.max(axis=1))
            if frozen is not None:
                pl_sd = pl_td = pseudo_labels(frozen, batch.xt)[0]
            else:
                pl_sd = np.argmax(probs_sd, axis=1)
                pl_td = np.argmax(probs_td, axis=1)

            ys_hot = one_hot(batch.ys, sdm.num_classes)

            def model_terms(model, pl, lam, stats):
                fm = sp = None
                if cfg.loss_fm:
                    mixed = mixup(batch.xs, ys_hot, batch.xt,
                                  one_hot(pl, model.num_classes), lam)
                    fm = loss_fm(model, mixed)
                if cfg.loss_sp:
                    sp = loss_sp(model, batch.xt, stats.tau)
                return fm, sp

            fm_sd, sp_sd = model_terms(sdm, pl_sd, lam_sd, stats_sd)
            fm_td, sp_td = model_terms(tdm, pl_td, lam_td, stats_td)

            bim_sd = bim_td = cr = None
            if matching_open:
                if cfg.loss_bim:
                    bim_sd = loss_bim(probs_td, sdm, batch.xt, stats_td.tau)
                    bim_td = loss_bim(probs_sd, tdm, batch.xt, stats_sd.tau)
                if cfg.loss_cr:
                    cr = loss_cr(sdm, tdm, batch.xs, batch.ys, batch.xt, pl_sd)

            for name, term in (("fm_sd", fm_sd), ("fm_td", fm_td),
                               ("sp_sd", sp_sd), ("sp_td", sp_td),
                               ("bim_sd", bim_sd), ("bim_td", bim_td), ("cr", cr)):
                if term is not None:
                    _check_finite(name, term.item(), epoch, it)

            def total_of(terms):
                live = [t for t in terms if t is not None]
                if not live:
                    return None
                acc = live[0]
                for t in live[1:]:
                    acc = acc + t
                return acc

            total_sd = total_of((fm_sd, sp_sd, bim_sd, cr))
            total_td = total_of((fm_td, sp_td, bim_td, cr))
            grads_sd = (backward(total_sd, sdm.params) if total_sd is not None
                        else {n: np.zeros_like(t.data) for n, t in sdm.params.items()})
            grads_td = (backward(total_td, tdm.params) if total_td is not None
                        else {n: np.zeros_like(t.data) for n, t in tdm.params.items()})
            sgd_step(sdm.params, grads_sd, lr, cfg.momentum, cfg.weight_decay)
            sgd_step(tdm.params, grads_td, lr, cfg.momentum, cfg.weight_decay)
            step += 1

            sums_sd.fm += _loss_value(fm_sd)
            sums_sd.sp += _loss_value(sp_sd)
            sums_sd.bim += _loss_value(bim_sd)
            sums_td.fm += _loss_value(fm_td)
            sums_td.sp += _loss_value(sp_td)
            sums_td.bim += _loss_value(bim_td)
            sums_sd.cr += _loss_value(cr)
            tau_sum[0] += stats_sd.tau
            tau_sum[1] += stats_td.tau
            n_above_sum[0] += stats_sd.num_above
            n_above_sum[1] += stats_td.num_above
            state.threshold_trace.append(
                (epoch, it, stats_sd.tau, stats_td.tau,
                 stats_sd.num_above, stats_td.num_above))

        state.epoch = epoch
        accs = _evaluate(sdm, tdm, source, target)
        nb = max(1, n_batches)
        rows.append(MetricsRow(
            epoch=epoch,
            fm_sd=sums_sd.fm / nb, fm_td=sums_td.fm / nb,
            bim_sd=sums_sd.bim / nb, bim_td=sums_td.bim / nb,
            sp_sd=sums_sd.sp / nb, sp_td=sums_td.sp / nb,
            cr=sums_sd.cr / nb,
            tau_sd=tau_sum[0] / nb, tau_td=tau_sum[1] / nb,
            n_above_sd=n_above_sum[0], n_above_td=n_above_sum[1],
            wall_ms=(time.perf_counter() - t0) * 1e3,
            **accs,
        ))
