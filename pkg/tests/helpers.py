"""Shared test utilities: finite-difference gradient oracle and small
randomized model/batch factories."""
from __future__ import annotations

import numpy as np

from fixbi.models import ClassifierModel, init_model
from fixbi.numerics import Array, ParamSet, backward


def finite_diff_grads(loss_fn, params: ParamSet, eps: float = 1e-5) -> dict[str, Array]:
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter.

    ``loss_fn`` must rebuild its graph from the current parameter values on
    every call; parameters are perturbed in place and restored.
    """
    grads: dict[str, Array] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn()
            flat[i] = orig - eps
            f_minus = loss_fn()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g.reshape(t.data.shape)
    return grads


def max_rel_error(analytic: dict[str, Array], numeric: dict[str, Array],
                  floor: float = 1e-5) -> float:
    """Worst elementwise relative error across all parameters.

    Denominators are floored so finite-difference noise on near-zero
    gradient entries does not dominate; a genuinely wrong formula still
    shows an error at the gradient's own scale.
    """
    worst = 0.0
    for name, a in analytic.items():
        b = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float((np.abs(a - b) / denom).max()))
    return worst


def check_grads(loss_builder, params: ParamSet, eps: float = 1e-5,
                tol: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``loss_builder()`` against central
    finite differences; returns the observed worst relative error."""
    analytic = backward(loss_builder(), params)
    numeric = finite_diff_grads(lambda: loss_builder().item(), params, eps)
    err = max_rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: max rel error {err} >= {tol}"
    return err


def manual_model(w, b, theta: float = 0.0) -> ClassifierModel:
    """1-layer model (identity extractor) with hand-chosen weights."""
    from fixbi.numerics import ParamSet

    w = np.asarray(w, dtype=np.float64)
    params = ParamSet()
    params.add("head.w", w)
    params.add("head.b", np.asarray(b, dtype=np.float64))
    params.add("log_temperature", np.array([float(theta)]))
    return ClassifierModel(w.shape[0], (), w.shape[1], params)


def random_model(rng: np.random.Generator, input_dim: int = 3,
                 widths=(5, 4), num_classes: int = 3) -> ClassifierModel:
    """Small random model; weights re-randomized (non-zero biases, theta too)
    so gradient checks exercise every parameter."""
    model = init_model(input_dim, widths, num_classes, seed=int(rng.integers(2**31)))
    for _, t in model.params.items():
        t.data = rng.normal(0.0, 0.6, size=t.data.shape)
    return model


def random_batch(rng: np.random.Generator, b: int, d: int, c: int):
    """Random features plus one-hot-able labels for both domains."""
    xs = rng.normal(0.0, 1.0, size=(b, d))
    xt = rng.normal(0.0, 1.0, size=(b, d))
    ys = rng.integers(0, c, size=b)
    yt = rng.integers(0, c, size=b)
    return xs, ys, xt, yt


class ExactOracleCheck:
    """Full training iterations on a 2-sample, 2-class, 1-layer model,
    hand-unrolled in straight-line numpy and compared against the training
    loop at 1e-10 absolute.

    With one epoch the two models still share the pretrained weights; with
    two, the second iteration exercises matching between genuinely diverged
    teacher and student plus the momentum-buffer carry-over. In
    frozen-baseline mode the mixup labels come from the initial weights all
    run while gates and thresholds stay live.
    """

    W0 = np.array([[0.3, -0.1], [0.2, 0.4]])
    B0 = np.array([0.05, -0.05])
    THETA0 = 0.1
    XS = np.array([[1.0, 0.5], [-0.5, 1.0]])
    YS = np.array([0, 1])
    XT = np.array([[0.8, -0.2], [-0.3, 0.6]])
    LR = 0.01
    MOMENTUM = 0.9
    WD = 0.005
    SEED = 3

    def __init__(self, epochs: int = 1, pseudo: str = "live",
                 with_matching: bool = True):
        self.epochs = epochs
        self.pseudo = pseudo
        self.with_matching = with_matching

    def config(self):
        from fixbi.config import DatasetSpec, TrainConfig
        return TrainConfig(dataset=DatasetSpec(kind="blobs", num_classes=2, per_class=2),
                           arch=(4,), batch_size=2, epochs=self.epochs,
                           warmup_epochs=0, lr0=self.LR, momentum=self.MOMENTUM,
                           weight_decay=self.WD, lambda_sd=0.7, lambda_td=0.3,
                           loss_bim=self.with_matching, loss_cr=False,
                           pseudo_label_source=self.pseudo,
                           baseline_epochs=0, seed=self.SEED)

    def datasets(self):
        from fixbi.data import Dataset
        source = Dataset(self.XS, self.YS, 2, "source")
        target = Dataset(self.XT, np.array([-1, -1]), 2, "target",
                         hidden_labels=np.array([0, 1]))
        return source, target

    @staticmethod
    def _softmax_rows(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def hand_unrolled(self):
        """Straight-line recomputation of every iteration, no package calls."""
        import math

        b = 2
        lams = {"sd": 0.7, "td": 0.3}
        weights = {m: [self.W0.copy(), self.B0.copy(), self.THETA0]
                   for m in ("sd", "td")}
        velocity = {m: [np.zeros_like(self.W0), np.zeros_like(self.B0), 0.0]
                    for m in ("sd", "td")}

        for epoch in range(1, self.epochs + 1):
            # batch order: permutations drawn from default_rng([seed, epoch]),
            # source stream first; one batch per epoch at this size
            rng = np.random.default_rng([self.SEED, epoch])
            si = rng.permutation(2)
            ti = rng.permutation(2)
            xs, ys = self.XS[si], self.YS[si]
            xt = self.XT[ti]
            progress = (epoch - 1) / self.epochs
            lr = self.LR / (1.0 + 10.0 * progress) ** 0.75

            # pre-update views of the target batch for both models
            view = {}
            for m, (w, bias, _) in weights.items():
                z_t = xt @ w + bias
                p1 = self._softmax_rows(z_t)
                conf = p1.max(axis=1)
                view[m] = {
                    "z_t": z_t, "p1": p1, "conf": conf,
                    "yhat": np.argmax(p1, axis=1),
                    "tau": min(1.0, max(0.0, conf.mean() - 2.0 * conf.std())),
                }

            grads = {}
            for m, (w, bias, theta) in weights.items():
                v = view[m]
                gw = np.zeros_like(w)
                gb = np.zeros_like(bias)
                gtheta = 0.0

                # mixup label source: the model's own live argmax, or the
                # initial weights' argmax when frozen
                if self.pseudo == "frozen-baseline":
                    z0 = xt @ self.W0 + self.B0
                    pl = np.argmax(self._softmax_rows(z0), axis=1)
                else:
                    pl = v["yhat"]
                lam = lams[m]
                x_mix = lam * xs + (1.0 - lam) * xt
                y_mix = lam * np.eye(2)[ys] + (1.0 - lam) * np.eye(2)[pl]
                p_mix = self._softmax_rows(x_mix @ w + bias)
                dz = (p_mix - y_mix) / b
                gw += x_mix.T @ dz
                gb += dz.sum(axis=0)

                # self-penalization (tempered), gated strictly below own tau
                t = math.exp(theta)
                pt = self._softmax_rows(v["z_t"] / t)
                for i in range(b):
                    if v["conf"][i] < v["tau"]:
                        k = v["yhat"][i]
                        a = pt[i, k]
                        dl_da = (1.0 / b) / (1.0 - a)
                        dz_sp = dl_da * pt[i, k] * (np.eye(2)[k] - pt[i]) / t
                        gw += np.outer(xt[i], dz_sp)
                        gb += dz_sp
                        da_dt = -a * (v["z_t"][i, k]
                                      - float((pt[i] * v["z_t"][i]).sum())) / (t * t)
                        gtheta += dl_da * da_dt * t

                # matching: the partner teaches, gated by the partner's
                # confidence against the partner's threshold
                if self.with_matching:
                    o = view["td" if m == "sd" else "sd"]
                    q = self._softmax_rows(v["z_t"])  # student's own T=1 probs
                    for i in range(b):
                        if o["conf"][i] > o["tau"]:
                            dz_bim = (q[i] - np.eye(2)[o["yhat"][i]]) / b
                            gw += np.outer(xt[i], dz_bim)
                            gb += dz_bim
                grads[m] = (gw, gb, gtheta)

            for m, (gw, gb, gtheta) in grads.items():
                w, bias, theta = weights[m]
                vel = velocity[m]
                vel[0] = self.MOMENTUM * vel[0] + gw + self.WD * w
                vel[1] = self.MOMENTUM * vel[1] + gb + self.WD * bias
                vel[2] = self.MOMENTUM * vel[2] + gtheta + self.WD * theta
                weights[m] = [w - lr * vel[0], bias - lr * vel[1],
                              theta - lr * vel[2]]
        return {m: tuple(w) for m, w in weights.items()}

    def run(self) -> float:
        """Execute both paths; returns the worst absolute deviation."""
        from fixbi.core import train_fixbi

        cfg = self.config()
        source, target = self.datasets()
        init = manual_model(self.W0, self.B0, theta=self.THETA0)
        state, rows = train_fixbi(cfg, source, target, init)
        assert len(rows) == self.epochs
        want = self.hand_unrolled()

        worst = 0.0
        for name, model in (("sd", state.sdm), ("td", state.tdm)):
            w, bias, theta = want[name]
            worst = max(worst,
                        float(np.abs(model.params["head.w"].data - w).max()),
                        float(np.abs(model.params["head.b"].data - bias).max()),
                        abs(float(model.params["log_temperature"].data[0]) - theta))
        assert worst < 1e-10, f"oracle deviation {worst} >= 1e-10"
        return worst


def safe_tau(confidences, min_clearance: float = 1e-3) -> float:
    """A threshold inside the widest gap between sorted confidences.

    Finite differencing a gated loss is only valid when no confidence sits
    within the perturbation's reach of the threshold; the widest-gap
    midpoint keeps every sample clear of the selection boundary.
    """
    c = np.sort(np.asarray(confidences, dtype=np.float64))
    if c.size < 2:
        return float(np.clip(c[0] - min_clearance, 0.0, 1.0))
    gaps = c[1:] - c[:-1]
    i = int(np.argmax(gaps))
    assert gaps[i] > 2 * min_clearance, "confidences too bunched for a clean gate"
    return float((c[i] + c[i + 1]) / 2.0)
