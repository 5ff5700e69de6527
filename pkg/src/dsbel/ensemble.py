"""Deep-feature classifiers (linear SVM, MLP, AdaBoost.M1) and their majority vote.

All three learners see the same standardized features.  Labels are 0 (benign)
and 1 (malware); the margin-based learners work internally with -1/+1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .optim import SGD
from .tensor import DenseSpec, Tensor, dense, no_grad, relu, softmax_xent

ALPHA_CAP = math.log(1e10)
STD_FLOOR = 1e-8


class EnsembleError(ValueError):
    pass


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise EnsembleError(f"feature matrix {X.shape} does not match {len(y)} labels")
    if not np.all(np.isfinite(X)):
        raise EnsembleError("feature matrix has non-finite entries")
    if len(np.unique(y)) < 2:
        raise EnsembleError("training labels contain a single class")
    return X, y


def _signed(y):
    return np.where(np.asarray(y) == 1, 1.0, -1.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.mean):
            raise EnsembleError(f"expected {len(self.mean)} feature columns, got {X.shape}")
        return (X - self.mean) / self.std


# --------------------------------------------------------------------------
# linear SVM


@dataclass
class LinearSVM:
    weights: np.ndarray
    bias: float
    objective_history: list = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int64)


def hinge_objective(w, b, X, ys, lam) -> float:
    margins = ys * (X @ w + b)
    return 0.5 * lam * (w @ w + b * b) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def best_bias(f, ys, lam, chunk: int = 512) -> float:
    """Bias minimizing the objective for fixed scores ``f = X @ w``.

    The objective is convex and piecewise linear in b apart from the tiny
    ``lam/2 * b^2`` term, so the minimum over the hinge breakpoints
    ``b = y_i - f_i`` is used.
    """
    cands = ys - f
    best, best_val = 0.0, math.inf
    for lo in range(0, len(cands), chunk):
        b = cands[lo:lo + chunk]
        vals = 0.5 * lam * b * b + np.mean(np.maximum(0.0, 1.0 - ys[None, :] * (f[None, :] + b[:, None])), axis=1)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best, best_val = float(b[k]), float(vals[k])
    return best


def train_svm(X, y, lam: float = 1e-4, epochs: int = 100, seed: int = 0) -> LinearSVM:
    """Pegasos: stochastic subgradient steps of size 1/(lam*t) on the L2 hinge loss.

    The bias is a weight on a constant feature (so it is regularized too).
    With a small ``lam`` the early steps are huge and the raw iterate keeps
    oscillating (the bias moves in steps of 1/(lam*t)), so at each epoch
    boundary four candidates are scored on the full set: the iterate, the
    running average of iterates, and each of those with its bias refit
    exactly.  The lowest objective seen so far is kept; the recorded history
    is that running best.
    """
    X, y = _check_xy(X, y)
    ys = _signed(y)
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    rng = np.random.default_rng(seed)
    radius = 1.0 / math.sqrt(lam)
    w = np.zeros(d + 1)
    avg = np.zeros(d + 1)
    best_w = w.copy()
    best_obj = hinge_objective(w[:-1], w[-1], X, ys, lam)
    history = []
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            violated = ys[i] * (w @ Xa[i]) < 1.0
            w *= 1.0 - eta * lam
            if violated:
                w += eta * ys[i] * Xa[i]
            norm = math.sqrt(w @ w)
            if norm > radius:
                w *= radius / norm
            avg += (w - avg) / t
        for cand in (w, avg):
            refit = cand.copy()
            refit[-1] = best_bias(X @ cand[:-1], ys, lam)
            for c in (cand, refit):
                obj = hinge_objective(c[:-1], c[-1], X, ys, lam)
                if obj < best_obj:
                    best_obj, best_w = obj, c.copy()
        history.append(best_obj)
    return LinearSVM(best_w[:-1].copy(), float(best_w[-1]), history)


# --------------------------------------------------------------------------
# MLP


@dataclass
class MLP:
    hidden: DenseSpec
    output: DenseSpec

    def _logits(self, X) -> Tensor:
        x = Tensor(np.asarray(X, dtype=np.float64))
        return dense(relu(dense(x, self.hidden)), self.output)

    def predict_proba(self, X) -> np.ndarray:
        with no_grad():
            logits = self._logits(X).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1).astype(np.int64)


def _he_dense(rng, fan_in, fan_out) -> DenseSpec:
    bound = math.sqrt(6.0 / fan_in)
    return DenseSpec(fan_in, fan_out,
                     Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, dtype=np.float64),
                     Tensor(np.zeros(fan_out), requires_grad=True, dtype=np.float64))


def train_mlp(X, y, hidden: int = 64, lr: float = 1e-2, momentum: float = 0.9, epochs: int = 200,
              batch_size: int = 32, seed: int = 0) -> MLP:
    """One ReLU hidden layer and a 2-way softmax, trained by momentum SGD on mini-batches."""
    X, y = _check_xy(X, y)
    rng = np.random.default_rng(seed)
    mlp = MLP(_he_dense(rng, X.shape[1], hidden), _he_dense(rng, hidden, 2))
    params = [mlp.hidden.weight, mlp.hidden.bias, mlp.output.weight, mlp.output.bias]
    opt = SGD(params, lr=lr, momentum=momentum)
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            _, loss = softmax_xent(mlp._logits(X[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in params:
        p.grad = None
        p.requires_grad = False
    return mlp


# --------------------------------------------------------------------------
# AdaBoost.M1 with decision stumps


@dataclass
class Stump:
    feature: int
    threshold: float
    polarity: int  # +1: predict malware above the threshold
    alpha: float
    error: float

    def predict_signed(self, X) -> np.ndarray:
        above = np.asarray(X)[:, self.feature] > self.threshold
        return np.where(above, self.polarity, -self.polarity).astype(np.float64)


@dataclass
class AdaBoost:
    stumps: list = field(default_factory=list)
    weight_sums: list = field(default_factory=list)

    def margin(self, X, rounds: Optional[int] = None) -> np.ndarray:
        """Alpha-weighted vote normalized to [-1, 1]."""
        use = self.stumps if rounds is None else self.stumps[:rounds]
        total = sum(s.alpha for s in use)
        X = np.asarray(X, dtype=np.float64)
        if total <= 0:
            return np.zeros(len(X))
        return sum(s.alpha * s.predict_signed(X) for s in use) / total

    def predict(self, X, rounds: Optional[int] = None) -> np.ndarray:
        return (self.margin(X, rounds) > 0).astype(np.int64)

    def error_bound(self) -> list:
        """Running product of 2*sqrt(eps*(1-eps)); bounds the training error."""
        out, acc = [], 1.0
        for s in self.stumps:
            acc *= 2.0 * math.sqrt(max(s.error, 0.0) * max(1.0 - s.error, 0.0))
            out.append(acc)
        return out


def best_stump(Xs, order, ys, w) -> tuple:
    """Exhaustive search over (feature, midpoint threshold, polarity).

    ``Xs``/``order`` are the column-sorted features and their argsort.  Ties
    resolve to the lowest feature, then lowest threshold, then polarity +1.
    Returns ``(feature, threshold, polarity, weighted_error)`` or ``None``
    when every feature is constant.
    """
    n, d = Xs.shape
    ws = w[order]
    ysort = ys[order]
    pos_cum = np.cumsum(np.where(ysort > 0, ws, 0.0), axis=0)[:-1]
    neg_cum = np.cumsum(np.where(ysort < 0, ws, 0.0), axis=0)[:-1]
    pos_total = np.sum(np.where(ys > 0, w, 0.0))
    neg_total = np.sum(np.where(ys < 0, w, 0.0))
    # threshold between sorted rows k and k+1; polarity +1 predicts malware above it
    err_plus = pos_cum + (neg_total - neg_cum)
    err_minus = neg_cum + (pos_total - pos_cum)
    valid = Xs[1:] > Xs[:-1]
    if not valid.any():
        return None
    errs = np.stack([err_plus, err_minus], axis=-1)  # (n-1, d, 2)
    errs[~valid] = np.inf
    flat = errs.transpose(1, 0, 2).reshape(-1)  # feature-major, then threshold, then polarity
    k = int(np.argmin(flat))
    f, rest = divmod(k, (n - 1) * 2)
    row, pol = divmod(rest, 2)
    thr = 0.5 * (Xs[row, f] + Xs[row + 1, f])
    return f, float(thr), (1 if pol == 0 else -1), float(flat[k])


def train_adaboost(X, y, rounds: int = 100) -> AdaBoost:
    """AdaBoost.M1 on depth-1 stumps.

    Stops early when the best stump's weighted error reaches 0.5 (not added)
    or 0 (added with alpha capped at ln(1e10)).
    """
    X, y = _check_xy(X, y)
    ys = _signed(y)
    n = len(X)
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    w = np.full(n, 1.0 / n)
    model = AdaBoost()
    for _ in range(rounds):
        found = best_stump(Xs, order, ys, w)
        if found is None:
            break
        f, thr, pol, _ = found
        stump = Stump(f, thr, pol, 0.0, 0.0)
        h = stump.predict_signed(X)
        eps = float(np.sum(w[h != ys]))
        if eps >= 0.5:
            break
        alpha = ALPHA_CAP if eps <= 0 else min(0.5 * math.log((1.0 - eps) / eps), ALPHA_CAP)
        stump.alpha, stump.error = alpha, eps
        model.stumps.append(stump)
        w = w * np.exp(-alpha * ys * h)
        w /= w.sum()
        model.weight_sums.append(float(w.sum()))
        if eps <= 0:
            break
    return model


# --------------------------------------------------------------------------
# voting


def majority_vote(votes, confidences=None) -> np.ndarray:
    """Per-column majority over voter rows of 0/1 labels.

    An exact tie (possible only with an even voter count) falls back to the
    voter whose confidence ``|score - 0.5|`` is largest.
    """
    votes = np.asarray(votes, dtype=np.int64)
    k = votes.shape[0]
    ones = votes.sum(axis=0)
    out = (2 * ones > k).astype(np.int64)
    tie = 2 * ones == k
    if tie.any():
        if confidences is None:
            raise EnsembleError("tied vote needs voter confidences")
        conf = np.abs(np.asarray(confidences, dtype=np.float64) - 0.5)
        pick = conf.argmax(axis=0)
        out[tie] = votes[pick[tie], np.flatnonzero(tie)]
    return out


VOTERS = ("svm", "mlp", "adaboostm1")


@dataclass
class ClassifierEnsemble:
    standardizer: Standardizer
    svm: LinearSVM
    mlp: MLP
    adaboost: AdaBoost

    @property
    def n_features(self) -> int:
        return len(self.standardizer.mean)

    def individual(self, X) -> dict:
        """name -> (labels, calibrated malware score in [0, 1])."""
        Z = self.standardizer.transform(X)
        svm_margin = self.svm.decision_function(Z)
        mlp_p = self.mlp.predict_proba(Z)[:, 1]
        ada_margin = self.adaboost.margin(Z)
        return {
            "svm": ((svm_margin > 0).astype(np.int64), sigmoid(svm_margin)),
            "mlp": ((mlp_p > 0.5).astype(np.int64), mlp_p),
            "adaboostm1": ((ada_margin > 0).astype(np.int64), (ada_margin + 1.0) / 2.0),
        }

    def predict(self, X) -> tuple:
        """(majority-vote labels, mean calibrated score)."""
        parts = self.individual(X)
        votes = np.stack([parts[v][0] for v in VOTERS])
        scores = np.stack([parts[v][1] for v in VOTERS])
        return majority_vote(votes, scores), scores.mean(axis=0)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        f = lambda a: [float(v) for v in np.ravel(a)]
        return {
            "n_features": self.n_features,
            "standardizer": {"mean": f(self.standardizer.mean), "std": f(self.standardizer.std)},
            "svm": {"weights": f(self.svm.weights), "bias": float(self.svm.bias)},
            "mlp": {
                "hidden": self.mlp.hidden.out_dim,
                "w1": f(self.mlp.hidden.weight.data), "b1": f(self.mlp.hidden.bias.data),
                "w2": f(self.mlp.output.weight.data), "b2": f(self.mlp.output.bias.data),
            },
            "adaboost": [[s.feature, s.threshold, s.polarity, s.alpha, s.error] for s in self.adaboost.stumps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierEnsemble":
        D, H = d["n_features"], d["mlp"]["hidden"]
        arr = lambda v, shape=None: np.asarray(v, dtype=np.float64).reshape(shape or -1)
        mk = lambda i, o, w, b: DenseSpec(i, o, Tensor(arr(w, (i, o))), Tensor(arr(b)))
        m = d["mlp"]
        return cls(
            Standardizer(arr(d["standardizer"]["mean"]), arr(d["standardizer"]["std"])),
            LinearSVM(arr(d["svm"]["weights"]), float(d["svm"]["bias"])),
            MLP(mk(D, H, m["w1"], m["b1"]), mk(H, 2, m["w2"], m["b2"])),
            AdaBoost([Stump(int(f), float(t), int(p), float(a), float(e)) for f, t, p, a, e in d["adaboost"]]),
        )


def fit_ensemble(X, y, seed: int = 0, adaboost_rounds: int = 100) -> ClassifierEnsemble:
    X, y = _check_xy(X, y)
    std = Standardizer.fit(X)
    Z = std.transform(X)
    return ClassifierEnsemble(std, train_svm(Z, y, seed=seed), train_mlp(Z, y, seed=seed),
                              train_adaboost(Z, y, adaboost_rounds))


def predict_ensemble(ens: ClassifierEnsemble, X) -> tuple:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != ens.n_features:
        raise EnsembleError(f"ensemble expects {ens.n_features} features, got shape {X.shape}")
    return ens.predict(X)
