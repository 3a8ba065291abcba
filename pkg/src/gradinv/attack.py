"""Reconstruction of client training data from an observed model update.

The attacker replays the client's local training procedure on optimizable
dummy data, so the resulting dummy update is a differentiable function of
the dummy pixels. Matching it against the observed update (optionally with
per-layer weights and error-driven weight enhancement) and descending on
the dummy data recovers the client's samples.

For the E > 1, B > 1 regime the per-epoch reshuffle is unknown, so exact
replay is impossible; the observed total update is sliced into equal
per-epoch pieces by linear interpolation and one epoch is attacked as if
it were a single-epoch round.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .fedavg import (RoundRecord, Scenario, TrainingConfig, model_update,
                     scenario_of)
from .models import ModelParams, ModelUpdate

Q_BOUNDS_LOW = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
Q_BOUNDS_HIGH = np.array([1000.0, 1000.0, 1000.0, 1000.0, 0.5, 0.5])
ERR_DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightVector:
    """The 6 tunables of the weighted matching loss: per-kind maximum
    schedule weights, the enhancement weight, and the two selection
    fractions."""

    q_cv: float
    q_bn: float
    q_fc: float
    q_en: float
    p_mean: float
    p_var: float

    def __post_init__(self):
        lo, hi = Q_BOUNDS_LOW, Q_BOUNDS_HIGH
        for i, (name, v) in enumerate(zip(self.field_names(), self.as_array())):
            if not lo[i] <= v <= hi[i]:
                raise ValueError(
                    f"{name}={v} outside search box [{lo[i]}, {hi[i]}]")

    @staticmethod
    def field_names():
        return ("q_cv", "q_bn", "q_fc", "q_en", "p_mean", "p_var")

    def as_array(self):
        return np.array([self.q_cv, self.q_bn, self.q_fc, self.q_en,
                         self.p_mean, self.p_var])

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


UNIT_WEIGHTS = WeightVector(1.0, 1.0, 1.0, 1.0, 0.0, 0.0)


@dataclass
class DummyData:
    """The attacker's optimizable stand-in for the client batch.

    ``y`` is a fixed integer label vector when labels are known, or a
    logits tensor whose softmax is the optimized label distribution.
    """

    x: Tensor
    y: object
    optimize_labels: bool

    def label_distribution(self):
        if not self.optimize_labels:
            return self.y
        return ad.softmax(self.y)

    def variables(self):
        return [self.x, self.y] if self.optimize_labels else [self.x]


def init_dummy(n, input_shape, labels, optimize_labels, seed, n_classes):
    """I.i.d. uniform pixels on [0, 1]; uniform label logits if optimized."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(n,) + tuple(input_shape)),
               requires_grad=True)
    if optimize_labels:
        y = Tensor(np.zeros((n, n_classes)), requires_grad=True)
    else:
        y = np.asarray(labels)
    return DummyData(x, y, optimize_labels)


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 1000
    eta_hat: float = 0.1
    loss_kind: str = "weighted"  # "weighted" | "unweighted"
    target_epoch: int = 1
    optimize_labels: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("attack iterations must be >= 1")
        if self.eta_hat <= 0:
            raise ValueError("attack learning rate must be positive")
        if self.loss_kind not in ("weighted", "unweighted"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


# ---------------------------------------------------------------------------
# replication of the client procedure on dummy data


def replicate_update(dummy: DummyData, theta_start: ModelParams,
                     config: TrainingConfig, create_graph=True) -> ModelUpdate:
    """Run the client's training steps on dummy data, differentiably.

    S1: one full-batch step; S2: E full-batch steps; S3: B sequential
    steps on the attacker's fixed contiguous split of the dummy batch.
    The E > 1, B > 1 regime cannot be replayed (the client's reshuffles
    are unknown); reduce it with :func:`interpolate_updates` first.
    """
    scenario = scenario_of(config)
    if scenario is Scenario.S4:
        raise ValueError(
            "cannot replicate an E>1, B>1 round directly: the client's "
            "per-epoch shuffles are unknown; use interpolate_updates to "
            "reduce it to a single-epoch attack")
    n = dummy.x.data.shape[0]
    if n != config.dataset_size:
        raise ValueError(f"dummy batch of {n} samples does not split into "
                         f"{config.batches} x {config.batch_size}")
    y = dummy.label_distribution()
    m = config.batch_size
    start_tensors = list(theta_start.tensors())
    theta = start_tensors
    shape_template = theta_start.layers
    for _ in range(config.epochs):
        for b in range(config.batches):
            if config.batches == 1:
                xb, yb = dummy.x, y
            else:
                xb = ad.take_rows(dummy.x, b * m, (b + 1) * m)
                yb = ad.take_rows(y, b * m, (b + 1) * m) \
                    if isinstance(y, Tensor) else y[b * m:(b + 1) * m]
            it = iter(theta)
            cur = ModelParams(theta_start.arch,
                              [tuple(next(it) for _ in ts)
                               for ts in shape_template])
            loss = models.forward_loss(cur, xb, yb)
            grads = ad.grad(loss, theta, create_graph=create_graph)
            theta = [ad.sub(p, ad.scale(g, config.eta))
                     for p, g in zip(theta, grads)]
    deltas = [ad.sub(p_end, p_start)
              for p_end, p_start in zip(theta, start_tensors)]
    it = iter(deltas)
    return ModelUpdate(theta_start.arch,
                       [tuple(next(it) for _ in ts) for ts in shape_template])


@dataclass
class InterpolatedUpdates:
    """Equal per-epoch slices of an observed multi-epoch update.

    All entries are the same update (theta_end - theta_start) / E; their
    sum telescopes back to the observed total.
    """

    theta_start: ModelParams
    per_epoch: list  # E ModelUpdates, elementwise equal
    epochs: int

    def epoch_start(self, epoch: int) -> ModelParams:
        """Interpolated parameters at the start of ``epoch`` (1-based)."""
        if not 1 <= epoch <= self.epochs:
            raise ValueError(f"epoch {epoch} outside 1..{self.epochs}")
        u = self.per_epoch[0]
        start = models.params_zip(
            self.theta_start, u,
            lambda p, d: Tensor(p.data + (epoch - 1) * d.data,
                                requires_grad=True))
        return start


def interpolate_updates(theta_start: ModelParams, theta_end: ModelParams,
                        epochs: int) -> InterpolatedUpdates:
    """Linear interpolation between the round's endpoint parameters."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    u = models.params_zip(theta_start, theta_end,
                          lambda a, b: Tensor((b.data - a.data) / epochs))
    return InterpolatedUpdates(theta_start.detached(requires_grad=True),
                               [u] * epochs, epochs)


# ---------------------------------------------------------------------------
# matching losses


def _layer_sq_norms(delta_hat: ModelUpdate, delta: ModelUpdate):
    models.check_same_arch(delta_hat, delta, "matching loss")
    norms = []
    for ts_hat, ts in zip(delta_hat.layers, delta.layers):
        s = None
        for t_hat, t in zip(ts_hat, ts):
            d = ad.sub(t_hat, t.detach() if t.requires_grad else t)
            term = ad.sum_of_squares(d)
            s = term if s is None else ad.add(s, term)
        norms.append(s)
    return norms


def matching_loss(delta_hat: ModelUpdate, delta: ModelUpdate) -> Tensor:
    """Squared Euclidean distance between two updates over all layers."""
    norms = _layer_sq_norms(delta_hat, delta)
    total = norms[0]
    for s in norms[1:]:
        total = ad.add(total, s)
    return total


def weight_schedule(q: WeightVector, partition):
    """Per-layer base weights: linear from 1 up to the kind's maximum.

    ``partition`` is the (conv, batch-norm, fully-connected) index lists;
    a kind with a single layer gets its maximum directly.
    """
    conv, bn, fc = partition
    n_layers = len(conv) + len(bn) + len(fc)
    weights = np.ones(n_layers)
    for indices, q_max in ((conv, q.q_cv), (bn, q.q_bn), (fc, q.q_fc)):
        k = len(indices)
        if k == 1:
            weights[indices[0]] = q_max
        elif k > 1:
            slope = (q_max - 1.0) / (k - 1)
            for pos, layer in enumerate(indices):
                weights[layer] = slope * pos + 1.0
    return weights


def relative_errors(delta_hat: ModelUpdate, delta: ModelUpdate):
    """Per-layer relative errors of the update mean and population variance.

    The denominators are floored at 1e-12; statistics pool every scalar
    entry of a layer's parameter tensors.
    """
    models.check_same_arch(delta_hat, delta, "relative_errors")
    e_mean, e_var = [], []
    for ts_hat, ts in zip(delta_hat.layers, delta.layers):
        flat_hat = np.concatenate([t.data.reshape(-1) for t in ts_hat])
        flat = np.concatenate([t.data.reshape(-1) for t in ts])
        mu_hat, mu = flat_hat.mean(), flat.mean()
        var_hat, var = flat_hat.var(), flat.var()
        e_mean.append(abs(mu_hat - mu) / max(abs(mu), ERR_DENOM_FLOOR))
        e_var.append(abs(var_hat - var) / max(abs(var), ERR_DENOM_FLOOR))
    return np.array(e_mean), np.array(e_var)


def _top_indices(errors, fraction):
    n_layers = len(errors)
    count = int(np.ceil(fraction * n_layers))
    if count <= 0:
        return set()
    order = sorted(range(n_layers), key=lambda i: (-errors[i], i))
    return set(order[:count])


def select_enhanced_layers(e_mean, e_var, p_mean, p_var):
    """Layers whose mean AND variance errors are both among the largest
    ceil(p * L); ties broken toward lower layer index."""
    if not (0.0 <= p_mean <= 1.0 and 0.0 <= p_var <= 1.0):
        raise ValueError("selection fractions must lie in [0, 1]")
    return _top_indices(e_mean, p_mean) & _top_indices(e_var, p_var)


@dataclass
class LossBreakdown:
    total: Tensor          # the weighted loss, differentiable
    unweighted: float      # plain squared distance, for traces
    weights: np.ndarray    # effective per-layer weights (after enhancement)
    enhanced: set


def weighted_matching_loss(delta_hat: ModelUpdate, delta: ModelUpdate,
                           q: WeightVector, partition) -> LossBreakdown:
    """Per-layer weighted squared distance with error-driven enhancement.

    The enhancement set is recomputed from the current ``delta_hat``; the
    weights are constants w.r.t. differentiation.
    """
    base = weight_schedule(q, partition)
    e_mean, e_var = relative_errors(delta_hat, delta)
    enhanced = select_enhanced_layers(e_mean, e_var, q.p_mean, q.p_var)
    weights = base.copy()
    for layer in enhanced:
        weights[layer] = q.q_en
    norms = _layer_sq_norms(delta_hat, delta)
    total = None
    unweighted = 0.0
    for w, s in zip(weights, norms):
        unweighted += s.data.item()
        term = ad.scale(s, float(w))
        total = term if total is None else ad.add(total, term)
    return LossBreakdown(total, unweighted, weights, enhanced)


# ---------------------------------------------------------------------------
# the optimizer and the attack loop


class Adam:
    """Standard Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        """Return updated parameters; mutates the moment state."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TraceRow:
    iteration: int
    loss_weighted: float
    loss_unweighted: float
    weights_hash: str
    elapsed_s: float


@dataclass
class AttackResult:
    x: np.ndarray            # reconstructed samples, attack order
    y: np.ndarray            # labels (fixed) or label distribution (optimized)
    f_value: float           # unweighted distance of the final replication
    trace: list
    diverged: bool = False


def _weights_hash(weights):
    return hashlib.sha1(np.ascontiguousarray(weights).tobytes()).hexdigest()[:10]


def reconstruct(q, target_update: ModelUpdate, theta_start: ModelParams,
                config: TrainingConfig, atk: AttackConfig, labels,
                x0=None) -> AttackResult:
    """The inner attack loop: Adam descent of the matching loss on dummy data.

    ``q`` is ignored for the unweighted loss kind. ``labels`` are the known
    labels (ignored when ``atk.optimize_labels``). ``x0`` optionally fixes
    the dummy initialization (e.g. at the ground truth for fixed-point
    checks).
    """
    arch = theta_start.arch
    partition = models.layer_partition(arch)
    n = config.dataset_size
    dummy = init_dummy(n, arch.input_shape, labels, atk.optimize_labels,
                       atk.init_seed, arch.n_classes)
    if x0 is not None:
        dummy.x = Tensor(np.asarray(x0, dtype=np.float64).copy(),
                         requires_grad=True)
    weighted = atk.loss_kind == "weighted"
    if weighted and q is None:
        raise ValueError("weighted loss kind needs a weight vector")
    opt_x = Adam(dummy.x.data.shape, atk.eta_hat, atk.beta1, atk.beta2, atk.eps)
    opt_y = Adam(dummy.y.data.shape, atk.eta_hat, atk.beta1, atk.beta2,
                 atk.eps) if atk.optimize_labels else None

    trace = []
    diverged = False
    t0 = time.perf_counter()
    for it in range(atk.iterations):
        delta_hat = replicate_update(dummy, theta_start, config,
                                     create_graph=True)
        if weighted:
            breakdown = weighted_matching_loss(delta_hat, target_update, q,
                                               partition)
            loss = breakdown.total
            loss_w = loss.data.item()
            loss_u = breakdown.unweighted
            whash = _weights_hash(breakdown.weights)
        else:
            loss = matching_loss(delta_hat, target_update)
            loss_w = loss_u = loss.data.item()
            whash = _weights_hash(np.ones(arch.n_layers))
        if not np.isfinite(loss_w):
            diverged = True
            trace.append(TraceRow(it, loss_w, loss_u, whash,
                                  time.perf_counter() - t0))
            break
        grads = ad.grad(loss, dummy.variables())
        dummy.x = Tensor(opt_x.step(dummy.x.data, grads[0].data),
                         requires_grad=True)
        if atk.optimize_labels:
            dummy.y = Tensor(opt_y.step(dummy.y.data, grads[1].data),
                             requires_grad=True)
        trace.append(TraceRow(it, loss_w, loss_u, whash,
                              time.perf_counter() - t0))

    if diverged or not np.all(np.isfinite(dummy.x.data)):
        f_value = float("inf")
        diverged = True
    else:
        final = replicate_update(dummy, theta_start, config, create_graph=False)
        f_value = matching_loss(final, target_update).data.item()
        if not np.isfinite(f_value):
            diverged = True
            f_value = float("inf")
    if atk.optimize_labels:
        y_out = np.asarray(ad.softmax(dummy.y).data)
    else:
        y_out = np.asarray(dummy.y)
    return AttackResult(dummy.x.data.copy(), y_out, f_value, trace, diverged)


@dataclass
class AttackTarget:
    """Resolved attack problem: start parameters, target update, and the
    replication procedure the attacker runs."""

    theta_start: ModelParams
    update: ModelUpdate
    config: TrainingConfig
    scenario: Scenario
    approximated: bool


def make_target(record: RoundRecord, atk: AttackConfig) -> AttackTarget:
    """Pick the attack target for a round.

    Exact scenarios use the observed total update; the E>1, B>1 regime is
    reduced to one interpolated epoch (``atk.target_epoch``).
    """
    scenario = scenario_of(record.config)
    if scenario is not Scenario.S4:
        return AttackTarget(record.theta_start.detached(requires_grad=True),
                            model_update(record), record.config, scenario,
                            approximated=False)
    interp = interpolate_updates(record.theta_start, record.theta_end,
                                 record.config.epochs)
    epoch = atk.target_epoch
    rep = replace(record.config, epochs=1)
    return AttackTarget(interp.epoch_start(epoch), interp.per_epoch[epoch - 1],
                        rep, scenario, approximated=True)
