"""Numerical checks for the signed-backward divergence bound.

The bound says: training L layers for T steps with the sign-mask backward,
the output distance to exact-backward training is at most
lambda*M*T*G*(sum_{i=1..L} Psi^i + sum_{i=1..L} PsiTilde^i) with
Psi = 1.5*sqrt(N)*G and PsiTilde = sqrt(N)*G.  All norms are Frobenius.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ActBackwardMode, HardSwish, ReLU6, softmax_cross_entropy
from .model import Model, ModelSpec, build_model
from .policy import TrainPolicy, apply_policy
from .tensor import Tape
from .trainer import DatasetHandle, OptimizerCfg, OptimizerState, optimizer_step


@dataclass
class BoundParams:
    lam: float      # learning rate
    M: float        # Lipschitz constant of the loss-composed network
    T: int          # training steps
    G: float        # gradient-magnitude bound
    N: int          # per-layer output element bound
    L: int          # number of sign-approximated layers

    def __post_init__(self):
        for name in ("lam", "M", "G"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.T < 0 or self.N < 1 or self.L < 1:
            raise ValueError("T must be >= 0; N, L must be >= 1")


def _geom_sum(psi: float, terms: int) -> float:
    """sum_{i=1..terms} psi^i, with the psi == 1 singularity handled directly."""
    if abs(psi - 1.0) < 1e-12:
        return float(terms)
    return psi * (1 - psi ** terms) / (1 - psi)


def bound_eval(p: BoundParams) -> float:
    psi = 1.5 * np.sqrt(p.N) * p.G
    psit = np.sqrt(p.N) * p.G
    return p.lam * p.M * p.T * p.G * (_geom_sum(psi, p.L) + _geom_sum(psit, p.L))


@dataclass
class PropositionResult:
    passed: bool
    max_ratio: float
    trials: int


def proposition_check(n1: int, n2: int, n3: int, G: float, seed: int = 0,
                      trials: int = 1000) -> PropositionResult:
    """Monte-Carlo check of the two per-layer propagation bounds.

    Samples the activation derivative matrix from hard-swish inputs and a
    weight-gradient matrix with Frobenius norm <= G (the form the proof's
    entry-wise chain uses), then checks the stated product bounds with the
    exact derivative (bound 1.5*sqrt(n1)*G) and the sign mask
    (bound sqrt(n1)*G).
    """
    if min(n1, n2, n3) < 1 or trials < 1:
        raise ValueError("dims and trials must be >= 1")
    rng = np.random.default_rng(seed)
    max_ratio = 0.0
    for _ in range(trials):
        a = rng.uniform(-6, 6, size=(n1, n2))
        h_exact = np.minimum(np.maximum(a + 3, 0), 6) / 6 + a * (np.abs(a) <= 3) / 6
        h_sign = (a >= 0).astype(float)
        w = rng.standard_normal((n2, n3))
        norm = np.linalg.norm(w)
        if norm > 0:
            w *= G * rng.uniform(0, 1) ** 0.5 / norm  # ||w||_F <= G
        # entry-wise product chain: sqrt(sum_i sum_j sum_k (h_ik w_kj)^2)
        for h, scale in ((h_exact, 1.5), (h_sign, 1.0)):
            q = np.sqrt(np.einsum("ik,kj->", h ** 2, w ** 2))
            bound = scale * np.sqrt(n1) * G
            max_ratio = max(max_ratio, q / bound)
    return PropositionResult(max_ratio <= 1.0, float(max_ratio), trials)


@dataclass
class DivergenceReport:
    per_step_distance: list = field(default_factory=list)
    final_output_distance: float = 0.0
    measured_G: float = 0.0
    estimated_M: float = 0.0
    N: int = 0
    L: int = 0
    bound: float = 0.0
    passed: bool = False


def _concat_trainable(model: Model) -> np.ndarray:
    parts = [p.ravel() for _, p in sorted(model.trainable_params().items())]
    return np.concatenate(parts) if parts else np.zeros(0)


def _loss_on(model: Model, images, labels) -> float:
    logits = model.forward(images, None, training=False)
    loss = softmax_cross_entropy(logits, labels, None)
    return float(loss.data[0])


def _approx_layer_count(model: Model) -> int:
    n = 0
    for b in model.blocks:
        if b.frozen:
            continue
        for layer in b.layers:
            if isinstance(layer, (ReLU6, HardSwish)) and \
                    layer.mode == ActBackwardMode.ApproxSigned:
                n += 1
    return n


def _max_output_elements(model: Model, input_shape) -> int:
    """Largest per-sample layer output among trainable blocks."""
    from .tensor import wrap

    xt = wrap(np.zeros(input_shape, dtype=np.float32))
    best = 1
    for b in model.blocks:
        for layer in b.layers:
            xt = layer.forward(xt, None, False)
            if not b.frozen:
                best = max(best, xt.elements // input_shape[0])
    return best


def twin_divergence(spec: ModelSpec, policy_exact: TrainPolicy,
                    policy_approx: TrainPolicy, dataset: DatasetHandle,
                    steps: int, seed: int = 0, lr: float = 1e-3,
                    batch_size: int = 8,
                    lipschitz_trials: int = 100) -> DivergenceReport:
    """Train exact- and sign-backward twins in lockstep and measure drift."""
    if (policy_exact.preset != policy_approx.preset
            or policy_exact.k_blocks != policy_approx.k_blocks
            or policy_exact.quantize_frozen != policy_approx.quantize_frozen
            or policy_exact.train_head != policy_approx.train_head):
        raise ValueError("twin policies may differ only in act_backward")
    if policy_exact.act_backward == policy_approx.act_backward:
        raise ValueError("twin policies must differ in act_backward")

    m_exact = apply_policy(build_model(spec, seed), policy_exact)
    m_approx = apply_policy(build_model(spec, seed), policy_approx)

    cfg = OptimizerCfg(kind="sgd", lr=lr, schedule="constant", total_steps=max(steps, 1))
    st_e, st_a = OptimizerState(), OptimizerState()
    rng = np.random.default_rng(seed + 1)
    report = DivergenceReport()
    n_batch = dataset.count
    probe_idx = np.arange(min(batch_size, n_batch))
    measured_G = 0.0

    for step in range(steps):
        idx = rng.integers(0, n_batch, size=batch_size)
        images, labels = dataset.images[idx], dataset.labels[idx]
        for model, state in ((m_exact, st_e), (m_approx, st_a)):
            tape = Tape()
            logits = model.forward(images, tape, training=True)
            loss = softmax_cross_entropy(logits, labels, tape)
            grads = tape.backward(loss)
            gvec = np.concatenate([np.asarray(g).ravel()
                                   for _, g in sorted(grads.items())])
            measured_G = max(measured_G, float(np.linalg.norm(gvec)))
            optimizer_step(model.trainable_params(), grads, state, cfg)
        dist = float(np.linalg.norm(
            _concat_trainable(m_approx) - _concat_trainable(m_exact)))
        report.per_step_distance.append(dist)

    probe_x = dataset.images[probe_idx]
    probe_y = dataset.labels[probe_idx]
    report.final_output_distance = abs(
        _loss_on(m_approx, probe_x, probe_y) - _loss_on(m_exact, probe_x, probe_y))

    # empirical Lipschitz lower bound around the trained weights
    base = _concat_trainable(m_exact)
    est_m = 0.0
    probe_model = apply_policy(build_model(spec, seed), policy_exact)
    names = sorted(probe_model.trainable_params())
    for _ in range(lipschitz_trials):
        w1 = base + rng.normal(0, 0.01, size=base.shape)
        w2 = base + rng.normal(0, 0.01, size=base.shape)
        f1 = _loss_with_weights(probe_model, names, w1, probe_x, probe_y)
        f2 = _loss_with_weights(probe_model, names, w2, probe_x, probe_y)
        denom = np.linalg.norm(w1 - w2)
        if denom > 0:
            est_m = max(est_m, abs(f1 - f2) / denom)

    report.measured_G = measured_G if measured_G > 0 else 1e-12
    report.estimated_M = est_m if est_m > 0 else 1e-12
    report.N = _max_output_elements(m_exact, (batch_size,) + tuple(spec.input_shape[1:]))
    report.L = max(_approx_layer_count(m_approx), 1)
    if steps == 0:
        report.bound = 0.0
    else:
        report.bound = bound_eval(BoundParams(
            lam=lr, M=report.estimated_M, T=steps, G=report.measured_G,
            N=report.N, L=report.L))
    report.passed = report.final_output_distance <= report.bound or steps == 0
    return report


def _loss_with_weights(model: Model, names, flat: np.ndarray, images, labels):
    params = model.trainable_params()
    pos = 0
    for name in names:
        p = params[name]
        p[...] = flat[pos:pos + p.size].reshape(p.shape).astype(p.dtype)
        pos += p.size
    return _loss_on(model, images, labels)
