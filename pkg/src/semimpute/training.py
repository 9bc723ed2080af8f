"""Composite loss, analytic gradients, Adam, and the imputation pipeline.

Training alternates refinement and parameter updates: each epoch the current
imputations pass through attention, the composite loss is evaluated on the
merged matrix, and the attention parameters take one Adam step.  Refined
imputations are carried into the next epoch.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .attention import AttentionParams, attention_forward, init_params
from .dataset import (
    CONTINUOUS,
    Dataset,
    apply_normalization,
    denormalize,
    encode_ordinal,
    normalize,
    pairwise_stats,
    snap_ordinals,
)
from .errors import InputError, NumericalError
from .fiml import EmConfig, MvnParams, conditional_impute, em_fit
from .missingness import plan_mcar
from .rng import derive_seed
from .sem import SemSpec, fit_paths_fiml, implied_moments

MODE_BENCHMARK = "benchmark"
MODE_SELF_SUPERVISED = "self_supervised"

# Convergence is judged on the total loss across a window this many epochs
# wide; shorter histories never terminate early.
CONVERGENCE_WINDOW = 10


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1e-3

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InputError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 500
    rel_tol: float = 1e-5
    self_mask_rate: float = 0.1
    seed: int = 0
    mode: str = MODE_SELF_SUPERVISED

    def __post_init__(self):
        if self.lr <= 0:
            raise InputError("lr must be positive")
        if self.max_epochs < 1:
            raise InputError("max_epochs must be at least 1")
        if not 0.0 <= self.self_mask_rate < 1.0:
            raise InputError("self_mask_rate must lie in [0, 1)")
        if self.mode not in (MODE_BENCHMARK, MODE_SELF_SUPERVISED):
            raise InputError(f"unknown mode {self.mode!r}")


class GradientSet(NamedTuple):
    d_wq: np.ndarray
    d_wk: np.ndarray
    d_wv: np.ndarray


class LossParts(NamedTuple):
    total: float
    mse: float
    cov: float
    l1: float


class EpochRecord(NamedTuple):
    epoch: int
    total: float
    mse: float
    cov: float
    l1: float


@dataclass(frozen=True)
class LossState:
    """Everything one loss/gradient evaluation reads.

    ``x`` is the attention input (complete matrix); ``replace_mask`` marks
    the cells where the attention output overwrites ``x`` before the loss is
    taken; ``eval_mask`` selects the MSE cells; ``ref_cov`` overrides the
    covariance target (defaults to the ML covariance of ``reference``).
    """

    x: np.ndarray
    params: AttentionParams
    reference: np.ndarray
    eval_mask: np.ndarray
    replace_mask: np.ndarray
    weights: LossWeights
    ref_cov: np.ndarray | None = None

    def __post_init__(self):
        shape = np.asarray(self.x).shape
        for name in ("reference", "eval_mask", "replace_mask"):
            if np.asarray(getattr(self, name)).shape != shape:
                raise InputError(f"{name} must match the input shape {shape}")


def _ml_cov(m: np.ndarray) -> np.ndarray:
    centered = m - m.mean(axis=0)
    return centered.T @ centered / m.shape[0]


def _merged_output(state: LossState) -> np.ndarray:
    output, _ = attention_forward(state.x, state.params)
    return np.where(state.replace_mask, output, state.x)


def composite_loss(
    imputed: np.ndarray,
    reference: np.ndarray,
    eval_mask: np.ndarray,
    params: AttentionParams,
    w: LossWeights,
    ref_cov: np.ndarray | None = None,
) -> LossParts:
    """total = alpha * MSE(eval cells) + beta * ||Cov diff||_F + gamma * L1."""
    imputed = np.asarray(imputed, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    eval_mask = np.asarray(eval_mask, dtype=bool)
    if reference.shape != imputed.shape or eval_mask.shape != imputed.shape:
        raise InputError("imputed, reference, and eval_mask must share a shape")

    n_eval = int(eval_mask.sum())
    if n_eval == 0:
        _warnings.warn("empty evaluation mask; MSE term is 0", stacklevel=2)
        mse = 0.0
    else:
        diff = imputed[eval_mask] - reference[eval_mask]
        mse = float(np.mean(diff * diff))

    target = _ml_cov(reference) if ref_cov is None else np.asarray(ref_cov)
    cov = float(np.linalg.norm(_ml_cov(imputed) - target, "fro"))
    l1 = float(sum(np.abs(m).sum() for m in (params.wq, params.wk, params.wv)))
    total = w.alpha * mse + w.beta * cov + w.gamma * l1
    return LossParts(total=total, mse=mse, cov=cov, l1=l1)


def loss_from_state(state: LossState) -> LossParts:
    return composite_loss(
        _merged_output(state),
        state.reference,
        state.eval_mask,
        state.params,
        state.weights,
        ref_cov=state.ref_cov,
    )


def grad_composite(state: LossState) -> GradientSet:
    """Analytic gradient of the composite loss w.r.t. wq, wk, wv.

    Backpropagates through the merge, the covariance Frobenius norm, the
    row softmax, and the three projections; the L1 term contributes
    gamma * sign(theta) (0 at 0).
    """
    x = np.asarray(state.x, dtype=np.float64)
    p = state.params
    w = state.weights
    n = x.shape[0]

    q = x @ p.wq
    k = x @ p.wk
    v = x @ p.wv
    scale = 1.0 / np.sqrt(float(p.dk))
    a = _softmax_full(q @ k.T * scale)
    y = a @ v
    merged = np.where(state.replace_mask, y, x)

    g_merged = np.zeros_like(merged)
    n_eval = int(np.asarray(state.eval_mask).sum())
    if w.alpha != 0 and n_eval > 0:
        diff = np.where(state.eval_mask, merged - state.reference, 0.0)
        g_merged += w.alpha * 2.0 * diff / n_eval
    if w.beta != 0:
        target = (
            _ml_cov(np.asarray(state.reference, dtype=np.float64))
            if state.ref_cov is None
            else np.asarray(state.ref_cov)
        )
        d_cov = _ml_cov(merged) - target
        fro = float(np.linalg.norm(d_cov, "fro"))
        if fro > 0:
            centered = merged - merged.mean(axis=0)
            g_merged += w.beta * (2.0 / (n * fro)) * (centered @ d_cov)

    g_y = np.where(state.replace_mask, g_merged, 0.0)

    d_v = a.T @ g_y
    d_a = g_y @ v.T
    # Softmax backward per row: dS = A * (dA - rowsum(dA * A)).
    d_s = a * (d_a - np.sum(d_a * a, axis=1, keepdims=True))
    d_q = d_s @ k * scale
    d_k = d_s.T @ q * scale

    d_wq = x.T @ d_q + w.gamma * np.sign(p.wq)
    d_wk = x.T @ d_k + w.gamma * np.sign(p.wk)
    d_wv = x.T @ d_v + w.gamma * np.sign(p.wv)
    for name, g in (("wq", d_wq), ("wk", d_wk), ("wv", d_wv)):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return GradientSet(d_wq=d_wq, d_wk=d_wk, d_wv=d_wv)


def _softmax_full(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def finite_diff_grad(state: LossState, h: float) -> GradientSet:
    """Central-difference gradient oracle over every parameter coordinate."""
    if h <= 0:
        raise InputError("h must be positive")

    def total_at(params: AttentionParams) -> float:
        shifted = LossState(
            x=state.x,
            params=params,
            reference=state.reference,
            eval_mask=state.eval_mask,
            replace_mask=state.replace_mask,
            weights=state.weights,
            ref_cov=state.ref_cov,
        )
        return loss_from_state(shifted).total

    mats = {"wq": state.params.wq, "wk": state.params.wk, "wv": state.params.wv}
    grads = {}
    for name, mat in mats.items():
        g = np.zeros_like(mat)
        for idx in np.ndindex(mat.shape):
            bumped = {k: v.copy() for k, v in mats.items()}
            bumped[name][idx] = mat[idx] + h
            hi = total_at(AttentionParams(**bumped))
            bumped[name][idx] = mat[idx] - h
            lo = total_at(AttentionParams(**bumped))
            g[idx] = (hi - lo) / (2.0 * h)
        grads[name] = g
    return GradientSet(d_wq=grads["wq"], d_wk=grads["wk"], d_wv=grads["wv"])


@dataclass(frozen=True)
class AdamState:
    m_wq: np.ndarray
    v_wq: np.ndarray
    m_wk: np.ndarray
    v_wk: np.ndarray
    m_wv: np.ndarray
    v_wv: np.ndarray

    @classmethod
    def zeros(cls, params: AttentionParams) -> "AdamState":
        return cls(
            m_wq=np.zeros_like(params.wq),
            v_wq=np.zeros_like(params.wq),
            m_wk=np.zeros_like(params.wk),
            v_wk=np.zeros_like(params.wk),
            m_wv=np.zeros_like(params.wv),
            v_wv=np.zeros_like(params.wv),
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(
    params: AttentionParams,
    grads: GradientSet,
    state: AdamState,
    lr: float,
    t: int,
) -> tuple[AttentionParams, AdamState]:
    """One bias-corrected Adam update (step counter t starts at 1)."""
    if t < 1:
        raise InputError("Adam step counter t must be at least 1")

    def update(theta, g, m, v):
        m_new = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v_new = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m_new / (1.0 - ADAM_BETA1**t)
        v_hat = v_new / (1.0 - ADAM_BETA2**t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), m_new, v_new

    wq, m_wq, v_wq = update(params.wq, grads.d_wq, state.m_wq, state.v_wq)
    wk, m_wk, v_wk = update(params.wk, grads.d_wk, state.m_wk, state.v_wk)
    wv, m_wv, v_wv = update(params.wv, grads.d_wv, state.m_wv, state.v_wv)
    return (
        AttentionParams(wq=wq, wk=wk, wv=wv),
        AdamState(m_wq=m_wq, v_wq=v_wq, m_wk=m_wk, v_wk=v_wk, m_wv=m_wv, v_wv=v_wv),
    )


class TrainResult(NamedTuple):
    params: AttentionParams
    history: tuple[EpochRecord, ...]
    refined: Dataset
    provenance: np.ndarray


def _self_mask_matrix(ds: Dataset, rate: float, seed: int) -> np.ndarray:
    plan = plan_mcar((ds.n, ds.d), rate, seed, eligible=np.asarray(ds.mask))
    out = np.zeros((ds.n, ds.d), dtype=bool)
    for i, j in plan.cells:
        out[i, j] = True
    return out


def train(
    ds: Dataset,
    init: Dataset,
    truth: Dataset | None,
    cfg: TrainConfig = TrainConfig(),
    w: LossWeights = LossWeights(),
) -> TrainResult:
    """Optimize attention parameters over refinement epochs (full batch).

    Benchmark mode scores imputations against supplied truth at the missing
    cells; self-supervised mode re-hides a seeded fraction of observed cells
    each epoch and scores recovery of their known values.  Each epoch's
    refined matrix feeds the next epoch.
    """
    if init.values.shape != ds.values.shape:
        raise InputError("init must match the dataset shape")
    provenance = ~np.asarray(ds.mask)
    if cfg.mode == MODE_BENCHMARK:
        if truth is None:
            raise InputError("benchmark mode requires truth")
        if truth.values.shape != ds.values.shape:
            raise InputError("truth must match the dataset shape")
        if truth.n_missing() != 0:
            raise InputError("benchmark truth must be complete")
        truth_values = np.asarray(truth.values, dtype=np.float64)
        ref_cov = None
    else:
        if truth is not None:
            raise InputError("self-supervised mode takes no truth")
        truth_values = None
        ref_cov = pairwise_stats(ds).cov

    n, d = ds.values.shape
    observed_values = np.where(ds.mask, ds.values, 0.0)
    col_means = np.array(
        [ds.values[ds.mask[:, j], j].mean() if ds.mask[:, j].any() else 0.0 for j in range(d)]
    )

    params = init_params(d, cfg.seed)
    adam = AdamState.zeros(params)
    x = np.asarray(init.values, dtype=np.float64).copy()
    history: list[EpochRecord] = []

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.mode == MODE_SELF_SUPERVISED:
            epoch_seed = derive_seed(cfg.seed, epoch)
            self_mask = _self_mask_matrix(ds, cfg.self_mask_rate, epoch_seed)
            x_in = np.where(self_mask, col_means[None, :], x)
            eval_mask = self_mask
            reference = observed_values
            replace = provenance | self_mask
        else:
            x_in = x
            eval_mask = provenance
            reference = truth_values
            replace = provenance

        state = LossState(
            x=x_in,
            params=params,
            reference=reference,
            eval_mask=eval_mask,
            replace_mask=replace,
            weights=w,
            ref_cov=ref_cov,
        )
        output, _ = attention_forward(x_in, params)
        merged = np.where(replace, output, x_in)
        parts = composite_loss(
            merged, reference, eval_mask, params, w, ref_cov=ref_cov
        )
        for name, value in parts._asdict().items():
            if not np.isfinite(value):
                raise NumericalError(f"non-finite {name} loss at epoch {epoch}")
        history.append(EpochRecord(epoch, *parts))

        grads = grad_composite(state)
        params, adam = adam_step(params, grads, adam, cfg.lr, epoch)

        # Refined imputations (pre-update parameters) carry into next epoch.
        x = np.where(provenance, output, observed_values)

        if len(history) > CONVERGENCE_WINDOW:
            then = history[-1 - CONVERGENCE_WINDOW].total
            now = history[-1].total
            if abs(now - then) / max(abs(then), 1e-12) < cfg.rel_tol:
                break

    refined = ds.with_values(np.where(provenance, x, ds.values)).with_mask(ds.mask)
    return TrainResult(
        params=params,
        history=tuple(history),
        refined=refined,
        provenance=provenance,
    )


@dataclass(frozen=True)
class ImputeReport:
    provenance: np.ndarray
    n_imputed: int
    em_iterations: int
    em_loglik: float
    history: tuple[EpochRecord, ...]
    warnings: tuple[str, ...]

    @property
    def epochs(self) -> int:
        return len(self.history)


def impute(
    ds: Dataset,
    spec: SemSpec | None = None,
    cfg: TrainConfig = TrainConfig(),
    w: LossWeights = LossWeights(),
    truth: Dataset | None = None,
    em: EmConfig = EmConfig(),
    moments: str = "implied",
) -> tuple[Dataset, ImputeReport]:
    """Full pipeline: encode, normalize, estimate, train, refine, restore.

    ``moments`` picks the conditional-imputation moments when a path model
    is supplied: its implied moments ("implied") or the saturated EM
    moments ("saturated").  Observed cells come back bit-identical; imputed
    ordinal cells are snapped to valid levels.
    """
    if moments not in ("implied", "saturated"):
        raise InputError(f"moments must be 'implied' or 'saturated', got {moments!r}")
    provenance_full = ~np.asarray(ds.mask)
    if ds.n_missing() == 0:
        report = ImputeReport(
            provenance=provenance_full,
            n_imputed=0,
            em_iterations=0,
            em_loglik=float("nan"),
            history=(),
            warnings=("dataset complete; nothing to impute",),
        )
        return ds, report

    warnings: list[str] = []
    encoded = encode_ordinal(ds)
    norm = normalize(encoded)

    if spec is not None:
        fit = fit_paths_fiml(spec, norm, em)
        warnings.extend(fit.warnings)
        em_iters = fit.em_iterations
        em_ll = fit.loglik
        if moments == "implied":
            mu_i, sigma_i = implied_moments(fit.model)
            init_params_mvn = MvnParams(mu_i, _nearest_pd(sigma_i))
        else:
            init_params_mvn = fit.params
    else:
        res = em_fit(norm, em)
        warnings.extend(res.warnings)
        em_iters = res.iterations
        em_ll = res.loglik
        init_params_mvn = res.params

    filled, provenance = conditional_impute(init_params_mvn, norm)

    truth_norm = None
    if truth is not None:
        if truth.values.shape != ds.values.shape:
            raise InputError("truth must match the dataset shape")
        truth_enc = encode_ordinal(truth)
        truth_norm = apply_normalization(truth_enc, norm.normalization)

    result = train(norm, filled, truth_norm, cfg, w)

    final_output, _ = attention_forward(result.refined.values, result.params)
    final_norm = np.where(provenance, final_output, norm.values)
    final_ds = norm.with_values(final_norm)
    restored = denormalize(final_ds)

    # Round-trip sanity: observed cells must come back within 1e-9 before
    # they are overwritten with the exact inputs.
    obs = np.asarray(ds.mask)
    drift = np.abs(restored.values[obs] - encoded.values[obs])
    if drift.size and float(drift.max()) > 1e-9:
        raise NumericalError("normalization round-trip exceeded 1e-9 on observed cells")

    final_values = np.where(obs, ds.values, restored.values)
    out = Dataset(
        values=final_values,
        mask=np.ones_like(obs, dtype=bool),
        specs=ds.specs,
    )
    out = snap_ordinals(out, provenance)

    report = ImputeReport(
        provenance=provenance,
        n_imputed=int(provenance.sum()),
        em_iterations=em_iters,
        em_loglik=em_ll,
        history=result.history,
        warnings=tuple(warnings),
    )
    return out, report


def _nearest_pd(sigma: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(sigma)
        return sigma
    except np.linalg.LinAlgError:
        return sigma + 1e-10 * np.eye(sigma.shape[0])
