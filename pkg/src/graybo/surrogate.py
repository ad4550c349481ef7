"""Deep-kernel Gaussian-process loss predictor.

A neural feature extractor maps (encoded hyperparameters, budget fraction,
dataset meta-features, model embedding, learning-curve embedding) to a
32-wide latent vector; a Matern-5/2 kernel over that latent space with a
learned noise level gives an exact GP posterior over validation losses.
Kernel parameters and network weights train jointly on the negative log
marginal likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .core import EncodedPipeline, History, MetaFeatures, SearchSpace
from .neural import Adam, CurveEncoder, Dense, MLP, NonFiniteGradientError, ParamBlock

SQRT5 = math.sqrt(5.0)
NOISE_FLOOR = 1e-8
JITTER_LADDER = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
LATENT_WIDTH = 32
MODEL_EMBED_WIDTH = 4
CURVE_EMBED_WIDTH = 8
HIDDEN_WIDTHS = (32, 32)


class SingularKernelError(RuntimeError):
    """Raised when the training Gram matrix stays indefinite after jitter escalation."""


def scale_meta(meta: MetaFeatures) -> np.ndarray:
    """Bound the four integer meta-features to O(1) inputs."""
    return np.array(
        [
            math.log10(meta.n_samples) / 6.0,
            math.log10(meta.resolution) / 3.0,
            meta.channels / 4.0,
            math.log10(meta.classes) / 3.0,
        ]
    )


def build_curve(n_epochs: int, observed: Sequence[tuple[int, float]]) -> np.ndarray:
    """Zero-padded loss curve of length ``n_epochs`` from (epoch, loss) pairs."""
    curve = np.zeros(n_epochs)
    for epoch, loss in observed:
        if not 1 <= epoch <= n_epochs:
            raise ValueError(f"curve epoch {epoch} outside [1, {n_epochs}]")
        curve[epoch - 1] = loss
    return curve


@dataclass(frozen=True)
class PredictorContext:
    """Static per-run quantities shared by both predictors."""

    hp_width: int
    n_models: int
    n_epochs: int
    dt: int
    meta: MetaFeatures

    @classmethod
    def from_space(cls, space: SearchSpace, meta: MetaFeatures, n_epochs: int, dt: int) -> "PredictorContext":
        return cls(
            hp_width=space.hp_width,
            n_models=len(space.hub),
            n_epochs=n_epochs,
            dt=dt,
            meta=meta,
        )


@dataclass
class PredictorInputs:
    """Batched network inputs: one row per (pipeline, epoch) query."""

    hp: np.ndarray  # (B, hp_width)
    model_onehot: np.ndarray  # (B, n_models)
    curves: np.ndarray  # (B, n_epochs)
    tfrac: np.ndarray  # (B,)
    meta: np.ndarray  # (B, 4), already scaled

    def __len__(self) -> int:
        return self.hp.shape[0]


def assemble_inputs(
    ctx: PredictorContext,
    encodings: Sequence[EncodedPipeline],
    curves: Sequence[np.ndarray],
    epochs: Sequence[int],
) -> PredictorInputs:
    n = len(encodings)
    hp = np.stack([e.features[: ctx.hp_width] for e in encodings]) if n else np.zeros((0, ctx.hp_width))
    onehot = np.stack([e.features[ctx.hp_width :] for e in encodings]) if n else np.zeros((0, ctx.n_models))
    cm = np.stack(curves) if n else np.zeros((0, ctx.n_epochs))
    tfrac = np.asarray(epochs, dtype=np.float64) / ctx.n_epochs
    meta = np.tile(scale_meta(ctx.meta), (n, 1))
    return PredictorInputs(hp=hp, model_onehot=onehot, curves=cm, tfrac=tfrac, meta=meta)


def history_inputs(
    h: History,
    encodings: Mapping[int, EncodedPipeline],
    ctx: PredictorContext,
    window: int | None = None,
) -> tuple[PredictorInputs, np.ndarray, np.ndarray]:
    """Training rows for the predictors: one per observation, with the
    pipeline's earlier observed losses as the curve input and the
    observation's loss / cumulative cost as targets.

    ``window`` keeps only the most recent observations.
    """
    obs = list(h.observations)
    if window is not None and len(obs) > window:
        obs = obs[-window:]
    encs, curves, epochs = [], [], []
    for o in obs:
        encs.append(encodings[o.pipeline_id])
        pairs = [(p.epoch, p.val_loss) for p in h.of_pipeline(o.pipeline_id) if p.epoch < o.epoch]
        curves.append(build_curve(ctx.n_epochs, pairs))
        epochs.append(o.epoch)
    inputs = assemble_inputs(ctx, encs, curves, epochs)
    y = np.array([o.val_loss for o in obs])
    costs = np.array([o.cum_cost for o in obs])
    return inputs, y, costs


def candidate_inputs(
    pids: Sequence[int],
    h: History,
    encodings: Mapping[int, EncodedPipeline],
    ctx: PredictorContext,
) -> tuple[PredictorInputs, np.ndarray]:
    """Query rows at each candidate's next epoch, with everything observed
    so far as its curve input.  Returns inputs plus the query epochs."""
    encs, curves, epochs = [], [], []
    for pid in pids:
        encs.append(encodings[pid])
        pairs = [(o.epoch, o.val_loss) for o in h.of_pipeline(pid)]
        curves.append(build_curve(ctx.n_epochs, pairs))
        epochs.append(h.max_epoch(pid) + ctx.dt)
    taus = np.asarray(epochs, dtype=np.int64)
    return assemble_inputs(ctx, encs, curves, list(epochs)), taus


class FeatureExtractor:
    """Model embedding + curve encoder + trunk MLP -> 32-wide latent."""

    def __init__(self, ctx: PredictorContext, rng: np.random.Generator, name: str = "fx") -> None:
        self.ctx = ctx
        self.model_embed = Dense(f"{name}.model_embed", ctx.n_models, MODEL_EMBED_WIDTH, rng)
        self.curve_encoder = CurveEncoder(f"{name}.curve", ctx.n_epochs, rng)
        trunk_in = ctx.hp_width + 1 + 4 + MODEL_EMBED_WIDTH + CURVE_EMBED_WIDTH
        self.trunk = MLP(
            f"{name}.trunk",
            (trunk_in, *HIDDEN_WIDTHS, LATENT_WIDTH),
            rng,
            bias_pattern=(True, False, False),
        )

    def params(self) -> list[ParamBlock]:
        return self.model_embed.params() + self.curve_encoder.params() + self.trunk.params()

    def forward(self, inputs: PredictorInputs, flat1: np.ndarray | None = None):
        e_model, c_model = self.model_embed.forward(inputs.model_onehot)
        e_curve, c_curve = self.curve_encoder.forward(inputs.curves, flat1=flat1)
        x = np.concatenate(
            [inputs.hp, inputs.tfrac[:, None], inputs.meta, e_model, e_curve], axis=1
        )
        z, c_trunk = self.trunk.forward(x)
        return z, (c_model, c_curve, c_trunk)

    def backward(self, trace, dz: np.ndarray) -> None:
        c_model, c_curve, c_trunk = trace
        dx = self.trunk.backward(c_trunk, dz)
        hp_w = self.ctx.hp_width
        off = hp_w + 1 + 4
        d_model = dx[:, off : off + MODEL_EMBED_WIDTH]
        d_curve = dx[:, off + MODEL_EMBED_WIDTH :]
        self.model_embed.backward(c_model, d_model)
        self.curve_encoder.backward(c_curve, d_curve)


class KernelParams:
    """Log-parameterized Matern-5/2 lengthscale, signal variance, and noise."""

    def __init__(
        self,
        log_lengthscale: float = 0.0,
        log_signal_var: float = 0.0,
        log_noise_var: float = math.log(1e-1),
    ) -> None:
        self.log_ls = ParamBlock("kernel.log_ls", np.array(log_lengthscale))
        self.log_sv = ParamBlock("kernel.log_sv", np.array(log_signal_var))
        self.log_nv = ParamBlock("kernel.log_nv", np.array(log_noise_var))

    def params(self) -> list[ParamBlock]:
        return [self.log_ls, self.log_sv, self.log_nv]

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_ls.values))

    @property
    def signal_var(self) -> float:
        return float(np.exp(self.log_sv.values))

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_nv.values)) + NOISE_FLOOR


def matern52(z1: np.ndarray, z2: np.ndarray, kernel: KernelParams) -> float:
    """Matern-5/2 covariance between two latent vectors."""
    z1, z2 = np.asarray(z1), np.asarray(z2)
    if z1.shape != z2.shape:
        raise ValueError("latent vectors must share a width")
    r = float(np.linalg.norm(z1 - z2))
    u = SQRT5 * r / kernel.lengthscale
    return kernel.signal_var * (1.0 + u + u * u / 3.0) * math.exp(-u)


def _pairwise_sqdist(Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
    s1 = (Z1 * Z1).sum(axis=1)[:, None]
    s2 = (Z2 * Z2).sum(axis=1)[None, :]
    return np.maximum(s1 + s2 - 2.0 * (Z1 @ Z2.T), 0.0)


def kernel_matrix(Z1: np.ndarray, Z2: np.ndarray, kernel: KernelParams) -> np.ndarray:
    r = np.sqrt(_pairwise_sqdist(Z1, Z2))
    u = SQRT5 * r / kernel.lengthscale
    return kernel.signal_var * (1.0 + u + u * u / 3.0) * np.exp(-u)


def _chol_with_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise SingularKernelError(
        f"Gram matrix of size {A.shape[0]} not positive definite after jitter escalation"
    )


@dataclass
class Posterior:
    """GP posterior in the original loss scale."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(np.diag(self.cov), 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass
class FitReport:
    initial_nll: float
    final_nll: float
    steps: int
    rolled_back: bool = False


class DeepKernelGP:
    """Feature extractor + Matern kernel + target normalization."""

    def __init__(self, ctx: PredictorContext, rng: np.random.Generator) -> None:
        self.ctx = ctx
        self.fx = FeatureExtractor(ctx, rng, name="surrogate")
        self.kernel = KernelParams()
        self.y_mean = 0.0
        self.y_std = 1.0

    def params(self) -> list[ParamBlock]:
        return self.fx.params() + self.kernel.params()

    def set_normalization(self, y: np.ndarray) -> None:
        y = np.asarray(y, dtype=np.float64)
        mean = float(y.mean()) if y.size else 0.0
        std = float(y.std()) if y.size else 0.0
        if not np.isfinite(std) or std <= 0.0:
            std = 1.0
        if not np.isfinite(mean):
            mean = 0.0
        self.y_mean = mean
        self.y_std = std

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def features_batch(self, inputs: PredictorInputs) -> np.ndarray:
        z, _ = self.fx.forward(inputs)
        return z

    def features(
        self,
        enc: EncodedPipeline,
        observed: Sequence[tuple[int, float]],
        t: int,
        ctx: PredictorContext | None = None,
    ) -> np.ndarray:
        """Latent vector for one pipeline query at epoch ``t``."""
        ctx = ctx or self.ctx
        if not 1 <= t <= ctx.n_epochs:
            raise ValueError(f"epoch {t} outside [1, {ctx.n_epochs}]")
        inputs = assemble_inputs(ctx, [enc], [build_curve(ctx.n_epochs, observed)], [t])
        return self.features_batch(inputs)[0]

    # -- GP math ------------------------------------------------------------

    def posterior(self, Z_train: np.ndarray, y_train: np.ndarray, Z_test: np.ndarray) -> Posterior:
        """Exact posterior over the test latents, de-normalized on return.

        Noise enters only the training Gram diagonal; with no training data
        the prior is returned (mean 0, variance signal + noise, both in the
        normalized scale).
        """
        Z_test = np.atleast_2d(Z_test)
        t = Z_test.shape[0]
        noise = self.kernel.noise_var
        if Z_train is None or len(Z_train) == 0:
            cov_n = kernel_matrix(Z_test, Z_test, self.kernel) + noise * np.eye(t)
            mean = np.full(t, self.y_mean)
            return Posterior(mean=mean, cov=cov_n * self.y_std**2)
        Z_train = np.atleast_2d(Z_train)
        y_n = self.normalize(y_train)
        A = kernel_matrix(Z_train, Z_train, self.kernel) + noise * np.eye(len(Z_train))
        L, _ = _chol_with_jitter(A)
        Ks = kernel_matrix(Z_train, Z_test, self.kernel)
        Kss = kernel_matrix(Z_test, Z_test, self.kernel)
        V = solve_triangular(L, Ks, lower=True)
        w = solve_triangular(L, y_n, lower=True)
        mean_n = V.T @ w
        cov_n = Kss - V.T @ V
        cov_n = 0.5 * (cov_n + cov_n.T)
        d = np.arange(t)
        cov_n[d, d] = np.maximum(cov_n[d, d], 0.0)
        return Posterior(mean=self.y_mean + self.y_std * mean_n, cov=cov_n * self.y_std**2)

    def nll(self, Z_train: np.ndarray, y_train: np.ndarray) -> float:
        """Negative log marginal likelihood of the normalized targets.

        Non-finite features or kernel values yield +inf (divergence signal
        for the fitting loop) rather than an exception."""
        y_n = self.normalize(y_train)
        n = len(y_n)
        if not np.all(np.isfinite(Z_train)):
            return math.inf
        A = kernel_matrix(Z_train, Z_train, self.kernel) + self.kernel.noise_var * np.eye(n)
        if not np.all(np.isfinite(A)):
            return math.inf
        L, _ = _chol_with_jitter(A)
        w = solve_triangular(L, y_n, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return 0.5 * float(w @ w) + 0.5 * logdet + 0.5 * n * math.log(2.0 * math.pi)

    def nll_with_grads(
        self, inputs: PredictorInputs, y: np.ndarray, flat1: np.ndarray | None = None
    ) -> float:
        """Full-batch NLL; accumulates gradients into every parameter block
        (kernel parameters analytically, network weights by backprop)."""
        z, trace = self.fx.forward(inputs, flat1=flat1)
        y_n = self.normalize(y)
        n = len(y_n)
        if not np.all(np.isfinite(z)):
            return math.inf
        ls = self.kernel.lengthscale
        sv = self.kernel.signal_var
        noise = self.kernel.noise_var
        r = np.sqrt(_pairwise_sqdist(z, z))
        u = SQRT5 * r / ls
        e = np.exp(-u)
        K = sv * (1.0 + u + u * u / 3.0) * e
        A = K + noise * np.eye(n)
        if not np.all(np.isfinite(A)):
            return math.inf
        L, _ = _chol_with_jitter(A)
        w = solve_triangular(L, y_n, lower=True)
        alpha = solve_triangular(L.T, w, lower=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        value = 0.5 * float(w @ w) + 0.5 * logdet + 0.5 * n * math.log(2.0 * math.pi)

        Linv = solve_triangular(L, np.eye(n), lower=True)
        Ainv = Linv.T @ Linv
        G = 0.5 * (Ainv - np.outer(alpha, alpha))

        self.kernel.log_sv.grad += np.sum(G * K)
        self.kernel.log_ls.grad += np.sum(G * (sv * (u * u / 3.0) * (1.0 + u) * e))
        self.kernel.log_nv.grad += np.trace(G) * (noise - NOISE_FLOOR)

        # dK/dz_i = c_ij (z_i - z_j) with c finite at r = 0.
        C = -(5.0 * sv / (3.0 * ls * ls)) * (1.0 + u) * e
        W = G * C
        rowsum = W.sum(axis=1)
        dz = 2.0 * (rowsum[:, None] * z - W @ z)
        self.fx.backward(trace, dz)
        return value

    def fit(
        self,
        inputs: PredictorInputs,
        y: np.ndarray,
        steps: int = 100,
        lr: float = 1e-4,
    ) -> FitReport:
        """Full-batch Adam on the NLL, warm from current parameters.

        Target normalization is recomputed first.  The best parameters seen
        during the run (the initial ones included) are kept, so the final
        NLL never exceeds the initial one; a non-finite NLL rolls back to
        the pre-fit state.
        """
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            return FitReport(initial_nll=math.nan, final_nll=math.nan, steps=0)
        self.set_normalization(y)
        params = self.params()
        pre_fit = [p.values.copy() for p in params]
        adam = Adam(params, lr)
        best_val = math.inf
        best_state: list[np.ndarray] | None = None
        initial = math.nan
        flat1 = self.fx.curve_encoder.unroll(inputs.curves) if steps > 0 else None
        for step in range(steps):
            adam.zero_grad()
            val = self.nll_with_grads(inputs, y, flat1=flat1)
            if step == 0:
                initial = val
            if not math.isfinite(val):
                for p, saved in zip(params, pre_fit):
                    p.values[...] = saved
                return FitReport(initial_nll=initial, final_nll=initial, steps=step, rolled_back=True)
            if val < best_val:
                best_val = val
                best_state = [p.values.copy() for p in params]
            try:
                adam.step()
            except NonFiniteGradientError:
                for p, saved in zip(params, pre_fit):
                    p.values[...] = saved
                return FitReport(initial_nll=initial, final_nll=initial, steps=step, rolled_back=True)
        Z = self.features_batch(inputs)
        final = self.nll(Z, y)
        if not (math.isfinite(final) and final <= best_val):
            for p, saved in zip(params, best_state):
                p.values[...] = saved
            final = best_val
        return FitReport(initial_nll=initial, final_nll=final, steps=steps)

    # -- persistence ----------------------------------------------------------

    def kernel_dict(self) -> dict:
        return {
            "log_ls": float(self.kernel.log_ls.values),
            "log_sv": float(self.kernel.log_sv.values),
            "log_nv": float(self.kernel.log_nv.values),
        }

    def load_kernel_dict(self, payload: dict) -> None:
        self.kernel.log_ls.values[...] = payload["log_ls"]
        self.kernel.log_sv.values[...] = payload["log_sv"]
        self.kernel.log_nv.values[...] = payload["log_nv"]


def fit_on_history(
    gp: DeepKernelGP,
    h: History,
    encodings: Mapping[int, EncodedPipeline],
    ctx: PredictorContext,
    steps: int = 100,
    lr: float = 1e-4,
    window: int | None = None,
) -> FitReport:
    """Refit the surrogate on the current history (no-op when empty)."""
    if len(h) == 0:
        return FitReport(initial_nll=math.nan, final_nll=math.nan, steps=0)
    inputs, y, _ = history_inputs(h, encodings, ctx, window=window)
    return gp.fit(inputs, y, steps=steps, lr=lr)
