"""Trajectory denoising diffusion: variance schedule, forward noising, reverse
sampling with optional guidance, training, and partial diffusion from proposals.

The denoiser predicts the *clean* normalized action trajectory from a noisy
one, a step embedding, and the agent's context features. The reverse step then
mixes that prediction with the current noisy trajectory through the closed-form
posterior mean

    mu = sqrt(abar_{k-1}) * beta_k / (1 - abar_k) * tau0_hat
       + sqrt(alpha_k) * (1 - abar_{k-1}) / (1 - abar_k) * tau_k

with fixed per-step variance beta_k * (1 - abar_{k-1}) / (1 - abar_k).
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .dynamics import DEFAULT_LIMITS, Trajectory, rollout
from .net import Adam, Mlp, sinusoidal_embedding
from .scene import DecisionContext

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_NUM_SAMPLES = 20  # samples drawn per agent per replanning tick


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule with abar_0 := 1 so k = 0 is a clean pass-through."""

    K: int
    beta: np.ndarray  # (K,), index i holds beta_{i+1}
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def abar(self, k: int) -> float:
        if k == 0:
            return 1.0
        return float(self.alpha_bar[k - 1])

    def posterior_coeffs(self, k: int):
        """Coefficients (on tau0_hat, on tau_k) of the reverse-step mean."""
        if not 1 <= k <= self.K:
            raise ValueError(f"step {k} outside 1..{self.K}")
        abar_k = self.abar(k)
        abar_prev = self.abar(k - 1)
        denom = 1.0 - abar_k
        c0 = np.sqrt(abar_prev) * self.beta[k - 1] / denom
        ck = np.sqrt(self.alpha[k - 1]) * (1.0 - abar_prev) / denom
        return c0, ck

    def posterior_variance(self, k: int) -> float:
        if not 1 <= k <= self.K:
            raise ValueError(f"step {k} outside 1..{self.K}")
        return float(self.beta[k - 1] * (1.0 - self.abar(k - 1)) / (1.0 - self.abar(k)))


def make_cosine_schedule(K: int, beta_min: float = 1e-4, beta_max: float = 0.05,
                         s: float = 0.008) -> DiffusionSchedule:
    """Cosine variance schedule with betas bounded to [beta_min, beta_max].

    abar_k follows g(k/K)/g(0) with g(u) = cos^2((u + s)/(1 + s) * pi/2); the
    per-step betas derived from it are clipped into the configured bounds, the
    first beta is pinned to the lower bound and the last saturates at the upper
    one, and abar is recomputed from the bounded betas.
    """
    if K < 2:
        raise ValueError("schedule needs K >= 2")
    ks = np.arange(K + 1, dtype=float)
    g = np.cos((ks / K + s) / (1.0 + s) * np.pi / 2.0) ** 2
    abar_raw = g / g[0]
    beta = 1.0 - abar_raw[1:] / abar_raw[:-1]
    beta = np.clip(beta, beta_min, beta_max)
    beta[0] = beta_min
    alpha = 1.0 - beta
    return DiffusionSchedule(K=K, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def add_noise(tau0: np.ndarray, k: int, eps: np.ndarray,
              sched: DiffusionSchedule) -> np.ndarray:
    """Forward-noise clean actions to level k: sqrt(abar_k) tau0 + sqrt(1-abar_k) eps."""
    if not 0 <= k <= sched.K:
        raise ValueError(f"step {k} outside 0..{sched.K}")
    abar = sched.abar(k)
    return np.sqrt(abar) * np.asarray(tau0, dtype=float) + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=float)


def posterior_mean(tau_k: np.ndarray, tau0_hat: np.ndarray, k: int,
                   sched: DiffusionSchedule) -> np.ndarray:
    c0, ck = sched.posterior_coeffs(k)
    return c0 * np.asarray(tau0_hat, dtype=float) + ck * np.asarray(tau_k, dtype=float)


@dataclass
class TrainingCorpus:
    """Pairs of (context feature vector, clean action trajectory)."""

    features: np.ndarray  # (N, D)
    actions: np.ndarray  # (N, T, 2)
    dt: float

    def __post_init__(self):
        if len(self.features) != len(self.actions):
            raise ValueError("features/actions length mismatch")
        if len(self.features) == 0:
            raise ValueError("corpus is empty")


class TrajectoryDenoiser(BaseEstimator):
    """Action-trajectory denoiser with an estimator-style fit/sample API.

    Parameters are stored verbatim (scikit-learn convention); everything
    learned during `fit` lives in trailing-underscore attributes. Normalization
    statistics for actions and context features are estimated from the corpus
    and serialized with the model.
    """

    def __init__(self, horizon: int = 32, dt: float = 0.1, k_steps: int = 100,
                 hidden_width: int = 256, n_hidden_layers: int = 3,
                 step_embed_dim: int = 32, learning_rate: float = 1e-3,
                 n_iterations: int = 4000, batch_size: int = 128,
                 seed: int = 0) -> None:
        self.horizon = horizon
        self.dt = dt
        self.k_steps = k_steps
        self.hidden_width = hidden_width
        self.n_hidden_layers = n_hidden_layers
        self.step_embed_dim = step_embed_dim
        self.learning_rate = learning_rate
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.seed = seed

    # -- normalization ------------------------------------------------------

    def normalize_actions(self, actions: np.ndarray) -> np.ndarray:
        return (actions - self.action_mean_) / self.action_std_

    def denormalize_actions(self, z: np.ndarray) -> np.ndarray:
        return z * self.action_std_ + self.action_mean_

    def normalize_features(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.feature_mean_) / self.feature_std_

    # -- training -----------------------------------------------------------

    def fit(self, corpus: TrainingCorpus) -> "TrajectoryDenoiser":
        """Train the denoiser to regress clean trajectories from noised ones."""
        if corpus.actions.shape[1] != self.horizon:
            raise ValueError(
                f"corpus horizon {corpus.actions.shape[1]} != model horizon {self.horizon}")
        rng = np.random.default_rng(self.seed)
        acts = np.asarray(corpus.actions, dtype=float)
        feats = np.asarray(corpus.features, dtype=float)
        n, T, _ = acts.shape

        self.action_mean_ = acts.reshape(-1, 2).mean(axis=0)
        self.action_std_ = np.maximum(acts.reshape(-1, 2).std(axis=0), 1e-6)
        self.feature_mean_ = feats.mean(axis=0)
        self.feature_std_ = np.maximum(feats.std(axis=0), 1e-6)
        self.schedule_ = make_cosine_schedule(self.k_steps)
        self.feature_dim_ = feats.shape[1]

        flat_dim = T * 2
        in_dim = flat_dim + self.step_embed_dim + self.feature_dim_
        sizes = [in_dim] + [self.hidden_width] * self.n_hidden_layers + [flat_dim]
        self.net_ = Mlp(sizes, rng)
        opt = Adam(self.net_.parameters(), lr=self.learning_rate)

        z_all = self.normalize_actions(acts).reshape(n, flat_dim)
        f_all = self.normalize_features(feats)
        sqrt_ab = np.sqrt(self.schedule_.alpha_bar)
        sqrt_1mab = np.sqrt(1.0 - self.schedule_.alpha_bar)

        losses = []
        for it in range(self.n_iterations):
            idx = rng.integers(0, n, self.batch_size)
            k = rng.integers(1, self.k_steps + 1, self.batch_size)
            eps = rng.standard_normal((self.batch_size, flat_dim))
            tau0 = z_all[idx]
            tau_k = sqrt_ab[k - 1, None] * tau0 + sqrt_1mab[k - 1, None] * eps
            x = np.concatenate(
                [tau_k, sinusoidal_embedding(k, self.step_embed_dim), f_all[idx]], axis=1)
            out, cache = self.net_.forward(x)
            diff = out - tau0
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at iteration {it}")
            losses.append(loss)
            dout = (2.0 / diff.size) * diff
            dw, db = self.net_.backward(cache, dout)
            opt.update(self.net_.parameters(), dw + db)

        self.loss_history_ = np.asarray(losses)
        self.final_loss_ = float(np.mean(losses[-100:]))
        self._set_prediction_bounds()
        logger.info("trained denoiser: final loss %.5f", self.final_loss_)
        return self

    def _set_prediction_bounds(self) -> None:
        # clean-action data always lies within the physical action limits, so
        # clean predictions outside them are model error; clamping keeps the
        # reverse chain stable on out-of-distribution contexts
        phys = np.array([DEFAULT_LIMITS.accel_max, DEFAULT_LIMITS.yaw_rate_max])
        self._pred_lo = np.tile((-phys - self.action_mean_) / self.action_std_, self.horizon)
        self._pred_hi = np.tile((phys - self.action_mean_) / self.action_std_, self.horizon)

    # -- inference ----------------------------------------------------------

    def predict_clean(self, z: np.ndarray, k: int, feats_norm: np.ndarray) -> np.ndarray:
        """One denoiser evaluation on (R, T*2) normalized noisy actions."""
        emb = sinusoidal_embedding(np.full(len(z), float(k)), self.step_embed_dim)
        x = np.concatenate([z, emb, feats_norm], axis=1)
        return self.net_(x)

    def denoise_rows(self, z: np.ndarray, start_k: np.ndarray, feats_norm: np.ndarray,
                     rng: np.random.Generator, perturb=None) -> np.ndarray:
        """Run the reverse chain on a batch of rows with per-row start levels.

        Rows stay frozen until the loop reaches their start level, which lets
        partial-diffusion rows share the loop with full-chain rows. `perturb`,
        when given, maps (actions_physical (R', T, 2), k, row_indices) to
        perturbed actions and is applied to the clean prediction each step.
        """
        z = np.array(z, dtype=float)
        start_k = np.asarray(start_k)
        failed = np.zeros(len(z), dtype=bool)
        T = self.horizon
        for k in range(self.k_steps, 0, -1):
            active = (start_k >= k) & ~failed
            if not active.any():
                continue
            rows = np.where(active)[0]
            tau0 = self.predict_clean(z[rows], k, feats_norm[rows])
            finite = np.all(np.isfinite(tau0), axis=1)
            if not finite.all():
                failed[rows[~finite]] = True
                logger.warning("non-finite denoiser output at step %d for %d rows",
                               k, int((~finite).sum()))
                rows = rows[finite]
                if len(rows) == 0:
                    continue
                tau0 = tau0[finite]
            tau0 = np.minimum(np.maximum(tau0, self._pred_lo), self._pred_hi)
            if perturb is not None:
                phys = self.denormalize_actions(tau0.reshape(-1, T, 2))
                out = perturb(phys, k, rows)
                if out is not phys:  # unperturbed output stays bit-identical
                    tau0 = self.normalize_actions(out).reshape(-1, T * 2)
            mu = posterior_mean(z[rows], tau0, k, self.schedule_)
            if k > 1:
                sigma = np.sqrt(self.schedule_.posterior_variance(k))
                mu = mu + sigma * rng.standard_normal(mu.shape)
            z[rows] = mu
        return z, failed

    def _rows_to_trajectories(self, z: np.ndarray, failed: np.ndarray,
                              context: DecisionContext):
        actions = self.denormalize_actions(z.reshape(-1, self.horizon, 2))
        actions[failed] = 0.0  # failed samples fall back to a coasting plan
        return [rollout(context.state, a, self.dt) for a in actions]

    def sample(self, context: DecisionContext, guidance=None,
               num_samples: int = DEFAULT_NUM_SAMPLES,
               rng: Optional[np.random.Generator] = None):
        """Draw guided samples for one agent.

        Returns (trajectories, costs): `costs` holds each sample's guidance
        cost when the guidance hook provides one, else zeros.
        """
        if num_samples < 1:
            raise ValueError("need at least one sample")
        rng = rng if rng is not None else np.random.default_rng()
        feats = np.tile(self.normalize_features(context.feature_vector()), (num_samples, 1))
        z = rng.standard_normal((num_samples, self.horizon * 2))
        z, failed = self.denoise_rows(z, np.full(num_samples, self.k_steps), feats, rng,
                                      perturb=_wrap_perturb(guidance))
        trajs = self._rows_to_trajectories(z, failed, context)
        costs = _final_costs(guidance, trajs, num_samples)
        costs[failed] = np.inf
        return trajs, costs

    def partial_sample(self, context: DecisionContext, proposal: Trajectory,
                       gamma: float, guidance=None,
                       num_samples: int = DEFAULT_NUM_SAMPLES,
                       rng: Optional[np.random.Generator] = None):
        """Noise a trajectory proposal to level k_p = round(gamma * K) and
        denoise from there; gamma = 0 returns the proposal unchanged and
        gamma = 1 matches `sample` draw-for-draw.
        """
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma {gamma} outside [0, 1]")
        if proposal.horizon != self.horizon:
            raise ValueError("proposal horizon mismatch")
        rng = rng if rng is not None else np.random.default_rng()
        k_p = int(round(gamma * self.k_steps))
        if k_p == 0:
            trajs = [proposal] * num_samples
            return trajs, _final_costs(guidance, trajs, num_samples)
        feats = np.tile(self.normalize_features(context.feature_vector()), (num_samples, 1))
        if k_p == self.k_steps:
            # full diffusion: the chain starts from pure noise, as in sample()
            z = rng.standard_normal((num_samples, self.horizon * 2))
        else:
            z0 = np.tile(self.normalize_actions(proposal.actions).reshape(1, -1),
                         (num_samples, 1))
            eps = rng.standard_normal((num_samples, self.horizon * 2))
            z = add_noise(z0, k_p, eps, self.schedule_)
        z, failed = self.denoise_rows(z, np.full(num_samples, k_p), feats, rng,
                                      perturb=_wrap_perturb(guidance))
        trajs = self._rows_to_trajectories(z, failed, context)
        costs = _final_costs(guidance, trajs, num_samples)
        costs[failed] = np.inf
        return trajs, costs

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "format_version": MODEL_FORMAT_VERSION,
            "params": self.get_params(),
            "feature_dim": int(self.feature_dim_),
            "final_loss": self.final_loss_,
        }
        arrays = {
            "action_mean": self.action_mean_,
            "action_std": self.action_std_,
            "feature_mean": self.feature_mean_,
            "feature_std": self.feature_std_,
            "beta": self.schedule_.beta,
        }
        for i, w in enumerate(self.net_.weights):
            arrays[f"w{i}"] = w
        for i, b in enumerate(self.net_.biases):
            arrays[f"b{i}"] = b
        buf = io.BytesIO()
        np.savez(buf, meta=json.dumps(meta), **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "TrajectoryDenoiser":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta["format_version"] != MODEL_FORMAT_VERSION:
                raise ValueError(f"unsupported model format {meta['format_version']}")
            model = cls(**meta["params"])
            model.feature_dim_ = meta["feature_dim"]
            model.final_loss_ = meta["final_loss"]
            model.action_mean_ = data["action_mean"]
            model.action_std_ = data["action_std"]
            model.feature_mean_ = data["feature_mean"]
            model.feature_std_ = data["feature_std"]
            beta = data["beta"]
            if beta.shape != (model.k_steps,):
                raise ValueError("schedule shape mismatch")
            alpha = 1.0 - beta
            model.schedule_ = DiffusionSchedule(
                K=model.k_steps, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))
            flat = model.horizon * 2
            sizes = ([flat + model.step_embed_dim + model.feature_dim_]
                     + [model.hidden_width] * model.n_hidden_layers + [flat])
            n_layers = len(sizes) - 1
            weights, biases = [], []
            for i in range(n_layers):
                w = data[f"w{i}"]
                b = data[f"b{i}"]
                if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                    raise ValueError(f"layer {i} shape mismatch")
                weights.append(w)
                biases.append(b)
            model.net_ = Mlp.__new__(Mlp)
            model.net_.sizes = sizes
            model.net_.weights = weights
            model.net_.biases = biases
        model._set_prediction_bounds()
        return model


def _wrap_perturb(guidance):
    if guidance is None:
        return None
    if hasattr(guidance, "perturb"):
        return guidance.perturb
    # bare callables take (actions, k)
    return lambda actions, k, rows: guidance(actions, k)


def _final_costs(guidance, trajs, num_samples: int) -> np.ndarray:
    if guidance is not None and hasattr(guidance, "final_costs"):
        return np.asarray(guidance.final_costs(trajs), dtype=float)
    return np.zeros(num_samples)


def train_denoiser(corpus: TrainingCorpus, **hyperparams) -> TrajectoryDenoiser:
    """Convenience wrapper: construct and fit a denoiser on the corpus."""
    return TrajectoryDenoiser(**hyperparams).fit(corpus)
