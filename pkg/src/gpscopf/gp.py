"""Exact Gaussian-process regression for the rotor-angle growth rate.

Inputs are the 4-vector (delta0, omega0, vm, va); the target is the fitted
envelope rate. Squared-exponential kernel with automatic relevance
determination, constant prior mean equal to the training-target mean,
hyperparameters from multi-start quasi-Newton ascent of the marginal
log-likelihood over log-parameters. Inputs are affinely normalized per
dimension; zero-variance dimensions (the initial rotor speed is constant
by construction) map to 0 and their lengthscales are frozen.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.optimize as sopt

from .errors import ModelIOError

log = logging.getLogger(__name__)

N_DIMS = 4
MODEL_VERSION = 1
JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class Hyperparams:
    """Kernel and noise parameters, stored as logs for unconstrained search."""

    log_signal_var: float
    log_lengthscales: tuple  # one per input dimension
    log_noise_var: float

    @property
    def signal_var(self):
        return float(np.exp(self.log_signal_var))

    @property
    def lengthscales(self):
        return np.exp(np.asarray(self.log_lengthscales, dtype=float))

    @property
    def noise_var(self):
        return float(np.exp(self.log_noise_var))


@dataclass
class GpModel:
    gen_id: int
    x_train: np.ndarray  # N x 4, raw units
    y: np.ndarray  # N
    mean_offset: float
    hyper: Hyperparams
    norm_center: np.ndarray  # 4
    norm_scale: np.ndarray  # 4, 1.0 for frozen (zero-variance) dims
    frozen_dims: np.ndarray  # bool, 4
    chol: np.ndarray = field(repr=False, default=None)  # lower triangular
    alpha_vec: np.ndarray = field(repr=False, default=None)
    kinv: np.ndarray = field(repr=False, default=None)
    train_info: dict = field(default_factory=dict)

    @property
    def z_train(self):
        return (self.x_train - self.norm_center) / self.norm_scale

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.norm_center) / self.norm_scale


def kernel(x, z, hyper: Hyperparams) -> float:
    """Squared-exponential ARD covariance between two points."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    ell = hyper.lengthscales
    return hyper.signal_var * float(np.exp(-0.5 * np.sum(((x - z) / ell) ** 2)))


def kernel_matrix(xa, xb, hyper: Hyperparams) -> np.ndarray:
    xa = np.atleast_2d(xa) / hyper.lengthscales
    xb = np.atleast_2d(xb) / hyper.lengthscales
    d2 = (
        np.sum(xa**2, axis=1)[:, None]
        + np.sum(xb**2, axis=1)[None, :]
        - 2.0 * xa @ xb.T
    )
    return hyper.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


def _chol_with_jitter(k_noisy, signal_var):
    """Cholesky of K + sigma_n^2 I, escalating jitter on failure."""
    jitter = 0.0
    scale = JITTER_START
    n = k_noisy.shape[0]
    while True:
        try:
            return sla.cholesky(k_noisy + jitter * np.eye(n), lower=True), jitter
        except sla.LinAlgError:
            if scale > JITTER_MAX:
                cond = float(np.linalg.cond(k_noisy))
                raise ModelIOError(
                    f"kernel matrix not positive definite even with jitter "
                    f"{jitter:.1e} (condition estimate {cond:.3e})"
                ) from None
            jitter = scale * signal_var
            scale *= 10.0


def log_marginal_likelihood(x, y, hyper: Hyperparams, mean_offset: float = 0.0):
    """Marginal log-likelihood and its gradient wrt the log-hyperparameters.

    Returns (value, gradient) where the gradient is ordered
    (log_signal_var, log_lengthscales..., log_noise_var).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float) - mean_offset
    n, dims = x.shape
    k_mat = kernel_matrix(x, x, hyper)
    k_noisy = k_mat + hyper.noise_var * np.eye(n)
    chol, _ = _chol_with_jitter(k_noisy, hyper.signal_var)
    alpha = sla.cho_solve((chol, True), y)
    value = (
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(chol))))
        - 0.5 * n * np.log(2.0 * np.pi)
    )

    kinv = sla.cho_solve((chol, True), np.eye(n))
    outer = np.outer(alpha, alpha) - kinv  # d mll / d K = outer / 2
    grad = np.empty(2 + dims)
    grad[0] = 0.5 * float(np.sum(outer * k_mat))  # dK/dlog sf2 = K
    ell = hyper.lengthscales
    for d in range(dims):
        diff = (x[:, d][:, None] - x[:, d][None, :]) / ell[d]
        grad[1 + d] = 0.5 * float(np.sum(outer * (k_mat * diff**2)))
    grad[1 + dims] = 0.5 * hyper.noise_var * float(np.trace(outer))
    return value, grad


def _normalization(x):
    center = x.mean(axis=0)
    spread = x.std(axis=0)
    frozen = spread < 1e-12
    scale = np.where(frozen, 1.0, spread)
    return center, scale, frozen


def train(x, y, restarts: int = 5, seed: int = 0) -> GpModel:
    """Fit hyperparameters by multi-start L-BFGS ascent of the MLL.

    Deterministic for a given seed. Zero-variance input dimensions are
    normalized to 0 and their lengthscales frozen at log(1).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    n, dims = x.shape
    center, scale, frozen = _normalization(x)
    z = (x - center) / scale
    mean_offset = float(np.mean(y))
    y_var = max(float(np.var(y)), 1e-12)

    free = ~frozen
    rng = np.random.default_rng(seed)

    def pack(theta_free):
        ell = np.zeros(dims)
        ell[free] = theta_free[1 : 1 + free.sum()]
        return Hyperparams(
            log_signal_var=float(theta_free[0]),
            log_lengthscales=tuple(ell),
            log_noise_var=float(theta_free[-1]),
        )

    def neg_mll(theta_free):
        hyper = pack(theta_free)
        try:
            value, grad = log_marginal_likelihood(z, y, hyper, mean_offset)
        except ModelIOError:
            return 1e12, np.zeros_like(theta_free)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            return 1e12, np.zeros_like(theta_free)
        g_free = np.concatenate([[grad[0]], grad[1:-1][free], [grad[-1]]])
        return -value, -g_free

    n_free = 2 + int(free.sum())
    best = None
    info = {"restart_mll0": [], "restart_mll": []}
    for r in range(max(1, restarts)):
        if r == 0:
            theta0 = np.concatenate(
                [[np.log(y_var)], np.zeros(free.sum()), [np.log(0.1 * y_var)]]
            )
        else:
            theta0 = np.concatenate(
                [
                    [np.log(y_var) + rng.uniform(-2.0, 2.0)],
                    rng.uniform(np.log(0.3), np.log(10.0), free.sum()),
                    [np.log(y_var) + rng.uniform(-7.0, -0.5)],
                ]
            )
        mll0 = -neg_mll(theta0)[0]
        # keep the search inside numerically representable kernels: lengthscales
        # within e^(+-6) of the normalized data scale, variances within e(+-25)
        bounds = (
            [(np.log(y_var) - 25.0, np.log(y_var) + 25.0)]
            + [(-6.0, 6.0)] * int(free.sum())
            + [(np.log(y_var) - 25.0, np.log(y_var) + 5.0)]
        )
        res = sopt.minimize(
            neg_mll, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-9},
        )
        info["restart_mll0"].append(float(mll0))
        info["restart_mll"].append(float(-res.fun))
        if best is None or -res.fun > -best.fun:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise ModelIOError("hyperparameter search failed for every restart")

    hyper = pack(best.x)
    model = GpModel(
        gen_id=-1,
        x_train=x,
        y=y,
        mean_offset=mean_offset,
        hyper=hyper,
        norm_center=center,
        norm_scale=scale,
        frozen_dims=frozen,
        train_info=info,
    )
    _factorize(model)
    return model


def _factorize(model: GpModel):
    z = model.z_train
    k_mat = kernel_matrix(z, z, model.hyper)
    k_noisy = k_mat + model.hyper.noise_var * np.eye(len(z))
    chol, jitter = _chol_with_jitter(k_noisy, model.hyper.signal_var)
    model.chol = chol
    model.alpha_vec = sla.cho_solve((chol, True), model.y - model.mean_offset)
    model.kinv = sla.cho_solve((chol, True), np.eye(len(z)))
    if jitter:
        log.debug("kernel factorization used jitter %.1e", jitter)


def predict(model: GpModel, x_star):
    """Predictive mean and variance at one point (4,) or a batch (M, 4)."""
    x_star = np.asarray(x_star, dtype=float)
    single = x_star.ndim == 1
    z_star = model.normalize(np.atleast_2d(x_star))
    k_star = kernel_matrix(z_star, model.z_train, model.hyper)  # M x N
    mu = model.mean_offset + k_star @ model.alpha_vec
    w = sla.cho_solve((model.chol, True), k_star.T)  # N x M
    var = model.hyper.signal_var - np.sum(k_star.T * w, axis=0)
    var = np.maximum(var, 0.0)
    if single:
        return float(mu[0]), float(var[0])
    return mu, var


def predict_grad(model: GpModel, x_star):
    """Gradients of the predictive mean and standard deviation.

    Returns (dmu_dx, dsigma_dx, degenerate) in raw input units. At a
    zero-variance point the sigma gradient is reported as 0 with
    degenerate=True.
    """
    x_star = np.asarray(x_star, dtype=float)
    z_star = model.normalize(x_star)
    diff = (z_star[None, :] - model.z_train) / model.hyper.lengthscales**2  # N x 4
    k_star = kernel_matrix(z_star[None, :], model.z_train, model.hyper)[0]  # N
    dk = -diff * k_star[:, None]  # N x 4, d k_i / d z
    dmu_dz = dk.T @ model.alpha_vec
    w = sla.cho_solve((model.chol, True), k_star)
    var = float(model.hyper.signal_var - k_star @ w)
    dvar_dz = -2.0 * (dk.T @ w)
    chain = 1.0 / model.norm_scale
    dmu_dx = dmu_dz * chain
    if var <= 0.0:
        return dmu_dx, np.zeros(len(z_star)), True
    sigma = np.sqrt(var)
    dsigma_dx = (dvar_dz / (2.0 * sigma)) * chain
    return dmu_dx, dsigma_dx, False


def save(model: GpModel) -> str:
    """Serialize to the JSON model document (factorization is rebuilt on load)."""
    doc = {
        "version": MODEL_VERSION,
        "gen_id": model.gen_id,
        "mean_offset": model.mean_offset,
        "hyper": {
            "log_signal_var": model.hyper.log_signal_var,
            "log_lengthscales": list(model.hyper.log_lengthscales),
            "log_noise_var": model.hyper.log_noise_var,
        },
        "X": model.x_train.tolist(),
        "y": model.y.tolist(),
        "input_norm": {
            "center": model.norm_center.tolist(),
            "scale": model.norm_scale.tolist(),
            "frozen": model.frozen_dims.astype(int).tolist(),
        },
    }
    return json.dumps(doc)


def load(text: str) -> GpModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelIOError(f"model document is not valid JSON: {e}") from e
    for key in ("version", "gen_id", "mean_offset", "hyper", "X", "y", "input_norm"):
        if key not in doc:
            raise ModelIOError(f"model document missing field {key!r}")
    if doc["version"] != MODEL_VERSION:
        raise ModelIOError(
            f"model version {doc['version']} unsupported (expected {MODEL_VERSION})"
        )
    x = np.asarray(doc["X"], dtype=float)
    y = np.asarray(doc["y"], dtype=float)
    if x.ndim != 2 or x.shape[1] != N_DIMS or len(y) != len(x):
        raise ModelIOError(f"model dimensions inconsistent: X {x.shape}, y {y.shape}")
    h = doc["hyper"]
    if len(h["log_lengthscales"]) != N_DIMS:
        raise ModelIOError("model lengthscale count != input dimension")
    model = GpModel(
        gen_id=int(doc["gen_id"]),
        x_train=x,
        y=y,
        mean_offset=float(doc["mean_offset"]),
        hyper=Hyperparams(
            log_signal_var=float(h["log_signal_var"]),
            log_lengthscales=tuple(float(v) for v in h["log_lengthscales"]),
            log_noise_var=float(h["log_noise_var"]),
        ),
        norm_center=np.asarray(doc["input_norm"]["center"], dtype=float),
        norm_scale=np.asarray(doc["input_norm"]["scale"], dtype=float),
        frozen_dims=np.asarray(doc["input_norm"]["frozen"], dtype=bool),
    )
    _factorize(model)
    return model
