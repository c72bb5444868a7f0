"""Residual time-stepper network, losses, gradients and training.

The network advances reduced coordinates by one saved step: it takes the
current coefficient vector and the normalized parameter, and returns the
next coefficient vector. Each block adds a small multilayer perceptron
to a skip connection; the block that drops the parameter slots keeps the
leading coefficient entries in its skip. With H hidden layers a block's
subnet applies H affine+ELU layers and one final affine map.

Losses follow the trajectory structure of the data. The single-step
loss averages squared one-step prediction errors. The multi-step loss
re-feeds predictions for up to m steps ahead, seeding each chain at an
exact snapshot coefficient and weighting the p-step term by 1/p; chains
are truncated at the end of the trajectory. Gradients are exact
reverse-mode derivatives of those losses, checked against finite
differences in the test suite.

Training runs full-batch L-BFGS (two-loop recursion, strong Wolfe line
search) from several random restarts and keeps the restart whose full
rollout has the smallest mean squared final-step error.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchiveError, ConfigError, SolverError, TrainingError
from .pod import CoefficientDataset

__all__ = [
    "BlockSpec",
    "LbfgsResult",
    "MultiStepBatch",
    "ResNetParams",
    "ResNetSpec",
    "TrainConfig",
    "TrainedModel",
    "forward",
    "grad",
    "lbfgs_minimize",
    "load_model",
    "loss_multi",
    "loss_single",
    "make_spec",
    "save_model",
    "train",
]

_MODEL_FORMAT = "RBNET-1"


def _elu(z):
    return np.where(z >= 0.0, z, np.expm1(z))


def _elu_prime(z):
    return np.where(z >= 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


_ACTIVATIONS = {"elu": (_elu, _elu_prime)}


@dataclass(frozen=True)
class BlockSpec:
    """One residual block: dimensions of the skip and its subnet."""

    in_dim: int
    out_dim: int
    hidden: tuple

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("BlockSpec: dimensions must be positive")
        if self.out_dim > self.in_dim:
            raise ConfigError("BlockSpec: out_dim cannot exceed in_dim")
        if len(self.hidden) < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("BlockSpec: need at least one hidden layer")

    @property
    def layer_dims(self):
        return (self.in_dim, *self.hidden, self.out_dim)

    @property
    def contracts(self):
        return self.out_dim < self.in_dim


@dataclass(frozen=True)
class ResNetSpec:
    """Network architecture: coefficient count, parameter count, blocks."""

    n_coeff: int
    n_param: int
    blocks: tuple
    activation: str = "elu"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.blocks:
            raise ConfigError("ResNetSpec: need at least one block")
        if self.blocks[0].in_dim != self.n_coeff + self.n_param:
            raise ConfigError(
                "ResNetSpec: first block must accept coefficients plus "
                "parameters")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if nxt.in_dim != prev.out_dim:
                raise ConfigError("ResNetSpec: block dimensions do not chain")
        if self.blocks[-1].out_dim != self.n_coeff:
            raise ConfigError(
                "ResNetSpec: last block must emit the coefficient vector")

    @property
    def n_in(self):
        return self.n_coeff + self.n_param

    @property
    def n_params_total(self):
        total = 0
        for block in self.blocks:
            dims = block.layer_dims
            total += sum(dims[i + 1] * dims[i] + dims[i + 1]
                         for i in range(len(dims) - 1))
        return total


def make_spec(n_coeff, n_param, widths, hidden_layers, contraction_index=0,
              activation="elu") -> ResNetSpec:
    """Architecture from a width list.

    widths[j] is the uniform hidden width of block j; hidden_layers is
    the hidden-layer count shared by all blocks. Blocks up to
    contraction_index carry the parameter slots; the block at that index
    drops them.
    """
    widths = list(widths)
    if not 0 <= contraction_index < len(widths):
        raise ConfigError("contraction_index out of range")
    blocks = []
    for j, width in enumerate(widths):
        in_dim = n_coeff + n_param if j <= contraction_index else n_coeff
        out_dim = n_coeff if j >= contraction_index else n_coeff + n_param
        blocks.append(BlockSpec(in_dim, out_dim,
                                (int(width),) * int(hidden_layers)))
    return ResNetSpec(n_coeff=int(n_coeff), n_param=int(n_param),
                      blocks=tuple(blocks), activation=activation)


class ResNetParams:
    """Weights and biases for a ResNetSpec.

    Stored per block as (weight, bias) pairs with weight shape
    (out, in). The flat layout is block-major, layer-major, each layer's
    row-major weights followed by its bias.
    """

    def __init__(self, spec: ResNetSpec, layers):
        self.spec = spec
        self.layers = layers
        for block, block_layers in zip(spec.blocks, layers):
            dims = block.layer_dims
            if len(block_layers) != len(dims) - 1:
                raise ConfigError("ResNetParams: layer count mismatch")
            for i, (w, b) in enumerate(block_layers):
                if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                    raise ConfigError(
                        f"ResNetParams: bad shapes in block layer {i}")

    @classmethod
    def zeros(cls, spec):
        layers = []
        for block in spec.blocks:
            dims = block.layer_dims
            layers.append([(np.zeros((dims[i + 1], dims[i])),
                            np.zeros(dims[i + 1]))
                           for i in range(len(dims) - 1)])
        return cls(spec, layers)

    @classmethod
    def glorot(cls, spec, rng):
        """Glorot-uniform weights, zero biases."""
        layers = []
        for block in spec.blocks:
            dims = block.layer_dims
            block_layers = []
            for i in range(len(dims) - 1):
                fan_in, fan_out = dims[i], dims[i + 1]
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
                block_layers.append((w, np.zeros(fan_out)))
            layers.append(block_layers)
        return cls(spec, layers)

    def flatten(self):
        parts = []
        for block_layers in self.layers:
            for w, b in block_layers:
                parts.append(w.ravel())
                parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (spec.n_params_total,):
            raise ConfigError(
                f"from_flat: expected {spec.n_params_total} entries, "
                f"got {vec.shape}")
        layers = []
        off = 0
        for block in spec.blocks:
            dims = block.layer_dims
            block_layers = []
            for i in range(len(dims) - 1):
                nw = dims[i + 1] * dims[i]
                w = vec[off:off + nw].reshape(dims[i + 1], dims[i]).copy()
                off += nw
                b = vec[off:off + dims[i + 1]].copy()
                off += dims[i + 1]
                block_layers.append((w, b))
            layers.append(block_layers)
        return cls(spec, layers)


def _quiet(fn):
    """Silence overflow warnings; divergence is detected via isfinite."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)

    return wrapper


@_quiet
def _forward_core(params: ResNetParams, x, want_caches=False, check=False,
                  size_log=None):
    """Shared batched forward pass.

    x : (batch, n_in). Returns (out, caches); caches is None unless
    requested, otherwise a per-block list of (affine inputs,
    pre-activations) for the backward pass.
    """
    act, _ = _ACTIVATIONS[params.spec.activation]
    caches = [] if want_caches else None
    cur = x
    if size_log is not None:
        size_log.append(cur.shape[1])
    for bi, (block, block_layers) in enumerate(zip(params.spec.blocks,
                                                   params.layers)):
        h = cur
        h_ins = []
        pres = []
        for li, (w, b) in enumerate(block_layers[:-1]):
            h_ins.append(h)
            z = h @ w.T + b
            if check and not np.all(np.isfinite(z)):
                raise SolverError(
                    f"forward: non-finite value in block {bi} layer {li}")
            pres.append(z)
            h = act(z)
            if size_log is not None:
                size_log.append(h.shape[1])
        w, b = block_layers[-1]
        h_ins.append(h)
        r = h @ w.T + b
        if check and not np.all(np.isfinite(r)):
            raise SolverError(
                f"forward: non-finite value in block {bi} "
                f"layer {len(block_layers) - 1}")
        skip = cur if not block.contracts else cur[:, :block.out_dim]
        cur = skip + r
        if size_log is not None:
            size_log.append(cur.shape[1])
        if want_caches:
            caches.append((h_ins, pres))
    return cur, caches


@_quiet
def _backward_core(params: ResNetParams, caches, g_out, grads):
    """Backpropagate g_out through the network.

    Accumulates parameter gradients into `grads` (same nesting as
    params.layers) and returns the gradient with respect to the network
    input, shape (batch, n_in).
    """
    _, act_prime = _ACTIVATIONS[params.spec.activation]
    g = g_out
    for bi in range(len(params.layers) - 1, -1, -1):
        block = params.spec.blocks[bi]
        block_layers = params.layers[bi]
        h_ins, pres = caches[bi]
        gw, gb = grads[bi][-1]
        gw += g.T @ h_ins[-1]
        gb += g.sum(axis=0)
        dh = g @ block_layers[-1][0]
        for li in range(len(block_layers) - 2, -1, -1):
            dz = dh * act_prime(pres[li])
            gw, gb = grads[bi][li]
            gw += dz.T @ h_ins[li]
            gb += dz.sum(axis=0)
            dh = dz @ block_layers[li][0]
        if block.contracts:
            g_skip = np.zeros((g.shape[0], block.in_dim))
            g_skip[:, :block.out_dim] = g
        else:
            g_skip = g
        g = g_skip + dh
    return g


def forward(params: ResNetParams, c, mu, size_log=None):
    """One saved-step prediction.

    c : (n_coeff,) or (batch, n_coeff) reduced coordinates.
    mu : (n_param,) or (batch, n_param) normalized parameters.
    size_log : optional list; the widths of every intermediate array are
        appended, which lets callers verify the online cost profile.

    Raises SolverError naming the block and layer if an intermediate
    overflows to a non-finite value.
    """
    c = np.asarray(c, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    single = c.ndim == 1
    cb = np.atleast_2d(c)
    mb = np.atleast_2d(mu)
    if cb.shape[1] != params.spec.n_coeff or mb.shape[1] != params.spec.n_param:
        raise ConfigError("forward: input widths do not match the spec")
    if cb.shape[0] != mb.shape[0]:
        raise ConfigError("forward: batch sizes disagree")
    x = np.hstack([cb, mb])
    out, _ = _forward_core(params, x, check=True, size_log=size_log)
    return out[0] if single else out


def loss_single(params: ResNetParams, c_in, mu, c_out):
    """Mean squared one-step error over a batch of transitions."""
    c_in = np.atleast_2d(np.asarray(c_in, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    c_out = np.atleast_2d(np.asarray(c_out, dtype=np.float64))
    pred, _ = _forward_core(params, np.hstack([c_in, mu]))
    res = pred - c_out
    return float(np.sum(res * res) / c_in.shape[0])


class MultiStepBatch:
    """Precomputed index structure for the multi-step loss.

    The batch holds every (parameter, step) pair with at least one
    following snapshot. For each lookahead p the pairs still alive
    (k + p within the trajectory) are selected from the previous level,
    so chains are truncated at the trajectory end.
    """

    def __init__(self, dataset: CoefficientDataset, m):
        m = int(m)
        if m < 1:
            raise ConfigError("MultiStepBatch: m must be at least 1")
        n_last = dataset.n_saved - 1
        if n_last < 1:
            raise ConfigError("MultiStepBatch: dataset has no transitions")
        self.m = m
        coeffs = dataset.coeffs
        mu_norm = dataset.params_normalized()
        param_idx = np.repeat(np.arange(dataset.n_param), n_last)
        step_idx = np.tile(np.arange(n_last), dataset.n_param)
        self.size = param_idx.size
        self.x0 = coeffs[param_idx, step_idx]
        self.mu = mu_norm[param_idx]
        # Level p: pairs with k + p <= n_last, as positions within the
        # previous level's arrays (levels shrink monotonically).
        self.level_select = []
        self.level_targets = []
        prev_steps = step_idx
        prev_param = param_idx
        for p in range(1, m + 1):
            alive = prev_steps + p <= n_last
            if not np.any(alive):
                break
            self.level_select.append(np.flatnonzero(alive))
            prev_steps = prev_steps[alive]
            prev_param = prev_param[alive]
            self.level_targets.append(coeffs[prev_param, prev_steps + p])

    def loss(self, params: ResNetParams):
        return self.loss_and_grad(params, want_grad=False)[0]

    @_quiet
    def loss_and_grad(self, params: ResNetParams, want_grad=True):
        """Multi-step loss and its exact gradient in flat layout."""
        states = self.x0
        mu = self.mu
        forwards = []
        total = 0.0
        for p, (sel, targets) in enumerate(zip(self.level_select,
                                               self.level_targets), start=1):
            mu = mu[sel]
            x = np.hstack([states[sel], mu])
            out, caches = _forward_core(params, x, want_caches=want_grad)
            res = out - targets
            total += np.sum(res * res) / p
            forwards.append((caches, res))
            states = out
        loss = float(total / self.size)
        if not want_grad:
            return loss, None
        grads = [[(np.zeros_like(w), np.zeros_like(b)) for w, b in blk]
                 for blk in params.layers]
        n_coeff = params.spec.n_coeff
        carry = None
        for p in range(len(forwards), 0, -1):
            caches, res = forwards[p - 1]
            g = (2.0 / (self.size * p)) * res
            if carry is not None:
                g = g.copy()
                g[self.level_select[p]] += carry
            g_in = _backward_core(params, caches, g, grads)
            carry = g_in[:, :n_coeff]
        flat = []
        for blk in grads:
            for w, b in blk:
                flat.append(w.ravel())
                flat.append(b)
        return loss, np.concatenate(flat)


def loss_multi(params: ResNetParams, dataset: CoefficientDataset, m):
    """Multi-step loss over the full dataset."""
    return MultiStepBatch(dataset, m).loss(params)


def grad(params: ResNetParams, dataset: CoefficientDataset, m):
    """(loss, gradient) of the multi-step loss; gradient is flat."""
    return MultiStepBatch(dataset, m).loss_and_grad(params)


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    n_iters: int
    status: str
    history: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == "gradient-tolerance"


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic through two points with derivatives."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    radicand = d1 * d1 - da * db
    if not radicand >= 0.0:
        return None
    d2 = np.sign(b - a) * np.sqrt(radicand)
    denom = db - da + 2.0 * d2
    if denom == 0.0:
        return None
    x = b - (b - a) * (db + d2 - d1) / denom
    if not np.isfinite(x):
        return None
    return x


def _zoom(fg_line, a_lo, f_lo, d_lo, a_hi, f_hi, d_hi, f0, df0, c1, c2,
          max_iter=30):
    for _ in range(max_iter):
        lo, hi = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
        span = hi - lo
        trial = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        if trial is None or not lo + 0.1 * span <= trial <= hi - 0.1 * span:
            trial = 0.5 * (a_lo + a_hi)
        f_t, d_t, payload = fg_line(trial)
        if (not np.isfinite(f_t)) or f_t > f0 + c1 * trial * df0 or f_t >= f_lo:
            a_hi, f_hi, d_hi = trial, f_t, d_t
        else:
            if abs(d_t) <= -c2 * df0:
                return trial, payload
            if d_t * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
            a_lo, f_lo, d_lo = trial, f_t, d_t
        if span < 1e-16:
            break
    # Fall back to the best point that still makes Armijo progress.
    if np.isfinite(f_lo) and f_lo < f0 + c1 * a_lo * df0 and a_lo > 0.0:
        f_t, d_t, payload = fg_line(a_lo)
        return a_lo, payload
    return None, None


def _wolfe_search(fun_grad, x, f0, g0, d, c1=1e-4, c2=0.9, alpha0=1.0,
                  max_iter=25):
    """Strong Wolfe line search; returns (alpha, f, g, evals) or None."""
    df0 = float(g0 @ d)
    evals = 0

    def fg_line(alpha):
        nonlocal evals
        evals += 1
        f, g = fun_grad(x + alpha * d)
        return (f if np.isfinite(f) else np.inf), float(g @ d), (f, g)

    alpha_prev, f_prev, d_prev = 0.0, f0, df0
    alpha = alpha0
    for i in range(max_iter):
        f_a, d_a, payload = fg_line(alpha)
        if f_a > f0 + c1 * alpha * df0 or (i > 0 and f_a >= f_prev):
            step, payload = _zoom(fg_line, alpha_prev, f_prev, d_prev,
                                  alpha, f_a, d_a, f0, df0, c1, c2)
            break
        if abs(d_a) <= -c2 * df0:
            step = alpha
            break
        if d_a >= 0.0:
            step, payload = _zoom(fg_line, alpha, f_a, d_a,
                                  alpha_prev, f_prev, d_prev, f0, df0, c1, c2)
            break
        alpha_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha = min(2.0 * alpha, 1e8)
    else:
        return None
    if step is None or payload is None:
        return None
    f_new, g_new = payload
    if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
        return None
    return step, f_new, g_new, evals


def lbfgs_minimize(fun_grad, x0, max_iters, history=10, grad_tol=1e-10,
                   callback=None) -> LbfgsResult:
    """Limited-memory BFGS with a strong Wolfe line search.

    Parameters
    ----------
    fun_grad : callable x -> (f, g)
    x0 : initial point.
    max_iters : iteration budget.
    history : number of curvature pairs kept.
    grad_tol : terminate when the gradient 2-norm drops below this.
    callback : optional callable (iteration, f, x) -> bool; returning
        True stops the optimization ("callback-stop").

    The unit step is always tried first. Non-finite objective values
    during the search are treated as infeasible step lengths; if no
    acceptable step exists the memory is dropped and a steepest-descent
    retry is attempted once before giving up with the last good iterate.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun_grad(x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return LbfgsResult(x=x, f=float(f), n_iters=0, status="diverged")
    s_mem, y_mem, rho_mem = [], [], []
    status = "max-iterations"
    hist = [float(f)]
    it = 0
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= grad_tol:
            status = "gradient-tolerance"
            it -= 1
            break
        d = _two_loop_direction(g, s_mem, y_mem, rho_mem)
        if float(d @ g) >= 0.0:
            s_mem, y_mem, rho_mem = [], [], []
            d = -g
        hit = _wolfe_search(fun_grad, x, f, g, d)
        if hit is None and s_mem:
            s_mem, y_mem, rho_mem = [], [], []
            hit = _wolfe_search(fun_grad, x, f, g, -g)
        if hit is None:
            status = "line-search-failure"
            it -= 1
            break
        alpha, f_new, g_new, _ = hit
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_mem.append(s)
            y_mem.append(y)
            rho_mem.append(1.0 / sy)
            if len(s_mem) > history:
                s_mem.pop(0)
                y_mem.pop(0)
                rho_mem.pop(0)
        x = x + s
        f, g = f_new, g_new
        hist.append(float(f))
        if callback is not None and callback(it, float(f), x):
            status = "callback-stop"
            break
    return LbfgsResult(x=x, f=float(f), n_iters=it, status=status,
                       history=hist)


def _two_loop_direction(g, s_mem, y_mem, rho_mem):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_mem), reversed(y_mem), reversed(rho_mem)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_mem:
        gamma = float(s_mem[-1] @ y_mem[-1]) / float(y_mem[-1] @ y_mem[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_mem, y_mem, rho_mem), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    max_epochs counts optimizer cycles; common full-batch L-BFGS
    implementations run a bounded number of quasi-Newton iterations per
    cycle rather than a single one, so the iteration budget handed to
    the optimizer is iters_per_epoch * max_epochs.
    """

    m: int = 1
    max_epochs: int = 1000
    restarts: int = 5
    seed: int = 0
    lbfgs_history: int = 10
    grad_tol: float = 1e-10
    iters_per_epoch: int = 1
    patience: int | None = None

    def __post_init__(self):
        if self.m < 1 or self.max_epochs < 1 or self.restarts < 1:
            raise ConfigError(
                "TrainConfig: m, max_epochs and restarts must be positive")
        if self.iters_per_epoch < 1:
            raise ConfigError("TrainConfig: iters_per_epoch must be positive")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("TrainConfig: patience must be positive")


@dataclass
class TrainedModel:
    """A trained network plus the input normalization and a training log."""

    spec: ResNetSpec
    params: ResNetParams
    normalization: object
    metadata: dict


def coefficient_rollout(params: ResNetParams, mu_norm, n_steps,
                        initial=None, size_log=None):
    """Iterate the network from an initial coefficient state.

    mu_norm : (n_param,) or (batch, n_param) normalized parameters.
    Returns an (n_steps + 1, n_coeff) array, or (batch, n_steps + 1,
    n_coeff) for batched parameters. Raises SolverError with the step
    index if the state leaves the finite range.
    """
    mu_norm = np.asarray(mu_norm, dtype=np.float64)
    single = mu_norm.ndim == 1
    mb = np.atleast_2d(mu_norm)
    n = mb.shape[0]
    state = (np.zeros((n, params.spec.n_coeff)) if initial is None
             else np.atleast_2d(np.asarray(initial, dtype=np.float64)).copy())
    out = np.empty((n, n_steps + 1, params.spec.n_coeff))
    out[:, 0] = state
    x = np.empty((n, params.spec.n_in))
    x[:, params.spec.n_coeff:] = mb
    for k in range(n_steps):
        x[:, :params.spec.n_coeff] = state
        state, _ = _forward_core(params, x, size_log=size_log)
        if not np.all(np.isfinite(state)):
            raise SolverError(f"rollout diverged at step {k + 1}")
        out[:, k + 1] = state
    return out[0] if single else out


def validation_score(params: ResNetParams, dataset: CoefficientDataset):
    """Mean squared final-step coefficient error of full rollouts."""
    mu = dataset.params_normalized()
    n_last = dataset.n_saved - 1
    rolled = coefficient_rollout(params, mu, n_last,
                                 initial=dataset.coeffs[:, 0])
    res = rolled[:, -1] - dataset.coeffs[:, -1]
    return float(np.mean(np.sum(res * res, axis=1)))


def train(dataset: CoefficientDataset, spec: ResNetSpec,
          config: TrainConfig, threads=1) -> TrainedModel:
    """Fit the time stepper to a coefficient dataset.

    Runs config.restarts independent Glorot initializations (seed, seed
    plus 1, ...), minimizes the multi-step loss with full-batch L-BFGS
    and picks the restart with the smallest rollout validation score.
    With threads > 1 the restarts run concurrently; each restart is a
    pure function of its seed, so the outcome does not depend on the
    schedule. Raises TrainingError if every restart diverges.
    """
    if spec.n_coeff != dataset.n_rb:
        raise ConfigError("train: spec and dataset disagree on n_rb")
    if spec.n_param != dataset.params.shape[1]:
        raise ConfigError("train: spec and dataset disagree on n_param")
    n_last = dataset.n_saved - 1
    if 4 * config.m > n_last:
        raise ConfigError(
            f"train: lookahead m={config.m} too large for {n_last} transitions "
            "(need m <= transitions / 4)")
    batch = MultiStepBatch(dataset, config.m)

    def objective(flat):
        return batch.loss_and_grad(ResNetParams.from_flat(spec, flat))

    max_iters = config.max_epochs * config.iters_per_epoch

    def run_restart(r):
        rng = np.random.default_rng(config.seed + r)
        x0 = ResNetParams.glorot(spec, rng).flatten()
        callback = None
        if config.patience is not None:
            callback = _patience_callback(spec, dataset, config.patience)
        result = lbfgs_minimize(objective, x0, max_iters=max_iters,
                                history=config.lbfgs_history,
                                grad_tol=config.grad_tol, callback=callback)
        entry = {"restart": r, "status": result.status,
                 "final_loss": result.f, "iterations": result.n_iters,
                 "validation": np.inf}
        if np.isfinite(result.f):
            try:
                entry["validation"] = validation_score(
                    ResNetParams.from_flat(spec, result.x), dataset)
            except SolverError:
                entry["validation"] = np.inf
        entry["x"] = result.x
        return entry

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            restarts = list(pool.map(run_restart, range(config.restarts)))
    else:
        restarts = [run_restart(r) for r in range(config.restarts)]
    scores = np.array([e["validation"] for e in restarts])
    if not np.any(np.isfinite(scores)):
        raise TrainingError(
            "every restart diverged; statuses: "
            + ", ".join(e["status"] for e in restarts))
    best = int(np.argmin(scores))
    params = ResNetParams.from_flat(spec, restarts[best]["x"])
    metadata = {
        "m": config.m,
        "max_epochs": config.max_epochs,
        "iters_per_epoch": config.iters_per_epoch,
        "restarts": config.restarts,
        "seed": config.seed,
        "chosen_restart": best,
        "final_loss": restarts[best]["final_loss"],
        "validation": restarts[best]["validation"],
        "restart_log": [{k: (v if not isinstance(v, float) or np.isfinite(v)
                             else None)
                         for k, v in e.items() if k != "x"}
                        for e in restarts],
    }
    return TrainedModel(spec=spec, params=params,
                        normalization=dataset.normalization,
                        metadata=metadata)


def _patience_callback(spec, dataset, patience):
    state = {"best": np.inf, "bad": 0}

    def callback(_it, _f, x):
        try:
            score = validation_score(ResNetParams.from_flat(spec, x), dataset)
        except SolverError:
            score = np.inf
        if score < state["best"] - 1e-15:
            state["best"] = score
            state["bad"] = 0
        else:
            state["bad"] += 1
        return state["bad"] >= patience

    return callback


def save_model(model: TrainedModel, path):
    """JSON model archive, format tag RBNET-1."""
    record = {
        "format": _MODEL_FORMAT,
        "spec": {
            "n_coeff": model.spec.n_coeff,
            "n_param": model.spec.n_param,
            "activation": model.spec.activation,
            "blocks": [{"in": b.in_dim, "out": b.out_dim,
                        "hidden": list(b.hidden)}
                       for b in model.spec.blocks],
        },
        "normalization": model.normalization.to_dict(),
        "parameters": model.params.flatten().tolist(),
        "metadata": model.metadata,
    }
    Path(path).write_text(json.dumps(record, sort_keys=True))


def load_model(path) -> TrainedModel:
    from .sampling import ParamNormalization

    try:
        record = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable model: {exc}") from exc
    if record.get("format") != _MODEL_FORMAT:
        raise ArchiveError(
            f"{path}: bad model format tag {record.get('format')!r}")
    try:
        spec_rec = record["spec"]
        spec = ResNetSpec(
            n_coeff=int(spec_rec["n_coeff"]),
            n_param=int(spec_rec["n_param"]),
            blocks=tuple(BlockSpec(int(b["in"]), int(b["out"]),
                                   tuple(b["hidden"]))
                         for b in spec_rec["blocks"]),
            activation=spec_rec["activation"])
        params = ResNetParams.from_flat(
            spec, np.asarray(record["parameters"], dtype=np.float64))
        norm = ParamNormalization.from_dict(record["normalization"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise ArchiveError(f"{path}: malformed model: {exc}") from exc
    return TrainedModel(spec=spec, params=params, normalization=norm,
                        metadata=record.get("metadata", {}))
