"""Levenberg-Marquardt training with Bayesian (evidence) regularization.

Implements Nguyen-Widrow initialization, the randomized 8:1:1 dataset split,
analytic parameter Jacobians, and the damped Gauss-Newton loop minimizing
beta*E_D + alpha*E_W with hyperparameters re-estimated after every accepted
step. Validation error is monitored for reporting only; it never stops the
iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import TrainingError
from .mlp import Mlp, activation_derivatives, forward_batch


class Dataset:
    """Paired samples with train/val/test index tags."""

    def __init__(self, inputs, targets, train_idx=None, val_idx=None, test_idx=None):
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs[:, None]
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have equal length")
        n = self.inputs.shape[0]
        if train_idx is None:
            train_idx = np.arange(n)
        self.train_idx = np.asarray(train_idx, dtype=int)
        self.val_idx = np.asarray(val_idx if val_idx is not None else [], dtype=int)
        self.test_idx = np.asarray(test_idx if test_idx is not None else [], dtype=int)

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return self.inputs[idx], self.targets[idx]


def split(dataset: Dataset, seed: int) -> Dataset:
    """Random 8:1:1 partition; boundaries at floor(0.8 n) and floor(0.9 n)."""
    n = len(dataset)
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    b1 = int(np.floor(0.8 * n))
    b2 = int(np.floor(0.9 * n))
    return Dataset(dataset.inputs, dataset.targets,
                   train_idx=perm[:b1], val_idx=perm[b1:b2], test_idx=perm[b2:])


def nguyen_widrow_init(layer_sizes, activations, seed: int) -> Mlp:
    """Initial weights whose active regions tile the unit input box.

    Hidden rows are unit random vectors scaled by 0.7 * l**(1/fan_in) with
    biases drawn uniformly from the same range; the linear output layer gets
    small uniform entries.
    """
    sizes = list(layer_sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k in range(1, len(sizes) - 1):
        fan_in, l = sizes[k - 1], sizes[k]
        beta = 0.7 * l ** (1.0 / fan_in)
        w = rng.uniform(-1.0, 1.0, size=(l, fan_in))
        norms = np.linalg.norm(w, axis=1)
        while np.any(norms < 1e-12):
            bad = norms < 1e-12
            w[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), fan_in))
            norms = np.linalg.norm(w, axis=1)
        weights.append(beta * w / norms[:, None])
        biases.append(rng.uniform(-beta, beta, size=l))
    weights.append(rng.uniform(-0.5, 0.5, size=(sizes[-1], sizes[-2])))
    biases.append(rng.uniform(-0.5, 0.5, size=sizes[-1]))
    return Mlp(weights, biases, list(activations))


def network_param_jacobian(net: Mlp, x: np.ndarray):
    """Outputs and the Jacobian of outputs w.r.t. all parameters.

    Returns (out, jac) with out of shape (n, s) and jac of shape (n*s, P)
    where P = net.n_params; rows are sample-major, columns follow the
    get_params layout (per layer: weight entries row-major, then biases).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    acts = [x]
    zs = []
    a = x
    n_hidden = len(net.weights) - 1
    for k in range(n_hidden):
        z = a @ net.weights[k].T + net.biases[k]
        zs.append(z)
        a = activation_derivatives(net.activations[k], z)[0]
        acts.append(a)
    out = a @ net.weights[-1].T + net.biases[-1]

    s = net.output_dim
    jac = np.empty((n, s, net.n_params))
    offsets = []
    pos = 0
    for w, b in zip(net.weights, net.biases):
        offsets.append(pos)
        pos += w.size + b.size

    # d out / d z_k, propagated backwards from the identity output layer
    d = np.broadcast_to(np.eye(s), (n, s, s)).copy()
    for k in range(len(net.weights) - 1, -1, -1):
        a_prev = acts[k]
        w = net.weights[k]
        lo = offsets[k]
        dw = np.einsum("noi,nj->noij", d, a_prev)
        jac[:, :, lo:lo + w.size] = dw.reshape(n, s, w.size)
        jac[:, :, lo + w.size:lo + w.size + w.shape[0]] = d
        if k > 0:
            sens = np.einsum("noi,ij->noj", d, w)
            tag = net.activations[k - 1]
            if tag == "softmax":
                a_here = acts[k]
                av = np.einsum("noj,nj->no", sens, a_here)
                d = a_here[:, None, :] * (sens - av[:, :, None])
            else:
                _, d1, _ = activation_derivatives(tag, zs[k - 1])
                d = sens * d1[:, None, :]
    return out, jac.reshape(n * s, net.n_params)


@dataclass
class TrainOptions:
    max_iter: int = 1000
    grad_tol: float = 1e-7
    mu0: float = 1e-3
    mu_dec: float = 0.1
    mu_inc: float = 10.0
    mu_max: float = 1e10


@dataclass
class TrainReport:
    gradient_norm: float = np.inf
    iterations: int = 0
    termination: str = ""
    train_mse: float = np.nan
    val_mse: float = np.nan
    test_mse: float = np.nan
    gamma: float = np.nan
    objective_history: list = field(default_factory=list)


def _mse(net: Mlp, x, t) -> float:
    if len(x) == 0:
        return float("nan")
    r = forward_batch(net, x) - t
    return float(np.mean(r * r))


def train_lm_bayes(net: Mlp, data: Dataset, opts: TrainOptions | None = None):
    """Damped Gauss-Newton minimization of beta*E_D + alpha*E_W.

    E_D is the summed squared training residual and E_W the summed squared
    parameter vector. The step solves
        (beta*J^T J + (mu + alpha) I) delta = -(beta*J^T e + alpha*theta)
    and is accepted only when it decreases the objective under the
    hyperparameters in force; alpha and beta are then re-estimated from the
    effective parameter count gamma = P - 2*alpha*tr((beta*J^T J + alpha*I)^-1).
    Raises TrainingError (carrying the partial report) when the damping
    exceeds mu_max without an acceptable step.
    """
    opts = opts or TrainOptions()
    net = net.copy()
    x_tr, t_tr = data.subset(data.train_idx)
    if x_tr.shape[1] != net.input_dim or t_tr.shape[1] != net.output_dim:
        raise ValueError("network dimensions do not match the dataset")
    n_res = x_tr.shape[0] * net.output_dim
    p = net.n_params
    eye = np.eye(p)

    theta = net.get_params()
    alpha, beta = 0.0, 1.0
    gamma = float(p)

    def eval_full(th):
        net.set_params(th)
        out, jac = network_param_jacobian(net, x_tr)
        e = (out - t_tr).ravel()
        return e, jac

    def eval_resid(th):
        net.set_params(th)
        e = (forward_batch(net, x_tr) - t_tr).ravel()
        return e

    e, jac = eval_full(theta)
    e_d = float(e @ e)
    e_w = float(theta @ theta)
    e_d_init = e_d
    best = (e_d, theta.copy())
    obj = beta * e_d + alpha * e_w
    grad = 2.0 * beta * (jac.T @ e) + 2.0 * alpha * theta
    grad_norm = float(np.linalg.norm(grad))

    report = TrainReport(gamma=gamma)
    report.objective_history.append(obj)
    mu = opts.mu0
    iters = 0
    reason = "grad_tol" if grad_norm < opts.grad_tol else ""

    def finalize(th, why):
        e_fin, jac_fin = eval_full(th)
        g_fin = 2.0 * beta * (jac_fin.T @ e_fin) + 2.0 * alpha * th
        report.gradient_norm = float(np.linalg.norm(g_fin))
        report.iterations = iters
        report.termination = why
        report.gamma = gamma
        report.train_mse = float(np.mean(e_fin * e_fin))
        report.val_mse = _mse(net, *data.subset(data.val_idx))
        report.test_mse = _mse(net, *data.subset(data.test_idx))
        return net, report

    while not reason:
        if iters >= opts.max_iter:
            reason = "max_iter"
            break
        jtj = beta * (jac.T @ jac)
        rhs = -(beta * (jac.T @ e) + alpha * theta)
        accepted = False
        while not accepted:
            try:
                delta = np.linalg.solve(jtj + (mu + alpha) * eye, rhs)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                theta_new = theta + delta
                e_new = eval_resid(theta_new)
                e_d_new = float(e_new @ e_new)
                e_w_new = float(theta_new @ theta_new)
                obj_new = beta * e_d_new + alpha * e_w_new
                if np.isfinite(obj_new) and obj_new < obj:
                    accepted = True
            if not accepted:
                mu *= opts.mu_inc
                if mu > opts.mu_max:
                    # An exact fit saturates beta at 1/E_D and amplifies
                    # rounding noise in the objective gradient; the raw data
                    # gradient tells whether the fit itself is converged.
                    raw_grad = float(np.linalg.norm(2.0 * (jac.T @ e)))
                    if raw_grad < opts.grad_tol:
                        reason = "grad_tol"
                        break
                    report.iterations = iters
                    report.termination = "mu_max"
                    report.gradient_norm = grad_norm
                    report.gamma = gamma
                    report.train_mse = e_d / n_res
                    raise TrainingError(
                        f"damping exceeded {opts.mu_max:g} after {iters} steps "
                        "without an acceptable step", report=report)
        if reason:
            break
        mu = max(mu * opts.mu_dec, 1e-20)
        theta = theta_new
        iters += 1
        e, jac = eval_full(theta)
        e_d, e_w = e_d_new, e_w_new
        if e_d < best[0]:
            best = (e_d, theta.copy())

        # evidence update of the effective parameter count and hyperparameters
        if alpha > 0.0:
            h = beta * (jac.T @ jac) + alpha * eye
            gamma = p - 2.0 * alpha * float(np.trace(np.linalg.inv(h)))
        else:
            gamma = float(p)
        gamma = float(min(max(gamma, 0.0), p))
        alpha = gamma / (2.0 * e_w) if e_w > 1e-300 else 0.0
        beta = max((n_res - gamma) / (2.0 * e_d), 1e-12) if e_d > 1e-300 else 1e12

        obj = beta * e_d + alpha * e_w
        report.objective_history.append(obj)
        grad = 2.0 * beta * (jac.T @ e) + 2.0 * alpha * theta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < opts.grad_tol:
            reason = "grad_tol"

    if e_d > e_d_init:
        theta = best[1]
    return finalize(theta, reason)
