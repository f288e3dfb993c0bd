"""Feedforward control map N(t, x, theta) with analytic gradients.

tanh hidden layers; the output layer is a componentwise sigmoid scaled into
the control box, so every forward call is admissible by construction.
Inputs are affinely normalized to [-1, 1] per axis using the horizon and
the state box, which keeps the default initialization well conditioned.
Parameters live in a single flat vector, layer-major (W1, b1, W2, b2, ...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch


@dataclass(frozen=True)
class NetworkArchitecture:
    state_dim: int
    control_dim: int
    hidden: tuple
    horizon: float
    x_lower: tuple
    x_upper: tuple
    u_lower: tuple
    u_upper: tuple

    def __post_init__(self):
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")

    @classmethod
    def for_problem(cls, problem, hidden=(32, 32)) -> "NetworkArchitecture":
        return cls(
            state_dim=problem.dim,
            control_dim=problem.control_dim,
            hidden=tuple(hidden),
            horizon=problem.horizon,
            x_lower=tuple(problem.domain_lower),
            x_upper=tuple(problem.domain_upper),
            u_lower=tuple(problem.control_lower),
            u_upper=tuple(problem.control_upper),
        )

    @property
    def input_dim(self) -> int:
        return self.state_dim + 1

    def layer_sizes(self):
        return [self.input_dim, *self.hidden, self.control_dim]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes()
        return sum(sizes[i + 1] * sizes[i] + sizes[i + 1]
                   for i in range(len(sizes) - 1))


def zero_theta(arch: NetworkArchitecture) -> np.ndarray:
    return np.zeros(arch.n_params)


def random_theta(arch: NetworkArchitecture, rng, scale: float = 0.5) -> np.ndarray:
    """Small random weights, zero biases (Xavier-ish scaling)."""
    theta = np.zeros(arch.n_params)
    sizes = arch.layer_sizes()
    pos = 0
    for i in range(len(sizes) - 1):
        n_out, n_in = sizes[i + 1], sizes[i]
        w = rng.standard_normal((n_out, n_in)) * scale / np.sqrt(n_in)
        theta[pos:pos + n_out * n_in] = w.ravel()
        pos += n_out * n_in + n_out
    return theta


def _unpack(arch: NetworkArchitecture, theta: np.ndarray):
    if theta.shape != (arch.n_params,):
        raise LengthMismatch(
            f"theta has length {theta.shape}, expected {arch.n_params}")
    sizes = arch.layer_sizes()
    layers = []
    pos = 0
    for i in range(len(sizes) - 1):
        n_out, n_in = sizes[i + 1], sizes[i]
        w = theta[pos:pos + n_out * n_in].reshape(n_out, n_in)
        pos += n_out * n_in
        b = theta[pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def _normalize_inputs(arch: NetworkArchitecture, t, x) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != arch.state_dim:
        raise LengthMismatch("state has wrong dimension")
    tn = 2.0 * t / arch.horizon - 1.0
    lo = np.asarray(arch.x_lower)
    hi = np.asarray(arch.x_upper)
    xn = 2.0 * (x - lo) / (hi - lo) - 1.0
    tn = np.broadcast_to(tn, x.shape[:-1])
    return np.concatenate([tn[..., None], xn], axis=-1)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cached(arch: NetworkArchitecture, theta: np.ndarray,
                    inputs: np.ndarray):
    """Forward pass on normalized inputs (B, in); caches activations."""
    layers = _unpack(arch, theta)
    a = inputs
    cache = [a]
    for w, b in layers[:-1]:
        z = a @ w.T + b
        a = np.tanh(z)
        cache.append(a)
    w, b = layers[-1]
    z_out = cache[-1] @ w.T + b
    s = _sigmoid(z_out)
    lo = np.asarray(arch.u_lower)
    hi = np.asarray(arch.u_upper)
    out = lo + (hi - lo) * s
    return out, s, cache, layers


def forward(arch: NetworkArchitecture, theta: np.ndarray, t, x) -> np.ndarray:
    """Control at (t, x); batched over leading axes of x."""
    x = np.asarray(x, dtype=float)
    inputs = _normalize_inputs(arch, t, x)
    flat = inputs.reshape(-1, arch.input_dim)
    out, _, _, _ = _forward_cached(arch, np.asarray(theta, dtype=float), flat)
    return out.reshape(x.shape[:-1] + (arch.control_dim,))


def fit_loss(arch: NetworkArchitecture, theta: np.ndarray,
             inputs: np.ndarray, targets: np.ndarray) -> float:
    out, _, _, _ = _forward_cached(arch, theta, inputs)
    return float(np.sum((out - targets) ** 2))


def grad_fit_loss_raw(arch: NetworkArchitecture, theta: np.ndarray,
                      inputs: np.ndarray, targets: np.ndarray):
    """Loss and its exact gradient for the summed squared control mismatch."""
    theta = np.asarray(theta, dtype=float)
    out, s, cache, layers = _forward_cached(arch, theta, inputs)
    loss = float(np.sum((out - targets) ** 2))
    lo = np.asarray(arch.u_lower)
    hi = np.asarray(arch.u_upper)
    d_out = 2.0 * (out - targets)                       # (B, k)
    dz = d_out * (hi - lo) * s * (1.0 - s)              # output layer pre-act
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a_prev = cache[li]
        gw = dz.T @ a_prev
        gb = dz.sum(axis=0)
        grads.append((gw, gb))
        if li > 0:
            da = dz @ w
            dz = da * (1.0 - cache[li] ** 2)            # tanh'
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.ravel(), gb])
                           for gw, gb in grads])
    return loss, flat


def grad_fit_loss(arch: NetworkArchitecture, theta: np.ndarray,
                  control_field: np.ndarray, lattice, steps) -> np.ndarray:
    """Gradient of the grid-fit loss over all (time, node) samples."""
    inputs, targets = _fit_dataset(arch, control_field, lattice, steps)
    _, g = grad_fit_loss_raw(arch, theta, inputs, targets)
    return g


def _fit_dataset(arch: NetworkArchitecture, control_field: np.ndarray,
                 lattice, steps):
    n_time = control_field.shape[0]
    times = np.arange(n_time) * steps.h2
    t_col = np.repeat(times, lattice.n_nodes)
    x_rows = np.tile(lattice.points, (n_time, 1))
    inputs = _normalize_inputs(arch, t_col, x_rows)
    targets = control_field.reshape(-1, arch.control_dim)
    return inputs, targets


def fit_to_grid(arch: NetworkArchitecture, theta0: np.ndarray,
                control_field: np.ndarray, lattice, steps,
                trigger: float = 1e-3, max_steps: int = 10_000,
                m_bound: float = 10.0):
    """Least-squares fit of the network to a grid control field.

    Gradient descent with backtracking line search (loss never increases
    across accepted steps); stops when the loss decrement falls below
    ``trigger`` or the step budget runs out.  The result is clamped into
    the parameter box |theta_j| <= m_bound.
    """
    inputs, targets = _fit_dataset(arch, control_field, lattice, steps)
    theta = np.asarray(theta0, dtype=float).copy()
    loss, g = grad_fit_loss_raw(arch, theta, inputs, targets)
    lr = 1e-2
    for _ in range(max_steps):
        gnorm2 = float(g @ g)
        if gnorm2 == 0.0:
            break
        accepted = False
        for _ in range(40):
            cand = theta - lr * g
            cand_loss = fit_loss(arch, cand, inputs, targets)
            if cand_loss <= loss - 1e-4 * lr * gnorm2:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        decrement = loss - cand_loss
        theta = cand
        loss, g = grad_fit_loss_raw(arch, theta, inputs, targets)
        lr = min(lr * 1.5, 1.0)
        if decrement < trigger:
            break
    return np.clip(theta, -m_bound, m_bound), loss


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, arch: NetworkArchitecture, theta: np.ndarray) -> None:
    """Parameter CSV plus a sidecar recording the architecture."""
    with open(path, "w") as fh:
        fh.write("index,value\n")
        for i, v in enumerate(theta):
            fh.write(f"{i},{v:.17g}\n")
    with open(str(path) + ".arch", "w") as fh:
        fh.write(f"state_dim={arch.state_dim}\n")
        fh.write(f"control_dim={arch.control_dim}\n")
        fh.write(f"hidden={','.join(str(w) for w in arch.hidden)}\n")
        fh.write(f"horizon={arch.horizon:.17g}\n")
        for name in ("x_lower", "x_upper", "u_lower", "u_upper"):
            vals = getattr(arch, name)
            fh.write(f"{name}={','.join(f'{v:.17g}' for v in vals)}\n")


def load_checkpoint(path):
    """Inverse of save_checkpoint; round-trips bit-exactly."""
    fields = {}
    with open(str(path) + ".arch") as fh:
        for line in fh:
            key, _, val = line.strip().partition("=")
            fields[key] = val
    arch = NetworkArchitecture(
        state_dim=int(fields["state_dim"]),
        control_dim=int(fields["control_dim"]),
        hidden=tuple(int(w) for w in fields["hidden"].split(",") if w),
        horizon=float(fields["horizon"]),
        x_lower=tuple(float(v) for v in fields["x_lower"].split(",")),
        x_upper=tuple(float(v) for v in fields["x_upper"].split(",")),
        u_lower=tuple(float(v) for v in fields["u_lower"].split(",")),
        u_upper=tuple(float(v) for v in fields["u_upper"].split(",")),
    )
    values = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            values.append(float(line.split(",")[1]))
    return arch, np.array(values)
