"""Layer-by-layer reconstruction of the input image from weight gradients.

The pipeline walks the network back to front.  The FC layer falls first:
with a bias present, the gradient w.r.t. the bias IS the gradient w.r.t.
the layer output, so each FC input coordinate is a ratio of two observed
gradient entries (and the label, if withheld, is readable off gradient
signs).  Each conv layer then pins its input down through two linear
constraints -- the layer's forward map and the bilinear structure of its
weight gradient -- stacked into one system U x = V.  The first layer is
solved directly by minimum-norm least squares; interior layers are
solved in the preceding layer's pre-activation variable z (so the
activation is applied inside the objective), optionally with a pull-back
penalty that keeps z inside the column space of the preceding layer's
own forward operator.

Everything here is deterministic: same gradients in, same image out.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from gradleak import linop, net


class AttackError(RuntimeError):
    """Reconstruction failed; message carries the layer index and cause."""


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the per-layer descent solver.

    flip_pullback_branch inverts the condition deciding which interior
    layers receive the pull-back penalty (comparison switch; the default
    branch applies it exactly where the projector annihilates the
    preceding layer's range).
    """

    max_iters: int = 5000
    tol: float = 1e-10
    pullback_weight: float = 1.0
    step_init: float = 1.0
    flip_pullback_branch: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.pullback_weight < 0:
            raise ValueError("pullback_weight must be >= 0")
        if not self.step_init > 0:
            raise ValueError("step_init must be positive")


@dataclass
class ConvSystem:
    """The stacked constraint system U x = V of one conv layer.

    u rows: layer output dim + weight count; cols: layer input dim.
    rank is computed on first access and cached (it needs a full set of
    singular values, which is the expensive part).
    """

    u: np.ndarray
    v: np.ndarray
    layer_index: int
    input_dim: int
    _rank: int | None = field(default=None, repr=False)

    @property
    def rows(self):
        return self.u.shape[0]

    @property
    def cols(self):
        return self.u.shape[1]

    @property
    def rank(self):
        if self._rank is None:
            self._rank = linop.numerical_rank(self.u)
        return self._rank


class PullbackOperator:
    """Projector onto the orthogonal complement of a forward operator's
    column space.

    defined is True exactly when the operator is usable as a constraint:
    the matrix has full column rank and strictly more rows than columns
    (otherwise its range is the whole space, or the complement is not
    expressible as a function of the layer variable).  apply() works
    regardless, projecting with however much column space there is.
    """

    def __init__(self, basis, size, defined, activation=None):
        self._basis = basis          # orthonormal columns spanning the range
        self.size = size
        self.defined = defined
        self.activation = activation  # the layer whose variable this constrains
        self._projector = None

    def apply(self, z):
        if self._basis.shape[1] == 0:
            return np.array(z, dtype=np.float64)
        return z - self._basis @ (self._basis.T @ z)

    @property
    def projector(self):
        """Dense m x m projector; built lazily because apply() never needs it."""
        if self._projector is None:
            b = self._basis
            self._projector = np.eye(self.size) - b @ b.T
        return self._projector


@dataclass
class LayerSolution:
    """Outcome of one layer solve.

    x holds the solved variable: the reconstructed input vec(X) for the
    first layer, the preceding layer's pre-activation z for interior
    layers, or the recovered FC input for the FC stage.
    """

    x: np.ndarray
    objective_history: list
    residual_norm: float
    mode: str  # fc-exact | linear-lstsq | reparam | reparam+pullback
    iterations: int = 0


@dataclass
class AttackResult:
    """Everything copa_attack produces for one image."""

    image: np.ndarray          # reconstructed input, shaped (C, H, W)
    label: int
    label_inferred: bool
    fc_solution: LayerSolution
    conv_solutions: list       # LayerSolution per conv layer, front to back
    systems: list              # ConvSystem per conv layer, front to back
    timings: dict              # stage name -> seconds


def infer_label(grad_w_fc, grad_b_fc):
    """Read the label off the FC gradient signs.

    With a nonnegative FC input, the weight-gradient row of the true
    class is the only one whose entries share the opposite sign of all
    other rows.  When the row patterns are ambiguous, fall back to the
    unique negative bias-gradient entry (softmax minus one-hot is
    negative only at the true class).
    """
    grad_w_fc = np.asarray(grad_w_fc, dtype=np.float64)
    grad_b_fc = np.asarray(grad_b_fc, dtype=np.float64)
    row_sign = np.sign(np.sign(grad_w_fc).sum(axis=1))
    nonzero = row_sign[row_sign != 0]
    if nonzero.size:
        majority = 1.0 if (nonzero > 0).sum() >= (nonzero < 0).sum() else -1.0
        candidates = np.flatnonzero((row_sign != 0) & (row_sign != majority))
        if candidates.size == 1:
            return int(candidates[0])
    negative = np.flatnonzero(grad_b_fc < 0)
    if negative.size == 1:
        return int(negative[0])
    raise AttackError(
        "label is not identifiable from gradient signs "
        f"({negative.size} negative bias-gradient entries); "
        "supply the label explicitly")


def reconstruct_fc_input(grad_w, grad_z, threshold=1e-12):
    """Recover the FC layer input from its weight gradient.

    grad_w is the observed d J/d W (classes x in_dim); grad_z the
    gradient at the layer output, which with a bias term is exactly the
    observed d J/d b.  Since grad_w = outer(grad_z, x), any row k with
    grad_z[k] != 0 yields x = grad_w[k] / grad_z[k]; the largest entry
    is used to keep the division well conditioned.
    """
    grad_w = np.asarray(grad_w, dtype=np.float64)
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_w.shape[0] != grad_z.shape[0]:
        raise ValueError(f"grad_w has {grad_w.shape[0]} rows, grad_z "
                         f"{grad_z.shape[0]} entries")
    k = int(np.argmax(np.abs(grad_z)))
    if not abs(grad_z[k]) > threshold:
        raise AttackError("FC output gradient is numerically zero; the "
                          "rank-1 structure cannot be divided out")
    return grad_w[k] / grad_z[k]


def propagate_grads(weights, activation, grad_x_next, z_reconstructed):
    """One backward step through an activation + linear layer.

    weights is the layer's dense forward operator (circulant form).
    Returns (grad_z, grad_x): the gradient at the pre-activation and at
    the layer input.  The activation derivative is evaluated at the
    caller's z estimate -- the attacker has no true trace, so these are
    exact only when z_reconstructed is.
    """
    weights = np.asarray(weights, dtype=np.float64)
    grad_x_next = np.asarray(grad_x_next, dtype=np.float64).ravel()
    z_reconstructed = np.asarray(z_reconstructed, dtype=np.float64).ravel()
    if grad_x_next.shape != z_reconstructed.shape:
        raise ValueError(f"grad_x_next has {grad_x_next.size} entries, "
                         f"z_reconstructed {z_reconstructed.size}")
    if weights.shape[0] != z_reconstructed.size:
        raise ValueError(f"operator has {weights.shape[0]} rows, "
                         f"z has {z_reconstructed.size} entries")
    grad_z = grad_x_next * net.activation_derivative(activation,
                                                     z_reconstructed)
    return grad_z, weights.T @ grad_z


def build_conv_system(layer, kernel, z_target, grad_w_layer, grad_z,
                      layer_index=0, w_circ=None):
    """Stack the forward and gradient constraints of one conv layer.

    z_target is the attacker's target for the layer pre-activation,
    grad_w_layer the observed weight gradient (flat), grad_z the
    estimated gradient at the pre-activation.  Pass w_circ to reuse an
    already materialized forward operator.
    """
    geom = layer.geom
    z_target = np.asarray(z_target, dtype=np.float64).ravel()
    grad_w_layer = np.asarray(grad_w_layer, dtype=np.float64).ravel()
    if z_target.size != geom.output_dim:
        raise ValueError(f"z_target has {z_target.size} entries, layer "
                         f"outputs {geom.output_dim}")
    if grad_w_layer.size != geom.weight_count:
        raise ValueError(f"grad_w has {grad_w_layer.size} entries, layer "
                         f"has {geom.weight_count} weights")
    if w_circ is None:
        w_circ = linop.weight_circulant(kernel, geom)
    g_circ = linop.gradient_circulant(grad_z, geom)
    u = np.vstack([w_circ, g_circ])
    v = np.concatenate([z_target, grad_w_layer])
    return ConvSystem(u=u, v=v, layer_index=layer_index,
                      input_dim=geom.input_dim)


def pullback_operator(w_prev_circ, activation=None,
                      rel_tolerance=linop.RANK_REL_TOL):
    """Range-complement projector of a preceding layer's forward operator.

    The constraint is usable (defined) only when w_prev_circ has full
    column rank and more rows than columns: then every valid
    pre-activation lies in a proper subspace and the projector measures
    the violation.
    """
    w_prev_circ = np.asarray(w_prev_circ, dtype=np.float64)
    m, n = w_prev_circ.shape
    factors = linop.svd(w_prev_circ, thin=True)
    s = factors.singular_values
    if s.size and s[0] > 0:
        rank = int(np.count_nonzero(s > rel_tolerance * max(m, n) * s[0]))
    else:
        rank = 0
    basis = factors.left_basis[:, :rank]
    defined = (rank == n) and (m > n)
    return PullbackOperator(basis=basis, size=m, defined=defined,
                            activation=activation)


def _descent(u, v, activation, x_init, pullback, opts):
    """Minimize ||u @ act(x) - v||^2 (+ weight * ||P x||^2) from x_init.

    Plain gradient descent with a doubling/halving step: backtrack until
    the objective drops, then grow the step again.  Deterministic, and
    the recorded history is strictly decreasing by construction.
    """
    lam = opts.pullback_weight

    def objective(x):
        r = u @ net.activation_apply(activation, x) - v
        f = float(r @ r)
        if pullback is not None:
            px = pullback.apply(x)
            f += lam * float(px @ px)
        return f, r

    x = np.array(x_init, dtype=np.float64)
    f, r = objective(x)
    if not np.isfinite(f):
        raise AttackError("objective non-finite at initialization")
    history = [f]
    # below this, the residual is rounding noise relative to the data
    floor = (1e-13 * (1.0 + float(np.linalg.norm(v)))) ** 2
    step = opts.step_init
    iterations = 0
    for it in range(opts.max_iters):
        if f <= floor:
            break
        grad = 2.0 * net.activation_derivative(activation, x) * (u.T @ r)
        if pullback is not None:
            grad += (2.0 * lam) * pullback.apply(x)
        if not np.all(np.isfinite(grad)):
            raise AttackError(f"objective gradient non-finite at iteration {it}")
        accepted = False
        while step > 1e-20:
            x_new = x - step * grad
            f_new, r_new = objective(x_new)
            if np.isfinite(f_new) and f_new < f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # no descent direction left at any step size
        df = f - f_new
        x, f, r = x_new, f_new, r_new
        history.append(f)
        iterations = it + 1
        step *= 2.0
        if df <= opts.tol * max(f, floor):
            break
    residual = float(np.linalg.norm(u @ net.activation_apply(activation, x) - v))
    return x, history, residual, iterations


def solve_conv_layer(system, prev_activation, pullback, opts):
    """Solve one conv layer's constraint system.

    prev_activation None selects the direct least-squares mode (first
    layer: the variable is the image itself).  Otherwise the solve runs
    in the preceding layer's pre-activation variable, with the pull-back
    penalty added when an operator is passed.
    """
    if prev_activation is None:
        x = linop.lstsq_min_norm(system.u, system.v)
        residual = float(np.linalg.norm(system.u @ x - system.v))
        return LayerSolution(x=x, objective_history=[residual ** 2],
                             residual_norm=residual, mode="linear-lstsq")
    x_init = net.activation_inverse(
        prev_activation, linop.lstsq_min_norm(system.u, system.v))
    x, history, residual, iterations = _descent(
        system.u, system.v, prev_activation, x_init, pullback, opts)
    mode = "reparam+pullback" if pullback is not None else "reparam"
    return LayerSolution(x=x, objective_history=history,
                         residual_norm=residual, mode=mode,
                         iterations=iterations)


def copa_attack(spec, weights, grads, label=None, opts=None):
    """Run the whole reconstruction on one gradient capture.

    spec/weights must be the model the gradients were taken from.  label
    None triggers inference from gradient signs.  Returns an
    AttackResult whose image estimates the training input on the model's
    input scale.
    """
    opts = opts or SolverOptions()
    d = len(spec.convs)
    timings = {}

    t0 = time.perf_counter()
    label_inferred = label is None
    try:
        if label is None:
            label = infer_label(grads.fc_weight, grads.fc_bias)
        fc_input = reconstruct_fc_input(grads.fc_weight, grads.fc_bias)
    except (AttackError, ValueError) as exc:
        raise AttackError(f"FC stage: {exc}") from exc
    fc_residual = float(np.linalg.norm(
        np.outer(grads.fc_bias, fc_input) - grads.fc_weight))
    fc_solution = LayerSolution(x=fc_input, objective_history=[fc_residual ** 2],
                                residual_norm=fc_residual, mode="fc-exact")
    # gradient at the FC input (the FC activation is the identity)
    grad_x_next = weights.fc_weight.T @ grads.fc_bias
    timings["fc"] = time.perf_counter() - t0

    x_next = fc_input          # current estimate of X^(i+1), flat
    z_solved = None            # pre-activation recovered by the deeper solve
    conv_solutions = [None] * d
    systems = [None] * d
    w_circs = [None] * d
    for i in range(d - 1, -1, -1):
        t0 = time.perf_counter()
        layer = spec.convs[i]
        try:
            z_target = (z_solved if z_solved is not None else
                        net.activation_inverse(layer.activation, x_next))
            if w_circs[i] is None:
                w_circs[i] = linop.weight_circulant(weights.kernels[i],
                                                    layer.geom)
            grad_z, grad_x = propagate_grads(w_circs[i], layer.activation,
                                             grad_x_next, z_target)
            system = build_conv_system(layer, weights.kernels[i], z_target,
                                       grads.kernels[i].ravel(), grad_z,
                                       layer_index=i, w_circ=w_circs[i])
            if i == 0:
                solution = solve_conv_layer(system, None, None, opts)
            else:
                prev = spec.convs[i - 1]
                w_circs[i - 1] = linop.weight_circulant(
                    weights.kernels[i - 1], prev.geom)
                pull = pullback_operator(w_circs[i - 1],
                                         activation=layer.activation)
                use_pull = pull.defined != opts.flip_pullback_branch
                solution = solve_conv_layer(
                    system, prev.activation, pull if use_pull else None, opts)
                z_solved = solution.x
                x_next = net.activation_apply(prev.activation, solution.x)
            grad_x_next = grad_x
        except (AttackError, ValueError, np.linalg.LinAlgError) as exc:
            raise AttackError(f"conv layer {i}: {exc}") from exc
        systems[i] = system
        conv_solutions[i] = solution
        timings[f"conv{i}"] = time.perf_counter() - t0

    image = conv_solutions[0].x.reshape(spec.input_shape)
    timings["total"] = sum(timings.values())
    return AttackResult(image=image, label=label,
                        label_inferred=label_inferred,
                        fc_solution=fc_solution,
                        conv_solutions=conv_solutions, systems=systems,
                        timings=timings)
