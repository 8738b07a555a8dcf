"""The victim network family: a few conv layers feeding one FC layer.

Models here are deliberately small and untrained -- freshly initialised
CNNs whose per-layer weight gradients for a single image are handed to
the attack.  Conv layers are bias-free, the final fully-connected layer
carries the only bias and feeds softmax + negative log likelihood
directly (its activation is the identity).

Everything is hand-derived NumPy: forward pass, loss, and per-layer
weight gradients, with the intermediate tensors kept on a trace so other
modules can read the true Z and dJ/dZ of every layer.
"""

from dataclasses import dataclass, field

import numpy as np

from gradleak.linop import ConvGeometry

#: Clamp width for Tanh/Sigmoid inverses; keeps arctanh/logit finite
#: while staying far below reporting precision.
CLAMP_EPS = 1e-7

_KINDS = ("identity", "tanh", "sigmoid", "leakyrelu")


@dataclass(frozen=True)
class Activation:
    """Elementwise activation; kind in {identity, tanh, sigmoid, leakyrelu}."""

    kind: str
    slope: float = 0.01  # leakyrelu only

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; "
                             f"expected one of {_KINDS}")
        if self.kind == "leakyrelu" and not self.slope > 0:
            raise ValueError("leakyrelu slope must be positive (invertibility)")

    @staticmethod
    def parse(name):
        """Parse an activation name, e.g. 'tanh' or 'leakyrelu:0.02'."""
        name = name.strip().lower()
        if name.startswith("leakyrelu:"):
            return Activation("leakyrelu", slope=float(name.split(":", 1)[1]))
        return Activation(name)

    def __str__(self):
        if self.kind == "leakyrelu" and self.slope != 0.01:
            return f"leakyrelu:{self.slope:g}"
        return self.kind


def _check_finite(v):
    if not np.all(np.isfinite(v)):
        raise ValueError("activation input contains non-finite values")
    return v


def activation_apply(a, v):
    v = _check_finite(np.asarray(v, dtype=np.float64))
    if a.kind == "identity":
        return v.copy()
    if a.kind == "tanh":
        return np.tanh(v)
    if a.kind == "sigmoid":
        # stable in both tails
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    return np.where(v > 0, v, a.slope * v)


def activation_derivative(a, v):
    v = _check_finite(np.asarray(v, dtype=np.float64))
    if a.kind == "identity":
        return np.ones_like(v)
    if a.kind == "tanh":
        t = np.tanh(v)
        return 1.0 - t * t
    if a.kind == "sigmoid":
        s = activation_apply(a, v)
        return s * (1.0 - s)
    return np.where(v > 0, 1.0, a.slope)


def activation_inverse(a, v):
    """Inverse on the clamped range: Tanh inputs are pulled into
    (-1+eps, 1-eps) and Sigmoid inputs into (eps, 1-eps), eps = 1e-7."""
    v = _check_finite(np.asarray(v, dtype=np.float64))
    if a.kind == "identity":
        return v.copy()
    if a.kind == "tanh":
        return np.arctanh(np.clip(v, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS))
    if a.kind == "sigmoid":
        p = np.clip(v, CLAMP_EPS, 1.0 - CLAMP_EPS)
        return np.log(p / (1.0 - p))
    return np.where(v > 0, v, v / a.slope)


@dataclass(frozen=True)
class ConvLayer:
    geom: ConvGeometry
    activation: Activation


@dataclass(frozen=True)
class FcLayer:
    in_dim: int
    out_dim: int
    # activation fixed at identity, bias always present


@dataclass(frozen=True)
class ModelSpec:
    """Conv stack plus final FC layer; shapes must chain."""

    convs: tuple
    fc: FcLayer

    def __post_init__(self):
        if not self.convs:
            raise ValueError("model needs at least one conv layer")
        for prev, cur in zip(self.convs, self.convs[1:]):
            g, h = prev.geom, cur.geom
            ok = (h.in_channels == g.out_channels
                  and h.in_height == g.out_height
                  and h.in_width == g.out_width)
            if not ok:
                raise ValueError(
                    f"conv chain breaks: {g.out_channels}x{g.out_height}x"
                    f"{g.out_width} feeds {h.in_channels}x{h.in_height}x{h.in_width}")
        last = self.convs[-1].geom
        if self.fc.in_dim != last.output_dim:
            raise ValueError(f"fc expects {self.fc.in_dim} inputs, last conv "
                             f"produces {last.output_dim}")

    @property
    def class_count(self):
        return self.fc.out_dim

    @property
    def input_shape(self):
        g = self.convs[0].geom
        return (g.in_channels, g.in_height, g.in_width)


@dataclass(frozen=True)
class ModelWeights:
    kernels: tuple        # one (out_ch, in_ch, k, k) array per conv layer
    fc_weight: np.ndarray  # (class_count, fc_in)
    fc_bias: np.ndarray    # (class_count,)


@dataclass
class ForwardTrace:
    """Every intermediate of one forward (and optionally backward) pass.

    inputs[i] is X^(i), the tensor entering conv layer i; inputs[d] is the
    (shaped) FC input.  pre_acts[i] is Z^(i).  The grad_* fields are None
    until loss_and_gradients fills them.
    """

    inputs: list
    pre_acts: list
    logits: np.ndarray
    loss: float | None = None
    label: int | None = None
    grad_z: list | None = None      # dJ/dZ^(i) per conv layer
    grad_x: list | None = None      # dJ/dX^(i) per conv layer
    fc_grad_x: np.ndarray | None = None  # dJ/d(flattened FC input)

    @property
    def fc_input(self):
        return self.inputs[-1].ravel()


@dataclass(frozen=True)
class GradientCapture:
    """What the attacker sees: per-layer weight gradients and the label."""

    kernels: tuple         # dJ/dW per conv layer, kernel-shaped
    fc_weight: np.ndarray  # dJ/dW for the FC layer
    fc_bias: np.ndarray    # dJ/dB for the FC layer
    label: int


def cnn3_variant(index, activations="tanh"):
    """The four stock three-layer architectures (3x32x32 input, 10 classes).

    index 1..4 selects (kernel, channels, stride) per conv layer:
      1: (3,6,1), (4,3,2)   2: (4,6,2), (3,3,2)
      3: (3,6,1), (3,9,1)   4: (3,1,1), (3,6,1)

    activations: one name for both conv layers, or a pair of names.
    """
    tables = {
        1: ((3, 6, 1), (4, 3, 2)),
        2: ((4, 6, 2), (3, 3, 2)),
        3: ((3, 6, 1), (3, 9, 1)),
        4: ((3, 1, 1), (3, 6, 1)),
    }
    if index not in tables:
        raise ValueError(f"variant index must be 1..4, got {index}")
    if isinstance(activations, str):
        activations = (activations, activations)
    if len(activations) != 2:
        raise ValueError("need one activation name per conv layer")
    convs = []
    ch, h, w = 3, 32, 32
    for (k, out_ch, s), act in zip(tables[index], activations):
        geom = ConvGeometry(in_height=h, in_width=w, in_channels=ch,
                            kernel_size=k, out_channels=out_ch, stride=s)
        convs.append(ConvLayer(geom, Activation.parse(act)))
        ch, h, w = out_ch, geom.out_height, geom.out_width
    fc = FcLayer(in_dim=ch * h * w, out_dim=10)
    return ModelSpec(convs=tuple(convs), fc=fc)


def init_weights(spec, seed, low=-0.5, high=0.5):
    """I.i.d. uniform [low, high) weights from one seeded generator.

    Draw order is fixed (conv kernels front to back, then FC weight, then
    FC bias), so (spec, seed, low, high) reproduces weights bit-exactly.
    """
    if not low < high:
        raise ValueError(f"need low < high, got [{low}, {high}]")
    rng = np.random.default_rng(seed)
    kernels = []
    for layer in spec.convs:
        g = layer.geom
        kernels.append(rng.uniform(low, high, size=(
            g.out_channels, g.in_channels, g.kernel_size, g.kernel_size)))
    fc_w = rng.uniform(low, high, size=(spec.fc.out_dim, spec.fc.in_dim))
    fc_b = rng.uniform(low, high, size=spec.fc.out_dim)
    return ModelWeights(kernels=tuple(kernels), fc_weight=fc_w, fc_bias=fc_b)


def _conv_windows(x, k, stride):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _conv_forward(x, kernel, stride):
    win = _conv_windows(x, kernel.shape[2], stride)
    return np.einsum("ocij,cyxij->oyx", kernel, win)


def _conv_backward(x, kernel, stride, grad_out):
    """Returns (dJ/dkernel, dJ/dx) given dJ/d(conv output)."""
    k = kernel.shape[2]
    win = _conv_windows(x, k, stride)
    grad_kernel = np.einsum("oyx,cyxij->ocij", grad_out, win)
    grad_x = np.zeros_like(x)
    oh, ow = grad_out.shape[1:]
    for dy in range(k):
        for dx in range(k):
            grad_x[:, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride] \
                += np.einsum("oyx,oc->cyx", grad_out, kernel[:, :, dy, dx])
    return grad_kernel, grad_x


def softmax(logits):
    e = np.exp(logits - logits.max())
    return e / e.sum()


def nll_loss(logits, label):
    """Softmax + negative log likelihood, computed stably."""
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def forward(spec, weights, x0, label=None):
    """Run the model on one image; loss is filled only when a label is given."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != spec.input_shape:
        raise ValueError(f"input shape {x0.shape} does not match model "
                         f"input {spec.input_shape}")
    inputs, pre_acts = [x0], []
    x = x0
    for layer, kernel in zip(spec.convs, weights.kernels):
        z = _conv_forward(x, kernel, layer.geom.stride)
        pre_acts.append(z)
        x = activation_apply(layer.activation, z)
        inputs.append(x)
    logits = weights.fc_weight @ x.ravel() + weights.fc_bias
    loss = None if label is None else nll_loss(logits, label)
    return ForwardTrace(inputs=inputs, pre_acts=pre_acts, logits=logits,
                        loss=loss, label=label)


def loss_and_gradients(spec, weights, x0, label):
    """Forward plus hand-derived backprop for a single (image, label).

    Returns (loss, GradientCapture, trace); the trace additionally carries
    dJ/dZ and dJ/dX for every conv layer and dJ/d(FC input).
    """
    if not 0 <= label < spec.class_count:
        raise ValueError(f"label {label} out of range for "
                         f"{spec.class_count} classes")
    trace = forward(spec, weights, x0, label=label)
    # logits gradient of softmax+NLL
    gz_fc = softmax(trace.logits)
    gz_fc[label] -= 1.0
    fc_in = trace.fc_input
    grad_fc_w = np.outer(gz_fc, fc_in)
    grad_fc_b = gz_fc.copy()
    grad_post = (weights.fc_weight.T @ gz_fc).reshape(trace.inputs[-1].shape)
    trace.fc_grad_x = grad_post.ravel().copy()

    d = len(spec.convs)
    grad_kernels = [None] * d
    grad_z = [None] * d
    grad_x = [None] * d
    for i in range(d - 1, -1, -1):
        layer = spec.convs[i]
        gz = grad_post * activation_derivative(layer.activation,
                                               trace.pre_acts[i])
        gk, gx = _conv_backward(trace.inputs[i], weights.kernels[i],
                                layer.geom.stride, gz)
        grad_z[i], grad_x[i], grad_kernels[i] = gz, gx, gk
        grad_post = gx
    trace.grad_z, trace.grad_x = grad_z, grad_x
    grads = GradientCapture(kernels=tuple(grad_kernels), fc_weight=grad_fc_w,
                            fc_bias=grad_fc_b, label=label)
    return trace.loss, grads, trace


# ---------------------------------------------------------------------------
# model config files


@dataclass(frozen=True)
class ModelConfig:
    """Parsed model description: architecture plus init parameters."""

    spec: ModelSpec
    seed: int = 0
    init_low: float = -0.5
    init_high: float = 0.5


def parse_model_config(text):
    """Parse the plain-text model description format.

    One layer per line, in order::

        conv k=3 ch=6 s=1 act=tanh
        conv k=4 ch=3 s=2 act=tanh
        fc out=10 act=identity
        seed=11
        init_low=-0.5
        init_high=0.5

    '#' starts a comment.  An optional `input=CxHxW` line overrides the
    default 3x32x32 input.  The FC act must be identity; its in-dim is
    implied by the conv chain.
    """
    conv_rows, fc_out = [], None
    fields = {"seed": 0, "init_low": -0.5, "init_high": 0.5}
    in_shape = (3, 32, 32)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("conv"):
                kv = dict(part.split("=", 1) for part in line.split()[1:])
                conv_rows.append((int(kv["k"]), int(kv["ch"]), int(kv["s"]),
                                  Activation.parse(kv.get("act", "identity"))))
            elif line.startswith("fc"):
                kv = dict(part.split("=", 1) for part in line.split()[1:])
                act = kv.get("act", "identity").strip().lower()
                if act != "identity":
                    raise ValueError("fc activation must be identity")
                fc_out = int(kv["out"])
            elif line.startswith("input"):
                dims = line.split("=", 1)[1].lower().split("x")
                in_shape = tuple(int(v) for v in dims)
                if len(in_shape) != 3:
                    raise ValueError("input wants CxHxW")
            else:
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in fields:
                    raise ValueError(f"unknown field {key!r}")
                fields[key] = int(val) if key == "seed" else float(val)
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"model config line {lineno}: "
                             f"cannot parse {raw.strip()!r} ({exc})") from None
    if fc_out is None:
        raise ValueError("model config has no fc line")
    if not conv_rows:
        raise ValueError("model config has no conv lines")
    convs = []
    ch, h, w = in_shape
    for k, out_ch, s, act in conv_rows:
        geom = ConvGeometry(in_height=h, in_width=w, in_channels=ch,
                            kernel_size=k, out_channels=out_ch, stride=s)
        convs.append(ConvLayer(geom, act))
        ch, h, w = out_ch, geom.out_height, geom.out_width
    spec = ModelSpec(convs=tuple(convs), fc=FcLayer(in_dim=ch * h * w,
                                                    out_dim=fc_out))
    return ModelConfig(spec=spec, seed=fields["seed"],
                       init_low=fields["init_low"],
                       init_high=fields["init_high"])


def format_model_config(config):
    """Inverse of parse_model_config (up to comments and ordering)."""
    spec = config.spec
    g0 = spec.convs[0].geom
    lines = [f"input={g0.in_channels}x{g0.in_height}x{g0.in_width}"]
    for layer in spec.convs:
        g = layer.geom
        lines.append(f"conv k={g.kernel_size} ch={g.out_channels} "
                     f"s={g.stride} act={layer.activation}")
    lines.append(f"fc out={spec.fc.out_dim} act=identity")
    lines.append(f"seed={config.seed}")
    lines.append(f"init_low={config.init_low:g}")
    lines.append(f"init_high={config.init_high:g}")
    return "\n".join(lines) + "\n"


def load_model_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model_config(fh.read())
