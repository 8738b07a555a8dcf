"""Architecture-leakage score from the rank deficiency of layer systems.

Each conv layer of a model pins its input down through a stacked linear
system (forward constraint over gradient constraint).  Whenever that
system has full column rank, the layer input is uniquely recoverable;
every missing rank is a direction the gradients say nothing about.  The
score sums the per-layer deficiencies, weighted so that earlier layers
(closer to the image) count more:

    score = sum over conv layers i=1..d of ((d - (i-1)) / d) * (rank(U_i) - n_i)

It is 0 for a fully recoverable architecture and increasingly negative
for leak-resistant ones.  The rank of U_i depends on a probe gradient,
so the score is defined relative to a documented probe (weights seed,
image, label); in practice ranks are generically constant across probes.
"""

import json
from dataclasses import dataclass

import numpy as np

from gradleak import linop, net


@dataclass(frozen=True)
class LayerMetric:
    index: int          # 1-based, front (closest to the image) to back
    rows: int
    cols: int           # n_i, the layer input dimension
    rank: int
    contribution: float


@dataclass(frozen=True)
class MetricReport:
    layers: tuple
    total: float
    probe: dict

    def as_dict(self):
        return {
            "layers": [
                {"index": lm.index, "rows": lm.rows, "cols": lm.cols,
                 "rank": lm.rank, "contribution": lm.contribution}
                for lm in self.layers
            ],
            "total": self.total,
            "probe": dict(self.probe),
        }

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def security_metric(spec, weights, probe_image, probe_label,
                    rel_tolerance=linop.RANK_REL_TOL, probe_info=None):
    """Score one (architecture, weights) pair with a concrete probe.

    Runs a forward/backward pass on the probe image to get the true
    per-layer output gradients, stacks each layer's constraint system,
    and measures its numerical rank.  probe_info (e.g. seed and image
    id) is carried into the report verbatim.
    """
    _, _, trace = net.loss_and_gradients(spec, weights, probe_image,
                                         probe_label)
    d = len(spec.convs)
    layers = []
    total = 0.0
    for j, layer in enumerate(spec.convs):
        geom = layer.geom
        u = np.vstack([
            linop.weight_circulant(weights.kernels[j], geom),
            linop.gradient_circulant(trace.grad_z[j], geom),
        ])
        rank = linop.numerical_rank(u, rel_tolerance)
        weight = (d - j) / d
        contribution = weight * (rank - geom.input_dim)
        total += contribution
        layers.append(LayerMetric(index=j + 1, rows=u.shape[0],
                                  cols=geom.input_dim, rank=rank,
                                  contribution=contribution))
    probe = {"seed": None, "image": None, "label": int(probe_label)}
    if probe_info:
        probe.update(probe_info)
    return MetricReport(layers=tuple(layers), total=total, probe=probe)


def upper_bound_metric(spec):
    """Gradient-free upper bound on the score.

    Substitutes the structural bound min(rows, n_i) for each rank;
    computable from the architecture alone and never below the
    probe-based score.
    """
    d = len(spec.convs)
    total = 0.0
    for j, layer in enumerate(spec.convs):
        geom = layer.geom
        rows = geom.output_dim + geom.weight_count
        total += (d - j) / d * (min(rows, geom.input_dim) - geom.input_dim)
    return total
