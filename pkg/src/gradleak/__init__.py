"""gradleak: reconstruct a CNN's training image from its weight gradients.

The attack walks the network back to front.  The final fully-connected
layer is inverted exactly from the structure of its own gradient; every
convolution layer is then recovered by solving the linear system its
weight and gradient constraints impose on the layer input, expressed
through dense matricized (block-Toeplitz) convolution operators.  Rank
deficiency of those same systems yields a per-architecture leakage
metric, so a model can be scored without running the attack at all.

Public entry points live in the submodules:

    linop      dense convolution operators + SVD-backed linear algebra
    net        the victim CNN family, forward pass and hand-rolled backprop
    attack     the layer-by-layer reconstruction itself
    secmetric  the rank-deficiency security metric
    imaging    CIFAR-10 loading, PPM round-trip, TV denoising, MSE/PSNR
    cli        command-line front end (``gradleak <subcommand>``)
"""

__version__ = "0.1.0"

__all__ = ["linop", "net", "attack", "secmetric", "imaging", "cli", "__version__"]
