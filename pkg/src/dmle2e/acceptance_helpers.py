"""Self-contained fixtures for gradient and acceptance checking.

The full-system gradient check builds a miniature but complete training
loss (transmit DSP -> recurrent surrogate -> noise -> receive DSP ->
cross-entropy) with every transceiver parameter registered, then compares
tape gradients against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .autoencoder import ae_loss, init_ae_params
from .channel import AnalogChainParams, awg_tx_filter
from .grad.checks import check_gradient
from .surrogate import SurrogateModel, init_model


def small_surrogate(seed: int = 0, hidden: int = 8) -> SurrogateModel:
    """Randomly initialized small recurrent model (structure only; the
    gradient check needs no trained weights)."""
    model = init_model(hidden, seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xC0FFEE)))
    return SurrogateModel(
        hidden,
        model.w_ih + rng.normal(0, 0.2, model.w_ih.shape),
        model.w_hh + rng.normal(0, 0.2, model.w_hh.shape),
        model.b + rng.normal(0, 0.1, model.b.shape),
        model.w_ro + rng.normal(0, 0.2, model.w_ro.shape),
        model.b_ro,
    )


def full_ae_loss_check(seed: int = 0, h: float = 1e-5) -> float:
    """Max relative gradient error of the complete system loss over all
    41 transceiver parameters (float64, central differences)."""
    model = small_surrogate(seed)
    chain = AnalogChainParams()
    awg = awg_tx_filter(chain, 20e9)
    sym_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5E7)))
    batch = sym_rng.integers(0, 4, size=(2, 32))
    init = init_ae_params()
    params = {k: v.copy() for k, v in init.trainable().items()}
    # move off the symmetric init point so every coordinate is generic
    jitter = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x11,)))
    for k, v in params.items():
        params[k] = v + jitter.normal(0, 0.05, v.shape)

    # the gradient contract treats the noise as data, so the finite
    # difference comparison pins one realization up front
    noise_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xA0)))
    noise = noise_rng.normal(0.0, 0.03, size=(batch.shape[0], 2 * batch.shape[1]))

    def build(tape, nodes):
        loss, _, _ = ae_loss(
            {k: n for k, n in nodes.items()},
            batch,
            model,
            snr_db=15.0,
            rng=noise_rng,
            awg_taps=awg,
            phase=0,
            edge_symbols=4,
            tape=tape,
            fixed_noise=noise,
        )
        return loss

    return check_gradient(build, params, h=h)
