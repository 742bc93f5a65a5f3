import numpy as np
import pytest

from stabledyn.models import Hyper, StableDynamicsModel
from stabledyn import systems


SMALL_WIDTHS = {"gf": 12, "gu": 8, "gv": 8, "gf1": 10, "gf2": 10}


@pytest.fixture
def vdp_system():
    return systems.get_system("vdp")


@pytest.fixture
def vdp_hyper(vdp_system):
    return Hyper.for_system(vdp_system)


@pytest.fixture
def small_model(vdp_hyper):
    """A general-mode model small enough for finite-difference sweeps."""
    return StableDynamicsModel.initialize(vdp_hyper, seed=11, widths=SMALL_WIDTHS)


def make_model(hyper, seed=0, mode="general", small=True):
    widths = SMALL_WIDTHS if small else None
    return StableDynamicsModel.initialize(hyper, seed=seed, mode=mode, widths=widths)


def jitter_params(model, rng, scale=0.05):
    """Random offset on every parameter so no preactivation sits on a seam.

    Freshly initialized networks have all-zero biases, which parks every
    smoothed-ReLU preactivation of the origin evaluation exactly on its
    seam; finite differences are one-sided there while the analytic
    derivative is the true two-sided one.
    """
    model.set_params(model.get_params() + rng.uniform(-scale, scale, model.n_params))
    return model


def seam_margins(model, X, U=None):
    """Smallest distance of any seam-sensitive quantity from its seam."""
    pieces = model.eval_pieces(X, U)
    hp = model.hyper
    margins = []
    for name, net in model.nets.items():
        from stabledyn.diffcore import NumpyOps, net_apply
        handles = [(w, b) for w, b in zip(net.weights, net.biases)]
        inputs = {"gv": X, "gu": X, "gf1": X, "gf2": X}.get(name)
        if inputs is None:  # gf consumes (x, u*) and optionally (x, u)
            inputs = np.hstack((X, pieces["u_star"]))
        _, cache = net_apply(NumpyOps, handles, net.activations, net.srelu_width, inputs)
        for (z, _a), act in zip(cache, net.activations):
            if act == "smoothed_relu":
                margins.append(np.min(np.abs(z)))
                margins.append(np.min(np.abs(z - net.srelu_width)))
    margins.append(np.min(np.abs(pieces["w"])))
    margins.append(np.min(np.abs(pieces["w"] - hp.d)))
    margins.append(np.min(np.abs(pieces["resid"])))
    gn2 = np.sum(pieces["grad_v"] ** 2, axis=1)
    margins.append(np.min(np.abs(gn2 - hp.eps_proj)))
    return float(min(margins))
