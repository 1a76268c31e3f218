"""
Monotonic mixing network
========================
Hypernetworks map the global state to the weights and biases of a two-layer
mixer over the per-agent Q-values:

    hidden = elu(q @ |W1(s)| + b1(s))
    Q_tot  = hidden @ |W2(s)| + b2(s)

A separate value head produces V(s). The absolute value on W1/W2 keeps
dQ_tot/dq_i >= 0, so per-agent greedy actions maximize Q_tot.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from nn_utils import GradSet, Mlp, MlpCache, ParamSet, backward, elu, elu_grad, forward

logger = logging.getLogger(__name__)

DEFAULT_MIXER_HIDDEN = 16
NET_NAMES = ("hyper_w1", "hyper_b1", "hyper_w2", "hyper_b2", "value")


@dataclass
class MixerCache:
    q: np.ndarray
    w1_raw: np.ndarray          # (B, N, h) before abs
    w2_raw: np.ndarray          # (B, h) before abs
    pre_hidden: np.ndarray      # (B, h)
    hidden: np.ndarray          # (B, h)
    nets: Dict[str, MlpCache]
    squeeze: bool


class MixingNetwork:
    def __init__(
        self,
        n_agents: int,
        state_dim: int,
        hidden: int = DEFAULT_MIXER_HIDDEN,
        rng: Optional[np.random.Generator] = None,
    ):
        if n_agents < 1 or state_dim < 1 or hidden < 1:
            raise ValueError("mixer needs n_agents, state_dim and hidden >= 1")
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.hidden = hidden
        self.nets: Dict[str, Mlp] = {
            "hyper_w1": Mlp([state_dim, n_agents * hidden], rng=rng),
            "hyper_b1": Mlp([state_dim, hidden], rng=rng),
            "hyper_w2": Mlp([state_dim, hidden], rng=rng),
            "hyper_b2": Mlp([state_dim, hidden, 1], rng=rng),
            "value": Mlp([state_dim, hidden, 1], rng=rng),
        }

    def parameters(self) -> Dict[str, ParamSet]:
        return {name: net.params for name, net in self.nets.items()}

    def clone(self) -> "MixingNetwork":
        twin = MixingNetwork(self.n_agents, self.state_dim, self.hidden)
        twin.load(self.parameters())
        return twin

    def load(self, params: Dict[str, ParamSet]) -> None:
        for name, net in self.nets.items():
            net.params.assign(params[name])


def mix(mixer: MixingNetwork, q: np.ndarray, state: np.ndarray) -> Tuple[np.ndarray, np.ndarray, MixerCache]:
    """
    Args:
        q: per-agent Q-values, (N,) or (B, N)
        state: encoded global state, (S,) or (B, S)

    Returns:
        (Q_tot, V, cache); scalars per row
    """
    q = np.asarray(q, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    squeeze = q.ndim == 1
    if squeeze:
        q, state = q[None, :], state[None, :]
    if q.shape[1] != mixer.n_agents:
        raise ValueError(f"expected {mixer.n_agents} Q-values, got {q.shape[1]}")

    B, N, h = q.shape[0], mixer.n_agents, mixer.hidden
    caches: Dict[str, MlpCache] = {}
    outs: Dict[str, np.ndarray] = {}
    for name, net in mixer.nets.items():
        outs[name], caches[name] = forward(net, state)

    w1_raw = outs["hyper_w1"].reshape(B, N, h)
    w2_raw = outs["hyper_w2"]
    pre_hidden = np.einsum("bn,bnh->bh", q, np.abs(w1_raw)) + outs["hyper_b1"]
    hidden = elu(pre_hidden)
    q_tot = np.sum(hidden * np.abs(w2_raw), axis=1) + outs["hyper_b2"][:, 0]
    v = outs["value"][:, 0]

    cache = MixerCache(q, w1_raw, w2_raw, pre_hidden, hidden, caches, squeeze)
    if squeeze:
        return q_tot[0], v[0], cache
    return q_tot, v, cache


def mix_backward(
    mixer: MixingNetwork,
    cache: MixerCache,
    d_qtot: np.ndarray,
    d_v: Optional[np.ndarray] = None,
) -> Tuple[Dict[str, GradSet], np.ndarray]:
    """
    Gradients of a loss with upstream dL/dQ_tot (and optionally dL/dV).

    Returns:
        (grads per network name, dL/dq with the shape of the q passed to mix)
    """
    d_qtot = np.atleast_1d(np.asarray(d_qtot, dtype=np.float64))
    B, N, h = cache.q.shape[0], mixer.n_agents, mixer.hidden

    d_w2 = d_qtot[:, None] * cache.hidden * np.sign(cache.w2_raw)
    d_hidden = d_qtot[:, None] * np.abs(cache.w2_raw)
    d_pre = d_hidden * elu_grad(cache.pre_hidden)
    d_w1 = cache.q[:, :, None] * d_pre[:, None, :] * np.sign(cache.w1_raw)
    dq = np.einsum("bh,bnh->bn", d_pre, np.abs(cache.w1_raw))

    upstream = {
        "hyper_w1": d_w1.reshape(B, N * h),
        "hyper_b1": d_pre,
        "hyper_w2": d_w2,
        "hyper_b2": d_qtot[:, None],
    }
    grads: Dict[str, GradSet] = {}
    for name, g in upstream.items():
        grads[name], _ = backward(mixer.nets[name], cache.nets[name], g)
    if d_v is not None:
        d_v = np.atleast_1d(np.asarray(d_v, dtype=np.float64))
        grads["value"], _ = backward(mixer.nets["value"], cache.nets["value"], d_v[:, None])

    return grads, (dq[0] if cache.squeeze else dq)


def state_value(mixer: MixingNetwork, state: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """V(s) alone, for the value loss and GAE."""
    out, cache = forward(mixer.nets["value"], np.atleast_2d(state))
    return out[:, 0], cache
