"""Tiny fully connected network with hand written forward and backward."""

from __future__ import annotations

import numpy as np


class DenseNet:
    """1 -> hidden -> 1 ReLU network used to score primitives for removal.

    Weights initialize uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """

    def __init__(self, hidden=32, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        b1 = 1.0 / np.sqrt(1.0)
        b2 = 1.0 / np.sqrt(hidden)
        self.w1 = rng.uniform(-b1, b1, size=(hidden, 1))
        self.b1 = rng.uniform(-b1, b1, size=(hidden,))
        self.w2 = rng.uniform(-b2, b2, size=(1, hidden))
        self.b2 = rng.uniform(-b2, b2, size=(1,))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def set_parameters(self, params):
        self.w1, self.b1, self.w2, self.b2 = [np.asarray(p, dtype=np.float64)
                                              for p in params]
        self.hidden = self.w1.shape[0]

    def squared_norm(self):
        return float(sum(np.sum(p * p) for p in self.parameters()))

    def forward(self, x):
        """Evaluate the net on a batch of scalars.

        Returns (out (N,), tape) where the tape carries the pre-activations
        needed by backward.
        """
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        pre = x[:, None] * self.w1[:, 0][None, :] + self.b1[None, :]   # (N, H)
        hid = np.maximum(pre, 0.0)
        out = hid @ self.w2[0] + self.b2[0]                            # (N,)
        tape = (x, pre, hid)
        return out, tape

    def backward(self, tape, d_out):
        """Adjoint of forward.

        Returns (d_x (N,), grads [d_w1, d_b1, d_w2, d_b2]) with the weight
        gradients summed over the batch.
        """
        x, pre, hid = tape
        d_out = np.atleast_1d(np.asarray(d_out, dtype=np.float64))
        d_b2 = np.array([d_out.sum()])
        d_w2 = (d_out[:, None] * hid).sum(axis=0)[None, :]
        d_hid = d_out[:, None] * self.w2[0][None, :]
        d_pre = d_hid * (pre > 0)
        d_b1 = d_pre.sum(axis=0)
        d_w1 = (d_pre * x[:, None]).sum(axis=0)[:, None]
        d_x = d_pre @ self.w1[:, 0]
        return d_x, [d_w1, d_b1, d_w2, d_b2]

    def relu_margin(self, x):
        """Smallest |pre-activation| over the batch; used by gradient checks
        to confirm the input sits away from ReLU kinks."""
        _, tape = self.forward(x)
        return float(np.min(np.abs(tape[1])))
