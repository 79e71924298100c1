"""Analytic vector fields used as decoder stand-ins in tests.

Each field implements the decoder protocol: ``velocity(x, a, tape=None)``
working on single vectors or batches, with the taped path built from the
library's own primitives so gradients flow.
"""

import numpy as np

from revmap import autodiff as ad


class LinearField:
    """f(x, a) = B a: state independent and exactly odd."""

    def __init__(self, b):
        self.b = np.asarray(b, dtype=np.float64)
        self.state_dim = self.b.shape[0]
        self.action_dim = self.b.shape[1]

    def velocity(self, x, a, tape=None):
        spec = "ij,j->i" if np.ndim(ad._value(a)) == 1 else "ij,bj->bi"
        if tape is not None:
            return ad.einsum(spec, tape.leaf(self.b, requires_grad=False), a)
        return np.einsum(spec, self.b, ad._value(a))


class AffineStateField:
    """f(x, a) = c x + a: state Jacobian is exactly c * I."""

    def __init__(self, dim, c=2.0):
        self.state_dim = dim
        self.action_dim = dim
        self.c = float(c)

    def velocity(self, x, a, tape=None):
        return ad.add(ad.scale(x, self.c), a)


class QuadraticGainField:
    """f(x, a) = (1 + ||x||^2) B a: smooth, odd in a, state dependent."""

    def __init__(self, b):
        self.b = np.asarray(b, dtype=np.float64)
        self.state_dim = self.b.shape[0]
        self.action_dim = self.b.shape[1]

    def velocity(self, x, a, tape=None):
        xv = ad._value(x)
        spec_ba = "ij,j->i" if np.ndim(ad._value(a)) == 1 else "ij,bj->bi"
        if tape is not None:
            bvar = tape.leaf(self.b, requires_grad=False)
            ba = ad.einsum(spec_ba, bvar, a)
            if xv.ndim == 1:
                gain = ad.add(ad.einsum("i,i->", x, x), np.asarray(1.0))
                return ad.einsum("i,->i", ba, gain)
            gain = ad.add(ad.einsum("bi,bi->b", x, x), np.ones(xv.shape[0]))
            return ad.einsum("bi,b->bi", ba, gain)
        ba = np.einsum(spec_ba, self.b, ad._value(a))
        if xv.ndim == 1:
            return (1.0 + float(xv @ xv)) * ba
        return (1.0 + np.sum(xv * xv, axis=1, keepdims=True)) * ba


class CubicBlowupField:
    """f(x, a) = x^3 elementwise: diverges quickly from |x| > 1."""

    def __init__(self, dim):
        self.state_dim = dim
        self.action_dim = dim

    def velocity(self, x, a, tape=None):
        v = ad._value(x)
        with np.errstate(over="ignore"):
            return v * v * v
