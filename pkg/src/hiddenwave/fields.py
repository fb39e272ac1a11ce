"""Sine-activated implicit neural representations of continuous fields.

A ``SirenNet`` maps normalized coordinates in [-1, 1]^d to a scalar; a
``PositiveField`` exponentiates the output so the represented field is
strictly positive. ``eval_derivatives`` returns exact input derivatives via
nested automatic differentiation, converted to physical units through a
``CoordScale`` record (sine networks are frequency sensitive, so the
normalization constants travel with the model rather than the caller).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class CoordScale:
    """Affine map between physical and normalized coordinates/values.

    x_norm = (x_phys - centers[i]) / halves[i] per axis, and
    u_norm = (u_phys - value_mean) / value_std. The halves are the
    chain-rule factors for converting derivatives back to physical units.
    """

    centers: tuple
    halves: tuple
    value_mean: float = 0.0
    value_std: float = 1.0

    @classmethod
    def identity(cls, dim):
        return cls(centers=(0.0,) * dim, halves=(1.0,) * dim)

    def to_normalized(self, coords):
        c = np.asarray(coords, dtype=np.float64)
        return (c - np.asarray(self.centers)) / np.asarray(self.halves)

    def to_physical(self, coords):
        c = np.asarray(coords, dtype=np.float64)
        return c * np.asarray(self.halves) + np.asarray(self.centers)


class SirenNet:
    """MLP with sine activations, sin(w0 * (W x + b)) per hidden layer and an
    affine output layer.

    Initialization: first-layer weights uniform in [-1/input_dim, 1/input_dim],
    later layers uniform in [-sqrt(6/fan_in)/w0, sqrt(6/fan_in)/w0], biases
    zero. Deterministic for a fixed seed.
    """

    def __init__(self, input_dim, widths, w0=30.0, seed=0):
        if not widths:
            raise ValueError("widths must be a nonempty list of hidden sizes")
        if w0 <= 0:
            raise ValueError(f"w0 must be positive, got {w0}")
        self.input_dim = int(input_dim)
        self.widths = list(int(w) for w in widths)
        self.w0 = float(w0)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        fan_in = self.input_dim
        for k, width in enumerate(self.widths + [1]):
            if k == 0:
                bound = 1.0 / self.input_dim
            else:
                bound = np.sqrt(6.0 / fan_in) / self.w0
            w = rng.uniform(-bound, bound, size=(fan_in, width))
            self.weights.append(ad.Tensor(w, requires_grad=True))
            self.biases.append(ad.Tensor(np.zeros(width), requires_grad=True))
            fan_in = width

    def params(self):
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{k}", w))
            out.append((f"b{k}", b))
        return out

    def apply(self, coords):
        """Forward pass on a Tensor of shape (n, input_dim) -> Tensor (n,)."""
        if coords.ndim != 2 or coords.shape[1] != self.input_dim:
            raise ad.ShapeError(
                f"siren expects (n, {self.input_dim}) coords, got {coords.shape}")
        h = coords
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = ad.add(ad.matmul(h, w), b)
            h = ad.sin(ad.mul(z, self.w0)) if k < last else z
        return ad.reshape(h, (coords.shape[0],))

    def __call__(self, coords):
        """Convenience numpy-in / numpy-out evaluation (no graph)."""
        with ad.no_grad():
            return self.apply(ad.Tensor(np.atleast_2d(coords))).data

    def arch_header(self):
        return {"kind": "siren", "input_dim": self.input_dim,
                "widths": self.widths, "w0": self.w0}


class PositiveField:
    """Strictly positive field: exp of a SirenNet output."""

    def __init__(self, net):
        self.net = net
        self.input_dim = net.input_dim

    @classmethod
    def create(cls, input_dim, widths, w0=30.0, seed=0):
        return cls(SirenNet(input_dim, widths, w0=w0, seed=seed))

    def params(self):
        return self.net.params()

    def apply(self, coords):
        return ad.exp(self.net.apply(coords))

    def __call__(self, coords):
        with ad.no_grad():
            return self.apply(ad.Tensor(np.atleast_2d(coords))).data

    def arch_header(self):
        h = self.net.arch_header()
        h["kind"] = "positive"
        return h


@dataclass
class FieldDerivatives:
    """Field value and its derivatives in physical units.

    ``first[i]`` and ``second[i]`` are the first and pure second derivative
    along input axis i. Axis order is (x, y) or (x, y, t).
    """

    value: ad.Tensor
    first: tuple
    second: tuple

    @property
    def u(self):
        return self.value

    @property
    def u_x(self):
        return self.first[0]

    @property
    def u_y(self):
        return self.first[1]

    @property
    def u_t(self):
        return self.first[-1]

    @property
    def u_xx(self):
        return self.second[0]

    @property
    def u_yy(self):
        return self.second[1]

    @property
    def u_tt(self):
        return self.second[-1]


def eval_derivatives(field, coords, scale=None, create_graph=True):
    """Exact value/derivatives of an implicit field at (n, d) normalized
    coordinates, converted to physical units by `scale`.

    `field` needs only an ``apply(Tensor) -> Tensor`` method, so analytic
    oracle fields can be evaluated through the same path as networks.
    With ``create_graph=True`` the results stay differentiable with respect
    to the field parameters (needed during training).
    """
    coords = np.asarray(coords, dtype=np.float64)
    n, d = coords.shape
    if scale is None:
        scale = CoordScale.identity(d)
    c = ad.Tensor(coords, requires_grad=True)
    u_norm = field.apply(c)

    g1 = ad.grad(ad.sum_(u_norm), c, create_graph=True)
    firsts_norm = [g1[:, i] for i in range(d)]
    seconds_norm = []
    for i in range(d):
        gi = ad.grad(ad.sum_(firsts_norm[i]), c, create_graph=create_graph)
        seconds_norm.append(gi[:, i])

    sv = scale.value_std
    value = ad.add(ad.mul(u_norm, sv), scale.value_mean)
    first = tuple(ad.mul(fn, sv / scale.halves[i]) for i, fn in enumerate(firsts_norm))
    second = tuple(ad.mul(sn, sv / scale.halves[i] ** 2) for i, sn in enumerate(seconds_norm))
    return FieldDerivatives(value=value, first=first, second=second)
