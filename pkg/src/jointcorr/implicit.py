"""Latent-conditioned implicit functions f(x, z) with analytic gradients.

Every generator is negative inside and positive outside.  Methods accept
a single point of shape (3,) or a batch of shape (N, 3); the latent code
is a vector of length ``latent_dim``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

HUMAN_GRID_DIMS = (64, 77, 64)
ANIMAL_GRID_DIMS = (82, 50, 71)
DEFAULT_PATH_STEPS = 10
DEGENERATE_GRAD = 1e-8


class ImplicitGenerator:
    """Base class; subclasses implement the batched ``_value`` and ``_grads``."""

    latent_dim: int = 0
    variant: str = "base"

    def _prep(self, x, z):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if x.shape[-1:] != (3,):
            raise ShapeMismatchError(f"points must have 3 coordinates, got shape {x.shape}")
        x = x.reshape(-1, 3)
        z = np.asarray(z, dtype=np.float64).ravel()
        if z.size != self.latent_dim:
            raise ShapeMismatchError(f"latent code has dimension {z.size}, generator expects {self.latent_dim}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent code has non-finite entries")
        return x, z, single

    def value(self, x, z):
        x, z, single = self._prep(x, z)
        f = self._value(x, z)
        return float(f[0]) if single else f

    def grad_x(self, x, z):
        x, z, single = self._prep(x, z)
        gx, _ = self._grads(x, z)
        return gx[0] if single else gx

    def grad_z(self, x, z):
        x, z, single = self._prep(x, z)
        _, gz = self._grads(x, z)
        return gz[0] if single else gz

    def value_and_grads(self, x, z):
        """Batched (f, df/dx, df/dz) for (N, 3) points."""
        x, z, _ = self._prep(x, z)
        gx, gz = self._grads(x, z)
        return self._value(x, z), gx, gz

    def _value(self, x, z):  # pragma: no cover - abstract
        raise NotImplementedError

    def _grads(self, x, z):  # pragma: no cover - abstract
        raise NotImplementedError


def evaluate(gen: ImplicitGenerator, x, z):
    return gen.value(x, z)


def grad_x(gen: ImplicitGenerator, x, z):
    return gen.grad_x(x, z)


def grad_z(gen: ImplicitGenerator, x, z):
    return gen.grad_z(x, z)


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0), n[..., 0]


class SphereGenerator(ImplicitGenerator):
    """f = |x - c| - (r0 + w . z); by default r = z_1."""

    variant = "sphere"

    def __init__(self, latent_dim=1, center=(0.0, 0.0, 0.0), base_radius=0.0, weights=None):
        self.latent_dim = int(latent_dim)
        self.center = np.asarray(center, dtype=np.float64)
        self.base_radius = float(base_radius)
        if weights is None:
            weights = np.eye(self.latent_dim)[0]
        self.weights = np.asarray(weights, dtype=np.float64).ravel()
        if self.weights.size != self.latent_dim:
            raise ShapeMismatchError("radius weights must match latent_dim")

    def radius(self, z):
        return self.base_radius + float(self.weights @ np.asarray(z, dtype=np.float64).ravel())

    def _value(self, x, z):
        return np.linalg.norm(x - self.center, axis=1) - self.radius(z)

    def _grads(self, x, z):
        u, _ = _unit(x - self.center)
        return u, np.tile(-self.weights, (x.shape[0], 1))


class EllipsoidGenerator(ImplicitGenerator):
    """f = |(x - c) / a| - 1 with semi-axes a_k = base_k * exp(z_k)."""

    variant = "ellipsoid"
    latent_dim = 3

    def __init__(self, base_axes=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
        self.base_axes = np.asarray(base_axes, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)

    def axes(self, z):
        return self.base_axes * np.exp(np.asarray(z, dtype=np.float64).ravel())

    @staticmethod
    def code_for_axes(axes, base_axes=(1.0, 1.0, 1.0)):
        return np.log(np.asarray(axes, dtype=np.float64) / np.asarray(base_axes, dtype=np.float64))

    def _value(self, x, z):
        return np.linalg.norm((x - self.center) / self.axes(z), axis=1) - 1.0

    def _grads(self, x, z):
        a = self.axes(z)
        y = (x - self.center) / a
        r = np.linalg.norm(y, axis=1, keepdims=True)
        r = np.where(r > 0, r, 1.0)
        gx = y / a / r
        # d|y|/da_k = -y_k^2 / (a_k |y|), da_k/dz_k = a_k
        gz = -(y * y) / r
        return gx, gz


class TranslatedGenerator(ImplicitGenerator):
    """f(x, z) = f0(x - U^T z) for a fixed base field f0 = base(., base_code)."""

    variant = "translated"

    def __init__(self, base: ImplicitGenerator, base_code, directions):
        self.base = base
        self.base_code = np.asarray(base_code, dtype=np.float64).ravel()
        u = np.asarray(directions, dtype=np.float64)
        self.directions = u.reshape(-1, 3)
        self.latent_dim = self.directions.shape[0]

    def shift(self, z):
        return np.asarray(z, dtype=np.float64).ravel() @ self.directions

    def _value(self, x, z):
        return self.base._value(x - self.shift(z), self.base_code)

    def _grads(self, x, z):
        gx, _ = self.base._grads(x - self.shift(z), self.base_code)
        return gx, -gx @ self.directions.T


def _sh_basis(u):
    """Low-order polynomial basis on unit vectors and its gradients in u."""
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    one, zero = np.ones_like(x), np.zeros_like(x)
    vals = [x, y, z, x * y, y * z, z * x, x * x - y * y, 3 * z * z - 1, x * y * z]
    grads = [
        (one, zero, zero), (zero, one, zero), (zero, zero, one),
        (y, x, zero), (zero, z, y), (z, zero, x),
        (2 * x, -2 * y, zero), (zero, zero, 6 * z), (y * z, x * z, x * y),
    ]
    return np.stack(vals, axis=1), np.stack([np.stack(g, axis=1) for g in grads], axis=1)


def fibonacci_sphere(count):
    """Nearly uniform unit vectors (golden-angle spiral)."""
    k = np.arange(count) + 0.5
    zc = 1.0 - 2.0 * k / count
    r = np.sqrt(1.0 - zc * zc)
    th = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([r * np.cos(th), r * np.sin(th), zc], axis=1)


class BumpFieldGenerator(ImplicitGenerator):
    """Star-shaped field f = |x| - 1 - scale * sum_k z_k phi_k(x / |x|).

    ``basis="harmonic"`` uses low-order polynomials of the unit vector
    (at most 9); ``basis="gaussian"`` uses localized bumps
    ``exp(-|u - p_k|^2 / (2 width^2))`` centred on a Fibonacci spiral.
    """

    variant = "bump"
    MAX_HARMONIC = 9

    def __init__(self, latent_dim=8, scale=1.0, basis="harmonic", width=0.3):
        if basis not in ("harmonic", "gaussian"):
            raise ValueError(f"unknown basis {basis!r}")
        if latent_dim < 1 or (basis == "harmonic" and latent_dim > self.MAX_HARMONIC):
            raise ValueError(f"latent_dim out of range for the {basis} basis")
        self.latent_dim = int(latent_dim)
        self.scale = float(scale)
        self.basis = basis
        self.width = float(width)
        self.centers = fibonacci_sphere(self.latent_dim) if basis == "gaussian" else None

    def _basis(self, u):
        if self.basis == "harmonic":
            phi, dphi = _sh_basis(u)
            return phi[:, :self.latent_dim], dphi[:, :self.latent_dim]
        diff = u[:, None, :] - self.centers[None, :, :]
        phi = np.exp(-np.sum(diff * diff, axis=2) / (2 * self.width ** 2))
        return phi, -diff / self.width ** 2 * phi[:, :, None]

    def radius(self, u, z):
        """Surface radius along unit directions ``u``."""
        phi, _ = self._basis(np.asarray(u, dtype=np.float64).reshape(-1, 3))
        return 1.0 + self.scale * phi @ np.asarray(z, dtype=np.float64).ravel()

    def _value(self, x, z):
        u, r = _unit(x)
        phi, _ = self._basis(u)
        return r - 1.0 - self.scale * phi @ z

    def _grads(self, x, z):
        u, r = _unit(x)
        phi, dphi = self._basis(u)
        g_u = self.scale * np.einsum("k,nkj->nj", z, dphi)
        # project onto the tangent plane and divide by |x|
        tang = g_u - np.sum(g_u * u, axis=1, keepdims=True) * u
        rr = np.where(r > 0, r, 1.0)[:, None]
        return u - tang / rr, -self.scale * phi


def _arc_point(s, kappa):
    """Planar circular arc through the origin with unit tangent (1, 0) at s=0."""
    t = kappa * s
    ax = s * np.sinc(t / np.pi)
    ay = 0.5 * kappa * s * s * np.sinc(t / (2 * np.pi)) ** 2
    return ax, ay


def _arc_dkappa(s, kappa):
    t = kappa * s
    small = np.abs(t) < 1e-2
    ts = np.where(small, 1.0, t)
    ks = np.where(small, 1.0, kappa)
    dx_big = (ts * np.cos(ts) - np.sin(ts)) / (ks * ks)
    dy_big = (ts * np.sin(ts) - (1 - np.cos(ts))) / (ks * ks)
    dx_small = -kappa * s ** 3 / 3 + kappa ** 3 * s ** 5 / 30
    dy_small = s * s / 2 - kappa ** 2 * s ** 4 / 8 + kappa ** 4 * s ** 6 / 144
    return np.where(small, dx_small, dx_big), np.where(small, dy_small, dy_big)


def _arc_param(x, kappa, half):
    """Arc-length parameter of the closest arc point, clamped to the arc."""
    if abs(kappa) < 1e-12:
        s = x[:, 0].copy()
    else:
        s = np.arctan2(kappa * x[:, 0], 1.0 - kappa * x[:, 1]) / kappa
    return np.clip(s, -half, half)


class BentCapsuleGenerator(ImplicitGenerator):
    """Tube of radius rho around a planar arc of curvature kappa.

    z = (kappa, rho); the arc has fixed length ``length``, is centred at the
    origin with tangent +x there and bends toward +y for kappa > 0.
    """

    variant = "bent_capsule"
    latent_dim = 2

    def __init__(self, length=2.0):
        self.length = float(length)

    def _closest(self, x, z):
        kappa = float(z[0])
        s = _arc_param(x, kappa, 0.5 * self.length)
        ax, ay = _arc_point(s, kappa)
        diff = x - np.stack([ax, ay, np.zeros_like(ax)], axis=1)
        return s, diff

    def _value(self, x, z):
        _, diff = self._closest(x, z)
        return np.linalg.norm(diff, axis=1) - float(z[1])

    def _grads(self, x, z):
        s, diff = self._closest(x, z)
        u, _ = _unit(diff)
        dx, dy = _arc_dkappa(s, float(z[0]))
        gk = -(u[:, 0] * dx + u[:, 1] * dy)
        return u, np.stack([gk, -np.ones_like(gk)], axis=1)

    def frame(self, s, kappa):
        """Arc points and (tangent, normal) at parameters s."""
        ax, ay = _arc_point(s, kappa)
        t = kappa * s
        tan = np.stack([np.cos(t), np.sin(t), np.zeros_like(t)], axis=1)
        nrm = np.stack([-np.sin(t), np.cos(t), np.zeros_like(t)], axis=1)
        return np.stack([ax, ay, np.zeros_like(ax)], axis=1), tan, nrm


class CapsuleBlendGenerator(ImplicitGenerator):
    """Smooth union of capsules whose endpoints and radii are affine in z.

    Each capsule is a dict with ``a0, A, b0, B, r0, rz``: endpoints
    ``a = a0 + A z``, ``b = b0 + B z`` (A, B of shape (3, d)) and radius
    ``r = r0 + rz . z``.  Blending uses a log-sum-exp soft minimum of
    width ``k``.
    """

    variant = "capsule_blend"

    def __init__(self, capsules, latent_dim, k=0.05):
        self.latent_dim = int(latent_dim)
        self.k = float(k)
        self.capsules = []
        d = self.latent_dim
        for c in capsules:
            cap = {
                "a0": np.asarray(c["a0"], dtype=np.float64),
                "A": np.asarray(c.get("A", np.zeros((3, d))), dtype=np.float64).reshape(3, d),
                "b0": np.asarray(c["b0"], dtype=np.float64),
                "B": np.asarray(c.get("B", np.zeros((3, d))), dtype=np.float64).reshape(3, d),
                "r0": float(c["r0"]),
                "rz": np.asarray(c.get("rz", np.zeros(d)), dtype=np.float64).reshape(d),
            }
            self.capsules.append(cap)
        if not self.capsules:
            raise ValueError("at least one capsule required")

    def _parts(self, x, z):
        vals, gxs, gzs = [], [], []
        for c in self.capsules:
            a = c["a0"] + c["A"] @ z
            b = c["b0"] + c["B"] @ z
            ab = b - a
            den = float(ab @ ab)
            t = np.clip(((x - a) @ ab) / den, 0.0, 1.0) if den > 0 else np.zeros(x.shape[0])
            p = a + t[:, None] * ab
            u, dist = _unit(x - p)
            vals.append(dist - (c["r0"] + c["rz"] @ z))
            gxs.append(u)
            # envelope: d dist / d a = -(1 - t) u, d dist / d b = -t u
            gzs.append(-((1 - t)[:, None] * u) @ c["A"] - (t[:, None] * u) @ c["B"] - c["rz"])
        return np.stack(vals, 1), np.stack(gxs, 1), np.stack(gzs, 1)

    def _value(self, x, z):
        v, _, _ = self._parts(x, z)
        m = v.min(axis=1, keepdims=True)
        return m[:, 0] - self.k * np.log(np.sum(np.exp(-(v - m) / self.k), axis=1))

    def _grads(self, x, z):
        v, gx, gz = self._parts(x, z)
        m = v.min(axis=1, keepdims=True)
        w = np.exp(-(v - m) / self.k)
        w /= w.sum(axis=1, keepdims=True)
        return np.einsum("nc,ncj->nj", w, gx), np.einsum("nc,ncj->nj", w, gz)


# ---------------------------------------------------------------- MLP

ACTIVATIONS = ("softplus", "sine", "identity")


def _act(name, x):
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "sine":
        return np.sin(x)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _dact(name, x):
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if name == "sine":
        return np.cos(x)
    return np.ones_like(x)


@dataclass
class Layer:
    weights: np.ndarray   # (rows, cols); out = W h + b
    bias: np.ndarray      # (rows,)
    activation: str

    @property
    def rows(self):
        return self.weights.shape[0]

    @property
    def cols(self):
        return self.weights.shape[1]


class MLPGenerator(ImplicitGenerator):
    """Fully connected network on the concatenated input (x, z)."""

    variant = "mlp"

    def __init__(self, layers, latent_dim):
        self.latent_dim = int(latent_dim)
        self.layers = list(layers)
        width = 3 + self.latent_dim
        for k, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {layer.activation!r}")
            if layer.cols != width:
                raise ShapeMismatchError(f"layer {k}: expects {layer.cols} inputs, previous width is {width}")
            if layer.bias.shape != (layer.rows,):
                raise ShapeMismatchError(f"layer {k}: bias has shape {layer.bias.shape}, expected ({layer.rows},)")
            width = layer.rows
        if width != 1:
            raise ShapeMismatchError(f"last layer must output 1 value, got {width}")

    def _forward(self, x, z):
        h = np.concatenate([x, np.broadcast_to(z, (x.shape[0], z.size))], axis=1)
        cache = []
        for layer in self.layers:
            pre = h @ layer.weights.T + layer.bias
            cache.append((h, pre))
            h = _act(layer.activation, pre)
        return h[:, 0], cache

    def _value(self, x, z):
        return self._forward(x, z)[0]

    def _input_grad(self, cache):
        g = np.ones((cache[-1][1].shape[0], 1))
        for layer, (_, pre) in zip(reversed(self.layers), reversed(cache)):
            g = (g * _dact(layer.activation, pre)) @ layer.weights
        return g

    def _grads(self, x, z):
        _, cache = self._forward(x, z)
        g = self._input_grad(cache)
        return g[:, :3], g[:, 3:]

    def param_grads(self, x, z_rows, upstream):
        """Gradient of sum(upstream * f) with respect to every layer's (W, b).

        ``z_rows`` is an (N, d) array so each sample may use its own code.
        """
        h = np.concatenate([x, z_rows], axis=1)
        cache = []
        for layer in self.layers:
            pre = h @ layer.weights.T + layer.bias
            cache.append((h, pre))
            h = _act(layer.activation, pre)
        g = upstream[:, None]
        out = []
        for layer, (hin, pre) in zip(reversed(self.layers), reversed(cache)):
            gp = g * _dact(layer.activation, pre)
            out.append((gp.T @ hin, gp.sum(axis=0)))
            g = gp @ layer.weights
        return h[:, 0], out[::-1]

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "layers": [{"rows": l.rows, "cols": l.cols, "weights": l.weights.ravel().tolist(),
                        "bias": l.bias.tolist(), "activation": l.activation} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, data):
        for key in ("latent_dim", "layers"):
            if key not in data:
                raise ValueError(f"weights file missing field {key!r}")
        layers = []
        for k, entry in enumerate(data["layers"]):
            for key in ("rows", "cols", "weights", "bias", "activation"):
                if key not in entry:
                    raise ValueError(f"layer {k}: missing field {key!r}")
            rows, cols = int(entry["rows"]), int(entry["cols"])
            w = np.asarray(entry["weights"], dtype=np.float64)
            if w.size != rows * cols:
                raise ShapeMismatchError(f"layer {k}: {w.size} weights for a {rows}x{cols} matrix")
            b = np.asarray(entry["bias"], dtype=np.float64)
            layers.append(Layer(w.reshape(rows, cols), b, entry["activation"]))
        return cls(layers, int(data["latent_dim"]))


def init_mlp(widths, latent_dim, rng, activation="softplus", init_radius=None):
    """Random MLP with hidden ``widths`` and a scalar identity output.

    With ``init_radius`` the last layer is biased so that the initial field
    roughly behaves like ``|x| - init_radius`` (geometric initialisation).
    """
    dims = [3 + latent_dim] + list(widths) + [1]
    layers = []
    for k in range(len(dims) - 1):
        fan_in = dims[k]
        w = rng.standard_normal((dims[k + 1], fan_in)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(dims[k + 1])
        act = activation if k < len(dims) - 2 else "identity"
        layers.append(Layer(w, b, act))
    if init_radius is not None:
        last = layers[-1]
        last.weights[:] = np.sqrt(np.pi) / np.sqrt(dims[-2]) + 1e-4 * rng.standard_normal(last.weights.shape)
        last.bias[:] = -init_radius
    return MLPGenerator(layers, latent_dim)


def save_mlp_weights(gen: MLPGenerator, path):
    with open(path, "w") as fh:
        json.dump(gen.to_dict(), fh, indent=1)


def load_mlp_weights(path) -> MLPGenerator:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return MLPGenerator.from_dict(data)


def fit_mlp(gen: MLPGenerator, points, codes, targets, steps=2000, lr=1e-3, batch=None, rng=None):
    """Fit ``gen`` in place by Adam on the mean absolute SDF error.

    Returns the per-step loss history.
    """
    x = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    zr = np.asarray(codes, dtype=np.float64).reshape(x.shape[0], gen.latent_dim)
    y = np.asarray(targets, dtype=np.float64).ravel()
    rng = rng if rng is not None else np.random.default_rng(0)
    params = [p for l in gen.layers for p in (l.weights, l.bias)]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    for step in range(1, steps + 1):
        idx = rng.choice(x.shape[0], size=batch, replace=False) if batch else slice(None)
        xb, zb, yb = x[idx], zr[idx], y[idx]
        n = xb.shape[0]
        f0, _ = gen.param_grads(xb, zb, np.zeros(n))
        up = np.sign(f0 - yb) / n
        f, grads = gen.param_grads(xb, zb, up)
        history.append(float(np.mean(np.abs(f - yb))))
        flat = [g for pair in grads for g in pair]
        for p, g, a, b in zip(params, flat, m1, m2):
            a *= b1
            a += (1 - b1) * g
            b *= b2
            b += (1 - b2) * g * g
            p -= lr * (a / (1 - b1 ** step)) / (np.sqrt(b / (1 - b2 ** step)) + eps)
    return history


# ---------------------------------------------------------------- grids and paths

@dataclass(frozen=True)
class VoxelGrid:
    """Regular sampling grid: point (i, j, k) sits at origin + (i, j, k) * spacing."""

    origin: tuple
    spacing: tuple
    dims: tuple

    def __post_init__(self):
        sp = tuple(float(s) for s in np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)))
        dm = tuple(int(d) for d in np.broadcast_to(np.asarray(self.dims), (3,)))
        org = tuple(float(o) for o in np.asarray(self.origin, dtype=np.float64).reshape(3))
        if min(sp) <= 0:
            raise ValueError("grid spacing must be positive")
        if min(dm) < 2:
            raise ValueError("grid needs at least 2 samples per axis")
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "dims", dm)
        object.__setattr__(self, "origin", org)

    @classmethod
    def from_bounds(cls, lo, hi, dims):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dm = np.broadcast_to(np.asarray(dims), (3,)).astype(int)
        return cls(tuple(lo), tuple((hi - lo) / (dm - 1)), tuple(dm))

    def axis(self, k):
        return self.origin[k] + self.spacing[k] * np.arange(self.dims[k])

    def points(self, islab=None):
        xs = self.axis(0) if islab is None else self.axis(0)[islab]
        g = np.meshgrid(xs, self.axis(1), self.axis(2), indexing="ij")
        return np.stack(g, axis=-1)


def latent_path(z_start, z_end, T=DEFAULT_PATH_STEPS):
    """Evenly spaced codes z^j = z_start + j (z_end - z_start) / (T + 1), j = 1..T."""
    a = np.asarray(z_start, dtype=np.float64).ravel()
    b = np.asarray(z_end, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError("latent codes differ in dimension")
    if T < 0:
        raise ValueError("T must be non-negative")
    return [a + j * (b - a) / (T + 1) for j in range(1, T + 1)]


def generator_from_config(cfg):
    """Instantiate an analytic generator from a small JSON-style description."""
    kind = cfg["type"]
    if kind == "sphere":
        return SphereGenerator(cfg.get("latent_dim", 1), cfg.get("center", (0, 0, 0)),
                               cfg.get("base_radius", 0.0), cfg.get("weights"))
    if kind == "ellipsoid":
        return EllipsoidGenerator(cfg.get("base_axes", (1, 1, 1)), cfg.get("center", (0, 0, 0)))
    if kind == "bent_capsule":
        return BentCapsuleGenerator(cfg.get("length", 2.0))
    if kind == "bump":
        return BumpFieldGenerator(cfg.get("latent_dim", 8), cfg.get("scale", 1.0),
                                  cfg.get("basis", "harmonic"), cfg.get("width", 0.3))
    if kind == "capsule_blend":
        return CapsuleBlendGenerator(cfg["capsules"], cfg["latent_dim"], cfg.get("k", 0.05))
    if kind == "translated":
        base = generator_from_config(cfg["base"])
        return TranslatedGenerator(base, cfg["base_code"], cfg["directions"])
    if kind == "mlp":
        if "path" in cfg:
            return load_mlp_weights(cfg["path"])
        return MLPGenerator.from_dict(cfg)
    raise ValueError(f"unknown generator type {kind!r}")


def generator_to_config(gen):
    if isinstance(gen, SphereGenerator):
        return {"type": "sphere", "latent_dim": gen.latent_dim, "center": gen.center.tolist(),
                "base_radius": gen.base_radius, "weights": gen.weights.tolist()}
    if isinstance(gen, EllipsoidGenerator):
        return {"type": "ellipsoid", "base_axes": gen.base_axes.tolist(), "center": gen.center.tolist()}
    if isinstance(gen, BentCapsuleGenerator):
        return {"type": "bent_capsule", "length": gen.length}
    if isinstance(gen, BumpFieldGenerator):
        return {"type": "bump", "latent_dim": gen.latent_dim, "scale": gen.scale,
                "basis": gen.basis, "width": gen.width}
    if isinstance(gen, CapsuleBlendGenerator):
        caps = [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in c.items()} for c in gen.capsules]
        return {"type": "capsule_blend", "latent_dim": gen.latent_dim, "k": gen.k, "capsules": caps}
    if isinstance(gen, TranslatedGenerator):
        return {"type": "translated", "base": generator_to_config(gen.base),
                "base_code": gen.base_code.tolist(), "directions": gen.directions.tolist()}
    if isinstance(gen, MLPGenerator):
        return {"type": "mlp", **gen.to_dict()}
    raise TypeError(f"cannot serialise {type(gen).__name__}")
