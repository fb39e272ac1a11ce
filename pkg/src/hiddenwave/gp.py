"""Sparse variational Gaussian process over the PDE operator f(psi).

The operator input psi = (u, |grad u|, lap u) lives in R^3; the GP carries a
linear mean and an exponentiated-quadratic kernel with one lengthscale per
input dimension (automatic relevance determination). The posterior is the
uncollapsed sparse variational form: a Gaussian q(f_u) = N(q_mu, S) over
inducing values at inputs Z, with S parameterized by its Cholesky factor.

psi inputs are standardized (per-dimension z-score) before touching the
kernel or mean; the constants are stored on the operator and frozen when the
physics are transferred to a new experiment.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import checkpoint

TWO_PI = 2.0 * np.pi


class ArdKernel:
    """Exponentiated quadratic kernel with per-dimension lengthscales,
    k(a, b) = variance * exp(-1/2 sum_d (a_d - b_d)^2 / l_d^2)."""

    def __init__(self, variance=1.0, lengthscales=(1.0, 1.0, 1.0)):
        if variance <= 0 or np.any(np.asarray(lengthscales) <= 0):
            raise ValueError("kernel variance and lengthscales must be positive")
        self.log_variance = ad.Tensor(np.log(variance), requires_grad=True)
        self.log_lengthscales = ad.Tensor(np.log(np.asarray(lengthscales, dtype=np.float64)),
                                          requires_grad=True)

    @property
    def dim(self):
        return self.log_lengthscales.size

    def params(self):
        return [("log_variance", self.log_variance),
                ("log_lengthscales", self.log_lengthscales)]

    def variance_value(self):
        return float(np.exp(self.log_variance.data))

    def lengthscale_values(self):
        return np.exp(self.log_lengthscales.data)

    def matrix(self, a, b):
        """Cross-covariance between row sets a (n,d) and b (m,d)."""
        inv = ad.exp(ad.neg(self.log_lengthscales))
        aw = ad.mul(a, inv)
        bw = ad.mul(b, inv)
        a2 = ad.sum_(ad.square(aw), axis=1)
        b2 = ad.sum_(ad.square(bw), axis=1)
        cross = ad.matmul(aw, ad.transpose(bw))
        n, m = cross.shape
        d2 = ad.add(ad.add(ad.broadcast_to(ad.reshape(a2, (n, 1)), (n, m)), b2),
                    ad.mul(cross, -2.0))
        # rounding can leave tiny negative squared distances
        d2 = ad.clamp_min(d2, 0.0)
        return ad.mul(ad.exp(ad.mul(d2, -0.5)), ad.exp(self.log_variance))

    def diag(self, n):
        """k(psi, psi) is the variance for every input."""
        return ad.broadcast_to(ad.reshape(ad.exp(self.log_variance), (1,)), (n,))


def kernel_eval(kernel, psi_a, psi_b):
    """Scalar k(psi_a, psi_b)."""
    a = ad.Tensor(np.asarray(psi_a, dtype=np.float64).reshape(1, -1))
    b = ad.Tensor(np.asarray(psi_b, dtype=np.float64).reshape(1, -1))
    return float(kernel.matrix(a, b).data[0, 0])


class LinearMean:
    """mu(psi) = w . psi + b."""

    def __init__(self, w=(0.0, 0.0, 0.0), b=0.0):
        self.w = ad.Tensor(np.asarray(w, dtype=np.float64), requires_grad=True)
        self.b = ad.Tensor(float(b), requires_grad=True)

    def params(self):
        return [("mean_w", self.w), ("mean_b", self.b)]

    def apply(self, a):
        d = self.w.size
        prod = ad.matmul(a, ad.reshape(self.w, (d, 1)))
        return ad.add(ad.reshape(prod, (a.shape[0],)), self.b)


def _diag_vector(m_sq):
    n = m_sq.shape[0]
    eye = ad.Tensor(np.eye(n))
    return ad.sum_(ad.mul(m_sq, eye), axis=1)


def _embed_diag(vec):
    n = vec.shape[0]
    eye = ad.Tensor(np.eye(n))
    return ad.mul(ad.broadcast_to(ad.reshape(vec, (n, 1)), (n, n)), eye)


class CholeskyFailure(np.linalg.LinAlgError):
    """K_ZZ not factorizable even after jitter escalation."""


class SvgpOperator:
    """Sparse variational GP posterior over the operator.

    Parameters: inducing inputs ``z`` (standardized psi space), variational
    mean ``q_mu``, an unconstrained matrix whose strict lower triangle and
    exponentiated diagonal form the Cholesky factor of S, plus kernel and
    mean parameters. ``psi_shift``/``psi_scale`` standardize raw inputs.
    """

    def __init__(self, z, kernel, mean, q_mu, q_sqrt_raw,
                 psi_shift=None, psi_scale=None, jitter_rel=1e-6):
        self.z = z if isinstance(z, ad.Tensor) else ad.Tensor(
            np.asarray(z, dtype=np.float64), requires_grad=True)
        if self.z.ndim != 2:
            raise ValueError(f"inducing inputs must be (m, d), got {self.z.shape}")
        self.kernel = kernel
        self.mean = mean
        self.q_mu = q_mu if isinstance(q_mu, ad.Tensor) else ad.Tensor(
            np.asarray(q_mu, dtype=np.float64), requires_grad=True)
        self.q_sqrt_raw = q_sqrt_raw if isinstance(q_sqrt_raw, ad.Tensor) else ad.Tensor(
            np.asarray(q_sqrt_raw, dtype=np.float64), requires_grad=True)
        d = self.z.shape[1]
        self.psi_shift = np.zeros(d) if psi_shift is None else np.asarray(psi_shift, dtype=np.float64)
        self.psi_scale = np.ones(d) if psi_scale is None else np.asarray(psi_scale, dtype=np.float64)
        self.jitter_rel = float(jitter_rel)

    # -- construction -------------------------------------------------------

    @classmethod
    def at_prior(cls, z, kernel=None, mean=None, psi_shift=None, psi_scale=None,
                 jitter_rel=1e-6):
        """Initialize q at the prior (q_mu = mu(Z), S = K_ZZ) so the initial
        KL divergence is exactly zero."""
        z = np.asarray(z, dtype=np.float64)
        kernel = kernel or ArdKernel()
        mean = mean or LinearMean()
        gp = cls(z, kernel, mean, np.zeros(z.shape[0]), np.zeros((z.shape[0],) * 2),
                 psi_shift=psi_shift, psi_scale=psi_scale, jitter_rel=jitter_rel)
        gp.reset_q_to_prior()
        return gp

    def reset_q_to_prior(self):
        with ad.no_grad():
            zt = ad.Tensor(self.z.data)
            mu = self.mean.apply(zt).data
            l = self._chol_kzz_values()
        raw = np.tril(l, -1) + np.diag(np.log(np.diag(l)))
        self.q_mu.data = mu
        self.q_sqrt_raw.data = raw

    # -- parameter access ----------------------------------------------------

    @property
    def num_inducing(self):
        return self.z.shape[0]

    def params(self):
        return ([("z", self.z), ("q_mu", self.q_mu), ("q_sqrt_raw", self.q_sqrt_raw)]
                + self.kernel.params() + self.mean.params())

    def standardize(self, psi):
        t = psi if isinstance(psi, ad.Tensor) else ad.Tensor(np.asarray(psi, dtype=np.float64))
        return ad.mul(ad.sub(t, ad.Tensor(self.psi_shift)), ad.Tensor(1.0 / self.psi_scale))

    def q_sqrt(self):
        """Lower-triangular factor of S with positive diagonal."""
        m = self.num_inducing
        strict = ad.Tensor(np.tril(np.ones((m, m)), -1))
        diag = _diag_vector(self.q_sqrt_raw)
        return ad.add(ad.mul(self.q_sqrt_raw, strict), _embed_diag(ad.exp(diag)))

    # -- covariance plumbing ---------------------------------------------------

    def _chol_kzz(self):
        kzz = self.kernel.matrix(self.z, self.z)
        jitter = self.jitter_rel * self.kernel.variance_value()
        eye = np.eye(self.num_inducing)
        for attempt in range(4):
            try:
                return ad.cholesky(ad.add(kzz, ad.Tensor(jitter * eye)))
            except np.linalg.LinAlgError:
                jitter *= 10.0
        raise CholeskyFailure(
            f"K_ZZ not positive definite after 3 jitter escalations "
            f"(final jitter {jitter:.2e})")

    def _chol_kzz_values(self):
        with ad.no_grad():
            return self._chol_kzz().data

    # -- inference --------------------------------------------------------------

    def predict(self, psi):
        """Posterior mean and variance of f at raw (unstandardized) psi rows.

        mean = mu(psi) + K*^T K_ZZ^-1 (q_mu - mu(Z))
        var  = k(psi,psi) - K*^T K_ZZ^-1 K* + K*^T K_ZZ^-1 S K_ZZ^-1 K*
        """
        x = self.standardize(psi)
        n = x.shape[0]
        l = self._chol_kzz()
        kzs = self.kernel.matrix(self.z, x)
        a = ad.solve_triangular(l, kzs)                       # L^-1 K_zs
        resid = ad.reshape(ad.sub(self.q_mu, self.mean.apply(self.z)), (self.num_inducing, 1))
        alpha = ad.solve_triangular(l, resid)
        mean = ad.add(self.mean.apply(x),
                      ad.reshape(ad.matmul(ad.transpose(a), alpha), (n,)))
        e = ad.solve_triangular(l, a, trans=True)             # K_ZZ^-1 K_zs
        b = ad.matmul(ad.transpose(self.q_sqrt()), e)
        var = ad.add(ad.sub(self.kernel.diag(n), ad.sum_(ad.square(a), axis=0)),
                     ad.sum_(ad.square(b), axis=0))
        return mean, ad.clamp_min(var, 0.0)

    def kl(self):
        """KL(q(f_u) || p(f_u)) between the variational Gaussian and the
        prior N(mu(Z), K_ZZ)."""
        m = self.num_inducing
        l = self._chol_kzz()
        ls = self.q_sqrt()
        a = ad.solve_triangular(l, ls)
        trace = ad.sum_(ad.square(a))
        resid = ad.reshape(ad.sub(self.mean.apply(self.z), self.q_mu), (m, 1))
        quad = ad.sum_(ad.square(ad.solve_triangular(l, resid)))
        logdet_k = ad.mul(ad.sum_(ad.log(_diag_vector(l))), 2.0)
        logdet_s = ad.mul(ad.sum_(ad.log(_diag_vector(ls))), 2.0)
        return ad.mul(ad.add(ad.add(trace, quad), ad.sub(logdet_k, ad.add(logdet_s, float(m)))), 0.5)

    # -- persistence ---------------------------------------------------------------

    def save(self, path):
        header = {"kind": "svgp", "num_inducing": self.num_inducing,
                  "input_dim": self.z.shape[1], "jitter_rel": self.jitter_rel}
        arrays = [("z", self.z.data), ("q_mu", self.q_mu.data),
                  ("q_sqrt_raw", self.q_sqrt_raw.data),
                  ("log_variance", self.kernel.log_variance.data),
                  ("log_lengthscales", self.kernel.log_lengthscales.data),
                  ("mean_w", self.mean.w.data), ("mean_b", self.mean.b.data),
                  ("psi_shift", self.psi_shift), ("psi_scale", self.psi_scale)]
        checkpoint.save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = checkpoint.load_arrays(path)
        if header.get("kind") != "svgp":
            raise checkpoint.CheckpointError(f"{path}: not an operator checkpoint")
        kernel = ArdKernel()
        kernel.log_variance.data = arrays["log_variance"]
        kernel.log_lengthscales.data = arrays["log_lengthscales"]
        mean = LinearMean()
        mean.w.data = arrays["mean_w"]
        mean.b.data = arrays["mean_b"]
        return cls(arrays["z"], kernel, mean, arrays["q_mu"], arrays["q_sqrt_raw"],
                   psi_shift=arrays["psi_shift"], psi_scale=arrays["psi_scale"],
                   jitter_rel=header["jitter_rel"])


def scale_by_a(a, mean, var):
    """The a^2-scaling law: a^2 f has mean a^2 mu and variance a^4 k."""
    a_data = a.data if isinstance(a, ad.Tensor) else np.asarray(a, dtype=np.float64)
    if np.any(a_data <= 0):
        raise ValueError("the latent field a must be strictly positive")
    a = a if isinstance(a, ad.Tensor) else ad.Tensor(a_data)
    a2 = ad.square(a)
    return ad.mul(a2, mean), ad.mul(ad.square(a2), var)


def expected_log_lik(y, g_mean, g_var, noise_var):
    """Closed-form E_q[log N(y | g, noise_var)] for Gaussian q(g):
    -1/2 log(2 pi s2) - ((y - g_mean)^2 + g_var) / (2 s2), summed over points."""
    if not isinstance(noise_var, ad.Tensor):
        if noise_var <= 0:
            raise ValueError("noise variance must be positive")
        noise_var = ad.Tensor(float(noise_var))
    y = y if isinstance(y, ad.Tensor) else ad.Tensor(np.asarray(y, dtype=np.float64))
    quad = ad.add(ad.square(ad.sub(y, g_mean)), g_var)
    per_point = ad.sub(ad.mul(ad.log(ad.mul(noise_var, TWO_PI)), -0.5),
                       ad.div(quad, ad.mul(noise_var, 2.0)))
    return ad.sum_(per_point)


def svgp_elbo_regression(gp, x, y, noise_var):
    """ELBO for plain Gaussian-likelihood regression through the sparse
    posterior; used to validate against the exact GP marginal likelihood."""
    mean, var = gp.predict(x)
    return ad.sub(expected_log_lik(y, mean, var, noise_var), gp.kl())


def exact_gp_posterior(x, y, variance, lengthscales, mean_w, mean_b, noise_var):
    """Textbook GP regression oracle (plain NumPy; independent of the sparse
    path). Returns (mean_fn, var_fn, log_marginal_likelihood)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] > 500:
        raise ValueError("exact GP oracle limited to n <= 500")
    ls = np.asarray(lengthscales, dtype=np.float64)
    w = np.asarray(mean_w, dtype=np.float64)

    def kmat(a, b):
        d2 = ((a[:, None, :] / ls - b[None, :, :] / ls) ** 2).sum(axis=2)
        return variance * np.exp(-0.5 * d2)

    mu_x = x @ w + mean_b
    k = kmat(x, x) + noise_var * np.eye(x.shape[0])
    l = np.linalg.cholesky(k)
    alpha = np.linalg.solve(l.T, np.linalg.solve(l, y - mu_x))
    n = x.shape[0]
    lml = (-0.5 * (y - mu_x) @ alpha - np.log(np.diag(l)).sum()
           - 0.5 * n * np.log(TWO_PI))

    def mean_fn(xs):
        xs = np.asarray(xs, dtype=np.float64)
        return xs @ w + mean_b + kmat(xs, x) @ alpha

    def var_fn(xs):
        xs = np.asarray(xs, dtype=np.float64)
        ks = kmat(xs, x)
        v = np.linalg.solve(l, ks.T)
        return variance - (v ** 2).sum(axis=0)

    return mean_fn, var_fn, float(lml)


def kmeanspp_centers(points, m, rng):
    """k-means++ seeding (no Lloyd iterations): spread m centers over the
    sample by distance-weighted selection."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if m >= n:
        return points.copy()
    centers = np.empty((m, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[k:] = points[rng.integers(n, size=m - k)]
            break
        probs = d2 / total
        centers[k] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centers[k]) ** 2).sum(axis=1))
    return centers
