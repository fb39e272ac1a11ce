"""Hidden-physics model: per-experiment leaf networks (deflection field u,
positive latent field a) composed with a shared sparse-GP operator f, trained
by maximizing an evidence lower bound.

The generative structure is u_tt = a^2(x, y) f(psi) with the rotationally
invariant operator input psi = (u, |grad u|, lap u). The expected physics
log-likelihood is computed in closed form (Gaussian likelihood under a
Gaussian posterior), so no sampling enters the objective. After training on
one experiment, the root (f and its noise) can be frozen and transferred:
only a fresh leaf is fit to a new dataset.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint, dataio
from . import gp as gpmod
from .fields import PositiveField, SirenNet, eval_derivatives
from .optim import Adam

GRAD_EPS = 1e-30   # guards sqrt(0) in |grad u| against an infinite slope


class TrainAbort(RuntimeError):
    """Objective became non-finite; model still holds the last finite state."""


@dataclass
class TrainConfig:
    steps: int = 20000
    warmup_steps: int = 2000       # data term only, so psi is meaningful later
    data_batch: int = 4096
    colloc_batch: int = 2048
    colloc_pool: int = 200000
    lr_net: float = 3e-4
    lr_hyper: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    num_inducing: int = 128
    u_widths: tuple = (128, 128, 128, 128)
    a_widths: tuple = (64, 64, 64)
    w0: float = 30.0
    sigma_u_init_frac: float = 0.01    # x data variance (z-scored: 0.01)
    sigma_phys_init_frac: float = 1.0  # x physics-target variance
    physics_weight: float = 1.0
    lengthscale_anchor: float = 0.0    # lognormal anchor strength on kernel hypers
    variance_anchor: float = 0.0
    log_every: int = 50


class Leaf:
    """Experiment-specific model parts: u(x,y,t), a(x,y), measurement noise,
    and the normalization record of the dataset it was fit to."""

    def __init__(self, u_net, a_net, log_sigma_u2, scale, experiment_id=""):
        self.u_net = u_net
        self.a_net = a_net
        self.log_sigma_u2 = log_sigma_u2
        self.scale = scale
        self.experiment_id = experiment_id

    @classmethod
    def create(cls, scale, config, experiment_id="", seed=None):
        seed = config.seed if seed is None else seed
        u_net = SirenNet(3, list(config.u_widths), w0=config.w0, seed=seed)
        a_net = PositiveField.create(2, list(config.a_widths), w0=config.w0, seed=seed + 1)
        log_s = ad.Tensor(np.log(config.sigma_u_init_frac), requires_grad=True)
        return cls(u_net, a_net, log_s, scale, experiment_id)

    def params(self):
        out = [("u." + n, t) for n, t in self.u_net.params()]
        out += [("a." + n, t) for n, t in self.a_net.params()]
        out.append(("log_sigma_u2", self.log_sigma_u2))
        return out

    def sigma_u2(self):
        return ad.exp(self.log_sigma_u2)

    def save(self, path):
        header = {"kind": "leaf", "experiment_id": self.experiment_id,
                  "u_arch": self.u_net.arch_header(), "a_arch": self.a_net.arch_header(),
                  "scale": {"centers": list(self.scale.centers),
                            "halves": list(self.scale.halves),
                            "value_mean": self.scale.value_mean,
                            "value_std": self.scale.value_std}}
        arrays = [(n, t.data) for n, t in self.params()]
        checkpoint.save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path):
        from .fields import CoordScale

        header, arrays = checkpoint.load_arrays(path)
        if header.get("kind") != "leaf":
            raise checkpoint.CheckpointError(f"{path}: not a leaf checkpoint")
        ua, aa = header["u_arch"], header["a_arch"]
        u_net = SirenNet(ua["input_dim"], ua["widths"], w0=ua["w0"])
        a_net = PositiveField.create(aa["input_dim"], aa["widths"], w0=aa["w0"])
        sc = header["scale"]
        scale = CoordScale(tuple(sc["centers"]), tuple(sc["halves"]),
                           sc["value_mean"], sc["value_std"])
        leaf = cls(u_net, a_net, ad.Tensor(0.0, requires_grad=True), scale,
                   header.get("experiment_id", ""))
        for name, tensor in leaf.params():
            tensor.data = arrays[name]
        return leaf


class Root:
    """Shared physics: the GP operator and the physics-residual noise."""

    def __init__(self, f, log_sigma_phys2):
        self.f = f
        self.log_sigma_phys2 = log_sigma_phys2

    @classmethod
    def create(cls, config, seed=None):
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng(seed + 1000)
        z = rng.standard_normal((config.num_inducing, 3))
        f = gpmod.SvgpOperator.at_prior(z)
        return cls(f, ad.Tensor(0.0, requires_grad=True))

    def params(self):
        return self.f.params() + [("log_sigma_phys2", self.log_sigma_phys2)]

    def sigma_phys2(self):
        return ad.exp(self.log_sigma_phys2)

    def save(self, path):
        f = self.f
        header = {"kind": "root", "num_inducing": f.num_inducing,
                  "input_dim": f.z.shape[1], "jitter_rel": f.jitter_rel}
        arrays = [("z", f.z.data), ("q_mu", f.q_mu.data),
                  ("q_sqrt_raw", f.q_sqrt_raw.data),
                  ("log_variance", f.kernel.log_variance.data),
                  ("log_lengthscales", f.kernel.log_lengthscales.data),
                  ("mean_w", f.mean.w.data), ("mean_b", f.mean.b.data),
                  ("psi_shift", f.psi_shift), ("psi_scale", f.psi_scale),
                  ("log_sigma_phys2", self.log_sigma_phys2.data)]
        checkpoint.save_arrays(path, header, arrays)

    @classmethod
    def load(cls, path):
        header, arrays = checkpoint.load_arrays(path)
        if header.get("kind") != "root":
            raise checkpoint.CheckpointError(f"{path}: not a root checkpoint")
        kernel = gpmod.ArdKernel()
        kernel.log_variance.data = arrays["log_variance"]
        kernel.log_lengthscales.data = arrays["log_lengthscales"]
        mean = gpmod.LinearMean()
        mean.w.data = arrays["mean_w"]
        mean.b.data = arrays["mean_b"]
        f = gpmod.SvgpOperator(arrays["z"], kernel, mean, arrays["q_mu"],
                               arrays["q_sqrt_raw"], psi_shift=arrays["psi_shift"],
                               psi_scale=arrays["psi_scale"],
                               jitter_rel=header["jitter_rel"])
        return cls(f, ad.Tensor(arrays["log_sigma_phys2"], requires_grad=True))


@dataclass
class PhysicsFeatures:
    """Operator inputs psi = (u, |grad u|, lap u) and the target u_tt,
    all in physical units."""

    psi: ad.Tensor     # (n, 3)
    u_tt: ad.Tensor    # (n,)


def features(fld, coords, scale=None, create_graph=True):
    """Physics features of any implicit field (networks or injected analytic
    oracles) at normalized (n, 3) coordinates."""
    dv = eval_derivatives(fld, coords, scale=scale, create_graph=create_graph)
    grad_mag = ad.sqrt(ad.add(ad.add(ad.square(dv.u_x), ad.square(dv.u_y)), GRAD_EPS))
    lap = ad.add(dv.u_xx, dv.u_yy)
    n = dv.value.shape[0]
    psi = ad.concat([ad.reshape(dv.value, (n, 1)),
                     ad.reshape(grad_mag, (n, 1)),
                     ad.reshape(lap, (n, 1))], axis=1)
    return PhysicsFeatures(psi=psi, u_tt=dv.u_tt)


def leaf_features(leaf, coords, create_graph=True):
    return features(leaf.u_net, coords, scale=leaf.scale, create_graph=create_graph)


def elbo(entries, root, n_data, n_colloc, physics_weight=1.0, kl_grad=True):
    """Evidence lower bound over (leaf, data_batch, colloc_batch) entries.

    data_batch is (coords (b,3), z-scored values (b,)); colloc_batch is
    (bc,3) normalized coordinates or None. Batch terms are rescaled to the
    full data/collocation counts; the KL appears once.
    """
    total = None
    parts = {}
    for leaf, data_batch, colloc_batch in entries:
        if data_batch is not None:
            coords, targets = data_batch
            u = leaf.u_net.apply(ad.Tensor(np.asarray(coords)))
            ll = gpmod.expected_log_lik(np.asarray(targets), u, ad.Tensor(0.0),
                                        leaf.sigma_u2())
            term = ad.mul(ll, n_data / len(targets))
            total = term if total is None else ad.add(total, term)
            parts["data_ll"] = term.item()
        if colloc_batch is not None and physics_weight != 0.0:
            feats = leaf_features(leaf, colloc_batch)
            f_mean, f_var = root.f.predict(feats.psi)
            a = leaf.a_net.apply(ad.Tensor(np.asarray(colloc_batch)[:, :2]))
            g_mean, g_var = gpmod.scale_by_a(a, f_mean, f_var)
            ll = gpmod.expected_log_lik(feats.u_tt, g_mean, g_var, root.sigma_phys2())
            term = ad.mul(ll, physics_weight * n_colloc / colloc_batch.shape[0])
            total = term if total is None else ad.add(total, term)
            parts["phys_ll"] = term.item()
    if physics_weight != 0.0:
        kl = root.f.kl()
        if not kl_grad:
            kl = ad.Tensor(kl.data)
        parts["kl"] = kl.item()
        total = ad.sub(total, kl)
    out = total if total is not None else ad.Tensor(0.0)
    if not np.isfinite(out.data):
        bad = ", ".join(f"{k}={v:.3e}" for k, v in parts.items())
        raise TrainAbort(f"ELBO non-finite ({bad})")
    return out, parts


class _Sampler:
    """Deterministic batching over a normalized dataset window."""

    def __init__(self, norm, config):
        self.norm = norm
        nt, ny, nx = norm.values.shape
        self.axes = (np.linspace(-1.0, 1.0, nx), np.linspace(-1.0, 1.0, ny),
                     np.linspace(-1.0, 1.0, nt))
        self.flat = norm.values.reshape(-1)
        self.shape = (nt, ny, nx)
        self.rng = np.random.default_rng(config.seed)
        self.pool = self.rng.uniform(-1.0, 1.0, size=(config.colloc_pool, 3))

    @property
    def n_data(self):
        return self.flat.size

    def data_batch(self, size):
        idx = self.rng.integers(0, self.flat.size, size=size)
        nt, ny, nx = self.shape
        k, rem = np.divmod(idx, ny * nx)
        i, j = np.divmod(rem, nx)
        coords = np.stack([self.axes[0][j], self.axes[1][i], self.axes[2][k]], axis=1)
        return coords, self.flat[idx]

    def colloc_batch(self, size):
        idx = self.rng.integers(0, self.pool.shape[0], size=size)
        return self.pool[idx]

    def grid_coords(self, nx_pts, ny_pts, nt_pts):
        xs = np.linspace(-1.0, 1.0, nx_pts)
        ys = np.linspace(-1.0, 1.0, ny_pts)
        ts = np.linspace(-1.0, 1.0, nt_pts)
        tt, yy, xx = np.meshgrid(ts, ys, xs, indexing="ij")
        return np.stack([xx.reshape(-1), yy.reshape(-1), tt.reshape(-1)], axis=1)


def _setup_physics(leaf, root, sampler, config):
    """After warmup: freeze psi standardization from the current field,
    seed inducing inputs by k-means++, reset q to the prior, and set the
    kernel variance / physics noise from the target scale."""
    sample = sampler.colloc_batch(min(4096, config.colloc_pool))
    with ad.finite_checks(False):
        feats = leaf_features(leaf, sample, create_graph=False)
    psi = feats.psi.data
    u_tt = feats.u_tt.data
    shift = psi.mean(axis=0)
    scale = psi.std(axis=0)
    scale[scale == 0] = 1.0
    root.f.psi_shift = shift
    root.f.psi_scale = scale

    std_psi = (psi - shift) / scale
    rng = np.random.default_rng(config.seed + 7)
    z = gpmod.kmeanspp_centers(std_psi, config.num_inducing, rng)
    root.f.z.data = z

    target_var = max(float(u_tt.var()), 1e-12)
    root.f.kernel.log_variance.data = np.asarray(np.log(target_var))
    root.log_sigma_phys2.data = np.asarray(np.log(config.sigma_phys_init_frac * target_var))
    root.f.reset_q_to_prior()
    return {"anchor_log_ls": root.f.kernel.log_lengthscales.data.copy(),
            "anchor_log_var": root.f.kernel.log_variance.data.copy()}


def _anchor_penalty(root, anchors, config):
    if config.lengthscale_anchor == 0.0 and config.variance_anchor == 0.0:
        return None
    pen = None
    if config.lengthscale_anchor > 0.0:
        d = ad.sub(root.f.kernel.log_lengthscales, ad.Tensor(anchors["anchor_log_ls"]))
        pen = ad.mul(ad.sum_(ad.square(d)), 0.5 * config.lengthscale_anchor)
    if config.variance_anchor > 0.0:
        d = ad.sub(root.f.kernel.log_variance, ad.Tensor(anchors["anchor_log_var"]))
        p2 = ad.mul(ad.square(d), 0.5 * config.variance_anchor)
        pen = p2 if pen is None else ad.add(pen, p2)
    return pen


def train(leaf, root, ds, config, freeze_root=False):
    """Maximize the ELBO by Adam. Returns the per-log-interval metrics rows
    (step, elbo, data_rmse, phys_rms, kl). Mutates leaf (and root unless
    frozen). Collocation points are uniform over the continuous window,
    resampled each step from a fixed pool."""
    norm = dataio.normalize(ds)
    leaf.scale = norm.scale
    sampler = _Sampler(norm, config)

    net_params = [t for _, t in leaf.params()]
    opt_net = Adam(net_params, lr=config.lr_net, betas=config.betas, eps=config.eps)
    opt_hyper = None
    anchors = None

    metrics = []
    t_start = time.perf_counter()
    for step_i in range(config.steps):
        warm = step_i < config.warmup_steps
        if not warm and opt_hyper is None:
            if not freeze_root:
                anchors = _setup_physics(leaf, root, sampler, config)
                opt_hyper = Adam([t for _, t in root.params()], lr=config.lr_hyper,
                                 betas=config.betas, eps=config.eps)
            else:
                opt_hyper = Adam([], lr=config.lr_hyper)

        data_batch = sampler.data_batch(config.data_batch)
        colloc = None if warm else sampler.colloc_batch(config.colloc_batch)
        with ad.finite_checks(False):
            value, parts = elbo([(leaf, data_batch, colloc)], root,
                                n_data=sampler.n_data, n_colloc=config.colloc_pool,
                                physics_weight=0.0 if warm else config.physics_weight,
                                kl_grad=not freeze_root)
            loss = ad.neg(value)
            pen = None if (warm or freeze_root) else _anchor_penalty(root, anchors, config)
            if pen is not None:
                loss = ad.add(loss, pen)
            wrt = net_params if (warm or freeze_root) else net_params + opt_hyper.params
            grads = ad.grad(loss, wrt)
        if not all(np.isfinite(g.data).all() for g in grads):
            raise TrainAbort(f"non-finite gradient at step {step_i}")
        opt_net.step(grads[:len(net_params)])
        if not warm and not freeze_root:
            opt_hyper.step(grads[len(net_params):])

        if step_i % config.log_every == 0 or step_i == config.steps - 1:
            row = _metrics_row(step_i, value.item(), parts, leaf, root, data_batch, colloc)
            metrics.append(row)
    metrics.append({"step": config.steps, "elapsed_s": time.perf_counter() - t_start})
    return metrics


def _metrics_row(step_i, elbo_val, parts, leaf, root, data_batch, colloc):
    coords, targets = data_batch
    with ad.no_grad(), ad.finite_checks(False):
        u = leaf.u_net.apply(ad.Tensor(coords)).data
    data_rmse = float(np.sqrt(np.mean((u - targets) ** 2)) * leaf.scale.value_std)
    phys_rms = float("nan")
    if colloc is not None:
        with ad.finite_checks(False):
            feats = leaf_features(leaf, colloc, create_graph=False)
            with ad.no_grad():
                f_mean, _ = root.f.predict(feats.psi.data)
                a = leaf.a_net.apply(ad.Tensor(colloc[:, :2])).data
        resid = feats.u_tt.data - a ** 2 * f_mean.data
        phys_rms = float(np.sqrt(np.mean(resid ** 2)))
    return {"step": step_i, "elbo": elbo_val, "data_rmse": data_rmse,
            "phys_rms": phys_rms, "kl": parts.get("kl", 0.0)}


def transfer(root, ds, config, experiment_id="transfer"):
    """Fit a fresh leaf against a frozen root (physics and psi
    standardization held constant). Returns (leaf, metrics)."""
    norm = dataio.normalize(ds)
    leaf = Leaf.create(norm.scale, config, experiment_id=experiment_id,
                       seed=config.seed + 31)
    metrics = train(leaf, root, ds, config, freeze_root=True)
    return leaf, metrics


def rms_metrics(leaf, root, ds, dense_points=40000, chunk=16384):
    """Observation RMSE over every measurement in the window (measurement
    units) and the RMS physics residual u_tt - a^2 f_mean over a dense
    evaluation grid."""
    norm = dataio.normalize(ds)
    nt, ny, nx = norm.values.shape
    sampler = _Sampler(norm, TrainConfig(colloc_pool=1, seed=0))

    sq_sum = 0.0
    count = 0
    flat = norm.values.reshape(-1)
    all_coords = sampler.grid_coords(nx, ny, nt)
    with ad.no_grad(), ad.finite_checks(False):
        for lo in range(0, all_coords.shape[0], chunk):
            c = all_coords[lo:lo + chunk]
            u = leaf.u_net.apply(ad.Tensor(c)).data
            sq_sum += float(((u - flat[lo:lo + chunk]) ** 2).sum())
            count += c.shape[0]
    obs_rmse = float(np.sqrt(sq_sum / count) * leaf.scale.value_std)

    per_axis = max(2, int(round(dense_points ** (1.0 / 3.0))))
    coords = sampler.grid_coords(per_axis, per_axis, per_axis)
    resid_sq = 0.0
    n = 0
    with ad.finite_checks(False):
        for lo in range(0, coords.shape[0], 2048):
            c = coords[lo:lo + 2048]
            feats = leaf_features(leaf, c, create_graph=False)
            with ad.no_grad():
                f_mean, _ = root.f.predict(feats.psi.data)
                a = leaf.a_net.apply(ad.Tensor(c[:, :2])).data
            r = feats.u_tt.data - a ** 2 * f_mean.data
            resid_sq += float((r ** 2).sum())
            n += c.shape[0]
    phys_rms = float(np.sqrt(resid_sq / n))
    return obs_rmse, phys_rms


def a_field_map(leaf, ny, nx):
    """Evaluate the latent positive field on the window's (ny, nx) grid."""
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    with ad.no_grad(), ad.finite_checks(False):
        vals = leaf.a_net.apply(ad.Tensor(coords)).data
    return vals.reshape(ny, nx)
