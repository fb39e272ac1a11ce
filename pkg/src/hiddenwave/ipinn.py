"""Inverse physics-informed network baseline.

The wave-equation operator is fixed: a solution net u(x,y,t) and a positive
latent speed net v(x,y) are trained jointly on the data misfit plus the
squared residual u_tt - v^2 (u_xx + u_yy). The residual reuses the same
feature path as the hidden-physics model, so by construction
r = u_tt - v^2 * psi_3.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dataio
from .bhpm import TrainAbort, _Sampler, features
from .fields import PositiveField, SirenNet
from .optim import Adam


@dataclass
class IpinnConfig:
    steps: int = 8000
    warmup_steps: int = 1000
    data_batch: int = 4096
    colloc_batch: int = 1024
    colloc_pool: int = 200000
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    u_widths: tuple = (128, 128, 128, 128)
    v_widths: tuple = (64, 64, 64)
    w0: float = 30.0
    lambda_phys: float = 1.0     # weight on the z-scored residual term
    log_every: int = 50


class IpinnModel:
    def __init__(self, u_net, v_net, lambda_phys, scale):
        self.u_net = u_net
        self.v_net = v_net
        self.lambda_phys = lambda_phys
        self.scale = scale

    @classmethod
    def create(cls, scale, config):
        u_net = SirenNet(3, list(config.u_widths), w0=config.w0, seed=config.seed)
        v_net = PositiveField.create(2, list(config.v_widths), w0=config.w0,
                                     seed=config.seed + 1)
        return cls(u_net, v_net, config.lambda_phys, scale)

    def params(self):
        return [t for _, t in self.u_net.params()] + [t for _, t in self.v_net.params()]


def residual(model, coords, create_graph=True):
    """PDE residual r = u_tt - v^2 (u_xx + u_yy) at normalized coordinates,
    in physical units."""
    coords = np.asarray(coords, dtype=np.float64)
    feats = features(model.u_net, coords, scale=model.scale, create_graph=create_graph)
    v = model.v_net.apply(ad.Tensor(coords[:, :2]))
    lap = feats.psi[:, 2]
    return ad.sub(feats.u_tt, ad.mul(ad.square(v), lap))


def train_ipinn(model, ds, config):
    """Minimize MSE_data + lambda * MSE_residual (residual z-scored by the
    target RMS measured at the end of warmup). Returns metrics rows."""
    norm = dataio.normalize(ds)
    model.scale = norm.scale
    sampler = _Sampler(norm, config)
    opt = Adam(model.params(), lr=config.lr, betas=config.betas, eps=config.eps)
    resid_scale = 1.0

    metrics = []
    t_start = time.perf_counter()
    for step_i in range(config.steps):
        warm = step_i < config.warmup_steps
        if step_i == config.warmup_steps and config.lambda_phys > 0:
            sample = sampler.colloc_batch(min(4096, config.colloc_pool))
            with ad.finite_checks(False):
                f0 = features(model.u_net, sample, scale=model.scale, create_graph=False)
            resid_scale = max(float(np.sqrt((f0.u_tt.data ** 2).mean())), 1e-12)

        coords, targets = sampler.data_batch(config.data_batch)
        with ad.finite_checks(False):
            u = model.u_net.apply(ad.Tensor(coords))
            loss = ad.mean(ad.square(ad.sub(u, ad.Tensor(targets))))
            phys_mse = None
            if not warm and config.lambda_phys > 0:
                colloc = sampler.colloc_batch(config.colloc_batch)
                r = residual(model, colloc)
                phys_mse = ad.mean(ad.square(ad.mul(r, 1.0 / resid_scale)))
                loss = ad.add(loss, ad.mul(phys_mse, config.lambda_phys))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise TrainAbort(f"loss non-finite at step {step_i}")
            grads = ad.grad(loss, opt.params)
        opt.step(grads)

        if step_i % config.log_every == 0 or step_i == config.steps - 1:
            with ad.no_grad(), ad.finite_checks(False):
                u_now = model.u_net.apply(ad.Tensor(coords)).data
            data_rmse = float(np.sqrt(((u_now - targets) ** 2).mean()) * model.scale.value_std)
            phys_rms = float("nan")
            if phys_mse is not None:
                phys_rms = float(np.sqrt(phys_mse.data) * resid_scale)
            metrics.append({"step": step_i, "loss": loss_val,
                            "data_rmse": data_rmse, "phys_rms": phys_rms})
    metrics.append({"step": config.steps, "elapsed_s": time.perf_counter() - t_start})
    return metrics


def v_field_map(model, ny, nx):
    """Recovered speed field on the window grid."""
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)
    with ad.no_grad(), ad.finite_checks(False):
        vals = model.v_net.apply(ad.Tensor(coords)).data
    return vals.reshape(ny, nx)


def residual_map(model, ds, nt_slices=12):
    """Per-cell RMS of the residual over sampled time slices (diagnostic
    for where the assumed physics disagree with the data)."""
    norm = dataio.normalize(ds)
    nt, ny, nx = norm.values.shape
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    ts = np.linspace(-0.9, 0.9, nt_slices)
    acc = np.zeros((ny, nx))
    with ad.finite_checks(False):
        for t in ts:
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            coords = np.stack([xx.reshape(-1), yy.reshape(-1),
                               np.full(ny * nx, t)], axis=1)
            r = residual(model, coords, create_graph=False)
            acc += (r.data ** 2).reshape(ny, nx)
    return np.sqrt(acc / nt_slices)
