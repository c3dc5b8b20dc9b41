"""Shared builders for trainer-level tests."""

from dataclasses import replace

import numpy as np

from concurl.dataio import batch_iterator
from concurl.trainer import compute_losses, init_state, train_step

from conftest import fd_grad, rel_err


def first_batch(state, ds, seed=0):
    return next(iter(batch_iterator(ds, state.cfg.batch_size, state.cfg.augment, seed)))


def gradient_errors(cfg, ds, batch_seed=0, zero_blocks=()):
    """Max relative error per parameter block between analytic and central-difference gradients.

    Codes and noise ids are frozen at the unperturbed point so the objective is
    the one the analytic backward pass differentiates. Blocks in ``zero_blocks``
    have an identically zero true gradient, where a relative error only measures
    rounding noise; they are reported separately as (max |analytic|, max |numeric|).
    """
    state = init_state(cfg, ds)
    batch = first_batch(state, ds, batch_seed)
    fw = compute_losses(state, batch)
    codes, noise = (fw.q1, fw.q2), fw.noise_ids

    def loss():
        return compute_losses(state, batch, noise_ids=noise, codes=codes, with_grad=False).losses.l_total

    errs, zeros = {}, {}
    for name, p in state.params.items():
        num = fd_grad(loss, p)
        if name in zero_blocks:
            zeros[name] = (float(np.abs(fw.grads[name]).max()), float(np.abs(num).max()))
        elif name in fw.grads:
            errs[name] = rel_err(fw.grads[name], num)
        else:
            # blocks the loss does not touch must have a zero numerical gradient
            errs[name] = float(np.abs(num).max())
    return (errs, zeros) if zero_blocks else errs


def run_steps(cfg, ds, n_steps):
    """Params and bank after each of ``n_steps`` optimizer steps over repeated epochs."""
    state = init_state(cfg, ds)
    snaps = []
    epoch = 0
    while len(snaps) < n_steps:
        for batch in batch_iterator(ds, cfg.batch_size, cfg.augment, epoch):
            train_step(state, batch)
            snaps.append(({k: v.copy() for k, v in state.params.items()}, state.bank.bank.copy()))
            if len(snaps) == n_steps:
                break
        epoch += 1
    return snaps


def id_only(cfg):
    return replace(cfg, alpha=0.0, ensemble_size=0)
