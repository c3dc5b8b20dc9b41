"""End-to-end training loop: forward both views, ID + consensus losses, SGD step."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import __version__
from .dataio import (STREAM_BANK, STREAM_ENSEMBLE, STREAM_INIT, STREAM_NOISE, AugmentConfig, Batch, Dataset,
                     batch_iterator, stream)
from .ensemble import KINDS, TransformEnsemble, consensus_loss, init_ensemble
from .instdisc import MemoryBank, bank_update, draw_noise_ids, nce_loss
from .metrics import MetricReport, evaluate, pairwise_nmi_diversity
from .nn import SGD, MLP, NonFiniteError, Params, init_encoder, init_head, normalize_rows, normalize_rows_backward
from .softclust import Prototypes, init_prototypes, sinkhorn_codes, soft_assign

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.03
    lr_decay_epochs: Tuple[int, ...] = (60, 120, 160)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 1.0
    beta: float = 1.0
    K: Optional[int] = None  # None: number of classes in the labels
    tau_cluster: float = 0.1
    tau_id: float = 0.5
    epsilon: float = 0.05
    sinkhorn_iters: int = 3
    ensemble_size: int = 4
    ensemble_kind: str = "gaussian_projection"
    proj_dim: Optional[int] = None  # None: embed_dim // 2
    encoder_hidden: Tuple[int, ...] = (64,)
    feat_dim: int = 128
    head_hidden: int = 256
    embed_dim: int = 64
    head_standardize: bool = False
    bank_momentum: float = 0.5
    m_noise: Optional[int] = None  # None: min(4096, N - 1)
    noise_sigma: float = 0.1
    dropout_p: float = 0.1
    scale_jitter: float = 0.1
    eval_every: int = 10
    diversity_every: int = 1
    kmeans_inits: int = 20
    normalize_features: bool = True
    seed: int = 0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.noise_sigma, self.dropout_p, self.scale_jitter)

    def validate(self, n: Optional[int] = None) -> List[str]:
        """Every problem with this config, not just the first."""
        errs = []
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.batch_size < 2:
            errs.append("batch_size must be >= 2")
        if n is not None and self.batch_size > n:
            errs.append(f"batch_size {self.batch_size} exceeds dataset size {n}")
        if not self.lr >= 0:
            errs.append("lr must be >= 0")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            errs.append("lr_decay_epochs must be strictly increasing")
        if not self.lr_decay_factor > 0:
            errs.append("lr_decay_factor must be > 0")
        if not 0 <= self.momentum < 1:
            errs.append("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            errs.append("alpha and beta must be >= 0")
        if self.K is not None and self.K < 2:
            errs.append("K must be >= 2")
        for name in ("tau_cluster", "tau_id", "epsilon"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        if self.sinkhorn_iters < 1:
            errs.append("sinkhorn_iters must be >= 1")
        if self.ensemble_size < 0:
            errs.append("ensemble_size must be >= 0")
        if self.ensemble_kind not in KINDS:
            errs.append(f"ensemble_kind must be one of {KINDS}")
        if self.proj_dim is not None and self.proj_dim < 2:
            errs.append("proj_dim must be >= 2")
        if min((self.feat_dim, self.head_hidden, self.embed_dim, *self.encoder_hidden)) < 1:
            errs.append("layer widths must be >= 1")
        if self.embed_dim < 2:
            errs.append("embed_dim must be >= 2")
        if not 0 <= self.bank_momentum < 1:
            errs.append("bank_momentum must be in [0, 1)")
        if self.m_noise is not None and (self.m_noise < 1 or (n is not None and self.m_noise >= n)):
            errs.append("m_noise must be in [1, N-1]")
        try:
            self.augment
        except ValueError as e:
            errs.append(str(e))
        if self.eval_every < 0 or self.diversity_every < 0:
            errs.append("eval_every and diversity_every must be >= 0")
        if self.kmeans_inits < 1:
            errs.append("kmeans_inits must be >= 1")
        return errs

    def resolved(self, ds: Dataset) -> "TrainConfig":
        errs = self.validate(ds.n)
        K = self.K if self.K is not None else ds.n_classes
        if K is None:
            errs.append("K must be given for an unlabeled dataset")
        if errs:
            raise ValueError("invalid config:\n  " + "\n  ".join(errs))
        return replace(
            self,
            K=K,
            proj_dim=self.proj_dim if self.proj_dim is not None else max(2, self.embed_dim // 2),
            m_noise=self.m_noise if self.m_noise is not None else min(4096, ds.n - 1),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``: lr * factor**(decay epochs already reached)."""
    k = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor ** k


def total_loss(alpha: float, beta: float, l_z: float, l_b: float) -> float:
    return alpha * l_z + beta * l_b


@dataclass
class ModelState:
    cfg: TrainConfig
    encoder: MLP
    head: MLP
    protos: Prototypes
    bank: MemoryBank
    ensemble: TransformEnsemble
    optimizer: SGD
    epoch: int = 0
    step: int = 0

    @property
    def params(self) -> Params:
        return {**self.encoder.params, **self.head.params, "protos": self.protos.C}


def init_state(cfg: TrainConfig, ds: Dataset) -> ModelState:
    cfg = cfg.resolved(ds)
    rng = stream(cfg.seed, STREAM_INIT)
    encoder = init_encoder(ds.dim, cfg.encoder_hidden, cfg.feat_dim, rng)
    head = init_head(cfg.feat_dim, cfg.head_hidden, cfg.embed_dim, rng, cfg.head_standardize)
    protos = init_prototypes(cfg.K, cfg.embed_dim, rng)
    bank = MemoryBank.random(ds.n, cfg.feat_dim, stream(cfg.seed, STREAM_BANK),
                             cfg.bank_momentum, cfg.tau_id, cfg.m_noise)
    ens = init_ensemble(cfg.ensemble_size, cfg.ensemble_kind, cfg.embed_dim, cfg.proj_dim,
                        stream(cfg.seed, STREAM_ENSEMBLE))
    ens.seed = cfg.seed
    return ModelState(cfg, encoder, head, protos, bank, ens, SGD(cfg.momentum, cfg.weight_decay))


@dataclass
class StepLosses:
    l_b: float
    l_z: float
    l_total: float


@dataclass
class Forward:
    """Everything one batch produces before the optimizer step."""

    losses: StepLosses
    grads: Params
    f1_unit: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    noise_ids: np.ndarray


def compute_losses(state: ModelState, batch: Batch, noise_ids: Optional[np.ndarray] = None,
                   codes: Optional[Tuple[np.ndarray, np.ndarray]] = None, with_grad: bool = True) -> Forward:
    """Losses and parameter gradients for one batch, in the training order.

    ``codes`` overrides the Sinkhorn targets (they are constants either way);
    ``noise_ids`` overrides the NCE noise draws.
    """
    cfg = state.cfg
    C = state.protos.C
    f1, enc_c1 = state.encoder.forward(batch.view1)
    f2, enc_c2 = state.encoder.forward(batch.view2)
    z1, head_c1 = state.head.forward(f1)
    z2, head_c2 = state.head.forward(f2)

    f1_unit, f1_norm = normalize_rows(f1)
    if noise_ids is None:
        noise_ids = draw_noise_ids(batch.indices, state.bank.n, state.bank.m_noise,
                                   stream(cfg.seed, STREAM_NOISE, state.step))
    nce = nce_loss(state.bank, f1_unit, batch.indices, noise_ids=noise_ids, with_grad=with_grad and cfg.beta != 0)

    if codes is None:
        q1 = sinkhorn_codes(z1, C, cfg.epsilon, cfg.sinkhorn_iters).q_rows
        q2 = sinkhorn_codes(z2, C, cfg.epsilon, cfg.sinkhorn_iters).q_rows
    else:
        q1, q2 = codes
    use_consensus = with_grad and cfg.alpha != 0 and len(state.ensemble) > 0
    cons = consensus_loss(state.ensemble, z1, z2, C, q1, q2, cfg.tau_cluster, with_grad=use_consensus)

    losses = StepLosses(nce.loss, cons.loss, total_loss(cfg.alpha, cfg.beta, cons.loss, nce.loss))
    for name, v in (("L_b", losses.l_b), ("L_Z", losses.l_z), ("L_total", losses.l_total)):
        if not math.isfinite(v):
            raise NonFiniteError(f"non-finite loss term {name} at step {state.step}")

    grads: Params = {}
    if with_grad:
        grad_f1 = grad_f2 = None
        if nce.grad_feats is not None:
            grad_f1 = cfg.beta * normalize_rows_backward(nce.grad_feats, f1_unit, f1_norm)
        if use_consensus:
            gf1, hg1 = state.head.backward(cfg.alpha * cons.grad_Z1, head_c1)
            gf2, hg2 = state.head.backward(cfg.alpha * cons.grad_Z2, head_c2)
            grads.update({k: hg1[k] + hg2[k] for k in hg1})
            grads["protos"] = cfg.alpha * cons.grad_C
            grad_f1 = gf1 if grad_f1 is None else grad_f1 + gf1
            grad_f2 = gf2
        if grad_f1 is not None:
            _, eg = state.encoder.backward(grad_f1, enc_c1)
            if grad_f2 is not None:
                _, eg2 = state.encoder.backward(grad_f2, enc_c2)
                eg = {k: eg[k] + eg2[k] for k in eg}
            grads.update(eg)
    return Forward(losses, grads, f1_unit, q1, q2, noise_ids)


def train_step(state: ModelState, batch: Batch, lr: Optional[float] = None) -> StepLosses:
    """One optimizer step plus the memory-bank update; mutates ``state``."""
    lr = lr_at(state.cfg, state.epoch) if lr is None else lr
    fw = compute_losses(state, batch)
    state.optimizer.step(state.params, fw.grads, lr)
    bank_update(state.bank, fw.f1_unit, batch.indices)
    state.step += 1
    return fw.losses


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch)]).generate_state(1)[0])


def extract_features(state: ModelState, ds: Dataset, normalize: bool = False) -> np.ndarray:
    """Encoder outputs for the whole dataset, no augmentation."""
    feats, _ = state.encoder.forward(ds.features)
    if normalize:
        feats, _ = normalize_rows(feats)
    return feats


def transform_partitions(state: ModelState, ds: Dataset) -> List[np.ndarray]:
    """Hard cluster assignment of every point under each ensemble transform."""
    feats, _ = state.encoder.forward(ds.features)
    z, _ = state.head.forward(feats)
    C = state.protos.C
    return [soft_assign(z @ A.T, A @ C, state.cfg.tau_cluster).P.argmax(1) for A in state.ensemble.matrices]


def diversity(state: ModelState, ds: Dataset) -> Tuple[float, float]:
    return pairwise_nmi_diversity(transform_partitions(state, ds))


def evaluate_state(state: ModelState, ds: Dataset, k: Optional[int] = None) -> MetricReport:
    if ds.labels is None:
        raise ValueError("evaluation needs a labeled dataset")
    k = ds.n_classes if k is None else k
    return evaluate(extract_features(state, ds), ds.labels, k=k, n_init=state.cfg.kmeans_inits,
                    seed=state.cfg.seed, normalize=state.cfg.normalize_features)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    l_b: float
    l_z: float
    l_total: float
    wall_time_seconds: float
    acc: Optional[float] = None
    nmi: Optional[float] = None
    ari: Optional[float] = None
    pairwise_nmi_mean: Optional[float] = None
    pairwise_nmi_std: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _due(every: int, epoch: int, last: int) -> bool:
    return every > 0 and (epoch % every == 0 or epoch == 1 or epoch == last)


def run_epoch(state: ModelState, ds: Dataset) -> EpochStats:
    cfg = state.cfg
    lr = lr_at(cfg, state.epoch)
    t0 = time.perf_counter()
    acc = []
    for batch in batch_iterator(ds, cfg.batch_size, cfg.augment, epoch_seed(cfg.seed, state.epoch)):
        acc.append(train_step(state, batch, lr))
    wall = time.perf_counter() - t0
    state.epoch += 1
    return EpochStats(
        epoch=state.epoch, lr=lr,
        l_b=float(np.mean([s.l_b for s in acc])),
        l_z=float(np.mean([s.l_z for s in acc])),
        l_total=float(np.mean([s.l_total for s in acc])),
        wall_time_seconds=wall,
    )


def save_checkpoint(state: ModelState, path) -> None:
    """npz archive: every parameter block, bank, ensemble, optimizer velocity, JSON meta."""
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"vel/{k}": v for k, v in state.optimizer.velocity.items()})
    arrays["bank"] = state.bank.bank
    arrays.update({f"ens/{m}": A for m, A in enumerate(state.ensemble.matrices)})
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.hash(),
        "epoch": state.epoch,
        "step": state.step,
        "encoder_sizes": list(state.encoder.sizes),
        "head_sizes": list(state.head.sizes),
        "ensemble_kinds": state.ensemble.kinds,
        "ensemble_seed": state.ensemble.seed,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ModelState:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
        cfg = TrainConfig.from_dict(meta["config"])
        if cfg.hash() != meta["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        vel = {k[len("vel/"):]: z[k].copy() for k in z.files if k.startswith("vel/")}
        bank = z["bank"].copy()
        ens = [z[f"ens/{m}"].copy() for m in range(len(meta["ensemble_kinds"]))]
    enc = MLP("enc", tuple(meta["encoder_sizes"]), {k: v for k, v in params.items() if k.startswith("enc.")})
    head = MLP("head", tuple(meta["head_sizes"]), {k: v for k, v in params.items() if k.startswith("head.")},
               cfg.head_standardize)
    return ModelState(
        cfg=cfg, encoder=enc, head=head, protos=Prototypes(params["protos"]),
        bank=MemoryBank(bank, cfg.bank_momentum, cfg.tau_id, cfg.m_noise),
        ensemble=TransformEnsemble(ens, list(meta["ensemble_kinds"]), meta["ensemble_seed"]),
        optimizer=SGD(cfg.momentum, cfg.weight_decay, vel),
        epoch=meta["epoch"], step=meta["step"],
    )


def fit(cfg: TrainConfig, ds: Dataset, run_dir=None,
        on_epoch: Optional[Callable[[ModelState, EpochStats], None]] = None,
        state: Optional[ModelState] = None) -> Tuple[ModelState, List[EpochStats]]:
    """Train for ``cfg.epochs`` epochs (resuming ``state`` if given).

    With ``run_dir`` set, epoch stats stream to ``stats.jsonl`` and
    checkpoints are written at start, at every decay epoch and at the end.
    """
    state = init_state(cfg, ds) if state is None else state
    cfg = state.cfg
    stats: List[EpochStats] = []
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "stats.jsonl").touch()
        if state.epoch == 0:
            save_checkpoint(state, run_dir / "ckpt_epoch0000.npz")
    while state.epoch < cfg.epochs:
        st = run_epoch(state, ds)
        if ds.labels is not None and _due(cfg.eval_every, state.epoch, cfg.epochs):
            rep = evaluate_state(state, ds)
            st.acc, st.nmi, st.ari = rep.acc, rep.nmi, rep.ari
        if len(state.ensemble) >= 2 and _due(cfg.diversity_every, state.epoch, cfg.epochs):
            st.pairwise_nmi_mean, st.pairwise_nmi_std = diversity(state, ds)
        stats.append(st)
        log.info("epoch %d  L_b=%.4f  L_Z=%.4f  L_total=%.4f  acc=%s  (%.2fs)",
                 st.epoch, st.l_b, st.l_z, st.l_total, st.acc, st.wall_time_seconds)
        if run_dir is not None:
            with (run_dir / "stats.jsonl").open("a") as fh:
                fh.write(st.to_json() + "\n")
            if state.epoch in cfg.lr_decay_epochs or state.epoch == cfg.epochs:
                save_checkpoint(state, run_dir / f"ckpt_epoch{state.epoch:04d}.npz")
        if on_epoch is not None:
            on_epoch(state, st)
    if run_dir is not None:
        save_checkpoint(state, run_dir / "final.npz")
    return state, stats
