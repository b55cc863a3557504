"""Training loops for Pix2Pix, CycleGAN, and the VAE.

Each batch runs one discriminator step followed by one generator step (the
VAE has a single joint step). Losses are checked before every update: a
non-finite value raises :class:`TrainingDivergedError` carrying the bundle
in its last finite state.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import functional as F
from .data import as_pairs, batch_iterator
from .errors import NumericError, TrainingDivergedError, ValidationError
from .models import MODEL_KINDS, ModelBundle, build_bundle, kl_divergence, reparameterize
from .optim import Adam
from .tensor import Rng, Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    Defaults are the full-scale setting (256x256 RGB, batch 256, 64-wide first
    layer). :meth:`desk` gives the CPU-sized variant. ``lambda_cyc`` and
    ``lambda_id`` follow the usual CycleGAN convention (identity weight half
    the cycle weight).
    """

    kind: str = "pix2pix"
    epochs: int = 30
    batch_size: int = 256
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l1: float = 100.0
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    kl_weight: float = 1.0
    image_size: int = 256
    in_channels: int = 3
    base_channels: int = 64
    latent_dim: int = 128
    seed: int = 0
    deterministic: bool = True

    @classmethod
    def desk(cls, kind: str = "pix2pix", **overrides) -> "TrainConfig":
        """CPU-sized profile.

        The KL weight defaults to ``1 / image_size**2`` so that, against the
        pixel-mean reconstruction term, it weighs the same as a pixel-summed
        ELBO. With ``kl_weight=1`` at 64 pixels the latent collapses to the prior.
        """
        values = dict(kind=kind, batch_size=16, image_size=64, in_channels=1, base_channels=16)
        values.update(overrides)
        values.setdefault("kl_weight", 1.0 / values["image_size"] ** 2)
        return cls(**values)

    def validate(self) -> "TrainConfig":
        if self.kind not in MODEL_KINDS:
            raise ValidationError(f"unknown model {self.kind!r}; supported: {', '.join(MODEL_KINDS)}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (batch statistics need two samples)")
        for name in ("lr", "lambda_l1", "lambda_cyc", "lambda_id", "kl_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        return self

    def as_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw in values.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            out[key] = _coerce(key, raw, type(default))
        return cls(**out)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return typ(raw)
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError as exc:
        raise ValidationError(f"config {key}: cannot parse {raw!r} as {typ.__name__}") from exc


@dataclass
class StepRecord:
    epoch: int
    step: int
    losses: Dict[str, float]
    wall_time: float


@dataclass
class TrainHistory:
    records: List[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def component(self, name: str) -> np.ndarray:
        return np.array([r.losses[name] for r in self.records])

    def epoch_means(self, name: str) -> np.ndarray:
        epochs = sorted({r.epoch for r in self.records})
        return np.array([np.mean([r.losses[name] for r in self.records if r.epoch == e]) for e in epochs])

    def loss_rows(self):
        """``(epoch, step, component, value)`` rows in record order."""
        for r in self.records:
            for name, value in r.losses.items():
                yield r.epoch, r.step, name, value

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "step", "component", "value"])
            for epoch, step, name, value in self.loss_rows():
                writer.writerow([epoch, step, name, repr(float(value))])


@contextlib.contextmanager
def frozen(params: Dict[str, Tensor]):
    """Stop recording gradients for ``params`` inside the block."""
    flags = {name: p.requires_grad for name, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for name, p in params.items():
            p.requires_grad = flags[name]


def _determinism(cfg: TrainConfig):
    return threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()


def _check(losses: Dict[str, float], bundle, batch, history, epoch, step):
    bad = [k for k, v in losses.items() if not np.isfinite(v)]
    if bad:
        raise TrainingDivergedError(
            f"non-finite loss {', '.join(bad)} at epoch {epoch} step {step}",
            bundle=bundle,
            batch_indices=np.asarray(batch).tolist(),
            history=history,
        )


def _loop(cfg: TrainConfig, n: int, bundle: ModelBundle, step_fn: Callable) -> TrainHistory:
    history = TrainHistory()
    step = 0
    with _determinism(cfg):
        for epoch in range(cfg.epochs):
            for i, batch in enumerate(batch_iterator(n, cfg.batch_size, cfg.seed, epoch)):
                # a lone sample cannot supply batch statistics at a 1x1 bottleneck
                if len(batch) < 2:
                    continue
                start = time.perf_counter()
                try:
                    losses = step_fn(batch, epoch, step, history, i)
                except TrainingDivergedError:
                    raise
                except NumericError as exc:
                    raise TrainingDivergedError(
                        f"{exc} at epoch {epoch} step {step}",
                        bundle=bundle,
                        batch_indices=np.asarray(batch).tolist(),
                        history=history,
                    ) from exc
                history.records.append(StepRecord(epoch, step, losses, time.perf_counter() - start))
                step += 1
            if history.records:
                last = history.records[-1].losses
                logger.info("epoch %d/%d %s", epoch + 1, cfg.epochs, " ".join(f"{k}={v:.4f}" for k, v in last.items()))
    return history


def _start(cfg: TrainConfig, kind: str) -> ModelBundle:
    cfg.validate()
    if cfg.kind != kind:
        raise ValidationError(f"config kind {cfg.kind!r} given to the {kind} trainer")
    return build_bundle(kind, cfg.image_size, cfg.in_channels, cfg.base_channels, cfg.latent_dim, cfg.seed)


def _adam(params, cfg):
    return Adam(params, cfg.lr, (cfg.beta1, cfg.beta2))


def _nonempty(n, what="dataset"):
    if n < 1:
        raise ValidationError(f"{what} is empty")


def train_pix2pix(data, cfg: TrainConfig, rng: Optional[Rng] = None):
    """Conditional GAN: BCE on a PatchGAN over (source, image) pairs plus weighted L1.

    Returns ``(bundle, history)``.
    """
    pairs = as_pairs(data)
    _nonempty(len(pairs))
    bundle = _start(cfg, "pix2pix")
    G, D = bundle.networks["G"], bundle.networks["D"]
    opt_g, opt_d = _adam(G.params, cfg), _adam(D.params, cfg)
    bundle.optimizers = {"G": opt_g.state, "D": opt_d.state}

    def step(batch, epoch, k, history, i):
        xs, ys = pairs.take(batch)
        x, y = Tensor(xs), Tensor(ys)
        with Tape():
            fake = G(x)
            d_real = D(F.concat_channels(x, y))
            d_fake = D(F.concat_channels(x, fake.detach()))
            d_loss = (F.loss_bce_logits(d_real, 1.0) + F.loss_bce_logits(d_fake, 0.0)) * 0.5
            _check({"d_loss": d_loss.item()}, bundle, batch, history, epoch, k)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            with frozen(D.params):
                g_adv = F.loss_bce_logits(D(F.concat_channels(x, fake)), 1.0)
                g_l1 = F.loss_l1(fake, y)
                g_total = g_adv + g_l1 * cfg.lambda_l1 if cfg.lambda_l1 else g_adv
                losses = {"d_loss": d_loss.item(), "g_adv": g_adv.item(), "g_l1": g_l1.item(), "g_total": g_total.item()}
                _check(losses, bundle, batch, history, epoch, k)
                opt_g.zero_grad()
                g_total.backward()
                opt_g.step()
        return losses

    return bundle, _loop(cfg, len(pairs), bundle, step)


def _pool(obj, side: int):
    if isinstance(obj, np.ndarray):
        arr = obj.astype(np.float32, copy=False)
        return len(arr), lambda idx: arr[idx]
    pairs = as_pairs(obj)
    return len(pairs), lambda idx: pairs.take(idx)[side]


def train_cyclegan(pool_t1, pool_t2=None, cfg: TrainConfig = None, rng: Optional[Rng] = None):
    """Two generators and two unconditional discriminators on unpaired pools.

    ``pool_t1``/``pool_t2`` are (N, C, S, S) arrays or paired datasets; with
    ``pool_t2=None`` both sides of the paired ``pool_t1`` are used. The T2
    batch is drawn through its own permutation, so pairing is never used.
    """
    if cfg is None:
        raise ValidationError("train_cyclegan needs a TrainConfig")
    if pool_t2 is None:
        n1, get_x = _pool(pool_t1, 0)
        n2, get_y = _pool(pool_t1, 1)
    else:
        n1, get_x = _pool(pool_t1, 0)
        n2, get_y = _pool(pool_t2, 1)
    _nonempty(n1, "T1 pool")
    _nonempty(n2, "T2 pool")
    bundle = _start(cfg, "cyclegan")
    nets = bundle.networks
    G1, G2, D1, D2 = nets["G1"], nets["G2"], nets["D_T1"], nets["D_T2"]
    g_params = {**G1.params, **G2.params}
    d_params = {**D1.params, **D2.params}
    opt_g, opt_d = _adam(g_params, cfg), _adam(d_params, cfg)
    bundle.optimizers = {"G": opt_g.state, "D": opt_d.state}
    shuffle_t2 = Rng(cfg.seed)
    orders: Dict[int, np.ndarray] = {}

    def step(batch, epoch, k, history, i):
        if epoch not in orders:
            orders.clear()
            orders[epoch] = shuffle_t2.substream("shuffle-t2", epoch).permutation(n2)
        y_idx = orders[epoch][(i * cfg.batch_size + np.arange(len(batch))) % n2]
        x, y = Tensor(get_x(batch)), Tensor(get_y(y_idx))
        with Tape():
            fake_y = G1(x)
            fake_x = G2(y)
            d_t2 = (F.loss_bce_logits(D2(y), 1.0) + F.loss_bce_logits(D2(fake_y.detach()), 0.0)) * 0.5
            d_t1 = (F.loss_bce_logits(D1(x), 1.0) + F.loss_bce_logits(D1(fake_x.detach()), 0.0)) * 0.5
            _check({"d_t1": d_t1.item(), "d_t2": d_t2.item()}, bundle, batch, history, epoch, k)
            opt_d.zero_grad()
            (d_t1 + d_t2).backward()
            opt_d.step()

            with frozen(d_params):
                adv = F.loss_bce_logits(D2(fake_y), 1.0) + F.loss_bce_logits(D1(fake_x), 1.0)
                total = adv
                cycle = identity = 0.0
                if cfg.lambda_cyc:
                    cyc = F.loss_l1(G2(fake_y), x) + F.loss_l1(G1(fake_x), y)
                    total = total + cyc * cfg.lambda_cyc
                    cycle = cyc.item()
                if cfg.lambda_id:
                    idt = F.loss_l1(G1(y), y) + F.loss_l1(G2(x), x)
                    total = total + idt * cfg.lambda_id
                    identity = idt.item()
                losses = {
                    "d_t1": d_t1.item(),
                    "d_t2": d_t2.item(),
                    "g_adv": adv.item(),
                    "cycle": cycle,
                    "identity": identity,
                    "g_total": total.item(),
                }
                _check(losses, bundle, batch, history, epoch, k)
                opt_g.zero_grad()
                total.backward()
                opt_g.step()
        return losses

    return bundle, _loop(cfg, n1, bundle, step)


def train_vae(data, cfg: TrainConfig, rng: Optional[Rng] = None):
    """Encode the source, decode a reparameterized sample, regress the target.

    Objective: pixel-mean MSE plus ``kl_weight`` times the KL term (summed over
    latent dims, averaged over the batch).
    """
    pairs = as_pairs(data)
    _nonempty(len(pairs))
    bundle = _start(cfg, "vae")
    enc, dec = bundle.networks["enc"], bundle.networks["dec"]
    opt = _adam({**enc.params, **dec.params}, cfg)
    bundle.optimizers = {"VAE": opt.state}
    noise = (rng or Rng(cfg.seed)).stream("noise")

    def step(batch, epoch, k, history, i):
        xs, ys = pairs.take(batch)
        x, y = Tensor(xs), Tensor(ys)
        with Tape():
            mu, logvar = enc(x)
            eps = noise.standard_normal(mu.shape)
            out = dec(reparameterize(mu, logvar, eps=eps))
            recon = F.loss_mse(out, y)
            kl = kl_divergence(mu, logvar)
            total = recon + kl * cfg.kl_weight if cfg.kl_weight else recon
            losses = {"recon": recon.item(), "kl": kl.item(), "total": total.item()}
            _check(losses, bundle, batch, history, epoch, k)
            opt.zero_grad()
            total.backward()
            opt.step()
        return losses

    return bundle, _loop(cfg, len(pairs), bundle, step)


def train(data, cfg: TrainConfig, rng: Optional[Rng] = None):
    """Dispatch to the trainer for ``cfg.kind``."""
    cfg.validate()
    if cfg.kind == "pix2pix":
        return train_pix2pix(data, cfg, rng)
    if cfg.kind == "cyclegan":
        return train_cyclegan(data, None, cfg, rng)
    return train_vae(data, cfg, rng)

