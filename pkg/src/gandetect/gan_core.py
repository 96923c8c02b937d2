"""DCGAN generator/discriminator and the adversarial training loop.

The generator projects a 100-d latent vector to a 4x4x1024 grid and
upsamples through three fractionally-strided 4x4 convolutions
(1024 -> 512 -> 256 -> 3, stride 2) to a tanh 3x32x32 chip. The
discriminator mirrors it with strided 4x4 convolutions 3 -> 256 -> 512
-> 1024 and a fully-connected sigmoid head, giving activation maps of
16x16x256, 8x8x512 and 4x4x1024. Those channel widths are a hard
contract: 16 * (256 + 512 + 1024) = 28672, the dimension of the pooled
feature probe in disc_features.

``width_divisor`` scales every channel width down for smoke tests and
gradient checks; the feature-dimension contract only holds at 1.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .dataset_io import CifarRecord, records_to_tensor
from .errors import DataError, NumericalError

LATENT_DIM = 100
PROB_EPS = 1e-7

GENERATOR_CHANNELS = (1024, 512, 256)
DISCRIMINATOR_CHANNELS = (256, 512, 1024)
FEATURE_DIM = 16 * sum(DISCRIMINATOR_CHANNELS)  # 28672


def _scaled(channels: tuple[int, ...], divisor: int) -> tuple[int, ...]:
    if divisor < 1 or any(c % divisor for c in channels):
        raise ValueError(f"width_divisor {divisor} must divide {channels}")
    return tuple(c // divisor for c in channels)


class GeneratorNet(nn.Module):
    """Latent vector (100,) -> chip (3, 32, 32) in tanh range."""

    def __init__(self, width_divisor: int = 1):
        super().__init__()
        c0, c1, c2 = _scaled(GENERATOR_CHANNELS, width_divisor)
        self.width_divisor = width_divisor
        self.c0 = c0
        self.fc = nn.Linear(LATENT_DIM, 4 * 4 * c0, bias=False)
        self.bn0 = nn.BatchNorm2d(c0)
        self.deconv1 = nn.ConvTranspose2d(c0, c1, 4, 2, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c1)
        self.deconv2 = nn.ConvTranspose2d(c1, c2, 4, 2, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.deconv3 = nn.ConvTranspose2d(c2, 3, 4, 2, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z).view(-1, self.c0, 4, 4)
        h = F.relu(self.bn0(h))
        h = F.relu(self.bn1(self.deconv1(h)))
        h = F.relu(self.bn2(self.deconv2(h)))
        return torch.tanh(self.deconv3(h))


class DiscriminatorNet(nn.Module):
    """Chip (3, 32, 32) -> realness probability in (0, 1)."""

    def __init__(self, width_divisor: int = 1):
        super().__init__()
        c1, c2, c3 = _scaled(DISCRIMINATOR_CHANNELS, width_divisor)
        self.width_divisor = width_divisor
        self.channels = (c1, c2, c3)
        self.conv1 = nn.Conv2d(3, c1, 4, 2, 1, bias=False)
        self.conv2 = nn.Conv2d(c1, c2, 4, 2, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c2)
        self.conv3 = nn.Conv2d(c2, c3, 4, 2, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(c3)
        self.head = nn.Linear(4 * 4 * c3, 1)

    @property
    def feature_dim(self) -> int:
        return 16 * sum(self.channels)

    def feature_maps(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Post-nonlinearity activations at 16x16, 8x8 and 4x4."""
        a1 = F.leaky_relu(self.conv1(x), 0.2)
        a2 = F.leaky_relu(self.bn2(self.conv2(a1)), 0.2)
        a3 = F.leaky_relu(self.bn3(self.conv3(a2)), 0.2)
        return a1, a2, a3

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid realness scores, for loss evaluation in logit space."""
        _, _, a3 = self.feature_maps(x)
        return self.head(a3.flatten(1)).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def init_net(module: nn.Module, seed: int) -> None:
    """DCGAN-style init: conv/linear weights N(0, 0.02), BN gamma N(1, 0.02)."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.normal_(1.0, 0.02, generator=gen)
            m.bias.data.zero_()


def make_generator(seed: int = 0, width_divisor: int = 1) -> GeneratorNet:
    g = GeneratorNet(width_divisor)
    init_net(g, seed)
    return g


def make_discriminator(seed: int = 0, width_divisor: int = 1) -> DiscriminatorNet:
    d = DiscriminatorNet(width_divisor)
    init_net(d, seed)
    return d


def sample_latent(n: int, seed: int) -> torch.Tensor:
    """n i.i.d. standard-normal latent vectors, deterministic given seed."""
    if n < 0:
        raise ValueError("n must be >= 0")
    gen = torch.Generator().manual_seed(seed)
    return torch.randn((n, LATENT_DIM), generator=gen)


def _check_finite_params(net: nn.Module, name: str) -> None:
    for pname, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalError(f"{name} parameter {pname} contains non-finite values")


def generate(g: GeneratorNet, z: torch.Tensor) -> torch.Tensor:
    """Inference-mode generation: (B, 100) -> (B, 3, 32, 32)."""
    if z.dim() != 2 or z.shape[1] != LATENT_DIM:
        raise ValueError(f"latent batch must be (n, {LATENT_DIM}), got {tuple(z.shape)}")
    _check_finite_params(g, "generator")
    g.eval()
    with torch.no_grad():
        return g(z)


def discriminate(d: DiscriminatorNet, x: torch.Tensor) -> torch.Tensor:
    """Inference-mode scoring: (B, 3, 32, 32) -> (B,) probabilities.

    Scores the batch with its own batch statistics, matching how inputs
    were normalized during training (real and fake batches never mix
    there, so the running averages track a mixture no single-domain
    batch resembles). Running statistics are snapshotted and restored;
    the module is left unchanged.
    """
    if x.dim() != 4 or x.shape[1:] != (3, 32, 32):
        raise ValueError(f"chip batch must be (n, 3, 32, 32), got {tuple(x.shape)}")
    bn_state = [
        (m, m.running_mean.clone(), m.running_var.clone(), m.num_batches_tracked.clone())
        for m in d.modules()
        if isinstance(m, nn.BatchNorm2d)
    ]
    d.train()
    try:
        with torch.no_grad():
            out = d(x)
    finally:
        for m, mean, var, tracked in bn_state:
            m.running_mean.copy_(mean)
            m.running_var.copy_(var)
            m.num_batches_tracked.copy_(tracked)
        d.eval()
    return out


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating GAN losses from discriminator probabilities.

    d_loss = -mean log D(real) - mean log(1 - D(fake));
    g_loss = -mean log D(fake). Probabilities are clipped to
    [eps, 1 - eps] with eps = 1e-7 so both losses stay finite.
    """
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("gan_losses requires non-empty probability batches")
    real = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS)
    fake = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS)
    d_loss = -torch.log(real).mean() - torch.log(1.0 - fake).mean()
    g_loss = -torch.log(fake).mean()
    return d_loss, g_loss


def gan_losses_from_logits(
    real_logits: torch.Tensor, fake_logits: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Same objective as gan_losses, evaluated from pre-sigmoid scores.

    Identical values wherever the probabilities lie inside the clip
    range, but the gradient stays alive under saturation: a clamped
    probability has zero gradient, which permanently freezes the
    generator once the discriminator's scores pass the clip boundary
    (a few dozen Adam steps on a head this wide). The training loop
    therefore optimizes this form; both losses remain finite and
    non-negative for all inputs.
    """
    if real_logits.numel() == 0 or fake_logits.numel() == 0:
        raise ValueError("gan_losses_from_logits requires non-empty batches")
    d_loss = -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()
    g_loss = -F.logsigmoid(fake_logits).mean()
    return d_loss, g_loss


@dataclass(frozen=True)
class GanTrainConfig:
    batch_size: int = 72
    epochs: int = 25
    learning_rate: float = 2e-4
    beta1: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0  # batches between checkpoints; 0 = final only
    width_divisor: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class GanLogRow:
    iteration: int
    epoch: int
    d_loss: float
    g_loss: float
    mean_d_real: float
    mean_d_fake: float
    wall_ms: float


def write_training_log(path: str | Path, rows: list[GanLogRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "epoch", "d_loss", "g_loss", "mean_d_real", "mean_d_fake", "wall_ms"])
        for r in rows:
            writer.writerow([r.iteration, r.epoch, r.d_loss, r.g_loss, r.mean_d_real, r.mean_d_fake, r.wall_ms])


def save_gan_checkpoint(
    path: str | Path,
    g: GeneratorNet,
    d: DiscriminatorNet,
    iteration: int,
    config_echo: dict | None = None,
    opt_g: torch.optim.Optimizer | None = None,
    opt_d: torch.optim.Optimizer | None = None,
) -> None:
    tensors = {}
    tensors.update(ckpt.module_state_tensors(g, "g."))
    tensors.update(ckpt.module_state_tensors(d, "d."))
    if opt_g is not None:
        tensors.update(ckpt.optimizer_state_tensors(opt_g, list(g.named_parameters()), "opt_g."))
    if opt_d is not None:
        tensors.update(ckpt.optimizer_state_tensors(opt_d, list(d.named_parameters()), "opt_d."))
    meta = {
        "kind": "gan",
        "iteration": iteration,
        "width_divisor": g.width_divisor,
        "config": config_echo or {},
    }
    ckpt.save_checkpoint(path, tensors, meta)


def load_gan_checkpoint(path: str | Path) -> tuple[GeneratorNet, DiscriminatorNet, dict]:
    archive = ckpt.load_checkpoint(path)
    divisor = int(archive.meta.get("width_divisor", 1))
    g = GeneratorNet(divisor)
    d = DiscriminatorNet(divisor)
    ckpt.load_module_state(g, archive.tensors, "g.")
    ckpt.load_module_state(d, archive.tensors, "d.")
    g.eval()
    d.eval()
    return g, d, archive.meta


def train_gan(
    records: list[CifarRecord],
    cfg: GanTrainConfig,
    checkpoint_dir: str | Path | None = None,
    generator: GeneratorNet | None = None,
    discriminator: DiscriminatorNet | None = None,
    progress: bool = False,
) -> tuple[GeneratorNet, DiscriminatorNet, list[GanLogRow]]:
    """Alternate one discriminator and one generator step per iteration.

    Batches follow a seeded shuffle; the trailing partial batch of each
    epoch is dropped, so an epoch runs exactly len(records) // batch_size
    iterations. Losses are evaluated in logit space (see
    gan_losses_from_logits) so generator gradients survive discriminator
    saturation. Single-threaded runs are bit-reproducible given the seed.
    """
    n_batches = len(records) // cfg.batch_size
    if n_batches < 1:
        raise DataError(
            f"need at least one full batch: {len(records)} records < batch {cfg.batch_size}"
        )
    chips = records_to_tensor(records)
    g = generator if generator is not None else make_generator(cfg.seed, cfg.width_divisor)
    d = discriminator if discriminator is not None else make_discriminator(cfg.seed + 1, cfg.width_divisor)
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    shuffle_gen = torch.Generator().manual_seed(cfg.seed + 2)
    latent_gen = torch.Generator().manual_seed(cfg.seed + 3)

    config_echo = asdict(cfg)
    log: list[GanLogRow] = []
    iteration = 0
    g.train()
    d.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(len(records), generator=shuffle_gen)
        for b in range(n_batches):
            t0 = time.perf_counter()
            iteration += 1
            real = chips[perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]]

            # Discriminator step: real batch up, detached fake batch down.
            opt_d.zero_grad(set_to_none=True)
            real_logits = d.logits(real)
            z = torch.randn((cfg.batch_size, LATENT_DIM), generator=latent_gen)
            fake = g(z)
            fake_logits_detached = d.logits(fake.detach())
            d_loss, _ = gan_losses_from_logits(real_logits, fake_logits_detached)
            d_loss.backward()
            opt_d.step()

            # Generator step against the updated discriminator.
            opt_g.zero_grad(set_to_none=True)
            fake_logits = d.logits(fake)
            _, g_loss = gan_losses_from_logits(real_logits.detach(), fake_logits)
            g_loss.backward()
            opt_g.step()

            row = GanLogRow(
                iteration=iteration,
                epoch=epoch,
                d_loss=float(d_loss.detach()),
                g_loss=float(g_loss.detach()),
                mean_d_real=float(torch.sigmoid(real_logits.detach()).mean()),
                mean_d_fake=float(torch.sigmoid(fake_logits.detach()).mean()),
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
            if not (np.isfinite(row.d_loss) and np.isfinite(row.g_loss)):
                raise NumericalError(
                    f"non-finite GAN loss at iteration {iteration}: "
                    f"d_loss={row.d_loss} g_loss={row.g_loss}"
                )
            log.append(row)
            if progress and iteration % 10 == 0:
                print(
                    f"[train-gan] iter {iteration} epoch {epoch} "
                    f"d_loss={row.d_loss:.4f} g_loss={row.g_loss:.4f} "
                    f"D(real)={row.mean_d_real:.3f} D(fake)={row.mean_d_fake:.3f}",
                    flush=True,
                )
            if (
                checkpoint_dir is not None
                and cfg.checkpoint_every > 0
                and iteration % cfg.checkpoint_every == 0
            ):
                save_gan_checkpoint(
                    Path(checkpoint_dir) / f"gan_iter_{iteration:06d}.ckpt",
                    g, d, iteration, config_echo, opt_g, opt_d,
                )
    if checkpoint_dir is not None:
        save_gan_checkpoint(
            Path(checkpoint_dir) / "gan_final.ckpt", g, d, iteration, config_echo, opt_g, opt_d
        )
    g.eval()
    d.eval()
    return g, d, log
