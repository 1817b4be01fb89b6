"""Reference images for perturbation: flip, VAE in-fill and VAE knockoffs.

Every in-filler answers the same question: given the image being explained and
the (relaxed) keep-mask, which values stand in for the dropped pixels?  The
composition itself lives in :func:`knockoff_saliency.maskopt.compose`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Classifier, Vae, decoder_output
from .rng import Rng
from .tensor import NumericError, no_grad

log = logging.getLogger(__name__)


def flip_reference(x: np.ndarray) -> np.ndarray:
    """Background value everywhere."""
    return np.zeros_like(np.asarray(x, dtype=np.float32))


def vae_reference(model: Vae, x: np.ndarray, mask: np.ndarray, rng: Rng) -> np.ndarray:
    """Decode a posterior sample given only the kept part ``x * mask``.

    ``mask`` may carry a leading batch axis; one reference is returned per mask.
    """
    if not isinstance(model, Vae):
        raise TypeError(f"vae_reference needs a Vae, got {type(model).__name__}")
    x = np.asarray(x, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask {mask.shape} does not match image {x.shape}")
    return model.reconstruct(x * mask, rng=rng)


@dataclass
class KnockoffImage:
    pixels: np.ndarray
    sample_id: int
    latent: int
    seed: int


def raster_order(shape=(28, 28)) -> np.ndarray:
    return np.arange(shape[0] * shape[1])


def generate_knockoffs(model: Vae, images: np.ndarray, rngs: list[Rng], order=None,
                       sample_latent: bool = True, reencode_every: int = 1) -> np.ndarray:
    """Sequential knockoff generation for a batch of images.

    For each pixel ``j`` in ``order``: zero it in the working image, encode,
    draw a latent, decode, and write the decoded value back at ``j``.  The
    working image carries every earlier knockoff value forward.  ``rngs`` holds
    one stream per image so results do not depend on batch composition.
    With ``reencode_every > 1`` the latent is refreshed only every that many
    pixels (every pixel is still marginalised and rewritten).
    """
    images = np.asarray(images, dtype=np.float32)
    n, h, w = images.shape
    if len(rngs) != n:
        raise ValueError(f"need one rng per image, got {len(rngs)} for {n}")
    order = raster_order((h, w)) if order is None else np.asarray(order)
    if sorted(order.tolist()) != list(range(h * w)):
        raise ValueError("order must be a permutation of all pixel indices")
    k = model.latent
    noise = np.stack([r.normal((len(order), k)) for r in rngs], axis=1)  # (steps, n, k)
    work = images.reshape(n, h * w).copy()
    decoded = None
    with no_grad():
        for step, j in enumerate(order):
            work[:, j] = 0.0
            if decoded is None or step % reencode_every == 0:
                mu, logvar = model.encode(work.reshape(n, h, w))
                z = model.reparameterize(mu, logvar, noise[step]) if sample_latent else mu
                decoded = decoder_output(model.decode_logits(z).data).reshape(n, h * w)
            val = decoded[:, j]
            if not np.all(np.isfinite(val)):
                raise NumericError(f"knockoff generation: non-finite value at pixel {int(j)}")
            work[:, j] = val
    return work.reshape(n, h, w)


def generate_knockoff(model: Vae, x: np.ndarray, rng: Rng, order=None, sample_id: int = 0,
                      sample_latent: bool = True, reencode_every: int = 1) -> KnockoffImage:
    """Knockoff for a single image; the label is deliberately not an input."""
    px = generate_knockoffs(model, np.asarray(x)[None], [rng], order, sample_latent, reencode_every)[0]
    return KnockoffImage(px, sample_id, model.latent, rng.seed)


# ---------------------------------------------------------------------------
# in-filler strategies used by the mask optimiser


class Infiller:
    name = "base"

    def reference(self, x: np.ndarray, mask: np.ndarray, rng: Rng) -> np.ndarray:
        """Reference image(s) for ``x`` given keep-mask(s) ``mask`` (batch first)."""
        raise NotImplementedError


class FlipInfiller(Infiller):
    name = "flip"

    def reference(self, x, mask, rng):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(mask)), dtype=np.float32)


class VaeInfiller(Infiller):
    """Re-samples the generator on every call."""

    name = "vae"

    def __init__(self, model: Vae):
        self.model = model

    def reference(self, x, mask, rng):
        return vae_reference(self.model, x, mask, rng)


class KnockoffInfiller(Infiller):
    """A fixed knockoff image reused for every mask."""

    name = "knockoff"

    def __init__(self, knockoff: np.ndarray):
        self.knockoff = np.asarray(knockoff, dtype=np.float32)

    def reference(self, x, mask, rng):
        return np.broadcast_to(self.knockoff, np.broadcast_shapes(self.knockoff.shape, np.shape(mask))).copy()


# ---------------------------------------------------------------------------
# export


def write_pgm(path, img: np.ndarray) -> None:
    """Binary greyscale PGM (P5) from uint8 pixels."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


KNOCKOFF_MANIFEST_HEADER = ["sample_id", "seed", "latent", "path"]


def export_knockoffs(knockoffs: list[KnockoffImage], out_dir) -> Path:
    """One PGM per knockoff plus ``knockoffs.csv``; pixels also saved as ``knockoffs.npy``."""
    out_dir = Path(out_dir)
    (out_dir / "knockoffs").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "knockoffs.csv"
    with manifest.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(KNOCKOFF_MANIFEST_HEADER)
        for ko in knockoffs:
            rel = f"knockoffs/{ko.sample_id:05d}.pgm"
            write_pgm(out_dir / rel, image_to_u8(ko.pixels))
            wr.writerow([ko.sample_id, ko.seed, ko.latent, rel])
    np.save(out_dir / "knockoffs.npy", np.stack([k.pixels for k in knockoffs]).astype(np.float32))
    return manifest


# ---------------------------------------------------------------------------
# knockoff quality


SWEEP_HEADER = ["method", "fraction", "ms_ssim", "target_probability"]


def corruption_masks(rng: Rng, n: int, fraction: float, shape=(28, 28)) -> np.ndarray:
    """Keep-masks with exactly ``round(fraction * pixels)`` uniformly chosen zeros per image."""
    npx = shape[0] * shape[1]
    k = int(round(fraction * npx))
    masks = np.ones((n, npx), dtype=np.float32)
    for i in range(n):
        masks[i, rng.child(i).choice(npx, k, replace=False)] = 0.0
    return masks.reshape(n, *shape)


def knockoff_quality_sweep(classifier: Classifier, references: dict, images: np.ndarray, labels: np.ndarray,
                           fractions, seed: int = 0) -> list[dict]:
    """MS-SSIM versus target probability under random pixel replacement.

    ``references`` maps a method name to ``fn(images, masks, rng) -> refs``.
    The same random pixel sets are used for every method at a given fraction.
    A ``none`` row (no intervention) is emitted for each fraction.
    """
    from .maskopt import compose
    from .metrics import ms_ssim

    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("knockoff_quality_sweep: empty evaluation set")
    idx = classifier.label_indices(labels)
    clean_p = classifier.predict_proba(images)[np.arange(len(images)), idx]
    rows = []
    for fi, frac in enumerate(fractions):
        masks = corruption_masks(Rng(seed, 0x5EE9, fi), len(images), frac)
        rows.append({"method": "none", "fraction": float(frac), "ms_ssim": 1.0,
                     "target_probability": float(clean_p.mean())})
        for mi, (name, fn) in enumerate(references.items()):
            refs = fn(images, masks, Rng(seed, 0x5EEA, fi, mi))
            corrupted = compose(images, masks, refs)
            p = classifier.predict_proba(corrupted)[np.arange(len(images)), idx]
            sim = np.mean([ms_ssim(a, b) for a, b in zip(images, corrupted)])
            rows.append({"method": name, "fraction": float(frac), "ms_ssim": float(sim),
                         "target_probability": float(p.mean())})
            log.info("sweep %s f=%.2f ms-ssim %.4f p %.4f", name, frac, sim, p.mean())
    return rows


@dataclass
class ExchangeabilityResult:
    pairs: np.ndarray          # (m, 2) flat pixel indices
    z_scores: np.ndarray       # (m,) worst |discrepancy| / bootstrap SE per pair
    passed: np.ndarray         # (m,) bool
    tolerance: float

    @property
    def pass_rate(self) -> float:
        return float(self.passed.mean())


def _swap_discrepancy(block: np.ndarray) -> np.ndarray:
    """Upper-triangle entries of cov(X_i, X_j, K_i, K_j) minus the same with i swapped."""
    cov = np.cov(block, rowvar=False)
    perm = [2, 1, 0, 3]
    d = cov - cov[np.ix_(perm, perm)]
    return d[np.triu_indices(4)]


def exchangeability_check(originals: np.ndarray, knockoffs: np.ndarray, rng: Rng, n_pairs: int = 200,
                          n_boot: int = 200, tolerance: float = 3.0) -> ExchangeabilityResult:
    """Covariance swap test on random pixel pairs.

    For a pair (i, j) the joint covariance of (X_i, X_j, K_i, K_j) is compared
    with the covariance after swapping X_i with its knockoff K_i.  The pair
    passes when every entry of the difference lies within ``tolerance``
    bootstrap standard errors of zero.
    """
    x = np.asarray(originals, dtype=np.float64).reshape(len(originals), -1)
    k = np.asarray(knockoffs, dtype=np.float64).reshape(len(knockoffs), -1)
    if x.shape != k.shape:
        raise ValueError(f"originals {x.shape} and knockoffs {k.shape} differ")
    n, p = x.shape
    pairs = np.stack([rng.choice(p, 2, replace=False) for _ in range(n_pairs)])
    boot = rng.integers(0, n, size=(n_boot, n))
    z = np.empty(n_pairs)
    for m, (i, j) in enumerate(pairs):
        block = np.stack([x[:, i], x[:, j], k[:, i], k[:, j]], axis=1)
        d = _swap_discrepancy(block)
        reps = np.stack([_swap_discrepancy(block[b]) for b in boot])
        se = reps.std(axis=0, ddof=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(se > 0, np.abs(d) / se, np.where(np.abs(d) > 1e-12, np.inf, 0.0))
        z[m] = ratio.max()
    return ExchangeabilityResult(pairs, z, z <= tolerance, tolerance)
