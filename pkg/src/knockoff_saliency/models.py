"""Desk-scale CNN classifier, convolutional VAE, training loops and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .optim import Adam
from .rng import Rng
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CKPT_MAGIC = b"KSCKPT"
CKPT_VERSION = 1
IMAGE_SHAPE = (28, 28)


class TrainingDivergedError(ArithmeticError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _he(rng: Rng, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(shape) * np.float32(np.sqrt(2.0 / fan_in)), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _as_batch(x) -> Tensor:
    """Accept (28, 28), (n, 28, 28) or (n, 28, 28, 1) arrays/tensors; return NHWC."""
    x = T.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape, 1)
    if x.ndim == 3:
        return x.reshape(*x.shape, 1)
    return x


class Model:
    """Named-parameter container; subclasses define ``arch`` and the forward pass."""

    params: dict[str, Tensor]

    @property
    def arch(self) -> str:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None


class Classifier(Model):
    """conv(1->16) relu pool, conv(16->32) relu pool, dense(1568->128) relu, dense(128->C)."""

    def __init__(self, classes=tuple(range(10)), seed: int = 0):
        self.classes = tuple(int(c) for c in classes)
        rng = Rng(seed, 0xC1A5)
        n = len(self.classes)
        self.params = {
            "conv1.w": _he(rng, (3, 3, 1, 16), 9),
            "conv1.b": _zeros((16,)),
            "conv2.w": _he(rng, (3, 3, 16, 32), 144),
            "conv2.b": _zeros((32,)),
            "fc1.w": _he(rng, (32 * 7 * 7, 128), 32 * 7 * 7),
            "fc1.b": _zeros((128,)),
            "fc2.w": _he(rng, (128, n), 128),
            "fc2.b": _zeros((n,)),
        }

    @property
    def arch(self) -> str:
        return "classifier:" + ",".join(map(str, self.classes))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_index(self, label: int) -> int:
        try:
            return self.classes.index(int(label))
        except ValueError:
            raise ValueError(f"label {label} not among classifier classes {self.classes}") from None

    def label_indices(self, labels) -> np.ndarray:
        lut = np.full(max(self.classes) + 1, -1, dtype=np.int64)
        lut[list(self.classes)] = np.arange(len(self.classes))
        idx = lut[np.asarray(labels)]
        if (idx < 0).any():
            raise ValueError(f"labels outside classifier classes {self.classes}")
        return idx

    def logits(self, x) -> Tensor:
        p = self.params
        h = _as_batch(x)
        h = T.maxpool2(T.relu(T.conv2d(h, p["conv1.w"], p["conv1.b"], padding=1)))
        h = T.maxpool2(T.relu(T.conv2d(h, p["conv2.w"], p["conv2.b"], padding=1)))
        h = h.reshape(h.shape[0], -1)
        h = T.relu(h @ p["fc1.w"] + p["fc1.b"])
        return h @ p["fc2.w"] + p["fc2.b"]

    def forward(self, x) -> Tensor:
        """Class probabilities, one row per image."""
        return T.softmax(self.logits(x))

    __call__ = forward

    def predict_proba(self, images: np.ndarray, batch: int = 1000) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 2
        if single:
            images = images[None]
        with no_grad():
            out = np.concatenate([self.forward(images[i:i + batch]).data for i in range(0, len(images), batch)])
        return out[0] if single else out

    def predict(self, images: np.ndarray, batch: int = 1000) -> np.ndarray:
        """Predicted labels (not indices)."""
        idx = self.predict_proba(images, batch).argmax(axis=-1)
        return np.asarray(self.classes)[idx]

    def accuracy(self, ds: Dataset) -> float:
        return float((self.predict(ds.images) == ds.labels).mean())


class Vae(Model):
    """Convolutional VAE with a Bernoulli decoder.

    Encoder: conv(1->16, s2) relu, conv(16->32, s2) relu, dense(1568 -> 2k).
    Decoder: dense(k -> 1568) relu, up2, conv(32->16) relu, conv(16->4) and a
    2x depth-to-space shuffle to 28x28 logits.
    """

    def __init__(self, latent: int = 16, seed: int = 0):
        self.latent = int(latent)
        rng = Rng(seed, 0xDAE)
        k = self.latent
        self.params = {
            "enc1.w": _he(rng, (3, 3, 1, 16), 9),
            "enc1.b": _zeros((16,)),
            "enc2.w": _he(rng, (3, 3, 16, 32), 144),
            "enc2.b": _zeros((32,)),
            "enc3.w": Tensor(rng.normal((1568, 2 * k)) * np.float32(np.sqrt(1.0 / 1568)), requires_grad=True),
            "enc3.b": _zeros((2 * k,)),
            "dec1.w": _he(rng, (k, 1568), k),
            "dec1.b": _zeros((1568,)),
            "dec2.w": _he(rng, (3, 3, 32, 16), 288),
            "dec2.b": _zeros((16,)),
            "dec3.w": _he(rng, (3, 3, 16, 4), 144),
            "dec3.b": _zeros((4,)),
        }

    @property
    def arch(self) -> str:
        return f"vae:{self.latent}"

    def encode(self, x) -> tuple[Tensor, Tensor]:
        p = self.params
        h = _as_batch(x)
        h = T.relu(T.conv2d(h, p["enc1.w"], p["enc1.b"], stride=2, padding=1))
        h = T.relu(T.conv2d(h, p["enc2.w"], p["enc2.b"], stride=2, padding=1))
        h = h.reshape(h.shape[0], -1) @ p["enc3.w"] + p["enc3.b"]
        mu, logvar = T.split_columns(h, [self.latent, self.latent])
        return mu, T.clip(logvar, -12.0, 8.0)

    def decode_logits(self, z) -> Tensor:
        p = self.params
        h = T.relu(T.as_tensor(z) @ p["dec1.w"] + p["dec1.b"])
        h = T.upsample2(h.reshape(h.shape[0], 7, 7, 32))
        h = T.relu(T.conv2d(h, p["dec2.w"], p["dec2.b"], padding=1))
        h = T.depth_to_space(T.conv2d(h, p["dec3.w"], p["dec3.b"], padding=1), 2)
        return h.reshape(h.shape[0], *IMAGE_SHAPE)

    def reparameterize(self, mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
        return mu + T.exp(logvar * 0.5) * Tensor(noise)

    def loss(self, x_in, target, noise: np.ndarray) -> tuple[Tensor, float, float]:
        """Negative ELBO per image: Bernoulli reconstruction + KL to N(0, I)."""
        mu, logvar = self.encode(x_in)
        z = self.reparameterize(mu, logvar, noise)
        n = mu.shape[0]
        recon = T.bce_with_logits(self.decode_logits(z), target) * (1.0 / n)
        kl = (T.exp(logvar) + mu * mu - 1.0 - logvar).sum() * (0.5 / n)
        return recon + kl, recon.item(), kl.item()

    def reconstruct(self, x: np.ndarray, rng: Rng | None = None, batch: int = 1000) -> np.ndarray:
        """Decode the posterior sample (or the posterior mean when ``rng`` is None)."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 2
        if single:
            x = x[None]
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                mu, logvar = self.encode(x[i:i + batch])
                z = mu if rng is None else self.reparameterize(mu, logvar, rng.normal(mu.shape))
                out.append(decoder_output(self.decode_logits(z).data))
        res = np.concatenate(out)
        return res[0] if single else res


def decoder_output(logits: np.ndarray) -> np.ndarray:
    """Sigmoid kept strictly inside (0, 1) in float32."""
    s = T._stable_sigmoid(logits.astype(np.float32))
    return np.clip(s, np.float32(1e-6), np.float32(1 - 1e-6))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    kind: str
    seed: int
    epochs: int
    lr: float
    batch: int
    seconds: float = 0.0
    history: list[dict] = field(default_factory=list)
    train_accuracy: float | None = None
    test_accuracy: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _batches(n: int, batch: int, rng: Rng):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def train_classifier(ds: Dataset, test: Dataset | None = None, lr: float = 0.003, batch: int = 256,
                     epochs: int = 10, seed: int = 0, classes=None,
                     on_epoch: Callable[[dict], None] | None = None) -> tuple[Classifier, TrainReport]:
    if len(ds) == 0:
        raise ValueError("train_classifier: empty dataset")
    classes = tuple(sorted(set(ds.labels.tolist()))) if classes is None else tuple(classes)
    model = Classifier(classes, seed=seed)
    targets = model.label_indices(ds.labels)
    opt = Adam(model.parameters(), lr=lr)
    rng = Rng(seed, 0x7EA1)
    report = TrainReport("classifier", seed, epochs, lr, batch)
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(len(ds), batch, rng):
            try:
                loss = T.softmax_ce(model.logits(ds.images[idx]), targets[idx])
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            except T.NumericError as exc:
                raise TrainingDivergedError(f"classifier training diverged in epoch {epoch}: {exc}") from exc
            total += loss.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "loss": total / seen}
        if test is not None:
            row["test_accuracy"] = model.accuracy(test)
        report.history.append(row)
        log.info("classifier epoch %d loss %.4f %s", epoch, row["loss"], row.get("test_accuracy", ""))
        if on_epoch:
            on_epoch(row)
    report.seconds = time.perf_counter() - t0
    report.train_accuracy = model.accuracy(ds)
    if test is not None:
        report.test_accuracy = model.accuracy(test)
    model.set_trainable(False)
    return model, report


def random_square_mask(rng: Rng, n: int, size: int = 7, shape=IMAGE_SHAPE) -> np.ndarray:
    """Keep-masks (1 = keep) with one ``size`` x ``size`` zero square per image."""
    masks = np.ones((n, *shape), dtype=np.float32)
    rows = rng.integers(0, shape[0] - size + 1, size=n)
    cols = rng.integers(0, shape[1] - size + 1, size=n)
    for i, (r, c) in enumerate(zip(rows, cols)):
        masks[i, r:r + size, c:c + size] = 0.0
    return masks


def train_vae(ds: Dataset, latent: int = 16, lr: float = 0.0002, batch: int = 256, epochs: int = 20,
              seed: int = 0, mask_size: int | None = None, kind: str = "vae",
              on_step: Callable[[dict], None] | None = None,
              on_epoch: Callable[[dict], None] | None = None) -> tuple[Vae, TrainReport]:
    """Train a VAE; with ``mask_size`` each input has one random square zeroed."""
    if len(ds) == 0:
        raise ValueError("train_vae: empty dataset")
    model = Vae(latent, seed=seed)
    opt = Adam(model.parameters(), lr=lr)
    rng = Rng(seed, 0x7EA2)
    report = TrainReport(kind, seed, epochs, lr, batch)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(len(ds), batch, rng):
            x = ds.images[idx]
            x_in = x * random_square_mask(rng, len(idx), mask_size) if mask_size else x
            try:
                loss, recon, kl = model.loss(x_in, x, rng.normal((len(idx), latent)))
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            except T.NumericError as exc:
                raise TrainingDivergedError(f"{kind} training diverged in epoch {epoch}: {exc}") from exc
            step += 1
            if on_step:
                on_step({"epoch": epoch, "step": step, "loss": recon + kl, "recon": recon, "kl": kl})
            total += (recon + kl) * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "neg_elbo": total / seen}
        report.history.append(row)
        log.info("%s epoch %d neg-ELBO %.3f", kind, epoch, row["neg_elbo"])
        if on_epoch:
            on_epoch(row)
    report.seconds = time.perf_counter() - t0
    model.set_trainable(False)
    return model, report


def train_vae_infiller(ds: Dataset, latent: int = 16, lr: float = 0.0002, batch: int = 256,
                       epochs: int = 20, seed: int = 0, **kw) -> tuple[Vae, TrainReport]:
    return train_vae(ds, latent, lr, batch, epochs, seed, mask_size=7, kind="vae-infill", **kw)


def train_vae_knockoff(ds: Dataset, latent: int = 5, lr: float = 0.0002, batch: int = 128,
                       epochs: int = 50, seed: int = 0, **kw) -> tuple[Vae, TrainReport]:
    if latent not in (5, 16):
        raise ValueError(f"knockoff VAE latent size must be 5 or 16, got {latent}")
    return train_vae(ds, latent, lr, batch, epochs, seed, mask_size=None, kind="vae-knockoff", **kw)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian): magic "KSCKPT", u8 version, u32 len + arch tag,
# u32 tensor count, then per tensor: u32 len + name, u32 rank, u32 dims[rank],
# f32 payload.


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: Model) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION), _pack_str(model.arch),
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    if metadata is not None:
        meta = {"arch": model.arch, **metadata}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpointError(f"payload truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"bad string: {exc}") from exc


def parse_checkpoint(raw: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(raw)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic")
    version = r.take(1)[0]
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    arch = r.string()
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        if rank > 8:
            raise CorruptCheckpointError(f"tensor {name!r}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(raw):
        raise CorruptCheckpointError(f"{len(raw) - r.pos} trailing bytes")
    return arch, tensors


def model_for_arch(arch: str) -> Model:
    kind, _, spec = arch.partition(":")
    try:
        if kind == "classifier":
            return Classifier(tuple(int(c) for c in spec.split(",")))
        if kind == "vae":
            return Vae(int(spec))
    except ValueError:
        pass
    raise ArchitectureMismatchError(f"unknown architecture tag {arch!r}")


def load_checkpoint(path, expect: str | None = None) -> Model:
    """Load a checkpoint; ``expect`` is an arch tag or a kind prefix ("classifier", "vae")."""
    arch, tensors = parse_checkpoint(Path(path).read_bytes())
    if expect is not None and arch != expect and arch.partition(":")[0] != expect:
        raise ArchitectureMismatchError(f"{path}: architecture {arch!r}, expected {expect!r}")
    model = model_for_arch(arch)
    if set(tensors) != set(model.params):
        raise ArchitectureMismatchError(f"{path}: tensor names do not match architecture {arch!r}")
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise ArchitectureMismatchError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {model.params[name].shape}")
        model.params[name] = Tensor(arr)
    model.params = {name: model.params[name] for name in tensors}
    return model


def load_metadata(path) -> dict:
    meta = Path(path).with_suffix(Path(path).suffix + ".json")
    return json.loads(meta.read_text()) if meta.exists() else {}
