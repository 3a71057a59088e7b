"""Binary fine-tuning of an image backbone with a single sigmoid output.

Two backends share one training loop:

* ``toy_linear``: an affine map on per-channel means, implemented in NumPy
  with analytic gradients. It needs no downloads and is what the test suite
  trains.
* ``swin_base`` / ``efficientnet_b0``: torchvision models whose final dense
  layer is swapped for a one-unit layer; all weights stay trainable.

Optimisation is Adam on binary cross-entropy computed from logits.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from authpipe.errors import TrainingError, ValidationError, WeightsUnavailableError
from authpipe.patcher import PatchRecord, PatchRef, to_unit

log = logging.getLogger(__name__)

KNOWN_BACKBONES = {"swin_base": 224, "efficientnet_b0": 256, "toy_linear": 256}
PRETRAINED_SOURCES = ("imagenet", "none")
PROB_EPS = 1e-12
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    identifier: str
    input_side: int
    pretrained_source: str = "none"

    def __post_init__(self) -> None:
        if self.identifier not in KNOWN_BACKBONES:
            raise ValidationError(
                f"unknown backbone {self.identifier!r}; known: {', '.join(KNOWN_BACKBONES)}"
            )
        if self.input_side != KNOWN_BACKBONES[self.identifier]:
            raise ValidationError(
                f"{self.identifier} takes {KNOWN_BACKBONES[self.identifier]}px inputs, "
                f"got {self.input_side}"
            )
        if self.pretrained_source not in PRETRAINED_SOURCES:
            raise ValidationError(f"unknown pretrained source {self.pretrained_source!r}")

    @classmethod
    def named(cls, identifier: str, pretrained_source: str | None = None) -> BackboneSpec:
        if identifier not in KNOWN_BACKBONES:
            raise ValidationError(f"unknown backbone {identifier!r}")
        if pretrained_source is None:
            pretrained_source = "none" if identifier == "toy_linear" else "imagenet"
        return cls(identifier, KNOWN_BACKBONES[identifier], pretrained_source)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.max_epochs < 0 or self.early_stop_patience < 0:
            raise ValidationError("max_epochs and early_stop_patience must be non-negative")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    validation_loss: float | None
    validation_accuracy: float | None


@dataclass
class TrainedModel:
    backbone: BackboneSpec
    net: Any
    training_log: list[EpochLog] = field(default_factory=list)
    best_epoch: int | None = None
    train_config: TrainConfig | None = None


@dataclass(frozen=True)
class LabeledPatch:
    patch: PatchRecord | PatchRef
    label: int


def sigmoid_exact(z: np.ndarray) -> np.ndarray:
    """Unclipped logistic function, for gradients."""
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function clipped so probabilities stay strictly inside (0, 1)."""
    return np.clip(sigmoid_exact(z), PROB_EPS, 1.0 - PROB_EPS)


def bce_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy, evaluated stably on logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)))


def bce(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


class PatchLoader:
    """Loads patch pixels (and, for featurizing backends, memoized features)."""

    def __init__(self, max_cached: int = 2048) -> None:
        self.max_cached = max_cached
        self._pixels: OrderedDict[Path, np.ndarray] = OrderedDict()
        self._features: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def _u8(self, path: Path) -> np.ndarray:
        with self._lock:
            cached = self._pixels.get(path)
            if cached is not None:
                self._pixels.move_to_end(path)
                return cached
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        if self.max_cached:
            with self._lock:
                self._pixels[path] = arr
                if len(self._pixels) > self.max_cached:
                    self._pixels.popitem(last=False)
        return arr

    def pixels(self, patches: Sequence[PatchRecord | PatchRef | np.ndarray]) -> np.ndarray:
        out = []
        for p in patches:
            if isinstance(p, PatchRecord):
                out.append(p.pixels)
            elif isinstance(p, PatchRef):
                out.append(to_unit(self._u8(p.path)))
            else:
                out.append(np.asarray(p, dtype=np.float32))
        return np.stack(out).astype(np.float32, copy=False)

    def inputs(self, net: Any, patches: Sequence) -> np.ndarray:
        """Network inputs for a batch; cached per patch when the backend allows it."""
        key = getattr(net, "feature_key", None)
        if key is None:
            return self.pixels(patches)
        rows = []
        for p in patches:
            if isinstance(p, PatchRef):
                cache_key = (key, str(p.path))
                feat = self._features.get(cache_key)
                if feat is None:
                    feat = net.featurize(self.pixels([p]))[0]
                    self._features[cache_key] = feat
                rows.append(feat)
            else:
                rows.append(net.featurize(self.pixels([p]))[0])
        return np.stack(rows)


class ToyLinearNet:
    """sigmoid(w . mean_rgb(x) + b), trained with Adam in float64."""

    feature_key = "toy_linear/channel_mean"
    checkpoint_ext = "npz"

    def __init__(self, input_side: int) -> None:
        self.input_side = input_side
        self.w = np.zeros(3, dtype=np.float64)
        self.b = 0.0
        self._adam: dict[str, Any] = {}

    def reseed(self, seed: int) -> None:
        self._adam = {}

    def featurize(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels)
        if pixels.ndim != 4 or pixels.shape[1:] != (self.input_side, self.input_side, 3):
            raise ValidationError(
                f"expected (N, {self.input_side}, {self.input_side}, 3) inputs, got {pixels.shape}"
            )
        return pixels.astype(np.float64).mean(axis=(1, 2))

    def _as_features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return x if x.ndim == 2 else self.featurize(x)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._as_features(x) @ self.w + self.b

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, float]:
        f = self._as_features(x)
        z = f @ self.w + self.b
        y = np.asarray(y, dtype=np.float64)
        dz = (sigmoid_exact(z) - y) / len(y)
        return bce_from_logits(z, y), f.T @ dz, float(dz.sum())

    def train_step(self, x: np.ndarray, y: np.ndarray, lr: float) -> float:
        loss, gw, gb = self.loss_and_grad(x, y)
        st = self._adam
        if not st:
            st.update(t=0, mw=np.zeros(3), vw=np.zeros(3), mb=0.0, vb=0.0)
        b1, b2, eps = 0.9, 0.999, 1e-8
        st["t"] += 1
        t = st["t"]
        st["mw"] = b1 * st["mw"] + (1 - b1) * gw
        st["vw"] = b2 * st["vw"] + (1 - b2) * gw * gw
        st["mb"] = b1 * st["mb"] + (1 - b1) * gb
        st["vb"] = b2 * st["vb"] + (1 - b2) * gb * gb
        corr1, corr2 = 1 - b1**t, 1 - b2**t
        self.w = self.w - lr * (st["mw"] / corr1) / (np.sqrt(st["vw"] / corr2) + eps)
        self.b = self.b - lr * (st["mb"] / corr1) / (math.sqrt(st["vb"] / corr2) + eps)
        return loss

    def get_state(self) -> dict[str, np.ndarray]:
        return {"w": self.w.copy(), "b": np.array(self.b)}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        self.w = np.array(state["w"], dtype=np.float64)
        self.b = float(state["b"])

    def n_parameters(self) -> int:
        return 4

    def save(self, path: Path) -> None:
        np.savez(path, **self.get_state())

    def load(self, path: Path) -> None:
        with np.load(path) as data:
            self.set_state({k: data[k] for k in data.files})


class TorchNet:
    """A torchvision backbone whose final dense layer emits one logit."""

    feature_key = None
    checkpoint_ext = "pt"

    def __init__(self, spec: BackboneSpec, seed: int = 0) -> None:
        try:
            import torch
            from torch import nn
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise WeightsUnavailableError(f"{spec.identifier} needs torch/torchvision: {exc}") from None
        self._torch = torch
        torch.manual_seed(seed)
        self.input_side = spec.input_side
        self.module = _build_torchvision(spec)
        self.module.eval()
        self.mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        self.std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.loss_fn = nn.BCEWithLogitsLoss()
        self._opt = None
        self._lr = None

    def reseed(self, seed: int) -> None:
        self._torch.manual_seed(seed)
        self._opt = None

    def _tensor(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1:] != (self.input_side, self.input_side, 3):
            raise ValidationError(
                f"expected (N, {self.input_side}, {self.input_side}, 3) inputs, got {x.shape}"
            )
        t = self._torch.from_numpy(np.ascontiguousarray(x)).permute(0, 3, 1, 2)
        return (t - self.mean) / self.std

    def logits(self, x: np.ndarray) -> np.ndarray:
        self.module.eval()
        with self._torch.no_grad():
            out = self.module(self._tensor(x)).reshape(-1)
        return out.double().numpy()

    def train_step(self, x: np.ndarray, y: np.ndarray, lr: float) -> float:
        torch = self._torch
        if self._opt is None or self._lr != lr:
            self._opt = torch.optim.Adam(self.module.parameters(), lr=lr)
            self._lr = lr
        self.module.train()
        self._opt.zero_grad()
        out = self.module(self._tensor(x)).reshape(-1)
        loss = self.loss_fn(out, torch.as_tensor(np.asarray(y), dtype=out.dtype))
        loss.backward()
        self._opt.step()
        return float(loss.detach())

    def get_state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}

    def set_state(self, state: dict) -> None:
        self.module.load_state_dict(state)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def save(self, path: Path) -> None:
        self._torch.save(self.module.state_dict(), path)

    def load(self, path: Path) -> None:
        self.module.load_state_dict(self._torch.load(path, map_location="cpu"))


def _build_torchvision(spec: BackboneSpec):
    from torch import nn
    from torchvision import models

    pretrained = spec.pretrained_source == "imagenet"
    try:
        if spec.identifier == "swin_base":
            weights = models.Swin_B_Weights.IMAGENET1K_V1 if pretrained else None
            module = models.swin_b(weights=weights)
            module.head = nn.Linear(module.head.in_features, 1)
        else:
            weights = models.EfficientNet_B0_Weights.IMAGENET1K_V1 if pretrained else None
            module = models.efficientnet_b0(weights=weights)
            last = module.classifier[-1]
            module.classifier[-1] = nn.Linear(last.in_features, 1)
    except (OSError, RuntimeError, ValueError) as exc:
        raise WeightsUnavailableError(
            f"could not obtain {spec.pretrained_source} weights for {spec.identifier}: {exc}"
        ) from None
    for p in module.parameters():
        p.requires_grad_(True)
    return module


def build_model(spec: BackboneSpec, seed: int = 0) -> TrainedModel:
    if spec.identifier == "toy_linear":
        net: Any = ToyLinearNet(spec.input_side)
    else:
        net = TorchNet(spec, seed=seed)
    return TrainedModel(backbone=spec, net=net)


def _batch_logits(model: TrainedModel, patches: Sequence, loader: PatchLoader, batch_size: int) -> np.ndarray:
    chunks = [
        model.net.logits(loader.inputs(model.net, patches[i : i + batch_size]))
        for i in range(0, len(patches), batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def predict_patches(
    model: TrainedModel, patches: Sequence[PatchRecord | PatchRef | np.ndarray],
    loader: PatchLoader | None = None, batch_size: int = 64,
) -> list[float]:
    """One probability in (0, 1) per patch, in input order."""
    if len(patches) == 0:
        return []
    loader = loader or PatchLoader(max_cached=0)
    return [float(p) for p in sigmoid(_batch_logits(model, list(patches), loader, batch_size))]


def train(
    model: TrainedModel,
    train_patches: Sequence[LabeledPatch],
    val_patches: Sequence[LabeledPatch],
    cfg: TrainConfig,
    loader: PatchLoader | None = None,
) -> TrainedModel:
    """Mini-batch training with per-epoch validation and best-loss restore.

    Batches are reshuffled every epoch from ``cfg.seed``; the final partial
    batch is kept. Without validation data early stopping is disabled and the
    last epoch is kept.
    """
    model.train_config = cfg
    if cfg.max_epochs == 0:
        return model
    if not train_patches:
        raise TrainingError("training stream is empty")
    loader = loader or PatchLoader()
    net = model.net
    net.reseed(cfg.seed)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))

    items = [lp.patch for lp in train_patches]
    labels = np.array([lp.label for lp in train_patches], dtype=np.float64)
    val_items = [lp.patch for lp in val_patches]
    val_labels = np.array([lp.label for lp in val_patches], dtype=np.float64)

    best_loss, best_state, since_best = math.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(items))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = loader.inputs(net, [items[i] for i in idx])
            loss = net.train_step(x, labels[idx], cfg.learning_rate)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss {loss} at epoch {epoch}, batch starting at {start}"
                )
            total += loss * len(idx)
        train_loss = total / len(items)

        val_loss = val_acc = None
        if val_items:
            z = _batch_logits(model, val_items, loader, max(cfg.batch_size, 64))
            val_loss = bce_from_logits(z, val_labels)
            if not math.isfinite(val_loss):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            val_acc = float(np.mean((sigmoid(z) >= 0.5) == (val_labels == 1)))
        model.training_log.append(EpochLog(epoch, train_loss, val_loss, val_acc))
        log.debug("epoch %d train %.5f val %s acc %s", epoch, train_loss, val_loss, val_acc)

        if val_loss is None:
            model.best_epoch = epoch
            continue
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, copy.deepcopy(net.get_state()), 0
            model.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    if best_state is not None:
        net.set_state(best_state)
    return model


def save_model(model: TrainedModel, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / f"model_best.{model.net.checkpoint_ext}"
    model.net.save(ckpt)
    log_doc = {
        "backbone": asdict(model.backbone),
        "train_config": asdict(model.train_config) if model.train_config else None,
        "best_epoch": model.best_epoch,
        "epochs": [asdict(e) for e in model.training_log],
    }
    (run_dir / "train_log.json").write_text(json.dumps(log_doc, indent=2), encoding="utf-8")
    return ckpt


def load_model(run_dir: str | Path) -> TrainedModel:
    run_dir = Path(run_dir)
    log_file = run_dir / "train_log.json"
    if not log_file.is_file():
        raise TrainingError(f"no train_log.json in {run_dir}")
    doc = json.loads(log_file.read_text(encoding="utf-8"))
    spec = BackboneSpec(**doc["backbone"])
    # Checkpoint weights replace everything, so skip any pretrained download.
    model = build_model(replace(spec, pretrained_source="none"))
    model.backbone = spec
    model.net.load(run_dir / f"model_best.{model.net.checkpoint_ext}")
    model.best_epoch = doc["best_epoch"]
    model.training_log = [EpochLog(**e) for e in doc["epochs"]]
    if doc.get("train_config"):
        model.train_config = TrainConfig(**doc["train_config"])
    return model
