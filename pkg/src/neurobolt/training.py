"""Training infrastructure: loss, schedules, AdamW parameter grouping with
layer-wise learning-rate decay, the training loop, finite-difference
gradient verification, and the on-disk checkpoint format.

Weight decay is decoupled (AdamW) and skipped for biases, normalization
gains, and the additive/table embeddings (temporal, spatial, class-token,
and frequency-projection tables); see :func:`is_decay_exempt`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .evaluation import pearson_or_flag
from .model import NeuroBolt, NeuroBoltConfig, build_model
from .signals import WindowSample

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PARAMS = "params.bin"
_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8"}


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite during optimization."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters (defaults follow the inter-subject recipe)."""

    batch_size: int = 64
    peak_lr: float = 3e-4
    min_lr: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.05
    epochs: int = 30
    warmup_epochs: int = 5
    layer_decay: float = 0.65
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self) -> None:
        if self.min_lr >= self.peak_lr:
            raise ValueError("min_lr must be below peak_lr")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be below epochs")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self.precision == "float32" else torch.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def mse_loss(pred, target) -> float:
    """Mean of squared differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mse_loss of empty input is undefined")
    return float(np.mean((pred - target) ** 2))


def lr_at(
    step: int,
    cfg: TrainConfig,
    layer_index: int | None = None,
    n_layers: int | None = None,
    steps_per_epoch: int = 1,
) -> float:
    """Learning rate at an optimizer step.

    Linear warmup from 0 to ``peak_lr`` over the warmup steps, then cosine
    decay reaching ``min_lr`` at the last step, all multiplied by
    ``layer_decay ** (n_layers - layer_index)`` (layer 0 nearest the input,
    ``n_layers`` at the head).
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    if step < warmup_steps:
        base = cfg.peak_lr * step / warmup_steps
    else:
        span = max(1, total_steps - 1 - warmup_steps)
        progress = min(1.0, (step - warmup_steps) / span)
        base = cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (
            1.0 + math.cos(math.pi * progress)
        )
    if layer_index is not None:
        if n_layers is None:
            raise ValueError("n_layers required when layer_index is given")
        base *= cfg.layer_decay ** (n_layers - layer_index)
    return base


def is_decay_exempt(name: str, param: torch.Tensor) -> bool:
    """Weight-decay exemptions: biases and norm gains (1-D tensors), the
    temporal/spatial/class-token tables, and frequency-projection tables."""
    if param.ndim <= 1:
        return True
    if name in ("st.te", "st.se", "sp.se_sp", "sp.cls_token"):
        return True
    if name.startswith("sp.fe.") and name.endswith(".weight"):
        return True
    return False


def layer_index_of(name: str, cfg: NeuroBoltConfig) -> tuple[int, int]:
    """(layer_index, n_layers) for layer-wise LR decay.

    Each branch counts its own layers: embeddings at 0, transformer block
    ``i`` at ``i + 1``, the final norm with the last block; the head sits
    at the top of its branch count (scale 1).
    """
    if name.startswith("st."):
        depth = cfg.st_depth
        n_layers = depth + 1
        if name.startswith("st.blocks."):
            block = int(name.split(".")[2])
            return block + 1, n_layers
        if name.startswith("st.norm."):
            return depth, n_layers
        return 0, n_layers
    if name.startswith("sp."):
        depth = cfg.sp_depth
        n_layers = depth + 1
        if name.startswith("sp.blocks."):
            block = int(name.split(".")[2])
            return block + 1, n_layers
        if name.startswith("sp.norm."):
            return depth, n_layers
        return 0, n_layers
    if name.startswith("head."):
        n_layers = max(cfg.st_depth, cfg.sp_depth) + 1
        return n_layers, n_layers
    raise ValueError(f"cannot assign a layer index to parameter {name!r}")


def param_groups(model: NeuroBolt, cfg: TrainConfig) -> list[dict]:
    """AdamW groups keyed by (lr scale, decay eligibility).

    Each group carries ``lr_scale`` and the member parameter names so the
    grouping is inspectable.
    """
    groups: dict[tuple[float, bool], dict] = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        layer_index, n_layers = layer_index_of(name, model.cfg)
        scale = cfg.layer_decay ** (n_layers - layer_index)
        exempt = is_decay_exempt(name, param)
        key = (scale, exempt)
        if key not in groups:
            groups[key] = {
                "params": [],
                "names": [],
                "lr": 0.0,
                "lr_scale": scale,
                "weight_decay": 0.0 if exempt else cfg.weight_decay,
            }
        groups[key]["params"].append(param)
        groups[key]["names"].append(name)
    return [groups[k] for k in sorted(groups, key=lambda k: (-k[0], k[1]))]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_r: float
    val_mse: float
    lr: float
    val_constant: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: NeuroBolt
    history: list[EpochRecord]
    best_epoch: int
    best_val_r: float
    checkpoint_dir: Path | None = None


def _stack_windows(
    samples: list[WindowSample], dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    xs = torch.as_tensor(
        np.stack([s.x for s in samples]).astype(np.float64), dtype=dtype
    )
    ys = torch.as_tensor([s.y for s in samples], dtype=dtype)
    return xs, ys


def train(
    train_samples: list[WindowSample],
    val_samples: list[WindowSample],
    model_cfg: NeuroBoltConfig,
    train_cfg: TrainConfig,
    run_dir: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Optimize a model and return it restored to its best-validation state.

    Window channel rows must be ordered like ``model_cfg.channel_labels``.
    The run is a deterministic function of the configs and data: batch
    order, dropout and drop-path draws all derive from ``train_cfg.seed``.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    if not val_samples:
        raise ValueError("validation split is empty")
    torch.manual_seed(train_cfg.seed)
    dtype = train_cfg.dtype
    model = build_model(model_cfg, dtype=dtype)
    torch.manual_seed(train_cfg.seed)  # dropout/drop-path stream
    channel_ids = model.resolve_channels(None)
    x_train, y_train = _stack_windows(train_samples, dtype)
    x_val, y_val = _stack_windows(val_samples, dtype)

    groups = param_groups(model, train_cfg)
    optimizer = torch.optim.AdamW(
        groups, lr=0.0, betas=train_cfg.betas, weight_decay=train_cfg.weight_decay
    )
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    n_layers_top = max(model_cfg.st_depth, model_cfg.sp_depth) + 1

    history: list[EpochRecord] = []
    best_val_r = -math.inf
    best_epoch = -1
    best_state: dict | None = None
    step = 0
    for epoch in range(train_cfg.epochs):
        model.train()
        perm = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
        epoch_loss = 0.0
        last_lr = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            base_lr = lr_at(step, train_cfg, steps_per_epoch=steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = base_lr * group["lr_scale"]
            last_lr = base_lr
            optimizer.zero_grad()
            pred = model(x_train[idx], channel_ids)
            loss = F.mse_loss(pred, y_train[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step} "
                    f"(lr={base_lr:.3e})"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(idx)
            step += 1
        epoch_loss /= n

        model.eval()
        with torch.no_grad():
            val_pred = []
            for start in range(0, len(val_samples), train_cfg.batch_size):
                val_pred.append(
                    model(x_val[start : start + train_cfg.batch_size], channel_ids)
                )
            val_pred = torch.cat(val_pred)
            val_mse = float(F.mse_loss(val_pred, y_val))
        val_r, constant = pearson_or_flag(val_pred.numpy(), y_val.numpy())
        record = EpochRecord(epoch, epoch_loss, val_r, val_mse, last_lr, constant)
        history.append(record)
        if progress:
            print(
                f"epoch {epoch:3d}  train_mse {epoch_loss:.4f}  "
                f"val_R {val_r:.4f}  val_mse {val_mse:.4f}  lr {last_lr:.2e}",
                flush=True,
            )
        if val_r > best_val_r:
            best_val_r = val_r
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()

    checkpoint_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_dir = save_checkpoint(
            run_dir / "checkpoint",
            model,
            model_cfg,
            train_cfg,
            extra={"epoch": best_epoch, "best_val_r": best_val_r},
        )
        with open(run_dir / "log.jsonl", "w") as fh:
            for record in history:
                fh.write(json.dumps(record.to_dict()) + "\n")
    return TrainResult(model, history, best_epoch, best_val_r, checkpoint_dir)


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_tensor.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def finite_difference_check(
    model: torch.nn.Module,
    loss_fn,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
    n_coords: int = 10,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn(model)`` against central
    finite differences at randomly sampled coordinates of every parameter.

    Relative error uses a 1e-6 denominator floor so near-zero gradients
    are compared absolutely at that scale.
    """
    model.eval()
    for p in model.parameters():
        p.grad = None
    loss = loss_fn(model)
    loss.backward()
    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    for name, param in model.named_parameters():
        grad = param.grad
        if grad is None:
            continue
        flat = param.data.view(-1)
        gflat = grad.view(-1)
        k = min(n_coords, flat.numel())
        coords = rng.choice(flat.numel(), size=k, replace=False)
        worst = 0.0
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + fd_step
                f_plus = float(loss_fn(model))
                flat[c] = orig - fd_step
                f_minus = float(loss_fn(model))
                flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * fd_step)
            analytic = gflat[c].item()
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
        per_tensor[name] = worst
    return GradCheckReport(per_tensor=per_tensor, tolerance=tolerance)


def grad_check(
    model_cfg: NeuroBoltConfig,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
    n_coords: int = 10,
    seed: int = 0,
    batch: int = 4,
) -> GradCheckReport:
    """Finite-difference verification of the full model in 64-bit precision."""
    torch.manual_seed(seed)
    model = build_model(model_cfg, dtype=torch.float64)
    channel_ids = model.resolve_channels(None)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(
        rng.standard_normal((batch, model_cfg.n_channels_max, model_cfg.window_samples))
    )
    y = torch.as_tensor(rng.standard_normal(batch))

    def loss_fn(m):
        return F.mse_loss(m(x, channel_ids), y)

    return finite_difference_check(
        model, loss_fn, tolerance=tolerance, fd_step=fd_step,
        n_coords=n_coords, seed=seed,
    )


def save_checkpoint(
    ckpt_dir: str | Path,
    model: NeuroBolt,
    model_cfg: NeuroBoltConfig,
    train_cfg: TrainConfig | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``manifest.json`` + ``params.bin`` (concatenated little-endian
    tensors). Round-trips bit-exactly."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        code = _DTYPE_CODES[tensor.dtype]
        raw = np.ascontiguousarray(tensor.detach().numpy(), dtype=code).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": "neurobolt-checkpoint-v1",
        "tensors": tensors,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "extra": extra or {},
    }
    (ckpt_dir / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))
    (ckpt_dir / CHECKPOINT_PARAMS).write_bytes(b"".join(blobs))
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[NeuroBolt, dict]:
    """Rebuild a model from a checkpoint directory.

    Validates that tensor offsets tile the blob exactly and that names and
    shapes match the freshly built model.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / CHECKPOINT_MANIFEST).read_text())
    blob = (ckpt_dir / CHECKPOINT_PARAMS).read_bytes()
    entries = manifest["tensors"]
    pos = 0
    for entry in entries:
        if entry["offset"] != pos:
            raise ValueError(
                f"manifest offsets not contiguous at {entry['name']!r}: "
                f"expected {pos}, got {entry['offset']}"
            )
        pos += entry["nbytes"]
    if pos != len(blob):
        raise ValueError(
            f"params.bin holds {len(blob)} bytes but manifest promises {pos}"
        )
    model_cfg = NeuroBoltConfig.from_dict(manifest["model_config"])
    dtypes = {e["dtype"] for e in entries}
    dtype = torch.float64 if dtypes == {"<f8"} else torch.float32
    model = build_model(model_cfg, dtype=dtype)
    state = model.state_dict()
    if {e["name"] for e in entries} != set(state):
        raise ValueError("checkpoint tensor names do not match the model")
    new_state = {}
    for entry in entries:
        arr = np.frombuffer(
            blob, dtype=entry["dtype"], count=int(np.prod(entry["shape"]) or 1),
            offset=entry["offset"],
        ).reshape(entry["shape"])
        if list(state[entry["name"]].shape) != entry["shape"]:
            raise ValueError(
                f"shape mismatch for {entry['name']!r}: model "
                f"{list(state[entry['name']].shape)}, checkpoint {entry['shape']}"
            )
        new_state[entry["name"]] = torch.as_tensor(arr.copy())
    model.load_state_dict(new_state)
    model.eval()
    return model, manifest
