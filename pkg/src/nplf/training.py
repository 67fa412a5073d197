"""Joint optimization, checkpointing and image-quality evaluation."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import geometry, light_field, point_encoder, ray_aggregation
from .model import PointLightField
from .scene_io import RunConfig, Scene

CHECKPOINT_MAGIC = b"NPLF"
CHECKPOINT_VERSION = 1

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 10.0 / 3.0     # radius 5 -> 11-tap window
SSIM_K1, SSIM_K2 = 0.01, 0.03

FRAMES_PER_BATCH = 4


class NonFiniteLossError(RuntimeError):
    """Training hit a non-finite loss; carries a batch diagnostic dump."""

    def __init__(self, message, details: dict):
        super().__init__(message)
        self.details = details


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Metrics


def psnr(pred: np.ndarray, gt: np.ndarray, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio against a [0,1] reference."""
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    blur = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Structural similarity, 11x11 Gaussian window, averaged over channels."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes disagree")
    if pred.ndim == 2:
        return _ssim_single(pred, gt)
    return float(np.mean([_ssim_single(pred[..., c], gt[..., c]) for c in range(pred.shape[-1])]))


@dataclass
class EvalReport:
    task: str                       # reconstruction | interpolation | extrapolation
    frames: list = field(default_factory=list)   # {"frame": i, "psnr": x, "ssim": y}
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Model state


@dataclass
class ModelState:
    model: PointLightField
    optimizer: torch.optim.Adam
    step: int
    config: RunConfig


def _init_parameters(model: torch.nn.Module, gen: torch.Generator):
    """Fan-in scaled uniform init, zeros for the far code.

    Hidden weights carry the ReLU gain (bound sqrt(6 / fan_in)): the plain
    1/sqrt(fan) bound shrinks activations ~6x per layer and stalls the
    8-layer head for thousands of steps. Each block's output layer keeps the
    small bound so colors start mid-range (no sigmoid saturation) and the
    attention starts flat.
    """
    for module in model.modules():
        if isinstance(module, (torch.nn.Linear, torch.nn.Conv2d)):
            fan_in = module.weight[0].numel()
            with torch.no_grad():
                module.weight.uniform_(-math.sqrt(6.0 / fan_in),
                                       math.sqrt(6.0 / fan_in), generator=gen)
                if module.bias is not None:
                    bound = 1.0 / math.sqrt(fan_in)
                    module.bias.uniform_(-bound, bound, generator=gen)
    att = model.attention
    outputs = [model.head.layers[-1], att.key_map[2], att.value_map[2],
               att.query_map[2], att.out_proj]
    with torch.no_grad():
        for layer in outputs:
            bound = 1.0 / math.sqrt(layer.weight[0].numel())
            layer.weight.uniform_(-bound, bound, generator=gen)
        model.attention.far_code.zero_()


def new_state(config: RunConfig, dtype=torch.float32) -> ModelState:
    model = PointLightField(config).to(dtype)
    gen = torch.Generator().manual_seed(config.seed)
    _init_parameters(model, gen)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_start)
    return ModelState(model, optimizer, 0, config)


def learning_rate(config: RunConfig, step: int) -> float:
    """Linear interpolation from lr_start at step 0 to lr_end at total_steps."""
    frac = min(step / config.total_steps, 1.0)
    return config.lr_start * (1.0 - frac) + config.lr_end * frac


def set_far_threshold(state: ModelState, scene: Scene):
    """Scene-scale distance threshold: max over train-frame clouds."""
    cfg = state.config
    values = [
        ray_aggregation.compute_d_inf(
            scene.frames[i].cloud, cfg.d_inf_percentile, seed=cfg.seed
        )
        for i in scene.train_indices()
    ]
    with torch.no_grad():
        state.model.attention.far_threshold.fill_(max(values))


def step_seed(base_seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, step])


def train_step(state: ModelState, scene: Scene, seed) -> float:
    """One gradient update on a fresh ray batch; deterministic per (state, seed).

    Samples FRAMES_PER_BATCH train frames, ray_batch/FRAMES_PER_BATCH pixels
    each, with per-step point subsampling and the nearby-frame cloud swap.
    """
    cfg = state.config
    model = state.model
    train_idx = scene.train_indices()
    if not train_idx:
        raise ValueError("scene has no training frames")
    rng = np.random.default_rng(seed)
    rays_per_frame = max(cfg.ray_batch // FRAMES_PER_BATCH, 1)
    replace = len(train_idx) < FRAMES_PER_BATCH
    chosen = rng.choice(train_idx, size=FRAMES_PER_BATCH, replace=replace)

    preds, targets, batch_debug = [], [], []
    for fi in chosen:
        frame = scene.frames[int(fi)]
        camera = frame.camera
        # cloud augmentation: borrow the capture of a neighboring time step
        delta = int(rng.choice([-1, 0, 1]))
        ci = int(np.clip(int(fi) + delta, 0, len(scene.frames) - 1))
        cloud = point_encoder.sample_cloud(
            scene.frames[ci].cloud, cfg.n_sample_points, seed=int(rng.integers(2**31))
        )
        npix = camera.width * camera.height
        flat = rng.choice(npix, size=rays_per_frame, replace=npix < rays_per_frame)
        pixels = np.stack([flat % camera.width, flat // camera.width], axis=1)
        dirs = geometry.camera_ray_directions(camera, pixels)
        origins = np.tile(camera.center, (len(dirs), 1))
        features = model.encode_cloud(cloud)
        colors, _ = model.forward_rays((origins, dirs), cloud, camera, features)
        preds.append(colors)
        targets.append(frame.image[pixels[:, 1], pixels[:, 0]])
        batch_debug.append({"frame": int(fi), "cloud_frame": ci,
                            "pixels": pixels[:8].tolist()})

    pred = torch.cat(preds)
    gt = torch.as_tensor(np.concatenate(targets), dtype=pred.dtype)
    loss = light_field.image_loss(pred, gt)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "batch": batch_debug},
        )
    lr = learning_rate(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


class Trainer:
    """Drives train_step, metrics logging and periodic checkpoints."""

    def __init__(self, state: ModelState, scene: Scene, metrics_path=None):
        self.state = state
        self.scene = scene
        self.metrics_path = metrics_path
        if not torch.isfinite(state.model.attention.far_threshold):
            set_far_threshold(state, scene)

    def _log(self, record: dict):
        if self.metrics_path:
            with open(self.metrics_path, "a") as f:
                f.write(json.dumps(record) + "\n")

    def run(self, n_steps: int, checkpoint_path=None, checkpoint_every=None,
            progress=None) -> list:
        losses = []
        cfg = self.state.config
        every = checkpoint_every or cfg.checkpoint_every
        for _ in range(n_steps):
            seed = step_seed(cfg.seed, self.state.step)
            loss = train_step(self.state, self.scene, seed)
            losses.append(loss)
            self._log({
                "step": self.state.step,
                "loss": loss,
                "loss_mean": loss / cfg.ray_batch,
                "lr": learning_rate(cfg, self.state.step - 1),
            })
            if progress and (self.state.step % progress == 0):
                print(f"step {self.state.step}: loss {loss:.4f}", flush=True)
            if checkpoint_path and (self.state.step % every == 0):
                save_checkpoint(self.state, checkpoint_path)
        if checkpoint_path:
            save_checkpoint(self.state, checkpoint_path)
        return losses


def evaluate(state: ModelState, scene: Scene, frames=None,
             task: str = "reconstruction", metrics_path=None) -> EvalReport:
    """Render the given frames in full and score them against ground truth."""
    if frames is None:
        frames = scene.train_indices() if task == "reconstruction" else scene.holdout_indices()
    report = EvalReport(task=task)
    model = state.model
    model.eval()
    for fi in frames:
        frame = scene.frames[fi]
        image, _ = model.render_image(frame.camera, frame.cloud)
        p, s = psnr(image, frame.image), ssim(image, frame.image)
        entry = {"frame": int(fi), "psnr": p, "ssim": s}
        report.frames.append(entry)
        if metrics_path:
            with open(metrics_path, "a") as f:
                f.write(json.dumps({"eval": task, **entry}) + "\n")
    model.train()
    if report.frames:
        report.mean_psnr = float(np.mean([f["psnr"] for f in report.frames]))
        report.mean_ssim = float(np.mean([f["ssim"] for f in report.frames]))
    return report


# ---------------------------------------------------------------------------
# Checkpoints: single self-describing archive, byte-stable round trips


def _state_arrays(state: ModelState) -> dict:
    arrays = {}
    for name, tensor in state.model.state_dict().items():
        arrays[f"model.{name}"] = tensor.detach().cpu().numpy()
    param_names = {id(p): n for n, p in state.model.named_parameters()}
    for p, opt_state in state.optimizer.state.items():
        name = param_names[id(p)]
        for key, value in opt_state.items():
            arrays[f"opt.{name}.{key}"] = np.asarray(
                value.detach().cpu().numpy() if torch.is_tensor(value) else value
            )
    return arrays


def save_checkpoint(state: ModelState, path):
    arrays = _state_arrays(state)
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        raw = arr.tobytes()
        manifest.append({
            "name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
            "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "config": state.config.to_dict(),
        "config_hash": state.config.content_hash(),
        "arrays": manifest,
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, 0))
        f.write(struct.pack("<Q", len(meta_blob)))
        f.write(meta_blob)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, dtype=torch.float32) -> ModelState:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file")
        version, _ = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} != supported {CHECKPOINT_VERSION}"
            )
        (meta_len,) = struct.unpack("<Q", _read_exact(f, 8, "header"))
        meta = json.loads(_read_exact(f, meta_len, "metadata"))
        data = f.read()
    config = RunConfig.from_dict(meta["config"], where=f"{path}:config")
    if meta.get("config_hash") != config.content_hash():
        raise CheckpointError("config hash mismatch (corrupt checkpoint)")
    arrays = {}
    for entry in meta["arrays"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated checkpoint at array {entry['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    state = new_state(config, dtype=dtype)
    state.step = int(meta["step"])
    model_arrays = {
        k[len("model."):]: torch.as_tensor(v)
        for k, v in arrays.items() if k.startswith("model.")
    }
    missing = set(state.model.state_dict()) - set(model_arrays)
    if missing:
        raise CheckpointError(f"checkpoint misses model arrays: {sorted(missing)[:4]}")
    state.model.load_state_dict(model_arrays)
    for name, p in state.model.named_parameters():
        keys = [k for k in arrays if k.startswith(f"opt.{name}.")]
        if not keys:
            continue
        opt_entry = {}
        for k in keys:
            field_name = k[len(f"opt.{name}."):]
            opt_entry[field_name] = torch.as_tensor(arrays[k])
        state.optimizer.state[p] = opt_entry
    return state


# ---------------------------------------------------------------------------
# Aggregation/K ablation


ABLATION_VARIANTS = (
    ("naive_sum", "naive_sum", 8),
    ("heuristic", "inverse_distance", 8),
    ("k0", "attention", 0),
    ("k1", "attention", 1),
    ("k2", "attention", 2),
    ("k8", "attention", 8),
)


def run_ablation(scene: Scene, base_config: RunConfig, budget: int,
                 out_path=None, eval_frames=None, variants=ABLATION_VARIANTS,
                 progress=None) -> list:
    """Train every aggregation/K variant with the same budget and seed.

    Emits one row per variant with reconstruction PSNR/SSIM over a fixed
    frame subset. With out_path set, completed rows are reloaded so an
    interrupted sweep resumes where it stopped.
    """
    rows = []
    done = set()
    if out_path and os.path.exists(out_path):
        with open(out_path) as f:
            rows = json.load(f)
        done = {r["variant"] for r in rows}
    if eval_frames is None:
        train = scene.train_indices()
        eval_frames = train[:: max(len(train) // 4, 1)][:4]
    for variant, aggregation, k in variants:
        if variant in done:
            continue
        cfg = dataclasses.replace(
            base_config, aggregation=aggregation, k_closest=k, total_steps=budget
        )
        state = new_state(cfg)
        trainer = Trainer(state, scene)
        trainer.run(budget, progress=progress)
        report = evaluate(state, scene, frames=eval_frames, task="reconstruction")
        rows.append({
            "variant": variant, "aggregation": aggregation, "k": k,
            "steps": budget, "psnr": report.mean_psnr, "ssim": report.mean_ssim,
        })
        if out_path:
            with open(out_path, "w") as f:
                json.dump(rows, f, indent=1)
                f.write("\n")
        if progress:
            print(f"ablation {variant}: psnr {report.mean_psnr:.2f}", flush=True)
    return rows
