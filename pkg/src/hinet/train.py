"""Training and evaluation: loss, metrics, optimizer, schedule, data.

The loss is the negative sum of per-stage PSNRs between each restored
image and the ground truth, with the mean-squared error floored at 1e-10
so perfect batches stay finite (100 dB cap, peak 1.0).

Determinism: every random decision is keyed by (seed, domain, index)
through counter-based streams, never by consumed generator state, so a
resumed run replays the exact batch/augmentation sequence of an
uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, backward, record
from .model import Model
from .ops import add, add_const, clamp_min, log, mean_all, mul, scale, sub
from .tensor import RngState, ShapeError, Tensor

PSNR_PEAK = 1.0
PSNR_CAP = 100.0
MSE_FLOOR = 1e-10

# Philox stream namespaces (stream = domain | index)
DOMAIN_INIT = 1 << 32
DOMAIN_SAMPLE = 2 << 32
DOMAIN_AUG = 3 << 32
DOMAIN_VAL = 4 << 32
DOMAIN_BASE = 5 << 32


class TrainingDiverged(RuntimeError):
    pass


# -- metrics ------------------------------------------------------------

def psnr(pred: Tensor, target: Tensor, peak: float = PSNR_PEAK,
         cap: float = PSNR_CAP) -> float:
    """10 log10(peak^2 / mse) over all elements, clamped at `cap` dB."""
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: shape mismatch {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    threshold = peak * peak * 10.0 ** (-cap / 10.0)
    if mse <= threshold:
        return float(cap)
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering of a 2-D image."""
    size = k.size
    h, w = img.shape
    rows = np.zeros((h, w - size + 1), dtype=np.float64)
    for i in range(size):
        rows += k[i] * img[:, i:i + w - size + 1]
    out = np.zeros((h - size + 1, rows.shape[1]), dtype=np.float64)
    for i in range(size):
        out += k[i] * rows[i:i + h - size + 1, :]
    return out


def ssim(pred: Tensor, target: Tensor) -> float:
    """Mean structural similarity, 11x11 Gaussian window sigma=1.5,
    K1=0.01, K2=0.03, dynamic range 1; per channel, averaged."""
    if pred.shape != target.shape:
        raise ShapeError(f"ssim: shape mismatch {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    n, c, h, w = pred.shape
    win = 11
    if h < win or w < win:
        raise ShapeError(f"ssim needs spatial extent >= {win}, got {h}x{w}")
    k = _gaussian_window(win, 1.5)
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    vals = []
    for b in range(n):
        for ch in range(c):
            x = pred.data[b, ch].astype(np.float64)
            y = target.data[b, ch].astype(np.float64)
            mu_x = _filter_valid(x, k)
            mu_y = _filter_valid(y, k)
            xx = _filter_valid(x * x, k) - mu_x * mu_x
            yy = _filter_valid(y * y, k) - mu_y * mu_y
            xy = _filter_valid(x * y, k) - mu_x * mu_y
            num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
            den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
            vals.append(np.mean(num / den))
    return float(np.mean(vals))


# -- differentiable loss --------------------------------------------------

def psnr_term(pred, target, peak: float = PSNR_PEAK, floor: float = MSE_FLOOR):
    """Taped 10 log10(peak^2 / max(mse, floor)) as a scalar tensor."""
    d = sub(pred, target)
    mse = mean_all(mul(d, d))
    m = clamp_min(mse, floor)
    return scale(add_const(log(m), -2.0 * math.log(peak)), -10.0 / math.log(10.0))


def psnr_loss(outputs, x, y, peak: float = PSNR_PEAK, floor: float = MSE_FLOOR):
    """Negative sum of both stages' PSNR against the ground truth.

    `outputs` provides the two restored images (already input-added);
    one mse is taken per stage over the whole batch.
    """
    del x  # the restored images already include the input residual
    t1 = psnr_term(outputs.r1, y, peak, floor)
    t2 = psnr_term(outputs.r2, y, peak, floor)
    return scale(add(t1, t2), -1.0)


# -- optimizer ------------------------------------------------------------

@dataclass
class OptimState:
    """Adam moments plus step counter; moment shapes mirror parameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @staticmethod
    def for_params(params) -> "OptimState":
        state = OptimState()
        for p in params:
            if p.trainable:
                state.m[p.name] = np.zeros(tuple(p.value.shape), dtype=np.float32)
                state.v[p.name] = np.zeros(tuple(p.value.shape), dtype=np.float32)
        return state

    def to_dict(self) -> dict:
        return {"step": self.step, "m": dict(self.m), "v": dict(self.v)}

    @staticmethod
    def from_dict(d: dict) -> "OptimState":
        state = OptimState(step=int(d["step"]))
        state.m = {k: np.asarray(v, dtype=np.float32) for k, v in d["m"].items()}
        state.v = {k: np.asarray(v, dtype=np.float32) for k, v in d["v"].items()}
        return state


def adam_step(params, grads, state: OptimState, lr: float) -> None:
    """Standard bias-corrected Adam update.

    `grads` maps parameter name to gradient array; when None, each
    parameter's accumulated grad is used.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name] if grads is not None else p.grad.data
        m = state.m[p.name]
        v = state.v[p.name]
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.assign(Tensor(p.value.data - np.float32(lr) * update, _checked=True))


# -- learning-rate schedule ----------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    lr_start: float = 2e-4
    lr_end: float = 1e-7
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.lr_start < self.lr_end:
            raise ValueError("schedule must be nonincreasing (lr_start >= lr_end)")


def cosine_lr(schedule: LrSchedule, step: int) -> float:
    """Half-cosine decay from lr_start at step 0 to lr_end at total_steps."""
    if step < 0 or step > schedule.total_steps:
        return schedule.lr_end
    frac = step / schedule.total_steps
    return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (
        1.0 + math.cos(math.pi * frac))


# -- augmentation ----------------------------------------------------------

@dataclass
class AugmentSpec:
    enable_hflip: bool = True
    enable_vflip: bool = True
    enable_rot90: bool = True


@dataclass
class Sample:
    degraded: Tensor
    clean: Tensor
    tag: str = ""


def dihedral_apply(arr: np.ndarray, idx: int) -> np.ndarray:
    """One of the 8 flip/rot90 symmetries on the (h, w) axes of NCHW data."""
    k = idx & 3
    out = np.rot90(arr, k, axes=(2, 3))
    if idx & 4:
        out = out[:, :, :, ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(arr: np.ndarray, idx: int) -> np.ndarray:
    k = idx & 3
    out = arr[:, :, :, ::-1] if idx & 4 else arr
    return np.ascontiguousarray(np.rot90(out, -k, axes=(2, 3)))


def augment(sample: Sample, spec: AugmentSpec, rng: RngState) -> Sample:
    """Random element of the enabled dihedral transforms, applied jointly."""
    d, c = sample.degraded.data, sample.clean.data
    if spec.enable_rot90 and d.shape[2] != d.shape[3]:
        raise ShapeError("rot90 augmentation needs square patches")
    ops = []
    if spec.enable_hflip and rng.integers(0, 2) == 1:
        ops.append("hflip")
    if spec.enable_vflip and rng.integers(0, 2) == 1:
        ops.append("vflip")
    rot = int(rng.integers(0, 4)) if spec.enable_rot90 else 0

    def apply(a):
        if "hflip" in ops:
            a = a[:, :, :, ::-1]
        if "vflip" in ops:
            a = a[:, :, ::-1, :]
        if rot:
            a = np.rot90(a, rot, axes=(2, 3))
        return np.ascontiguousarray(a)

    tag = sample.tag + f"/aug({'+'.join(ops) or 'id'},rot{rot})"
    return Sample(Tensor(apply(d), _checked=True), Tensor(apply(c), _checked=True), tag)


# -- synthetic data ---------------------------------------------------------

def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(c, h, w) -> (c, out_h, out_w) bilinear."""
    c, h, w = img.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def make_smooth_images(count: int, size: int, seed: int) -> list[np.ndarray]:
    """Procedural low-frequency clean images in [0, 1], (3, size, size)."""
    images = []
    for i in range(count):
        rng = RngState(seed, DOMAIN_BASE | i)
        coarse = rng.uniform((3, 8, 8), 0.0, 1.0, dtype=np.float64)
        img = _bilinear_resize(coarse, size, size)
        contrast = 0.5 + 0.5 * float(rng.uniform((1,), 0.0, 1.0)[0])
        img = 0.5 + contrast * (img - 0.5)
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return images


def _box_blur(img: np.ndarray, k: int) -> np.ndarray:
    """k x k mean filter per channel, reflect boundary, same size."""
    if k == 1:
        return img.copy()
    pad = k // 2
    padded = np.pad(img, ((0, 0), (pad, k - 1 - pad), (pad, k - 1 - pad)), mode="reflect")
    c, h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += padded[:, i:i + h, j:j + w]
    return (out / (k * k)).astype(img.dtype)


class SyntheticDataset:
    """Deterministic degraded/clean pairs cropped from base images.

    Sample i is a pure function of (seed, i): base image choice, crop
    position and noise draw all come from the (seed, DOMAIN_SAMPLE | i)
    stream, so streaming can restart at any index.
    """

    def __init__(self, kind: str, base_images: list, patch: int, seed: int,
                 sigma: float = 25.0 / 255.0, blur_k: int = 3):
        if kind not in ("gaussian_noise", "box_blur"):
            raise ValueError(f"unknown degradation kind {kind!r}")
        for img in base_images:
            if img.shape[1] < patch or img.shape[2] < patch:
                raise ShapeError(f"patch {patch} larger than base image "
                                 f"{img.shape[1]}x{img.shape[2]}")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError("base images must lie in [0, 1]")
        self.kind = kind
        self.base_images = [img.astype(np.float32) for img in base_images]
        self.patch = patch
        self.seed = seed
        self.sigma = float(sigma)
        self.blur_k = int(blur_k)

    def _degrade(self, clean: np.ndarray, rng: RngState) -> np.ndarray:
        if self.kind == "gaussian_noise":
            noise = rng.normal(clean.shape, 0.0, self.sigma, dtype=np.float32)
            return np.clip(clean + noise, 0.0, 1.0)
        return np.clip(_box_blur(clean, self.blur_k), 0.0, 1.0)

    def sample_at(self, index: int, domain: int = DOMAIN_SAMPLE) -> Sample:
        rng = RngState(self.seed, domain | index)
        img_idx = int(rng.integers(0, len(self.base_images)))
        base = self.base_images[img_idx]
        y0 = int(rng.integers(0, base.shape[1] - self.patch + 1))
        x0 = int(rng.integers(0, base.shape[2] - self.patch + 1))
        clean = base[:, y0:y0 + self.patch, x0:x0 + self.patch]
        degraded = self._degrade(clean, rng)
        tag = f"{self.kind}/img{img_idx}/crop({y0},{x0})"
        return Sample(Tensor(degraded[None], _checked=True),
                      Tensor(clean[None], _checked=True), tag)

    def samples(self, start: int = 0):
        index = start
        while True:
            yield self.sample_at(index)
            index += 1

    def validation_set(self, count: int) -> list[Sample]:
        return [self.sample_at(j, domain=DOMAIN_VAL) for j in range(count)]


# -- training loop -----------------------------------------------------------

def train_step(model: Model, x: Tensor, y: Tensor, state: OptimState,
               lr: float) -> float:
    """One forward/backward/update; returns the loss value."""
    with record() as t:
        out = model.forward(x, train=True)
        loss = psnr_loss(out, x, y)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged("non-finite loss")
    model.zero_grad()
    backward(t, loss)
    adam_step(model.parameters(), None, state, lr)
    return value


def _make_batch(dataset: SyntheticDataset, step: int, batch_size: int,
                aug: AugmentSpec | None, seed: int) -> tuple[Tensor, Tensor]:
    degraded, clean = [], []
    for j in range(batch_size):
        index = step * batch_size + j
        s = dataset.sample_at(index)
        if aug is not None:
            s = augment(s, aug, RngState(seed, DOMAIN_AUG | index))
        degraded.append(s.degraded.data[0])
        clean.append(s.clean.data[0])
    return (Tensor(np.stack(degraded), _checked=True),
            Tensor(np.stack(clean), _checked=True))


def validation_psnr(model: Model, val_set: list) -> float:
    scores = []
    for s in val_set:
        out = model.forward(s.degraded, train=False)
        restored = Tensor(np.clip(out.r2.data, 0.0, 1.0), _checked=True)
        scores.append(psnr(restored, s.clean))
    return float(np.mean(scores))


def baseline_psnr(val_set: list) -> float:
    return float(np.mean([psnr(s.degraded, s.clean) for s in val_set]))


def train_loop(model: Model, dataset: SyntheticDataset, schedule: LrSchedule,
               steps: int, batch_size: int, rng: RngState,
               augment_spec: AugmentSpec | None = None,
               optimizer_state: OptimState | None = None,
               start_step: int = 0, log_interval: int = 50,
               val_count: int = 4, log_sink=None) -> tuple[list, OptimState]:
    """Deterministic loop: sample -> augment -> forward -> loss -> Adam.

    Returns (log lines, final optimizer state). Log lines carry step, lr,
    loss and validation PSNR in fixed order. Resuming from `start_step`
    with the same seed replays the uninterrupted run exactly.
    """
    seed = rng.seed
    state = optimizer_state or OptimState.for_params(model.parameters())
    val_set = dataset.validation_set(val_count)
    lines: list[str] = []
    for step in range(start_step, steps):
        lr = cosine_lr(schedule, step)
        x, y = _make_batch(dataset, step, batch_size, augment_spec, seed)
        try:
            loss = train_step(model, x, y, state, lr)
        except (TrainingDiverged, FloatingPointError) as exc:
            raise TrainingDiverged(f"non-finite loss at step {step}: {exc}") from exc
        if (step + 1) % log_interval == 0 or step + 1 == steps:
            val = validation_psnr(model, val_set)
            line = f"step={step + 1} lr={lr:.10e} loss={loss:.6f} val_psnr={val:.4f}"
            lines.append(line)
            if log_sink is not None:
                log_sink(line)
    return lines, state
