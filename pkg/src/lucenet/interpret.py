"""Gradient saliency maps and activation maximisation of conv filters.

Saliency is the absolute gradient of the pre-sigmoid logit with respect to
each input pixel, evaluated in inference mode: the post-sigmoid probability
would rescale the map but not reorder pixels within an image. Activation
maximisation runs backtracking gradient ascent on the input against the mean
pre-activation of one filter's output map, with input weight decay and a
[0,1] clamp each step. Neither touches model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .data import SampleImage, save_pgm, save_ppm
from .rng import substream


@dataclass
class SaliencyMap:
    values: np.ndarray            # H x W, >= 0
    image_id: str
    model_fingerprint: str
    epoch: int | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or (self.values < 0).any():
            raise ValueError("SaliencyMap: values must be 2-d and non-negative")


@dataclass
class FilterPanel:
    layer: str
    images: list[np.ndarray]      # one synthesised input per filter
    activations: list[float]      # final ascent activation per filter


@dataclass(frozen=True)
class AscentConfig:
    steps: int = 128
    step_size: float = 0.1
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("AscentConfig: steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("AscentConfig: step_size must be > 0")


def saliency(model: M.Model, image: SampleImage | np.ndarray,
             epoch: int | None = None) -> SaliencyMap:
    """|d logit / d pixel| at training=False; the model is left untouched."""
    if isinstance(image, SampleImage):
        pixels, image_id = image.pixels, image.id
    else:
        pixels, image_id = np.asarray(image, dtype=np.float32), ""
    x = T.Tensor(pixels[None, None], requires_grad=True)
    with T.Tape():
        logit = M.forward(model, x, training=False)
    T.backward(logit)
    values = np.abs(x.grad[0, 0])
    M.zero_grads(model)
    return SaliencyMap(values, image_id, M.parameter_fingerprint(model), epoch)


def saliency_probe(snapshots: dict[int, M.Model],
                   image: SampleImage | np.ndarray,
                   epochs: tuple[int, ...] = (1, 5, 10)) -> list[SaliencyMap]:
    """One map per requested epoch snapshot, in epoch order."""
    maps = []
    for epoch in sorted(epochs):
        if epoch not in snapshots:
            raise ValueError(f"saliency_probe: missing snapshot for epoch {epoch}")
        maps.append(saliency(snapshots[epoch], image, epoch=epoch))
    return maps


def top_fraction_mask(values: np.ndarray, fraction: float = 0.01) -> np.ndarray:
    """Boolean mask of the highest-valued `fraction` of pixels."""
    flat = values.reshape(-1)
    count = max(1, int(round(flat.size * fraction)))
    threshold_idx = np.argsort(flat, kind="stable")[-count:]
    mask = np.zeros(flat.size, dtype=bool)
    mask[threshold_idx] = True
    return mask.reshape(values.shape)


def mask_overlap(sal: SaliencyMap, mask: np.ndarray,
                 fraction: float = 0.01) -> float:
    """Fraction of the top-`fraction` saliency pixels that fall in the mask."""
    top = top_fraction_mask(sal.values, fraction)
    return float((top & mask).sum()) / float(top.sum())


def _resolve_layer(model: M.Model, layer: str) -> str:
    names = M.conv_layer_names(model.config)
    if layer == "first":
        return names[0]
    if layer == "last":
        return names[-1]
    if layer in names:
        return layer
    raise ValueError(f"unknown conv layer {layer!r}; have {names}")


def filter_count(model: M.Model, layer: str) -> int:
    name = _resolve_layer(model, layer)
    return model.params[name + ".w"].data.shape[0]


def maximize_filter(model: M.Model, layer: str, filter_index: int,
                    config: AscentConfig) -> tuple[np.ndarray, list[float]]:
    """Gradient ascent on the input for one filter's mean activation.

    Starts from uniform noise in [0.4, 0.6]. Each step proposes
    x + alpha * (step_size * normalised gradient - weight_decay * x), clamped
    to [0,1], and halves alpha until the activation does not decrease, so the
    returned trace is non-decreasing. Returns (image, per-step activations
    including the start). The model is never mutated.
    """
    layer_name = _resolve_layer(model, layer)
    n_filters = filter_count(model, layer_name)
    if not 0 <= filter_index < n_filters:
        raise ValueError(f"filter {filter_index} out of range for "
                         f"{layer_name} ({n_filters} filters)")
    size = model.config.input_size
    rng = substream(config.seed, "ascent", layer_name, str(filter_index))
    x = (0.4 + 0.2 * rng.random((1, 1, size, size))).astype(np.float32)

    def activation_of(arr: np.ndarray) -> float:
        out = M.forward(model, T.Tensor(arr), training=False, stop_at=layer_name)
        return float(out.data[:, filter_index].mean())

    def gradient_at(arr: np.ndarray) -> np.ndarray:
        xt = T.Tensor(arr, requires_grad=True)
        with T.Tape():
            out = M.forward(model, xt, training=False, stop_at=layer_name)
            objective = T.mean_channel(out, filter_index)
        T.backward(objective)
        g = xt.grad.copy()
        M.zero_grads(model)
        return g

    trace = [activation_of(x)]
    for _ in range(config.steps):
        g = gradient_at(x)
        rms = float(np.sqrt((g ** 2).mean()))
        direction = (config.step_size * g / (rms + 1e-12)
                     - config.weight_decay * x)
        alpha = 1.0
        accepted = None
        for _ in range(12):
            candidate = np.clip(x + alpha * direction, 0.0, 1.0).astype(np.float32)
            value = activation_of(candidate)
            if value >= trace[-1]:
                accepted = (candidate, value)
                break
            alpha *= 0.5
        if accepted is None:
            trace.append(trace[-1])   # converged: no improving step survives
            continue
        x, value = accepted
        trace.append(value)
    return x[0, 0], trace


def build_panel(model: M.Model, layer: str, config: AscentConfig) -> FilterPanel:
    """Activation-maximising input for every filter of the layer."""
    layer_name = _resolve_layer(model, layer)
    images, activations = [], []
    for idx in range(filter_count(model, layer_name)):
        img, trace = maximize_filter(model, layer_name, idx, config)
        images.append(img)
        activations.append(trace[-1])
    return FilterPanel(layer_name, images, activations)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def colormap(t: np.ndarray | float) -> np.ndarray:
    """Linear blue (t=0) to red (t=1); shape (..., 3) floats in [0,1]."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.stack([t, np.zeros_like(t), 1.0 - t], axis=-1)


def render_heatmap(sal: SaliencyMap, base: np.ndarray) -> np.ndarray:
    """Colormapped saliency alpha-blended (0.5) over the grayscale base.

    The map is normalised by its maximum; an all-zero map renders uniformly
    blue rather than erroring (constant models are legitimate fixtures).
    """
    if sal.values.shape != base.shape:
        raise ValueError("render_heatmap: saliency and base shapes differ")
    peak = float(sal.values.max())
    norm = sal.values / peak if peak > 0 else np.zeros_like(sal.values)
    color = colormap(norm)
    gray = np.repeat(np.asarray(base, dtype=np.float64)[:, :, None], 3, axis=2)
    return 0.5 * gray + 0.5 * color


def render_panel(panel: FilterPanel, grid: tuple[int, int],
                 separator: float = 1.0) -> np.ndarray:
    """Row-major tiling with 1-pixel separators between and around tiles."""
    rows, cols = grid
    count = len(panel.images)
    if rows * cols < count:
        raise ValueError(f"render_panel: grid {rows}x{cols} holds fewer than "
                         f"{count} filters")
    th, tw = panel.images[0].shape
    out = np.full((rows * (th + 1) + 1, cols * (tw + 1) + 1), separator,
                  dtype=np.float64)
    for idx, img in enumerate(panel.images):
        if img.shape != (th, tw):
            raise ValueError("render_panel: tiles must share one shape")
        r, c = divmod(idx, cols)
        top, left = 1 + r * (th + 1), 1 + c * (tw + 1)
        out[top:top + th, left:left + tw] = img
    return np.repeat(out[:, :, None], 3, axis=2)


def save_heatmap(sal: SaliencyMap, base: np.ndarray, ppm_path,
                 pgm_path=None) -> None:
    """PPM of the blended heatmap; optional PGM of the normalised map."""
    save_ppm(ppm_path, render_heatmap(sal, base))
    if pgm_path is not None:
        peak = float(sal.values.max())
        norm = sal.values / peak if peak > 0 else np.zeros_like(sal.values)
        save_pgm(pgm_path, norm)


def save_panel(panel: FilterPanel, grid: tuple[int, int], ppm_path) -> None:
    save_ppm(ppm_path, render_panel(panel, grid))
