"""Composite loss, reverse-mode gradients, Adam and the HF synthesis training loop."""
import math
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from app.modules.constants import NUM_CLASSES
from app.modules.exceptions import ArgumentError, NumericalError, TrainingDivergedError
from app.modules.forward_model import gaussian_kernel1d, noise_floor
from app.modules.models import (
    AdamState,
    DegradationVector,
    InrParams,
    LossBreakdown,
    Segmentation,
    TrainConfig,
    TrainingBatch,
    Volume,
)
from app.modules.network import fourier_embed, forward, init_params, lattice_coordinates, reconstruct
from config import settings
from logger import logger

DICE_SMOOTHING = 1e-5
PROBABILITY_FLOOR = 1e-12


def _tensor(values) -> torch.Tensor:
    tensor = torch.as_tensor(values)
    return tensor if torch.is_floating_point(tensor) else tensor.to(torch.float64)


def loss_mae(pred, target) -> torch.Tensor:
    pred, target = _tensor(pred), _tensor(target)
    if pred.shape != target.shape:
        raise ArgumentError(f"prediction shape {tuple(pred.shape)} does not match target {tuple(target.shape)}")
    if pred.numel() == 0:
        raise ArgumentError("cannot compute MAE of an empty batch")
    return (pred - target.to(pred.dtype)).abs().mean()


def loss_seg(pred_probs, labels) -> torch.Tensor:
    """
    Soft Dice loss (smoothing 1e-5, averaged over the four classes) plus cross entropy.

    Args:
        pred_probs: (..., 4) class probabilities
        labels: (...) integer labels in {0, 1, 2, 3}

    Returns:
        Scalar Dice + CE
    """
    probs = _tensor(pred_probs)
    labels = torch.as_tensor(labels).to(torch.int64)
    if probs.shape[-1] != NUM_CLASSES or tuple(probs.shape[:-1]) != tuple(labels.shape):
        raise ArgumentError(f"probabilities {tuple(probs.shape)} do not match labels {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= NUM_CLASSES):
        raise ArgumentError(f"labels must lie in [0, {NUM_CLASSES - 1}]")

    flat_probs = probs.reshape(-1, NUM_CLASSES)
    flat_labels = labels.reshape(-1)
    target = F.one_hot(flat_labels, NUM_CLASSES).to(probs.dtype)

    intersection = (flat_probs * target).sum(dim=0)
    denominator = (flat_probs * flat_probs).sum(dim=0) + (target * target).sum(dim=0)
    dice = 1.0 - ((2.0 * intersection + DICE_SMOOTHING) / (denominator + DICE_SMOOTHING)).mean()

    true_probs = flat_probs.gather(1, flat_labels.unsqueeze(1)).squeeze(1)
    cross_entropy = -torch.log(true_probs.clamp(min=PROBABILITY_FLOOR)).mean()
    return dice + cross_entropy


def loss_tv(values, spatial_dims: int = None) -> torch.Tensor:
    """Sum over spatial axes of the mean absolute forward difference; size-1 axes add nothing.

    `spatial_dims` counts trailing axes to differentiate (default: all of them).
    """
    values = _tensor(values)
    spatial_dims = values.ndim if spatial_dims is None else spatial_dims
    total = values.new_zeros(())
    for axis in range(values.ndim - spatial_dims, values.ndim):
        if values.shape[axis] < 2:
            continue
        total = total + torch.diff(values, dim=axis).abs().mean()
    return total


def loss_preact(pre_activations) -> torch.Tensor:
    """Mean of the squared pre-activation entries (squared norm / 5 per sample, averaged)."""
    pre_activations = _tensor(pre_activations)
    if pre_activations.numel() == 0:
        return pre_activations.new_zeros(())
    return (pre_activations * pre_activations).mean()


def _reflect_pad(values: torch.Tensor, axis: int, radius: int) -> torch.Tensor:
    # symmetric extension (d c b a | a b c d | d c b a), grown in steps for radii beyond the axis length
    left, right = 0, 0
    while left < radius or right < radius:
        size = values.shape[axis]
        step_left = min(radius - left, size)
        step_right = min(radius - right, size)
        parts = []
        if step_left:
            parts.append(values.narrow(axis, 0, step_left).flip(axis))
        parts.append(values)
        if step_right:
            parts.append(values.narrow(axis, size - step_right, step_right).flip(axis))
        values = torch.cat(parts, dim=axis)
        left, right = left + step_left, right + step_right
    return values


def smooth_tensor(values: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian over the last three axes with the same kernel and boundary rule as the forward model."""
    kernel = gaussian_kernel1d(sigma)
    if kernel.size == 1:
        return values
    radius = kernel.size // 2
    weights = torch.as_tensor(kernel, dtype=values.dtype)
    for axis in range(values.ndim - 3, values.ndim):
        padded = _reflect_pad(values, axis, radius)
        moved = padded.movedim(axis, -1)
        lead = moved.shape[:-1]
        smoothed = F.conv1d(moved.reshape(-1, 1, moved.shape[-1]), weights.view(1, 1, -1))
        values = smoothed.reshape(*lead, -1).movedim(-1, axis)
    return values


def pool_tensor(values: torch.Tensor, df: int) -> torch.Tensor:
    """Average over non-overlapping df^3 blocks of the last three axes."""
    if df == 1:
        return values
    lead = values.shape[:-3]
    pooled = F.avg_pool3d(values.reshape(-1, 1, *values.shape[-3:]), kernel_size=df, stride=df)
    return pooled.reshape(*lead, *pooled.shape[-3:])


def ulf_projection(hf_patch: torch.Tensor, probs: torch.Tensor, m, sigma: float, df: int) -> torch.Tensor:
    """
    Differentiable forward model: sum_t m_t * pool(smooth(X * p_t)) over WM, GM and CSF.

    Args:
        hf_patch: (..., px, py, pz) predicted intensities
        probs: (..., px, py, pz, 4) predicted class probabilities
        m: degradation factors ordered WM, GM, CSF
        sigma: Gaussian width in HF voxels
        df: pooling factor

    Returns:
        (..., px/df, py/df, pz/df) ULF-space prediction
    """
    if any(n % df for n in hf_patch.shape[-3:]):
        raise ArgumentError(f"patch dims {tuple(hf_patch.shape[-3:])} must be multiples of df={df}")
    m = torch.as_tensor(m, dtype=hf_patch.dtype)
    weighted = hf_patch.unsqueeze(0) * probs[..., 1:].movedim(-1, 0)
    branches = pool_tensor(smooth_tensor(weighted, sigma), df)
    return (branches * m.view(-1, *([1] * (branches.ndim - 1)))).sum(dim=0)


def composite_loss(params: InrParams, batch: TrainingBatch, config: TrainConfig) -> Tuple[torch.Tensor, LossBreakdown]:
    """total = l1 * MAE + l2 * (Dice + CE) + l3 * TV + l4 * pre-activation penalty."""
    output = forward(params, fourier_embed(batch.coords, params.embedding, params.frequencies))
    predicted_ulf = ulf_projection(output.intensity, output.seg_probs, batch.m, config.sigma_smooth, config.df)
    predicted_ulf = predicted_ulf + batch.noise_floor
    pooled_probs = pool_tensor(output.seg_probs.movedim(-1, 0), config.df).movedim(0, -1)

    mae = loss_mae(predicted_ulf, batch.observed)
    seg = loss_seg(pooled_probs, batch.labels)
    tv = loss_tv(reconstruct(output), spatial_dims=3)
    preact = loss_preact(output.pre_activations)
    total = config.l1 * mae + config.l2 * seg + config.l3 * tv + config.l4 * preact

    terms = {
        "mae": mae.detach().item(),
        "seg": seg.detach().item(),
        "tv": tv.detach().item(),
        "preact_reg": preact.detach().item(),
    }
    if not all(math.isfinite(v) for v in terms.values()):
        return total, None
    breakdown = LossBreakdown(
        total=config.l1 * terms["mae"] + config.l2 * terms["seg"] + config.l3 * terms["tv"] + config.l4 * terms["preact_reg"],
        **terms,
    )
    return total, breakdown


def value_and_gradients(
    params: InrParams, batch: TrainingBatch, config: TrainConfig
) -> Tuple[LossBreakdown, Dict[str, torch.Tensor]]:
    leaves = {name: tensor.detach().clone().requires_grad_(True) for name, tensor in params.tensors.items()}
    total, breakdown = composite_loss(params.replace(leaves), batch, config)
    if breakdown is None or not torch.isfinite(total):
        diagnostics = {
            "total": total.detach().item(),
            "params_finite": params.all_finite(),
            "observed_range": (float(batch.observed.min()), float(batch.observed.max())),
        }
        logger.error("Non-finite training loss: %s", diagnostics)
        raise NumericalError("training loss is not finite", diagnostics)

    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    gradient_set = {
        name: torch.zeros_like(leaf) if grad is None else grad.detach()
        for (name, leaf), grad in zip(leaves.items(), grads)
    }
    return breakdown, gradient_set


def gradients(params: InrParams, batch: TrainingBatch, config: TrainConfig) -> Dict[str, torch.Tensor]:
    """Exact gradients of the composite loss with respect to every parameter tensor."""
    return value_and_gradients(params, batch, config)[1]


def init_adam_state(params: Union[InrParams, Mapping[str, torch.Tensor]]) -> AdamState:
    tensors = params.tensors if isinstance(params, InrParams) else params
    return AdamState(
        step=0,
        first_moment={name: torch.zeros_like(t) for name, t in tensors.items()},
        second_moment={name: torch.zeros_like(t) for name, t in tensors.items()},
    )


def adam_step(state: AdamState, params, grads: Mapping[str, torch.Tensor], config: TrainConfig):
    """
    One bias-corrected Adam update.

    Args:
        state: moments and step count
        params: InrParams or a plain name -> tensor mapping
        grads: gradients keyed like the parameters
        config: learning rate, betas and eps

    Returns:
        (new state, updated parameters of the same kind as `params`)
    """
    tensors = params.tensors if isinstance(params, InrParams) else params
    if set(grads) != set(tensors):
        raise ArgumentError("gradient keys do not match parameter keys")

    step = state.step + 1
    first_correction = 1.0 - config.beta1 ** step
    second_correction = 1.0 - config.beta2 ** step
    first, second, updated = {}, {}, {}
    with torch.no_grad():
        for name, value in tensors.items():
            grad = grads[name]
            if grad.shape != value.shape:
                raise ArgumentError(f"gradient for {name} has shape {tuple(grad.shape)}, expected {tuple(value.shape)}")
            first[name] = config.beta1 * state.first_moment[name] + (1.0 - config.beta1) * grad
            second[name] = config.beta2 * state.second_moment[name] + (1.0 - config.beta2) * grad * grad
            m_hat = first[name] / first_correction
            v_hat = second[name] / second_correction
            updated[name] = value - config.learning_rate * m_hat / (torch.sqrt(v_hat) + config.adam_eps)

    new_state = AdamState(step=step, first_moment=first, second_moment=second)
    if isinstance(params, InrParams):
        return new_state, params.replace(updated)
    return new_state, updated


def sample_patches(dims, patch_size, count: int, seed: int) -> np.ndarray:
    """Uniform patch origins (count, 3), reproducible per seed."""
    dims = np.asarray(dims, dtype=np.int64)
    size = np.broadcast_to(np.asarray(patch_size, dtype=np.int64), (3,))
    if np.any(size < 1):
        raise ArgumentError(f"patch size must be positive, got {patch_size}")
    if np.any(size > dims):
        raise ArgumentError(f"patch {tuple(size)} does not fit inside volume {tuple(dims)}")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.integers(0, dims - size + 1, size=(count, 3))


def build_batch(
    hf_coords: torch.Tensor,
    observed: torch.Tensor,
    labels: torch.Tensor,
    m: torch.Tensor,
    origins: np.ndarray,
    ulf_patch: int,
    df: int,
    floor: float = 0.0,
) -> TrainingBatch:
    """Slice matching HF coordinate patches and observed ULF patches at the given ULF origins."""
    coords, values, classes = [], [], []
    for x, y, z in origins.tolist():
        coords.append(
            hf_coords[x * df:(x + ulf_patch) * df, y * df:(y + ulf_patch) * df, z * df:(z + ulf_patch) * df]
        )
        values.append(observed[x:x + ulf_patch, y:y + ulf_patch, z:z + ulf_patch])
        classes.append(labels[x:x + ulf_patch, y:y + ulf_patch, z:z + ulf_patch])
    return TrainingBatch(
        coords=torch.stack(coords),
        observed=torch.stack(values),
        labels=torch.stack(classes),
        m=m,
        noise_floor=floor,
    )


def history_rows(history: List[LossBreakdown]) -> List[dict]:
    return [
        {"iteration": i + 1, "total": h.total, "mae": h.mae, "seg": h.seg, "tv": h.tv, "preact": h.preact_reg}
        for i, h in enumerate(history)
    ]


def train(
    observed_ulf: Volume, observed_seg: Segmentation, m: DegradationVector, config: TrainConfig = TrainConfig()
) -> Tuple[InrParams, List[LossBreakdown]]:
    """
    Fit the INR to one ULF observation through the differentiable forward model.

    Returns:
        Final parameters and the per-iteration loss history

    Raises:
        TrainingDivergedError: the loss became non-finite; carries the history so far
    """
    if observed_seg.dims != observed_ulf.dims:
        raise ArgumentError(f"segmentation dims {observed_seg.dims} do not match ULF dims {observed_ulf.dims}")
    torch.set_num_threads(settings.torch_threads)
    dtype = config.torch_dtype
    df = config.df
    ulf_patch = config.patch_size // df
    origins = sample_patches(observed_ulf.dims, ulf_patch, config.iterations * config.batch_patches, config.seed)

    hf_dims = tuple(n * df for n in observed_ulf.dims)
    hf_coords = lattice_coordinates(hf_dims, dtype)
    observed = torch.as_tensor(observed_ulf.data.astype(np.float64), dtype=dtype)
    labels = torch.as_tensor(observed_seg.label_map().astype(np.int64))
    m_tensor = torch.as_tensor(m.as_array(), dtype=dtype)
    floor = config.noise_floor if config.noise_floor is not None else noise_floor(observed_ulf, observed_seg)

    params = init_params(config.network, config.embedding, config.seed, dtype)
    state = init_adam_state(params)
    history: List[LossBreakdown] = []
    logger.info(
        "Training INR on ULF %s (HF lattice %s), %s iterations, %s patches of %s HF voxels, noise floor %.4f",
        observed_ulf.dims,
        hf_dims,
        config.iterations,
        config.batch_patches,
        config.patch_size,
        floor,
    )

    for iteration in range(config.iterations):
        start = iteration * config.batch_patches
        batch = build_batch(
            hf_coords, observed, labels, m_tensor, origins[start:start + config.batch_patches], ulf_patch, df, floor
        )
        try:
            breakdown, grads = value_and_gradients(params, batch, config)
        except NumericalError as error:
            logger.error("Training diverged at iteration %s", iteration + 1)
            raise TrainingDivergedError(
                f"training diverged at iteration {iteration + 1}", history, error.diagnostics
            ) from error
        history.append(breakdown)
        state, params = adam_step(state, params, grads, config)
        if (iteration + 1) % config.log_every == 0 or iteration == 0:
            logger.info(
                "Iteration %s: total=%.6f mae=%.6f seg=%.6f tv=%.6f preact=%.6f",
                iteration + 1,
                breakdown.total,
                breakdown.mae,
                breakdown.seg,
                breakdown.tv,
                breakdown.preact_reg,
            )

    if not params.all_finite():
        raise TrainingDivergedError("parameters became non-finite", history)
    return params, history
