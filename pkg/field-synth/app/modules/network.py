"""Implicit neural representation: Fourier features -> Gabor MLP -> (intensity, tissue probabilities)."""
import math
from typing import Optional, Tuple

import numpy as np
import torch

from app.modules.constants import NUM_CLASSES
from app.modules.exceptions import ArgumentError
from app.modules.models import EmbeddingConfig, InrParams, NetworkConfig, NetworkOutput, Segmentation, Volume
from config import settings
from logger import logger


def embedding_frequencies(config: EmbeddingConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """f_k = base_scale * 2^k (log-linear) or f_k ~ N(0, base_scale^2) drawn from `config.seed`."""
    if config.mode == "log_linear":
        values = config.base_scale * 2.0 ** np.arange(config.num_frequencies, dtype=np.float64)
    else:
        rng = np.random.Generator(np.random.Philox(config.seed))
        values = rng.normal(0.0, config.base_scale, config.num_frequencies)
    return torch.as_tensor(values, dtype=dtype)


def fourier_embed(coords, config: EmbeddingConfig, frequencies: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    [w, sin(2 pi f_1 w), cos(2 pi f_1 w), ..., sin(2 pi f_L w), cos(2 pi f_L w)] per axis.

    Args:
        coords: (..., 3) coordinates inside [-1, 1]^3
        config: embedding configuration
        frequencies: precomputed frequencies (defaults to those of `config`)

    Returns:
        (..., 3 + 6L) features
    """
    coords = torch.as_tensor(coords)
    if not torch.is_floating_point(coords):
        coords = coords.to(torch.float32)
    if coords.shape[-1] != 3:
        raise ArgumentError(f"coordinates must have 3 components, got shape {tuple(coords.shape)}")
    if coords.numel() and float(coords.detach().abs().max()) > 1.0 + 1e-6:
        raise ArgumentError("coordinates must lie inside [-1, 1]^3")
    if frequencies is None:
        frequencies = embedding_frequencies(config, coords.dtype)
    features = [coords]
    for frequency in frequencies.to(coords.dtype):
        phase = 2.0 * math.pi * frequency * coords
        features.append(torch.sin(phase))
        features.append(torch.cos(phase))
    return torch.cat(features, dim=-1)


def gabor_activation(x, omega0: float, s0: float):
    """Real Gabor wavelet: cos(omega0 x) * exp(-(s0 x)^2)."""
    if isinstance(x, torch.Tensor):
        return torch.cos(omega0 * x) * torch.exp(-((s0 * x) ** 2))
    return math.cos(omega0 * x) * math.exp(-((s0 * x) ** 2))


def init_params(
    network: NetworkConfig = NetworkConfig(),
    embedding: EmbeddingConfig = EmbeddingConfig(),
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> InrParams:
    """
    Uniform initialization: first layer in +-sqrt(6/fan_in)/omega0, later layers in
    +-sqrt(6/fan_in) * hidden_weight_scale; biases zero except the intensity output.
    """
    generator = torch.Generator().manual_seed(seed)
    widths = [embedding.width] + [network.hidden_features] * (network.hidden_layers + 1) + [network.out_features]
    tensors = {}
    for index in range(len(widths) - 1):
        fan_in, fan_out = widths[index], widths[index + 1]
        bound = math.sqrt(6.0 / fan_in)
        bound *= 1.0 / network.omega0 if index == 0 else network.effective_hidden_scale
        weight = (torch.rand((fan_out, fan_in), generator=generator, dtype=torch.float64) * 2.0 - 1.0) * bound
        bias = torch.zeros(fan_out, dtype=torch.float64)
        tensors[f"layers.{index}.weight"] = weight.to(dtype)
        tensors[f"layers.{index}.bias"] = bias.to(dtype)
    tensors[f"layers.{len(widths) - 2}.bias"][0] = network.intensity_bias_init
    return InrParams(
        tensors=tensors,
        frequencies=embedding_frequencies(embedding, dtype),
        network=network,
        embedding=embedding,
    )


def forward(params: InrParams, embedded: torch.Tensor) -> NetworkOutput:
    """Affine layers with Gabor activations on every layer but the last; ReLU / softmax heads."""
    weight, _ = params.layer(0)
    if embedded.shape[-1] != weight.shape[1]:
        raise ArgumentError(f"feature width {embedded.shape[-1]} does not match input layer width {weight.shape[1]}")

    hidden = embedded
    last = params.num_layers - 1
    for index in range(last):
        weight, bias = params.layer(index)
        hidden = gabor_activation(hidden @ weight.T + bias, params.network.omega0, params.network.s0)
    weight, bias = params.layer(last)
    pre_activations = hidden @ weight.T + bias

    return NetworkOutput(
        intensity=torch.relu(pre_activations[..., 0]),
        seg_probs=torch.softmax(pre_activations[..., 1:], dim=-1),
        pre_activations=pre_activations,
    )


def reconstruct(output: NetworkOutput) -> torch.Tensor:
    """X_w = X * (p_WM + p_GM + p_CSF) = X * (1 - p_BG)."""
    return output.intensity * output.seg_probs[..., 1:].sum(dim=-1)


def lattice_coordinates(dims, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Voxel centres mapped into [-1, 1]: index i of an N-voxel axis -> (2i + 1 - N) / N.

    The integer numerator keeps shared continuous positions bit-identical across resolutions.
    """
    axes = []
    for count in dims:
        index = np.arange(count, dtype=np.float64)
        axes.append(torch.as_tensor((2.0 * index + 1.0 - count) / count, dtype=dtype))
    grid = torch.meshgrid(*axes, indexing="ij")
    return torch.stack(grid, dim=-1)


def predict_grid(
    params: InrParams,
    dims,
    embed: Optional[EmbeddingConfig] = None,
    spacing=(1.0, 1.0, 1.0),
    affine=None,
    chunk_size: Optional[int] = None,
) -> Tuple[Volume, Segmentation]:
    """
    Evaluate the INR on the voxel-centre lattice of `dims`.

    Returns:
        The reconstructed intensity volume and the soft segmentation
    """
    if any(int(n) < 1 for n in dims):
        raise ArgumentError(f"dims must be positive, got {tuple(dims)}")
    dims = tuple(int(n) for n in dims)
    embed = embed or params.embedding
    frequencies = params.frequencies if embed == params.embedding else embedding_frequencies(embed, params.dtype)
    chunk_size = chunk_size or settings.predict_chunk_size

    coords = lattice_coordinates(dims, params.dtype).reshape(-1, 3)
    intensities, probabilities = [], []
    with torch.no_grad():
        for start in range(0, coords.shape[0], chunk_size):
            output = forward(params, fourier_embed(coords[start:start + chunk_size], embed, frequencies))
            intensities.append(reconstruct(output))
            probabilities.append(output.seg_probs)

    intensity = torch.cat(intensities).reshape(dims).to(torch.float64).numpy()
    probs = torch.cat(probabilities).reshape(*dims, NUM_CLASSES).to(torch.float64)
    probs = (probs / probs.sum(dim=-1, keepdim=True)).numpy()
    logger.info("Predicted INR grid with dims %s", dims)
    return Volume(data=intensity, spacing=spacing, affine=affine), Segmentation(probs=probs)
