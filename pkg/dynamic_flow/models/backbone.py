"""Miniature recurrent flow backbone: encoder, correlation lookup and GRU update.

The structure follows RAFT at desk scale: a shared feature encoder builds an
all-pairs correlation volume, a context encoder supplies the initial hidden
state φ_0 and a static context, and every update looks up the volume around
the current flow, encodes motion, advances a convolutional GRU and adds a
residual flow delta.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..config import ConfigurationError, ModelConfig
from ..flops import LayerSpec
from ..tensorcore import ConvLayer, Module, Tensor, concat, concat_channels, instance_norm, relu, sigmoid, tanh
from .correlation import CorrVolume, correlation_volume, lookup_corr

logger = logging.getLogger(__name__)

# per-element cost of the standardisation
NORM_FLOPS = 6


@dataclass
class FeatureMaps:
    """φ_0 (GRU hidden state) and the static context features, both ``[N,Cf,h,w]``."""

    phi: Tensor
    context: Tensor


@dataclass
class Encoding:
    """Everything the update operator reads but never changes."""

    features: FeatureMaps
    corr: CorrVolume


def _pointwise_spec(channels: int, height: int, width: int, label: str) -> LayerSpec:
    return LayerSpec(kind="pointwise", elements=channels * height * width, label=label)


class ConvGRU(Module):
    def __init__(self, hidden: int, inputs: int, rng: np.random.Generator) -> None:
        self.convz = ConvLayer(hidden + inputs, hidden, 3, rng)
        self.convr = ConvLayer(hidden + inputs, hidden, 3, rng)
        self.convq = ConvLayer(hidden + inputs, hidden, 3, rng)

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        hx = concat_channels([h, x])
        z = sigmoid(self.convz(hx))
        r = sigmoid(self.convr(hx))
        q = tanh(self.convq(concat_channels([r * h, x])))
        return (1.0 - z) * h + z * q

    def specs(self, height: int, width: int) -> List[LayerSpec]:
        hidden = self.convz.out_channels
        elements = hidden * height * width
        return [
            self.convz.spec(height, width),
            _pointwise_spec(hidden, height, width, "gru.z"),
            self.convr.spec(height, width),
            _pointwise_spec(hidden, height, width, "gru.r"),
            LayerSpec(kind="elementwise", elements=elements, label="gru.r*h"),
            self.convq.spec(height, width),
            _pointwise_spec(hidden, height, width, "gru.q"),
            LayerSpec(kind="elementwise", elements=elements, per_element=4, label="gru.blend"),
        ]


class UpdateBlock(Module):
    """Motion encoder, GRU cell and flow head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        window = (2 * config.corr_radius + 1) ** 2
        corr_mid, corr_out = config.corr_channels
        flow_mid, flow_out = config.flow_channels
        cf = config.feature_channels
        self.radius = config.corr_radius
        self.convc1 = ConvLayer(window, corr_mid, 1, rng)
        self.convc2 = ConvLayer(corr_mid, corr_out, 3, rng)
        self.convf1 = ConvLayer(2, flow_mid, 7, rng)
        self.convf2 = ConvLayer(flow_mid, flow_out, 3, rng)
        self.conv = ConvLayer(corr_out + flow_out, config.motion_channels - 2, 3, rng)
        self.gru = ConvGRU(cf, config.motion_channels + cf, rng)
        self.head1 = ConvLayer(cf, config.head_channels, 3, rng)
        self.head2 = ConvLayer(config.head_channels, 2, 3, rng)

    def motion_features(self, corr_window: Tensor, flow: Tensor) -> Tensor:
        cor = relu(self.convc2(relu(self.convc1(corr_window))))
        flo = relu(self.convf2(relu(self.convf1(flow))))
        out = relu(self.conv(concat_channels([cor, flo])))
        return concat_channels([out, flow])

    def __call__(self, phi: Tensor, context: Tensor, corr: CorrVolume, flow: Tensor) -> Tuple[Tensor, Tensor]:
        motion = self.motion_features(lookup_corr(corr, flow, self.radius), flow)
        phi = self.gru(phi, concat_channels([motion, context]))
        delta = self.head2(relu(self.head1(phi)))
        return phi, flow + delta

    def specs(self, height: int, width: int) -> List[LayerSpec]:
        window = (2 * self.radius + 1) ** 2
        specs = [LayerSpec(kind="lookup", elements=window * height * width, label="lookup")]
        for conv in (self.convc1, self.convc2, self.convf1, self.convf2, self.conv):
            specs.append(conv.spec(height, width))
            specs.append(_pointwise_spec(conv.out_channels, height, width, "motion.relu"))
        specs.extend(self.gru.specs(height, width))
        specs.append(self.head1.spec(height, width))
        specs.append(_pointwise_spec(self.head1.out_channels, height, width, "head.relu"))
        specs.append(self.head2.spec(height, width))
        specs.append(LayerSpec(kind="elementwise", elements=2 * height * width, label="flow+delta"))
        return specs


class FlowBackbone(Module):
    """Encoder plus update operator."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        ci, s, mid, cf = config.image_channels, config.downscale, config.encoder_channels, config.feature_channels
        self.config = config
        self.fnet1 = ConvLayer(ci, mid, 3, rng, stride=s)
        self.fnet2 = ConvLayer(mid, cf, 3, rng)
        self.cnet1 = ConvLayer(2 * ci, mid, 3, rng, stride=s)
        self.cnet2 = ConvLayer(mid, 2 * cf, 3, rng)
        self.update_block = UpdateBlock(config, rng)

    def feature_grid(self, height: int, width: int) -> Tuple[int, int]:
        s = self.config.downscale
        if height % s or width % s:
            raise ConfigurationError(f"image size {height}x{width} is not divisible by the downscale factor {s}")
        return height // s, width // s

    def features(self, images: Tensor) -> Tensor:
        """Matching features, standardised per channel over the feature grid."""

        return instance_norm(self.fnet2(relu(self.fnet1(images))))

    def encode(self, image_pair: Tensor) -> Encoding:
        """φ_0, C = Encoder(I_1, I_2) for a ``[N, 2·Ci, H, W]`` pair."""

        n, channels, height, width = image_pair.shape
        ci, cf = self.config.image_channels, self.config.feature_channels
        if channels != 2 * ci:
            raise ConfigurationError(f"expected {2 * ci} stacked image channels, got {channels}")
        self.feature_grid(height, width)

        both = concat([image_pair[:, :ci], image_pair[:, ci:]], axis=0)
        fmaps = self.features(both)
        corr = correlation_volume(fmaps[:n], fmaps[n:])

        context = self.cnet2(relu(self.cnet1(image_pair)))
        features = FeatureMaps(phi=tanh(context[:, :cf]), context=relu(context[:, cf:]))
        return Encoding(features=features, corr=corr)

    def update(self, phi_hat: Tensor, flow_hat: Tensor, encoding: Encoding) -> Tuple[Tensor, Tensor]:
        """φ_{t+1}, f_{t+1} = Update(φ̂_t, f̂_t, C)."""

        return self.update_block(phi_hat, encoding.features.context, encoding.corr, flow_hat)

    def encoder_specs(self, height: int, width: int) -> List[LayerSpec]:
        fh, fw = self.feature_grid(height, width)
        cf = self.config.feature_channels
        specs: List[LayerSpec] = []
        for _ in range(2):
            specs.append(self.fnet1.spec(height, width))
            specs.append(_pointwise_spec(self.fnet1.out_channels, fh, fw, "fnet.relu"))
            specs.append(self.fnet2.spec(fh, fw))
            specs.append(LayerSpec(kind="elementwise", elements=cf * fh * fw, per_element=NORM_FLOPS, label="fnet.norm"))
        specs.append(self.cnet1.spec(height, width))
        specs.append(_pointwise_spec(self.cnet1.out_channels, fh, fw, "cnet.relu"))
        specs.append(self.cnet2.spec(fh, fw))
        specs.append(_pointwise_spec(cf, fh, fw, "phi.tanh"))
        specs.append(_pointwise_spec(cf, fh, fw, "context.relu"))
        pixels = fh * fw
        specs.append(LayerSpec(kind="matmul", m=pixels, k=cf, n=pixels, label="corr"))
        specs.append(LayerSpec(kind="elementwise", elements=pixels * pixels, label="corr.scale"))
        return specs

    def update_specs(self, height: int, width: int) -> List[LayerSpec]:
        return self.update_block.specs(*self.feature_grid(height, width))


__all__ = ["ConvGRU", "Encoding", "FeatureMaps", "FlowBackbone", "UpdateBlock"]
