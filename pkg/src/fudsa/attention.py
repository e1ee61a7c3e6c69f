"""Full-scale attention gate for one skip connection.

At decoder level l the gate consumes the encoder maps of every level up to l
plus the decoder volume from level l+1, and rescales the level-l encoder map
with a per-channel gate and a per-pixel gate, both in (0,1).

The channel branch sums the matched maps from levels 1..l-1 together with the
reduced decoder volume (the level-l matched map is deliberately excluded);
the spatial branch sums all of 1..l plus the reduced decoder volume.  The
asymmetry is intentional and covered by tests; ``include_sl_in_channel``
switches the channel branch to the symmetric form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .layers import Conv2d, MatchChain, MlpHead, Module, ModuleList, SdcBlock


@dataclass
class AttentionResult:
    gated: T.Tensor          # E-hat, (N, C, 2H, 2W)
    channel_gate: T.Tensor   # W_cha, (N, C, 1, 1)
    spatial_gate: T.Tensor   # Q, (N, 1, 2H, 2W)
    reduced_decoder: T.Tensor  # D, (N, C, H, W)
    matched: list            # S maps, each (N, C, H, W)


class AttentionGate(Module):
    """Gate for level ``level`` with ``channels[i]`` channels at encoder level i+1."""

    def __init__(self, level, channels, rng, reduction=4, dilations=(1, 2, 4),
                 upsample_mode="bilinear", spatial_only=False,
                 include_sl_in_channel=False, dtype=np.float32):
        super().__init__()
        if len(channels) != level:
            raise ShapeMismatch(f"need {level} channel counts, got {len(channels)}")
        self.level = level
        self.channels = list(channels)
        self.upsample_mode = upsample_mode
        self.spatial_only = spatial_only
        self.include_sl_in_channel = include_sl_in_channel
        c = channels[-1]
        # one match chain per encoder level i = 1..l; level i needs l-i+1 halvings
        self.match_chains = ModuleList(
            MatchChain(channels[i], c, level - i, rng, dtype=dtype)
            for i in range(level))
        self.reduce = Conv2d(2 * c, c, 1, rng, dtype=dtype)
        self.sdc = SdcBlock(c, rng, dilations=dilations, dtype=dtype)
        self.mlp = MlpHead(c, rng, reduction=reduction, dtype=dtype)
        self.spatial_conv3 = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
        self.spatial_conv1 = Conv2d(c, 1, 1, rng, dtype=dtype)

    def reduce_decoder(self, g_next):
        if g_next.shape[1] % 2:
            raise ShapeMismatch(f"decoder volume must have even channels, got {g_next.shape[1]}")
        if g_next.shape[1] != 2 * self.channels[-1]:
            raise ShapeMismatch(
                f"decoder volume has {g_next.shape[1]} channels, expected {2 * self.channels[-1]}")
        return self.reduce(g_next)

    def channel_gate(self, s_maps, d_next):
        """W_cha from the summed channel-branch inputs (SDC -> GAP -> MLP)."""
        g_add = d_next
        for s in s_maps:
            if s.shape != d_next.shape:
                raise ShapeMismatch(f"summand shape {s.shape} != {d_next.shape}")
            g_add = T.add(g_add, s)
        return self.mlp(T.global_avg_pool(self.sdc(g_add)))

    def spatial_gate(self, s_maps, d_next):
        """Q: conv3x3 -> conv1x1 -> sigmoid -> 2x upsample of the summed inputs."""
        acc = d_next
        for s in s_maps:
            if s.shape != d_next.shape:
                raise ShapeMismatch(f"summand shape {s.shape} != {d_next.shape}")
            acc = T.add(acc, s)
        gate = T.sigmoid(self.spatial_conv1(self.spatial_conv3(acc)))
        return T.upsample(gate, 2, mode=self.upsample_mode)

    def __call__(self, encoder_maps, decoder_map, bypass_gates=False) -> AttentionResult:
        if len(encoder_maps) != self.level:
            raise ShapeMismatch(
                f"level {self.level} gate needs {self.level} encoder maps, got {len(encoder_maps)}")
        e_l = encoder_maps[-1]
        d_next = self.reduce_decoder(decoder_map)
        s_maps = [chain(e) for chain, e in zip(self.match_chains, encoder_maps)]

        if bypass_gates:
            ones_c = T.constant((e_l.shape[0], e_l.shape[1], 1, 1), 1.0, dtype=e_l.dtype)
            ones_q = T.constant((e_l.shape[0], 1, e_l.shape[2], e_l.shape[3]), 1.0,
                                dtype=e_l.dtype)
            return AttentionResult(e_l, ones_c, ones_q, d_next, s_maps)

        if self.spatial_only:
            w_cha = T.constant((e_l.shape[0], e_l.shape[1], 1, 1), 1.0, dtype=e_l.dtype)
            e_tilde = e_l
        else:
            chan_inputs = s_maps if self.include_sl_in_channel else s_maps[:-1]
            w_cha = self.channel_gate(chan_inputs, d_next)
            e_tilde = T.mul(e_l, w_cha)

        q = self.spatial_gate(s_maps, d_next)
        e_hat = T.mul(e_tilde, q)
        return AttentionResult(e_hat, w_cha, q, d_next, s_maps)
