"""Bottleneck adapters: the only trainable pieces attached to frozen encoders.

Each adapter is a two-layer MLP with a residual connection. The second layer
is zero-initialized so an adapter is an exact identity at step 0 and the
frozen module's pre-trained behavior is preserved until training moves it.
"""

from __future__ import annotations

import torch
from torch import nn

ADAPTER_SITES = ("visual_attention_out", "pixel_decoder_out", "masked_attention_out")


class BottleneckAdapter(nn.Module):
    def __init__(self, width: int, ratio: float = 0.25):
        super().__init__()
        hidden = max(1, int(width * ratio))
        if hidden >= width:
            hidden = max(1, width // 2)
        self.down = nn.Linear(width, hidden)
        self.up = nn.Linear(hidden, width)
        self.act = nn.GELU()
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # operates on the channel/feature dimension, which must come last
        return x + self.up(self.act(self.down(x)))


class AdapterSet(nn.Module):
    """Adapters keyed by insertion site; sites with several insertion points
    (one per backbone level, one per decoder layer) hold a ModuleList."""

    def __init__(self, width: int, ratio: float, counts: dict[str, int]):
        super().__init__()
        unknown = set(counts) - set(ADAPTER_SITES)
        if unknown:
            raise ValueError(f"unknown adapter sites: {sorted(unknown)}")
        self.sites = nn.ModuleDict(
            {
                site: nn.ModuleList(
                    BottleneckAdapter(width, ratio) for _ in range(n)
                )
                for site, n in counts.items()
            }
        )

    def apply(self, site: str, index: int, x: torch.Tensor) -> torch.Tensor:
        if site not in self.sites:
            return x
        return self.sites[site][index](x)

    def site_parameters(self, site: str):
        if site not in self.sites:
            return []
        return list(self.sites[site].parameters())
