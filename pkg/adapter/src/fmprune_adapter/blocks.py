"""Building blocks the exporter knows how to describe as a graph."""

import torch
from torch import nn


class PreActBottleneck(nn.Module):
    """Residual bottleneck: 1x1 -> 3x3 -> 1x1 convolutions plus identity.

    The sequential path's output is added channel-by-channel to the input,
    so the block's input width and its last convolution's width must stay
    aligned when pruning; the exporter records that as a post-addition
    feature group.
    """

    def __init__(self, channels: int, mid: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, mid, kernel_size=1, bias=False)
        self.conv2 = nn.Conv2d(mid, mid, kernel_size=3, padding=1, bias=False)
        self.conv3 = nn.Conv2d(mid, channels, kernel_size=1, bias=False)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        return x + self.conv3(h)
