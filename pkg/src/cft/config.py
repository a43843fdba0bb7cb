"""Model configuration: grid sizes, dimensions and the adaptive-inference knobs."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Fixes every shape in the model.

    alpha is the fraction of coarse patches promoted to fine splitting, beta the
    decay of the class-attention moving average, ema_start the 1-based encoder
    index where that average begins.
    """

    coarse_grid: int = 7
    patch_px: int = 16
    embed_dim: int = 384
    depth: int = 12
    heads: int = 6
    num_classes: int = 1000
    alpha: float = 0.5
    beta: float = 0.99
    ema_start: int = 4
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        for name in ("coarse_grid", "patch_px", "embed_dim", "depth", "heads",
                     "num_classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim must be divisible by heads ({self.embed_dim} % {self.heads} != 0)"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if not 1 <= self.ema_start <= self.depth:
            raise ConfigError(
                f"ema_start must be in [1, depth={self.depth}], got {self.ema_start}"
            )

    @property
    def fine_grid(self) -> int:
        """Fine patches per side; always twice the coarse grid."""
        return 2 * self.coarse_grid

    @property
    def n_coarse(self) -> int:
        return self.coarse_grid * self.coarse_grid

    @property
    def n_fine_full(self) -> int:
        return self.fine_grid * self.fine_grid

    @property
    def image_px(self) -> int:
        """Square input side in pixels."""
        return self.fine_grid * self.patch_px

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    @property
    def patch_inputs(self) -> int:
        """Flattened length of one fine patch: 3 channels * patch_px^2."""
        return 3 * self.patch_px * self.patch_px
