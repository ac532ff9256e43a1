"""Latent geometry, token accounting and patch (un)grouping."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from lindit.errors import GeometryError
from lindit.numerics import Tensor, reshape, transpose


@dataclass(frozen=True)
class LatentGeometry:
    """Image extents H x W, autoencoder downsample F, latent channels C, patch size P."""

    H: int
    W: int
    F: int = 1
    C: int = 1
    P: int = 1

    def __post_init__(self):
        for name in ("H", "W", "F", "C", "P"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be positive, got {getattr(self, name)}")
        step = self.F * self.P
        if self.H % step or self.W % step:
            raise GeometryError(f"H={self.H}, W={self.W} not divisible by F*P={step}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.H // self.F, self.W // self.F

    @property
    def grid(self) -> tuple[int, int]:
        step = self.F * self.P
        return self.H // step, self.W // step

    @property
    def token_dim(self) -> int:
        return self.C * self.P * self.P

    def to_dict(self) -> dict:
        return asdict(self)


def token_count(g: LatentGeometry) -> int:
    h, w = g.grid
    return h * w


def patchify(latent: Tensor, P: int) -> Tensor:
    """``[C, h, w]`` -> ``[N, C*P*P]`` (or batched ``[B, C, h, w]`` -> ``[B, N, C*P*P]``).

    Tokens run row-major over the patch grid; within a token the order is
    (channel, patch row, patch column).
    """
    batched = latent.ndim == 4
    if latent.ndim not in (3, 4):
        raise GeometryError(f"patchify expects [C,h,w] or [B,C,h,w], got {latent.shape}")
    x = latent if batched else reshape(latent, (1,) + latent.shape)
    B, C, h, w = x.shape
    if h % P or w % P:
        raise GeometryError(f"latent {h}x{w} not divisible by patch size {P}")
    hp, wp = h // P, w // P
    x = reshape(x, (B, C, hp, P, wp, P))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (B, hp * wp, C * P * P))
    return x if batched else reshape(x, x.shape[1:])


def unpatchify(tokens: Tensor, P: int, C: int, grid: tuple[int, int]) -> Tensor:
    batched = tokens.ndim == 3
    x = tokens if batched else reshape(tokens, (1,) + tokens.shape)
    B, N, D = x.shape
    hp, wp = grid
    if N != hp * wp or D != C * P * P:
        raise GeometryError(f"tokens {tokens.shape} do not match grid {grid}, C={C}, P={P}")
    x = reshape(x, (B, hp, wp, C, P, P))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    x = reshape(x, (B, C, hp * P, wp * P))
    return x if batched else reshape(x, x.shape[1:])
