import dataclasses

import torch
import torch.nn as nn
import torch.nn.functional as F

from erdet.errors import ConfigurationError

# Output stride of each of the four backbone stages.
BACKBONE_STRIDES = (2, 4, 8, 16)
# Prior probability 0.01 for the classification bias, as in RetinaNet/GFL heads.
CLS_PRIOR_BIAS = -4.595


@dataclasses.dataclass(frozen=True, kw_only=True)
class HeadConfig:
    num_categories_total: int
    num_bins: int = 8
    pyramid_strides: tuple[int, ...] = (8, 16)
    channels: int = 64
    image_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "pyramid_strides", tuple(self.pyramid_strides))

    def validate(self):
        if self.num_categories_total < 1:
            raise ConfigurationError("num_categories_total must be positive")
        if self.num_bins < 2:
            raise ConfigurationError(f"num_bins must be >= 2, got {self.num_bins}")
        strides = tuple(self.pyramid_strides)
        if not strides or any(a >= b for a, b in zip(strides, strides[1:])):
            raise ConfigurationError(f"pyramid_strides must be strictly increasing, got {strides}")
        for s in strides:
            if s not in BACKBONE_STRIDES:
                raise ConfigurationError(f"stride {s} is not one of {BACKBONE_STRIDES}")
            if self.image_size % s:
                raise ConfigurationError(f"stride {s} does not divide image_size {self.image_size}")
        if self.image_size % BACKBONE_STRIDES[-1]:
            raise ConfigurationError(
                f"image_size must be a multiple of {BACKBONE_STRIDES[-1]}, got {self.image_size}"
            )
        if self.channels < 4 or self.channels % 4:
            raise ConfigurationError(
                f"channels must be a positive multiple of 4, got {self.channels}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pyramid_strides"] = list(self.pyramid_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(**d)


@dataclasses.dataclass(frozen=True)
class LevelResponse:
    """
    Head outputs of one pyramid level.

    cls_logits: (B, H, W, K) raw classification logits.
    reg_logits: (B, H, W, 4, n) raw bin logits per box edge, edges ordered (left, top, right,
                bottom), distances in stride units.
    features:   (B, C, H, W) pyramid feature map feeding the head, when recorded.
    """

    stride: int
    cls_logits: torch.Tensor
    reg_logits: torch.Tensor
    features: torch.Tensor | None = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.cls_logits.shape[1:3])

    @property
    def num_locations(self) -> int:
        h, w = self.grid_shape
        return h * w

    def flat_cls(self) -> torch.Tensor:
        b, h, w, k = self.cls_logits.shape
        return self.cls_logits.reshape(b, h * w, k)

    def flat_reg(self) -> torch.Tensor:
        b, h, w, e, n = self.reg_logits.shape
        return self.reg_logits.reshape(b, h * w, e, n)

    def centers(self) -> torch.Tensor:
        return grid_centers(*self.grid_shape, self.stride, self.cls_logits)


@dataclasses.dataclass(frozen=True)
class ResponseSet:
    levels: tuple[LevelResponse, ...]
    image_size: int

    @property
    def batch_size(self) -> int:
        return self.levels[0].cls_logits.shape[0]

    @property
    def num_categories(self) -> int:
        return self.levels[0].cls_logits.shape[-1]

    @property
    def num_bins(self) -> int:
        return self.levels[0].reg_logits.shape[-1]

    @property
    def num_locations(self) -> int:
        return sum(lvl.num_locations for lvl in self.levels)

    def detach(self) -> "ResponseSet":
        return ResponseSet(
            levels=tuple(
                LevelResponse(
                    lvl.stride,
                    lvl.cls_logits.detach(),
                    lvl.reg_logits.detach(),
                    None if lvl.features is None else lvl.features.detach(),
                )
                for lvl in self.levels
            ),
            image_size=self.image_size,
        )

    def image(self, index: int) -> "ResponseSet":
        """The responses of one image of the batch, keeping a batch dimension of 1."""
        sl = slice(index, index + 1)
        return ResponseSet(
            levels=tuple(
                LevelResponse(
                    lvl.stride,
                    lvl.cls_logits[sl],
                    lvl.reg_logits[sl],
                    None if lvl.features is None else lvl.features[sl],
                )
                for lvl in self.levels
            ),
            image_size=self.image_size,
        )

    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(lvl.cls_logits).all() and torch.isfinite(lvl.reg_logits).all())
            for lvl in self.levels
        )


def grid_centers(h: int, w: int, stride: int, like: torch.Tensor) -> torch.Tensor:
    """(h*w, 2) pixel centers (x, y) of a level's locations in row-major order."""
    ys = (torch.arange(h, dtype=like.dtype, device=like.device) + 0.5) * stride
    xs = (torch.arange(w, dtype=like.dtype, device=like.device) + 0.5) * stride
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def _num_groups(channels: int) -> int:
    return 4 if channels % 4 == 0 else 1


class ConvNormAct(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
            nn.GroupNorm(_num_groups(out_channels), out_channels),
            nn.ReLU(inplace=True),
        )


class TinyDetector(nn.Module):
    """
    Four stride-2 conv stages, a top-down pyramid over the stages named by
    HeadConfig.pyramid_strides and a GFL-style head shared across levels. The classification
    head carries a channel for every category of the whole protocol from the start.
    """

    def __init__(self, config: HeadConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channels
        widths = (max(c // 4, 4), max(c // 2, 4), c, c)

        stages = []
        in_ch = 3
        for width in widths:
            stages.append(
                nn.Sequential(ConvNormAct(in_ch, width, stride=2), ConvNormAct(width, width))
            )
            in_ch = width
        self.stages = nn.ModuleList(stages)

        self.level_stages = [BACKBONE_STRIDES.index(s) for s in config.pyramid_strides]
        self.laterals = nn.ModuleList([nn.Conv2d(widths[i], c, 1) for i in self.level_stages])
        self.smooth = nn.ModuleList([nn.Conv2d(c, c, 3, padding=1) for _ in self.level_stages])

        self.cls_tower = ConvNormAct(c, c)
        self.reg_tower = ConvNormAct(c, c)
        self.cls_out = nn.Conv2d(c, config.num_categories_total, 3, padding=1)
        self.reg_out = nn.Conv2d(c, 4 * config.num_bins, 3, padding=1)
        self.init_weights()

    def init_weights(self):
        for m in (self.cls_tower[0], self.reg_tower[0], self.cls_out, self.reg_out):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_out.bias, CLS_PRIOR_BIAS)

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = images
        stage_outputs = []
        for stage in self.stages:
            x = stage(x)
            stage_outputs.append(x)

        laterals = [lat(stage_outputs[i]) for lat, i in zip(self.laterals, self.level_stages)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest"
            )
        return [smooth(p) for smooth, p in zip(self.smooth, laterals)]

    def forward(self, images: torch.Tensor) -> ResponseSet:
        n = self.config.num_bins
        levels = []
        for stride, feat in zip(self.config.pyramid_strides, self.pyramid(images)):
            cls = self.cls_out(self.cls_tower(feat)).permute(0, 2, 3, 1)
            reg = self.reg_out(self.reg_tower(feat)).permute(0, 2, 3, 1)
            b, h, w, _ = reg.shape
            levels.append(
                LevelResponse(stride, cls.contiguous(), reg.reshape(b, h, w, 4, n), features=feat)
            )
        return ResponseSet(levels=tuple(levels), image_size=self.config.image_size)


def forward(model: TinyDetector, images: torch.Tensor) -> ResponseSet:
    """Runs the detector on a (3, S, S) image or a (B, 3, S, S) batch."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    size = model.config.image_size
    if images.dim() != 4 or tuple(images.shape[1:]) != (3, size, size):
        raise ConfigurationError(
            f"Expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}"
        )
    return model(images)


def images_to_tensor(images) -> torch.Tensor:
    """Stacks HxWx3 uint8 arrays into a float (B, 3, H, W) batch scaled to [0, 1]."""
    batch = torch.stack([torch.as_tensor(img).permute(2, 0, 1) for img in images])
    return batch.to(torch.float32) / 255.0
