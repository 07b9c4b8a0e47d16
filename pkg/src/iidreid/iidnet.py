"""Encoder / dual-head / generator network with original and generated flows.

Images enter as float tensors ``(N, 3, H, W)`` holding pixel values in
[0, 255]; the generator emits the same range.  Normalization to standardized
inputs happens inside :meth:`IIDNet.encode`.
"""

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import InvalidParameterError

PARAM_GROUPS = ("E", "P", "I", "G")


@dataclass
class ModelConfig:
    image_size: tuple = (128, 64)
    d_z: int = 2048
    d_f: int | None = None
    n_identities: int = 751
    n_scales: int = 9
    encoder_channels: tuple = (64, 128, 256)
    generator_channels: tuple = (512, 256, 128, 64, 32)
    dropout: float = 0.5

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.encoder_channels = tuple(self.encoder_channels)
        self.generator_channels = tuple(self.generator_channels)
        if self.d_f is None:
            self.d_f = self.d_z
        h, w = self.image_size
        if h % 32 or w % 32:
            raise InvalidParameterError("image height and width must be multiples of 32")
        if len(self.generator_channels) != 5:
            raise InvalidParameterError("generator_channels needs 5 entries (six decode blocks)")

    @classmethod
    def toy(cls, n_identities, **kwargs):
        """Small network for 64x32 images.

        Dropout is off in the generator: at this width and budget, dropout 0.5
        in every decode block leaves reconstructions too blurred to keep the
        identity.
        """
        kwargs.setdefault("image_size", (64, 32))
        kwargs.setdefault("d_z", 128)
        kwargs.setdefault("encoder_channels", (32, 64, 96))
        kwargs.setdefault("generator_channels", (128, 96, 64, 32, 16))
        kwargs.setdefault("dropout", 0.0)
        return cls(n_identities=n_identities, **kwargs)

    def to_dict(self):
        return asdict(self)


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Four strided conv blocks followed by global average pooling."""

    def __init__(self, channels, d_z):
        super().__init__()
        widths = (3, *channels, d_z)
        self.blocks = nn.Sequential(
            *(_conv_block(a, b) for a, b in zip(widths[:-1], widths[1:]))
        )

    def forward(self, x):
        return self.blocks(x).mean(dim=(2, 3))


class DecodeBlock(nn.Sequential):
    def __init__(self, c_in, c_out, kernel, stride, padding, dropout, last=False):
        layers = [nn.ReLU(), nn.ConvTranspose2d(c_in, c_out, kernel, stride, padding)]
        if not last:
            layers += [nn.BatchNorm2d(c_out), nn.Dropout(dropout)]
        super().__init__(*layers)


class Generator(nn.Module):
    """Six decode blocks from a ``1 x 1`` code to an ``H x W x 3`` image.

    The first block expands to ``(H/32, W/32)``; each later block doubles the
    resolution.  The last block has no normalization or dropout and feeds a
    sigmoid scaled to [0, 255].
    """

    def __init__(self, d_in, image_size, channels, dropout):
        super().__init__()
        h, w = image_size
        c = (d_in, *channels)
        blocks = [DecodeBlock(c[0], c[1], (h // 32, w // 32), 1, 0, dropout)]
        for a, b in zip(c[1:-1], c[2:]):
            blocks.append(DecodeBlock(a, b, 4, 2, 1, dropout))
        blocks.append(DecodeBlock(c[-1], 3, 4, 2, 1, dropout, last=True))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, code):
        return 255.0 * torch.sigmoid(self.blocks(code[:, :, None, None]))


def he_init(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class IIDNet(nn.Module):
    """Illumination-identity disentangling network.

    Parameter groups: ``E`` (encoder), ``P`` (person head and identity
    classifier), ``I`` (illumination head and regressor), ``G`` (generator).
    """

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        gen = torch.random.fork_rng()
        with gen:
            torch.manual_seed(seed)
            self.encoder = Encoder(config.encoder_channels, config.d_z)
            self.head_p = nn.Linear(config.d_z, config.d_f)
            self.head_i = nn.Linear(config.d_z, config.d_f)
            self.classifier_p = nn.Linear(config.d_f, config.n_identities)
            self.regressor_i = nn.Linear(config.d_f, 1)
            self.generator = Generator(
                2 * config.d_f, config.image_size, config.generator_channels, config.dropout
            )
            he_init(self)
        self.register_buffer("pixel_mean", torch.full((3,), 0.5))
        self.register_buffer("pixel_std", torch.full((3,), 0.25))

    # -- parameter bookkeeping -------------------------------------------------

    def group_modules(self):
        return {
            "E": [self.encoder],
            "P": [self.head_p, self.classifier_p],
            "I": [self.head_i, self.regressor_i],
            "G": [self.generator],
        }

    def param_groups(self):
        return {
            name: [p for m in mods for p in m.parameters()]
            for name, mods in self.group_modules().items()
        }

    def set_normalization(self, mean, std):
        """Per-channel statistics of unit-scaled training pixels."""
        self.pixel_mean.copy_(torch.as_tensor(mean, dtype=self.pixel_mean.dtype))
        self.pixel_std.copy_(torch.as_tensor(std, dtype=self.pixel_std.dtype))

    # -- operations ------------------------------------------------------------

    def _check_images(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.config.image_size:
            raise InvalidParameterError(
                f"expected images of shape (N, 3, {self.config.image_size[0]}, "
                f"{self.config.image_size[1]}), got {tuple(x.shape)}"
            )

    def encode(self, x):
        self._check_images(x)
        x = (x / 255.0 - self.pixel_mean[:, None, None]) / self.pixel_std[:, None, None]
        return self.encoder(x)

    def embed(self, z):
        if z.shape[-1] != self.config.d_z:
            raise InvalidParameterError(f"latent must have dimension {self.config.d_z}")
        return self.head_p(z), self.head_i(z)

    def generate(self, f_p, f_i):
        d = self.config.d_f
        if f_p.shape[-1] != d or f_i.shape[-1] != d:
            raise InvalidParameterError(f"features must have dimension {d}")
        return self.generator(torch.cat([f_p, f_i], dim=1))

    def identity_logits(self, f_p):
        return self.classifier_p(f_p)

    def classify_identity(self, f_p):
        return torch.softmax(self.identity_logits(f_p), dim=-1)

    def predict_illumination(self, f_i):
        return self.regressor_i(f_i).squeeze(-1)

    def forward_original(self, x):
        z = self.encode(x)
        f_p, f_i = self.embed(z)
        return z, f_p, f_i, self.generate(f_p, f_i)

    def forward_generated(self, x_hat):
        """Re-encode a generated image with the shared encoder and heads."""
        z_hat = self.encode(x_hat)
        f_p_hat, f_i_hat = self.embed(z_hat)
        return z_hat, f_p_hat, f_i_hat

    def forward(self, x):
        return self.forward_original(x)


def images_to_tensor(images, dtype=torch.float32):
    """``(N, H, W, 3)`` uint8 array -> ``(N, 3, H, W)`` float tensor in [0, 255]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(x):
    arr = x.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def channel_stats(images):
    """Mean and std per channel of unit-scaled pixels, for input standardization."""
    arr = np.asarray(images, dtype=np.float64) / 255.0
    return arr.mean(axis=(0, 1, 2)), arr.std(axis=(0, 1, 2)) + 1e-6
