"""The residual HT-IHT block, its Hough-domain filtering variants, and the small models built from it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from htprior import hough
from htprior.errors import ConfigurationError
from htprior.tensor import (
    DEFAULT_DTYPE,
    Parameter,
    Tensor,
    bce_loss,
    concat_channels,
    conv1d_rho,
    conv2d,
    l2_loss,
    mul,
    no_grad,
    relu,
    sigmoid,
)

VARIANTS = ("noconv", "plain1d", "laplacian1d", "full", "spatial3x3")


@dataclass(frozen=True)
class BlockConfig:
    """Which Hough-domain filter chain the block uses, and its channel counts.

    ``variant`` is one of :data:`VARIANTS`, in the order of the ablation
    (0 = no convolution ... 4 = three 3x3 convolutions).
    """

    variant: str = "full"
    support: int = 9
    channels_in: int = 4
    channels_mid: int = 4
    channels_out: int = 4
    sigma_range: tuple[float, float] = (0.5, 2.5)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown block variant {self.variant!r}; expected one of {VARIANTS}")
        if self.support < 1 or self.support % 2 == 0:
            raise ConfigurationError(f"filter support must be odd, got {self.support}")
        if self.variant == "full" and self.channels_mid > self.channels_in:
            raise ConfigurationError("full variant reduces channels: channels_mid must be <= channels_in")
        if self.sigma_range[0] <= 0 or self.sigma_range[1] < self.sigma_range[0]:
            raise ConfigurationError(f"invalid sigma_range {self.sigma_range}")

    @classmethod
    def from_index(cls, index: int, **kwargs) -> "BlockConfig":
        return cls(variant=VARIANTS[index], **kwargs)

    @property
    def branch_channels(self) -> int:
        if self.variant in ("full", "spatial3x3"):
            return self.channels_out
        return self.channels_in


# ---------------------------------------------------------------------------
# Laplacian initialization

@dataclass(frozen=True)
class LaplacianInit:
    sigma: float
    support: int
    taps: np.ndarray


def laplacian_taps(sigma: float, support: int) -> np.ndarray:
    """Sign-inverted second derivative of a Gaussian, truncated to ``support`` taps.

    The truncated filter is re-centered to zero sum and scaled to unit L1 norm.
    """
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    if support < 1 or support % 2 == 0:
        raise ConfigurationError(f"support must be odd, got {support}")
    half = (support - 1) // 2
    rho = np.arange(-half, half + 1, dtype=np.float64)
    s2 = sigma * sigma
    g = np.exp(-rho * rho / (2 * s2)) / (sigma * math.sqrt(2 * math.pi))
    taps = g * (1 / s2 - rho * rho / (s2 * s2))
    taps -= taps.mean()
    l1 = np.abs(taps).sum()
    if l1 == 0:
        raise ConfigurationError(f"support {support} too short for a Laplacian filter")
    taps /= l1
    # the two halves are mirror images analytically; make them bitwise so
    taps = 0.5 * (taps + taps[::-1])
    return taps


def init_laplacian_filters(count: int, support: int, sigma_range: tuple[float, float],
                           rng: np.random.Generator) -> list[LaplacianInit]:
    lo, hi = sigma_range
    if lo <= 0:
        raise ConfigurationError(f"sigma range must be positive, got {sigma_range}")
    out = []
    for _ in range(count):
        sigma = float(rng.uniform(lo, hi))
        out.append(LaplacianInit(sigma, support, laplacian_taps(sigma, support)))
    return out


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Models

class Model:
    """Base class: a list of named parameters plus a forward pass on one image.

    Images enter as [H, W, 1] tensors; predictions are [H, W, 1].
    """

    kind = "model"
    loss_name = "l2"

    def __init__(self, mask: hough.VoteMask):
        self.mask = mask
        self.params: list[Parameter] = []

    def add(self, name: str, array) -> Parameter:
        if any(p.name == name for p in self.params):
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        p = Parameter.from_array(name, array, dtype=np.asarray(array).dtype)
        self.params.append(p)
        return p

    def param(self, name: str) -> Tensor:
        for p in self.params:
            if p.name == name:
                return p.value
        raise KeyError(name)

    @property
    def dtype(self):
        return self.params[0].data.dtype if self.params else DEFAULT_DTYPE

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, image: Tensor) -> Tensor:
        raise NotImplementedError

    def loss(self, pred: Tensor, target: Tensor) -> Tensor:
        return bce_loss(pred, target) if self.loss_name == "bce" else l2_loss(pred, target)

    def as_input(self, image: np.ndarray) -> Tensor:
        arr = np.asarray(image, dtype=self.dtype)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return Tensor(arr)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Line confidence map [H, W] clipped to [0, 1]."""
        with no_grad():
            out = self.forward(self.as_input(image)).data[:, :, 0]
        return np.clip(out, 0.0, 1.0)

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.data) for p in self.params]

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {p.name: p.data.shape for p in self.params}
        got = {k: v.shape for k, v in arrays.items() if not k.startswith("#")}
        if expected.keys() != got.keys():
            raise ConfigurationError(
                f"checkpoint parameters {sorted(got)} do not match model {self.kind} {sorted(expected)}")
        for p in self.params:
            if got[p.name] != p.data.shape:
                raise ConfigurationError(
                    f"parameter {p.name!r} has shape {got[p.name]} in checkpoint, model expects {p.data.shape}")
            p.value.data = np.ascontiguousarray(arrays[p.name], dtype=p.data.dtype)

    def astype(self, dtype) -> "Model":
        """Deep copy with parameters converted to ``dtype``."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = [Parameter.from_array(p.name, p.data.astype(dtype), dtype=dtype) for p in self.params]
        return clone


class LocalModel(Model):
    """One 3x3 convolution (with bias) followed by ReLU."""

    kind = "local"

    def __init__(self, mask, rng=None, init="default"):
        super().__init__(mask)
        rng = rng or np.random.default_rng(0)
        w = he_normal(rng, (3, 3, 1, 1), 9) if init != "zero" else np.zeros((3, 3, 1, 1), DEFAULT_DTYPE)
        self.add("local.conv.weight", w)
        self.add("local.conv.bias", np.zeros(1, DEFAULT_DTYPE))

    def forward(self, image):
        return relu(conv2d(image, self.param("local.conv.weight"), self.param("local.conv.bias")))


class GlobalModel(Model):
    """HT, one 3-tap filter (with bias) along the offsets, ReLU, IHT.

    The filter starts as a unit-L1 Laplacian multiplied by ``n_theta``, which
    cancels the averaging over angles in the IHT so an isolated Hough peak
    passes through the branch with roughly unit gain.
    """

    kind = "global"

    def __init__(self, mask, rng=None, init="default", sigma_range=(0.5, 2.5)):
        super().__init__(mask)
        rng = rng or np.random.default_rng(0)
        if init == "zero":
            w = np.zeros(3, DEFAULT_DTYPE)
        else:
            w = init_laplacian_filters(1, 3, sigma_range, rng)[0].taps * mask.grid.n_theta
        self.add("global.conv.weight", np.asarray(w, DEFAULT_DTYPE).reshape(3, 1, 1))
        self.add("global.conv.bias", np.zeros(1, DEFAULT_DTYPE))

    def hough_branch(self, image):
        h = hough.ht(image, self.mask)
        h = relu(conv1d_rho(h, self.param("global.conv.weight"), mode="channelwise",
                            bias=self.param("global.conv.bias")))
        return hough.iht(h, self.mask)

    def forward(self, image):
        return self.hough_branch(image)


class LocalGlobalModel(GlobalModel):
    """The global model's output gated by the input image."""

    kind = "local_global"

    def forward(self, image):
        return mul(self.hough_branch(image), image)


class HTIHTBlock:
    """HT -> Hough-domain filter chain -> IHT, concatenated with the untouched input."""

    def __init__(self, config: BlockConfig, mask: hough.VoteMask, owner: Model, rng, prefix="block"):
        self.config = config
        self.mask = mask
        self.owner = owner
        self.prefix = prefix
        cfg = config
        k, cin, cmid, cout = cfg.support, cfg.channels_in, cfg.channels_mid, cfg.channels_out
        self.chain: list[tuple[str, str]] = []  # (op, parameter name)
        if cfg.variant == "plain1d":
            self._conv1d("conv0", he_normal(rng, (k, cin, cin), k * cin), "dense")
        elif cfg.variant in ("laplacian1d", "full"):
            taps = init_laplacian_filters(cin, k, cfg.sigma_range, rng)
            # same gain as the Exp 1 filter: undo the 1/n_theta of the IHT
            w = np.stack([f.taps for f in taps], axis=-1)[:, None, :] * mask.grid.n_theta
            w = w.astype(DEFAULT_DTYPE)
            self._conv1d("conv0", w, "channelwise")
            if cfg.variant == "full":
                self._conv1d("conv1", he_normal(rng, (k, cin, cmid), k * cin), "dense")
                self._conv1d("conv2", he_normal(rng, (k, cmid, cout), k * cmid), "dense")
        elif cfg.variant == "spatial3x3":
            for i, (a, b) in enumerate([(cin, cin), (cin, cmid), (cmid, cout)]):
                name = f"{prefix}.conv{i}.weight"
                owner.add(name, he_normal(rng, (3, 3, a, b), 9 * a))
                self.chain.append(("conv2d", name))

    def _conv1d(self, label, w, mode):
        name = f"{self.prefix}.{label}.weight"
        self.owner.add(name, w)
        self.chain.append((mode, name))

    def filter_chain(self, h: Tensor) -> Tensor:
        for op, name in self.chain:
            w = self.owner.param(name)
            h = relu(conv2d(h, w) if op == "conv2d" else conv1d_rho(h, w, mode=op))
        return h

    def __call__(self, F: Tensor) -> Tensor:
        if F.shape[2] != self.config.channels_in:
            raise ConfigurationError(
                f"block expects {self.config.channels_in} channels, featuremap has {F.shape[2]}")
        branch = hough.iht(self.filter_chain(hough.ht(F, self.mask)), self.mask)
        return concat_channels(F, branch)


class BlockModel(Model):
    """3x3 conv + ReLU, one HT-IHT block, 3x3 conv + sigmoid; trained with BCE."""

    loss_name = "bce"

    def __init__(self, mask, config: BlockConfig, rng=None, init="default"):
        super().__init__(mask)
        rng = rng or np.random.default_rng(0)
        self.kind = f"block_variant_{VARIANTS.index(config.variant)}"
        self.config = config
        c = config.channels_in
        self.add("stem.weight", he_normal(rng, (3, 3, 1, c), 9))
        self.add("stem.bias", np.zeros(c, DEFAULT_DTYPE))
        self.block = HTIHTBlock(config, mask, self, rng)
        cat = c + config.branch_channels
        self.add("head.weight", he_normal(rng, (3, 3, cat, 1), 9 * cat))
        self.add("head.bias", np.zeros(1, DEFAULT_DTYPE))
        if init == "zero":
            for p in self.params:
                p.value.data = np.zeros_like(p.data)

    def astype(self, dtype):
        clone = super().astype(dtype)
        clone.block = object.__new__(HTIHTBlock)
        clone.block.__dict__.update(self.block.__dict__)
        clone.block.owner = clone
        return clone

    def forward(self, image):
        f = relu(conv2d(image, self.param("stem.weight"), self.param("stem.bias")))
        f = self.block(f)
        return sigmoid(conv2d(f, self.param("head.weight"), self.param("head.bias")))


EXP1_KINDS = ("local", "global", "local_global")
MODEL_KINDS = EXP1_KINDS + tuple(f"block_variant_{i}" for i in range(len(VARIANTS)))


def exp1_model(kind: str, mask: hough.VoteMask, rng=None, init="default", sigma_range=(0.5, 2.5)) -> Model:
    if kind == "local":
        return LocalModel(mask, rng, init)
    if kind == "global":
        return GlobalModel(mask, rng, init, sigma_range)
    if kind == "local_global":
        return LocalGlobalModel(mask, rng, init, sigma_range)
    raise ConfigurationError(f"unknown Exp 1 model kind {kind!r}")


def build_model(kind: str, mask: hough.VoteMask, seed: int = 0, init: str = "default",
                block_config: BlockConfig | None = None, sigma_range=(0.5, 2.5)) -> Model:
    """Construct any model kind in :data:`MODEL_KINDS` deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    if kind in EXP1_KINDS:
        return exp1_model(kind, mask, rng, init, sigma_range)
    if kind.startswith("block_variant_"):
        try:
            index = int(kind.rsplit("_", 1)[1])
            variant = VARIANTS[index]
        except (ValueError, IndexError):
            raise ConfigurationError(f"unknown model kind {kind!r}") from None
        base = block_config or BlockConfig()
        cfg = BlockConfig(variant, base.support, base.channels_in, base.channels_mid,
                          base.channels_out, base.sigma_range)
        return BlockModel(mask, cfg, rng, init)
    raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
