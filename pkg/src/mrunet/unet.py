"""Multi-resolution 3D U-Nets: a target U-Net plus K context networks.

Context network k sees a field of view ``2**kappa_k`` times larger than the
target patch, average-pooled back to the target patch size. Its encoder
features are center-cropped and concatenated into the target decoder where the
cropped cube covers exactly the target patch (crop-skip connections).

Configurations:

    A  plain U-Net, no context networks
    B  one bottleneck crop-skip per context; context U-Nets have a decoder and loss
    C  crop-skips at every level; context networks are encoders only, no loss
    D  crop-skips at every level; context U-Nets have a decoder and loss
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .tensor import Tensor, center_crop_half, concat, relu

SKIP_POLICIES = ("none", "bottleneck-only", "all-levels")
CROP_MODES = ("aligned", "half")
LABELS = {
    "A": ("none", False),
    "B": ("bottleneck-only", True),
    "C": ("all-levels", False),
    "D": ("all-levels", True),
}


class ConfigError(ValueError):
    """A network configuration violates a structural rule."""


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"target_size must have 3 components, got {v!r}")
    return t


@dataclass
class NetworkConfig:
    config_label: str = "A"
    levels: int = 5
    base_channels: int = 24
    class_count: int = 2
    target_size: tuple[int, int, int] = (32, 32, 32)
    kappas: list[int] = field(default_factory=list)
    skip_policy: str | None = None
    context_decoder_and_loss: bool | None = None
    # "aligned": context k is cropped kappa_k times and enters the target level
    # whose voxels cover the same world extent. "half": one crop, enters level m+1.
    crop_mode: str = "aligned"

    def __post_init__(self):
        self.target_size = _triple(self.target_size)
        self.kappas = [int(k) for k in self.kappas]
        label = self.config_label
        if label not in LABELS:
            raise ConfigError(f"config_label must be one of A, B, C, D, got {label!r}")
        policy, ctx_loss = LABELS[label]
        if self.skip_policy is None:
            self.skip_policy = policy
        if self.context_decoder_and_loss is None:
            self.context_decoder_and_loss = ctx_loss if label != "A" else False
        self.validate()

    def validate(self) -> None:
        M = self.levels
        if M < 2:
            raise ConfigError(f"levels must be >= 2, got {M}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        mult = 2 ** (M - 1)
        for s in self.target_size:
            if s <= 0 or s % mult:
                raise ConfigError(
                    f"target_size {self.target_size}: every component must be a positive multiple of "
                    f"2^(levels-1) = {mult} for levels={M}"
                )
        if any(k < 1 for k in self.kappas) or any(a >= b for a, b in zip(self.kappas, self.kappas[1:])):
            raise ConfigError(f"kappas must be strictly increasing integers >= 1, got {self.kappas}")
        if self.skip_policy not in SKIP_POLICIES:
            raise ConfigError(f"skip_policy must be one of {SKIP_POLICIES}")
        if self.crop_mode not in CROP_MODES:
            raise ConfigError(f"crop_mode must be one of {CROP_MODES}")
        label = self.config_label
        if label == "A":
            if self.kappas:
                raise ConfigError("config A takes no context networks (kappas must be empty)")
        else:
            if not self.kappas:
                raise ConfigError(f"config {label} needs at least one context network (kappas non-empty)")
            policy, ctx_loss = LABELS[label]
            if (self.skip_policy, self.context_decoder_and_loss) != (policy, ctx_loss):
                raise ConfigError(
                    f"config {label} requires skip_policy={policy} and context_decoder_and_loss={ctx_loss}"
                )
        if self.crop_mode == "aligned":
            for k in self.kappas:
                if k > M - 1:
                    raise ConfigError(f"kappa={k} leaves no encoder level to crop-skip from with levels={M}")

    @property
    def K(self) -> int:
        return len(self.kappas)

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, 16 * self.base_channels)

    def skip_sources(self, k: int) -> list[tuple[int, int]]:
        """(context encoder level, target level) pairs for context ``k``."""
        M = self.levels
        shift = self.kappas[k] if self.crop_mode == "aligned" else 1
        pairs = [(m, m + shift) for m in range(0, M - shift)]
        if self.skip_policy == "bottleneck-only":
            pairs = [p for p in pairs if p[1] == M - 1]
        elif self.skip_policy == "none":
            pairs = []
        return pairs

    def crops_per_skip(self, k: int) -> int:
        return self.kappas[k] if self.crop_mode == "aligned" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_size"] = list(self.target_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        """Accepts both the dataclass field names and the short config-file keys."""
        d = dict(d)
        if "config" in d:
            d["config_label"] = d.pop("config")
        if "classes" in d:
            d["class_count"] = d.pop("classes")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        d = {
            "config": self.config_label,
            "levels": self.levels,
            "base_channels": self.base_channels,
            "classes": self.class_count,
            "target_size": list(self.target_size),
            "kappas": self.kappas,
            "crop_mode": self.crop_mode,
        }
        Path(path).write_text(json.dumps(d, indent=2))


def count_inputs(config: NetworkConfig) -> int:
    """Input voxels per sample: the target patch plus one equal-sized patch per context."""
    sx, sy, sz = config.target_size
    return (1 + config.K) * sx * sy * sz


class Branch:
    """One U-Net (or encoder-only) column of the network."""

    def __init__(self, name: str, config: NetworkConfig, enc_levels: int, decoder: bool,
                 extra_in: dict[int, int] | None = None):
        self.name = name
        self.config = config
        self.enc_levels = enc_levels
        self.decoder = decoder
        self.extra_in = extra_in or {}
        self.param_shapes: dict[str, tuple[int, ...]] = {}
        c = config.channels
        M = config.levels
        for m in range(enc_levels):
            cin = 1 if m == 0 else c(m - 1)
            if decoder and m == M - 1:
                cin += self.extra_in.get(m, 0)
            self._block(f"enc{m}", cin, c(m))
        if decoder:
            for j in range(M - 2, -1, -1):
                self.param_shapes[f"{name}.up{j}.w"] = (c(j + 1), c(j), 2, 2, 2)
                self.param_shapes[f"{name}.up{j}.b"] = (c(j),)
                self._block(f"dec{j}", 2 * c(j) + self.extra_in.get(j, 0), c(j))
            self.param_shapes[f"{name}.head.w"] = (config.class_count, c(0), 1, 1, 1)
            self.param_shapes[f"{name}.head.b"] = (config.class_count,)

    def _block(self, tag: str, cin: int, cout: int) -> None:
        self.param_shapes[f"{self.name}.{tag}.conv1.w"] = (cout, cin, 3, 3, 3)
        self.param_shapes[f"{self.name}.{tag}.conv1.b"] = (cout,)
        self.param_shapes[f"{self.name}.{tag}.conv2.w"] = (cout, cout, 3, 3, 3)
        self.param_shapes[f"{self.name}.{tag}.conv2.b"] = (cout,)

    def _conv_block(self, params, tag: str, x: Tensor) -> Tensor:
        p = f"{self.name}.{tag}"
        x = relu(ops.instance_norm(ops.conv3d(x, params[p + ".conv1.w"], params[p + ".conv1.b"], padding=1)))
        return relu(ops.instance_norm(ops.conv3d(x, params[p + ".conv2.w"], params[p + ".conv2.b"], padding=1)))

    def forward(self, params, x: Tensor, incoming: dict[int, list[Tensor]] | None = None):
        """Returns (encoder features per level, logits or None)."""
        incoming = incoming or {}
        M = self.config.levels
        feats = []
        h = x
        for m in range(self.enc_levels):
            if m > 0:
                h = ops.max_pool3d(h, 2, 2)
                if self.decoder and m == M - 1 and incoming.get(m):
                    h = concat([h] + incoming[m])
            h = self._conv_block(params, f"enc{m}", h)
            feats.append(h)
        if not self.decoder:
            return feats, None
        for j in range(M - 2, -1, -1):
            up = ops.conv_transpose3d(h, params[f"{self.name}.up{j}.w"], params[f"{self.name}.up{j}.b"], stride=2)
            h = concat([up, feats[j]] + incoming.get(j, []))
            h = self._conv_block(params, f"dec{j}", h)
        logits = ops.conv3d(h, params[f"{self.name}.head.w"], params[f"{self.name}.head.b"])
        return feats, logits


class Network:
    """A built configuration: parameters plus the crop-skip wiring table."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        M = config.levels
        c = config.channels
        self.wiring: list[tuple[int, int, int]] = []  # (context k, context encoder level, target level)
        for k in range(config.K):
            for m, t in config.skip_sources(k):
                self.wiring.append((k, m, t))
        extra: dict[int, int] = {}
        for k, m, t in self.wiring:
            extra[t] = extra.get(t, 0) + c(m)
        self.target = Branch("target", config, M, True, extra)
        self.contexts: list[Branch] = []
        for k in range(config.K):
            if config.context_decoder_and_loss:
                depth = M
            else:
                depth = max(m for kk, m, _ in self.wiring if kk == k) + 1
            self.contexts.append(Branch(f"context{k + 1}", config, depth, config.context_decoder_and_loss))
        self._check_wiring()
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for branch in [self.target] + self.contexts:
            for name, shape in branch.param_shapes.items():
                self.params[name] = Tensor(_init(rng, name, shape, dtype), requires_grad=True, name=name)

    def _check_wiring(self) -> None:
        S = np.array(self.config.target_size)
        for k, m, t in self.wiring:
            src = S // 2**m
            for _ in range(self.config.crops_per_skip(k)):
                if np.any(src % 2):
                    raise ConfigError(f"crop-skip source at context {k + 1} level {m} has odd dims {tuple(src)}")
                src = src // 2
            dst = S // 2**t
            if not np.array_equal(src, dst):
                raise ConfigError(
                    f"crop-skip context {k + 1} level {m} -> target level {t}: cropped dims {tuple(src)} "
                    f"do not match target dims {tuple(dst)}"
                )

    # -- parameter access ---------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def count_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def astype(self, dtype) -> "Network":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # -- forward --------------------------------------------------------------
    def forward(self, target: Tensor | np.ndarray, contexts: Sequence[Tensor | np.ndarray] = ()) -> dict:
        """Run all branches.

        target and each context: (N, 1, Sx, Sy, Sz). Returns
        ``{"target": logits, "contexts": [logits per context head]}``; the
        context list is empty when context networks carry no decoder.
        """
        cfg = self.config
        target = _as_input(target)
        contexts = [_as_input(c) for c in contexts]
        if len(contexts) != cfg.K:
            raise ValueError(f"network expects {cfg.K} context patches, got {len(contexts)}")
        for arr in [target] + contexts:
            if arr.ndim != 5 or arr.shape[1] != 1 or tuple(arr.shape[2:]) != cfg.target_size:
                raise ValueError(
                    f"patch shape {arr.shape} does not match (N, 1, {', '.join(map(str, cfg.target_size))})"
                )
        incoming: dict[int, list[Tensor]] = {}
        ctx_logits = []
        for k, (branch, x) in enumerate(zip(self.contexts, contexts)):
            feats, logits = branch.forward(self.params, x)
            if logits is not None:
                ctx_logits.append(logits)
            for kk, m, t in self.wiring:
                if kk != k:
                    continue
                h = feats[m]
                for _ in range(cfg.crops_per_skip(k)):
                    h = center_crop_half(h)
                incoming.setdefault(t, []).append(h)
        _, logits = self.target.forward(self.params, target, incoming)
        return {"target": logits, "contexts": ctx_logits}

    __call__ = forward


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _init(rng: np.random.Generator, name: str, shape, dtype) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape, dtype=dtype)
    if ".up" in name:
        fan_in = shape[0]
    else:
        fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(config, seed=seed, dtype=dtype)


def count_params(net: Network) -> int:
    return net.count_params()
