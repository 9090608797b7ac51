"""Normalization layers, IBN bottleneck blocks and a small segmentation net."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var, as_var
from .tensorio import read_tensor, write_tensor

BRANCHES = ("IN", "LN", "BN")


class NormPolicy(str, enum.Enum):
    """How the first normalization of each bottleneck is wired."""

    PLAIN_BN = "PLAIN_BN"
    IBN_A = "IBN_A"
    IBN_B = "IBN_B"
    IBN_S = "IBN_S"

    @classmethod
    def parse(cls, value) -> NormPolicy:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper().replace("-", "_"))
        except ValueError:
            names = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown norm policy {value!r} (expected one of {names})") from None


@dataclass
class NormParams:
    """Affine parameters plus, for BN-style layers, running statistics.

    ``gamma`` and ``beta`` may be plain arrays or tape variables. Running
    statistics are updated in place during train-mode forwards.
    """

    gamma: Var | np.ndarray
    beta: Var | np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, running: bool = True, eps: float = 1e-5,
               momentum: float = 0.1) -> NormParams:
        return cls(
            np.ones(channels), np.zeros(channels),
            np.zeros(channels) if running else None,
            np.ones(channels) if running else None,
            eps, momentum,
        )

    @property
    def channels(self) -> int:
        return as_var(self.gamma).shape[0]


@dataclass
class SwitchableWeights:
    mean_logits: Var | np.ndarray = field(default_factory=lambda: np.zeros(3))
    var_logits: Var | np.ndarray = field(default_factory=lambda: np.zeros(3))
    branches: tuple[str, ...] = BRANCHES

    def __post_init__(self):
        self.branches = tuple(b.upper() for b in self.branches)
        if not self.branches:
            raise ValueError("switchable norm needs at least one branch")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown switchable-norm branches {sorted(unknown)}")


def _affine(xhat: Var, p: NormParams) -> Var:
    return ad.channel_affine(xhat, p.gamma, p.beta)


def _check_channels(x: Var, p: NormParams, name: str) -> None:
    if x.ndim != 4:
        raise ad.ShapeError(f"{name} expects NCHW input, got {x.shape}")
    if x.shape[1] != p.channels:
        raise ad.ShapeError(f"{name}: input has {x.shape[1]} channels, parameters have {p.channels}")


def _moments(x: Var, axes) -> tuple[Var, Var]:
    mu = ad.mean(x, axes, keep=True)
    xc = x - ad.expand(mu, x.shape)
    return mu, ad.mean(xc * xc, axes, keep=True)


def _standardize(x: Var, mu: Var, var: Var, eps: float) -> Var:
    inv = 1.0 / ad.sqrt(var + eps)
    return (x - ad.expand(mu, x.shape)) * ad.expand(inv, x.shape)


def _update_running(p: NormParams, mu: np.ndarray, var: np.ndarray) -> None:
    p.running_mean *= 1.0 - p.momentum
    p.running_mean += p.momentum * mu.reshape(-1)
    p.running_var *= 1.0 - p.momentum
    p.running_var += p.momentum * var.reshape(-1)


def batch_norm(x, p: NormParams, mode: str = "train") -> Var:
    x = as_var(x)
    _check_channels(x, p, "batch_norm")
    n, c, h, w = x.shape
    if mode == "train":
        if n * h * w == 1:
            raise ValueError("batch_norm in train mode needs more than one value per channel")
        xhat, mu, var = ad.standardize(x, (0, 2, 3), p.eps)
        if p.running_mean is not None:
            _update_running(p, mu, var)
        return _affine(xhat, p)
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mu = Var(p.running_mean.reshape(1, c, 1, 1))
    var = Var(p.running_var.reshape(1, c, 1, 1))
    return _affine(_standardize(x, mu, var, p.eps), p)


def instance_norm(x, p: NormParams) -> Var:
    x = as_var(x)
    _check_channels(x, p, "instance_norm")
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError("instance_norm needs at least two spatial positions")
    return _affine(ad.standardize(x, (2, 3), p.eps)[0], p)


def layer_norm(x, p: NormParams) -> Var:
    x = as_var(x)
    _check_channels(x, p, "layer_norm")
    if x.shape[1] * x.shape[2] * x.shape[3] < 2:
        raise ValueError("layer_norm needs at least two values per sample")
    return _affine(ad.standardize(x, (1, 2, 3), p.eps)[0], p)


def _softmax(logits: Var) -> Var:
    z = logits - float(logits.value.max())
    e = ad.exp(z)
    return e / ad.sum(e)


def _branch_weights(logits, branches: tuple[str, ...]) -> dict[str, Var]:
    logits = as_var(logits)
    picked = [ad.slice_axis(logits, 0, BRANCHES.index(b), BRANCHES.index(b) + 1) for b in branches]
    probs = _softmax(ad.concat(picked, 0))
    return {b: ad.reshape(ad.slice_axis(probs, 0, i, i + 1), ()) for i, b in enumerate(branches)}


def switchable_norm(x, p: NormParams, w: SwitchableWeights, mode: str = "train") -> Var:
    """Normalize with softmax-mixed IN / LN / BN statistics."""
    x = as_var(x)
    _check_channels(x, p, "switchable_norm")
    n, c, h, wd = x.shape
    stats_shape = (n, c, 1, 1)
    means, variances = {}, {}
    if "IN" in w.branches:
        if h * wd < 2:
            raise ValueError("switchable_norm IN branch needs at least two spatial positions")
        mu, var = _moments(x, (2, 3))
        means["IN"], variances["IN"] = mu, var
    if "LN" in w.branches:
        mu, var = _moments(x, (1, 2, 3))
        means["LN"], variances["LN"] = ad.expand(mu, stats_shape), ad.expand(var, stats_shape)
    if "BN" in w.branches:
        if mode == "train":
            if n * h * wd == 1:
                raise ValueError("switchable_norm BN branch needs more than one value per channel")
            mu, var = _moments(x, (0, 2, 3))
            if p.running_mean is not None:
                _update_running(p, mu.value, var.value)
        elif mode == "eval":
            mu = Var(p.running_mean.reshape(1, c, 1, 1))
            var = Var(p.running_var.reshape(1, c, 1, 1))
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        means["BN"], variances["BN"] = ad.expand(mu, stats_shape), ad.expand(var, stats_shape)

    wm = _branch_weights(w.mean_logits, w.branches)
    wv = _branch_weights(w.var_logits, w.branches)
    mix_mu = None
    mix_var = None
    for b in w.branches:
        tm, tv = wm[b] * means[b], wv[b] * variances[b]
        mix_mu = tm if mix_mu is None else mix_mu + tm
        mix_var = tv if mix_var is None else mix_var + tv
    return _affine(_standardize(x, mix_mu, mix_var, p.eps), p)


# ----------------------------------------------------------------- the network


def ibn_a_split(channels: int) -> int:
    """Number of leading channels that get instance normalization in IBN-a."""
    return math.ceil(channels / 2)


@dataclass
class ToyNet:
    """Stem, bottleneck blocks and a bilinear-upsampling decoder.

    ``params`` holds trainable arrays, ``buffers`` the running statistics.
    Both are ordered by construction so checkpoints are stable.
    """

    policy: NormPolicy
    widths: tuple[int, ...]
    num_classes: int
    in_channels: int = 3
    eps: float = 1e-5
    momentum: float = 0.1
    sn_branches: tuple[str, ...] = BRANCHES
    bottleneck_ratio: int = 2
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def probes(self) -> list[str]:
        names = ["stem.relu"]
        for i in range(len(self.widths)):
            names += [f"block{i}.relu1", f"block{i}.relu2", f"block{i}.relu3"]
        names.append("decoder.relu")
        return names

    def block_layout(self) -> list[tuple[int, int, int, int]]:
        """(in, mid, out, stride) per block; stride 2 wherever the width grows."""
        layout = []
        cin = self.widths[0]
        for cout in self.widths:
            mid = max(cout // self.bottleneck_ratio, 2)
            layout.append((cin, mid, cout, 2 if cout > cin else 1))
            cin = cout
        return layout

    def bind(self, tape: ad.Tape) -> dict[str, Var]:
        return {k: tape.variable(v) for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _add_norm(net: ToyNet, prefix: str, channels: int, running: bool = True) -> None:
    net.params[f"{prefix}.gamma"] = np.ones(channels)
    net.params[f"{prefix}.beta"] = np.zeros(channels)
    if running:
        net.buffers[f"{prefix}.running_mean"] = np.zeros(channels)
        net.buffers[f"{prefix}.running_var"] = np.ones(channels)


def build_toynet(policy, widths, num_classes: int, seed: int = 0, *, in_channels: int = 3,
                 eps: float = 1e-5, momentum: float = 0.1, sn_branches=BRANCHES,
                 bottleneck_ratio: int = 2) -> ToyNet:
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise ValueError("widths must be non-empty")
    if any(w < 1 for w in widths) or num_classes < 1:
        raise ValueError("widths and num_classes must be positive")
    net = ToyNet(NormPolicy.parse(policy), widths, int(num_classes), in_channels, eps, momentum,
                 tuple(b.upper() for b in sn_branches), bottleneck_ratio)
    SwitchableWeights(branches=net.sn_branches)  # validates the branch set
    rng = np.random.default_rng(seed)
    p = net.params

    p["stem.conv.weight"] = _he(rng, (widths[0], in_channels, 3, 3))
    _add_norm(net, "stem.bn", widths[0])
    for i, (cin, mid, cout, stride) in enumerate(net.block_layout()):
        b = f"block{i}"
        p[f"{b}.conv1.weight"] = _he(rng, (mid, cin, 1, 1))
        if net.policy is NormPolicy.IBN_A:
            k = ibn_a_split(mid)
            _add_norm(net, f"{b}.norm1.in", k, running=False)
            if mid - k:
                _add_norm(net, f"{b}.norm1.bn", mid - k)
        elif net.policy is NormPolicy.IBN_S:
            _add_norm(net, f"{b}.norm1.sn", mid)
            p[f"{b}.norm1.sn.mean_logits"] = np.zeros(3)
            p[f"{b}.norm1.sn.var_logits"] = np.zeros(3)
        else:
            _add_norm(net, f"{b}.norm1.bn", mid)
        p[f"{b}.conv2.weight"] = _he(rng, (mid, mid, 3, 3))
        _add_norm(net, f"{b}.bn2", mid)
        p[f"{b}.conv3.weight"] = _he(rng, (cout, mid, 1, 1))
        _add_norm(net, f"{b}.bn3", cout)
        if cin != cout or stride != 1:
            p[f"{b}.proj.weight"] = _he(rng, (cout, cin, 1, 1))
            _add_norm(net, f"{b}.proj.bn", cout)
        if net.policy is NormPolicy.IBN_B:
            _add_norm(net, f"{b}.in_out", cout, running=False)
    p["decoder.conv.weight"] = _he(rng, (widths[-1], widths[-1], 3, 3))
    _add_norm(net, "decoder.bn", widths[-1])
    p["classifier.weight"] = _he(rng, (num_classes, widths[-1], 1, 1))
    p["classifier.bias"] = np.zeros(num_classes)
    return net


class ParamScope:
    """Resolves parameter names to Vars (bound) or constants (unbound)."""

    def __init__(self, net: ToyNet, bound: dict[str, Var] | None):
        self.net = net
        self.bound = bound or {}

    def __call__(self, name: str):
        return self.bound.get(name, self.net.params[name])

    def norm(self, prefix: str) -> NormParams:
        net = self.net
        return NormParams(self(f"{prefix}.gamma"), self(f"{prefix}.beta"),
                          net.buffers.get(f"{prefix}.running_mean"),
                          net.buffers.get(f"{prefix}.running_var"),
                          net.eps, net.momentum)

    def sn_weights(self, prefix: str) -> SwitchableWeights:
        return SwitchableWeights(self(f"{prefix}.mean_logits"), self(f"{prefix}.var_logits"),
                                 self.net.sn_branches)


def _norm1(x: Var, scope: ParamScope, b: str, policy: NormPolicy, mode: str) -> Var:
    if policy is NormPolicy.IBN_A:
        c = x.shape[1]
        k = ibn_a_split(c)
        head = instance_norm(ad.slice_axis(x, 1, 0, k), scope.norm(f"{b}.norm1.in"))
        if k == c:
            return head
        tail = batch_norm(ad.slice_axis(x, 1, k, c), scope.norm(f"{b}.norm1.bn"), mode)
        return ad.concat([head, tail], 1)
    if policy is NormPolicy.IBN_S:
        return switchable_norm(x, scope.norm(f"{b}.norm1.sn"), scope.sn_weights(f"{b}.norm1.sn"), mode)
    return batch_norm(x, scope.norm(f"{b}.norm1.bn"), mode)


def bottleneck_block(x, scope: ParamScope, index: int, mode: str, taps: dict[str, Var] | None = None) -> Var:
    net = scope.net
    cin, mid, cout, stride = net.block_layout()[index]
    b = f"block{index}"
    taps = {} if taps is None else taps

    h = ad.conv2d(x, scope(f"{b}.conv1.weight"))
    h = ad.relu(_norm1(h, scope, b, net.policy, mode))
    taps[f"{b}.relu1"] = h
    h = ad.conv2d(h, scope(f"{b}.conv2.weight"), stride=stride, padding=1)
    h = ad.relu(batch_norm(h, scope.norm(f"{b}.bn2"), mode))
    taps[f"{b}.relu2"] = h
    h = ad.conv2d(h, scope(f"{b}.conv3.weight"))
    h = batch_norm(h, scope.norm(f"{b}.bn3"), mode)
    if f"{b}.proj.weight" in net.params:
        identity = batch_norm(ad.conv2d(x, scope(f"{b}.proj.weight"), stride=stride),
                              scope.norm(f"{b}.proj.bn"), mode)
    else:
        identity = as_var(x)
    h = h + identity
    if net.policy is NormPolicy.IBN_B:
        h = instance_norm(h, scope.norm(f"{b}.in_out"))
    h = ad.relu(h)
    taps[f"{b}.relu3"] = h
    return h


def network_input(x: np.ndarray, in_channels: int = 3) -> np.ndarray:
    """Duplicate single-channel (NIR-like) inputs to the stem's channel count."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] == 1 and in_channels != 1:
        x = np.repeat(x, in_channels, axis=1)
    return x


def forward_segmentation(net: ToyNet, x, mode: str = "eval", capture=(), bound: dict[str, Var] | None = None
                         ) -> tuple[Var, dict[str, np.ndarray]]:
    """Run the net; return logits (N, classes, H, W) and copies of captured probes."""
    capture = list(capture)
    unknown = [c for c in capture if c not in net.probes]
    if unknown:
        raise KeyError(f"unknown probe(s): {unknown}")
    x = network_input(x, net.in_channels)
    if x.shape[1] != net.in_channels:
        raise ad.ShapeError(f"input has {x.shape[1]} channels, stem expects {net.in_channels}")
    scope = ParamScope(net, bound)
    taps: dict[str, Var] = {}

    h = ad.conv2d(x, scope("stem.conv.weight"), stride=2, padding=1)
    h = ad.relu(batch_norm(h, scope.norm("stem.bn"), mode))
    taps["stem.relu"] = h
    for i in range(len(net.widths)):
        h = bottleneck_block(h, scope, i, mode, taps)
    h = ad.conv2d(h, scope("decoder.conv.weight"), padding=1)
    h = ad.relu(batch_norm(h, scope.norm("decoder.bn"), mode))
    taps["decoder.relu"] = h
    # 1x1 conv and bilinear resize commute (interpolation rows sum to 1), so classify first
    logits = ad.conv2d(h, scope("classifier.weight"), scope("classifier.bias"))
    logits = ad.resize_bilinear(logits, x.shape[2:])
    return logits, {name: taps[name].value.copy() for name in capture}


# ---------------------------------------------------------------- checkpoints

_MANIFEST = "manifest.txt"


def save_checkpoint(net: ToyNet, directory) -> Path:
    """Write a text manifest plus one tensor file per parameter and buffer."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        "ibnseg-checkpoint v1",
        f"policy {net.policy.value}",
        f"widths {','.join(map(str, net.widths))}",
        f"num_classes {net.num_classes}",
        f"in_channels {net.in_channels}",
        f"eps {net.eps!r}",
        f"momentum {net.momentum!r}",
        f"sn_branches {','.join(net.sn_branches)}",
        f"bottleneck_ratio {net.bottleneck_ratio}",
    ]
    for kind, table in (("param", net.params), ("buffer", net.buffers)):
        for name, value in table.items():
            fname = f"{name}.tensor"
            write_tensor(directory / fname, value)
            lines.append(f"{kind} {name} {fname}")
    lines += [f"probe {name}" for name in net.probes]
    (directory / _MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_checkpoint(directory) -> ToyNet:
    directory = Path(directory)
    path = directory / _MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "ibnseg-checkpoint v1":
        raise ValueError(f"{path}: not an ibnseg checkpoint")
    meta, params, buffers, probes = {}, {}, {}, []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key in ("param", "buffer"):
            name, fname = rest.split(" ")
            (params if key == "param" else buffers)[name] = read_tensor(directory / fname).astype(np.float64)
        elif key == "probe":
            probes.append(rest)
        else:
            meta[key] = rest
    net = ToyNet(
        NormPolicy.parse(meta["policy"]),
        tuple(int(w) for w in meta["widths"].split(",")),
        int(meta["num_classes"]),
        int(meta["in_channels"]),
        float(meta["eps"]),
        float(meta["momentum"]),
        tuple(meta["sn_branches"].split(",")),
        int(meta["bottleneck_ratio"]),
        params,
        buffers,
    )
    if probes != net.probes:
        raise ValueError(f"{path}: probe registry does not match the architecture")
    reference = build_toynet(net.policy, net.widths, net.num_classes, in_channels=net.in_channels,
                             sn_branches=net.sn_branches, bottleneck_ratio=net.bottleneck_ratio)
    for table, ref in ((params, reference.params), (buffers, reference.buffers)):
        if set(table) != set(ref):
            raise ValueError(f"{path}: parameter names do not match the architecture")
        for name, value in ref.items():
            if table[name].shape != value.shape:
                raise ValueError(f"{path}: {name} has shape {table[name].shape}, expected {value.shape}")
    net.params = {k: params[k] for k in reference.params}
    net.buffers = {k: buffers[k] for k in reference.buffers}
    return net
