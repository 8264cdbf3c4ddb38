"""ReLU classifiers for 1-D signals and their exact local affine forms.

Three architectures are provided:

* ``mlp``: the (187-128)-ReLU-(128-128)-ReLU-(128-128)-ReLU-(128-32)-(32-5) perceptron,
* ``beat_cnn``: a residual 1-D CNN for fixed-length beats,
* ``masked_cnn``: a CNN for zero-padded variable-length multi-lead recordings
  that carries a validity mask through every stage.

Every model takes ``model(x, mask=None)``. :func:`linearize_at` walks the
layers in float64 and propagates an affine map alongside the activations,
freezing each ReLU gate, max-pool selection and group-norm statistic at
its value for the given input. The result reproduces the logits exactly
and is the reference against which autograd input gradients are checked.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file


class UnsupportedArchitectureError(TypeError):
    """The model contains a layer the linearizer cannot freeze into an affine map."""


@dataclass
class ClassifierSpec:
    kind: str
    num_classes: int
    input_shape: tuple
    options: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d["num_classes"]), tuple(d["input_shape"]), dict(d.get("options", {})))


@dataclass
class AffineForm:
    """``logits = W.T @ x.ravel() + b`` for inputs in the same linear region."""

    W: torch.Tensor  # (input_dim, num_classes)
    b: torch.Tensor  # (num_classes,)

    def __call__(self, x):
        return torch.as_tensor(x, dtype=self.W.dtype).reshape(-1) @ self.W + self.b


# ---------------------------------------------------------------------------
# architectures

class MLP(nn.Module):
    def __init__(self, widths=(187, 128, 128, 128, 32, 5), relu_after=3, leaky_slope=None):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(nn.Linear(a, b))
            if i < relu_after:
                layers.append(nn.LeakyReLU(leaky_slope) if leaky_slope else nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.spec = ClassifierSpec("mlp", widths[-1], (widths[0],),
                                   {"widths": list(widths), "relu_after": relu_after,
                                    "leaky_slope": leaky_slope})

    def forward(self, x, mask=None):
        return self.net(x.reshape(x.shape[0], -1))

    def _linearize(self, tr):
        return _propagate(self.net, tr)


class ResidualBlock(nn.Module):
    """conv-ReLU-conv plus skip, then max-pool."""

    def __init__(self, channels=32, kernel=5, pool=5, pool_stride=2):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.relu = nn.ReLU()
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.pool = nn.MaxPool1d(pool, pool_stride)

    def forward(self, x):
        return self.pool(x + self.conv2(self.relu(self.conv1(x))))

    def _linearize(self, tr):
        branch = _propagate(nn.Sequential(self.conv1, self.relu, self.conv2), tr)
        return _propagate(self.pool, tr + branch)


class BeatCNN(nn.Module):
    def __init__(self, length=187, num_classes=5, channels=32, n_blocks=5, kernel=5, hidden=32):
        super().__init__()
        self.stem = nn.Conv1d(1, channels, kernel, padding=kernel // 2)
        self.blocks = nn.Sequential(*[ResidualBlock(channels, kernel) for _ in range(n_blocks)])
        out_len = length
        for _ in range(n_blocks):
            out_len = (out_len - 5) // 2 + 1
        if out_len < 1:
            raise ValueError(f"input length {length} too short for {n_blocks} blocks")
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(channels * out_len, hidden),
                                  nn.ReLU(), nn.Linear(hidden, num_classes))
        self.spec = ClassifierSpec("beat_cnn", num_classes, (length,),
                                   {"channels": channels, "n_blocks": n_blocks,
                                    "kernel": kernel, "hidden": hidden})

    def forward(self, x, mask=None):
        x = x.reshape(x.shape[0], 1, -1)
        return self.head(self.blocks(self.stem(x)))

    def _linearize(self, tr):
        tr = tr.reshape((1, -1))
        tr = _propagate(self.stem, tr)
        tr = _propagate(self.blocks, tr)
        return _propagate(self.head, tr)


def _masked_stats(x, mask, groups, eps):
    # x: (N, C, L), mask: (N, 1, L)
    N, C, L = x.shape
    xg = x.reshape(N, groups, C // groups, L)
    m = mask.reshape(N, 1, 1, L)
    count = (m.sum(dim=(2, 3)) * (C // groups)).clamp_min(1.0)  # (N, G)
    mean = (xg * m).sum(dim=(2, 3)) / count
    var = (((xg - mean[..., None, None]) ** 2) * m).sum(dim=(2, 3)) / count
    return mean, torch.sqrt(var + eps)


class MaskedGroupNorm(nn.Module):
    """Group normalization whose statistics only see positions where mask == 1."""

    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        self.groups, self.eps = groups, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, mask):
        N, C, L = x.shape
        mean, std = _masked_stats(x, mask, self.groups, self.eps)
        xg = (x.reshape(N, self.groups, C // self.groups, L) - mean[..., None, None]) / std[..., None, None]
        return xg.reshape(N, C, L) * self.weight[:, None] + self.bias[:, None]

    def _linearize(self, tr, mask):
        C, L = tr.value.shape
        g = self.groups
        mean, std = _masked_stats(tr.value[None], mask[None], g, self.eps)
        mean = mean[0].repeat_interleave(C // g)[:, None]
        std = std[0].repeat_interleave(C // g)[:, None]
        scale = self.weight[:, None] / std
        shift = self.bias[:, None] - mean * scale
        return tr.scale_shift(scale, shift)


class MaskedConvStage(nn.Module):
    """conv (strided) -> masked group norm -> ReLU -> re-mask."""

    def __init__(self, cin, cout, kernel, stride, padding, groups=8):
        super().__init__()
        self.conv = nn.Conv1d(cin, cout, kernel, stride, padding)
        self.norm = MaskedGroupNorm(groups, cout)
        self.relu = nn.ReLU()
        self.stride = stride

    def forward(self, x, mask):
        h = self.conv(x)
        h = self.relu(self.norm(h, mask)) * mask
        return h

    def _linearize(self, tr, mask):
        tr = _propagate(self.conv, tr)
        tr = self.norm._linearize(tr, mask)
        tr = _propagate(self.relu, tr)
        return tr.scale_shift(mask, 0.0)


def downsample_mask(mask, factor):
    """Average-pool a {0,1} mask by ``factor`` and threshold at > 0.5."""
    if factor == 1:
        return mask
    return (F.avg_pool1d(mask, factor, factor) > 0.5).to(mask.dtype)


class MaskedCNN(nn.Module):
    """Variable-length CNN: stem + 4 downsampling stages + mask-weighted average + linear."""

    def __init__(self, num_leads=8, num_classes=9, stem_channels=32, n_blocks=4,
                 stem_kernel=16, block_kernel=8, groups=8):
        super().__init__()
        self.stem = MaskedConvStage(num_leads, stem_channels, stem_kernel, 2, (stem_kernel - 2) // 2, groups)
        stages, c = [], stem_channels
        for _ in range(n_blocks):
            stages.append(MaskedConvStage(c, 2 * c, block_kernel, 2, (block_kernel - 2) // 2, groups))
            c *= 2
        self.blocks = nn.ModuleList(stages)
        self.feature_dim = c
        self.fc = nn.Linear(c, num_classes)
        self.total_stride = 2 ** (n_blocks + 1)
        self.spec = ClassifierSpec("masked_cnn", num_classes, (num_leads, None),
                                   {"stem_channels": stem_channels, "n_blocks": n_blocks,
                                    "stem_kernel": stem_kernel, "block_kernel": block_kernel,
                                    "groups": groups})

    def _masks(self, mask):
        out, f = [], 1
        for _ in range(1 + len(self.blocks)):
            f *= 2
            out.append(downsample_mask(mask, f))
        return out

    def features(self, x, mask):
        if mask is None:
            raise ValueError("masked_cnn requires an input mask")
        if mask.shape != (x.shape[0], 1, x.shape[2]):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match input {tuple(x.shape)}")
        masks = self._masks(mask)
        h = self.stem(x * mask, masks[0])
        for stage, m in zip(self.blocks, masks[1:]):
            h = stage(h, m)
        m = masks[-1]
        return (h * m).sum(dim=2) / m.sum(dim=2).clamp_min(1.0)

    def forward(self, x, mask=None):
        return self.fc(self.features(x, mask))

    def _linearize(self, tr, mask):
        masks = self._masks(mask[None])
        tr = tr.scale_shift(mask, 0.0)
        tr = self.stem._linearize(tr, masks[0][0])
        for stage, m in zip(self.blocks, masks[1:]):
            tr = stage._linearize(tr, m[0])
        m = masks[-1][0]
        tr = tr.scale_shift(m / m.sum().clamp_min(1.0), 0.0).sum_last()
        return _propagate(self.fc, tr)


def build_mlp(leaky_slope=None) -> MLP:
    return MLP(leaky_slope=leaky_slope)


def build_beat_cnn(length=187, num_classes=5, **kw) -> BeatCNN:
    return BeatCNN(length, num_classes, **kw)


def build_masked_cnn(num_leads=8, num_classes=9, **kw) -> MaskedCNN:
    return MaskedCNN(num_leads, num_classes, **kw)


def build_classifier(spec: ClassifierSpec | dict | str) -> nn.Module:
    if isinstance(spec, str):
        spec = ClassifierSpec(spec, 0, ())
    elif isinstance(spec, dict):
        spec = ClassifierSpec.from_dict(spec)
    opts = dict(spec.options)
    if spec.kind == "mlp":
        if "widths" in opts:
            return MLP(tuple(opts["widths"]), opts.get("relu_after", 3), opts.get("leaky_slope"))
        return build_mlp(opts.get("leaky_slope"))
    if spec.kind == "beat_cnn":
        length = spec.input_shape[0] if spec.input_shape else 187
        return BeatCNN(length, spec.num_classes or 5, **opts)
    if spec.kind == "masked_cnn":
        leads = spec.input_shape[0] if spec.input_shape else 8
        return MaskedCNN(leads, spec.num_classes or 9, **opts)
    raise ValueError(f"unknown classifier kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# queries

def _as_tensor(x, model):
    p = next(model.parameters())
    return torch.as_tensor(x, dtype=p.dtype, device=p.device)


def forward(model: nn.Module, x, mask=None) -> torch.Tensor:
    x = _as_tensor(x, model)
    if mask is not None:
        mask = _as_tensor(mask, model)
    return model(x, mask)


def input_gradient(model: nn.Module, x, y: int, mask=None) -> torch.Tensor:
    """d logit_y / d x for a single unbatched input."""
    x = _as_tensor(x, model).detach().clone().requires_grad_(True)
    m = None if mask is None else _as_tensor(mask, model)[None]
    z = model(x[None], m)
    (g,) = torch.autograd.grad(z[0, int(y)], x)
    return g


class _Trace:
    """Activation ``value`` plus its affine dependence on the flattened input.

    ``A`` has shape ``(input_dim, *value.shape)`` so that a bias-free layer can
    treat the input dimension as a batch axis.
    """

    def __init__(self, value, A, c):
        self.value, self.A, self.c = value, A, c

    def reshape(self, shape):
        shape = tuple(shape)
        new = self.value.reshape(shape).shape
        return _Trace(self.value.reshape(new), self.A.reshape((self.A.shape[0],) + new), self.c.reshape(new))

    def scale_shift(self, scale, shift):
        scale = torch.as_tensor(scale, dtype=self.value.dtype)
        return _Trace(self.value * scale + shift, self.A * scale, self.c * scale + shift)

    def sum_last(self):
        return _Trace(self.value.sum(-1), self.A.sum(-1), self.c.sum(-1))

    def __add__(self, other):
        return _Trace(self.value + other.value, self.A + other.A, self.c + other.c)


def _propagate(layer, tr: _Trace) -> _Trace:
    if hasattr(layer, "_linearize") and not isinstance(layer, (MaskedConvStage, MaskedGroupNorm)):
        return layer._linearize(tr)
    if isinstance(layer, nn.Sequential):
        for sub in layer:
            tr = _propagate(sub, tr)
        return tr
    if isinstance(layer, (nn.Identity, nn.Dropout)):
        return tr
    if isinstance(layer, nn.Flatten):
        return tr.reshape((-1,))
    if isinstance(layer, nn.Linear):
        return _Trace(layer(tr.value), F.linear(tr.A, layer.weight), layer(tr.c))
    if isinstance(layer, nn.Conv1d):
        def nobias(a):
            return F.conv1d(a, layer.weight, None, layer.stride, layer.padding, layer.dilation, layer.groups)
        return _Trace(layer(tr.value[None])[0], nobias(tr.A), layer(tr.c[None])[0])
    if isinstance(layer, (nn.ReLU, nn.LeakyReLU)):
        slope = layer.negative_slope if isinstance(layer, nn.LeakyReLU) else 0.0
        # ReLU'(0) = 0
        gate = torch.where(tr.value > 0, torch.ones_like(tr.value), torch.full_like(tr.value, slope))
        return _Trace(tr.value * gate, tr.A * gate, tr.c * gate)
    if isinstance(layer, nn.MaxPool1d):
        v, idx = F.max_pool1d(tr.value[None], layer.kernel_size, layer.stride, layer.padding,
                              layer.dilation, layer.ceil_mode, return_indices=True)
        idx = idx[0]
        A = torch.gather(tr.A, -1, idx.expand(tr.A.shape[:-1] + idx.shape[-1:]))
        return _Trace(v[0], A, torch.gather(tr.c, -1, idx))
    if isinstance(layer, nn.AvgPool1d):
        return _Trace(layer(tr.value[None])[0], layer(tr.A), layer(tr.c[None])[0])
    if isinstance(layer, nn.BatchNorm1d):
        if layer.training or not layer.track_running_stats:
            raise UnsupportedArchitectureError("batch norm must use running statistics (eval mode)")
        scale = layer.weight / torch.sqrt(layer.running_var + layer.eps)
        shift = layer.bias - layer.running_mean * scale
        if tr.value.dim() == 2:
            scale, shift = scale[:, None], shift[:, None]
        return tr.scale_shift(scale, shift)
    raise UnsupportedArchitectureError(f"cannot linearize layer {type(layer).__name__}")


def linearize_at(model: nn.Module, x, mask=None) -> AffineForm:
    """Exact affine form of a ReLU network around one unbatched input ``x``."""
    if model.training:
        raise UnsupportedArchitectureError("linearization requires eval mode")
    if not hasattr(model, "_linearize"):
        raise UnsupportedArchitectureError(f"cannot linearize model {type(model).__name__}")
    m64 = copy.deepcopy(model).double().eval()
    x = torch.as_tensor(x, dtype=torch.float64)
    D = x.numel()
    tr = _Trace(x.clone(), torch.eye(D, dtype=torch.float64).reshape((D,) + tuple(x.shape)),
                torch.zeros_like(x))
    with torch.no_grad():
        if isinstance(m64, MaskedCNN):
            if mask is None:
                raise ValueError("masked_cnn requires an input mask")
            out = m64._linearize(tr, torch.as_tensor(mask, dtype=torch.float64))
        else:
            out = m64._linearize(tr.reshape((-1,)))
    return AffineForm(out.A.reshape(D, -1), out.c.reshape(-1))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: nn.Module, path, extra: dict | None = None) -> Path:
    """Write parameters and buffers as safetensors; the ClassifierSpec rides in the metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    # one metadata key: the writer emits multi-key metadata in hash order,
    # which would make the file bytes differ between processes
    meta = {"ecgrobust": json.dumps({"spec": model.spec.to_dict(), "extra": extra or {}}, sort_keys=True)}
    save_file(tensors, str(path), metadata=meta)
    return path


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if "ecgrobust" not in meta:
        raise ValueError(f"{path}: checkpoint has no spec block")
    block = json.loads(meta["ecgrobust"])
    model = build_classifier(ClassifierSpec.from_dict(block["spec"]))
    state = load_file(str(path))
    model.load_state_dict(state)
    model.eval()
    return model, block.get("extra", {})


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
