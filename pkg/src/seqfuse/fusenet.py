"""Segmentation networks parameterized by integration level, weight sharing,
and fusion operator.

Three integration levels: input (one network over all channels), mid
(per-sequence early stacks fused right before the dilated-pyramid head),
end (per-sequence full networks whose probability maps are averaged).
Parallel branches can be fully independent, fully shared (one storage,
gradients accumulate), or L2-tied (identical init, distinct storage, a
penalty pulling each branch toward the elementwise branch mean).

The backbone is a compact strided residual encoder with a multi-rate
dilated-convolution pyramid head and bilinear upsampling back to input
resolution.  Batch-norm affine weights follow the sharing mode, but running
statistics are always per-branch.
"""

import copy
import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

INTEGRATIONS = ("input", "mid", "end")
SHARINGS = ("independent", "shared", "l2_tied")
FUSION_OPS = ("concat", "subtract_pair", "mean")

PROB_EPS = 1e-7


class ConfigError(Exception):
    """An invalid integration/sharing/fusion combination, naming the violated rule."""


class UsageError(Exception):
    """An operation called on a model whose sharing mode does not support it."""


@dataclass(frozen=True)
class BackboneSpec:
    base_channels: int = 16
    n_stages: int = 4
    dilation_rates: tuple = (2, 4, 6)
    split_stage: int = 4

    def validate(self):
        if self.base_channels < 1 or self.n_stages < 1:
            raise ConfigError("base_channels and n_stages must be >= 1")
        if not 1 <= self.split_stage <= self.n_stages:
            raise ConfigError(
                f"split_stage must lie in [1, n_stages={self.n_stages}], got {self.split_stage}"
                " (the pyramid head always lies after the split)")
        return self

    def stage_width(self, i):
        """Output channels of stage i (1-indexed); stem is width(0)."""
        return self.base_channels * 2 ** min(i, 2)


@dataclass(frozen=True)
class FusionConfig:
    integration: str = "input"
    sharing: str | None = None
    fusion_op: str = "concat"
    n_seq: int = 4
    n_slices: int = 5
    tie_lambda: float = 1e-3
    pair: tuple | None = None  # (pre_index, post_index) for subtract_pair
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def validate(self):
        self.backbone.validate()
        if self.integration not in INTEGRATIONS:
            raise ConfigError(f"unknown integration {self.integration!r}")
        if self.fusion_op not in FUSION_OPS:
            raise ConfigError(f"unknown fusion_op {self.fusion_op!r}")
        if self.n_seq < 1 or self.n_slices < 1:
            raise ConfigError("n_seq and n_slices must be >= 1")
        if self.tie_lambda < 0:
            raise ConfigError("tie_lambda must be >= 0")
        if self.integration == "input":
            if self.sharing is not None:
                raise ConfigError("input-level integration has no parallel branches: "
                                  "sharing must be unset")
            if self.fusion_op != "concat":
                raise ConfigError("input-level integration concatenates channels: "
                                  f"fusion_op must be 'concat', got {self.fusion_op!r}")
        else:
            if self.sharing not in SHARINGS:
                raise ConfigError(f"{self.integration}-level integration needs sharing "
                                  f"in {SHARINGS}, got {self.sharing!r}")
        if self.fusion_op == "subtract_pair":
            if self.integration != "mid" or self.sharing != "shared":
                raise ConfigError("subtract_pair requires mid-level integration with fully "
                                  "shared branch weights")
            if (self.pair is None or len(self.pair) != 2 or self.pair[0] == self.pair[1]
                    or not all(0 <= i < self.n_seq for i in self.pair)):
                raise ConfigError(f"subtract_pair needs one designated (pre, post) index pair "
                                  f"in [0,{self.n_seq}), got {self.pair!r}")
        elif self.pair is not None:
            raise ConfigError("pair is only meaningful with fusion_op='subtract_pair'")
        if self.integration == "mid" and self.fusion_op == "mean":
            raise ConfigError("mid-level integration fuses features by 'concat' or "
                              "'subtract_pair', not 'mean'")
        if self.integration == "end" and self.fusion_op != "mean":
            raise ConfigError("end-level integration averages per-sequence predictions: "
                              f"fusion_op must be 'mean', got {self.fusion_op!r}")
        return self

    def to_dict(self):
        return {
            "integration": self.integration,
            "sharing": self.sharing,
            "fusion_op": self.fusion_op,
            "n_seq": self.n_seq,
            "n_slices": self.n_slices,
            "tie_lambda": self.tie_lambda,
            "pair": list(self.pair) if self.pair is not None else None,
            "backbone": {
                "base_channels": self.backbone.base_channels,
                "n_stages": self.backbone.n_stages,
                "dilation_rates": list(self.backbone.dilation_rates),
                "split_stage": self.backbone.split_stage,
            },
        }

    @classmethod
    def from_dict(cls, d):
        bb = d.get("backbone", {})
        return cls(
            integration=d["integration"], sharing=d.get("sharing"),
            fusion_op=d.get("fusion_op", "concat"), n_seq=d.get("n_seq", 4),
            n_slices=d.get("n_slices", 5), tie_lambda=d.get("tie_lambda", 1e-3),
            pair=tuple(d["pair"]) if d.get("pair") is not None else None,
            backbone=BackboneSpec(
                base_channels=bb.get("base_channels", 16),
                n_stages=bb.get("n_stages", 4),
                dilation_rates=tuple(bb.get("dilation_rates", (2, 4, 6))),
                split_stage=bb.get("split_stage", 4),
            ),
        ).validate()


NORM_MODE = "batch"  # experiment hook


class BranchNorm2d(nn.Module):
    """BatchNorm2d whose affine weights follow the owning module's sharing mode
    while running statistics stay per-branch."""

    def __init__(self, num_features, n_branches=1, momentum=0.1, eps=1e-5):
        super().__init__()
        self.num_features = num_features
        self.n_branches = n_branches
        self.momentum = momentum
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(n_branches, num_features))
        self.register_buffer("running_var", torch.ones(n_branches, num_features))

    def forward(self, x, branch=0):
        if NORM_MODE == "instance":
            if x.shape[-2] * x.shape[-1] == 1:  # global-pool branch: affine only
                return x * self.weight[:, None, None] + self.bias[:, None, None]
            return F.instance_norm(x, None, None, self.weight, self.bias,
                                   True, 0.0, self.eps)
        return F.batch_norm(
            x, self.running_mean[branch], self.running_var[branch],
            self.weight, self.bias, self.training, self.momentum, self.eps)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1, n_branches=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = BranchNorm2d(cout, n_branches)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = BranchNorm2d(cout, n_branches)
        if stride != 1 or cin != cout:
            self.skip_conv = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.skip_bn = BranchNorm2d(cout, n_branches)
        else:
            self.skip_conv = None

    def forward(self, x, branch=0):
        h = F.relu(self.bn1(self.conv1(x), branch))
        h = self.bn2(self.conv2(h), branch)
        s = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x), branch)
        return F.relu(h + s)


class StageStack(nn.Module):
    """Stem (optional) plus residual stages first..last of the width schedule."""

    def __init__(self, in_channels, spec, first_stage, last_stage, with_stem, n_branches=1):
        super().__init__()
        self.with_stem = with_stem
        cin = in_channels
        if with_stem:
            self.stem_conv = nn.Conv2d(cin, spec.base_channels, 3, padding=1, bias=False)
            self.stem_bn = BranchNorm2d(spec.base_channels, n_branches)
            cin = spec.base_channels
        self.blocks = nn.ModuleList()
        for i in range(first_stage, last_stage + 1):
            stride = 2 if i <= 2 else 1
            dilation = 1 if i <= 2 else 2
            self.blocks.append(ResidualBlock(cin, spec.stage_width(i), stride=stride,
                                             dilation=dilation, n_branches=n_branches))
            cin = spec.stage_width(i)
        self.out_channels = cin

    def forward(self, x, branch=0):
        if self.with_stem:
            x = F.relu(self.stem_bn(self.stem_conv(x), branch))
        for block in self.blocks:
            x = block(x, branch)
        return x


class PyramidHead(nn.Module):
    """Multi-rate dilated-convolution pyramid: 1x1 branch, one 3x3 branch per
    dilation rate, and a global-pooling branch, projected and classified."""

    def __init__(self, in_channels, spec, n_branches=1, n_classes=2):
        super().__init__()
        width = spec.base_channels * 2
        self.conv1x1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1x1 = BranchNorm2d(width, n_branches)
        self.dil_convs = nn.ModuleList()
        self.dil_bns = nn.ModuleList()
        for r in spec.dilation_rates:
            self.dil_convs.append(nn.Conv2d(in_channels, width, 3, padding=r,
                                            dilation=r, bias=False))
            self.dil_bns.append(BranchNorm2d(width, n_branches))
        self.pool_conv = nn.Conv2d(in_channels, width, 1, bias=False)
        self.pool_bn = BranchNorm2d(width, n_branches)
        n_branches_total = 2 + len(spec.dilation_rates)
        self.project = nn.Conv2d(width * n_branches_total, width, 1, bias=False)
        self.project_bn = BranchNorm2d(width, n_branches)
        self.classify = nn.Conv2d(width, n_classes, 1)

    def forward(self, x, branch=0):
        hw = x.shape[-2:]
        outs = [F.relu(self.bn1x1(self.conv1x1(x), branch))]
        for conv, bn in zip(self.dil_convs, self.dil_bns):
            outs.append(F.relu(bn(conv(x), branch)))
        pooled = F.relu(self.pool_bn(self.pool_conv(x.mean(dim=(2, 3), keepdim=True)), branch))
        outs.append(pooled.expand(-1, -1, hw[0], hw[1]))
        h = F.relu(self.project_bn(self.project(torch.cat(outs, dim=1)), branch))
        return self.classify(h)


class SingleNet(nn.Module):
    """Full encoder + pyramid head, upsampling logits to input resolution."""

    def __init__(self, in_channels, spec, n_branches=1):
        super().__init__()
        self.encoder = StageStack(in_channels, spec, 1, spec.n_stages,
                                  with_stem=True, n_branches=n_branches)
        self.head = PyramidHead(self.encoder.out_channels, spec, n_branches=n_branches)

    def forward(self, x, branch=0):
        logits = self.head(self.encoder(x, branch), branch)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def _exact_mean(stacked):
    """Order-invariant mean over dim 0: float32 terms summed exactly in float64."""
    total = stacked.double().sum(dim=0) / stacked.shape[0]
    return total.to(stacked.dtype)


class FusionModel(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        config.validate()
        self.config = config
        spec = config.backbone
        n, s = config.n_seq, config.n_slices

        if config.integration == "input":
            self.net = SingleNet(n * s, spec)
        elif config.integration == "mid":
            if config.sharing == "shared":
                n_stats = 2 if config.fusion_op == "subtract_pair" else n
                self.early = StageStack(s, spec, 1, spec.split_stage,
                                        with_stem=True, n_branches=n_stats)
            else:
                self.early_branches = nn.ModuleList(
                    [StageStack(s, spec, 1, spec.split_stage, with_stem=True)
                     for _ in range(n)])
            w = spec.stage_width(spec.split_stage)
            fused_ch = w if config.fusion_op == "subtract_pair" else n * w
            if spec.split_stage < spec.n_stages:
                self.late = StageStack(fused_ch, spec, spec.split_stage + 1, spec.n_stages,
                                       with_stem=False)
                head_in = self.late.out_channels
            else:
                self.late = None
                head_in = fused_ch
            self.head = PyramidHead(head_in, spec)
        else:  # end
            if config.sharing == "shared":
                self.branch_net = SingleNet(s, spec, n_branches=n)
            else:
                self.branch_nets = nn.ModuleList([SingleNet(s, spec) for _ in range(n)])

        if config.sharing == "l2_tied":
            self._tie_branches()

    def _tie_branches(self):
        """Identical initialization across branches: copy branch 0 into the rest."""
        branches = self.branch_modules()
        ref = branches[0].state_dict()
        for b in branches[1:]:
            b.load_state_dict(copy.deepcopy(ref))

    # -- structure accessors -------------------------------------------------

    def branch_modules(self):
        if self.config.integration == "mid" and self.config.sharing != "shared":
            return list(self.early_branches)
        if self.config.integration == "end" and self.config.sharing != "shared":
            return list(self.branch_nets)
        return []

    def branch_parameter_groups(self):
        """Per-branch parameter lists in matching order (distinct-storage modes)."""
        mods = self.branch_modules()
        if not mods:
            raise UsageError(f"sharing={self.config.sharing!r} has no per-branch "
                             "parameter groups")
        return [list(m.parameters()) for m in mods]

    def early_parameters(self):
        """Early-stage parameters, pooled over branches where they are distinct."""
        if self.config.integration != "mid":
            raise UsageError("early_parameters applies to mid-level models")
        if self.config.sharing == "shared":
            return list(self.early.parameters())
        return [p for m in self.early_branches for p in m.parameters()]

    def _split(self, x):
        return x.split(self.config.n_slices, dim=1)

    def branch_features(self, x, i):
        """Early features of branch i (mid-level models)."""
        if self.config.integration != "mid":
            raise UsageError("branch_features applies to mid-level models")
        xs = self._split(x)
        if self.config.sharing == "shared":
            return self.early(xs[i], branch=self._stat_branch(i))
        return self.early_branches[i](xs[i])

    def _stat_branch(self, i):
        # subtract_pair keeps stats only for its two branches
        if self.config.fusion_op == "subtract_pair":
            return list(self.config.pair).index(i)
        return i

    def fused_features(self, x):
        """Mid-level feature fusion: channel concat, or post-minus-pre subtraction."""
        if self.config.integration != "mid":
            raise UsageError("fused_features applies to mid-level models")
        if self.config.fusion_op == "subtract_pair":
            pre, post = self.config.pair
            return self.branch_features(x, post) - self.branch_features(x, pre)
        feats = [self.branch_features(x, i) for i in range(self.config.n_seq)]
        return torch.cat(feats, dim=1)

    # -- forward --------------------------------------------------------------

    def forward(self, x):
        """(B, n_seq*n_slices, H, W) -> per-pixel class probabilities (B, 2, H, W)."""
        c_expected = self.config.n_seq * self.config.n_slices
        if x.shape[1] != c_expected:
            raise ValueError(f"expected {c_expected} channels, got {x.shape[1]}")
        if self.config.integration == "input":
            return torch.softmax(self.net(x), dim=1)
        if self.config.integration == "mid":
            h = self.fused_features(x)
            if self.late is not None:
                h = self.late(h)
            logits = self.head(h)
            logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear",
                                   align_corners=False)
            return torch.softmax(logits, dim=1)
        # end-level: average the per-sequence probability maps
        xs = self._split(x)
        if self.config.sharing == "shared":
            probs = [torch.softmax(self.branch_net(xi, branch=i), dim=1)
                     for i, xi in enumerate(xs)]
        else:
            probs = [torch.softmax(net(xi), dim=1)
                     for net, xi in zip(self.branch_nets, xs)]
        return _exact_mean(torch.stack(probs, dim=0))


def build_model(config: FusionConfig, seed: int) -> FusionModel:
    """Deterministic construction: module init order is fixed, so seeding the
    global torch generator pins every weight."""
    config.validate()
    torch.manual_seed(seed)
    return FusionModel(config)


def parameter_count(params):
    return sum(p.numel() for p in params)


def l2_tie_penalty(groups, tie_lambda):
    """tie_lambda * sum_i ||theta_i - theta_bar||^2 over matching tensors."""
    total = None
    for tensors in zip(*groups):
        mean = torch.stack(list(tensors), dim=0).mean(dim=0)
        for t in tensors:
            term = ((t - mean) ** 2).sum()
            total = term if total is None else total + term
    if total is None:
        raise ValueError("empty parameter groups")
    return tie_lambda * total


def tie_penalty(model: FusionModel):
    """The L2 tie on parallel branch weights; only defined for l2_tied models."""
    if model.config.sharing != "l2_tied":
        raise UsageError(f"tie_penalty is only defined for l2_tied models, "
                         f"not sharing={model.config.sharing!r}")
    return l2_tie_penalty(model.branch_parameter_groups(), model.config.tie_lambda)


def cross_entropy_probs(probs, target):
    """Per-pixel CE of probability maps against a boolean target, averaged
    over pixels (and batch).  Probabilities are clamped at PROB_EPS."""
    p_true = torch.where(target.bool(), probs[..., 1, :, :], probs[..., 0, :, :])
    return -torch.log(p_true.clamp_min(PROB_EPS)).mean()


def forward(model: FusionModel, sample):
    """Spec-level single-sample forward: returns a (2, H, W) numpy probability map."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(sample.stack))[None]
        return model(x)[0].numpy()


def loss(model: FusionModel, sample, prediction):
    """CE of a forward() prediction against the sample target, plus the tie
    penalty exactly when the model is l2_tied.  Returns a float."""
    pred = torch.as_tensor(prediction)
    target = torch.from_numpy(np.ascontiguousarray(sample.target))
    if pred.shape[-2:] != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} does not match "
                         f"target {tuple(target.shape)}")
    value = cross_entropy_probs(pred, target)
    if model.config.sharing == "l2_tied":
        value = value + tie_penalty(model)
    return float(value.detach())


def save_checkpoint(model: FusionModel, path, extra=None):
    torch.save({"format": 1, "config": model.config.to_dict(),
                "state": model.state_dict(), "extra": dict(extra or {})}, path)
    return path


def load_checkpoint(path, expected_config: FusionConfig | None = None) -> FusionModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = FusionConfig.from_dict(blob["config"])
    if expected_config is not None and config != expected_config.validate():
        raise ConfigError(f"checkpoint config {config} != expected {expected_config}")
    model = FusionModel(config)
    model.load_state_dict(blob["state"])
    model.extra = blob.get("extra", {})
    model.eval()
    return model


def state_bytes(model):
    """Serialized parameters+buffers, for cheap in-memory best-state keeping."""
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getvalue()


def load_state_bytes(model, blob):
    model.load_state_dict(torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False))
    return model
