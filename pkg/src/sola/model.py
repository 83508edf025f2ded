"""Two-branch detector assembly.

An RGB backbone runs in parallel with a noise backbone fronted by the
constrained residual convolution. After each used stage the two streams
are fused by channel attention; the fused stream feeds the next RGB
stage while the noise stream, by default, stays pure. Patch-attention
enhancement is inserted after selected fused stages, the final map is
pooled to the target grid, and the anomaly head produces the maps and
the forgery logit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from torchvision.models import resnet18

from . import __version__
from .anomaly import AnomalyMaps, AnomalyPredictorBank, ClassifierHead
from .asrm import AsrmConv
from .attention import DcamBlock, LemBlock

FAMILIES = ("resnet18", "tiny")
GRIDS = (8, 16, 32)
CONSTRAINT_MODES = ("asrm", "srm", "lsrm", "none")
_MODE_ALIASES = {"srm-frozen": "srm", "lsrm-unconstrained": "lsrm"}


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "resnet18"
    stages_used: int = 3
    grid: int = 16
    input_size: int = 256

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown backbone family {self.family!r}; choose from {FAMILIES}")
        if self.grid not in GRIDS:
            raise ConfigurationError(f"grid must be one of {GRIDS}, got {self.grid}")
        if self.family == "tiny" and self.stages_used != 3:
            raise ConfigurationError("tiny backbone has exactly 3 fused stages")
        if self.family == "resnet18" and self.stages_used not in (3, 4):
            raise ConfigurationError("resnet18 backbone supports 3 or 4 stages")
        if self.stages_used == 4 and self.grid == 32:
            raise ConfigurationError("grid 32 is not available with 4 stages")
        if self.input_size % 64:
            raise ConfigurationError(f"input size must be a multiple of 64, got {self.input_size}")
        if self.stage_spatial()[-1] < self.grid:
            raise ConfigurationError(
                f"input size {self.input_size} leaves a {self.stage_spatial()[-1]}px map; "
                f"pooling to grid {self.grid} would have to upsample"
            )

    def stage_spatial(self) -> list[int]:
        """Spatial size of each fused stage's output, before pooling."""
        if self.family == "tiny":
            factors = [8, 16, 16] if self.grid != 32 else [8, 8, 8]
        else:
            factors = [4, 8, 16, 32][: self.stages_used]
            if self.grid == 32:
                factors[2] = 8
        return [self.input_size // f for f in factors]


@dataclass(frozen=True)
class ModelFlags:
    use_noise_branch: bool = True
    use_lem: bool = True
    constraint_mode: str = "asrm"
    lem_stages: tuple[int, ...] = (2, 3)
    noise_consumes_fused: bool = False

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.constraint_mode, self.constraint_mode)
        object.__setattr__(self, "constraint_mode", mode)
        if mode not in CONSTRAINT_MODES:
            raise ConfigurationError(
                f"unknown constraint mode {self.constraint_mode!r}; choose from {CONSTRAINT_MODES}"
            )


def _conv_stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _make_backbone(spec: BackboneSpec):
    """Returns (stem, stages, stage_channels) for one branch."""
    if spec.family == "tiny":
        # widths 32-64-128-256; the last stride drops when a 32-grid is
        # requested so pooling never has to upsample
        s2 = 1 if spec.grid == 32 else 2
        stem = _conv_stage(3, 32, stride=4)
        stages = nn.ModuleList(
            [_conv_stage(32, 64, 2), _conv_stage(64, 128, s2), _conv_stage(128, 256, 1)]
        )
        return stem, stages, [64, 128, 256]

    net = resnet18(weights=None)
    if spec.grid == 32 and spec.stages_used == 3:
        # keep the last used layer at 32x32 instead of striding down
        net.layer3[0].conv1.stride = (1, 1)
        net.layer3[0].downsample[0].stride = (1, 1)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    layers = [net.layer1, net.layer2, net.layer3, net.layer4][: spec.stages_used]
    channels = [64, 128, 256, 512][: spec.stages_used]
    return stem, nn.ModuleList(layers), channels


def _make_asrm(mode: str) -> AsrmConv:
    if mode == "asrm":
        return AsrmConv.init_from_srm(constraint_enabled=True, trainable=True)
    if mode == "srm":
        return AsrmConv.init_from_srm(constraint_enabled=False, trainable=False)
    if mode == "lsrm":
        return AsrmConv.init_from_srm(constraint_enabled=False, trainable=True)
    return AsrmConv.random_init()


class SolaModel(nn.Module):
    """Full detector: forward(images) -> (AnomalyMaps, logits)."""

    def __init__(self, spec: BackboneSpec = BackboneSpec(), flags: ModelFlags = ModelFlags()):
        super().__init__()
        self.spec = spec
        self.flags = flags

        self.rgb_stem, self.rgb_stages, channels = _make_backbone(spec)
        # noise modules are built even when the branch is disabled so
        # ablation probes can verify the outputs ignore them
        self.noise_stem, self.noise_stages, _ = _make_backbone(spec)
        self.asrm = _make_asrm(flags.constraint_mode)
        self.dcam = nn.ModuleList([DcamBlock(c) for c in channels])
        spatial = spec.stage_spatial()
        self.lem = nn.ModuleDict()
        for s in flags.lem_stages:
            if not 1 <= s <= len(channels):
                continue
            grid = min(16, spatial[s - 1])
            positions = (spatial[s - 1] // grid) ** 2
            self.lem[str(s)] = LemBlock(channels[s - 1], grid=grid, patch_positions=positions)
        self.pool = nn.AdaptiveAvgPool2d(spec.grid)
        self.head = AnomalyPredictorBank(channels[-1])
        self.classifier = ClassifierHead()

    def _validate(self, x: torch.Tensor) -> None:
        n = self.spec.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != n or x.shape[3] != n:
            raise ValueError(f"expected (B, 3, {n}, {n}) input, got {tuple(x.shape)}")
        if x.min() < 0 or x.max() > 1:
            raise ValueError("input values must lie in [0, 1]")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled fused feature grid (B, C, grid, grid)."""
        self._validate(x)
        rgb = self.rgb_stem(x)
        noise = self.noise_stem(self.asrm(x)) if self.flags.use_noise_branch else None
        fused = rgb
        for idx, rgb_stage in enumerate(self.rgb_stages):
            stage_no = idx + 1
            rgb = rgb_stage(fused)
            if noise is not None:
                noise = self.noise_stages[idx](noise)
                fused = self.dcam[idx](rgb, noise)
                if self.flags.noise_consumes_fused:
                    noise = fused
            else:
                fused = rgb
            if self.flags.use_lem and str(stage_no) in self.lem:
                fused = self.lem[str(stage_no)](fused)
        return self.pool(fused)

    def forward(self, x: torch.Tensor):
        maps = self.head(self.features(x))
        logits = self.classifier(maps.stacked_second_order())
        return maps, logits

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build(spec: BackboneSpec = BackboneSpec(), flags: ModelFlags = ModelFlags(),
          seed: int | None = None) -> SolaModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SolaModel(spec, flags)


class BaselineClassifier(nn.Module):
    """Plain single-stream backbone with a pooled linear head.

    The control model for generalization comparisons: same backbone
    capacity, no noise branch, no attention, no anomaly maps.
    """

    def __init__(self, spec: BackboneSpec = BackboneSpec(family="tiny")):
        super().__init__()
        self.spec = spec
        self.stem, self.stages, channels = _make_backbone(spec)
        self.fc = nn.Linear(channels[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.fc(h.mean(dim=(2, 3))).squeeze(-1)


_SIDECAR_KEYS = {"spec", "flags", "version", "extra"}


def save_checkpoint(model: SolaModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "spec": asdict(model.spec),
        "flags": asdict(model.flags),
        "version": __version__,
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_checkpoint(path) -> tuple[SolaModel, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar {sidecar_path} not found")
    sidecar = json.loads(sidecar_path.read_text())
    unknown = set(sidecar) - _SIDECAR_KEYS
    if unknown:
        raise ValueError(f"checkpoint sidecar has unknown keys: {sorted(unknown)}")
    flags_dict = dict(sidecar["flags"])
    flags_dict["lem_stages"] = tuple(flags_dict.get("lem_stages", ()))
    model = SolaModel(BackboneSpec(**sidecar["spec"]), ModelFlags(**flags_dict))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state, strict=True)
    return model, sidecar
