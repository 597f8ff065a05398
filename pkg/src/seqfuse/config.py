"""Experiment configuration: a versioned JSON schema parsed fail-loud.

Unknown keys are errors so that typos never silently fall back to defaults.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import CANONICAL_SEQUENCES
from .fusenet import BackboneSpec, FusionConfig
from .phantom import BackgroundTexture, PhantomSpec, SequenceProfile, canonical_profiles
from .seqdrop import DropPolicy
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


def _check_keys(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}; "
                          f"allowed: {sorted(allowed)}")


@dataclass
class DatasetConfig:
    root: str = "data/phantom"
    splits: dict = field(default_factory=lambda: {"train": 20, "val": 6, "test": 10})
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


@dataclass
class PreprocessConfig:
    tiles: tuple = (8, 8)
    resize: tuple = (64, 64)
    clip_limit: float | None = None


@dataclass
class EvalConfig:
    censor: tuple = ()
    subset_assay: bool = False
    bootstrap_resamples: int = 500
    bootstrap_seed: int = 0


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        d = self.dataset
        p = d.phantom
        t = self.train
        return {
            "schema": SCHEMA_VERSION,
            "out_dir": self.out_dir,
            "dataset": {
                "root": d.root,
                "splits": dict(d.splits),
                "phantom": {
                    "grid_shape": list(p.grid_shape),
                    "spacing_mm": list(p.spacing_mm),
                    "n_lesions_range": list(p.n_lesions_range),
                    "lesion_radius_range_mm": list(p.lesion_radius_range_mm),
                    "background": {
                        "smoothness_vox": p.background.smoothness_vox,
                        "noise_amplitude": p.background.noise_amplitude,
                        "smooth_amplitude": p.background.smooth_amplitude,
                    },
                    "sequences": [
                        {"name": sp.name, "lesion_contrast": sp.lesion_contrast,
                         "halo_contrast": sp.halo_contrast,
                         "correlates_with_gt": sp.correlates_with_gt,
                         "background_group": sp.background_group,
                         "lesion_visibility": sp.lesion_visibility,
                         "artifact_contrast": sp.artifact_contrast}
                        for sp in p.sequence_profiles
                    ],
                    "seed": p.seed,
                    "n_distractors_range": list(p.n_distractors_range),
                    "distractor_contrast": p.distractor_contrast,
                    "n_artifacts_range": list(p.n_artifacts_range),
                    "artifact_radius_range_mm": list(p.artifact_radius_range_mm),
                },
            },
            "preprocess": {
                "tiles": list(self.preprocess.tiles),
                "resize": list(self.preprocess.resize),
                "clip_limit": self.preprocess.clip_limit,
            },
            "model": self.model.to_dict(),
            "train": {
                "epochs": t.epochs,
                "batch_size": t.batch_size,
                "learning_rate": t.learning_rate,
                "val_every": t.val_every,
                "val_censor": list(t.val_censor) if t.val_censor else None,
                "seed": t.seed,
                "dropout": ({"enabled": True, "p": t.dropout.p_drop}
                            if t.dropout is not None else {"enabled": False, "p": 0.25}),
                "oversample_factor": t.oversample_factor,
                "saliency_every": t.saliency_every,
            },
            "eval": {
                "censor": list(self.eval.censor),
                "subset_assay": self.eval.subset_assay,
                "bootstrap_resamples": self.eval.bootstrap_resamples,
                "bootstrap_seed": self.eval.bootstrap_seed,
            },
        }

    @classmethod
    def from_dict(cls, doc):
        _check_keys(doc, {"schema", "out_dir", "dataset", "preprocess", "model",
                          "train", "eval"}, "config root")
        if doc.get("schema") != SCHEMA_VERSION:
            raise ConfigError(f"config schema must be {SCHEMA_VERSION}, "
                              f"got {doc.get('schema')!r}")
        cfg = cls()
        if "out_dir" in doc:
            cfg.out_dir = str(doc["out_dir"])
        if "dataset" in doc:
            cfg.dataset = _parse_dataset(doc["dataset"])
        if "preprocess" in doc:
            cfg.preprocess = _parse_preprocess(doc["preprocess"])
        if "model" in doc:
            cfg.model = _parse_model(doc["model"])
        if "train" in doc:
            cfg.train = _parse_train(doc["train"])
        if "eval" in doc:
            cfg.eval = _parse_eval(doc["eval"])
        return cfg


def _parse_dataset(d):
    _check_keys(d, {"root", "splits", "phantom"}, "dataset")
    out = DatasetConfig()
    if "root" in d:
        out.root = str(d["root"])
    if "splits" in d:
        _check_keys(d["splits"], {"train", "val", "test"}, "dataset.splits")
        out.splits = {k: int(v) for k, v in d["splits"].items()}
    if "phantom" in d:
        out.phantom = _parse_phantom(d["phantom"])
    return out


def _parse_phantom(d):
    _check_keys(d, {"grid_shape", "spacing_mm", "n_lesions_range", "lesion_radius_range_mm",
                    "background", "sequences", "seed", "n_distractors_range",
                    "distractor_contrast", "n_artifacts_range",
                    "artifact_radius_range_mm"}, "dataset.phantom")
    kwargs = {}
    if "grid_shape" in d:
        kwargs["grid_shape"] = tuple(int(v) for v in d["grid_shape"])
    if "spacing_mm" in d:
        kwargs["spacing_mm"] = tuple(float(v) for v in d["spacing_mm"])
    if "n_lesions_range" in d:
        kwargs["n_lesions_range"] = tuple(int(v) for v in d["n_lesions_range"])
    if "lesion_radius_range_mm" in d:
        kwargs["lesion_radius_range_mm"] = tuple(float(v) for v in d["lesion_radius_range_mm"])
    if "background" in d:
        _check_keys(d["background"], {"smoothness_vox", "noise_amplitude", "smooth_amplitude"},
                    "dataset.phantom.background")
        kwargs["background"] = BackgroundTexture(**d["background"])
    if "sequences" in d:
        profiles = []
        for i, sp in enumerate(d["sequences"]):
            _check_keys(sp, {"name", "lesion_contrast", "halo_contrast",
                             "correlates_with_gt", "background_group",
                             "lesion_visibility", "artifact_contrast"},
                        f"dataset.phantom.sequences[{i}]")
            profiles.append(SequenceProfile(**sp))
        kwargs["sequence_profiles"] = tuple(profiles)
    else:
        kwargs["sequence_profiles"] = canonical_profiles()
    if "seed" in d:
        kwargs["seed"] = int(d["seed"])
    if "n_distractors_range" in d:
        kwargs["n_distractors_range"] = tuple(int(v) for v in d["n_distractors_range"])
    if "distractor_contrast" in d:
        kwargs["distractor_contrast"] = float(d["distractor_contrast"])
    if "n_artifacts_range" in d:
        kwargs["n_artifacts_range"] = tuple(int(v) for v in d["n_artifacts_range"])
    if "artifact_radius_range_mm" in d:
        kwargs["artifact_radius_range_mm"] = tuple(float(v) for v in d["artifact_radius_range_mm"])
    try:
        return PhantomSpec(**kwargs).validate()
    except ValueError as e:
        raise ConfigError(f"dataset.phantom: {e}") from e


def _parse_preprocess(d):
    _check_keys(d, {"tiles", "resize", "clip_limit"}, "preprocess")
    out = PreprocessConfig()
    if "tiles" in d:
        out.tiles = tuple(int(v) for v in d["tiles"])
    if "resize" in d:
        out.resize = tuple(int(v) for v in d["resize"])
    if "clip_limit" in d:
        out.clip_limit = None if d["clip_limit"] is None else float(d["clip_limit"])
    return out


def _parse_model(d):
    _check_keys(d, {"integration", "sharing", "fusion_op", "n_seq", "n_slices",
                    "tie_lambda", "pair", "backbone"}, "model")
    if "backbone" in d:
        _check_keys(d["backbone"], {"base_channels", "n_stages", "dilation_rates",
                                    "split_stage"}, "model.backbone")
    try:
        return FusionConfig.from_dict({"integration": "input", **d})
    except Exception as e:
        raise ConfigError(f"model: {e}") from e


def _parse_train(d):
    _check_keys(d, {"epochs", "batch_size", "learning_rate", "val_every", "val_censor",
                    "seed", "dropout", "oversample_factor", "saliency_every"}, "train")
    out = TrainConfig()
    for key in ("epochs", "batch_size", "val_every", "seed", "saliency_every"):
        if key in d:
            setattr(out, key, int(d[key]))
    for key in ("learning_rate", "oversample_factor"):
        if key in d:
            setattr(out, key, float(d[key]))
    if "val_censor" in d and d["val_censor"]:
        out.val_censor = tuple(str(v) for v in d["val_censor"])
    if "dropout" in d:
        _check_keys(d["dropout"], {"enabled", "p"}, "train.dropout")
        if d["dropout"].get("enabled", False):
            out.dropout = DropPolicy(p_drop=float(d["dropout"].get("p", 0.25)))
        else:
            out.dropout = None
    try:
        return out.validate()
    except ValueError as e:
        raise ConfigError(f"train: {e}") from e


def _parse_eval(d):
    _check_keys(d, {"censor", "subset_assay", "bootstrap_resamples", "bootstrap_seed"}, "eval")
    out = EvalConfig()
    if "censor" in d:
        out.censor = tuple(str(v) for v in d["censor"])
    if "subset_assay" in d:
        out.subset_assay = bool(d["subset_assay"])
    if "bootstrap_resamples" in d:
        out.bootstrap_resamples = int(d["bootstrap_resamples"])
    if "bootstrap_seed" in d:
        out.bootstrap_seed = int(d["bootstrap_seed"])
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def validate_censor(censor, canonical=CANONICAL_SEQUENCES):
    unknown = set(censor) - set(canonical)
    if unknown:
        raise ConfigError(f"unknown sequence(s) in censor set: {sorted(unknown)}; "
                          f"known: {list(canonical)}")
    if set(censor) >= set(canonical):
        raise ConfigError("censor set removes every sequence")
    return tuple(censor)
