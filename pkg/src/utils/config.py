"""Configuration management for the phenotype pipeline."""

import copy
from pathlib import Path
from typing import Any, Mapping

import yaml

from src.contrastive import AlignmentSettings
from src.encoders import EncoderConfig
from src.errors import ConfigError
from src.regression import FinetuneConfig
from src.training import TrainHparams
from src.utils.reproducibility import fingerprint

# Command-line flag -> key inside the section of the stage being run.
STAGE_FLAGS = {
    "stage1": {"epochs": "epochs", "bs": "bs", "lr": "lr", "mask_ratio": "mask_ratio"},
    "stage2": {"epochs": "epochs", "bs": "bs", "lr": "lr", "tau_le": "tau_le", "tau_lt": "tau_lt"},
    "stage3": {"epochs": "epochs", "bs": "bs", "lr": "lr_head", "fraction": "fraction"},
}
ALL_STAGE_FLAGS = ("epochs", "bs", "lr", "mask_ratio", "tau_le", "tau_lt", "fraction")
GLOBAL_FLAGS = {
    "seed": "experiment.seed",
    "variant": "experiment.variant",
    "deterministic": "experiment.deterministic",
}


class Config:
    """Configuration loader and accessor."""

    def __init__(self, config_path: str | Path = "config.yaml"):
        """
        Initialize configuration from YAML file.

        Args:
            config_path: Path to the configuration YAML file
        """
        self.config_path = Path(config_path)
        self._config: dict[str, Any] = {}
        self.load()

    def load(self) -> None:
        """Load configuration from YAML file."""
        if not self.config_path.exists():
            raise ConfigError(f"Configuration file not found: {self.config_path}")

        try:
            with open(self.config_path, "r") as f:
                self._config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Configuration file is not valid YAML: {self.config_path}") from e
        if not isinstance(self._config, dict):
            raise ConfigError(f"Configuration root must be a mapping: {self.config_path}")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value by key using dot notation.

        Args:
            key: Configuration key (supports dot notation, e.g., 'stage1.lr')
            default: Default value if key not found

        Returns:
            Configuration value or default

        Example:
            >>> config.get('stage2.tau_le')
            0.1
        """
        value: Any = self._config
        for k in key.split("."):
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default
        return value

    def set(self, key: str, value: Any) -> None:
        keys = key.split(".")
        node = self._config
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value

    def apply_overrides(self, overrides: Mapping[str, Any]) -> "Config":
        """
        Override values by dotted key; ``None`` values are ignored.

        Args:
            overrides: Mapping of dotted keys to values

        Returns:
            self, for chaining
        """
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)
        return self

    @staticmethod
    def flag_overrides(flags: Mapping[str, Any], stage: str | None) -> dict[str, Any]:
        """
        Map command-line flags onto dotted keys.

        Stage flags (epochs, bs, lr, ...) apply to ``stage``; a flag the stage
        does not understand is a configuration error.
        """
        overrides: dict[str, Any] = {}
        for flag, key in GLOBAL_FLAGS.items():
            if flags.get(flag) is not None:
                overrides[key] = flags[flag]
        accepted = STAGE_FLAGS.get(stage or "", {})
        for flag in ALL_STAGE_FLAGS:
            if flags.get(flag) is None:
                continue
            if flag not in accepted:
                raise ConfigError(f"--{flag.replace('_', '-')} has no effect on this command")
            overrides[f"{stage}.{accepted[flag]}"] = flags[flag]
        return overrides

    def as_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self._config)

    def fingerprint(self) -> str:
        """16-hex-digit hash of the resolved configuration."""
        return fingerprint(self._config)

    def _section(self, name: str) -> dict[str, Any]:
        section = self.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        return section

    @property
    def variant(self) -> str:
        """Get experiment variant."""
        return self.get("experiment.variant", "C-TRIP")

    @property
    def seed(self) -> int:
        return int(self.get("experiment.seed", 0))

    @property
    def deterministic(self) -> bool:
        return bool(self.get("experiment.deterministic", False))

    @property
    def data_root(self) -> Path:
        """Get cohort root directory."""
        return Path(self.get("data.root", "data/synthetic"))

    @property
    def runs_dir(self) -> Path:
        return Path(self.get("experiment.runs_dir", "runs"))

    @property
    def split_fractions(self) -> list[float]:
        return [float(f) for f in self.get("data.fractions", [0.7, 0.15, 0.15])]

    @property
    def split_seed(self) -> int:
        return int(self.get("data.split_seed", 7))

    @property
    def num_workers(self) -> int:
        return int(self.get("data.num_workers", 0))

    def encoder_config(self, modality: str) -> EncoderConfig:
        """EncoderConfig for a modality; the cine stand-in reuses the localizer settings."""
        section = self._section("encoders")
        params = dict(section.get(modality) or (section.get("L") if modality == "C" else None) or {})
        mask_ratio = self.get("stage1.mask_ratio")
        if mask_ratio is not None:
            params["mask_ratio"] = float(mask_ratio)
        try:
            return EncoderConfig.default(modality, **params)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid encoder settings for {modality}: {e}") from e

    def _train_hparams(
        self, stage: str, seed: int | None = None, device: str | None = None, progress: bool = False
    ) -> TrainHparams:
        section = self._section(stage)
        try:
            return TrainHparams(
                epochs=int(section.get("epochs", 1)),
                batch_size=int(section.get("bs", 64)),
                lr=float(section.get("lr", 1e-4)),
                weight_decay=float(section.get("weight_decay", 0.05)),
                patience=int(section.get("patience", 20)),
                seed=self.seed if seed is None else seed,
                num_workers=self.num_workers,
                device=device,
                progress=progress,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid {stage} settings: {e}") from e

    def stage1_hparams(self, **kwargs) -> TrainHparams:
        return self._train_hparams("stage1", **kwargs)

    def stage2_hparams(self, **kwargs) -> TrainHparams:
        return self._train_hparams("stage2", **kwargs)

    def alignment_settings(self) -> AlignmentSettings:
        section = self._section("stage2")
        try:
            return AlignmentSettings(
                projection_dim=int(section.get("projection_dim", 256)),
                tau_le=float(section.get("tau_le", 0.1)),
                tau_lt=float(section.get("tau_lt", 0.25)),
                freeze_encoders=bool(section.get("freeze_encoders", False)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid stage2 settings: {e}") from e

    def finetune_config(self, fraction: float | None = None, seed: int | None = None,
                        device: str | None = None, progress: bool = False) -> FinetuneConfig:
        section = self._section("stage3")
        try:
            return FinetuneConfig(
                fraction=float(section.get("fraction", 1.0) if fraction is None else fraction),
                lr_head=float(section.get("lr_head", 1e-3)),
                lr_encoder=float(section.get("lr_encoder", 1e-4)),
                epochs=int(section.get("epochs", 100)),
                batch_size=int(section.get("bs", 64)),
                weight_decay=float(section.get("weight_decay", 0.05)),
                hidden_dim=int(section.get("hidden_dim", 256)),
                patience=int(section.get("patience", 20)),
                seed=self.seed if seed is None else seed,
                num_workers=self.num_workers,
                device=device,
                progress=progress,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid stage3 settings: {e}") from e
