"""Experiment configuration: a flat INI file with sections, materialized
defaults, canonical serialization, and a content hash used in manifests."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .attacks import AttackSpec
from .data import AugmentSpec
from .losses import LossConfig
from .models import EncoderConfig
from .training import OptimizerConfig, ScenarioSpec


class ConfigError(Exception):
    pass


DEFAULTS = {
    "experiment": {
        "seed": "0",
        "output_dir": "runs/out",
    },
    "dataset": {
        "source": "synthetic",  # synthetic | synthetic_images | idx | csv
        "kind": "two_gaussians",
        "n": "2000",
        "dim": "20",
        "classes": "2",
        "separation": "8.0",
        "size": "16",
        "contrast": "0.45",
        "noise_sigma": "0.12",
        "shortcut_amp": "0.0",
        "images_path": "",
        "labels_path": "",
        "csv_path": "",
        "split": "0.8,0.0,0.2",  # D_p, D_f, test; D_f fraction 0 -> D_f = D_p
    },
    "model": {
        "kind": "dense",
        "layer_widths": "64,64,32,32,16",
        "head_dim": "16",
    },
    "loss": {
        "scheme": "SL",
        "temperature": "",
        "alpha": "0.5",
        "beta": "0.5",
        "beta_scl": "",
        "combo_weights": "1.0,1.0",
    },
    "scenario": {
        "scenario": "ST",
        "pretrain_epochs": "50",
        "finetune_epochs": "30",
        "batch_size": "128",
        "adv_batch_size": "256",
        "lr": "0.0003",
        "adam_beta1": "0.9",
        "adam_beta2": "0.999",
        "adam_eps": "1e-8",
    },
    "attack_train": {
        "epsilon": "0.03137254901960784",  # 8/255
        "steps": "5",
        "step_size": "",
        "random_start": "false",
    },
    "attack_eval": {
        "epsilons": "0.01568627450980392,0.03137254901960784",
        "steps": "20",
        "steps_tm2": "40",
        "threat_models": "I",
        "random_start": "true",
    },
    "augment": {
        "gaussian_noise_sigma": "0.1",
        "feature_dropout_prob": "0.1",
        "crop_shift_max_pixels": "2",
        "horizontal_flip_prob": "0.0",
        "erase_patch_prob": "0.3",
        "erase_patch_size": "4",
    },
    "analysis": {
        "cka": "true",
        "n_samples": "512",
        "probe_layers": "",
        "eps_sweep": "",
    },
    "sweep": {
        "scenarios": "ST",
        "schemes": "SL",
        "seeds": "0",
        "workers": "1",
    },
}


@dataclass
class ExperimentConfig:
    sections: dict  # section -> {key: str value}, fully materialized

    def get(self, section: str, key: str) -> str:
        return self.sections[section][key]

    def getfloat(self, section, key) -> float:
        return float(self.get(section, key))

    def getint(self, section, key) -> int:
        return int(self.get(section, key))

    def getbool(self, section, key) -> bool:
        v = self.get(section, key).strip().lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"[{section}] {key}: not a boolean: {v!r}")

    def getlist(self, section, key, cast=str) -> list:
        v = self.get(section, key).strip()
        if not v:
            return []
        return [cast(part.strip()) for part in v.split(",")]

    def canonical(self) -> str:
        buf = io.StringIO()
        for section in sorted(self.sections):
            buf.write(f"[{section}]\n")
            for key in sorted(self.sections[section]):
                buf.write(f"{key} = {self.sections[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    # ---- typed views -------------------------------------------------

    def encoder_config(self, input_shape) -> EncoderConfig:
        kind = self.get("model", "kind")
        input_shape = tuple(input_shape)
        if kind == "dense" and len(input_shape) > 1:
            # dense encoders flatten image inputs in-graph
            import numpy as np

            input_shape = (int(np.prod(input_shape)),)
        return EncoderConfig(kind,
                             tuple(self.getlist("model", "layer_widths", int)),
                             input_shape)

    def loss_config(self, scheme: str | None = None) -> LossConfig:
        scheme = scheme or self.get("loss", "scheme")
        temp = self.get("loss", "temperature").strip()
        # The adversarial-term weight is per-objective: SupCon and NT-Xent
        # gradients differ in scale, so a single beta over- or under-weights
        # one of them. beta_scl overrides beta for the SCL scheme when set.
        beta = self.getfloat("loss", "beta")
        beta_scl = self.get("loss", "beta_scl").strip()
        if beta_scl and scheme == "SCL":
            beta = float(beta_scl)
        return LossConfig(
            scheme=scheme,
            temperature=float(temp) if temp else None,
            alpha=self.getfloat("loss", "alpha"),
            beta=beta,
            combo_weights=tuple(self.getlist("loss", "combo_weights", float)) or (1.0, 1.0),
        )

    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(
            gaussian_noise_sigma=self.getfloat("augment", "gaussian_noise_sigma"),
            feature_dropout_prob=self.getfloat("augment", "feature_dropout_prob"),
            crop_shift_max_pixels=self.getint("augment", "crop_shift_max_pixels"),
            horizontal_flip_prob=self.getfloat("augment", "horizontal_flip_prob"),
            erase_patch_prob=self.getfloat("augment", "erase_patch_prob"),
            erase_patch_size=self.getint("augment", "erase_patch_size"),
        )

    def train_attack(self, driving_loss: str = "CE", is_image: bool = True) -> AttackSpec:
        step = self.get("attack_train", "step_size").strip()
        return AttackSpec(
            epsilon=self.getfloat("attack_train", "epsilon"),
            steps=self.getint("attack_train", "steps"),
            step_size=float(step) if step else None,
            random_start=self.getbool("attack_train", "random_start"),
            driving_loss=driving_loss,
            clamp=(0.0, 1.0) if is_image else None,
        )

    def eval_attacks(self, scheme: str, is_image: bool = True) -> list:
        clamp = (0.0, 1.0) if is_image else None
        rs = self.getbool("attack_eval", "random_start")
        specs = []
        for eps in self.getlist("attack_eval", "epsilons", float):
            for tm in self.getlist("attack_eval", "threat_models"):
                if tm == "I":
                    specs.append(AttackSpec(epsilon=eps,
                                            steps=self.getint("attack_eval", "steps"),
                                            random_start=rs, driving_loss="CE",
                                            clamp=clamp))
                elif tm == "II":
                    driving = "SCL" if "SCL" in scheme else "CL"
                    specs.append(AttackSpec(epsilon=eps,
                                            steps=self.getint("attack_eval", "steps_tm2"),
                                            random_start=rs, driving_loss=driving,
                                            clamp=clamp))
                else:
                    raise ConfigError(f"unknown threat model {tm!r}")
        return specs

    def scenario_spec(self, scenario: str | None = None, scheme: str | None = None,
                      seed: int | None = None, is_image: bool = True,
                      train_epsilon: float | None = None) -> ScenarioSpec:
        scenario = scenario or self.get("scenario", "scenario")
        scheme = scheme or self.get("loss", "scheme")
        attack = None
        if scenario != "ST":
            attack = self.train_attack(is_image=is_image)
            if train_epsilon is not None:
                from dataclasses import replace

                attack = replace(attack, epsilon=train_epsilon)
        return ScenarioSpec(
            scenario=scenario,
            scheme=scheme,
            pretrain_epochs=self.getint("scenario", "pretrain_epochs"),
            finetune_epochs=self.getint("scenario", "finetune_epochs"),
            batch_size=self.getint("scenario", "batch_size"),
            adv_batch_size=self.getint("scenario", "adv_batch_size"),
            optimizer=OptimizerConfig(lr=self.getfloat("scenario", "lr"),
                                      beta1=self.getfloat("scenario", "adam_beta1"),
                                      beta2=self.getfloat("scenario", "adam_beta2"),
                                      eps=self.getfloat("scenario", "adam_eps")),
            loss=self.loss_config(scheme),
            train_attack=attack,
            augment=self.augment_spec(),
            seed=self.getint("experiment", "seed") if seed is None else seed,
        )


def load_config(path=None, text: str | None = None, overrides=None) -> ExperimentConfig:
    """Load an INI config, materialize defaults, apply key=value overrides."""
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
    sections = {s: dict(v) for s, v in DEFAULTS.items()}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in sections[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            sections[section][key] = value
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {ov!r}")
        target, value = ov.split("=", 1)
        section, key = target.split(".", 1)
        if section not in sections or key not in sections[section]:
            raise ConfigError(f"unknown override target {target!r}")
        sections[section][key] = value
    cfg = ExperimentConfig(sections)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    source = cfg.get("dataset", "source")
    if source not in ("synthetic", "synthetic_images", "idx", "csv"):
        raise ConfigError(f"[dataset] source: unknown value {source!r}")
    fracs = cfg.getlist("dataset", "split", float)
    if len(fracs) != 3 or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError("[dataset] split must be three fractions summing to 1")
    if cfg.get("model", "kind") not in ("dense", "conv_small"):
        raise ConfigError("[model] kind must be dense or conv_small")
    cfg.loss_config()  # raises on bad scheme/temperature
    for tm in cfg.getlist("attack_eval", "threat_models"):
        if tm not in ("I", "II"):
            raise ConfigError(f"[attack_eval] threat_models: unknown {tm!r}")


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(cfg.canonical())
