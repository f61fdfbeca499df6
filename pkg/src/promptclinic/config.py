"""Experiment configuration files and shipped presets."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .classify import STRATEGIES, STRATEGY_MODES, STRATEGY_TEMPLATES
from .errors import ConfigError
from .prompting import PromptSpec
from .trainer import Hyperparams, PretrainConfig, TrainPolicy

MODEL_FIELDS = ("d_model", "n_layers", "n_heads", "d_ff", "max_len", "tie_embeddings", "init_std", "dtype")
POLICY_ALIASES = {"full": "full_finetune", "soft_prompt": "soft_prompt_only"}


def _build(cls, data: Mapping | None, path: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        default = getattr(cls(), f.name)
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise TypeError("expected true/false")
            elif isinstance(default, int) and not isinstance(default, bool):
                if isinstance(value, bool) or int(value) != float(value):
                    raise TypeError("expected an integer")
                value = int(value)
            elif isinstance(default, float):
                value = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.{f.name}: {exc}") from None
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    strategy: str = "verbalizer"
    corpus: dict = field(default_factory=lambda: {"synthetic": {"n": 200, "seed": 0}})
    speakers: tuple[str, ...] = ("PAR",)
    model: dict = field(default_factory=dict)
    prompt: PromptSpec | None = None
    policy: TrainPolicy = field(default_factory=TrainPolicy)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    grid: dict | None = None
    k: int = 10
    vote_last: int = 3
    seed: int = 0
    generative: dict = field(default_factory=lambda: {"normalize": True, "decode": "constrained"})

    @property
    def model_mode(self) -> str:
        return STRATEGY_MODES[self.strategy]

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("<root>: config must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown field")
        strategy = data.get("strategy", "verbalizer")
        if strategy not in STRATEGIES:
            raise ConfigError(f"strategy: must be one of {sorted(STRATEGIES)}, got {strategy!r}")

        if "prompt" not in data:
            raise ConfigError("prompt: missing template section")
        try:
            prompt = PromptSpec.from_dict(data["prompt"])
        except KeyError as exc:
            raise ConfigError(f"prompt.{exc.args[0]}: missing") from None
        except Exception as exc:  # noqa: BLE001 - template validation errors
            raise ConfigError(f"prompt: {exc}") from None
        if prompt.template.mode not in STRATEGY_TEMPLATES[strategy]:
            raise ConfigError(
                f"prompt.mode: {strategy} strategy needs one of {STRATEGY_TEMPLATES[strategy]}, "
                f"got {prompt.template.mode!r}"
            )

        policy_data = dict(data.get("policy") or {})
        if "strategy" in policy_data:
            policy_data["strategy"] = POLICY_ALIASES.get(policy_data["strategy"], policy_data["strategy"])
        sp_section = (data["prompt"] or {}).get("soft_prompt") or {}
        for pkey, skey in (("soft_prompt_length", "length"), ("soft_prompt_init", "init")):
            if skey in sp_section:
                if pkey in policy_data and policy_data[pkey] != sp_section[skey]:
                    raise ConfigError(f"policy.{pkey}: conflicts with prompt.soft_prompt.{skey}")
                policy_data[pkey] = sp_section[skey]
        if "lora_targets" in policy_data:
            policy_data["lora_targets"] = tuple(policy_data["lora_targets"])
        policy = _build(TrainPolicy, policy_data, "policy")

        model = dict(data.get("model") or {})
        for key in model:
            if key not in MODEL_FIELDS:
                raise ConfigError(f"model.{key}: unknown field (mode and vocab_size are derived)")

        hyper = _build(Hyperparams, data.get("hyperparams"), "hyperparams")
        seed = data.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed: expected an integer")
        if "seed" not in (data.get("hyperparams") or {}):
            hyper = dataclasses.replace(hyper, seed=seed)

        grid = data.get("grid")
        if grid is not None:
            if not isinstance(grid, Mapping) or not grid:
                raise ConfigError("grid: expected a non-empty mapping of hyperparameter -> values")
            hp_fields = {f.name for f in dataclasses.fields(Hyperparams)}
            for key, values in grid.items():
                if key not in hp_fields:
                    raise ConfigError(f"grid.{key}: not a hyperparameter")
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"grid.{key}: expected a non-empty list")
                for v in values:
                    _build(Hyperparams, {key: v}, f"grid.{key}")
            grid = {k: list(v) for k, v in grid.items()}

        k = data.get("k", 10)
        vote_last = data.get("vote_last", 3)
        if not isinstance(k, int) or k < 2:
            raise ConfigError("k: expected an integer >= 2")
        if not isinstance(vote_last, int) or vote_last < 1 or vote_last % 2 == 0:
            raise ConfigError("vote_last: expected an odd positive integer")
        if vote_last > hyper.epochs:
            raise ConfigError(f"vote_last: {vote_last} voted epochs but hyperparams.epochs is {hyper.epochs}")

        speakers = data.get("speakers", ["PAR"])
        if not speakers or not all(isinstance(s, str) for s in speakers):
            raise ConfigError("speakers: expected a non-empty list of tier codes")
        corpus = data.get("corpus", {"synthetic": {"n": 200, "seed": 0}})
        if not isinstance(corpus, Mapping) or not ({"synthetic", "chat_dir", "parsed"} & set(corpus)):
            raise ConfigError("corpus: expected one of 'synthetic', 'chat_dir' (+ 'manifest') or 'parsed'")
        if "chat_dir" in corpus and "manifest" not in corpus:
            raise ConfigError("corpus.manifest: required with corpus.chat_dir")

        generative = {"normalize": True, "decode": "constrained", **(data.get("generative") or {})}
        if generative["decode"] not in ("constrained", "free"):
            raise ConfigError("generative.decode: expected 'constrained' or 'free'")

        return cls(
            name=str(data.get("name", "experiment")),
            strategy=strategy,
            corpus=copy.deepcopy(dict(corpus)),
            speakers=tuple(speakers),
            model=model,
            prompt=prompt,
            policy=policy,
            pretrain=_build(PretrainConfig, data.get("pretrain"), "pretrain"),
            hyperparams=hyper,
            grid=grid,
            k=k,
            vote_last=vote_last,
            seed=seed,
            generative=generative,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "strategy": self.strategy,
            "corpus": copy.deepcopy(self.corpus),
            "speakers": list(self.speakers),
            "model": dict(self.model),
            "prompt": self.prompt.to_dict(),
            "policy": self.policy.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "hyperparams": self.hyperparams.to_dict(),
            "grid": self.grid,
            "k": self.k,
            "vote_last": self.vote_last,
            "seed": self.seed,
            "generative": dict(self.generative),
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def with_hyperparams(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, hyperparams=dataclasses.replace(self.hyperparams, **changes))

    def with_overrides(self, seed: int | None = None, k: int | None = None) -> "ExperimentConfig":
        data = self.to_dict()
        if seed is not None:
            data["seed"] = seed
            data["hyperparams"]["seed"] = seed
        if k is not None:
            data["k"] = k
        return ExperimentConfig.from_dict(data)


def preset_names() -> list[str]:
    files = resources.files("promptclinic").joinpath("presets").iterdir()
    return sorted(p.name[: -len(".yaml")] for p in files if p.name.endswith(".yaml"))


def load_config(path_or_preset: str | Path) -> ExperimentConfig:
    """Load a YAML experiment file, or a shipped preset by name."""
    path = Path(path_or_preset)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    elif str(path_or_preset) in preset_names():
        text = resources.files("promptclinic").joinpath("presets", f"{path_or_preset}.yaml").read_text(encoding="utf-8")
    else:
        raise ConfigError(f"<file>: no config file or preset named {str(path_or_preset)!r}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: invalid YAML: {exc}") from None
    return ExperimentConfig.from_dict(data or {})
