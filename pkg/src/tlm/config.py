"""Flat, typed experiment configs and the single-run driver.

A config file is flat TOML: one ``key = value`` per field, no tables.
Unknown keys and ill-typed values are rejected before any compute.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .attention import RegularizerSpec
from .checkpoint import save_checkpoint
from .masking import ConfigError
from .tasks import Dataset, DatasetSpec, make_dataset
from .training import RunRecord, TrainConfig, plain, train
from .transformer import BlockConfig, ModelConfig, Transformer

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs/run"
    # data
    task: str = "copy"
    vocab_size: int = 8
    min_len: int = 6
    max_len: int = 6
    train_size: int = 500
    eval_size: int = 100
    data_seed: int = 0
    designated_token: int = 4
    data_path: str = ""
    eval_path: str = ""
    tokenizer: str = "whitespace"
    eval_fraction: float = 0.2
    # model
    architecture: str = ""  # empty: derived from the task
    layers: int = 1
    d_emb: int = 32
    heads: int = 4
    ffn_hidden: int = 0  # 0: 4 * d_emb
    hidden_dropout: float = 0.1
    max_positions: int = 0  # 0: derived from the data
    # regularizer
    scheme: str = "none"
    rate: float = 0.1
    p_self: float = 0.5
    encoder_rate: float = -1.0  # negative: use rate
    decoder_rate: float = -1.0
    cross_attention_tlm: bool = False
    independent_decoder_strategy: bool = False
    # training
    seed: int = 0
    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 20  # 0 disables early stopping
    eval_every: int = 1

    # --- construction -------------------------------------------------
    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config key")
        values = {}
        for key, value in data.items():
            values[key] = _coerce(key, value, known[key].type)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{nested[0]}: config must be flat, tables are not allowed")
        return cls.from_mapping(data)

    def replace(self, **changes) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **{k: _coerce(k, v, _field_type(k)) for k, v in changes.items()})
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_toml_value(v)}\n" for k, v in self.to_dict().items())

    # --- derived configs ----------------------------------------------
    def validate(self) -> None:
        self.dataset_spec()
        self.regularizer()
        self.train_config()
        BlockConfig(self.d_emb, self.heads, self.ffn_hidden or None, self.hidden_dropout)
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.architecture not in ("", "encoder-classifier", "encoder-decoder"):
            raise ConfigError(f"architecture: unknown value {self.architecture!r}")

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            kind=self.task, vocab_size=self.vocab_size, min_len=self.min_len, max_len=self.max_len,
            train_size=self.train_size, eval_size=self.eval_size, seed=self.data_seed,
            designated_token=self.designated_token, path=self.data_path or None,
            eval_path=self.eval_path or None, tokenizer=self.tokenizer, eval_fraction=self.eval_fraction,
        )

    def regularizer(self) -> RegularizerSpec:
        return RegularizerSpec(
            schemes=self.scheme, rate=self.rate, p_self=self.p_self,
            encoder_rate=None if self.encoder_rate < 0 else self.encoder_rate,
            decoder_rate=None if self.decoder_rate < 0 else self.decoder_rate,
            cross_attention_tlm=self.cross_attention_tlm,
            independent_decoder_strategy=self.independent_decoder_strategy,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs, seed=self.seed,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            patience=self.patience or None, eval_every=self.eval_every,
        )

    def model_config(self, dataset: Dataset) -> ModelConfig:
        arch = self.architecture or ("encoder-decoder" if dataset.seq2seq else "encoder-classifier")
        if arch == "encoder-decoder" and not dataset.seq2seq:
            raise ConfigError(f"architecture: {self.task} is a classification task")
        if arch == "encoder-classifier" and dataset.seq2seq:
            raise ConfigError(f"architecture: {self.task} needs an encoder-decoder")
        return ModelConfig(
            vocab_size=dataset.vocab_size,
            max_len=self.max_positions or dataset.max_input_len,
            layers=self.layers,
            block=BlockConfig(self.d_emb, self.heads, self.ffn_hidden or None, self.hidden_dropout,
                              self.regularizer()),
            architecture=arch,
            num_classes=max(dataset.num_classes, 2),
        )


def _field_type(name: str):
    for f in fields(ExperimentConfig):
        if f.name == name:
            return f.type
    raise ConfigError(f"{name}: unknown config key")


def _coerce(key: str, value, type_name):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    if type_name == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if type_name == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if type_name == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


RUN_FILES = ("runrecord.json", "metrics.csv", "checkpoint.bin")


def run_experiment(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> RunRecord:
    """Build data and model from ``cfg``, train, and write the three run files."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(cfg.dataset_spec())
    model_cfg = cfg.model_config(dataset)
    model = Transformer(model_cfg, seed=cfg.seed)
    record = train(model, dataset, cfg.train_config(), model_cfg.block.regularizer,
                   run_id=cfg.run_id, config=plain(_hashable(cfg)))
    record.save(out / RUN_FILES[0])
    record.write_metrics_csv(out / RUN_FILES[1])
    save_checkpoint(model, out / RUN_FILES[2], extra={"run_id": cfg.run_id, "seed": cfg.seed})
    return record


def _hashable(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d.pop("output_dir")
    return d
