"""Run configuration: a flat YAML mapping of dotted keys, checked against SCHEMA.

Example::

    data.csv: ETTh1.csv
    model.d_model: 16
    training.epochs_float: 30
    quant.policy: paper-default

Nested sections (``model: {d_model: 16}``) are flattened to the same keys.
Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import DatasetSplits, SeriesFrame, load_ett_csv, parse_synthetic_spec, prepare
from .errors import ConfigError
from .model import ModelConfig
from .quant import QuantPolicy, default_paper_policy
from .train import TrainConfig

POLICIES = ("paper-default", "none", "custom")

# key -> (type, default); None default means optional / derived
SCHEMA: dict[str, tuple[type | tuple, object]] = {
    "data.csv": (str, None),
    "data.synthetic": (str, None),
    "data.column": (str, "OT"),
    "data.n": (int, 48),
    "data.m": (int, 24),
    "data.normalization": (str, "standard"),
    "model.token_len": (int, 24),
    "model.d_model": (int, 32),
    "model.n_heads": (int, 4),
    "model.d_ff": (int, 128),
    "model.enc_layers": (int, 2),
    "model.dec_layers": (int, 2),
    "model.dropout": (float, 0.1),
    "training.epochs_float": (int, 20),
    "training.epochs_qat": (int, 10),
    "training.batch_size": (int, 32),
    "training.lr": (float, 1e-4),
    "training.seed": (int, 0),
    "quant.policy": (str, "paper-default"),
    "quant.weight_bits": (int, 2),
    "quant.input_bits": (int, 2),
    "quant.quantize_inputs": (bool, True),
    "quant.bias_product": (bool, True),
    "quant.shift": (bool, False),
    "quant.bias_bits": ((int, type(None)), 32),
    "quant.exempt": (list, []),
    "quant.ema_momentum": (float, 0.99),
    "quant.shift_frac_bits": (int, 31),
    "output.dir": (str, "runs"),
    "output.checkpoint": (str, None),
    "output.metrics": (str, None),
    "output.quantized": (str, None),
}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in d.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, full + "."))
        else:
            out[full] = value
    return out


def _check_type(key: str, value, kind) -> object:
    if value is None and SCHEMA[key][1] is None:
        return None
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{key}: expected {kinds[0].__name__}, got a boolean")
    if not isinstance(value, kinds):
        raise ConfigError(f"{key}: expected {'/'.join(k.__name__ for k in kinds)}, got {type(value).__name__}")
    if key == "quant.exempt" and not all(isinstance(v, str) for v in value):
        raise ConfigError("quant.exempt must be a list of role names")
    return value


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def from_dict(cls, raw: dict | None) -> RunConfig:
        flat = _flatten(raw or {})
        unknown = sorted(set(flat) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in flat.items():
            values[key] = _check_type(key, value, SCHEMA[key][0])
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls.from_dict({})
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of keys to values")
        return cls.from_dict(raw)

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, **flat) -> RunConfig:
        values = dict(self.values)
        for key, value in flat.items():
            if value is not None:
                values[key] = _check_type(key, value, SCHEMA[key][0])
        cfg = RunConfig(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        if v["data.normalization"] not in ("standard", "center"):
            raise ConfigError("data.normalization must be 'standard' or 'center'")
        if v["quant.policy"] not in POLICIES:
            raise ConfigError(f"quant.policy must be one of {POLICIES}")
        for key in ("training.epochs_float", "training.epochs_qat"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        if v["training.batch_size"] < 1 or v["training.lr"] <= 0:
            raise ConfigError("training.batch_size and training.lr must be positive")
        self.model_config()
        if v["quant.policy"] != "none":
            self._policy_kwargs()

    # derived objects

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            n=v["data.n"],
            m=v["data.m"],
            token_len=v["model.token_len"],
            d_model=v["model.d_model"],
            n_heads=v["model.n_heads"],
            d_ff=v["model.d_ff"],
            enc_layers=v["model.enc_layers"],
            dec_layers=v["model.dec_layers"],
            dropout=v["model.dropout"],
            seed=v["training.seed"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs_float=v["training.epochs_float"],
            epochs_qat=v["training.epochs_qat"] if v["quant.policy"] != "none" else 0,
            batch_size=v["training.batch_size"],
            lr=v["training.lr"],
            seed=v["training.seed"],
        )

    def _policy_kwargs(self) -> dict:
        v = self.values
        kw = dict(
            quantize_inputs=v["quant.quantize_inputs"],
            quantize_bias_by_scale_product=v["quant.bias_product"],
            shift_approximation=v["quant.shift"],
            bias_bits=v["quant.bias_bits"],
            ema_momentum=v["quant.ema_momentum"],
            shift_frac_bits=v["quant.shift_frac_bits"],
        )
        QuantPolicy(weight_bits=v["quant.weight_bits"], input_bits=v["quant.input_bits"], **kw)
        return kw

    def policy(self, model) -> QuantPolicy | None:
        v = self.values
        if v["quant.policy"] == "none":
            return None
        kw = self._policy_kwargs()
        if v["quant.policy"] == "paper-default":
            if v["quant.weight_bits"] != v["quant.input_bits"]:
                return QuantPolicy(
                    weight_bits=v["quant.weight_bits"],
                    input_bits=v["quant.input_bits"],
                    exempt_roles=default_paper_policy(model).exempt_roles,
                    **kw,
                )
            return default_paper_policy(model, v["quant.weight_bits"], **kw)
        try:
            policy = QuantPolicy(
                weight_bits=v["quant.weight_bits"], input_bits=v["quant.input_bits"], exempt_roles=v["quant.exempt"], **kw
            )
            policy.check_roles(model.roles())
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return policy

    def load_frame(self) -> SeriesFrame:
        v = self.values
        if v["data.synthetic"]:
            return parse_synthetic_spec(v["data.synthetic"])
        if not v["data.csv"]:
            raise ConfigError("data.csv is required (or pass --synthetic)")
        return load_ett_csv(v["data.csv"], v["data.column"])

    def dataset(self) -> DatasetSplits:
        return prepare(self.load_frame(), self.values["data.normalization"])

    def output(self, name: str) -> Path:
        explicit = self.values[f"output.{name}"]
        if explicit:
            return Path(explicit)
        filename = {"checkpoint": "model.qfts", "metrics": "metrics.csv", "quantized": "model.qftq"}[name]
        return Path(self.values["output.dir"]) / filename

    def data_meta(self, data: DatasetSplits) -> dict:
        v = self.values
        return {
            "column": v["data.column"],
            "n": v["data.n"],
            "m": v["data.m"],
            "normalization": v["data.normalization"],
            "scaler": {"mean": data.scaler.mean, "std": data.scaler.std},
        }
