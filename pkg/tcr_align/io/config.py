import os
import sys
import tomli_w
from dataclasses import dataclass, field
from typing import Any, Dict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..core.cascade import CascadeConfig
from ..core.pipeline import PipelineConfig
from ..errors import ConfigInvalid, MissingFile, ParseError
from ..synth import SynthConfig
from ..utils import put


def load_toml(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise MissingFile(f'TOML file {path} does not exist')
    with open(path, 'rb') as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ParseError(path, getattr(e, 'lineno', 0), str(e))


def write_toml(path: str, data: Dict[str, Any]) -> None:
    put(path, tomli_w.dumps(data))


def _table(data: Dict[str, Any], name: str) -> Dict[str, Any]:
    table = data.get(name, {})
    if not isinstance(table, dict):
        raise ConfigInvalid(f'`{name}` must be a table')
    return table


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a CLI run depends on besides its inputs and the seed.
    """
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'RunConfig':
        unknown = set(data) - {'cascade', 'synth', 'pipeline'}
        if unknown:
            raise ConfigInvalid(f'Unknown configuration tables {sorted(unknown)}')
        pipeline = _table(data, 'pipeline')
        try:
            pipeline_config = PipelineConfig(**pipeline)
        except TypeError as e:
            raise ConfigInvalid(f'Invalid `pipeline` table: {e}')
        return RunConfig(CascadeConfig.from_dict(_table(data, 'cascade')),
                         SynthConfig.from_dict(_table(data, 'synth')), pipeline_config)

    def to_dict(self) -> Dict[str, Any]:
        return {'cascade': self.cascade.to_dict(), 'synth': self.synth.to_dict(), 'pipeline': self.pipeline.to_dict()}

    def with_seed(self, seed: int) -> 'RunConfig':
        return RunConfig(self.cascade.replace(rng_seed=seed), self.synth, self.pipeline)


def load_run_config(path: str) -> RunConfig:
    return RunConfig.from_dict(load_toml(path))
