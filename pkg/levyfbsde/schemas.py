"""
Marshmallow schemas for experiment configuration files
"""
import hashlib
import json
from pathlib import Path
from typing import Dict, Union

from marshmallow import RAISE, Schema, ValidationError, fields, validate, validates, validates_schema

from levyfbsde.errors import ConfigError
from levyfbsde.gradient_estimator import POLICIES
from levyfbsde.levy_model import AMPLITUDES
from levyfbsde.malliavin_weights import SCHEDULES
from levyfbsde.model_coefficients import L_WEIGHTS

SCHEMA_VERSION = 1


class StrictSchema(Schema):
    class Meta:
        unknown = RAISE


class QuadratureSchema(StrictSchema):
    """Schema for the nu-quadrature settings"""
    split_radius = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    radial_nodes = fields.Int(validate=validate.Range(min=2, max=200))
    angular_nodes = fields.Int(validate=validate.Range(min=4, max=4096))


class MeasureSchema(StrictSchema):
    """Schema for a stable-like Levy measure"""
    dim = fields.Int(required=True, validate=validate.Range(min=1, max=3),
                     error_messages={'required': 'Measure dim is required'})
    beta = fields.Float(required=True,
                        validate=validate.Range(min=0, max=2, min_inclusive=False, max_inclusive=False,
                                                error='beta must lie in the open interval (0, 2)'),
                        error_messages={'required': 'Stability index beta is required'})
    amplitude = fields.Str(validate=validate.OneOf(list(AMPLITUDES)), load_default='const')
    amplitude_params = fields.Dict(keys=fields.Str(), values=fields.Float(), load_default=dict)
    truncation_radius = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False),
                                     load_default=0.05)
    quadrature = fields.Nested(QuadratureSchema, load_default=dict)


class HorizonSchema(StrictSchema):
    t = fields.Float(load_default=0.0)
    T = fields.Float(load_default=1.0)

    @validates_schema
    def validate_order(self, data, **kwargs):
        if data['T'] <= data['t']:
            raise ValidationError('horizon T must exceed t', 'T')


class EstimatorSchema(StrictSchema):
    """Schema for Monte Carlo estimator settings"""
    n_paths = fields.Int(validate=validate.Range(min=1), load_default=10000)
    time_nodes = fields.Int(validate=validate.Range(min=1, max=512), load_default=16)
    schedule = fields.Str(validate=validate.OneOf(list(SCHEDULES)), load_default='singular')
    epsilon = fields.Float(allow_none=True, validate=validate.Range(min=0, max=1, min_inclusive=False),
                           load_default=None)
    policy = fields.Str(validate=validate.OneOf(list(POLICIES)), load_default='resample')
    n_steps = fields.Int(validate=validate.Range(min=1, max=10000), load_default=20)
    x = fields.List(fields.Float(), allow_none=True, load_default=None)  # None: (0.5, 0, ..., 0)
    h = fields.List(fields.Float(), allow_none=True, load_default=None)  # None: e_1
    horizons = fields.List(fields.Float(validate=validate.Range(min=0, min_inclusive=False)),
                           load_default=lambda: [0.05, 0.1, 0.2, 0.5, 1.0])
    fd_delta = fields.Float(allow_none=True, validate=validate.Range(min=0, min_inclusive=False), load_default=None)


class GridSchema(StrictSchema):
    """Schema for value-function grids (probabilistic and deterministic solvers)"""
    box = fields.Float(validate=validate.Range(min=0, min_inclusive=False), load_default=4.0)
    space_nodes = fields.Int(validate=validate.Range(min=3, max=2001), load_default=41)
    time_slices = fields.Int(validate=validate.Range(min=2, max=1001), load_default=11)
    paths_per_node = fields.Int(validate=validate.Range(min=1), load_default=200)
    iterates_max = fields.Int(validate=validate.Range(min=1, max=100), load_default=8)
    tol = fields.Float(validate=validate.Range(min=0, min_inclusive=False), load_default=1e-3)
    splits = fields.Int(validate=validate.Range(min=1, max=64), load_default=1)
    pde_space_nodes = fields.Int(validate=validate.Range(min=5, max=4001), load_default=81)
    pde_dt = fields.Float(allow_none=True, validate=validate.Range(min=0, min_inclusive=False), load_default=None)


class ExperimentConfigSchema(StrictSchema):
    """Schema for a full experiment configuration"""
    version = fields.Int(validate=validate.Equal(SCHEMA_VERSION), load_default=SCHEMA_VERSION)
    seed = fields.Int(required=True, validate=validate.Range(min=0, max=2 ** 64 - 1),
                      error_messages={'required': 'seed is required'})
    measure = fields.Nested(MeasureSchema, required=True, error_messages={'required': 'measure is required'})
    model = fields.Str(load_default='additive')
    model_params = fields.Dict(keys=fields.Str(), load_default=dict)
    payoff = fields.Dict(keys=fields.Str(), allow_none=True, load_default=None)
    driver = fields.Dict(keys=fields.Str(), allow_none=True, load_default=None)
    l_weight = fields.Str(validate=validate.OneOf(list(L_WEIGHTS)), load_default='first-coordinate')
    horizon = fields.Nested(HorizonSchema, load_default=dict)
    estimator = fields.Nested(EstimatorSchema, load_default=dict)
    grid = fields.Nested(GridSchema, load_default=dict)
    output_dir = fields.Str(allow_none=True, load_default=None)

    @validates('model')
    def validate_model(self, value, **kwargs):
        from levyfbsde.models import is_known_model
        if not is_known_model(value):
            raise ValidationError(f"unknown model '{value}'")

    @validates_schema
    def validate_directions(self, data, **kwargs):
        dim = data['measure']['dim']
        est = data.get('estimator') or {}
        for key in ('x', 'h'):
            if est.get(key) is not None and len(est[key]) != dim:
                raise ValidationError(f'estimator.{key} must have {dim} entries', key)


def load_config(source: Union[str, Path, Dict]) -> Dict:
    """Validated config from a JSON path or a dict; schema problems become ConfigError"""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError({'_file': [f'cannot read config {source}: {err}']}) from err
    if isinstance(raw, dict):
        raw = dict(raw)
        for key in ('horizon', 'estimator', 'grid'):
            raw.setdefault(key, {})
    try:
        return ExperimentConfigSchema().load(raw)
    except ValidationError as err:
        raise ConfigError(err.messages) from err


def default_config(seed: int = 0, **overrides) -> Dict:
    """The built-in config (beta = 1.5, d = 1, additive model)"""
    raw = {'seed': seed, 'measure': {'dim': 1, 'beta': 1.5}}
    raw.update(overrides)
    return load_config(raw)


def config_hash(cfg: Dict) -> str:
    """sha256 of the canonical JSON dump"""
    blob = json.dumps(cfg, sort_keys=True, separators=(',', ':'), default=str).encode()
    return hashlib.sha256(blob).hexdigest()
