from rest_framework import serializers
import logging

import yaml

from engine.schemes import FUNCTIONAL_SCHEMES, Scheme
from perfmodel.exceptions import PresetNotFound
from perfmodel.presets import get_topology, get_workload
from perfmodel.serializers import ModelSpecSerializer, TopologySerializer
from .experiments import SPEC_AXES, SWEEP_AXES, ExperimentConfig

logger = logging.getLogger(name="django")

INTEGER_AXES = SPEC_AXES + ('num_csds', 'host_budget_bytes')


class PresetOrInlineField(serializers.Field):
    """
    A preset name looked up in the registry, or an inline mapping validated
    by `serializer_class`.
    """

    def __init__(self, lookup, serializer_class, **kwargs):
        self.lookup = lookup
        self.serializer_class = serializer_class
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        if isinstance(data, str):
            try:
                return self.lookup(data)
            except PresetNotFound as exc:
                raise serializers.ValidationError(exc.args[0])
        if isinstance(data, dict):
            serializer = self.serializer_class(data=data)
            serializer.is_valid(raise_exception=True)
            return serializer.save()
        raise serializers.ValidationError("expected a preset name or a mapping")

    def to_representation(self, value):
        return value.as_dict()


class ExperimentConfigSerializer(serializers.Serializer):
    name = serializers.CharField(default='experiment')
    model = PresetOrInlineField(get_workload, ModelSpecSerializer)
    topology = PresetOrInlineField(get_topology, TopologySerializer, required=False)
    schemes = serializers.ListField(
        child=serializers.ChoiceField(choices=Scheme.choices),
        allow_empty=False,
        default=lambda: [str(scheme) for scheme in FUNCTIONAL_SCHEMES],
    )
    num_csds = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    spill_interval = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    # None leaves the host memory the topology has after the resident weights
    host_budget_bytes = serializers.IntegerField(min_value=0, allow_null=True, default=None)
    seed = serializers.IntegerField(min_value=0, default=0)
    functional = serializers.BooleanField(default=False)
    sweep = serializers.DictField(child=serializers.ListField(child=serializers.FloatField()), default=dict)
    output = serializers.CharField(allow_blank=True, default='')

    def validate_schemes(self, value):
        return list(dict.fromkeys(value))

    def validate_sweep(self, value):
        unknown = sorted(set(value) - set(SWEEP_AXES))
        if unknown:
            raise serializers.ValidationError(f"unknown sweep axes {unknown}, expected some of {list(SWEEP_AXES)}")
        if len(value) > 2:
            raise serializers.ValidationError(f"at most 2 sweep axes per run, got {len(value)}")
        axes = {}
        for axis, points in value.items():
            if not points:
                raise serializers.ValidationError(f"sweep axis {axis} has no points")
            if axis in INTEGER_AXES:
                if any(point != int(point) for point in points):
                    raise serializers.ValidationError(f"sweep axis {axis} takes whole numbers")
                points = [int(point) for point in points]
                lowest = 0 if axis == 'host_budget_bytes' else 1
                if min(points) < lowest:
                    raise serializers.ValidationError(f"sweep axis {axis} must be at least {lowest}")
            elif not all(0.0 <= point <= 1.0 for point in points):
                raise serializers.ValidationError(f"sweep axis {axis} must lie in [0, 1]")
            axes[axis] = sorted(set(points))
        return axes

    def validate(self, attrs):
        if attrs['functional'] and Scheme.KV_IN_HOST in attrs['schemes']:
            raise serializers.ValidationError(
                {'schemes': f"{Scheme.KV_IN_HOST} has no functional path, set functional: false"})
        return attrs

    def create(self, validated_data):
        sweep = validated_data.pop('sweep')
        return ExperimentConfig(
            spec=validated_data.pop('model'),
            topology=validated_data.pop('topology', None) or get_topology(),
            schemes=tuple(Scheme(scheme) for scheme in validated_data.pop('schemes')),
            sweep=tuple((axis, tuple(points)) for axis, points in sweep.items()),
            **validated_data,
        )


def load_config(path, seed: int = None) -> ExperimentConfig:
    """
    read and validate an experiment config. Raises OSError, yaml.YAMLError or
    serializers.ValidationError.
    """
    with open(path) as handle:
        data = yaml.safe_load(handle)
    if not isinstance(data, dict):
        raise serializers.ValidationError({'non_field_errors': ["config must be a mapping of fields"]})
    if seed is not None:
        data['seed'] = seed
    return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    serializer = ExperimentConfigSerializer(data=data)
    serializer.is_valid(raise_exception=True)
    config = serializer.save()
    logger.info(f"config {config.name}: {len(config.schemes)} schemes, sweep axes {[a for a, _ in config.sweep]}")
    return config
