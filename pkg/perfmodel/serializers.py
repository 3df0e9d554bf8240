from rest_framework import serializers
import logging

from kv_store.layout import ModelSpec
from .topology import RATE_FIELDS, Topology

logger = logging.getLogger(name="django")


class ModelSpecSerializer(serializers.Serializer):
    layers = serializers.IntegerField(min_value=1)
    heads = serializers.IntegerField(min_value=1)
    head_dim = serializers.IntegerField(min_value=1)
    batch = serializers.IntegerField(min_value=1)
    prompt_len = serializers.IntegerField(min_value=1)
    max_output = serializers.IntegerField(min_value=1)
    elem_bytes = serializers.IntegerField(min_value=2, max_value=2, default=2)

    def create(self, validated_data):
        return ModelSpec(**validated_data)


class TopologySerializer(serializers.Serializer):
    """
    Numbers may be written as "10e9" in YAML, which loads as a string;
    FloatField converts it.
    """
    name = serializers.CharField(default='custom')
    description = serializers.CharField(default='', allow_blank=True)
    num_csds = serializers.IntegerField(min_value=1)
    bw_host_interconnect = serializers.FloatField()
    bw_csd_internal = serializers.FloatField()
    bw_ssd_read = serializers.FloatField()
    bw_ssd_write = serializers.FloatField()
    bw_weight_link = serializers.FloatField()
    bw_host_memory = serializers.FloatField()
    t_host_compute = serializers.FloatField()
    t_accel_compute = serializers.FloatField()
    t_cpu_compute = serializers.FloatField()
    host_mem_budget = serializers.FloatField(min_value=0)
    weight_residency = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.0)
    kv_residency = serializers.ChoiceField(choices=['storage', 'memory'], default='storage')

    def validate(self, attrs):
        errors = {name: 'must be positive' for name in RATE_FIELDS if not attrs[name] > 0}
        if errors:
            raise serializers.ValidationError(errors)
        return attrs

    def create(self, validated_data):
        return Topology(**validated_data)
