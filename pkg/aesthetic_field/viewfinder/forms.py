import json
import math
from typing import Optional

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from .distill import SCHEDULES, DistillConfig
from .geometry import CameraIntrinsics
from .search import SearchConfig


class RunConfigForm(forms.Form):
    """Effective run configuration: JSON config file merged with command-line flags"""

    # distillation
    iterations = forms.IntegerField(required=False, min_value=1)
    step_size = forms.FloatField(required=False)
    weight_decay = forms.FloatField(required=False, min_value=0.0)
    schedule = forms.ChoiceField(required=False, choices=[(s, s) for s in SCHEDULES])
    calibrate_decoder = forms.NullBooleanField(required=False)
    fit_projection = forms.NullBooleanField(required=False)

    # search
    samples_per_segment = forms.IntegerField(required=False, min_value=1)
    neighbors = forms.IntegerField(required=False, min_value=0)
    top_k = forms.IntegerField(required=False, min_value=1)
    refine_steps = forms.IntegerField(required=False, min_value=0)
    search_step_size = forms.FloatField(required=False)
    shift_radius = forms.FloatField(required=False, min_value=0.0)
    jitter_degrees = forms.FloatField(required=False, min_value=0.0)
    dedup_eps = forms.FloatField(required=False, min_value=0.0)
    rotation_weight = forms.FloatField(required=False, min_value=0.0)

    # intrinsics overrides
    fx = forms.FloatField(required=False)
    fy = forms.FloatField(required=False)
    cx = forms.FloatField(required=False)
    cy = forms.FloatField(required=False)
    width = forms.IntegerField(required=False, min_value=1)
    height = forms.IntegerField(required=False, min_value=1)

    INTRINSICS_FIELDS = ('fx', 'fy', 'cx', 'cy', 'width', 'height')

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None, **flags) -> 'RunConfigForm':
        """Merge a JSON config file with flags (flags win), rejecting unknown keys"""
        data = {}
        if config_path:
            with open(config_path, 'r', encoding='utf-8') as handle:
                try:
                    data = json.load(handle)
                except json.JSONDecodeError as e:
                    raise ValidationError(f"Config file {config_path} is not valid JSON: {e}", code='invalid_config')
            if not isinstance(data, dict):
                raise ValidationError(f"Config file {config_path} must hold a JSON object", code='invalid_config')
        unknown = sorted(set(data) - set(cls.base_fields))
        if unknown:
            raise ValidationError(f"Unknown config keys: {', '.join(unknown)}", code='unknown_keys',
                                  params={'keys': unknown})
        data.update({key: value for key, value in flags.items() if value is not None and key in cls.base_fields})
        form = cls(data=data)
        if not form.is_valid():
            messages = '; '.join(f"{field}: {' '.join(errors)}" for field, errors in form.errors.items())
            raise ValidationError(f"Invalid configuration: {messages}", code='invalid_config')
        return form

    def _positive(self, name: str):
        value = self.cleaned_data.get(name)
        if value is not None and not (value > 0 and math.isfinite(value)):
            raise ValidationError(f"{name} must be a positive finite number")
        return value

    def clean_step_size(self):
        return self._positive('step_size')

    def clean_search_step_size(self):
        return self._positive('search_step_size')

    def clean(self):
        cleaned_data = super().clean()
        given = [name for name in self.INTRINSICS_FIELDS if cleaned_data.get(name) is not None]
        if given and len(given) != len(self.INTRINSICS_FIELDS):
            missing = [name for name in self.INTRINSICS_FIELDS if name not in given]
            raise ValidationError(f"Intrinsics override is incomplete, missing: {', '.join(missing)}")
        return cleaned_data

    def effective(self) -> dict:
        """Cleaned values that were actually set"""
        return {key: value for key, value in self.cleaned_data.items() if value not in (None, '')}

    def distill_config(self) -> DistillConfig:
        data = self.cleaned_data
        return DistillConfig.from_settings(
            iterations=data.get('iterations'),
            step_size=data.get('step_size'),
            weight_decay=data.get('weight_decay'),
            schedule=data.get('schedule') or None,
            calibrate_decoder=data.get('calibrate_decoder'),
            fit_projection=data.get('fit_projection'),
        )

    def search_config(self, seed: int, threads: int) -> SearchConfig:
        data = self.cleaned_data
        jitter = data.get('jitter_degrees')
        return SearchConfig.from_settings(
            samples_per_segment=data.get('samples_per_segment'),
            neighbors=data.get('neighbors'),
            top_k=data.get('top_k'),
            refine_steps=data.get('refine_steps'),
            step_size=data.get('search_step_size'),
            shift_radius=data.get('shift_radius'),
            jitter=math.radians(jitter) if jitter is not None else None,
            dedup_eps=data.get('dedup_eps'),
            rotation_weight=data.get('rotation_weight'),
            seed=seed,
            threads=threads,
        )

    def intrinsics(self) -> Optional[CameraIntrinsics]:
        data = self.cleaned_data
        if data.get('fx') is None:
            return None
        return CameraIntrinsics(**{name: data[name] for name in self.INTRINSICS_FIELDS})


def default_intrinsics() -> CameraIntrinsics:
    width, height = settings.AESFIELD_IMAGE_SIZE
    focal = settings.AESFIELD_FOCAL_LENGTH
    return CameraIntrinsics(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)
