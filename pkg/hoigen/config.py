"""Frozen dataclass configs loaded from YAML/JSON files with flag overrides."""

from __future__ import annotations

import dataclasses
import pathlib
from collections.abc import Mapping
from typing import Any, Self

from .core import ValidationError
from .formats import load_config_file


class ConfigBase:
    """Mixin for frozen dataclass configs.

    Unknown keys are rejected; list values are turned into tuples where the field default is
    a tuple, so YAML lists round-trip.
    """

    @classmethod
    def _nested(cls) -> dict[str, type[ConfigBase]]:
        return {}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> Self:
        data = dict(data or {})
        fields = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise ValidationError(f"unknown {cls.__name__} keys: {unknown}")
        nested = cls._nested()
        values = {}
        for name, value in data.items():
            if name in nested and isinstance(value, Mapping):
                value = nested[name].from_dict(value)
            elif isinstance(value, list) and isinstance(fields[name].default, tuple):
                value = tuple(value)
            values[name] = value
        try:
            return cls(**values)
        except TypeError as e:
            raise ValidationError(f"invalid {cls.__name__}: {e}") from e

    @classmethod
    def from_file(cls, path: str | pathlib.Path) -> Self:
        return cls.from_dict(load_config_file(path))

    def to_dict(self) -> dict[str, Any]:
        result = {}
        for f in dataclasses.fields(self):  # type: ignore[arg-type]
            value = getattr(self, f.name)
            match value:
                case ConfigBase():
                    value = value.to_dict()
                case tuple():
                    value = list(value)
            result[f.name] = value
        return result

    def with_overrides(self, **overrides: Any) -> Self:
        """Copy with every override that is not None applied (flags win over file values)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        current = self.to_dict()
        unknown = sorted(set(changes) - set(current))
        if unknown:
            raise ValidationError(f"unknown {type(self).__name__} keys: {unknown}")
        return type(self).from_dict(current | changes)
