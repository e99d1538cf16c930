"""Prompt template rendering, base/attribute prompt pairs, and VQA questions.

A scene is described by seven mandatory slots. The attribute catalog file
declares categories; each category changes exactly one slot per attribute,
optionally overriding base slot values (for example a neutral indoor
location for the indoor category).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

SLOT_NAMES = ("ethnicity", "age", "gender", "clothing", "location", "lighting", "weather")

DEFAULT_TEMPLATE = (
    "Photo, {ethnicity} {age} {gender} wearing {clothing} in {location} at {lighting} {weather}"
)

_PLACEHOLDER = re.compile(r"\{([a-zA-Z_]+)\}")

# One yes/no verification question per slot; expected answer is always yes.
QUESTION_TABLE = {
    "ethnicity": "Is the person {}?",
    "age": "Is the person {}?",
    "gender": "Is the person {}?",
    "clothing": "Is the person wearing {}?",
    "location": "Is the person in {}?",
    "lighting": "Is it {} in the image?",
    "weather": "Is it {} weather in the image?",
}


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptSlots:
    ethnicity: str
    age: str
    gender: str
    clothing: str
    location: str
    lighting: str
    weather: str

    def __post_init__(self):
        for name in SLOT_NAMES:
            if not getattr(self, name):
                raise PromptError(f"slot {name!r} must not be empty")

    def as_dict(self) -> dict[str, str]:
        return {name: getattr(self, name) for name in SLOT_NAMES}

    def with_slot(self, slot: str, value: str) -> "PromptSlots":
        if slot not in SLOT_NAMES:
            raise PromptError(f"unknown slot {slot!r}")
        return replace(self, **{slot: value})


@dataclass(frozen=True)
class AttributeSpec:
    category: str
    slot: str
    base_value: str
    attribute_value: str
    attribute_id: str

    def __post_init__(self):
        if self.slot not in SLOT_NAMES:
            raise PromptError(f"unknown slot {self.slot!r} in attribute {self.attribute_id!r}")
        if self.base_value == self.attribute_value:
            raise PromptError(
                f"attribute {self.attribute_id!r}: base and attribute values are identical"
            )


@dataclass(frozen=True)
class PromptPair:
    base_text: str
    attribute_text: str
    spec: AttributeSpec


def render_prompt(slots: PromptSlots, template: str = DEFAULT_TEMPLATE) -> str:
    """Single-pass placeholder substitution, collapsed to single spaces."""
    values = slots.as_dict()
    unknown = [m for m in _PLACEHOLDER.findall(template) if m not in values]
    if unknown:
        raise PromptError(f"template references unknown placeholders {unknown}")
    text = _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)
    return re.sub(r"\s+", " ", text).strip()


def make_prompt_pair(
    base_slots: PromptSlots, spec: AttributeSpec, template: str = DEFAULT_TEMPLATE
) -> PromptPair:
    current = getattr(base_slots, spec.slot)
    if current != spec.base_value:
        raise PromptError(
            f"attribute {spec.attribute_id!r} expects base {spec.slot}="
            f"{spec.base_value!r}, prompt has {current!r}"
        )
    att_slots = base_slots.with_slot(spec.slot, spec.attribute_value)
    return PromptPair(
        base_text=render_prompt(base_slots, template),
        attribute_text=render_prompt(att_slots, template),
        spec=spec,
    )


def vqa_questions_for(slots: PromptSlots) -> list[tuple[str, str]]:
    """One presence question per slot, expected answer yes."""
    return [(QUESTION_TABLE[name].format(getattr(slots, name)), "yes") for name in SLOT_NAMES]


def slugify(value: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", value.lower()).strip("-")


@dataclass(frozen=True)
class CategoryConfig:
    name: str
    slot: str | None  # default slot for bare attribute values
    base_overrides: dict[str, str]
    attributes: tuple[dict, ...]  # each: {"slot": ..., "value": ..., "base": optional}


@dataclass(frozen=True)
class Catalog:
    template: str
    base_slots: PromptSlots
    categories: tuple[CategoryConfig, ...]

    def category(self, name: str) -> CategoryConfig:
        for cat in self.categories:
            if cat.name == name:
                return cat
        raise KeyError(f"unknown category {name!r}")

    def base_slots_for(self, category: CategoryConfig) -> PromptSlots:
        slots = self.base_slots
        for slot, value in sorted(category.base_overrides.items()):
            slots = slots.with_slot(slot, value)
        return slots


def expand_category(catalog: Catalog, category: CategoryConfig) -> list[AttributeSpec]:
    """One AttributeSpec per configured attribute value, with category base
    overrides applied to determine each spec's base value."""
    if not category.attributes:
        raise PromptError(f"category {category.name!r} has no attributes")
    base = catalog.base_slots_for(category)
    specs = []
    for entry in category.attributes:
        slot = entry.get("slot") or category.slot
        if slot is None:
            raise PromptError(f"category {category.name!r}: attribute without a slot")
        value = entry["value"]
        base_value = entry.get("base") or getattr(base, slot)
        specs.append(
            AttributeSpec(
                category=category.name,
                slot=slot,
                base_value=base_value,
                attribute_value=value,
                attribute_id=f"{category.name}:{slugify(value)}",
            )
        )
    ids = [s.attribute_id for s in specs]
    if len(ids) != len(set(ids)):
        raise PromptError(f"category {category.name!r} has duplicate attribute ids")
    return specs


def _normalize_attribute(entry) -> dict:
    if isinstance(entry, str):
        return {"value": entry}
    if isinstance(entry, dict) and "value" in entry:
        return {k: entry[k] for k in ("slot", "value", "base") if k in entry}
    raise PromptError(f"bad attribute entry {entry!r}")


def load_catalog(path: str | Path) -> Catalog:
    raw = yaml.safe_load(Path(path).read_text())
    return catalog_from_dict(raw)


def catalog_from_dict(raw: dict) -> Catalog:
    base = PromptSlots(**raw["base_slots"])
    categories = []
    for cat in raw.get("categories", []):
        categories.append(
            CategoryConfig(
                name=cat["name"],
                slot=cat.get("slot"),
                base_overrides=dict(cat.get("base_overrides", {})),
                attributes=tuple(_normalize_attribute(a) for a in cat.get("attributes", [])),
            )
        )
    return Catalog(
        template=raw.get("template", DEFAULT_TEMPLATE),
        base_slots=base,
        categories=tuple(categories),
    )


def catalog_to_dict(catalog: Catalog) -> dict:
    return {
        "template": catalog.template,
        "base_slots": catalog.base_slots.as_dict(),
        "categories": [
            {
                "name": c.name,
                **({"slot": c.slot} if c.slot else {}),
                **({"base_overrides": dict(c.base_overrides)} if c.base_overrides else {}),
                "attributes": [dict(a) for a in c.attributes],
            }
            for c in catalog.categories
        ],
    }


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(catalog_to_dict(catalog), sort_keys=False))
