"""Class catalog: receptacle/object classes and their affordance flags."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources

RECEPTACLE_AFFORDANCES = {
    "openable", "heat_source", "cool_source", "clean_source", "light_source",
}
OBJECT_AFFORDANCES = {
    "pickupable", "heatable", "coolable", "cleanable", "examinable",
}


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class EntityClass:
    name: str
    kind: str  # "receptacle" | "object"
    affordances: frozenset[str] = field(default_factory=frozenset)

    def has(self, flag: str) -> bool:
        return flag in self.affordances


@dataclass(frozen=True)
class Catalog:
    receptacles: dict[str, EntityClass]
    objects: dict[str, EntityClass]
    likely: dict[str, tuple[str, ...]]       # object class -> preferred receptacle classes
    anomaly_receptacles: tuple[str, ...]     # counter-intuitive spawn targets

    def receptacle_names(self) -> list[str]:
        return sorted(self.receptacles)

    def object_names(self) -> list[str]:
        return sorted(self.objects)

    def receptacles_with(self, flag: str) -> list[str]:
        return sorted(n for n, c in self.receptacles.items() if c.has(flag))

    def objects_with(self, flag: str) -> list[str]:
        return sorted(n for n, c in self.objects.items() if c.has(flag))

    def likely_for(self, object_class: str) -> tuple[str, ...]:
        return self.likely.get(object_class, ())

    def spawn_receptacles(self) -> list[str]:
        """Receptacle classes eligible for normal object placement."""
        out = []
        for name, cls in sorted(self.receptacles.items()):
            if name in self.anomaly_receptacles or cls.has("light_source"):
                continue
            out.append(name)
        return out


def _split_flags(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


def parse_catalog(text: str) -> Catalog:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    for section in ("receptacles", "objects"):
        if not cp.has_section(section):
            raise CatalogError(f"catalog is missing the [{section}] section")
    receptacles: dict[str, EntityClass] = {}
    objects: dict[str, EntityClass] = {}

    for name, raw in cp["receptacles"].items():
        flags = set(_split_flags(raw))
        bad = flags - RECEPTACLE_AFFORDANCES
        if bad:
            raise CatalogError(f"unknown receptacle affordances for {name}: {sorted(bad)}")
        receptacles[name] = EntityClass(name, "receptacle", frozenset(flags))

    for name, raw in cp["objects"].items():
        flags = set(_split_flags(raw))
        bad = flags - OBJECT_AFFORDANCES
        if bad:
            raise CatalogError(f"unknown object affordances for {name}: {sorted(bad)}")
        if name in receptacles:
            raise CatalogError(f"class name used for both kinds: {name}")
        objects[name] = EntityClass(name, "object", frozenset(flags))

    likely: dict[str, tuple[str, ...]] = {}
    if cp.has_section("likely"):
        for name, raw in cp["likely"].items():
            if name not in objects:
                raise CatalogError(f"likely entry for unknown object class: {name}")
            targets = tuple(_split_flags(raw))
            for t in targets:
                if t not in receptacles:
                    raise CatalogError(f"likely container {t} for {name} is not a receptacle class")
            likely[name] = targets

    anomaly: tuple[str, ...] = ()
    if cp.has_section("anomaly"):
        anomaly = tuple(_split_flags(cp["anomaly"].get("receptacles", "")))
        for t in anomaly:
            if t not in receptacles:
                raise CatalogError(f"anomaly receptacle {t} is not a receptacle class")

    return Catalog(receptacles, objects, likely, anomaly)


def load_catalog(path: str | None = None) -> Catalog:
    """Load the built-in catalog, or a user-supplied file with the same format."""
    if path is None:
        text = resources.files("homegame.data").joinpath("catalog.cfg").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_catalog(text)


_default: Catalog | None = None


def default_catalog() -> Catalog:
    global _default
    if _default is None:
        _default = load_catalog()
    return _default
