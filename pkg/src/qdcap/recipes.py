"""Access to the example recipes bundled with the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .geometry import ProcessRecipe, load_recipe


def _root():
    return resources.files(__package__) / "recipes"


def list_bundled():
    return sorted(p.name for p in _root().iterdir() if p.name.endswith(".json"))


def bundled_path(name: str) -> Path | None:
    """Resolve a bare bundled file name, returning None if not bundled."""
    if "/" in name or "\\" in name:
        return None
    cand = _root() / name
    if cand.is_file():
        return Path(str(cand))
    return None


def load_bundled(name: str) -> ProcessRecipe:
    path = bundled_path(name if name.endswith(".json") else name + ".json")
    if path is None:
        raise FileNotFoundError(f"no bundled recipe {name!r}; have {list_bundled()}")
    return load_recipe(path.read_text(encoding="utf-8"), name=name)
