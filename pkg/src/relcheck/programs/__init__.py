"""Sample ``.mf`` programs shipped with the package."""

from importlib import resources


def path(name: str):
    return resources.files(__name__) / name


def source(name: str) -> str:
    return path(name).read_text()
