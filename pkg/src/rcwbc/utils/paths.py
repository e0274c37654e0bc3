from pathlib import Path

PACKAGE_ROOT = Path(__file__).resolve().parent.parent

DATA_KINDS = {
    "model": "data/models",
    "controller": "data/controllers",
    "scenario": "data/scenarios",
    "sweep": "data/sweeps",
}


def get_resource_path(relative_path) -> Path:
    """Location of a file shipped inside the rcwbc package."""
    return PACKAGE_ROOT / relative_path


def resolve_data_file(name, kind: str) -> Path:
    """
    Explicit paths win; a bare name such as 'biped_rcj' falls back to the bundled data file.
    """
    path = Path(name)
    if path.exists():
        return path

    bundled = get_resource_path(f"{DATA_KINDS[kind]}/{path.name}")
    if bundled.suffix != ".yaml":
        bundled = bundled.with_name(bundled.name + ".yaml")
    if bundled.exists():
        return bundled
    return path
