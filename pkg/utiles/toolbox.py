# Stateless file helpers shared by the command line: CSV tables, observation
# parsing, JSON config sections and run manifests.
import csv
import json
import os
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from utiles.errors import ConfigError, ModelContractError

CONFIG_SECTIONS = ("model", "arch", "train")
MANIFEST_NAME = "manifest.json"


def write_csv(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: str):
    """Returns (header, rows) with every cell left as a string."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path} is empty") from None
        return header, [row for row in reader if row]


def fmt(x: float) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def parse_observe_args(items, observation_names) -> np.ndarray:
    """Turn ["name=value", ...] into an observation vector ordered like observation_names."""
    values = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--observe expects name=value, got '{item}'")
        if name not in observation_names:
            raise ConfigError(f"unknown observation '{name}', expected one of {', '.join(observation_names[:6])}")
        try:
            values[name] = float(value)
        except ValueError:
            raise ConfigError(f"observation '{name}' is not a number: '{value}'") from None
    missing = [n for n in observation_names if n not in values]
    if missing:
        raise ModelContractError(f"missing observations: {', '.join(missing[:6])}")
    return np.array([values[n] for n in observation_names], dtype=np.float64)


def read_observation_file(path: str, observation_names) -> list:
    """Observation vectors from a CSV file.

    Two layouts are accepted: a wide table whose header lists the observation
    names (one vector per row), or a frequency response table with header
    freq,re,im whose rows interleave into a single vector.
    """
    header, rows = read_csv(path)
    if [h.strip() for h in header] == ["freq", "re", "im"]:
        vector = np.array([[float(r[1]), float(r[2])] for r in rows], dtype=np.float64).reshape(-1)
        if vector.size != len(observation_names):
            raise ModelContractError(f"{path} holds {vector.size} values, the model observes {len(observation_names)}")
        return [vector]
    index = {name.strip(): i for i, name in enumerate(header)}
    missing = [n for n in observation_names if n not in index]
    if missing:
        raise ModelContractError(f"{path} lacks columns: {', '.join(missing[:6])}")
    return [np.array([float(row[index[n]]) for n in observation_names], dtype=np.float64) for row in rows]


def load_config_file(path: Optional[str]) -> dict:
    """JSON config with optional "model", "arch" and "train" sections."""
    if path is None:
        return {section: {} for section in CONFIG_SECTIONS}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; allowed {list(CONFIG_SECTIONS)}")
    return {section: dict(data.get(section, {})) for section in CONFIG_SECTIONS}


class RunManifest(BaseModel):
    """What a command was asked to do, recorded next to its outputs."""

    model_config = ConfigDict(extra="forbid")

    command: str
    argv: list[str]
    model: Optional[str] = None
    arch: Optional[str] = None
    config_path: Optional[str] = None
    seed: int = 0
    checkpoint: Optional[str] = None
    output_dir: str


def ensure_output_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def write_manifest(manifest: RunManifest) -> str:
    path = os.path.join(manifest.output_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        fh.write(manifest.model_dump_json(indent=2) + "\n")
    return path


def read_manifest(path: str) -> RunManifest:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(path) as fh:
            return RunManifest.model_validate_json(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
