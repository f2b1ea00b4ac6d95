# src/storage/model_file.py

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import yaml

from .. import __version__
from ..core.hamiltonian import HamiltonianError, HdnnModel, LayerParams, StructureTag
from ..core.numerics import get_activation
from ..core.uap import OutputHead, ShallowSum, ShallowTerm, UapError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ModelFileError(ValueError):
    """Raised for unreadable, malformed or inconsistent model documents."""
    pass


class _Dumper(yaml.SafeDumper):
    pass


def _represent_float(dumper: yaml.SafeDumper, value: float):
    # 17 significant digits, always in exponent form so YAML reads it back as a float
    return dumper.represent_scalar("tag:yaml.org,2002:float", format(value, ".16e"))


_Dumper.add_representer(float, _represent_float)


@dataclass
class ModelFile:
    model: HdnnModel
    head: Optional[OutputHead] = None
    provenance: Dict[str, Any] = field(default_factory=dict)


def _dump(doc: Dict[str, Any]) -> str:
    return yaml.dump(doc, Dumper=_Dumper, sort_keys=False, default_flow_style=None, width=1 << 16)


def _provenance(given: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Creation time and package version, unless the caller already carries them."""
    stamp = {"created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"), "version": __version__}
    stamp.update(given or {})
    return stamp


def _array(value: Any, name: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ModelFileError(f"Field '{name}' is not numeric: {str(e)}") from e
    return arr


def dump_model(mf: ModelFile) -> str:
    m = mf.model
    doc: Dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "kind": "hdnn",
        "n": m.n,
        "depth": m.depth,
        "h": float(m.h),
        "activation": m.activation.name,
        "structure": m.structure.value,
        "provenance": _provenance(mf.provenance),
        "layers": [{name: arr.tolist() for name, arr in layer.free.items()} for layer in m.layers],
    }
    if mf.head is not None:
        doc["head"] = {"W_o": mf.head.W_o.tolist(), "b_o": mf.head.b_o.tolist()}
    return _dump(doc)


def _read(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ModelFileError(f"Cannot read {path}: {str(e)}") from e
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path} does not contain a mapping")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"Unsupported format_version {version!r} in {path}")
    return doc


def parse_model(doc: Dict[str, Any]) -> ModelFile:
    if doc.get("kind") != "hdnn":
        raise ModelFileError(f"Expected kind 'hdnn', got {doc.get('kind')!r}")
    try:
        structure = StructureTag.parse(doc["structure"])
        n, depth = int(doc["n"]), int(doc["depth"])
        activation = get_activation(doc["activation"])
        layers = tuple(
            LayerParams(structure, n, {k: _array(v, k) for k, v in layer.items()})
            for layer in doc["layers"]
        )
        model = HdnnModel(n, depth, float(doc["h"]), activation, layers, structure)
        head = None
        if doc.get("head") is not None:
            head = OutputHead(_array(doc["head"]["W_o"], "W_o"), _array(doc["head"]["b_o"], "b_o"))
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError, HamiltonianError) as e:
        raise ModelFileError(f"Invalid model document: {str(e)}") from e
    return ModelFile(model, head, dict(doc.get("provenance") or {}))


def save_model(path: Union[str, Path], mf: ModelFile) -> None:
    Path(path).write_text(dump_model(mf), encoding="utf-8")
    logger.debug(f"Saved {mf.model.structure.value} model to {path}")


def load_model(path: Union[str, Path]) -> ModelFile:
    return parse_model(_read(path))


# ------------------------------------------------------------------------------
# Shallow sums
# ------------------------------------------------------------------------------
def dump_shallow_sum(g: ShallowSum, provenance: Optional[Dict[str, Any]] = None) -> str:
    return _dump({
        "format_version": FORMAT_VERSION,
        "kind": "shallow_sum",
        "n": g.n,
        "activation": g.activation.name,
        "provenance": _provenance(provenance),
        "terms": [{"A": t.A.tolist(), "W": t.W.tolist(), "b": t.b.tolist()} for t in g.terms],
    })


def save_shallow_sum(path: Union[str, Path], g: ShallowSum, provenance: Optional[Dict[str, Any]] = None) -> None:
    Path(path).write_text(dump_shallow_sum(g, provenance), encoding="utf-8")


def load_shallow_sum(path: Union[str, Path]) -> ShallowSum:
    doc = _read(path)
    if doc.get("kind") != "shallow_sum":
        raise ModelFileError(f"Expected kind 'shallow_sum', got {doc.get('kind')!r}")
    try:
        terms = tuple(
            ShallowTerm(_array(t["A"], "A"), _array(t["W"], "W"), _array(t["b"], "b"))
            for t in doc["terms"]
        )
        g = ShallowSum(terms, get_activation(doc["activation"]))
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError, UapError) as e:
        raise ModelFileError(f"Invalid shallow-sum document: {str(e)}") from e
    if g.n != int(doc.get("n", g.n)):
        raise ModelFileError(f"Declared n={doc.get('n')} does not match terms of size {g.n}")
    return g
