"""Cross-dataset label remapping for distribution-shift evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .types import INSTANCE_OFFSET, VOID, decode_panoptic, encode_panoptic

BUNDLED = {
    "viper_to_cityscapes": "viper_to_cityscapes.json",
    "cityscapes_to_viper": "cityscapes_to_viper.json",
}


@dataclass(frozen=True)
class ClassMapping:
    """Source class id -> (target class id, target class has instances).

    Ids absent from the table map to VOID.
    """

    table: Dict[int, Tuple[int, bool]]

    @classmethod
    def from_records(cls, records) -> "ClassMapping":
        table = {}
        for r in records:
            src = int(r["source_id"])
            if src in table:
                raise ValueError(f"source id {src} mapped twice")
            table[src] = (int(r["target_id"]), bool(r["target_has_instances"]))
        return cls(table)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClassMapping":
        """Load a mapping file, or a bundled table by name."""
        if str(path) in BUNDLED:
            text = resources.files("segens.data").joinpath(BUNDLED[str(path)]).read_text()
        else:
            text = Path(path).read_text()
        return cls.from_records(json.loads(text))

    def target(self, source_id: int) -> int:
        return self.table.get(int(source_id), (VOID, False))[0]

    def has_instances(self, target_id: int) -> bool:
        return any(t == target_id and inst for t, inst in self.table.values())

    def lookup(self, size: int) -> np.ndarray:
        lut = np.zeros(size, dtype=np.uint32)
        for src, (dst, _) in self.table.items():
            if src < size:
                lut[src] = dst
        return lut


def remap_semantic(label_map: np.ndarray, mapping: ClassMapping) -> np.ndarray:
    m = np.asarray(label_map)
    lut = mapping.lookup(max(int(m.max(initial=0)) + 1, 1))
    return lut[m].astype(m.dtype)


def remap_panoptic(label_map: np.ndarray, mapping: ClassMapping) -> np.ndarray:
    """Remap classes of an encoded panoptic map.

    Targets without instances collapse to instance 0.  For targets with
    instances every distinct source segment becomes its own instance,
    numbered 1.. in ascending source-id order, so merged source classes
    (e.g. van and car) never collide.
    """
    m = np.asarray(label_map, dtype=np.uint32)
    cls, _ = decode_panoptic(m)
    lut = mapping.lookup(max(int(cls.max(initial=0)) + 1, 1))
    out = np.zeros_like(m)
    next_id: Dict[int, int] = {}
    for seg in np.unique(m).tolist():
        if seg == VOID:
            continue
        dst = int(lut[seg // INSTANCE_OFFSET])
        if dst == VOID:
            continue
        if mapping.has_instances(dst):
            inst = next_id.get(dst, 1)
            next_id[dst] = inst + 1
        else:
            inst = 0
        out[m == seg] = encode_panoptic(dst, inst)
    return out
