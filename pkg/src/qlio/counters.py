from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class OpCounters:
    """Per-sweep operation counts of the first three update steps plus codec work."""

    transforms: int = 0
    distance_ops: int = 0
    sorts: int = 0
    eigendecompositions: int = 0
    decodes: int = 0
    encodes: int = 0

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)

    def as_dict(self) -> dict:
        return asdict(self)

    def __add__(self, other: OpCounters) -> OpCounters:
        return OpCounters(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})
