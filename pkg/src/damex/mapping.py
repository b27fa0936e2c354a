"""The dataset-to-expert mapping: parsing, validation, target distributions.

A mapping entry assigns each dataset id an ordered set of expert ids. Entries
may share an expert (many-to-one) or spread one dataset over several experts
(one-to-many); targets put uniform mass on the mapped set.

Config format, one line per dataset:

    dataset.<id>.experts = <expert>[,<expert>...]
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MappingError

_KEY_RE = re.compile(r"^dataset\.(\d+)\.experts$")


@dataclass
class MappingTable:
    """Immutable after construction; safe to share between threads."""

    entries: dict[int, tuple[int, ...]]
    num_experts: int

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        for dataset_id, experts in self.entries.items():
            if not experts:
                raise ConfigError(f"dataset {dataset_id} maps to no experts")
            if len(set(experts)) != len(experts):
                raise ConfigError(f"dataset {dataset_id} repeats an expert id")
            for e in experts:
                if not 0 <= e < self.num_experts:
                    raise ConfigError(
                        f"dataset {dataset_id} maps to expert {e}, "
                        f"but only {self.num_experts} experts exist"
                    )

    @property
    def dataset_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.entries))

    def experts_for(self, dataset_id: int) -> tuple[int, ...]:
        try:
            return self.entries[int(dataset_id)]
        except KeyError:
            raise MappingError(f"dataset id {dataset_id} has no expert mapping") from None

    def target_distribution(self, dataset_id: int) -> np.ndarray:
        """Length-E probability vector: uniform over the mapped experts."""
        experts = self.experts_for(dataset_id)
        q = np.zeros(self.num_experts)
        q[list(experts)] = 1.0 / len(experts)
        total = q.sum()
        if total != 1.0:  # repair the last ulp so the vector sums to exactly 1
            q[experts[-1]] += 1.0 - total
        return q

    def serialize(self) -> str:
        lines = [
            f"dataset.{d}.experts = {','.join(str(e) for e in self.entries[d])}"
            for d in sorted(self.entries)
        ]
        return "\n".join(lines) + "\n"


def target_distribution(table: MappingTable, dataset_id: int) -> np.ndarray:
    return table.target_distribution(dataset_id)


def parse_mapping(text: str, num_experts: int) -> MappingTable:
    """Parse mapping lines; blank lines and `#` comments are ignored.

    Raises ConfigError with the offending line number on any defect.
    """
    entries: dict[int, tuple[int, ...]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected `key = value`, got {raw!r}", line=line_no)
        key, _, value = line.partition("=")
        match = _KEY_RE.match(key.strip())
        if match is None:
            raise ConfigError(f"unrecognized mapping key {key.strip()!r}", line=line_no)
        dataset_id = int(match.group(1))
        if dataset_id in entries:
            raise ConfigError(f"duplicate entry for dataset {dataset_id}", line=line_no)
        experts = _parse_expert_list(value, num_experts, line_no)
        entries[dataset_id] = experts
    table = MappingTable(entries=entries, num_experts=num_experts)
    return table


def _parse_expert_list(value: str, num_experts: int, line_no: int) -> tuple[int, ...]:
    items = [item.strip() for item in value.split(",")]
    if items == [""]:
        raise ConfigError("empty expert list", line=line_no)
    experts: list[int] = []
    for item in items:
        if not item.isdigit():
            raise ConfigError(f"expert id {item!r} is not a non-negative integer", line=line_no)
        e = int(item)
        if e >= num_experts:
            raise ConfigError(
                f"expert id {e} out of range (only {num_experts} experts)", line=line_no
            )
        if e in experts:
            raise ConfigError(f"expert id {e} repeated in entry", line=line_no)
        experts.append(e)
    return tuple(experts)


def random_mapping(dataset_ids, num_experts: int, seed: int) -> MappingTable:
    """Random single-expert assignment baseline (seeded, one expert per dataset)."""
    rng = np.random.default_rng(seed)
    entries = {
        int(d): (int(rng.integers(num_experts)),) for d in sorted(set(dataset_ids))
    }
    return MappingTable(entries=entries, num_experts=num_experts)
