"""Upload accounting in floats per round.

Synthetic-data protocols send cpc_k * ipc examples per client, where cpc_k
counts the classes a client actually holds; weight-based protocols send one
parameter vector per client.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def classes_per_client(partition, labels) -> list[int]:
    labels = np.asarray(labels)
    return [int(np.unique(labels[idx]).size) for idx in partition.index_sets]


def message_size_from_counts(cpc, ipc, example_floats) -> int:
    return int(sum(int(c) for c in cpc)) * int(ipc) * int(example_floats)


def feddm_message_size(partition, labels, ipc, example_floats) -> int:
    """Floats uploaded in one synthetic-data round for this partition."""
    return message_size_from_counts(classes_per_client(partition, labels), ipc, example_floats)


def baseline_message_size(param_count, num_clients) -> int:
    if param_count < 1 or num_clients < 1:
        raise ValueError("param_count and num_clients must be positive")
    return int(param_count) * int(num_clients)


@dataclass
class PayloadReport:
    cpc: list[int]
    ipc: int
    example_floats: int
    rounds: int = 1
    param_count: int | None = None

    def client_floats(self) -> list[int]:
        return [c * self.ipc * self.example_floats for c in self.cpc]

    @property
    def per_round(self) -> int:
        return sum(self.client_floats())

    @property
    def cumulative(self) -> int:
        return self.per_round * self.rounds

    @property
    def baseline_per_round(self) -> int | None:
        if self.param_count is None:
            return None
        return baseline_message_size(self.param_count, len(self.cpc))

    def rows(self):
        for k, (c, f) in enumerate(zip(self.cpc, self.client_floats())):
            yield {"client": k, "cpc": c, "ipc": self.ipc, "example_floats": self.example_floats, "floats": f}

    def format_text(self) -> str:
        lines = [f"{'client':>6} {'cpc':>5} {'ipc':>5} {'example':>9} {'floats':>12}"]
        for r in self.rows():
            lines.append(f"{r['client']:>6} {r['cpc']:>5} {r['ipc']:>5} {r['example_floats']:>9} {r['floats']:>12}")
        lines.append(f"{'total per round':>28} {self.per_round:>12}")
        lines.append(f"{'cumulative (' + str(self.rounds) + ' rounds)':>28} {self.cumulative:>12}")
        if self.param_count is not None:
            lines.append(f"{'weight-based per round':>28} {self.baseline_per_round:>12}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["client", "cpc", "ipc", "example_floats", "floats"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()
