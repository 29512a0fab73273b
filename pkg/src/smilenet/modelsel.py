"""Greedy per-parameter architecture selection.

Each parameter is swept on its own with every other parameter held at its
default; the selected architecture combines the per-sweep winners.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ConfigError, SelectionError
from .network import ArchitectureConfig
from .train import run_parallel

PARAMETERS = ("num_convolutions", "num_hidden_layers", "units_per_hidden_layer", "dropout_rate")


@dataclass(frozen=True)
class SelectionGrid:
    num_convolutions: tuple = (1, 2, 3)
    num_hidden_layers: tuple = (1, 2, 3)
    units_per_hidden_layer: tuple = (100, 200, 300, 400)
    dropout_rate: tuple = (0.0, 0.1, 0.5, 0.7)
    defaults: tuple = (("num_convolutions", 1), ("num_hidden_layers", 1),
                       ("units_per_hidden_layer", 100), ("dropout_rate", 0.5))

    def __post_init__(self):
        defaults = dict(self.defaults)
        for name in PARAMETERS:
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"{name} has no candidate values")
            if name not in defaults:
                raise ConfigError(f"no default for {name}")
            if defaults[name] not in values:
                raise ConfigError(f"default {defaults[name]!r} of {name} is not a candidate")

    def default(self, name):
        return dict(self.defaults)[name]

    def candidates(self, name):
        return tuple(getattr(self, name))

    def size(self):
        return sum(len(self.candidates(p)) for p in PARAMETERS)


@dataclass
class SelectionReport:
    results: list = field(default_factory=list)  # (parameter, value, val_acc) in run order
    chosen: dict = field(default_factory=dict)
    config: ArchitectureConfig | None = None
    epochs_per_candidate: int | None = None

    @property
    def total_runs(self):
        return len(self.results)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["parameter", "value", "val_acc"])
        for name, value, acc in self.results:
            writer.writerow([name, value, repr(float(acc))])
        if self.config is not None:
            buf.write("\n# final config\n")
            buf.write(config_lines(self.config))
        return buf.getvalue()


def config_lines(config: ArchitectureConfig):
    return "".join(f"{k}={v}\n" for k, v in config.as_dict().items())


def pick_winner(sweep, default):
    """Highest accuracy; ties go to the value closest to the default, then the smaller value."""
    return max(sweep, key=lambda va: (va[1], -abs(va[0] - default), -va[0]))[0]


def select(grid: SelectionGrid, evaluator, base: ArchitectureConfig | None = None,
           epochs_per_candidate=50, threads=None):
    """Run the per-parameter sweeps and return a :class:`SelectionReport`.

    ``evaluator(config) -> validation accuracy`` is called once per
    candidate (``grid.size()`` calls in total). ``base`` supplies the
    non-swept fields such as the input size. If the evaluator raises,
    a :class:`SelectionError` carrying the partial report is raised.
    """
    base = base or ArchitectureConfig()
    defaults = {p: grid.default(p) for p in PARAMETERS}
    report = SelectionReport(epochs_per_candidate=epochs_per_candidate)
    for name in PARAMETERS:
        values = grid.candidates(name)
        configs = [base.replace(**{**defaults, name: v}) for v in values]

        def evaluate(cfg):
            try:
                return float(evaluator(cfg)), None
            except Exception as exc:  # reported with the partial results
                return None, exc

        outcomes = run_parallel(evaluate, configs, threads)
        for value, (acc, exc) in zip(values, outcomes):
            if exc is not None:
                raise SelectionError(
                    f"evaluator failed for {name}={value}: {exc}", report) from exc
            report.results.append((name, value, acc))
        sweep = [(v, a) for v, (a, _) in zip(values, outcomes)]
        report.chosen[name] = pick_winner(sweep, defaults[name])
    report.config = base.replace(**report.chosen)
    return report


def exhaustive_coordinate_check(grid: SelectionGrid, evaluator, report=None):
    """Recompute every coordinate winner by brute force and compare with :func:`select`."""
    if report is None:
        report = select(grid, evaluator, threads=0)
    base = ArchitectureConfig()
    defaults = {p: grid.default(p) for p in PARAMETERS}
    for name in PARAMETERS:
        scored = []
        for v in grid.candidates(name):
            cfg = base.replace(**{**defaults, name: v})
            scored.append((float(evaluator(cfg)), v))
        top = max(acc for acc, _ in scored)
        best = [v for acc, v in scored if acc == top]
        best.sort()
        best.sort(key=lambda v: abs(v - defaults[name]))
        if report.chosen.get(name) != best[0]:
            return False
    return True


def load_stub(path):
    """Read ``parameter,value,val_acc`` rows into a ``{(parameter, value): acc}`` table.

    Reading stops at the first blank line, so a full report CSV (with its
    trailing final-config block) can be replayed as is.
    """
    table = {}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                break
            rows.append(line)
    reader = csv.DictReader(rows)
    if reader.fieldnames != ["parameter", "value", "val_acc"]:
        raise ConfigError(f"{path}: header must be parameter,value,val_acc")
    for row in reader:
        name = row["parameter"]
        if name not in PARAMETERS:
            raise ConfigError(f"{path}: unknown parameter {name!r}")
        value = float(row["value"]) if name == "dropout_rate" else int(row["value"])
        table[(name, value)] = float(row["val_acc"])
    return table


class StubEvaluator:
    """Replays recorded accuracies keyed by the swept parameter and its value.

    A config with no parameter away from its default is looked up through
    any default row; all such rows must agree.
    """

    def __init__(self, table, grid: SelectionGrid):
        self.table = dict(table)
        self.grid = grid
        self.calls = []
        defaults = {p: grid.default(p) for p in PARAMETERS}
        default_accs = {acc for (n, v), acc in self.table.items() if defaults[n] == v}
        if len(default_accs) > 1:
            raise ConfigError(f"stub rows for the default config disagree: {sorted(default_accs)}")
        self.default_acc = default_accs.pop() if default_accs else None
        self.defaults = defaults

    def __call__(self, config):
        self.calls.append(config)
        moved = [p for p in PARAMETERS if getattr(config, p) != self.defaults[p]]
        if len(moved) > 1:
            raise KeyError(f"config moves more than one parameter: {moved}")
        if not moved:
            if self.default_acc is None:
                raise KeyError("stub has no row for the default config")
            return self.default_acc
        key = (moved[0], getattr(config, moved[0]))
        if key not in self.table:
            raise KeyError(f"stub has no row for {key[0]}={key[1]}")
        return self.table[key]
