"""Cost accounting: layer formulas, GLI closed forms, model walks and alpha reports.

FLOPs follow the 1 MAC = 2 FLOPs convention plus 3L^2 per attention map
for the softmax; norms, activations and pooling are not counted. Published
variant sizes quote multiply-accumulates, so reconciliation against them
uses :attr:`CostReport.total_macs`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .fileio import atomic_write
from .model import PUBLISHED_COSTS, EATFormer
from .modules import LayerCost

# ---------------------------------------------------------------------------
# layer formulas
# ---------------------------------------------------------------------------


def _positive(**values):
    for name, v in values.items():
        if v < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {v}")


def msa_cost(C: int, L: int) -> tuple[int, int]:
    """(params, flops) of one MSA layer of width C over L tokens."""
    _positive(C=C, L=L)
    return 4 * (C + 1) * C, 8 * C * C * L + 4 * C * L * L + 3 * L * L


def conv_cost(C: int, k: int, G: int, L: int) -> tuple[int, int]:
    """(params, flops) of a C -> C k x k conv with G groups over L output positions."""
    _positive(C=C, k=k, G=G, L=L)
    if C % G:
        raise ConfigurationError(f"C={C} is not divisible by G={G}")
    return (C * k * k // G + 1) * C, 2 * C * k * k // G * L * C


def _check_split(C, Cg):
    """Accepts ints or integer arrays (for vectorised sweeps)."""
    if np.any(np.asarray(Cg) < 0) or np.any(np.asarray(Cg) > np.asarray(C)):
        raise ConfigurationError(f"C_g must lie in [0, C={C}], got {Cg}")


def gli_params_closed_form(C: int, k: int, Cg: int) -> int:
    _check_split(C, Cg)
    return 5 * Cg * Cg + (2 - 2 * C - k * k) * Cg + (k * k + 2 + C) * C


def gli_params_unfactored(C: int, k: int, Cg: int) -> int:
    """MSA on C_g channels + depthwise and pointwise convs on C_l channels."""
    _check_split(C, Cg)
    Cl = C - Cg
    return 4 * (Cg + 1) * Cg + (k * k + 1) * Cl + (Cl + 1) * Cl


def gli_flops_closed_form(C: int, k: int, Cg: int, L: int) -> int:
    _check_split(C, Cg)
    return 10 * L * Cg * Cg + (4 * L * L - 2 * k * k * L - 4 * L * C) * Cg + (3 * L + 2 * k * k * C + 2 * C * C) * L


def gli_flops_unfactored(C: int, k: int, Cg: int, L: int) -> int:
    _check_split(C, Cg)
    Cl = C - Cg
    return 8 * Cg * Cg * L + 4 * Cg * L * L + 3 * L * L + 2 * k * k * L * Cl + 2 * Cl * Cl * L


def params_vertex(C: int, k: int) -> tuple[float, float]:
    """(exact, approximate) real minimiser of the GLI parameter count in C_g."""
    return (2 * C + k * k - 2) / 10, 0.2 * C


def flops_vertex(C: int, k: int, L: int) -> tuple[float, float]:
    """(exact, approximate) real minimiser of the GLI FLOP count in C_g."""
    return (4 * L * C + 2 * k * k * L - 4 * L * L) / (20 * L), 0.2 * C


def gli_params_argmin(C: int, k: int) -> int:
    """Smallest integer C_g in 0..C minimising the parameter count."""
    return int(np.argmin(gli_params_closed_form(C, k, np.arange(C + 1, dtype=np.int64))))


def gli_cost_curve(C: int, k: int, L: int, ratios=None) -> list[tuple[float, int, int]]:
    """(p, params, flops) with C_g = round(p*C) half-up."""
    ratios = np.linspace(0.0, 1.0, 21) if ratios is None else ratios
    out = []
    for p in ratios:
        cg = int(np.floor(p * C + 0.5))
        out.append((float(p), gli_params_closed_form(C, k, cg), gli_flops_closed_form(C, k, cg, L)))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

COST_COLUMNS = ("name", "params", "macs", "flops")


@dataclass
class CostReport:
    """Per-layer costs of a model plus the GLI closed-form curve of one stage."""

    rows: list[LayerCost]
    input_hw: tuple[int, int]
    variant: str = ""
    curve: list[tuple[float, int, int]] = field(default_factory=list)
    argmin_p: float | None = None

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def by_prefix(self, depth: int = 2) -> dict[str, tuple[int, int]]:
        """(params, macs) summed over rows sharing the first ``depth`` name parts."""
        groups: dict[str, list[int]] = {}
        for r in self.rows:
            key = ".".join(r.name.split(".")[:depth]) if r.name.startswith("stages") else r.name.split(".")[0]
            acc = groups.setdefault(key, [0, 0])
            acc[0] += r.params
            acc[1] += r.macs
        return {k: (v[0], v[1]) for k, v in groups.items()}

    def reconcile(self) -> dict | None:
        """Relative deviation from the published size of this variant, if known."""
        if self.variant not in PUBLISHED_COSTS:
            return None
        params_m, gmacs = PUBLISHED_COSTS[self.variant]
        return {
            "published_params_m": params_m,
            "published_gflops": gmacs,
            "params_rel_error": self.total_params / 1e6 / params_m - 1.0,
            "flops_rel_error": self.total_macs / 1e9 / gmacs - 1.0,
        }

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_hw": list(self.input_hw),
            "rows": [{"name": r.name, "params": r.params, "macs": r.macs, "flops": r.flops} for r in self.rows],
            "totals": {"params": self.total_params, "macs": self.total_macs, "flops": self.total_flops},
            "closed_form_curve": [{"p": p, "params": a, "flops": b} for p, a, b in self.curve],
            "argmin_p": self.argmin_p,
            "reconciliation": self.reconcile(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COST_COLUMNS)
        for r in self.rows:
            writer.writerow([r.name, r.params, r.macs, r.flops])
        writer.writerow(["total", self.total_params, self.total_macs, self.total_flops])
        return buf.getvalue()

    def save(self, path) -> None:
        path = str(path)
        atomic_write(path, self.to_csv() if path.endswith(".csv") else self.to_json())


def model_cost(model: EATFormer, input_hw=(224, 224)) -> CostReport:
    """Walk every layer of ``model`` at the given input size.

    The closed-form curve is sampled for the first stage that uses a
    global path, at that stage's token count.
    """
    h, w = input_hw
    rows = model.cost(h, w)
    spec = model.spec
    report = CostReport(rows, (h, w), spec.name)
    if spec.gli_stages:
        s = min(spec.gli_stages)
        C = spec.dims[s - 1]
        side_h, side_w = (h + (-h) % 32) // 2 ** (s + 1), (w + (-w) % 32) // 2 ** (s + 1)
        report.curve = gli_cost_curve(C, spec.kernel, side_h * side_w)
        report.argmin_p = gli_params_argmin(C, spec.kernel) / C
    return report


@dataclass
class AlphaRow:
    stage: int
    depth: int
    msra: list[float]
    gli: list[float]


@dataclass
class AlphaReport:
    """Softmaxed mixing weights of every EAT block, in block order."""

    rows: list[AlphaRow]

    def to_dict(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        """Long format: stage, depth, group (msra|gli), index, weight."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "depth", "group", "index", "weight"])
        for r in self.rows:
            for group, values in (("msra", r.msra), ("gli", r.gli)):
                for i, v in enumerate(values):
                    writer.writerow([r.stage, r.depth, group, i, repr(v)])
        return buf.getvalue()

    def save(self, path) -> None:
        path = str(path)
        atomic_write(path, self.to_csv() if path.endswith(".csv") else self.to_json())


def alpha_report(model: EATFormer) -> AlphaReport:
    rows = []
    for stage, depth, block in model.blocks():
        msra = block.msra.mixing_weights().tolist() if block.msra is not None else []
        gli = block.gli.mixing_weights().tolist() if block.gli is not None else []
        rows.append(AlphaRow(stage, depth, msra, gli))
    return AlphaReport(rows)


__all__ = [
    "msa_cost",
    "conv_cost",
    "gli_params_closed_form",
    "gli_params_unfactored",
    "gli_flops_closed_form",
    "gli_flops_unfactored",
    "params_vertex",
    "flops_vertex",
    "gli_params_argmin",
    "gli_cost_curve",
    "CostReport",
    "model_cost",
    "AlphaRow",
    "AlphaReport",
    "alpha_report",
]
