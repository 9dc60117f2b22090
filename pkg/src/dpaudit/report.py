"""Risk-profile assembly and JSON/CSV rendering.

A profile has one row per privacy budget plus a non-private row. Within a
row the three risk tiers are ordered ``worst_case >= relaxed >= realistic``;
across rows the theoretical columns grow with the budget. Serialized output
is deterministic: keys are sorted, floats use ``repr``, non-private budgets
render as the string ``"inf"`` and accountant overflow as ``"OVERFLOW"``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

SCHEMA_VERSION = 1

#: Assumption block echoed into every report so approximations stay auditable.
BASE_ASSUMPTIONS = {
    "accounting": "rdp_poisson_subsampling",
    "relaxed_bound": "APPROXIMATE: gaussian trade-off fitted from the RDP curve",
    "statistics": "welch_t_test",
    "match_distance": "1-ssim",
}


@dataclass
class ProfileRow:
    label: str
    epsilon: float  # math.inf for the non-private row
    sigma_train: float | None = None
    sigma_attack: float | None = None
    achieved_epsilon: float | None = None
    clip_norm: float | None = None
    worst_case: float | None = None
    relaxed: float | None = None
    realistic: float | None = None
    utility: dict = field(default_factory=dict)   # metric -> (mean, sd)
    p_values: dict = field(default_factory=dict)  # metric -> p vs non-private
    status: str = "ok"

    @property
    def nonprivate(self) -> bool:
        return math.isinf(self.epsilon)


@dataclass
class RiskProfile:
    task: str  # "classification" | "segmentation"
    kappa: float
    delta: float
    rows: list[ProfileRow]
    config_echo: dict = field(default_factory=dict)
    assumptions: dict = field(default_factory=lambda: dict(BASE_ASSUMPTIONS))

    def metric_names(self) -> list[str]:
        names = set()
        for row in self.rows:
            names.update(row.utility)
        return sorted(names)

    def primary_metric(self) -> str:
        return "dice_tumour" if self.task == "segmentation" else "mcc"


def _num(value):
    """JSON-safe number: inf -> "inf", NaN -> None."""
    if value is None:
        return None
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return None
    return value


def row_to_json(row: ProfileRow) -> dict:
    return {
        "label": row.label,
        "epsilon": _num(row.epsilon),
        "sigma_train": _num(row.sigma_train),
        "sigma_attack": _num(row.sigma_attack),
        "achieved_epsilon": ("OVERFLOW" if row.achieved_epsilon is not None
                             and math.isinf(row.achieved_epsilon)
                             else _num(row.achieved_epsilon)),
        "clip_norm": _num(row.clip_norm),
        "worst_case": _num(row.worst_case),
        "relaxed": _num(row.relaxed),
        "realistic": _num(row.realistic),
        "utility": {k: {"mean": _num(v[0]), "sd": _num(v[1])}
                    for k, v in sorted(row.utility.items())},
        "p_values": {k: _num(v) for k, v in sorted(row.p_values.items())},
        "status": row.status,
    }


def profile_to_json(profile: RiskProfile) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "task": profile.task,
        "kappa": profile.kappa,
        "delta": profile.delta,
        "assumptions": profile.assumptions,
        "config": profile.config_echo,
        "rows": [row_to_json(r) for r in profile.rows],
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


FIXED_COLUMNS = ("epsilon", "sigma_train", "sigma_attack", "worst_case",
                 "relaxed", "realistic", "p_value", "status")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def profile_to_csv(profile: RiskProfile) -> str:
    """Eight fixed columns plus (mean, sd) per utility metric."""
    metrics = profile.metric_names()
    header = list(FIXED_COLUMNS)
    for m in metrics:
        header += [f"{m}_mean", f"{m}_sd"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    primary = profile.primary_metric()
    for row in profile.rows:
        eps_cell = "inf" if math.isinf(row.epsilon) else f"{row.epsilon:g}"
        record = [eps_cell, _cell(row.sigma_train), _cell(row.sigma_attack),
                  _cell(row.worst_case), _cell(row.relaxed), _cell(row.realistic),
                  _cell(row.p_values.get(primary)), row.status]
        for m in metrics:
            pair = row.utility.get(m)
            record += [_cell(pair[0]) if pair else "", _cell(pair[1]) if pair else ""]
        writer.writerow(record)
    return buf.getvalue()


def profile_from_json(text: str) -> RiskProfile:
    doc = json.loads(text)
    rows = []
    for r in doc["rows"]:
        def num(v):
            if v == "inf":
                return math.inf
            if v == "OVERFLOW":
                return math.inf
            return v
        rows.append(ProfileRow(
            label=r["label"], epsilon=num(r["epsilon"]),
            sigma_train=num(r["sigma_train"]), sigma_attack=num(r["sigma_attack"]),
            achieved_epsilon=num(r["achieved_epsilon"]), clip_norm=num(r["clip_norm"]),
            worst_case=r["worst_case"], relaxed=r["relaxed"], realistic=r["realistic"],
            utility={k: (v["mean"], v["sd"]) for k, v in r["utility"].items()},
            p_values=r["p_values"], status=r["status"]))
    return RiskProfile(task=doc["task"], kappa=doc["kappa"], delta=doc["delta"],
                       rows=rows, config_echo=doc.get("config", {}),
                       assumptions=doc.get("assumptions", {}))
