"""End-to-end experiment orchestration.

For every privacy budget on the grid the pipeline calibrates a noise
multiplier, trains over the configured seeds, evaluates utility, computes
the theoretical bounds, runs the gradient-inversion campaign, and scores
reconstructions. Budget/seed training cells are independent jobs (optionally
run in a thread pool); assembly is a deterministic reduce over sorted cell
labels, and a failing budget only marks its own row.

All state between stages lives as files in the output directory, so the CLI
can run ``train``, ``attack`` and ``report`` separately:

    run_<label>_s<seed>.json    one training record per budget/seed cell
    model_<label>_s<seed>.bin   trained weights (container format)
    attack_<label>.bin          attacked samples + reconstruction pool
    <stage>_<label>_failed.json diagnostic for an aborted row
    profile.json / profile.csv  the assembled risk profile
    bounds.svg / curves.svg     figures, plus curve_/matches_ CSVs
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import accountant, evalrecon, imprint, models, plots, report, rero, trainer
from .accountant import PrivacyParams
from .config import ExperimentConfig
from .datagen import Dataset, generate, normalize
from .errors import DpAuditError
from .evalrecon import CumulativeCurve
from .numerics import Rng
from .trainer import Augment, EarlyStop, TrainConfig

NONPRIVATE = "nonprivate"
SUCCESS_THRESHOLD = 0.8


def budget_label(epsilon: float | None) -> str:
    return NONPRIVATE if epsilon is None else f"{epsilon:g}"


def file_label(label: str) -> str:
    return label.replace("+", "")


@dataclass(frozen=True)
class BudgetPlan:
    label: str
    target_epsilon: float | None  # None for the non-private row

    @property
    def nonprivate(self) -> bool:
        return self.target_epsilon is None

    @property
    def epsilon_value(self) -> float:
        return math.inf if self.nonprivate else self.target_epsilon


def plan_budgets(cfg: ExperimentConfig) -> list[BudgetPlan]:
    plans = [BudgetPlan(budget_label(e), float(e)) for e in cfg["privacy.epsilons"]]
    if cfg["privacy.include_nonprivate"]:
        plans.append(BudgetPlan(NONPRIVATE, None))
    return plans


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    return normalize(generate(cfg.dataset_spec()))


def build_model(cfg: ExperimentConfig, dataset: Dataset) -> models.ModelSpec:
    shape = dataset.train_images.shape[1:]
    if dataset.spec.kind == "segmentation":
        return models.unet_lite(shape, channels=cfg["model.channels"])
    n_classes = int(dataset.all_labels().max()) + 1
    kind = cfg["model.kind"]
    if kind == "dense":
        return models.dense_classifier(shape, n_classes, hidden=cfg["model.hidden"])
    if kind in ("conv", "conv_scale_norm"):
        return models.conv_classifier(shape, n_classes, widths=cfg["model.widths"],
                                      hidden=cfg["model.hidden"],
                                      scale_norm=kind == "conv_scale_norm")
    if kind == "unet_lite":
        return models.unet_lite(shape, channels=cfg["model.channels"])
    raise DpAuditError(f"unknown model kind {kind!r}")


def _dataset_loss(cfg: ExperimentConfig, dataset: Dataset):
    if dataset.spec.kind != "segmentation":
        return "cross_entropy", None
    if cfg["train.weighted_loss"]:
        return "weighted_cross_entropy", None  # defaults to SEGMENTATION_WEIGHTS
    return "weighted_cross_entropy", (1.0, 1.0, 1.0)


def _train_config(cfg: ExperimentConfig, dataset: Dataset, plan: BudgetPlan,
                  sigma: float, clip_norm: float | None, seed: int) -> TrainConfig:
    loss, class_weights = _dataset_loss(cfg, dataset)
    early = None
    if plan.nonprivate:
        early = EarlyStop(cfg["train.patience"], cfg["train.min_improvement"])
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        learning_rate=cfg["train.learning_rate"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        early_stop=early,
        clip_norm=clip_norm,
        noise_multiplier=sigma,
        augment=Augment(cfg["train.h_flip"], cfg["train.v_flip"],
                        cfg["train.multiplicity"]),
        loss=loss,
        class_weights=class_weights,
        delta=cfg["privacy.delta"],
        seed=seed,
    )


def planned_steps(cfg: ExperimentConfig, dataset: Dataset) -> tuple[float, int]:
    """(sampling rate, total planned steps) of the training mechanism."""
    n = dataset.n_train
    q = min(1.0, cfg["train.batch_size"] / n)
    steps_per_epoch = max(1, math.ceil(n / cfg["train.batch_size"]))
    return q, cfg["train.epochs"] * steps_per_epoch


def calibrate_training_sigma(cfg: ExperimentConfig, dataset: Dataset,
                             plan: BudgetPlan) -> float:
    if plan.nonprivate:
        return 0.0
    q, steps = planned_steps(cfg, dataset)
    return accountant.calibrate_sigma(plan.target_epsilon, cfg["privacy.delta"],
                                      q, steps)


def tuned_clip_norm(cfg: ExperimentConfig, dataset: Dataset,
                    model: models.ModelSpec) -> float:
    """Configured clip norm, or the probe-median heuristic at init."""
    if cfg["train.clip_norm"] is not None:
        return cfg["train.clip_norm"]
    weights = models.init_weights(model, Rng(0).split("clip-probe"))
    probe = slice(0, min(cfg["train.batch_size"], dataset.n_train))
    loss, class_weights = _dataset_loss(cfg, dataset)
    return trainer.tune_clip_norm(model, weights, dataset.train_images[probe],
                                  dataset.train_labels[probe], loss, class_weights)


@dataclass
class TrainCellResult:
    label: str
    seed: int
    sigma: float
    clip_norm: float | None
    result: trainer.TrainResult


def run_train_cell(cfg: ExperimentConfig, dataset: Dataset, model: models.ModelSpec,
                   plan: BudgetPlan, sigma: float, clip_norm: float | None,
                   seed: int) -> TrainCellResult:
    tc = _train_config(cfg, dataset, plan, sigma, clip_norm, seed)
    result = trainer.train(model, dataset, tc)
    return TrainCellResult(plan.label, seed, sigma, clip_norm, result)


def _utility_values(report_: trainer.MetricsReport) -> dict[str, float]:
    if report_.task == "classification":
        return {"mcc": report_.mcc.value}
    return {"dice_background": report_.dice[0].value,
            "dice_organ": report_.dice[1].value,
            "dice_tumour": report_.dice[2].value}


def run_record(cfg: ExperimentConfig, plan: BudgetPlan,
               cell: TrainCellResult) -> dict:
    rep = cell.result.report
    return {
        "label": plan.label,
        "target_epsilon": "inf" if plan.nonprivate else plan.target_epsilon,
        "seed": cell.seed,
        "sigma": cell.sigma,
        "clip_norm": cell.clip_norm,
        "steps": cell.result.steps,
        "batch_mode": cell.result.batch_mode,
        "epochs_run": rep.epochs_run,
        "loss_trace": rep.loss_trace,
        "utility": _utility_values(rep),
        "privacy": {"epsilon": cell.result.privacy.json_epsilon(),
                    "delta": cell.result.privacy.delta},
        "config": cfg.echo(),
    }


def train_stage(cfg: ExperimentConfig, out) -> None:
    """Train every (budget x seed) cell, persisting records and weights."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    model = build_model(cfg, dataset)
    with ThreadPoolExecutor(max_workers=max(1, cfg["parallel"])) as pool:
        for plan in plan_budgets(cfg):
            fl = file_label(plan.label)
            try:
                sigma = calibrate_training_sigma(cfg, dataset, plan)
                clip = None if plan.nonprivate else tuned_clip_norm(cfg, dataset, model)
                cells = list(pool.map(
                    lambda s: run_train_cell(cfg, dataset, model, plan, sigma, clip, s),
                    range(cfg["seeds"])))
            except DpAuditError as exc:
                (out / f"run_{fl}_failed.json").write_text(
                    json.dumps({"label": plan.label, "error": str(exc)},
                               sort_keys=True) + "\n")
                continue
            for cell in cells:
                record = run_record(cfg, plan, cell)
                (out / f"run_{fl}_s{cell.seed}.json").write_text(
                    json.dumps(record, sort_keys=True, indent=2) + "\n")
                models.save_model(out / f"model_{fl}_s{cell.seed}.bin", model,
                                  cell.result.weights, {"run": record})


def attack_sigma(cfg: ExperimentConfig, dataset: Dataset,
                 plan: BudgetPlan) -> float:
    """Noise multiplier of the dictated protocol at the same target budget.

    The server dictates tiny batches over the client's whole split, so the
    client's DP policy is calibrated for that full pass; the campaign may
    score only a subset of those rounds, which does not change the policy.
    The resulting multiplier differs from the training one (and is generally
    smaller).
    """
    if plan.nonprivate:
        return 0.0
    q = min(1.0, cfg["attack.batch_size"] / dataset.n_train)
    full_pass = math.ceil(dataset.n_train / cfg["attack.batch_size"])
    return accountant.calibrate_sigma(plan.target_epsilon, cfg["privacy.delta"],
                                      q, full_pass)


@dataclass
class AttackCellResult:
    label: str
    sigma: float
    clip_norm: float | None
    samples: np.ndarray  # raw-range attacked samples
    pool: np.ndarray     # raw-range reconstruction pool
    skipped_bins: list[int]


def run_attack_cell(cfg: ExperimentConfig, dataset: Dataset, model: models.ModelSpec,
                    plan: BudgetPlan, seed: int = 0) -> AttackCellResult:
    n_attack = min(cfg["attack.n_samples"], dataset.n_train)
    attack_ds = replace(dataset,
                        train_images=dataset.train_images[:n_attack],
                        train_labels=dataset.train_labels[:n_attack])
    rounds = math.ceil(n_attack / cfg["attack.batch_size"])
    sigma = attack_sigma(cfg, dataset, plan)
    dp = None
    clip = None
    if not plan.nonprivate:
        modified = imprint.surgery_prepend(model, model.input_shape, cfg["attack.bins"])
        block = imprint.init_imprint(cfg["attack.bins"], int(np.prod(model.input_shape)))
        probe_weights = imprint.surgery_weights(modified, block,
                                                rng=Rng(seed).split("downstream"))
        loss, class_weights = _dataset_loss(cfg, dataset)
        clip = cfg["train.clip_norm"] or trainer.tune_clip_norm(
            modified, probe_weights, attack_ds.train_images, attack_ds.train_labels,
            loss, class_weights)
        dp = PrivacyParams(sigma, clip,
                           min(1.0, cfg["attack.batch_size"] / dataset.n_train),
                           math.ceil(dataset.n_train / cfg["attack.batch_size"]),
                           cfg["privacy.delta"])
    scenario = imprint.AttackScenario(batch_size=cfg["attack.batch_size"],
                                      dp_on_client=dp, rounds=rounds,
                                      bins=cfg["attack.bins"])
    results = imprint.run_campaign(attack_ds, scenario, model, seed=seed)
    samples_raw = dataset.denormalize(attack_ds.train_images)
    pool = imprint.campaign_pool(results)
    if pool.size == 0:
        pool = np.zeros((0,) + samples_raw.shape[1:])
    return AttackCellResult(plan.label, sigma, clip, samples_raw, pool,
                            [r.skipped_bins for r in results])


def attack_stage(cfg: ExperimentConfig, out, labels=None) -> None:
    """Run the campaign for each budget (or the given labels) and persist it."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    model = build_model(cfg, dataset)
    for plan in plan_budgets(cfg):
        if labels is not None and plan.label not in labels:
            continue
        fl = file_label(plan.label)
        try:
            cell = run_attack_cell(cfg, dataset, model, plan)
        except DpAuditError as exc:
            (out / f"attack_{fl}_failed.json").write_text(
                json.dumps({"label": plan.label, "error": str(exc)},
                           sort_keys=True) + "\n")
            continue
        attack_loss = ("weighted_cross_entropy"
                       if dataset.spec.kind == "segmentation" else "cross_entropy")
        meta = {"label": plan.label, "sigma": cell.sigma,
                "clip_norm": cell.clip_norm, "bins": cfg["attack.bins"],
                "batch_size": cfg["attack.batch_size"],
                "loss": attack_loss, "labels": "true",
                "skipped_bins": cell.skipped_bins}
        write_attack_artifact(out / f"attack_{fl}.bin", cell, meta)


def write_attack_artifact(path, cell: AttackCellResult, meta: dict) -> None:
    from .container import write_container

    write_container(path, {"samples": cell.samples, "reconstructions": cell.pool},
                    meta)


def read_attack_artifact(path) -> tuple[np.ndarray, np.ndarray, dict]:
    from .container import read_container

    tensors, meta = read_container(path)
    return tensors["samples"], tensors["reconstructions"], meta


def score_attack(samples: np.ndarray, pool: np.ndarray,
                 threshold: float = SUCCESS_THRESHOLD):
    """(realistic success rate, cumulative curve, matches) for one campaign."""
    kept = evalrecon.dark_filter(samples)
    matches = evalrecon.match(samples, pool, kept_indices=kept)
    rate = evalrecon.success_rate(matches, threshold)
    curve = evalrecon.cumulative_curve(matches)
    return rate, curve, matches


def bounds_for(cfg: ExperimentConfig, dataset: Dataset, sigma: float,
               clip_norm: float | None, steps: int, kappa: float):
    privacy = PrivacyParams(sigma, clip_norm or 1.0,
                            min(1.0, cfg["train.batch_size"] / dataset.n_train),
                            steps, cfg["privacy.delta"])
    params = rero.ReroParams(privacy=privacy, prior=kappa)
    return (rero.worst_case_bound(params).gamma,
            rero.relaxed_bound(params).gamma)


def resolve_kappa(cfg: ExperimentConfig, dataset: Dataset) -> float:
    return cfg["privacy.kappa"] or 1.0 / dataset.n_train


def report_stage(cfg: ExperimentConfig, out, emit: bool = True):
    """Assemble the risk profile from stored artifacts.

    Returns (profile, curves, partial) where ``partial`` is True when any
    row failed or is missing its artifacts.
    """
    out = Path(out)
    dataset = build_dataset(cfg)
    kappa = resolve_kappa(cfg, dataset)
    task = ("segmentation" if dataset.spec.kind == "segmentation"
            else "classification")
    rows: list[report.ProfileRow] = []
    curves: dict[str, CumulativeCurve] = {}
    utility_by_label: dict[str, dict[str, list[float]]] = {}
    partial = False

    for plan in plan_budgets(cfg):
        fl = file_label(plan.label)
        row = report.ProfileRow(label=plan.label, epsilon=plan.epsilon_value)
        try:
            failure = out / f"run_{fl}_failed.json"
            if failure.exists():
                raise DpAuditError(json.loads(failure.read_text())["error"])
            records = [json.loads(p.read_text())
                       for p in sorted(out.glob(f"run_{fl}_s*.json"))]
            utilities: dict[str, list[float]] = {}
            for rec in records:
                for metric, value in rec["utility"].items():
                    utilities.setdefault(metric, []).append(value)
            if utilities:
                utility_by_label[plan.label] = utilities
                row.utility = {
                    m: (float(np.mean(v)),
                        float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
                    for m, v in utilities.items()}
            if records:
                first = records[0]
                row.sigma_train = first["sigma"]
                row.clip_norm = first["clip_norm"]
                eps = first["privacy"]["epsilon"]
                row.achieved_epsilon = math.inf if eps in ("OVERFLOW", "inf") else eps
                if plan.nonprivate:
                    row.worst_case, row.relaxed = 1.0, 1.0
                else:
                    row.worst_case, row.relaxed = bounds_for(
                        cfg, dataset, first["sigma"], first["clip_norm"],
                        first["steps"], kappa)
            attack_failure = out / f"attack_{fl}_failed.json"
            if attack_failure.exists():
                raise DpAuditError(json.loads(attack_failure.read_text())["error"])
            attack_path = out / f"attack_{fl}.bin"
            if attack_path.exists():
                samples, pool, meta = read_attack_artifact(attack_path)
                row.sigma_attack = meta.get("sigma")
                rate, curve, matches = score_attack(samples, pool)
                row.realistic = rate
                curves[plan.label] = curve
                if emit:
                    (out / f"matches_{fl}.csv").write_text(
                        evalrecon.matches_to_csv(matches))
            if not records and not attack_path.exists():
                raise DpAuditError("no stored artifacts for this budget")
        except DpAuditError as exc:
            row.status = f"failed: {exc}"
            partial = True
        rows.append(row)

    _attach_p_values(rows, utility_by_label)
    profile = report.RiskProfile(task=task, kappa=kappa, delta=cfg["privacy.delta"],
                                 rows=rows, config_echo=cfg.echo())
    if emit:
        emit_report(profile, curves, cfg["report.formats"], out)
    return profile, curves, partial


def _attach_p_values(rows, utility_by_label):
    baseline = utility_by_label.get(NONPRIVATE)
    if not baseline:
        return
    for row in rows:
        values = utility_by_label.get(row.label)
        if not values or row.status != "ok":
            continue
        for metric, series in values.items():
            base = baseline.get(metric)
            if base is not None and len(base) >= 2 and len(series) >= 2:
                row.p_values[metric] = trainer.welch_t_test(series, base)


def emit_report(profile: report.RiskProfile, curves: dict, formats, out) -> list[Path]:
    """Write profile files and figures; returns the written paths."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "profile.json"
        path.write_text(report.profile_to_json(profile))
        written.append(path)
    if "csv" in formats:
        path = out / "profile.csv"
        path.write_text(report.profile_to_csv(profile))
        written.append(path)
        for label, curve in sorted(curves.items()):
            cpath = out / f"curve_{file_label(label)}.csv"
            cpath.write_text(evalrecon.curve_to_csv(curve))
            written.append(cpath)
    if "svg" in formats:
        rows = [{"epsilon": r.epsilon, "worst_case": r.worst_case,
                 "relaxed": r.relaxed}
                for r in profile.rows if r.status == "ok" and r.worst_case is not None]
        bpath = out / "bounds.svg"
        plots.save_bound_curves(rows, bpath)
        written.append(bpath)
        cpath = out / "curves.svg"
        plots.save_cumulative_curves(curves, cpath)
        written.append(cpath)
    return written


def curves_stage(cfg: ExperimentConfig, out, emit: bool = True) -> dict:
    """Score stored attack artifacts and emit only the cumulative curves."""
    out = Path(out)
    curves: dict[str, CumulativeCurve] = {}
    for plan in plan_budgets(cfg):
        path = out / f"attack_{file_label(plan.label)}.bin"
        if not path.exists():
            continue
        samples, pool, _ = read_attack_artifact(path)
        _, curve, _ = score_attack(samples, pool)
        curves[plan.label] = curve
    if emit and curves:
        plots.save_cumulative_curves(curves, out / "curves.svg")
        for label, curve in sorted(curves.items()):
            (out / f"curve_{file_label(label)}.csv").write_text(
                evalrecon.curve_to_csv(curve))
    return curves


def run_pipeline(cfg: ExperimentConfig, out=None):
    """Full train -> attack -> report chain; returns (profile, curves, partial)."""
    out = Path(out) if out is not None else Path(cfg["out"])
    train_stage(cfg, out)
    attack_stage(cfg, out)
    return report_stage(cfg, out)
