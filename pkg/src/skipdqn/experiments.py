"""Multi-seed experiment runs, feature-type ablation, leakage analysis.

An :class:`ExperimentPlan` pins everything a run depends on (data sources,
schema variant, agent config, seeds); its hash names the output directory,
so re-running a finished plan loads results instead of recomputing.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import AgentConfig, DQNTrainer, load_checkpoint, save_checkpoint
from .data import Session, parse_mssd
from .evaluation import StatResult, confidence_interval, evaluate, paired_t_test
from .explain import attribute_sessions
from .schema import StateEncoder

__all__ = [
    "ABLATION_TYPES",
    "AblationRow",
    "ExperimentPlan",
    "ExperimentResult",
    "LeakageReport",
    "plan_hash",
    "run_ablation",
    "run_experiment",
    "run_leakage_report",
    "significance_marker",
]

# Feature types subject to single-type ablation on the corrected schema.
# RE and SL are already absent there, which leaves these nine.
ABLATION_TYPES = ("RS", "PA", "SC", "PS", "HD", "PT", "PR", "SH", "TR")


@dataclass
class ExperimentPlan:
    """Everything that determines an experiment's outcome.

    Sources are CSV paths or in-memory session lists.  ``schema_variant``
    is "full" or "corrected"; ``extra_exclude`` masks additional feature
    types or names on top of the variant.
    """

    train_source: object
    test_sources: tuple = ()
    name: str = "experiment"
    schema_variant: str = "full"
    extra_exclude: tuple[str, ...] = ()
    n_runs: int = 5
    agent: AgentConfig = field(default_factory=AgentConfig)
    base_seed: int = 0
    out_dir: object = "runs"

    def __post_init__(self):
        if self.schema_variant not in ("full", "corrected"):
            raise ValueError("schema_variant must be 'full' or 'corrected'")
        if self.n_runs < 1:
            raise ValueError("n_runs must be positive")
        if not self.test_sources:
            raise ValueError("at least one test source is required")


def _source_token(source) -> str:
    """Stable identity of a data source for plan hashing."""
    if isinstance(source, (str, Path)):
        return f"path:{source}"
    h = hashlib.sha256()
    for s in source:
        h.update(s.session_id.encode())
        h.update(s.labels().tobytes())
    return f"sessions:{len(source)}:{h.hexdigest()[:16]}"


def _resolve_source(source) -> list[Session]:
    if isinstance(source, (str, Path)):
        sessions, _ = parse_mssd(source)
        return sessions
    return list(source)


def plan_hash(plan: ExperimentPlan) -> str:
    doc = {
        "train": _source_token(plan.train_source),
        "test": [_source_token(t) for t in plan.test_sources],
        "schema_variant": plan.schema_variant,
        "extra_exclude": list(plan.extra_exclude),
        "n_runs": plan.n_runs,
        "agent": asdict(plan.agent),
        "base_seed": plan.base_seed,
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass
class ExperimentResult:
    """Aggregated multi-seed outcome of one plan."""

    plan_name: str
    plan_hash: str
    out_dir: str
    run_seeds: list[int]
    # (n_runs, n_test_sources) matrices of per-run mean scores
    maa_runs: np.ndarray
    fpa_runs: np.ndarray
    # per-session score vectors averaged over runs, test sources concatenated
    session_maa: np.ndarray
    session_fpa: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mean_maa(self) -> float:
        return float(self.maa_runs.mean())

    @property
    def mean_fpa(self) -> float:
        return float(self.fpa_runs.mean())

    def ci_maa(self) -> tuple[float, float]:
        """95% CI over per-run pooled means (n = n_runs)."""
        return confidence_interval(self.maa_runs.mean(axis=1))

    def ci_fpa(self) -> tuple[float, float]:
        return confidence_interval(self.fpa_runs.mean(axis=1))

    def to_json(self) -> dict:
        return {
            "plan_name": self.plan_name,
            "plan_hash": self.plan_hash,
            "out_dir": str(self.out_dir),
            "run_seeds": self.run_seeds,
            "maa_runs": self.maa_runs.tolist(),
            "fpa_runs": self.fpa_runs.tolist(),
            "session_maa": self.session_maa.tolist(),
            "session_fpa": self.session_fpa.tolist(),
            "mean_maa": self.mean_maa,
            "mean_fpa": self.mean_fpa,
            "ci95_maa": list(self.ci_maa()) if len(self.run_seeds) > 1 else None,
            "ci95_fpa": list(self.ci_fpa()) if len(self.run_seeds) > 1 else None,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentResult":
        return cls(
            plan_name=doc["plan_name"], plan_hash=doc["plan_hash"],
            out_dir=doc["out_dir"], run_seeds=list(doc["run_seeds"]),
            maa_runs=np.asarray(doc["maa_runs"], dtype=float),
            fpa_runs=np.asarray(doc["fpa_runs"], dtype=float),
            session_maa=np.asarray(doc["session_maa"], dtype=float),
            session_fpa=np.asarray(doc["session_fpa"], dtype=float),
            meta=dict(doc.get("meta", {})))


def _variant_encoder(plan: ExperimentPlan, train: Sequence[Session]) -> StateEncoder:
    encoder = StateEncoder().fit(train)
    if plan.schema_variant == "corrected":
        encoder = encoder.corrected()
    if plan.extra_exclude:
        encoder = encoder.mask(plan.extra_exclude)
    return encoder


def run_experiment(plan: ExperimentPlan, verbose: bool = False) -> ExperimentResult:
    """Train ``n_runs`` seeds and evaluate each on every test source.

    Outputs land in ``out_dir/<name>-<hash>/``: plan echo, per-run
    checkpoints and eval reports, and an aggregate.json that later calls
    with the same plan load directly.
    """
    h = plan_hash(plan)
    out = Path(plan.out_dir) / f"{plan.name}-{h}"
    agg_path = out / "aggregate.json"
    if agg_path.exists():
        return ExperimentResult.from_json(json.loads(agg_path.read_text()))

    out.mkdir(parents=True, exist_ok=True)
    train = _resolve_source(plan.train_source)
    tests = [_resolve_source(t) for t in plan.test_sources]
    encoder = _variant_encoder(plan, train)

    (out / "plan.json").write_text(json.dumps({
        "name": plan.name, "hash": h,
        "train": _source_token(plan.train_source),
        "test": [_source_token(t) for t in plan.test_sources],
        "schema_variant": plan.schema_variant,
        "extra_exclude": list(plan.extra_exclude),
        "n_runs": plan.n_runs, "agent": asdict(plan.agent),
        "base_seed": plan.base_seed,
    }, indent=2))
    (out / "schema.json").write_text(json.dumps(encoder.schema_.to_json(), indent=2))

    run_seeds = [plan.base_seed + k for k in range(plan.n_runs)]
    maa_runs = np.empty((plan.n_runs, len(tests)))
    fpa_runs = np.empty((plan.n_runs, len(tests)))
    session_maa = None
    session_fpa = None
    timings = []
    for k, seed in enumerate(run_seeds):
        run_dir = out / f"run_{k}"
        run_dir.mkdir(exist_ok=True)
        ckpt = run_dir / "checkpoint.npz"
        config = replace(plan.agent, seed=seed)
        t0 = time.perf_counter()
        if ckpt.exists():
            net = load_checkpoint(ckpt).net
        else:
            trainer = DQNTrainer(train, encoder, config)
            trainer.run()
            net = trainer.online
            save_checkpoint(ckpt, net, encoder.schema_, config,
                            meta={"episodes": trainer.episodes_done,
                                  "env_steps": trainer.env_steps,
                                  "grad_steps": trainer.grad_steps})
        timings.append(time.perf_counter() - t0)

        per_test_maa = []
        per_test_fpa = []
        for j, test in enumerate(tests):
            report = evaluate(net, test, encoder)
            (run_dir / f"eval_{j}.json").write_text(json.dumps(report.to_json()))
            maa_runs[k, j] = report.mean_maa
            fpa_runs[k, j] = report.mean_fpa
            per_test_maa.append(report.maa_scores)
            per_test_fpa.append(report.fpa_scores)
        flat_maa = np.concatenate(per_test_maa)
        flat_fpa = np.concatenate(per_test_fpa)
        session_maa = flat_maa if session_maa is None else session_maa + flat_maa
        session_fpa = flat_fpa if session_fpa is None else session_fpa + flat_fpa
        if verbose:
            print(f"  run {k} (seed {seed}): maa={maa_runs[k].mean():.4f} "
                  f"fpa={fpa_runs[k].mean():.4f} [{timings[-1]:.1f}s]")

    result = ExperimentResult(
        plan_name=plan.name, plan_hash=h, out_dir=str(out),
        run_seeds=run_seeds, maa_runs=maa_runs, fpa_runs=fpa_runs,
        session_maa=session_maa / plan.n_runs,
        session_fpa=session_fpa / plan.n_runs,
        meta={"schema_fingerprint": encoder.fingerprint(),
              "width": encoder.width_,
              "train_sessions": len(train),
              "test_sessions": [len(t) for t in tests],
              "train_seconds": timings})
    agg_path.write_text(json.dumps(result.to_json(), indent=2))
    return result


def significance_marker(p: float) -> str:
    """'**' below 0.001, '*' below 0.05, empty otherwise."""
    if p < 0.001:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class AblationRow:
    """One ablation arm versus the corrected baseline."""

    ftype: str
    mean_maa: float
    ci_maa: tuple[float, float]
    delta_maa: float
    maa_test: StatResult
    mean_fpa: float
    ci_fpa: tuple[float, float]
    delta_fpa: float
    fpa_test: StatResult

    @property
    def maa_marker(self) -> str:
        return significance_marker(self.maa_test.p_value)

    @property
    def fpa_marker(self) -> str:
        return significance_marker(self.fpa_test.p_value)

    def to_json(self) -> dict:
        return {
            "ftype": self.ftype,
            "maa": {"mean": self.mean_maa, "ci95": list(self.ci_maa),
                    "delta": self.delta_maa, "marker": self.maa_marker,
                    "test": self.maa_test.to_json()},
            "fpa": {"mean": self.mean_fpa, "ci95": list(self.ci_fpa),
                    "delta": self.delta_fpa, "marker": self.fpa_marker,
                    "test": self.fpa_test.to_json()},
        }


@dataclass
class AblationReport:
    baseline: ExperimentResult
    rows: list[AblationRow]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"baseline": self.baseline.to_json(),
                "rows": [r.to_json() for r in self.rows],
                "meta": self.meta}

    def to_text(self) -> str:
        lines = [
            f"{'arm':<14} {'MAA':>8} {'dMAA':>8} {'sig':<3} "
            f"{'FPA':>8} {'dFPA':>8} {'sig':<3}",
            f"{'baseline':<14} {self.baseline.mean_maa:>8.3f} {'':>8} {'':<3} "
            f"{self.baseline.mean_fpa:>8.3f} {'':>8} {'':<3}",
        ]
        for r in self.rows:
            lines.append(
                f"{'-' + r.ftype:<14} {r.mean_maa:>8.3f} {r.delta_maa:>+8.3f} "
                f"{r.maa_marker:<3} {r.mean_fpa:>8.3f} {r.delta_fpa:>+8.3f} "
                f"{r.fpa_marker:<3}")
        return "\n".join(lines)

    def largest_drop(self) -> AblationRow:
        return min(self.rows, key=lambda r: r.delta_maa)


def run_ablation(plan: ExperimentPlan,
                 ftypes: Sequence[str] = ABLATION_TYPES,
                 verbose: bool = False) -> AblationReport:
    """Single-feature-type ablation against the corrected baseline.

    Each arm removes one feature type from the corrected schema, trains
    ``n_runs`` seeds, and is compared to the baseline with a paired t-test
    over per-session scores (averaged across runs before pairing).
    """
    base_plan = replace(plan, schema_variant="corrected", extra_exclude=(),
                        name=f"{plan.name}-baseline")
    if verbose:
        print(f"baseline ({base_plan.name})")
    baseline = run_experiment(base_plan, verbose=verbose)

    rows = []
    for ftype in ftypes:
        arm_plan = replace(plan, schema_variant="corrected",
                           extra_exclude=(ftype,), name=f"{plan.name}-no-{ftype}")
        if verbose:
            print(f"arm -{ftype} ({arm_plan.name})")
        arm = run_experiment(arm_plan, verbose=verbose)
        maa_test = paired_t_test(arm.session_maa, baseline.session_maa)
        fpa_test = paired_t_test(arm.session_fpa, baseline.session_fpa)
        rows.append(AblationRow(
            ftype=ftype,
            mean_maa=arm.mean_maa, ci_maa=arm.ci_maa(),
            delta_maa=arm.mean_maa - baseline.mean_maa, maa_test=maa_test,
            mean_fpa=arm.mean_fpa, ci_fpa=arm.ci_fpa(),
            delta_fpa=arm.mean_fpa - baseline.mean_fpa, fpa_test=fpa_test))

    report = AblationReport(baseline=baseline, rows=rows, meta={
        "ftypes": list(ftypes),
        "pairing": "per-session scores averaged over runs",
        "n_runs": plan.n_runs,
    })
    out = Path(baseline.out_dir).parent / f"{plan.name}-ablation.json"
    out.write_text(json.dumps(report.to_json(), indent=2))
    return report


@dataclass
class LeakageReport:
    """Full-schema vs corrected-schema comparison plus attribution ranks."""

    full: ExperimentResult
    corrected: ExperimentResult
    maa_drop: float
    fpa_drop: float
    top_slots: list[str]
    re_rank: int | None
    sl_rank: int | None
    leakage_suspected: bool
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "full": self.full.to_json(),
            "corrected": self.corrected.to_json(),
            "maa_drop": self.maa_drop,
            "fpa_drop": self.fpa_drop,
            "top_slots": self.top_slots,
            "re_rank": self.re_rank,
            "sl_rank": self.sl_rank,
            "leakage_suspected": self.leakage_suspected,
            "meta": self.meta,
        }

    def to_text(self) -> str:
        lines = [
            f"{'schema':<12} {'MAA':>8} {'FPA':>8}",
            f"{'full':<12} {self.full.mean_maa:>8.3f} {self.full.mean_fpa:>8.3f}",
            f"{'corrected':<12} {self.corrected.mean_maa:>8.3f} "
            f"{self.corrected.mean_fpa:>8.3f}",
            f"MAA drop after removing end reason + session length: "
            f"{self.maa_drop:+.3f}",
            f"top attribution slots (full schema): {', '.join(self.top_slots[:5])}",
            f"leakage suspected: {'yes' if self.leakage_suspected else 'no'}",
        ]
        return "\n".join(lines)


def run_leakage_report(plan: ExperimentPlan, attr_episodes: int = 10,
                       attr_samples: int = 200, attr_background: int = 50,
                       verbose: bool = False) -> LeakageReport:
    """Quantify what the leaking features contribute.

    Trains the full and corrected schema variants on the same data and
    seeds, reports the metric drop, and attributes the full-schema model
    to locate end-reason and session-length slots in the importance
    ranking.
    """
    full_plan = replace(plan, schema_variant="full", extra_exclude=(),
                        name=f"{plan.name}-full")
    corr_plan = replace(plan, schema_variant="corrected", extra_exclude=(),
                        name=f"{plan.name}-corrected")
    full = run_experiment(full_plan, verbose=verbose)
    corrected = run_experiment(corr_plan, verbose=verbose)

    # attribute run 0 of the full variant on the first test source
    ckpt = load_checkpoint(Path(full.out_dir) / "run_0" / "checkpoint.npz")
    encoder = StateEncoder.from_schema(ckpt.schema)
    test = _resolve_source(plan.test_sources[0])
    attribution = attribute_sessions(
        ckpt.net, test, encoder, n_episodes=attr_episodes,
        n_samples=attr_samples, background_size=attr_background,
        per_descriptor=True, seed=plan.base_seed)

    re_rank = attribution.rank_of_type("RE")
    sl_rank = attribution.rank_of_type("SL")
    top_types = {r["ftype"] for r in attribution.rows[:3]}
    leakage_suspected = bool(top_types & {"RE", "SL"})

    report = LeakageReport(
        full=full, corrected=corrected,
        maa_drop=full.mean_maa - corrected.mean_maa,
        fpa_drop=full.mean_fpa - corrected.mean_fpa,
        top_slots=attribution.top_slots(10),
        re_rank=re_rank, sl_rank=sl_rank,
        leakage_suspected=leakage_suspected,
        meta={"attribution": attribution.meta})
    out = Path(full.out_dir).parent / f"{plan.name}-leakage.json"
    out.write_text(json.dumps(report.to_json(), indent=2))
    return report
