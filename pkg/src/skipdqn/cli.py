"""Command line interface.

Every subcommand is reproducible from its flags plus an optional JSON
config file; explicit command-line flags override config values.  The
--data option also honors the SKIPDQN_DATA environment variable.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from .agent import AgentConfig, DQNTrainer, load_checkpoint, save_checkpoint
from .data import (GeneratorConfig, generate_sessions, parse_mssd,
                   split_sessions, write_mssd_csv)
from .evaluation import evaluate
from .explain import attribute_sessions
from .experiments import (ExperimentPlan, run_ablation, run_experiment,
                          run_leakage_report)
from .schema import StateEncoder, build_schema, corrected_schema, schema_dump

_DATA_HELP = "session log CSV (pre-joined or paired with --tracks)"


def _load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _flag_overrides(ctx, section: dict, **flags) -> dict:
    """Merge config section with flags; explicit flags win.

    A flag value may be a ``(param_name, value)`` tuple when the click
    parameter is named differently from the config key.
    """
    from click.core import ParameterSource
    out = dict(section)
    for key, value in flags.items():
        param = key
        if isinstance(value, tuple):
            param, value = value
        if key not in out or ctx.get_parameter_source(param) is ParameterSource.COMMANDLINE:
            out[key] = value
    return out


def _agent_config(cfg: dict, seed: int, episodes: int | None = None) -> AgentConfig:
    params = dict(cfg.get("agent", {}))
    if "hidden_sizes" in params:
        params["hidden_sizes"] = tuple(params["hidden_sizes"])
    params.setdefault("seed", seed)
    if episodes is not None:
        params["n_episodes"] = episodes
    return AgentConfig(**params)


def _load_sessions(data, tracks):
    sessions, stats = parse_mssd(data, tracks)
    if not sessions:
        raise click.ClickException(f"no usable sessions in {data}")
    return sessions, stats


def _synthetic_split(cfg: dict, seed: int, leakage: bool,
                     n_sessions: int, test_fraction: float = 0.2):
    gen_cfg = dict(cfg.get("generator", {}))
    gen_cfg.setdefault("n_sessions", n_sessions)
    gen_cfg.setdefault("seed", seed)
    gen_cfg["leakage_mode"] = leakage
    sessions = generate_sessions(GeneratorConfig(**gen_cfg))
    return split_sessions(sessions, test_fraction, seed=seed)


_VOLATILE_KEYS = ("train_seconds", "out_dir")


def _strip_timings(doc):
    """Remove wall-clock and path fields so report checksums reproduce."""
    if isinstance(doc, dict):
        return {k: _strip_timings(v) for k, v in doc.items()
                if k not in _VOLATILE_KEYS}
    if isinstance(doc, list):
        return [_strip_timings(v) for v in doc]
    return doc


@click.group()
@click.version_option(package_name="skipdqn")
def main():
    """Offline deep-Q toolkit for sequential music-skip prediction."""


# ---------------------------------------------------------------------------
@main.command()
@click.option("--n-sessions", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--leakage", is_flag=True,
              help="end reason deterministically encodes the label")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(),
              help="output session CSV (pre-joined)")
@click.option("--tracks", type=click.Path(),
              help="also write a separate track feature table")
@click.pass_context
def synth(ctx, n_sessions, seed, leakage, config_path, out, tracks):
    """Generate a synthetic session corpus in the ingestible CSV shape."""
    cfg = _load_config(config_path)
    gen = _flag_overrides(ctx, cfg.get("generator", {}),
                          n_sessions=n_sessions, seed=seed)
    gen["leakage_mode"] = leakage or gen.get("leakage_mode", False)
    sessions = generate_sessions(GeneratorConfig(**gen))
    write_mssd_csv(sessions, out, tracks)
    n_records = sum(len(s) for s in sessions)
    click.echo(f"wrote {len(sessions)} sessions ({n_records} records) to {out}")


@main.command()
@click.option("--data", required=True, envvar="SKIPDQN_DATA",
              type=click.Path(exists=True), help=_DATA_HELP)
@click.option("--tracks", type=click.Path(exists=True))
@click.option("--out", type=click.Path(),
              help="write the validated sessions back out as one CSV")
def ingest(data, tracks, out):
    """Parse and validate a session log, reporting what was kept."""
    sessions, stats = parse_mssd(data, tracks)
    if out:
        write_mssd_csv(sessions, out)
    click.echo(json.dumps(stats.to_json(), indent=2))


@main.group()
def schema():
    """Inspect feature schemas."""


@schema.command("dump")
@click.option("--schema", "variant", default="full", show_default=True,
              type=click.Choice(["full", "corrected"]))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--data", envvar="SKIPDQN_DATA", type=click.Path(exists=True),
              help="fit standardization statistics on this log")
@click.option("--tracks", type=click.Path(exists=True))
@click.option("--out", type=click.Path())
def schema_dump_cmd(variant, config_path, data, tracks, out):
    """Print the schema document (descriptors, slots, width, fingerprint)."""
    cfg = _load_config(config_path)
    sch = build_schema(cfg.get("schema"))
    if data:
        from .schema import fit_standardizer
        sessions, _ = _load_sessions(data, tracks)
        sch = fit_standardizer(sch, sessions)
    if variant == "corrected":
        sch = corrected_schema(sch)
    doc = json.dumps(schema_dump(sch), indent=2)
    if out:
        Path(out).write_text(doc)
    click.echo(doc)


# ---------------------------------------------------------------------------
@main.command()
@click.option("--data", envvar="SKIPDQN_DATA", type=click.Path(exists=True),
              help=_DATA_HELP + "; omit to train on a synthetic corpus")
@click.option("--tracks", type=click.Path(exists=True))
@click.option("--schema", "variant", default="full", show_default=True,
              type=click.Choice(["full", "corrected"]))
@click.option("--episodes", default=2500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(),
              help="output directory")
@click.pass_context
def train(ctx, data, tracks, variant, episodes, seed, config_path, out):
    """Train one agent and write checkpoint, trace and schema."""
    cfg = _load_config(config_path)
    if data:
        sessions, _ = _load_sessions(data, tracks)
    else:
        train_sessions, _ = _synthetic_split(cfg, seed, leakage=False,
                                             n_sessions=1000)
        sessions = train_sessions
    merged = _flag_overrides(ctx, cfg.get("agent", {}),
                             seed=seed, n_episodes=("episodes", episodes))
    config = _agent_config({"agent": merged}, merged["seed"])

    encoder = StateEncoder(**cfg.get("encoder", {})).fit(sessions)
    if variant == "corrected":
        encoder = encoder.corrected()
    trainer = DQNTrainer(sessions, encoder, config)
    trainer.run()

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.npz", trainer.online,
                    encoder.schema_, config,
                    meta={"episodes": trainer.episodes_done,
                          "env_steps": trainer.env_steps,
                          "grad_steps": trainer.grad_steps})
    (out_dir / "trace.json").write_text(json.dumps(trainer.trace.to_json()))
    (out_dir / "schema.json").write_text(
        json.dumps(schema_dump(encoder.schema_), indent=2))
    mean_r = float(np.mean(trainer.trace.rewards[-100:]))
    click.echo(f"trained {trainer.episodes_done} episodes "
               f"({trainer.grad_steps} updates); "
               f"mean return over last 100 episodes: {mean_r:.3f}")
    click.echo(f"checkpoint: {out_dir / 'checkpoint.npz'}")


@main.command("eval")
@click.option("--model", required=True, type=click.Path(exists=True),
              help="checkpoint .npz from train")
@click.option("--data", required=True, envvar="SKIPDQN_DATA",
              type=click.Path(exists=True), help=_DATA_HELP)
@click.option("--tracks", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="write the eval report JSON")
def eval_cmd(model, data, tracks, out):
    """Evaluate a checkpoint on a session log (MAA and FPA)."""
    bundle = load_checkpoint(model)
    encoder = StateEncoder.from_schema(bundle.schema)
    sessions, _ = _load_sessions(data, tracks)
    report = evaluate(bundle.net, sessions, encoder)
    if out:
        Path(out).write_text(json.dumps(report.to_json(), indent=2))
    click.echo(f"sessions: {report.n_sessions}")
    click.echo(f"MAA: {report.mean_maa:.4f}")
    click.echo(f"FPA: {report.mean_fpa:.4f}")


@main.command()
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, envvar="SKIPDQN_DATA",
              type=click.Path(exists=True), help=_DATA_HELP)
@click.option("--tracks", type=click.Path(exists=True))
@click.option("--episodes", default=50, show_default=True,
              help="sessions to attribute")
@click.option("--samples", default=200, show_default=True,
              help="coalitions per explained record")
@click.option("--background", default=100, show_default=True)
@click.option("--target", default="q_margin", show_default=True,
              type=click.Choice(["q_margin", "q_skip", "q_noskip"]))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(),
              help="output directory")
def explain(model, data, tracks, episodes, samples, background, target,
            seed, out):
    """Attribute a trained model's decisions to schema features."""
    bundle = load_checkpoint(model)
    encoder = StateEncoder.from_schema(bundle.schema)
    sessions, _ = _load_sessions(data, tracks)
    report = attribute_sessions(bundle.net, sessions, encoder,
                                n_episodes=episodes, n_samples=samples,
                                background_size=background, target=target,
                                seed=seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "attribution.json").write_text(json.dumps(report.to_json()))
    (out_dir / "attribution.csv").write_text(report.to_csv())
    click.echo("top features by mean |phi|:")
    for row in report.rows[:10]:
        click.echo(f"  {row['rank']:>2}. {row['feature']:<40} "
                   f"[{row['ftype']}] {row['mean_abs_shap']:.5f}")
    click.echo(f"max local accuracy error: "
               f"{report.meta['max_local_accuracy_error']:.2e}")


# ---------------------------------------------------------------------------
def _experiment_inputs(ctx, cfg, data, tracks, test, seed, leakage,
                       n_sessions):
    """Resolve train/test session sources for experiment commands."""
    if data:
        sessions, _ = _load_sessions(data, tracks)
        if test:
            test_sessions, _ = _load_sessions(test, None)
            return sessions, test_sessions
        frac = cfg.get("test_fraction", 0.2)
        return split_sessions(sessions, frac, seed=seed)
    return _synthetic_split(cfg, seed, leakage, n_sessions,
                            cfg.get("test_fraction", 0.2))


_experiment_options = [
    click.option("--data", envvar="SKIPDQN_DATA", type=click.Path(exists=True),
                 help=_DATA_HELP + "; omit for a synthetic corpus"),
    click.option("--tracks", type=click.Path(exists=True)),
    click.option("--test", type=click.Path(exists=True),
                 help="held-out session log (default: split from --data)"),
    click.option("--n-sessions", default=2000, show_default=True,
                 help="synthetic corpus size when --data is omitted"),
    click.option("--runs", default=5, show_default=True,
                 help="training runs per configuration"),
    click.option("--episodes", default=2500, show_default=True),
    click.option("--seed", default=0, show_default=True),
    click.option("--config", "config_path", type=click.Path(exists=True)),
    click.option("--out", default="runs", show_default=True,
                 type=click.Path(), help="output directory"),
]


def _with_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@main.command()
@_with_options(_experiment_options)
@click.pass_context
def ablate(ctx, data, tracks, test, n_sessions, runs, episodes, seed,
           config_path, out):
    """Remove one feature type at a time and test against the baseline."""
    cfg = _load_config(config_path)
    train_sessions, test_sessions = _experiment_inputs(
        ctx, cfg, data, tracks, test, seed, leakage=False,
        n_sessions=n_sessions)
    merged = _flag_overrides(ctx, cfg.get("agent", {}),
                             seed=seed, n_episodes=("episodes", episodes))
    agent = _agent_config({"agent": merged}, merged["seed"])
    plan = ExperimentPlan(
        train_source=train_sessions, test_sources=(test_sessions,),
        name=cfg.get("name", "ablation"), schema_variant="corrected",
        n_runs=runs, agent=agent, base_seed=seed, out_dir=out)
    report = run_ablation(plan, verbose=True)
    click.echo(report.to_text())
    click.echo(f"details: {Path(out) / (plan.name + '-ablation.json')}")


@main.command()
@_with_options(_experiment_options)
@click.pass_context
def leakage(ctx, data, tracks, test, n_sessions, runs, episodes, seed,
            config_path, out):
    """Compare full and corrected schemas; locate leaking features."""
    cfg = _load_config(config_path)
    train_sessions, test_sessions = _experiment_inputs(
        ctx, cfg, data, tracks, test, seed, leakage=True,
        n_sessions=n_sessions)
    merged = _flag_overrides(ctx, cfg.get("agent", {}),
                             seed=seed, n_episodes=("episodes", episodes))
    agent = _agent_config({"agent": merged}, merged["seed"])
    plan = ExperimentPlan(
        train_source=train_sessions, test_sources=(test_sessions,),
        name=cfg.get("name", "leakage"), n_runs=runs, agent=agent,
        base_seed=seed, out_dir=out)
    explain_cfg = cfg.get("explain", {})
    report = run_leakage_report(
        plan,
        attr_episodes=explain_cfg.get("n_episodes", 10),
        attr_samples=explain_cfg.get("n_samples", 200),
        attr_background=explain_cfg.get("background_size", 50),
        verbose=True)
    click.echo(report.to_text())
    click.echo(f"details: {Path(out) / (plan.name + '-leakage.json')}")


@main.command()
@_with_options(_experiment_options)
@click.option("--schema", "variant", default="full", show_default=True,
              type=click.Choice(["full", "corrected"]))
@click.pass_context
def report(ctx, data, tracks, test, n_sessions, runs, episodes, seed,
           config_path, out, variant):
    """Full pipeline: corpus, multi-seed training, evaluation, attribution.

    Writes report.json plus its sha256; the checksum is reproducible for
    a fixed seed and config.
    """
    cfg = _load_config(config_path)
    train_sessions, test_sessions = _experiment_inputs(
        ctx, cfg, data, tracks, test, seed,
        leakage=cfg.get("generator", {}).get("leakage_mode", False),
        n_sessions=n_sessions)
    merged = _flag_overrides(ctx, cfg.get("agent", {}),
                             seed=seed, n_episodes=("episodes", episodes))
    agent = _agent_config({"agent": merged}, merged["seed"])
    plan = ExperimentPlan(
        train_source=train_sessions, test_sources=(test_sessions,),
        name=cfg.get("name", "report"), schema_variant=variant,
        n_runs=runs, agent=agent, base_seed=seed, out_dir=out)
    result = run_experiment(plan, verbose=True)

    explain_cfg = cfg.get("explain", {})
    ckpt = load_checkpoint(Path(result.out_dir) / "run_0" / "checkpoint.npz")
    encoder = StateEncoder.from_schema(ckpt.schema)
    attribution = attribute_sessions(
        ckpt.net, test_sessions, encoder,
        n_episodes=explain_cfg.get("n_episodes", 50),
        n_samples=explain_cfg.get("n_samples", 200),
        background_size=explain_cfg.get("background_size", 100),
        seed=seed)

    doc = _strip_timings({
        "schema_variant": variant,
        "n_train_sessions": len(train_sessions),
        "n_test_sessions": len(test_sessions),
        "agent": asdict(agent),
        "experiment": result.to_json(),
        "attribution": attribution.to_json(),
        "summary": {
            "mean_maa": result.mean_maa,
            "mean_fpa": result.mean_fpa,
            "ci95_maa": list(result.ci_maa()) if runs > 1 else None,
            "ci95_fpa": list(result.ci_fpa()) if runs > 1 else None,
            "top_features": attribution.top_slots(10),
        },
    })
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    checksum = hashlib.sha256(payload.encode()).hexdigest()
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(payload)
    (out_dir / "report.sha256").write_text(checksum + "\n")
    click.echo(f"MAA {result.mean_maa:.4f}  FPA {result.mean_fpa:.4f}  "
               f"runs {runs}")
    click.echo("top features: " + ", ".join(attribution.top_slots(5)))
    click.echo(f"report checksum: {checksum}")


if __name__ == "__main__":
    main()
