#!/usr/bin/env python3
"""jobpower command line workbench: fit, update, predict, cap and simulate"""

import argparse
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tabulate import tabulate

# Add project to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from jobpower.config.run_config import McmcConfig, RunConfig, load_run_config  # noqa: E402
from jobpower.config.settings import settings  # noqa: E402
from jobpower.services.calibration import (  # noqa: E402
    bayesian_predictor,
    calibration_table,
    pragmatic_predictor,
    run_calibration,
    zscore_table,
)
from jobpower.services.cap_optimizer import Budget, naive_caps, optimize_caps  # noqa: E402
from jobpower.services.core_model import JobSeries, ParentParams  # noqa: E402
from jobpower.services.degradation import degradation_curve  # noqa: E402
from jobpower.services.job_predictor import (  # noqa: E402
    JOB_POSTERIOR_SCHEMA,
    FixedParent,
    JobPosterior,
    PredictiveEnsemble,
    fix_parent,
    predict,
    update_job,
)
from jobpower.services.machine_sim import (  # noqa: E402
    budget_for_demand_fraction,
    evaluate_strategies,
    generate_corpus,
    load_reference_parent,
    sample_mixes,
    summarize_scores,
    templates_from_series,
    win_rates,
)
from jobpower.services.mcmc_engine import load_checkpoint, potential_scale_reduction, run_chains  # noqa: E402
from jobpower.services.pragmatic_estimator import (  # noqa: E402
    EmpiricalParent,
    PragmaticPosterior,
    fit_empirical_parent,
    predict_pragmatic,
    update_job_pragmatic,
)
from jobpower.services.trace_io import read_json, read_traces, write_json, write_table, write_traces  # noqa: E402
from jobpower.utils.exceptions import ConfigurationError, DataFormatError, JobPowerException  # noqa: E402
from jobpower.utils.logging_setup import configure_logging  # noqa: E402
from jobpower.utils.monitoring import monitor  # noqa: E402
from jobpower.utils.rng import stream  # noqa: E402

DEFAULT_CAP_STEP_W = 100.0


def _parse_floats(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigurationError(f"expected a comma-separated list of numbers, got '{text}'") from e


def _parse_overrides(pairs: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects KEY=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _pick_job(corpus: Sequence[JobSeries], job_id: Optional[str]) -> JobSeries:
    if job_id is None:
        return corpus[0]
    for job in corpus:
        if job.job_id == job_id:
            return job
    raise DataFormatError(f"job '{job_id}' not found in traces")


def default_caps(peak: float, idle: float, step: float = DEFAULT_CAP_STEP_W) -> List[float]:
    """Caps on a ``step`` W grid from the first multiple above idle to the first at or above the peak"""
    first = np.floor(idle / step) * step + step
    last = max(first, np.ceil(peak / step) * step)
    return [float(c) for c in np.arange(first, last + step / 2, step)]


class JobPowerCli:
    """Command line interface for jobpower"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.output_dir = config.output_dir
        self.threads = config.threads or settings.THREADS

    def _path(self, name: Optional[str], default: str) -> str:
        return name or os.path.join(self.output_dir, default)

    def _mcmc(self, section: McmcConfig) -> McmcConfig:
        """Sampler section seeded from the run seed unless the file pins its own"""
        if "seed" in section.model_fields_set:
            return section
        return section.model_copy(update={"seed": self.config.seed})

    def _parent(self, path: Optional[str]) -> ParentParams:
        return load_reference_parent() if path is None else ParentParams.from_dict(read_json(path))

    def generate(self, n_templates: Optional[int], parent_path: Optional[str], out: Optional[str]) -> None:
        """Synthetic job corpus drawn from a parent"""
        n_templates = n_templates or self.config.machine.n_templates
        print(f"🧪 Generating {n_templates} synthetic jobs\n")
        parent = self._parent(parent_path)
        templates = generate_corpus(n_templates, parent, seed=self.config.seed,
                                    n_regimes=self.config.hyperpriors.n_regimes)
        out = self._path(out, "corpus.csv")
        write_traces(out, [t.trace for t in templates])

        truth = {
            "parent": parent.to_dict(),
            "jobs": {
                t.template_id: {
                    "n_cages": t.n_cages,
                    "duration": t.duration,
                    "mu": t.params.mu.tolist(),
                    "lam": t.params.lam.tolist(),
                    "v": t.params.v.tolist(),
                    "sigma2": t.params.sigma2,
                    "rho": t.params.rho,
                }
                for t in templates
            },
        }
        truth_path = os.path.join(os.path.dirname(os.path.abspath(out)), "corpus_truth.json")
        write_json(truth_path, truth)

        durations = np.array([t.duration for t in templates])
        cages = np.array([t.n_cages for t in templates])
        rows = [
            ["Jobs", n_templates],
            ["Minutes (total)", int(durations.sum())],
            ["Duration (mean)", f"{durations.mean():.1f}"],
            ["Cages (mean)", f"{cages.mean():.2f}"],
            ["Cages (max)", int(cages.max())],
        ]
        print(tabulate(rows, tablefmt="simple"))
        print(f"\n💾 Traces: {out}")
        print(f"💾 True parameters: {truth_path}")

    def fit_parent(self, traces: str, out: Optional[str], checkpoint_dir: Optional[str], resume: bool) -> None:
        """Run the full sampler on a corpus and freeze the parent"""
        corpus = read_traces(traces)
        mcmc = self._mcmc(self.config.mcmc)
        print(f"🔗 Sampling {mcmc.n_chains} chain(s) x {mcmc.n_iterations} iterations on {len(corpus)} jobs\n")

        states, checkpoints = [], []
        for chain_id in range(mcmc.n_chains):
            checkpoint = None
            if checkpoint_dir or resume:
                checkpoint = os.path.join(checkpoint_dir or os.path.join(self.output_dir, "checkpoints"),
                                          f"chain{chain_id}.json")
            state = None
            if resume and checkpoint and os.path.isfile(checkpoint):
                state, seed = load_checkpoint(checkpoint)
                if seed != mcmc.seed:
                    raise ConfigurationError(f"checkpoint {checkpoint} was written with seed {seed}, not {mcmc.seed}")
                print(f"⏩ Chain {chain_id} resumes at iteration {state.iteration} with {len(state.samples)} samples")
            states.append(state)
            checkpoints.append(checkpoint)
        chains = run_chains(corpus, self.config.hyperpriors, mcmc, threads=self.threads,
                            resume_from=states, checkpoint_paths=checkpoints)

        fixed = fix_parent(chains, config=self.config.parent_fit, seed=stream(self.config.seed, "fix_parent"))
        out = self._path(out, "fixed_parent.json")
        write_json(out, fixed.to_dict())

        trace_rows = [
            {"chain": c.chain_id, "iteration": s.iteration, **s.parent.scalars()}
            for c in chains for s in c.samples
        ]
        trace_path = os.path.join(os.path.dirname(os.path.abspath(out)), "parent_trace.csv")
        write_table(trace_path, pd.DataFrame(trace_rows))

        print("📊 Fixed parent:")
        print(tabulate(sorted(fixed.scalars.items()), headers=["Parameter", "Posterior mean"], floatfmt=".5g"))
        print(f"\n  Mixture residual: {fixed.fit_residual:.4f}")
        acceptance = [[c.chain_id, step, f"{rate:.3f}"] for c in chains for step, rate in c.acceptance.items()]
        if acceptance:
            print("\n🎯 MH acceptance:")
            print(tabulate(acceptance, headers=["Chain", "Step", "Rate"]))

        if len(chains) > 1 and min(len(c.samples) for c in chains) >= 4:
            rhat = potential_scale_reduction(chains)
            write_json(os.path.join(os.path.dirname(os.path.abspath(out)), "rhat.json"), rhat)
            print("\n📐 R-hat:")
            print(tabulate(sorted(rhat.items()), headers=["Parameter", "R-hat"], floatfmt=".4f"))
        print(f"\n💾 Fixed parent: {out}")

    def fit_pragmatic(self, traces: str, out: Optional[str]) -> None:
        """Per-job maximum-likelihood fits forming the empirical parent"""
        corpus = read_traces(traces)
        print(f"📐 Fitting {len(corpus)} jobs by mixture clustering and maximum likelihood\n")
        parent = fit_empirical_parent(corpus, self.config.pragmatic, seed=self.config.seed)
        out = self._path(out, "pragmatic_parent.json")
        parent.save(out)
        rows = [[e.job_id, e.n_regimes, f"{e.sigma2:.1f}", f"{e.rho:.3f}", f"{e.tau2:.1f}"]
                for e in parent.estimates[:20]]
        print(tabulate(rows, headers=["Job", "Regimes", "sigma2", "rho", "tau2"]))
        if len(parent) > 20:
            print(f"  ... {len(parent) - 20} more")
        print(f"\n💾 Pragmatic parent: {out}")

    def update_job(
        self,
        traces: str,
        job_id: Optional[str],
        model: str,
        parent_path: str,
        history_minutes: Optional[int],
        censor_quantile: Optional[float],
        out: Optional[str],
    ) -> None:
        """Posterior of one running job given its history so far"""
        history = _pick_job(read_traces(traces), job_id)
        if history_minutes is not None:
            history = history.head(history_minutes)
        if censor_quantile is not None:
            history = history.censor_at_quantile(censor_quantile)
        print(f"🔄 Updating job {history.job_id} on {history.length} minute(s) of history ({model})\n")

        if model == "bayesian":
            parent = FixedParent.from_dict(read_json(parent_path))
            draws = update_job(history, parent, self._mcmc(self.config.update), self.config.hyperpriors.n_regimes)
            posterior = JobPosterior(history.job_id, draws, history.n_cages, history.start_minute + history.length)
            rows = [
                ["Draws", len(draws)],
                ["sigma2 (mean)", f"{np.mean([d.sigma2 for d in draws]):.2f}"],
                ["rho (mean)", f"{np.mean([d.rho for d in draws]):.4f}"],
            ]
            data = posterior.to_dict()
        else:
            parent = EmpiricalParent.load(parent_path)
            posterior = update_job_pragmatic(history, parent, self.config.pragmatic.independent_likelihood)
            top = np.argsort(posterior.weights)[::-1][:3]
            rows = [["Entries", len(parent)]]
            rows += [[f"Weight {parent.estimates[i].job_id}", f"{posterior.weights[i]:.4f}"] for i in top]
            data = posterior.to_dict()

        out = self._path(out, f"posterior_{history.job_id}.json")
        write_json(out, data)
        print(tabulate(rows, tablefmt="simple"))
        print(f"\n💾 Posterior: {out}")

    def predict(
        self,
        posterior_path: str,
        parent_path: str,
        horizon: Optional[int],
        realizations: Optional[int],
        out: Optional[str],
    ) -> None:
        """Future power realizations of a job from its posterior"""
        horizon = horizon or self.config.prediction.horizon
        realizations = realizations or self.config.prediction.realizations
        data = read_json(posterior_path)

        if data.get("schema") == JOB_POSTERIOR_SCHEMA:
            posterior = JobPosterior.from_dict(data)
            parent = FixedParent.from_dict(read_json(parent_path))
            ensemble = predict(posterior.draws, parent, horizon, realizations, posterior.n_cages,
                               seed=stream(self.config.seed, "predict", posterior.job_id),
                               job_id=posterior.job_id, start_minute=posterior.next_minute)
        else:
            posterior = PragmaticPosterior.from_dict(data)
            parent = EmpiricalParent.load(parent_path)
            ensemble = predict_pragmatic(posterior, parent, horizon, realizations, posterior.n_cages,
                                         seed=stream(self.config.seed, "predict_pragmatic", posterior.job_id),
                                         job_id=posterior.job_id, start_minute=posterior.next_minute)

        out = self._path(out, f"ensemble_{ensemble.job_id}.csv")
        write_table(out, ensemble.to_frame())
        print(f"🔮 {realizations} realizations of job {ensemble.job_id} over {horizon} minute(s)\n")
        q = np.quantile(ensemble.cage_watts, [0.025, 0.5, 0.975], axis=0)
        rows = [[ensemble.start_minute + t, f"{ensemble.cage_watts[:, t].mean():.1f}",
                 f"{q[0, t]:.1f}", f"{q[1, t]:.1f}", f"{q[2, t]:.1f}"] for t in range(ensemble.horizon)]
        print(tabulate(rows, headers=["Minute", "Mean W", "2.5%", "50%", "97.5%"]))
        print(f"\n💾 Ensemble: {out}")

    def degradation_curve(
        self,
        traces: Optional[str],
        job_id: Optional[str],
        ensemble_path: Optional[str],
        idle: Optional[float],
        caps: Optional[List[float]],
        step: float,
        out: Optional[str],
    ) -> None:
        """Cap-vs-degradation table for a trace or an ensemble"""
        idle = self.config.machine.idle_power_w if idle is None else idle
        if ensemble_path:
            ensemble = PredictiveEnsemble.from_frame(pd.read_csv(ensemble_path, dtype={"job_id": str}))
            ensemble = ensemble[0] if job_id is None else next(
                (e for e in ensemble if e.job_id == job_id), None)
            if ensemble is None:
                raise DataFormatError(f"job '{job_id}' not found in ensemble")
            label, watts = ensemble.job_id, ensemble.cage_watts
        elif traces:
            job = _pick_job(read_traces(traces), job_id)
            label, watts = job.job_id, job.watts
        else:
            raise ConfigurationError("degradation-curve needs --traces or --ensemble")

        caps = caps or default_caps(float(np.max(watts)), idle, step)
        table = degradation_curve(watts, caps, idle)
        out = self._path(out, f"degradation_{label}.csv")
        write_table(out, table)
        print(f"📉 Degradation bound for {label} (idle {idle:g} W)\n")
        print(tabulate(table.values.tolist(), headers=list(table.columns), floatfmt=".4f"))
        print(f"\n💾 Curve: {out}")

    def optimize_caps(
        self,
        ensembles_path: str,
        objective: str,
        n_idle: Optional[int],
        total: Optional[float],
        out: Optional[str],
    ) -> None:
        """Per-job caps for the running jobs of an ensemble file"""
        ensembles = PredictiveEnsemble.from_frame(pd.read_csv(ensembles_path, dtype={"job_id": str}))
        counts = [e.n_cages for e in ensembles]
        machine = self.config.machine
        n_idle = machine.n_cages - sum(counts) if n_idle is None else n_idle
        budget = Budget.from_machine(machine, n_idle, total)
        job_ids = [e.job_id for e in ensembles]
        print(f"⚡ Allocating {budget.job_budget:.0f} W over {len(ensembles)} job(s), {sum(counts)} cage(s)\n")

        if objective == "naive":
            plan = naive_caps(budget, counts, job_ids)
        else:
            plan = optimize_caps(ensembles, counts, budget, objective, machine.idle_power_w,
                                 self.config.optimizer, seed=stream(self.config.seed, "optimize_caps"),
                                 job_ids=job_ids,
                                 strategy="c_avg" if objective == "weighted_mean" else "c_max")
        out = self._path(out, "cap_plan.json")
        write_json(out, plan.to_json())
        rows = [[r["job_id"], r["n_cages"], f"{r['cap_watts']:.1f}"] for r in plan.to_records()]
        print(tabulate(rows, headers=["Job", "Cages", "Cap W"]))
        if plan.objective is not None:
            print(f"\n  Objective estimate: {plan.objective:.5f}")
        if plan.stagnated:
            print("⚠️  Optimizer stopped before converging")
        print(f"  Budget identity error: {plan.budget_error(budget):.2e}")
        print(f"\n💾 Plan: {out}")

    def simulate(
        self,
        corpus_path: Optional[str],
        n_mixes: Optional[int],
        fixed_parent_path: Optional[str],
        pragmatic_parent_path: Optional[str],
        demand_fraction: Optional[float],
    ) -> None:
        """Score the capping strategies on steady-state job mixes"""
        machine = self.config.machine
        strategies = self.config.strategies
        if corpus_path:
            corpus = templates_from_series(read_traces(corpus_path))
        else:
            corpus = generate_corpus(machine.n_templates, load_reference_parent(), seed=self.config.seed,
                                     n_regimes=self.config.hyperpriors.n_regimes)
        n_mixes = machine.n_mixes if n_mixes is None else n_mixes
        print(f"🖥️  Simulating {n_mixes} mix(es) on {machine.n_cages} cages with {len(corpus)} templates\n")

        models = {}
        if any(s.endswith("_B") for s in strategies):
            if fixed_parent_path:
                models["bayesian"] = FixedParent.from_dict(read_json(fixed_parent_path))
            else:
                print("ℹ️  No fixed parent given, using the reference parent")
                models["bayesian"] = FixedParent.from_parent(load_reference_parent(), {"kind": "reference"})
        if any(s.endswith("_P") for s in strategies):
            if pragmatic_parent_path:
                models["pragmatic"] = EmpiricalParent.load(pragmatic_parent_path)
            else:
                fittable = [t.trace for t in corpus if t.duration >= self.config.pragmatic.min_samples]
                models["pragmatic"] = fit_empirical_parent(fittable, self.config.pragmatic, seed=self.config.seed)

        mixes = sample_mixes(corpus, machine, seed=self.config.seed, n_mixes=n_mixes)
        job_budget = None
        if demand_fraction is not None:
            job_budget = budget_for_demand_fraction(mixes, corpus, machine, demand_fraction)
            print(f"  Job-area budget: {job_budget:.0f} W ({demand_fraction:.0%} of mean demand)\n")

        scores = evaluate_strategies(mixes, corpus, models, self.config, strategies,
                                     seed=self.config.seed, threads=self.threads, job_budget=job_budget)
        write_table(os.path.join(self.output_dir, "scores.csv"), scores)
        for metric in ("weighted_avg", "max"):
            rates = win_rates(scores, metric)
            write_table(os.path.join(self.output_dir, f"win_rates_{metric}.csv"),
                        rates.reset_index().rename(columns={"index": "strategy"}))
        summary = summarize_scores(scores)
        write_json(os.path.join(self.output_dir, "summary.json"), {
            "mixes": n_mixes,
            "strategies": strategies,
            "job_budget_w": job_budget,
            "results": summary,
        })
        if mixes:
            write_table(os.path.join(self.output_dir, "occupancy.csv"), mixes[0].occupancy_frame())

        rows = [[s, f"{v['mean_weighted_avg']:.2%}", f"{v['median_weighted_avg']:.2%}",
                 f"{v['mean_max']:.2%}", f"{v['median_max']:.2%}"] for s, v in summary.items()]
        print(tabulate(rows, headers=["Strategy", "Mean wavg", "Median wavg", "Mean max", "Median max"]))
        print(f"\n💾 Scores: {os.path.join(self.output_dir, 'scores.csv')}")

    def calibrate(self, traces: str, model: str, parent_path: str, variance_factor: float) -> None:
        """Q-Q calibration scenarios of predicted degradation"""
        corpus = read_traces(traces)
        if model == "bayesian":
            predictor = bayesian_predictor(FixedParent.from_dict(read_json(parent_path)),
                                           self._mcmc(self.config.update), self.config.hyperpriors.n_regimes)
        else:
            predictor = pragmatic_predictor(EmpiricalParent.load(parent_path),
                                            self.config.pragmatic.independent_likelihood)
        print(f"🎯 Calibrating {model} predictions on {len(corpus)} jobs\n")
        results = run_calibration(corpus, predictor, self.config.machine.idle_power_w, self.config.calibration,
                                  seed=self.config.seed, threads=self.threads, variance_factor=variance_factor)
        table = calibration_table(results)
        write_table(os.path.join(self.output_dir, "calibration.csv"), table)
        write_table(os.path.join(self.output_dir, "zscores.csv"), zscore_table(results))
        print(tabulate(table.values.tolist(), headers=list(table.columns), floatfmt=".3f"))
        inside = int(table["inside"].sum()) if len(table) else 0
        print(f"\n✅ {inside}/{len(table)} scenario(s) inside the simultaneous band")
        print(f"💾 Results: {os.path.join(self.output_dir, 'calibration.csv')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="jobpower - job power modeling, prediction and power capping",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  jobpower_cli.py generate --templates 100
  jobpower_cli.py fit-parent output/corpus.csv --set mcmc.n_iterations=2000
  jobpower_cli.py update-job output/corpus.csv --job-id job0003 --parent output/fixed_parent.json
  jobpower_cli.py predict output/posterior_job0003.json --parent output/fixed_parent.json
  jobpower_cli.py degradation-curve --ensemble output/ensemble_job0003.csv
  jobpower_cli.py simulate --strategies all --mixes 10
        """
    )
    parser.add_argument("--config", help="Run configuration file (KEY=VALUE lines)")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--threads", type=int, help="Worker threads")
    parser.add_argument("--output-dir", help="Directory for outputs")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration key (repeatable)")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen = subparsers.add_parser("generate", help="Generate a synthetic job corpus")
    gen.add_argument("--templates", type=int, help="Number of jobs")
    gen.add_argument("--parent", help="Parent parameters JSON (default: reference parent)")
    gen.add_argument("--out", help="Trace CSV to write")

    fit = subparsers.add_parser("fit-parent", help="Run the sampler and freeze the parent")
    fit.add_argument("traces", help="Trace CSV")
    fit.add_argument("--out", help="Fixed parent JSON to write")
    fit.add_argument("--checkpoint-dir", help="Directory for chain checkpoints")
    fit.add_argument("--resume", action="store_true", help="Resume chains from their checkpoints")

    prag = subparsers.add_parser("fit-pragmatic", help="Fit the pragmatic estimator to every job")
    prag.add_argument("traces", help="Trace CSV")
    prag.add_argument("--out", help="Pragmatic parent JSON to write")

    upd = subparsers.add_parser("update-job", help="Update one job given its history")
    upd.add_argument("traces", help="Trace CSV holding the job's history")
    upd.add_argument("--job-id", help="Job to update (default: first in file)")
    upd.add_argument("--model", choices=["bayesian", "pragmatic"], default="bayesian")
    upd.add_argument("--parent", required=True, help="Fixed parent or pragmatic parent JSON")
    upd.add_argument("--history-minutes", type=int, help="Use only the first N minutes")
    upd.add_argument("--censor-quantile", type=float, help="Censor the history at this quantile")
    upd.add_argument("--out", help="Posterior JSON to write")

    pred = subparsers.add_parser("predict", help="Simulate a job's future power")
    pred.add_argument("posterior", help="Posterior JSON from update-job")
    pred.add_argument("--parent", required=True, help="Parent used for the update")
    pred.add_argument("--horizon", type=int, help="Minutes ahead")
    pred.add_argument("--realizations", type=int, help="Number of realizations")
    pred.add_argument("--out", help="Ensemble CSV to write")

    deg = subparsers.add_parser("degradation-curve", help="Cap-vs-degradation table")
    deg.add_argument("--traces", help="Trace CSV")
    deg.add_argument("--ensemble", help="Ensemble CSV")
    deg.add_argument("--job-id", help="Job to use (default: first)")
    deg.add_argument("--idle", type=float, help="Idle power per cage in W")
    deg.add_argument("--caps", help="Comma-separated caps in W")
    deg.add_argument("--step", type=float, default=DEFAULT_CAP_STEP_W, help="Default cap grid step in W")
    deg.add_argument("--out", help="CSV to write")

    opt = subparsers.add_parser("optimize-caps", help="Allocate caps to running jobs")
    opt.add_argument("ensembles", help="Ensemble CSV with one job_id per running job")
    opt.add_argument("--objective", choices=["weighted_mean", "expected_max", "naive"], default="weighted_mean")
    opt.add_argument("--n-idle", type=int, help="Idle cages (default: machine size minus busy cages)")
    opt.add_argument("--total", type=float, help="Total machine budget in W")
    opt.add_argument("--out", help="Plan JSON to write")

    sim = subparsers.add_parser("simulate", help="Score capping strategies on simulated job mixes")
    sim.add_argument("--corpus", help="Trace CSV of job templates (default: synthetic)")
    sim.add_argument("--mixes", type=int, help="Number of job mixes")
    sim.add_argument("--strategies", help="Comma-separated strategies or 'all'")
    sim.add_argument("--fixed-parent", help="Fixed parent JSON for the _B strategies")
    sim.add_argument("--pragmatic-parent", help="Pragmatic parent JSON for the _P strategies")
    sim.add_argument("--demand-fraction", type=float,
                     help="Job-area budget as a fraction of mean uncapped demand")

    cal = subparsers.add_parser("calibrate", help="Q-Q calibration of predicted degradation")
    cal.add_argument("traces", help="Trace CSV")
    cal.add_argument("--model", choices=["bayesian", "pragmatic"], default="bayesian")
    cal.add_argument("--parent", required=True, help="Fixed parent or pragmatic parent JSON")
    cal.add_argument("--variance-factor", type=float, default=1.0,
                     help="Scale predictive variance (0.5 gives the negative control)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    try:
        settings.validate()
        configure_logging()
        monitor.reset()
        overrides = _parse_overrides(args.set)
        overrides.update({"seed": args.seed, "threads": args.threads, "output_dir": args.output_dir})
        if args.command == "simulate" and args.strategies:
            overrides["strategies"] = args.strategies
        cli = JobPowerCli(load_run_config(args.config, overrides))

        if args.command == "generate":
            cli.generate(args.templates, args.parent, args.out)
        elif args.command == "fit-parent":
            cli.fit_parent(args.traces, args.out, args.checkpoint_dir, args.resume)
        elif args.command == "fit-pragmatic":
            cli.fit_pragmatic(args.traces, args.out)
        elif args.command == "update-job":
            cli.update_job(args.traces, args.job_id, args.model, args.parent,
                           args.history_minutes, args.censor_quantile, args.out)
        elif args.command == "predict":
            cli.predict(args.posterior, args.parent, args.horizon, args.realizations, args.out)
        elif args.command == "degradation-curve":
            cli.degradation_curve(args.traces, args.job_id, args.ensemble, args.idle,
                                  _parse_floats(args.caps), args.step, args.out)
        elif args.command == "optimize-caps":
            cli.optimize_caps(args.ensembles, args.objective, args.n_idle, args.total, args.out)
        elif args.command == "simulate":
            cli.simulate(args.corpus, args.mixes, args.fixed_parent, args.pragmatic_parent, args.demand_fraction)
        elif args.command == "calibrate":
            cli.calibrate(args.traces, args.model, args.parent, args.variance_factor)
    except JobPowerException as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (pd.errors.ParserError, FileNotFoundError) as e:
        print(f"❌ DataFormatError: {e}", file=sys.stderr)
        return DataFormatError.exit_code

    if settings.DEBUG:
        print(f"\n🔍 Monitor: {monitor.get_metrics()}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
