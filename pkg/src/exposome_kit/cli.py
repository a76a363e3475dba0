"""``exposome-kit`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 upstream or I/O
error, 4 statistical degeneracy.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import httpx

from .config import ConfigError, RunConfig, load_config
from .data import DataValidationError, SimulationConfig, load_dataset
from .epmc import EpmcClient, EpmcError, ReplayTransport
from .gateway import STUB_ENV, Gateway, GatewayError
from .pipeline import COMMAND_STEPS, PipelineContext, PipelineError, Prompts, Vocabulary, run_command
from .rater import (CampaignPaused, RatingCampaign, RatingPromptSpec, discover_photos,
                    greenness_specs, read_aggregates_csv)
from .retry import RetryPolicy
from .stats.lmm import FitConvergenceError, RankDeficientError, StatisticalDegeneracy
from .stats.reliability import DegenerateDesignError

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_DEGENERATE = 0, 2, 3, 4
PIPELINE_COMMANDS = tuple(COMMAND_STEPS)

log = logging.getLogger("exposome_kit")


def _stub_enabled(cfg: RunConfig) -> bool:
    return cfg.stub or os.environ.get(STUB_ENV, "").strip().lower() in ("1", "true", "yes", "on")


def make_gateway(cfg: RunConfig) -> Gateway:
    kwargs = dict(retry=RetryPolicy(max_attempts=cfg.retry_attempts),
                  max_in_flight=cfg.gateway_in_flight, rps=cfg.gateway_rps,
                  audit_path=cfg.output_dir / "audit" / "gateway.jsonl")
    if _stub_enabled(cfg):
        from .stub import stub_transport

        kwargs["transport"] = stub_transport()
    return Gateway(**kwargs)


def make_epmc(cfg: RunConfig) -> EpmcClient:
    transport = ReplayTransport(cfg.epmc_replay_dir) if cfg.epmc_replay_dir else None
    if cfg.epmc_replay_dir is not None:
        cfg.require(**{"epmc.replay_dir": cfg.epmc_replay_dir})
    return EpmcClient(cfg.epmc_base_url, cfg.epmc_cache_dir or cfg.output_dir / "epmc_cache",
                      transport=transport, retry=RetryPolicy(max_attempts=cfg.retry_attempts),
                      page_size=cfg.epmc_page_size, max_in_flight=cfg.fetch_in_flight)


def _prompts(cfg: RunConfig) -> Prompts:
    if cfg.data.prompts is None:
        return Prompts()
    cfg.require(**{"data.prompts": cfg.data.prompts})
    import json

    return Prompts(json.loads(cfg.data.prompts.read_text("utf-8")))


# -- commands -----------------------------------------------------------------------


def cmd_pipeline(args, cfg: RunConfig) -> int:
    first, last = COMMAND_STEPS[args.command]
    if args.from_checkpoint:
        from .pipeline import parse_step

        first = parse_step(args.from_checkpoint)
    needs = set(range(first, last + 1))
    gateway = make_gateway(cfg) if needs & {2, 3, 5} else None
    epmc = make_epmc(cfg) if needs & {1, 2} else None
    profiles = {role: cfg.model(role) for role, step in (("extract", 2), ("condense", 3),
                                                           ("cluster", 5)) if step in needs}
    if cfg.data.vocabulary is not None:
        cfg.require(**{"data.vocabulary": cfg.data.vocabulary})
    ctx = PipelineContext(
        cfg.output_dir / "literature", gateway, profiles, epmc, cfg.query_strings(),
        _prompts(cfg), Vocabulary.load(cfg.data.vocabulary), cfg.jobs, cfg.cluster_batch,
        cfg.min_studies)
    try:
        for row in run_command(ctx, args.command, args.from_checkpoint):
            print(f"step{row['step']} {row['name']}: {row['input']} -> {row['output']}")
    finally:
        for client in (gateway, epmc):
            if client is not None:
                client.close()
    return EXIT_OK


def _catalog_path(cfg: RunConfig) -> Path:
    return cfg.data.catalog or cfg.output_dir / "literature" / "effects.json"


def cmd_rate(args, cfg: RunConfig) -> int:
    from .analysis import catalog_features, load_catalog

    cfg.require(**{"data.photos": cfg.data.photos})
    photos = discover_photos(cfg.data.photos)
    prompts = _prompts(cfg).data
    if args.features == "greenness":
        specs, k = greenness_specs(prompts), cfg.rating.k_greenness
        profiles = [cfg.model("rater_a")] + ([cfg.model("rater_b")] if "rater_b" in cfg.models else [])
    else:
        path = _catalog_path(cfg)
        cfg.require(catalog=path)
        specs = [RatingPromptSpec.default(f, cfg.rating.scale_for(f), prompts=prompts)
                 for f in catalog_features(load_catalog(path))]
        k, profiles = cfg.rating.k_catalog, [cfg.model("rater_a")]
    with make_gateway(cfg) as gateway:
        campaign = RatingCampaign(cfg.output_dir / "ratings" / args.features, gateway, profiles,
                                  specs, photos, k, cfg.jobs, cfg.rating.max_edge)
        records, aggs = campaign.run()
    print(f"rated {len(photos)} photos x {len(specs)} features x {len(profiles)} model(s): "
          f"{len(records)} ratings, {len(aggs)} aggregates")
    return EXIT_OK


def _dataset(cfg: RunConfig):
    cfg.require(**{"data.ema": cfg.data.ema, "data.baseline": cfg.data.baseline})
    return load_dataset(cfg.data.ema, cfg.data.baseline)


def cmd_analyze(args, cfg: RunConfig) -> int:
    from .analysis import analyze, write_analysis

    dataset = _dataset(cfg)
    agg_path = cfg.output_dir / "ratings" / "greenness" / "aggregates.csv"
    cfg.require(aggregates=agg_path)
    model_b = cfg.model("rater_b").model if "rater_b" in cfg.models else None
    res = analyze(dataset, read_aggregates_csv(agg_path), cfg.model("rater_a").model, model_b,
                  center_trait=args.center_trait)
    paths = write_analysis(res, cfg.output_dir / "analysis", cfg.palette)
    print(f"{len(res.blocks)} models fitted; wrote {len(paths)} files to {cfg.output_dir / 'analysis'}")
    return EXIT_OK


def cmd_screen(args, cfg: RunConfig) -> int:
    from .analysis import load_catalog, screen, write_screening

    dataset = _dataset(cfg)
    path = _catalog_path(cfg)
    cfg.require(catalog=path)
    catalog = load_catalog(path)
    agg_path = cfg.output_dir / "ratings" / "catalog" / "aggregates.csv"
    cfg.require(aggregates=agg_path)
    summary = screen(dataset, read_aggregates_csv(agg_path), cfg.model("rater_a").model, catalog,
                     jobs=cfg.jobs)
    write_screening(summary, catalog, cfg.output_dir / "screening", cfg.palette)
    print(f"{summary.n_hit}/{summary.n_tested} expected effects found "
          f"({100 * summary.hit_rate:.1f}%), binomial p vs 5% = {summary.binomial_p:.3g}")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    from .analysis import simulate

    if cfg.data.ema is None or cfg.data.baseline is None:
        raise ConfigError("simulate writes to data.ema and data.baseline; set both")
    s = cfg.simulation
    sim = SimulationConfig(n_participants=s.n_participants, days=s.days,
                           alarms_per_day=s.alarms_per_day, tau00=s.tau00, sigma2=s.sigma2,
                           beta=s.beta, design=s.design, seed=cfg.seed,
                           photo_skip_prob=s.photo_skip_prob)
    photos = cfg.data.photos if s.photos else None
    truth = simulate(sim, cfg.data.ema, cfg.data.baseline, photos,
                     cfg.output_dir / "simulation" / "truth.json")
    print(f"simulated {sim.n_participants} participants, {len(truth.y)} observations "
          f"(seed {cfg.seed})")
    return EXIT_OK


COMMANDS = {**{c: cmd_pipeline for c in PIPELINE_COMMANDS}, "rate": cmd_rate,
            "analyze": cmd_analyze, "screen": cmd_screen, "simulate": cmd_simulate}

HELP = {
    "mine": "step 1: search Europe PMC and record the hits",
    "extract": "step 2: extract findings from full texts",
    "condense": "step 3: condense feature phrases into short categories",
    "cluster": "steps 4-5: partition findings and cluster categories",
    "assemble": "step 6: keep effects with enough studies and write effects.json",
    "rate": "rate photographs with the vision-language model(s)",
    "analyze": "fit mixed models and correlations for the greenness indicators",
    "screen": "test every catalog effect against the study data",
    "simulate": "write a synthetic EMA study (and photos) with known parameters",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exposome-kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, type=Path, help="run configuration (TOML)")
        p.add_argument("--jobs", type=int, help="parallel workers (overrides config)")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name in PIPELINE_COMMANDS:
            p.add_argument("--from-checkpoint", metavar="STEP",
                           help="start at this step (step1..step6), reusing earlier checkpoints")
        else:
            p.set_defaults(from_checkpoint=None)
        if name == "rate":
            p.add_argument("--features", choices=("greenness", "catalog"), default="greenness",
                           help="feature set to rate")
        if name == "analyze":
            p.add_argument("--center-trait", action="store_true",
                           help="grand-mean centre the trait predictors")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None and args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, jobs=args.jobs)
        return COMMANDS[args.command](args, cfg)
    except (StatisticalDegeneracy, FitConvergenceError, DegenerateDesignError,
            RankDeficientError) as exc:
        print(f"error: statistical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (DataValidationError, OSError, EpmcError, GatewayError, PipelineError,
            CampaignPaused, httpx.HTTPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
