"""Command-line entry point: simulate | fit | init-em | ordinate | cluster | diagnose."""
import argparse
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, validate
from .downstream import cocluster, posterior_mean_P
from .em import run_em
from .gibbs import ChainError, acceptance_rate_above, run_chain, tv_bound
from .io import (ArchiveError, DrawWriter, ParseError, emit_ordination_figure,
                 export_csv, load_counts, load_draws, output_lock, read_manifest,
                 write_counts, write_records, write_json)
from .model import DegenerateColumnError, simulate_design
from .ordination import ordinate

logger = logging.getLogger("ddfactor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_matrix(path, M, row_ids, col_ids, header="id"):
    with Path(path).open("w") as fh:
        fh.write("\t".join([header, *map(str, col_ids)]) + "\n")
        for rid, row in zip(row_ids, M):
            fh.write("\t".join([str(rid), *(repr(float(v)) for v in row)]) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    out = Path(args.out)
    with output_lock(out):
        rng = np.random.default_rng(args.seed)
        for r in range(args.replicates):
            sim = simulate_design(args.I, args.J, args.L, args.total, rng, alpha=args.alpha,
                                  theta=args.theta, power=args.power,
                                  two_clusters=args.two_clusters, shift=args.shift)
            tag = f"rep{r:03d}"
            write_counts(sim.counts, out / f"{tag}_counts.tsv")
            truth = {"P": sim.P, "sigma": sim.sigma, "X": sim.X, "Y": sim.Y, "S": sim.S_true}
            if sim.labels is not None:
                truth["labels"] = np.asarray(sim.labels)
            np.savez(out / f"{tag}_truth.npz", **truth)
        settings = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
        write_json(out / "simulation.json", settings)
    print(f"wrote {args.replicates} replicate(s) of {args.I}x{args.J} to {out}")
    return 0


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "input", None):
        cfg.input = args.input
    if getattr(args, "out", None):
        cfg.output = args.out
    for flag, section, name in (("iterations", "hyper", "iterations"),
                                ("burn_in", "hyper", "burn_in"),
                                ("thin", "hyper", "thin"), ("alpha", "hyper", "alpha"),
                                ("m", "hyper", "m"), ("init", "sampler", "init"),
                                ("block_size", "sampler", "block_size"),
                                ("D", "em", "D"), ("tol", "em", "tol"),
                                ("max_iter", "em", "max_iter")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(getattr(cfg, section), name, v)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.input is None:
        raise ConfigError("no input count table given (--input or config 'input')")
    if cfg.output is None:
        raise ConfigError("no output directory given (--out or config 'output')")
    return validate(cfg)


def cmd_fit(args):
    cfg = _resolve_config(args)
    table = load_counts(cfg.input)
    try:
        hyper = cfg.hyperparams().validate(table.n_otus)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg.output)
    m = hyper.n_factors(table.n_samples)
    with output_lock(out):
        cfg.dump(out / "config.resolved.json")
        settings = cfg.to_dict()
        settings.pop("output")  # an archive must not depend on where it was written
        settings.update(otu_ids=table.otu_ids, sample_ids=table.sample_ids)
        writer = DrawWriter(out / "draws", table.n_otus, table.n_samples, m,
                            settings=settings, seed=cfg.seed)
        every = max(1, hyper.iterations // 20)

        def progress(it):
            if (it + 1) % every == 0:
                logger.info("iteration %d / %d", it + 1, hyper.iterations)

        try:
            draws, diag = run_chain(table, hyper, n_jobs=args.workers,
                                    block_size=cfg.sampler.block_size, init=cfg.sampler.init,
                                    em_kwargs=vars(cfg.em), sink=writer.write,
                                    store=False, progress=progress)
        finally:
            manifest = writer.close()
        diag_d = diag.as_dict()
        diag_d.pop("seconds")
        diag_d["acceptance"] = {k: draws.meta[k] for k in
                                ("acceptance_bins", "acceptance_trials", "acceptance_hits")}
        write_json(out / "diagnostics.json", diag_d)
        full = load_draws(out / "draws", max_draws=cfg.ordination.max_draws)
        if len(full):
            _write_matrix(out / "posterior_mean_P.tsv", posterior_mean_P(full),
                          table.otu_ids, table.sample_ids, "otu_id")
        if args.csv and len(full):
            export_csv(full, out, "P")
    print(f"{manifest['n_records']} draw(s) written to {out / 'draws'} "
          f"(sha256 {manifest['sha256'][:12]}); MH acceptance {diag.mh_acceptance_rate:.3f}")
    return 0


def cmd_init_em(args):
    cfg = _resolve_config(args)
    table = load_counts(cfg.input)
    out = Path(cfg.output)
    with output_lock(out):
        cfg.dump(out / "config.resolved.json")
        res = run_em(table, D=cfg.em.D, tol=cfg.em.tol, max_iter=cfg.em.max_iter,
                     rng=np.random.default_rng(cfg.seed))
        _write_matrix(out / "em_correlation.tsv", res.gram, table.sample_ids,
                      table.sample_ids, "sample_id")
        write_json(out / "em.json", {"converged": res.converged, "n_iter": res.n_iter,
                                      "step_sizes": res.step_sizes})
    print(f"EM {'converged' if res.converged else 'stopped'} after {res.n_iter} "
          f"iteration(s); wrote {out / 'em_correlation.tsv'}")
    return 0


def _archive_labels(draws):
    settings = draws.meta.get("manifest", {}).get("settings", {})
    J = draws.S.shape[1]
    return settings.get("sample_ids") or [f"S{j + 1}" for j in range(J)]


def cmd_ordinate(args):
    draws = load_draws(args.archive, max_draws=args.max_draws)
    if len(draws) == 0:
        raise ArchiveError("archive holds no draws")
    out = Path(args.out)
    with output_lock(out):
        S0, space, cloud = ordinate(draws.S, args.d, args.mode)
        if space.d < 2:
            raise ValueError("fewer than two positive compromise eigenvalues; nothing to plot")
        labels = _archive_labels(draws)
        pairs = [(a, b) for a in range(space.d) for b in range(a + 1, space.d)]
        figures = []
        for a, b in pairs:
            path = out / f"ordination_axis{a + 1}_axis{b + 1}.svg"
            emit_ordination_figure(cloud, space, labels, path, (a, b), args.level)
            figures.append(path.name)
        records = []
        for j, lab in enumerate(labels):
            rec = {"sample": lab, "center": cloud.center[j], "points": cloud.points[:, j]}
            rec["regions"] = {f"{a + 1}-{b + 1}": cloud.regions(args.level, (a, b))[j]
                              for a, b in pairs}
            records.append(rec)
        write_records(out / "projections.jsonl", records)
        write_json(out / "space.json", {
            "eigenvalues": space.eigenvalues, "variance_ratios": space.variance_ratios,
            "axes": space.axes, "n_draws": len(draws), "mode": args.mode,
            "level": args.level, "figures": figures})
        write_json(out / "ordinate.resolved.json",
                    {k: v for k, v in vars(args).items() if k not in ("func", "verbose")})
    print(f"wrote {len(figures)} figure(s) to {out}")
    return 0


def cmd_cluster(args):
    draws = load_draws(args.archive, max_draws=args.max_draws)
    if len(draws) == 0:
        raise ArchiveError("archive holds no draws")
    k = args.k if args.k == "auto" else int(args.k)
    res = cocluster(draws, k)
    labels = _archive_labels(draws)
    out = Path(args.out)
    with output_lock(out):
        _write_matrix(out / "cocluster.tsv", res.probs, labels, labels, "sample_id")
        write_json(out / "cocluster.json", {"k": res.k, "n_draws": res.n_draws,
                                             "samples": labels})
    print(f"co-clustering with k={res.k} over {res.n_draws} draw(s) written to {out}")
    return 0


def cmd_diagnose(args):
    table = [{"k": k, "tv_bound": tv_bound(k)} for k in range(1, args.kmax + 1)]
    report = {"tv_bound": table}
    if args.archive:
        man = read_manifest(args.archive)
        report["manifest"] = {k: man[k] for k in ("dims", "n_records", "complete", "sha256")}
        diag_path = Path(args.archive).parent / "diagnostics.json"
        if diag_path.exists():
            diag = json.loads(diag_path.read_text())
            report["mh_acceptance_rate"] = diag["mh_acceptance_rate"]
            report["acceptance_by_count"] = diag["acceptance_by_count"]
            report["acceptance_n_ge_50"] = acceptance_rate_above(diag["acceptance"], 50)
            report["traces"] = diag["traces"]
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="ddfactor", description="Dependent Dirichlet process factor model "
                "for OTU count tables.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate count tables from the model")
    s.add_argument("--I", type=int, default=68)
    s.add_argument("--J", type=int, default=22)
    s.add_argument("--L", type=int, default=3)
    s.add_argument("--total", type=int, default=1000)
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--alpha", type=float, default=10.0)
    s.add_argument("--power", type=float, default=2.0,
                   help="exponent a in P ~ sigma * (Q+)^a (2 is the model)")
    s.add_argument("--theta", type=float, default=None,
                   help="equicorrelation of factor loadings across samples")
    s.add_argument("--two-clusters", action="store_true")
    s.add_argument("--shift", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    def run_opts(q):
        q.add_argument("--config")
        q.add_argument("--input")
        q.add_argument("--out")
        q.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="run the Gibbs sampler")
    run_opts(f)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", type=int, dest="burn_in")
    f.add_argument("--thin", type=int)
    f.add_argument("--alpha", type=float)
    f.add_argument("--m", type=int)
    f.add_argument("--init", choices=("em", "prior"))
    f.add_argument("--block-size", type=int, dest="block_size")
    f.add_argument("--workers", type=int, default=None,
                   help="row-block threads (default: DDFACTOR_WORKERS or 1)")
    f.add_argument("--csv", action="store_true", help="also export P draws as CSV")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("init-em", help="EM-type estimate of the sample correlation")
    run_opts(e)
    e.add_argument("--D", type=int)
    e.add_argument("--tol", type=float)
    e.add_argument("--max-iter", type=int, dest="max_iter")
    e.set_defaults(func=cmd_init_em)

    o = sub.add_parser("ordinate", help="consensus ordination figures from a draw archive")
    o.add_argument("--archive", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--d", type=int, default=3)
    o.add_argument("--level", type=float, default=0.95)
    o.add_argument("--mode", choices=("mean", "rv_weighted"), default="mean")
    o.add_argument("--max-draws", type=int, default=500, dest="max_draws")
    o.set_defaults(func=cmd_ordinate)

    c = sub.add_parser("cluster", help="posterior co-clustering probabilities")
    c.add_argument("--archive", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--k", default="auto")
    c.add_argument("--max-draws", type=int, default=500, dest="max_draws")
    c.set_defaults(func=cmd_cluster)

    d = sub.add_parser("diagnose", help="Laplace TV bounds, acceptance, trace summaries")
    d.add_argument("--archive")
    d.add_argument("--kmax", type=int, default=100)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)
    return p


def _check_args(args):
    if args.command == "ordinate":
        if not 0 < args.level < 1:
            raise ConfigError("--level must lie in (0, 1)")
        if args.d < 2:
            raise ConfigError("--d must be at least 2")
    if args.command == "cluster" and args.k != "auto":
        try:
            if int(args.k) < 1:
                raise ValueError
        except ValueError:
            raise ConfigError("--k must be 'auto' or a positive integer") from None
    if args.command == "simulate":
        if min(args.I, args.J, args.L, args.total, args.replicates) < 1:
            raise ConfigError("--I, --J, --L, --total and --replicates must be positive")
        if not 0 < args.alpha / args.I < 0.5:
            raise ConfigError("--alpha must be positive with alpha/I < 1/2")
        if args.theta is not None and not 0 <= args.theta < 1:
            raise ConfigError("--theta must lie in [0, 1)")
    if args.command == "diagnose" and args.kmax < 1:
        raise ConfigError("--kmax must be positive")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        raise ConfigError("--workers must be positive")
    env = os.environ.get("DDFACTOR_WORKERS", "")
    if env and not (env.isdigit() and int(env) >= 1):
        raise ConfigError("DDFACTOR_WORKERS must be a positive integer")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        _check_args(args)
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, ChainError, ArchiveError, DegenerateColumnError, ValueError,
            RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - keep the exit-code contract
        logger.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
