"""Command-line harness: run protocols, verify traces, print bounds, write fixtures.

Exit codes: 0 success, 1 configuration error, 2 invariant violation found by
``verify``, 3 round budget exhausted.  The log level comes from the
``ADN_COUNT_LOG`` environment variable (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .analysis import RunTrace, run_all_checks
from .llmc import MmctConfig, run_llmc, run_mmct
from .mmc import RoundBudgetExceeded, run_mmc
from .netsim import ADVERSARY_KINDS, BLACK, WHITE, AdversarySpec, build_gadget_g1, build_gadget_g2
from .params import PAPER, Mode, worst_case_schedule

log = logging.getLogger("adn_count")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_BUDGET = 0, 1, 2, 3
PROTOCOLS = ("mmc", "mmct", "llmc")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def parse_mode(text) -> Mode:
    """``paper``, ``scaled:S`` or ``scaled:SP,SR`` (or the JSON form)."""
    if isinstance(text, (dict, Mode)):
        return text if isinstance(text, Mode) else Mode.from_json(text)
    if text == "paper":
        return PAPER
    if isinstance(text, str) and text.startswith("scaled:"):
        parts = [float(x) for x in text[len("scaled:"):].split(",")]
        if len(parts) not in (1, 2):
            raise ConfigError(f"bad mode {text!r}")
        return Mode.scaled(*parts)
    raise ConfigError(f"mode must be 'paper' or 'scaled:S[,S_R]', got {text!r}")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run; echoed verbatim into the summary."""

    protocol: str = "mmc"
    n: int | None = None
    ell: int | None = None
    zeta: float | None = None
    K: int | None = None
    blacks: list = field(default_factory=list)
    epsilon: float = 0.5
    adversary: str = "static_path"
    adversary_params: dict = field(default_factory=dict)
    seed: int = 0
    mode: object = "paper"
    round_budget: int | None = None
    trace_verbosity: int = 0
    iterations: int = 1
    exact: bool = False
    trace: str | None = None
    output: str | None = None

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if self.adversary not in ADVERSARY_KINDS or self.adversary == "adaptive_hook":
            raise ConfigError(f"unknown adversary {self.adversary!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        self.mode = parse_mode(self.mode)
        if self.round_budget is not None and self.round_budget < 1:
            raise ConfigError("round_budget must be positive")
        if self.trace and self.protocol == "llmc":
            raise ConfigError("traces are recorded for mmc and mmct runs only")
        if self.trace:
            self.trace_verbosity = max(self.trace_verbosity, 1)
        n = self.n
        if self.protocol != "mmc" or self.adversary not in ("gadget_cycle", "fixed"):
            if n is None or n < 2:
                raise ConfigError("n >= 2 is required")
        if self.protocol == "mmc":
            if self.ell is None:
                raise ConfigError("mmc needs ell")
        elif self.protocol == "mmct":
            if self.K is None or self.K < 2:
                raise ConfigError("mmct needs K >= 2")
            if any(not 0 <= b < n for b in self.blacks) or len(set(self.blacks)) != len(self.blacks):
                raise ConfigError("blacks must be distinct node indices below n")
        else:
            if self.zeta is None or not self.zeta > 0:
                raise ConfigError("llmc needs zeta > 0")
            if self.iterations < 0:
                raise ConfigError("iterations must be non-negative")

    def adversary_spec(self) -> AdversarySpec:
        return AdversarySpec(self.adversary, self.seed, dict(self.adversary_params))

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mode"] = self.mode.to_json() if isinstance(self.mode, Mode) else self.mode
        return d


def _load_config(args) -> ExperimentConfig:
    values: dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            values[name] = val
    if isinstance(values.get("blacks"), str):
        values["blacks"] = [int(x) for x in values["blacks"].split(",") if x.strip()]
    if isinstance(values.get("adversary_params"), str):
        values["adversary_params"] = json.loads(values["adversary_params"])
    try:
        cfg = ExperimentConfig(**values)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    adv = cfg.adversary_spec()
    record = cfg.trace_verbosity > 0
    code = EXIT_OK
    try:
        n = adv.node_count(cfg.n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        if cfg.protocol == "mmc":
            if not n > cfg.ell >= 1:
                raise ConfigError("need n > ell >= 1")
            res = run_mmc(n, cfg.ell, cfg.epsilon, adv, cfg.mode, round_budget=cfg.round_budget,
                          record=record, exact=cfg.exact)
            summary = res.summary()
            summary.update(all_correct=res.all_correct, synchronized=res.synchronized)
            trace = res.trace
        elif cfg.protocol == "mmct":
            mc = MmctConfig.for_cap(cfg.K, cfg.epsilon, cfg.mode)
            roles = [BLACK if v in cfg.blacks else WHITE for v in range(n)]
            res = run_mmct(mc, roles, adv, exact=cfg.exact, round_budget=cfg.round_budget, record=record)
            summary = {
                "protocol": "mmct", "n": n, "mmct": mc.to_json(), "roles": roles,
                "counts": res.counts[0], "flags": res.flags[0], "total_rounds": res.rounds,
                "simulated_rounds": res.simulated_rounds, "skipped_rounds": res.skipped_rounds,
            }
            trace = res.trace
        else:
            run = run_llmc(n, cfg.zeta, adv, cfg.mode, cfg.iterations, epsilon=cfg.epsilon, seed=cfg.seed,
                           exact=cfg.exact, round_budget=cfg.round_budget)
            summary = run.summary()
            summary["round_max_rule"] = "max over estimate paths up to K"
            trace = None
            if run.budget_exhausted:
                code = EXIT_BUDGET
        summary["status"] = "budget_exhausted" if code == EXIT_BUDGET else "done"
    except RoundBudgetExceeded as exc:
        part = exc.partial
        summary = {"protocol": cfg.protocol, "status": "budget_exhausted", "message": str(exc),
                   "rounds": getattr(part, "rounds", None)}
        trace = getattr(part, "trace", None)
        code = EXIT_BUDGET
    summary["config"] = cfg.to_json()
    summary["version"] = __version__
    if trace is not None and cfg.trace:
        trace.config["seed"] = cfg.seed
        trace.to_jsonl(cfg.trace)
        summary["trace_digest"] = trace.digest()
    _write_json(summary, cfg.output)
    return code


def cmd_verify(args) -> int:
    try:
        trace = RunTrace.from_jsonl(args.trace)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read trace {args.trace}: {exc}") from exc
    reports = run_all_checks(trace)
    ok = all(r["pass"] for r in reports)
    _write_json({"trace": str(args.trace), "pass": ok, "digest": trace.digest(), "checks": reports}, args.output)
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_bound(args) -> int:
    mode = parse_mode(args.mode)
    try:
        sched = worst_case_schedule(args.n, args.ell, args.epsilon, mode)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_json({
        "n": args.n, "ell": args.ell, "epsilon": args.epsilon, "mode": mode.to_json(),
        "E": list(sched.E), "B": list(sched.B),
        "per_epoch_rounds": {str(k): v for k, v in sorted(sched.per_epoch_rounds.items())},
        "total_bound": sched.total_bound,
    }, args.output)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lam = args.lam
    if lam < 1:
        raise ConfigError("lam must be at least 1")
    written = {}
    for name, topo in ((f"g_{lam}_1", build_gadget_g1(lam)), (f"g_{lam}_2", build_gadget_g2(lam))):
        path = out / f"{name}.json"
        path.write_text(json.dumps(topo.to_json(), indent=2) + "\n")
        written[name] = {"path": str(path), "n": topo.n, "edges": len(topo.edges)}
    _write_json(written, None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adn-count", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a protocol and write a JSON summary")
    r.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    r.add_argument("--protocol", choices=PROTOCOLS)
    r.add_argument("--n", type=int)
    r.add_argument("--ell", type=int)
    r.add_argument("--zeta", type=float)
    r.add_argument("--K", type=int)
    r.add_argument("--blacks", help="comma-separated black node indices (mmct)")
    r.add_argument("--epsilon", type=float)
    r.add_argument("--adversary")
    r.add_argument("--adversary-params", dest="adversary_params", help="JSON object")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", help="paper | scaled:S | scaled:SP,SR")
    r.add_argument("--round-budget", dest="round_budget", type=int)
    r.add_argument("--iterations", type=int, help="llmc iterations to run")
    r.add_argument("--exact", action="store_true", default=None, help="never fast-forward approximately")
    r.add_argument("--trace", help="write the per-round JSONL trace here")
    r.add_argument("--output", help="summary path (default: stdout)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run every invariant checker on a trace")
    v.add_argument("--trace", required=True)
    v.add_argument("--output")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bound", help="print the worst-case estimate schedule")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--ell", type=int, required=True)
    b.add_argument("--epsilon", type=float, default=0.5)
    b.add_argument("--mode", default="paper")
    b.add_argument("--output")
    b.set_defaults(func=cmd_bound)

    f = sub.add_parser("fixtures", help="write the indistinguishability gadgets as JSON")
    f.add_argument("--out", default="fixtures")
    f.add_argument("--lam", type=int, default=2)
    f.set_defaults(func=cmd_fixtures)
    return p


def _setup_logging() -> None:
    level = os.environ.get("ADN_COUNT_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"ADN_COUNT_LOG={level!r} is not a log level")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"adn-count: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
