"""Command-line interface.

    nowcast-cde synth --config spec.json --out DIR
    nowcast-cde train --config run.json [--seed N] [--solver rk4] [--out DIR]
    nowcast-cde ablate-missing --config run.json --rates 0.1,0.2
    nowcast-cde compare-solvers --config run.json
    nowcast-cde param-report --config a.json --config b.json

A run config is one JSON object. Data comes from either "panel" + "meta"
(CSV and JSON paths) or "synthetic" (a spec path or an inline spec object);
paths are resolved relative to the config file. Any TrainConfig field may
appear at top level, next to "preset", "groups", "window", "split",
"missing_rate", "missing_seed", "name" and "out". Flags override config keys.

Exit codes: 0 ok, 1 runtime or numerical failure, 2 config or IO error. On
failure stderr gets exactly one JSON line {"error", "exit_code", "message"}.
"""
import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import ncde, nowcast, pipeline, synthetic
from .nowcast import MetricError, TrainConfig
from .panel import load_panel, write_panel

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
RUN_FIELDS = {"panel", "meta", "synthetic", "preset", "groups", "window", "split", "missing_rate",
              "missing_seed", "name", "out"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig
    panel: Path = None
    meta: Path = None
    synthetic: object = None  # Path or inline dict
    groups: list = None
    window: int = 15
    split: tuple = (0.7, 0.15, 0.15)
    missing_rate: float = 0.0
    missing_seed: int = None
    name: str = None
    out: Path = None
    source: Path = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, doc, base_dir=Path("."), source=None):
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}: config must be a JSON object")
        unknown = set(doc) - TRAIN_FIELDS - RUN_FIELDS
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
        has_real = "panel" in doc or "meta" in doc
        if has_real == ("synthetic" in doc):
            raise ConfigError(f"{source}: give either panel+meta or synthetic, not both or neither")

        def resolve(p):
            p = Path(p)
            p = p if p.is_absolute() else base_dir / p
            if not p.exists():
                raise ConfigError(f"{p}: file not found")
            return p

        train_doc = {k: v for k, v in doc.items() if k in TRAIN_FIELDS}
        try:
            if doc.get("preset"):
                train = TrainConfig.preset(doc["preset"], **train_doc)
            else:
                train = TrainConfig(**train_doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls(train=train, source=source)
        if has_real:
            if "panel" not in doc or "meta" not in doc:
                raise ConfigError(f"{source}: real data needs both 'panel' and 'meta'")
            cfg.panel, cfg.meta = resolve(doc["panel"]), resolve(doc["meta"])
        else:
            syn = doc["synthetic"]
            cfg.synthetic = syn if isinstance(syn, dict) else resolve(syn)
        cfg.groups = doc.get("groups")
        cfg.window = int(doc.get("window", 15))
        cfg.split = tuple(doc.get("split", (0.7, 0.15, 0.15)))
        cfg.missing_rate = float(doc.get("missing_rate", 0.0))
        cfg.missing_seed = doc.get("missing_seed")
        cfg.name = doc.get("name")
        if doc.get("out") is not None:
            out = Path(doc["out"])
            cfg.out = out if out.is_absolute() else base_dir / out
        if not 0.0 <= cfg.missing_rate < 1.0:
            raise ConfigError(f"{source}: missing_rate must lie in [0, 1)")
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"{path}: file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent, path)

    def with_flags(self, args):
        """Apply command-line overrides (flag > config > default)."""
        cfg = self
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
        if getattr(args, "solver", None) is not None:
            cfg = replace(cfg, train=replace(cfg.train, solver=args.solver))
        if getattr(args, "out", None) is not None:
            cfg = replace(cfg, out=Path(args.out))
        return cfg

    def load_panel(self):
        if self.synthetic is not None:
            spec = (synthetic.SyntheticSpec.from_dict(self.synthetic) if isinstance(self.synthetic, dict)
                    else synthetic.SyntheticSpec.load(self.synthetic))
            return synthetic.generate_synthetic(spec)[0]
        return load_panel(self.panel, self.meta)

    def run_kwargs(self):
        return dict(groups=self.groups, window=self.window, split=self.split,
                    missing_rate=self.missing_rate, missing_seed=self.missing_seed)


@contextmanager
def out_lock(out_dir):
    """Create out_dir and hold an exclusive lock file inside it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{out_dir}: output directory is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _out_dir(cfg):
    if cfg.out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return cfg.out


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])


def _log(args):
    return print if getattr(args, "verbose", False) else None


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.config is None:
        raise ConfigError("synth needs --config pointing at a synthetic spec JSON")
    spec = synthetic.SyntheticSpec.load(args.config)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.out is None:
        raise ConfigError("synth needs --out")
    panel, truth = synthetic.generate_synthetic(spec)
    with out_lock(args.out) as out:
        write_panel(panel, out / "panel.csv", out / "meta.json")
        nowcast.write_json(truth, out / "truth.json")
    print(f"wrote {panel.n_times} months x {panel.n_series} series to {out}")
    return EXIT_OK


def train_once(cfg, out, plots=True, log=None):
    panel = cfg.load_panel()
    res = pipeline.run(panel, cfg.train, log=log, **cfg.run_kwargs())
    ncde.save_checkpoint(res.model.params, out / "checkpoint.npz",
                         {"groups": res.factors.groups, "config": asdict(cfg.train)})
    res.history.write_csv(out / "history.csv")
    nowcast.write_nowcasts(res.test["per_window"], out / "nowcasts.csv")
    nowcast.write_nowcasts(res.baseline["per_window"], out / "baseline_nowcasts.csv")
    res.factors.write_csv(out / "factors.csv")
    nowcast.write_json(nowcast.metrics_document(res.test, cfg.train, res.param_count), out / "metrics.json")
    nowcast.write_json({"mse": res.baseline["mse"], "mape": res.baseline["mape"],
                        "n_test": res.baseline["n_test"]}, out / "baseline_metrics.json")
    if plots:
        from . import plotting

        plotting.plot_nowcasts(res.test["per_window"], out / "nowcasts.png", res.baseline["per_window"])
        plotting.plot_history(res.history, out / "history.png")
        plotting.plot_factors(res.factors, out / "factors.png")
        plotting.plot_loadings(res.test["per_window"], res.factors.groups, out / "loadings.png")
    return res


def cmd_train(args):
    cfg = RunConfig.load(args.config).with_flags(args)
    with out_lock(_out_dir(cfg)) as out:
        res = train_once(cfg, out, plots=not args.no_plots, log=_log(args))
    print(f"test mse {res.test['mse']:.6g} mape {res.test['mape']:.6g} "
          f"(dfm-only mse {res.baseline['mse']:.6g}) params {res.param_count}")
    return EXIT_OK


def _parse_rates(text):
    try:
        rates = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"--rates must be comma-separated numbers, got {text!r}") from None
    if not rates or any(not 0.0 <= r < 1.0 for r in rates):
        raise ConfigError(f"missing rates must lie in [0, 1), got {text!r}")
    return rates


def cmd_ablate_missing(args):
    cfg = RunConfig.load(args.config).with_flags(args)
    rates = _parse_rates(args.rates)
    panel = cfg.load_panel()
    rows = []
    with out_lock(_out_dir(cfg)) as out:
        for rate in rates:
            kw = {**cfg.run_kwargs(), "missing_rate": rate}
            res = pipeline.run(panel, cfg.train, log=_log(args), **kw)
            rows.append({"rate": rate, "model": "ncdenow", "mse": res.test["mse"], "mape": res.test["mape"]})
            rows.append({"rate": rate, "model": "dfm", "mse": res.baseline["mse"],
                         "mape": res.baseline["mape"]})
            print(f"rate {rate:g}: ncdenow mse {res.test['mse']:.6g} dfm mse {res.baseline['mse']:.6g}")
        _write_rows(out / "ablation.csv", ["rate", "model", "mse", "mape"], rows)
        if not args.no_plots:
            from . import plotting

            plotting.plot_ablation(rows, out / "ablation.png")
    return EXIT_OK


def cmd_compare_solvers(args):
    cfg = RunConfig.load(args.config).with_flags(args)
    panel = cfg.load_panel()
    with out_lock(_out_dir(cfg)) as out:
        results = pipeline.compare_solvers(panel, cfg.train, log=_log(args), **cfg.run_kwargs())
        rows = [{"solver": s, "mse": r.test["mse"], "mape": r.test["mape"], "param_count": r.param_count}
                for s, r in results.items()]
        _write_rows(out / "solvers.csv", ["solver", "mse", "mape", "param_count"], rows)
    for r in rows:
        print(f"{r['solver']}: mse {r['mse']:.6g} mape {r['mape']:.6g}")
    return EXIT_OK


def cmd_param_report(args):
    if not args.config:
        raise ConfigError("param-report needs at least one --config")
    configs = [RunConfig.load(p).with_flags(args) for p in args.config]
    if args.out is None:
        raise ConfigError("param-report needs --out")
    rows = []
    with out_lock(args.out) as out:
        for path, cfg in zip(args.config, configs):
            res = pipeline.run(cfg.load_panel(), cfg.train, log=_log(args), **cfg.run_kwargs())
            rows.append({"model": cfg.name or Path(path).stem, "param_count": res.param_count,
                         "mape": res.test["mape"]})
            print(f"{rows[-1]['model']}: {res.param_count} parameters, mape {res.test['mape']:.6g}")
        _write_rows(out / "param_report.csv", ["model", "param_count", "mape"], rows)
        if not args.no_plots:
            from . import plotting

            plotting.plot_param_report(rows, out / "param_report.png")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="nowcast-cde", description="NCDENow GDP nowcasting")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, multi=False):
        if multi:
            p.add_argument("--config", action="append", help="run config JSON (repeatable)")
        else:
            p.add_argument("--config", help="config JSON")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--solver", choices=ncde.SOLVERS)
        p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
        p.add_argument("-v", "--verbose", action="store_true", help="print per-epoch progress")
        return p

    common(sub.add_parser("synth", help="sample a synthetic panel")).set_defaults(func=cmd_synth)
    common(sub.add_parser("train", help="fit factors, train, evaluate")).set_defaults(func=cmd_train)
    p = common(sub.add_parser("ablate-missing", help="retrain under injected missingness"))
    p.add_argument("--rates", default="0.1,0.2", help="comma-separated missing rates")
    p.set_defaults(func=cmd_ablate_missing)
    common(sub.add_parser("compare-solvers", help="euler vs rk4 at identical seeds")).set_defaults(
        func=cmd_compare_solvers)
    common(sub.add_parser("param-report", help="parameter count vs MAPE"), multi=True).set_defaults(
        func=cmd_param_report)
    return parser


def _fail(exc, code):
    line = {"error": type(exc).__name__, "exit_code": code, "message": " ".join(str(exc).split())}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command != "param-report" and isinstance(args.config, list):
        args.config = args.config[-1]
    try:
        return args.func(args)
    except MetricError as exc:
        return _fail(exc, EXIT_RUNTIME)
    except (ValueError, OSError, KeyError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except (RuntimeError, ArithmeticError, ncde.NcdeError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001 - one structured line, never a traceback
        return _fail(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
