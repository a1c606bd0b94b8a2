"""Batch command-line front end.

Subcommands: decompose, normalize, synth, train, eval, baseline.  Options
come from a line-oriented key=value config file plus command-line flags
(flags win).  All structured outputs are JSON with floats at 17 significant
digits, so reruns with the same config and seed are byte-identical; images
are PNG.  Progress goes to stderr, data to stdout or files.

Exit codes: 0 success, 2 config/usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import baselines, imagery, train as train_mod, unroll
from .head import HeadWeights, normalize_render, project_density

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    """Bad config file or option combination."""


class DataError(Exception):
    """Bad input data (unreadable image, malformed table, ...)."""


# ---------------------------------------------------------------------------
# config handling


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


#: key -> (parser, validator, description)
CONFIG_KEYS = {
    "seed": (int, lambda v: v >= 0, "rng seed (>= 0)"),
    "jobs": (int, lambda v: v >= 1, "concurrent workers (>= 1)"),
    "out": (str, lambda v: bool(v), "output directory"),
    "rank": (int, lambda v: v >= 1, "component count (>= 1)"),
    "iters": (int, lambda v: v >= 1, "solver iterations (>= 1)"),
    "gamma": (float, lambda v: v >= 0, "entrywise sparsity weight (>= 0)"),
    "lambda": (float, lambda v: v >= 0, "column regularization weight (>= 0)"),
    "tile": (int, lambda v: v >= 0, "tile size, 0 disables tiling"),
    "method": (str, lambda v: bool(v), "normalization/baseline method"),
    "template": (str, lambda v: bool(v), "template image path"),
    "table": (str, lambda v: bool(v), "metric table JSON path"),
    "history": (str, lambda v: bool(v), "training history JSONL path"),
    "epochs": (int, lambda v: v >= 1, "training epochs (>= 1)"),
    "lr": (float, lambda v: v > 0, "learning rate (> 0)"),
    "fd_h": (float, lambda v: v > 0, "finite-difference step (> 0)"),
    "freeze": (_parse_bool, lambda v: True, "train the classifier only"),
    "size": (int, lambda v: v >= 8, "synthetic image side (>= 8)"),
    "per_domain": (int, lambda v: v >= 2 and v % 2 == 0, "images per domain (even, >= 2)"),
}

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "out": "out",
    "rank": 8,
    "iters": 10,
    "gamma": 0.1,
    "lambda": 0.1,
    "tile": 0,
    "epochs": 20,
    "lr": 0.05,
    "fd_h": 1e-4,
    "freeze": False,
    "size": 24,
    "per_domain": 24,
}


def parse_config(text: str) -> dict:
    """Parse line-oriented key=value text; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, validator, description = CONFIG_KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        if not validator(parsed):
            raise ConfigError(f"line {lineno}: {key}={value} out of range ({description})")
        values[key] = parsed
    return values


def serialize_config(values: dict) -> str:
    """Inverse of parse_config; parse(serialize(parse(x))) == parse(x)."""
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"


def effective_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and command-line flags (flags win)."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        merged.update(parse_config(path.read_text()))
    for key in CONFIG_KEYS:
        flag = key if key != "lambda" else "lam"
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    return merged


# ---------------------------------------------------------------------------
# deterministic JSON


def dumps_deterministic(obj, indent: int = 0, compact: bool = False) -> str:
    """JSON text with floats at 17 significant digits and stable layout."""
    pad = " " * indent
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not np.isfinite(obj):
            raise ValueError("refusing to serialize non-finite float")
        return format(obj, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        inner = ", ".join(dumps_deterministic(v, indent, compact) for v in obj)
        return f"[{inner}]"
    if isinstance(obj, dict):
        if compact:
            inner = ", ".join(
                f'{json.dumps(str(k))}: {dumps_deterministic(v, 0, True)}'
                for k, v in obj.items()
            )
            return "{" + inner + "}"
        items = ",\n".join(
            f'{pad}  {json.dumps(str(k))}: {dumps_deterministic(v, indent + 2)}'
            for k, v in obj.items()
        )
        return "{\n" + items + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_json(path: Path, obj) -> None:
    path.write_text(dumps_deterministic(obj) + "\n")


# ---------------------------------------------------------------------------
# metric table and APU


class MetricTableError(Exception):
    pass


@dataclass
class MetricTable:
    """Rows of task+metric percentages, one row per method."""

    columns: list
    methods: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.methods), len(self.columns)):
            raise MetricTableError("table is not rectangular")
        if self.values.size == 0:
            raise MetricTableError("table is empty")
        if not np.all(np.isfinite(self.values)):
            raise MetricTableError("table values must be finite")

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricTable":
        try:
            columns = list(payload["columns"])
            rows = payload["rows"]
            methods = [row["method"] for row in rows]
            values = [row["values"] for row in rows]
        except (KeyError, TypeError) as exc:
            raise MetricTableError(f"malformed metric table: {exc}") from exc
        return cls(columns, methods, np.array(values, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "rows": [
                {"method": m, "values": [float(v) for v in row]}
                for m, row in zip(self.methods, self.values)
            ],
        }


def apu(table: MetricTable, method: str) -> float:
    """Average percent underperformance of one method row.

    For every column: 100 * (column max - value) / column max, averaged
    across the row. Zero exactly when the row is best everywhere.
    """
    if method not in table.methods:
        raise MetricTableError(f"method {method!r} not in table")
    col_max = table.values.max(axis=0)
    if np.any(col_max <= 0.0):
        raise MetricTableError("every column maximum must be positive")
    row = table.values[table.methods.index(method)]
    return float(np.mean(100.0 * (col_max - row) / col_max))


# ---------------------------------------------------------------------------
# helpers


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _input_images(paths: list) -> list:
    """Expand files/directories into a deterministic sorted PNG list."""
    found = []
    for entry in paths:
        p = Path(entry)
        if p.is_dir():
            found.extend(sorted(p.glob("*.png")))
        elif p.is_file():
            found.append(p)
        else:
            raise DataError(f"input not found: {p}")
    if not found:
        raise DataError("no input images")
    return found


def _solver_setup(cfg: dict):
    solver = unroll.SolverConfig(rank=cfg["rank"], iterations=cfg["iters"])
    params = unroll.default_params(
        channels=3, rank=cfg["rank"], seed=cfg["seed"],
        gamma=cfg["gamma"], lam=cfg["lambda"],
    )
    return solver, params


def _export_components(model: unroll.StainModel, width, height, out: Path, stem: str):
    """One grayscale PNG per density component, scaled by its max."""
    files, maxima = [], []
    for k in range(model.rank):
        column = model.D[:, k]
        peak = float(column.max())
        scaled = column / peak if peak > 0 else np.zeros_like(column)
        plane = np.maximum(scaled, np.finfo(np.float64).tiny)[None, :]
        name = f"{stem}.d{k}.png"
        imagery.save_image(imagery.RawImage(1, width, height, plane), out / name)
        files.append(name)
        maxima.append(peak)
    return files, maxima


def _decompose_one(path: Path, cfg: dict, solver, params, out: Path):
    raw = imagery.load_image(path)
    pieces = (
        [(raw, path.stem)]
        if cfg["tile"] == 0
        else [(t, f"{path.stem}.t{i}") for i, t in enumerate(imagery.tile(raw, cfg["tile"]))]
    )
    for piece, stem in pieces:
        model = unroll.decompose(imagery.to_optical_density(piece), params, solver)
        files, maxima = _export_components(model, piece.width, piece.height, out, stem)
        projected = project_density(model, HeadWeights(params.head), piece.width, piece.height)
        lo, hi = float(projected.min()), float(projected.max())
        scale = hi - lo
        display = (projected - lo) / scale if scale > 0 else np.zeros_like(projected)
        display = np.maximum(display, np.finfo(np.float64).tiny)
        proj_name = f"{stem}.proj.png"
        imagery.save_image(
            imagery.RawImage(3, piece.width, piece.height, display), out / proj_name
        )
        sidecar = unroll.sidecar_dict(model, solver, params)
        sidecar["config"]["seed"] = cfg["seed"]
        sidecar["geometry"] = {"width": piece.width, "height": piece.height}
        sidecar["components"] = [
            {"file": f, "max_density": m} for f, m in zip(files, maxima)
        ]
        sidecar["projection"] = {"file": proj_name, "min": lo, "max": hi}
        write_json(out / f"{stem}.sidecar.json", sidecar)
    _log(f"decomposed {path}")


def _run_batch(worker, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        for item in items:
            worker(item)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(worker, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_decompose(args) -> int:
    cfg = effective_config(args)
    solver, params = _solver_setup(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    images = _input_images(args.inputs)
    _run_batch(lambda p: _decompose_one(p, cfg, solver, params, out), images, cfg["jobs"])
    return EXIT_OK


def cmd_normalize(args) -> int:
    cfg = effective_config(args)
    method = cfg.get("method")
    if method not in ("beerla", "reinhard", "macenko"):
        raise ConfigError("normalize needs --method beerla|reinhard|macenko")
    template = None
    if method in ("reinhard", "macenko"):
        if not cfg.get("template"):
            raise ConfigError(f"--method {method} requires --template")
        template = imagery.load_image(cfg["template"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    solver, params = _solver_setup(cfg)
    reference = unroll.default_params(3, cfg["rank"], seed=cfg["seed"]).s_init

    def worker(path: Path):
        raw = imagery.load_image(path)
        if method == "beerla":
            model = unroll.decompose(imagery.to_optical_density(raw), params, solver)
            result = normalize_render(model, reference, raw.width, raw.height)
        elif method == "reinhard":
            result = baselines.reinhard_normalize(raw, template)
        else:
            result = baselines.macenko_normalize(raw, template)
        imagery.save_image(result, out / f"{path.stem}.{method}.png")
        _log(f"normalized {path} [{method}]")

    _run_batch(worker, _input_images(args.inputs), cfg["jobs"])
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = effective_config(args)
    out = Path(cfg["out"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    spec = train_mod.DomainSpec(
        width=cfg["size"], height=cfg["size"], per_domain=cfg["per_domain"]
    )
    dataset = train_mod.make_synthetic_domains(cfg["seed"], spec)
    records = []
    for i, (img, label, domain) in enumerate(
        zip(dataset.images, dataset.labels, dataset.domains)
    ):
        name = f"images/{domain.lower()}_{i:04d}_{label}.png"
        imagery.save_image(img, out / name)
        records.append({"file": name, "label": int(label), "domain": domain})
    write_json(
        out / "manifest.json",
        {
            "seed": cfg["seed"],
            "size": cfg["size"],
            "per_domain": cfg["per_domain"],
            "images": records,
        },
    )
    _log(f"wrote {len(records)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    spec = train_mod.DomainSpec(
        width=cfg["size"], height=cfg["size"], per_domain=cfg["per_domain"]
    )
    dataset = train_mod.make_synthetic_domains(cfg["seed"], spec)
    params = unroll.default_params(3, cfg["rank"], seed=cfg["seed"])
    clf = train_mod.zero_classifier()
    schedule = train_mod.TrainConfig(
        epochs=cfg["epochs"], learning_rate=cfg["lr"], fd_step=cfg["fd_h"], seed=cfg["seed"]
    )
    params, clf, history = train_mod.train_loop(
        params, clf, dataset, schedule, train_params=not cfg["freeze"]
    )
    lines = [dumps_deterministic(record, compact=True) for record in history]
    (out / "history.jsonl").write_text("\n".join(lines) + "\n")
    write_json(
        out / "params.json",
        {
            "s_init": [[float(v) for v in row] for row in params.s_init],
            "gamma": float(params.gamma),
            "lambda": float(params.lam),
            "head": [[float(v) for v in row] for row in params.head],
            "classifier": {
                "weights": [float(v) for v in clf.weights],
                "bias": float(clf.bias),
            },
        },
    )
    _log(f"trained {cfg['epochs']} epochs; final loss {history[-1]['loss']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    if cfg.get("table"):
        path = Path(cfg["table"])
        if not path.is_file():
            raise DataError(f"table not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON in {path}: {exc}") from exc
        table = MetricTable.from_dict(payload)
        report = {"apu": {m: apu(table, m) for m in table.methods}}
    elif cfg.get("history"):
        path = Path(cfg["history"])
        if not path.is_file():
            raise DataError(f"history not found: {path}")
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON line: {exc}") from exc
        if not records:
            raise DataError(f"{path}: empty history")
        report = {
            "epochs": len(records) - 1,
            "initial_loss": records[0]["loss"],
            "final_loss": records[-1]["loss"],
            "final_acc_a": records[-1]["acc_a"],
            "final_acc_b": records[-1]["acc_b"],
        }
    else:
        raise ConfigError("eval needs --table or --history")
    text = dumps_deterministic(report)
    print(text)
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = effective_config(args)
    method = cfg.get("method")
    if method not in ("macenko", "sparsenmf"):
        raise ConfigError("baseline needs --method macenko|sparsenmf")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    def worker(path: Path):
        raw = imagery.load_image(path)
        if method == "macenko":
            basis = baselines.macenko_estimate(raw)
            write_json(
                out / f"{path.stem}.basis.json",
                {
                    "method": "macenko",
                    "S": [[float(v) for v in row] for row in basis.S],
                    "max_densities": [float(v) for v in basis.max_densities],
                },
            )
        else:
            result = baselines.sparse_nmf_decompose(
                imagery.to_optical_density(raw), cfg["rank"], cfg["lambda"],
                cfg["iters"], seed=cfg["seed"],
            )
            model = unroll.StainModel(
                result.x0, result.basis.S, result.densities, result.objective_trace
            )
            files, maxima = _export_components(model, raw.width, raw.height, out, path.stem)
            write_json(
                out / f"{path.stem}.sidecar.json",
                {
                    "method": "sparsenmf",
                    "x0": [float(v) for v in result.x0],
                    "S": [[float(v) for v in row] for row in result.basis.S],
                    "max_densities": [float(v) for v in result.basis.max_densities],
                    "objective_trace": [float(v) for v in result.objective_trace],
                    "components": [
                        {"file": f, "max_density": m} for f, m in zip(files, maxima)
                    ],
                },
            )
        _log(f"baseline {method} on {path}")

    _run_batch(worker, _input_images(args.inputs), cfg["jobs"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--jobs", type=int)
    sub.add_argument("--out")


def _add_solver(sub):
    sub.add_argument("--rank", type=int)
    sub.add_argument("--iters", type=int)
    sub.add_argument("--gamma", type=float)
    sub.add_argument("--lambda", dest="lam", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainsep",
        description="Physics-based stain decomposition and normalization",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("decompose", help="factor images into stain components")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--tile", type=int)
    p.add_argument("inputs", nargs="+", help="PNG files or directories")
    p.set_defaults(func=cmd_decompose)

    p = commands.add_parser("normalize", help="stain-normalize images")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--method", choices=["beerla", "reinhard", "macenko"])
    p.add_argument("--template", help="template image (reinhard/macenko)")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_normalize)

    p = commands.add_parser("synth", help="generate the synthetic two-domain dataset")
    _add_common(p)
    p.add_argument("--size", type=int)
    p.add_argument("--per-domain", dest="per_domain", type=int)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("train", help="train solver parameters on synthetic data")
    _add_common(p)
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--fd-h", dest="fd_h", type=float)
    p.add_argument("--freeze", action="store_const", const=True, default=None,
                   help="train the classifier only")
    p.add_argument("--size", type=int)
    p.add_argument("--per-domain", dest="per_domain", type=int)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate metric tables or training history")
    _add_common(p)
    p.add_argument("--table", help="MetricTable JSON (emits APU per row)")
    p.add_argument("--history", help="training history JSONL")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("baseline", help="classical stain estimation baselines")
    _add_common(p)
    p.add_argument("--method", choices=["macenko", "sparsenmf"])
    p.add_argument("--rank", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except (
        DataError,
        MetricTableError,
        imagery.ImageDecodeError,
        baselines.ForegroundError,
        FileNotFoundError,
    ) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except ArithmeticError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
