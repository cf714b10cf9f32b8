"""Command-line surface: train, predict, certify, eval, synth, bench, verify.

Exit codes: 0 success, 2 usage or I/O failure, 3 verification failure.
Config precedence is flags > config file (--config, JSON or TOML) > built-in
defaults. Every command takes --seed and is fully deterministic for fixed
seeds and flags; wall-clock measurements go to the log sink (stderr or
--log), never into result files. The CLD_THREADS environment variable caps
worker parallelism (this implementation executes block loops sequentially in
a fixed order, so results never depend on it).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .admm import AdmmConfig, GateConfig, TrainingError, train
from .cert import certify_batch, certified_accuracy, var_bound_fro, var_bound_l21, amgm_bound
from .cvxprog import ConvexProblem, objective
from .dataio import (
    AlignmentError,
    DataFormatError,
    LabelError,
    load_manifest,
    pool_masked_mean,
    read_features,
    read_sequence,
    write_features,
    write_labels,
    write_manifest,
)
from .gates import enumerate_patterns
from .head import ModelFormatError, load_model, predict_batch, save_model, to_relu
from .linops import GatedOperator, PcgConfig
from .metrics import evaluate
from .oracle import FistaConfig, dense_solve_smallest, fista_solve, _DENSE_GUARD
from .synth import SynthSpec, generate, split

_USAGE_ERRORS = (DataFormatError, AlignmentError, LabelError, TrainingError,
                 ModelFormatError, ValueError, OSError)


class VerificationFailure(RuntimeError):
    """Oracle cross-check exceeded tolerance."""


# --- small helpers ---------------------------------------------------------

def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp.{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _log_sink(path):
    if path is None:
        fh = sys.stderr
        return lambda rec: print(json.dumps(rec, sort_keys=True), file=fh)
    fh = open(path, "a", encoding="utf-8")
    return lambda rec: (fh.write(json.dumps(rec, sort_keys=True) + "\n"), fh.flush())[0]


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".toml":
        import tomllib

        return tomllib.loads(raw.decode("utf-8"))
    return json.loads(raw.decode("utf-8"))


def _setting(args, config: dict, name: str, default):
    flag = getattr(args, name, None)
    if flag is not None:
        return flag
    if name in config:
        return config[name]
    return default


def _default_gate_count(K: int) -> int:
    return 10 if K == 2 else 32


def _solver_configs(args, K: int) -> tuple[GateConfig, AdmmConfig]:
    config = _load_config_file(getattr(args, "config", None))
    seed = _setting(args, config, "seed", 0)
    pcg = PcgConfig(
        max_iters=int(_setting(args, config, "pcg_iters", 32)),
        rel_tol=float(_setting(args, config, "pcg_tol", 1e-8)),
        preconditioner=str(_setting(args, config, "precond", "nystrom")),
        rank=int(_setting(args, config, "rank", 20)),
    )
    stop_tol = _setting(args, config, "stop_tol", None)
    cfg = AdmmConfig(
        rho=float(_setting(args, config, "rho", 1e-4)),
        beta=float(_setting(args, config, "beta", 1e-3)),
        admm_iters=int(_setting(args, config, "admm_iters", 6)),
        pcg=pcg,
        mode=str(_setting(args, config, "mode", "relaxed")),
        penalty_kind=str(_setting(args, config, "penalty", "l21")),
        seed=int(seed),
        stop_tol=None if stop_tol is None else float(stop_tol),
    )
    gate_cfg = GateConfig(
        count=int(_setting(args, config, "gates", _default_gate_count(K))),
        seed=int(seed),
        dedup=True,
        enumerate_all=bool(getattr(args, "enumerate_gates", False)),
    )
    return gate_cfg, cfg


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML file with default-overriding settings")
    p.add_argument("--beta", type=float, help="group-penalty weight (default 1e-3)")
    p.add_argument("--rho", type=float, help="consensus penalty (default 1e-4)")
    p.add_argument("--admm-iters", dest="admm_iters", type=int, help="outer iterations (default 6)")
    p.add_argument("--pcg-iters", dest="pcg_iters", type=int, help="inner solver cap (default 32)")
    p.add_argument("--pcg-tol", dest="pcg_tol", type=float, help="inner relative tolerance (default 1e-8)")
    p.add_argument("--precond", choices=("identity", "jacobi", "nystrom"),
                   help="inner-solver preconditioner (default nystrom)")
    p.add_argument("--rank", type=int, help="preconditioner sketch rank (default 20)")
    p.add_argument("--gates", type=int, help="activation patterns to sample (default 10 binary / 32 multiclass)")
    p.add_argument("--enumerate-gates", dest="enumerate_gates", action="store_true",
                   help="enumerate the complete pattern set (tiny instances only)")
    p.add_argument("--mode", choices=("relaxed", "exact"), help="training mode (default relaxed)")
    p.add_argument("--penalty", choices=("l21", "frobenius"), help="penalty kind (default l21)")
    p.add_argument("--stop-tol", dest="stop_tol", type=float,
                   help="stop early once both residuals fall below this")
    p.add_argument("--seed", type=int, help="seed for gates / preconditioner probes (default 0)")


def _head_objective(head, X, Y):
    """Objective of the stored weights under the training operator."""
    if head.mode == "exact":
        op = GatedOperator.split(X, head.gates, head.K)
        S = np.concatenate([head.V, head.W], axis=0)
    else:
        op = GatedOperator.relaxed(X, head.gates, head.K)
        S = head.V
    kind = head.penalty_kind
    prob = ConvexProblem(op, Y, head.train_meta["admm"]["beta"], kind, "relaxed", ())
    return objective(prob, S), prob


_FISTA_VERIFY_GUARD = 1_000_000   # n * P * d budget for the accelerated oracle


def _cross_check(head, X, labels, tol: float, log) -> dict:
    """Compare the trained objective against the reference solvers.

    Each oracle only runs when the instance is small enough for it; asking
    for verification on an instance too large for either is an error.
    """
    if head.mode != "relaxed":
        raise ValueError("oracle verification covers relaxed-mode training only")
    size = X.shape[0] * head.P * head.d
    if size > _FISTA_VERIFY_GUARD:
        raise ValueError(
            f"instance too large to verify (n*P*d = {size} > {_FISTA_VERIFY_GUARD}); "
            "verify a subsample instead"
        )
    Y = labels.one_hot()
    obj_head, prob = _head_objective(head, X, Y)
    fista = fista_solve(prob, FistaConfig(max_iters=20000, seed=head.train_meta["admm"]["seed"]))
    values = {"admm": obj_head.total, "fista": fista.objective}
    if size <= _DENSE_GUARD:
        values["dense"] = dense_solve_smallest(prob).objective
    lo, hi = min(values.values()), max(values.values())
    rel = (hi - lo) / max(abs(hi), 1e-300)
    report = {"objectives": values, "relative_spread": rel, "tolerance": tol}
    log({"verify": report})
    if rel > tol:
        raise VerificationFailure(
            f"solver objectives disagree: spread {rel:.3e} > tolerance {tol:.1e} ({values})"
        )
    return report


# --- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(
        languages=args.languages,
        accents_per_language=tuple(int(x) for x in args.accents.split(",")),
        dim=args.dim,
        language_separation=args.separation,
        accent_spread=args.spread,
        noise_sigma=args.sigma,
        samples_per_accent=args.samples_per_accent,
        seed=args.seed if args.seed is not None else 0,
    )
    data = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / "features.cldf", data.features)
    write_labels(out / "labels.csv", data.labels)
    write_manifest(out / "manifest.json", "features.cldf", "labels.csv", data.labels.label_map)
    lines = ["id,accent_id,label"]
    names = data.labels.names
    for i, (a, y) in enumerate(zip(data.accent_ids, data.labels.class_ids)):
        lines.append(f"{i},{a},{names[y]}")
    _atomic_write(out / "accents.csv", "\n".join(lines) + "\n")
    print(f"wrote {data.features.n} x {data.features.d} features to {out} "
          f"(nearest-center accuracy {data.nearest_center_accuracy:.4f})")
    return 0


def cmd_train(args) -> int:
    log = _log_sink(args.log)
    X, labels = load_manifest(args.manifest)
    gate_cfg, cfg = _solver_configs(args, labels.K)
    t0 = time.perf_counter()
    head = train(X, labels, gate_cfg, cfg, log=log)
    log({"phase": "train", "seconds": time.perf_counter() - t0})
    if args.verify:
        _cross_check(head, X.values, labels, tol=args.verify_tol, log=log)
    save_model(head, args.out)
    print(f"model written to {args.out} (B_l21 {head.cert.B_l21:.6g})")
    return 0


def _pooled_inputs(path):
    """Pool one CLDS file or a directory of them into embedding rows."""
    path = Path(path)
    files = sorted(path.glob("*.clds")) if path.is_dir() else [path]
    if not files:
        raise DataFormatError(f"no .clds sequence files under {path}")
    ids, rows = [], []
    for f in files:
        ids.append(f.stem)
        rows.append(pool_masked_mean(read_sequence(f)))
    return ids, np.vstack(rows)


def cmd_predict(args) -> int:
    log = _log_sink(args.log)
    head = load_model(args.model)
    if args.pool:
        ids, H = _pooled_inputs(args.features)
    else:
        fm = read_features(args.features)
        ids, H = [str(i) for i in range(fm.n)], fm.values
    if H.shape[1] != head.d:
        raise DataFormatError(f"features have dimension {H.shape[1]}, model expects {head.d}")
    names = head.class_names
    header = "id,pred_class,pred_label," + ",".join(f"logit_{k}" for k in range(head.K))
    lines = [header]
    for ex_id, h in zip(ids, H):
        t0 = time.perf_counter()
        logits = predict_batch(head, h[None, :], args.inference)[0]
        log({"id": ex_id, "latency_ms": (time.perf_counter() - t0) * 1e3})
        pred = int(np.argmax(logits))
        lines.append(f"{ex_id},{pred},{names[pred]}," + ",".join(_fmt(v) for v in logits))
    _atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"predictions for {len(ids)} examples written to {args.out}")
    return 0


def _parse_grid(text: str) -> np.ndarray:
    values = np.array([float(x) for x in text.split(",") if x.strip() != ""])
    if values.size == 0:
        raise ValueError("empty eps grid")
    return values


def cmd_certify(args) -> int:
    head = load_model(args.model)
    X, labels = load_manifest(args.manifest)
    if X.d != head.d:
        raise DataFormatError(f"features have dimension {X.d}, model expects {head.d}")
    certs = certify_batch(head, X.values, labels.class_ids, L_E=args.L_E)
    lines = ["id,pred,true,margin,radius_feature,radius_audio,certified"]
    for ex_id, y, c in zip(labels.ids, labels.class_ids, certs):
        lines.append(
            f"{ex_id},{c.pred},{y},{_fmt(c.margin)},{_fmt(c.radius_feature)},"
            f"{_fmt(c.radius_audio)},{str(c.certified).lower()}"
        )
    _atomic_write(args.out, "\n".join(lines) + "\n")
    eps = _parse_grid(args.eps_grid)
    curve = certified_accuracy(head, X.values, labels.class_ids, eps)
    radii = np.array([c.radius_feature for c in certs])
    net = to_relu(head)
    summary = {
        "n": labels.n,
        "bounds": {"B_l21": var_bound_l21(head), "B_fro_scaled": var_bound_fro(head),
                   "B_amgm": amgm_bound(net)},
        "relu_accuracy": float(np.mean([c.pred == y for c, y in zip(certs, labels.class_ids)])),
        "certified_fraction": float(np.mean([c.certified for c in certs])),
        "mean_radius": float(radii.mean()),
        "median_radius": float(np.median(radii)),
        "L_E": args.L_E,
        "certified_accuracy": {"eps": eps.tolist(), "accuracy": curve.tolist()},
        "inference_mode": "relu",
        "note": ("head trained in relaxed mode: certificates describe relu-mode "
                 "inference, which may differ from gated training predictions off "
                 "the training set" if head.mode == "relaxed" else None),
    }
    _atomic_write(args.summary, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"certificates for {labels.n} examples written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    head = load_model(args.model)
    X, labels = load_manifest(args.manifest)
    logits = predict_batch(head, X.values, args.inference)
    accents = None
    if args.accents:
        rows = Path(args.accents).read_text(encoding="utf-8").strip().splitlines()[1:]
        accents = np.array([int(r.split(",")[1]) for r in rows])
    report = evaluate(logits.argmax(axis=1), labels, accents=accents)
    text = json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    if args.confusion_csv:
        names = labels.names
        lines = ["true\\pred," + ",".join(names)]
        for k, row in enumerate(report.confusion):
            lines.append(names[k] + "," + ",".join(str(int(c)) for c in row))
        _atomic_write(args.confusion_csv, "\n".join(lines) + "\n")
    return 0


def _stratified_order(group_ids: np.ndarray, pool: np.ndarray) -> np.ndarray:
    """Round-robin over groups: any prefix splits samples evenly across them.

    Benchmarks pass accent ids here so every training subset covers all
    accents equally, the same protocol the evaluation set follows.
    """
    by_group = [pool[group_ids[pool] == g] for g in np.unique(group_ids[pool])]
    order = []
    for i in range(max(len(b) for b in by_group)):
        for b in by_group:
            if i < len(b):
                order.append(b[i])
    return np.array(order)


def cmd_bench(args) -> int:
    log = _log_sink(args.log)
    seed = args.seed if args.seed is not None else 0
    spec = SynthSpec(
        languages=args.languages,
        accents_per_language=tuple(int(x) for x in args.accents.split(",")),
        dim=args.dim,
        language_separation=args.separation,
        accent_spread=args.spread,
        noise_sigma=args.sigma,
        samples_per_accent=args.samples_per_accent,
        seed=seed,
    )
    data = generate(spec)
    train_idx, test_idx, _val_idx = split(data.labels.class_ids, seed=seed)
    gate_cfg, cfg = _solver_configs(args, data.labels.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    order = _stratified_order(data.accent_ids, train_idx)
    X = data.features.values
    names = data.labels.names
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = ["size,n_train,accuracy,certified_fraction,mean_radius"]
    for size in sizes:
        n_train = min(size, order.size)
        if size > order.size:
            print(f"warning: size {size} exceeds the {order.size} available training rows; "
                  f"capping to {n_train}", file=sys.stderr)
        sub = order[:n_train]
        sub_labels = type(data.labels)(data.labels.class_ids[sub], data.labels.label_map)
        t0 = time.perf_counter()
        head = train(X[sub], sub_labels, gate_cfg, cfg)
        log({"size": size, "phase": "train", "seconds": time.perf_counter() - t0})
        t0 = time.perf_counter()
        logits = predict_batch(head, X[test_idx])
        preds = logits.argmax(axis=1)
        report = evaluate(preds, data.labels.class_ids[test_idx],
                          accents=data.accent_ids[test_idx], class_names=names)
        log({"size": size, "phase": "eval", "seconds": time.perf_counter() - t0})
        t0 = time.perf_counter()
        certs = certify_batch(head, X[test_idx], data.labels.class_ids[test_idx])
        log({"size": size, "phase": "certify", "seconds": time.perf_counter() - t0})
        radii = np.array([c.radius_feature for c in certs])
        certified = float(np.mean([c.certified for c in certs]))
        _atomic_write(out / f"metrics_{size}.json",
                      json.dumps({**report.to_json_dict(),
                                  "certified_fraction": certified,
                                  "mean_radius": float(radii.mean()),
                                  "n_train": int(n_train)},
                                 indent=2, sort_keys=True) + "\n")
        acc_lines = ["accent_id,label,n,accuracy"]
        accent_langs = {}
        for a, y in zip(data.accent_ids[test_idx], data.labels.class_ids[test_idx]):
            accent_langs[int(a)] = names[y]
        for a, acc in sorted(report.per_accent.items()):
            count = int(np.sum(data.accent_ids[test_idx] == a))
            acc_lines.append(f"{a},{accent_langs[a]},{count},{_fmt(acc)}")
        _atomic_write(out / f"per_accent_{size}.csv", "\n".join(acc_lines) + "\n")
        rows.append(f"{size},{n_train},{_fmt(report.accuracy)},{_fmt(certified)},{_fmt(radii.mean())}")
        print(f"size {size}: accuracy {report.accuracy:.4f}, certified {certified:.4f}")
    _atomic_write(out / "accuracy_vs_size.csv", "\n".join(rows) + "\n")
    return 0


def cmd_verify(args) -> int:
    log = _log_sink(args.log)
    X, labels = load_manifest(args.manifest)
    gate_cfg, cfg = _solver_configs(args, labels.K)
    head = train(X, labels, gate_cfg, cfg)
    report = _cross_check(head, X.values, labels, tol=args.verify_tol, log=log)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_gates_enum(args) -> int:
    fm = read_features(args.features)
    gates = enumerate_patterns(fm.values)
    print(f"{gates.P} activation patterns over {fm.n} rows")
    if args.out:
        doc = {
            "n": fm.n,
            "d": fm.d,
            "count": gates.P,
            "patterns": [p.bitstring() for p in gates.patterns],
            "witnesses": [[float(x) for x in p.generator] for p in gates.patterns],
        }
        _atomic_write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cld",
        description="Convex language-detection head: training, inference, certificates.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_synth_flags(p):
        p.add_argument("--languages", type=int, default=5)
        p.add_argument("--accents", default="5,5,5,5,4",
                       help="comma list: accents per language")
        p.add_argument("--dim", type=int, default=64)
        p.add_argument("--separation", type=float, default=6.0)
        p.add_argument("--spread", type=float, default=1.0)
        p.add_argument("--sigma", type=float, default=1.0)
        p.add_argument("--samples-per-accent", dest="samples_per_accent", type=int, default=500)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    add_synth_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detection head from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--verify", action="store_true",
                   help="cross-check the final objective against the oracles (exit 3 on mismatch)")
    p.add_argument("--verify-tol", dest="verify_tol", type=float, default=1e-4)
    p.add_argument("--log", help="JSON-lines log file (default stderr)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write logits and predicted labels as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True, help="CLDF/CSV matrix, or CLDS file/dir with --pool")
    p.add_argument("--pool", action="store_true", help="inputs are frame sequences; pool them first")
    p.add_argument("--inference", choices=("gated", "relu"), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSON-lines log file (default stderr)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("certify", help="emit per-example robustness certificates")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="certificate CSV path")
    p.add_argument("--summary", required=True, help="summary JSON path")
    p.add_argument("--L-E", dest="L_E", type=float, default=None,
                   help="encoder Lipschitz bound for audio-space radii")
    p.add_argument("--eps-grid", dest="eps_grid", default="0,0.01,0.02,0.05,0.1,0.2,0.5")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("eval", help="score a model against labelled features")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--inference", choices=("gated", "relu"), default=None)
    p.add_argument("--accents", help="accents.csv for per-accent accuracy")
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.add_argument("--confusion-csv", dest="confusion_csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="train/eval/certify across training sizes")
    add_synth_flags(p)
    p.add_argument("--sizes", default="100,500,1000,10000")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--log", help="JSON-lines log file (default stderr)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="train and cross-check against the reference solvers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--verify-tol", dest="verify_tol", type=float, default=1e-4)
    p.add_argument("--log", help="JSON-lines log file (default stderr)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gates-enum", help="enumerate all activation patterns (tiny inputs)")
    p.add_argument("--features", required=True)
    p.add_argument("--out", help="JSON output path")
    p.set_defaults(func=cmd_gates_enum)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("CLD_THREADS")
    if threads is not None:
        try:
            if int(threads) < 1:
                raise ValueError
        except ValueError:
            print(f"cld: CLD_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
            return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VerificationFailure as exc:
        print(f"cld: verification failed: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"cld: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
