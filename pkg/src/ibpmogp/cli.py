"""Command-line front end: sample, fit, predict, eval and hinton subcommands.

Configuration lives in a TOML file with sections [data], [kernel], [ibp] and
[inference]; every field has a default and unknown keys fail fast.  Datasets
travel as CSV with header ``output_id,x1[,x2,...],y``.  Errors exit with
status 1 and a single machine-parsable line (E_PARSE / E_NUMERIC / E_IO).
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .elbo import NonFiniteElbo
from .hyperopt import NonFiniteGradient, fit
from .kernels import KernelError, KernelSpec, latent_blocks
from .predict import predict
from .simulate import DegenerateVariance, msll, sample_model, smse
from .special import DomainError, OverflowRisk
from .state import Dataset, ModelConfig, Priors, load_model, save_model

__all__ = ["main"]


class ParseFailure(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "data": {
        "n_per_output": 30,
        "x_min": 0.0,
        "x_max": 1.0,
        "noise_std": 0.1,
        "z": None,
        "s": None,
    },
    "kernel": {
        "family": "GS",
        "gs_precision": None,
        "gs_latent_precision": None,
        "decay": None,
        "spring": None,
        "damper": None,
        "lengthscale": None,
    },
    "ibp": {
        "alpha": 1.0,
        "a_gamma": 1e-3,
        "b_gamma": 1e-3,
        "noise_var": 0.0,  # 0.0: derive from the data at fit time
    },
    "inference": {
        "q_trunc": 4,
        "m_inducing": 15,
        "max_iter": 500,
        "elbo_tol": 1e-6,
        "hyperopt_period": 10,
        "scg_iters": 20,
        "hyperopt": True,
        "seed": 0,
    },
}


def load_config(path):
    if path is None:
        raw = {}
    else:
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ParseFailure(f"bad TOML in {path}: {exc}") from exc
    cfg = {}
    for section, defaults in _DEFAULTS.items():
        got = raw.pop(section, {})
        if not isinstance(got, dict):
            raise ParseFailure(f"config section [{section}] must be a table")
        unknown = set(got) - set(defaults)
        if unknown:
            raise ParseFailure(f"unknown keys in [{section}]: {sorted(unknown)}")
        merged = dict(defaults)
        merged.update(got)
        cfg[section] = merged
    if raw:
        raise ParseFailure(f"unknown config sections: {sorted(raw)}")
    seed_env = os.environ.get("MOGP_SEED")
    if seed_env is not None:
        try:
            cfg["inference"]["seed"] = int(seed_env)
        except ValueError as exc:
            raise ParseFailure(f"MOGP_SEED must be an integer, got {seed_env!r}") from exc
    return cfg


def _kernel_from_config(kcfg, n_outputs, n_latents, x_range=None, require_all=False):
    family = kcfg["family"]
    if family not in ("GS", "ODE1", "ODE2"):
        raise ParseFailure(f"unknown kernel family {family!r}")

    def _need(key):
        if kcfg[key] is None:
            if require_all:
                raise ParseFailure(f"[kernel] {key} is required for family {family}")
            return None
        return np.asarray(kcfg[key], dtype=float)

    span = 1.0 if x_range is None else max(x_range[1] - x_range[0], 1e-12)

    def _extend_rows(arr, n, fill_rows):
        # truncation can exceed the configured latent count: pad with the
        # heuristic spread rather than rejecting the config
        if arr.shape[0] > n:
            raise ParseFailure("more per-latent kernel parameters than latents")
        if arr.shape[0] == n:
            return arr
        return np.concatenate([arr, fill_rows[arr.shape[0] - n:]], axis=0)

    if family == "GS":
        gs_p = _need("gs_precision")
        gs_ell = _need("gs_latent_precision")
        if gs_p is None:
            gs_p = np.full((n_outputs, 1), (20.0 / span) ** 2)
        sig = np.geomspace(span / 20.0, span / 2.0, n_latents)
        ell_default = (1.0 / sig**2).reshape(-1, 1)
        if gs_ell is None:
            gs_ell = ell_default
        if gs_p.ndim == 1:
            gs_p = gs_p.reshape(-1, 1)
        if gs_ell.ndim == 1:
            gs_ell = gs_ell.reshape(-1, 1)
        gs_ell = _extend_rows(gs_ell, n_latents, ell_default)
        if gs_p.shape[0] != n_outputs or gs_ell.shape[0] != n_latents:
            raise ParseFailure("GS parameter shapes inconsistent with data/config")
        return KernelSpec(family="GS", input_dim=gs_p.shape[1],
                          gs_precision=gs_p, gs_latent_precision=gs_ell)
    ell = _need("lengthscale")
    ell_default = np.geomspace(span / 20.0, span / 2.0, n_latents)
    if ell is None:
        ell = ell_default
    ell = _extend_rows(np.asarray(ell, dtype=float).reshape(-1), n_latents,
                       ell_default)
    if len(ell) != n_latents:
        raise ParseFailure("lengthscale length inconsistent with latent count")
    if family == "ODE1":
        decay = _need("decay")
        if decay is None:
            decay = np.ones(n_outputs)
        if len(decay) != n_outputs:
            raise ParseFailure("decay length inconsistent with output count")
        return KernelSpec(family="ODE1", decay=decay, lengthscale=ell)
    spring = _need("spring")
    damper = _need("damper")
    if spring is None:
        spring = np.full(n_outputs, 2.0)
    if damper is None:
        damper = np.ones(n_outputs)
    if len(spring) != n_outputs or len(damper) != n_outputs:
        raise ParseFailure("spring/damper lengths inconsistent with output count")
    return KernelSpec(family="ODE2", spring=spring, damper=damper, lengthscale=ell)


# ---------------------------------------------------------------------------
# CSV schemas
# ---------------------------------------------------------------------------

def write_dataset_csv(path, dataset):
    p = dataset.input_dim
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["output_id"] + [f"x{i+1}" for i in range(p)] + ["y"])
        for d in range(dataset.n_outputs):
            for n in range(dataset.x[d].shape[0]):
                row = [d] + [repr(float(v)) for v in dataset.x[d][n]] + [
                    repr(float(dataset.y[d][n]))
                ]
                writer.writerow(row)


def _read_rows(path):
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise ParseFailure(f"empty CSV file: {path}")
    return rows[0], rows[1:]


def read_dataset_csv(path, with_y=True):
    header, body = _read_rows(path)
    if header[0] != "output_id":
        raise ParseFailure(f"{path}: first column must be output_id")
    xcols = [c for c in header[1:] if c.startswith("x")]
    expect = ["output_id"] + xcols + (["y"] if with_y else [])
    if with_y and header[: len(expect)] != expect:
        if "y" not in header:
            raise ParseFailure(f"{path}: missing y column")
    if not xcols:
        raise ParseFailure(f"{path}: no input columns (x1, ...)")
    p = len(xcols)
    has_y = "y" in header
    groups = {}
    try:
        for row in body:
            d = int(row[0])
            x = [float(v) for v in row[1 : 1 + p]]
            y = float(row[1 + p]) if has_y else 0.0
            groups.setdefault(d, []).append((x, y))
    except (ValueError, IndexError) as exc:
        raise ParseFailure(f"{path}: malformed row: {exc}") from exc
    if not groups:
        raise ParseFailure(f"{path}: no data rows")
    ids = sorted(groups)
    if ids != list(range(len(ids))):
        raise ParseFailure(f"{path}: output ids must be 0..D-1, got {ids}")
    xs = [np.array([row[0] for row in groups[d]]) for d in ids]
    ys = [np.array([row[1] for row in groups[d]]) for d in ids]
    return Dataset(x=xs, y=ys)


def write_pred_csv(path, x_list, means, variances):
    p = x_list[0].shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["output_id"] + [f"x{i+1}" for i in range(p)] + ["mean", "var"])
        for d, (x, mu, var) in enumerate(zip(x_list, means, variances)):
            for n in range(x.shape[0]):
                writer.writerow([d] + [repr(float(v)) for v in x[n]]
                                + [repr(float(mu[n])), repr(float(var[n]))])


def read_pred_csv(path):
    header, body = _read_rows(path)
    if header[0] != "output_id" or header[-2:] != ["mean", "var"]:
        raise ParseFailure(f"{path}: expected columns output_id,x...,mean,var")
    p = len(header) - 3
    groups = {}
    try:
        for row in body:
            d = int(row[0])
            groups.setdefault(d, []).append(
                ([float(v) for v in row[1 : 1 + p]], float(row[-2]), float(row[-1]))
            )
    except (ValueError, IndexError) as exc:
        raise ParseFailure(f"{path}: malformed row: {exc}") from exc
    ids = sorted(groups)
    xs = [np.array([g[0] for g in groups[d]]) for d in ids]
    mus = [np.array([g[1] for g in groups[d]]) for d in ids]
    vs = [np.array([g[2] for g in groups[d]]) for d in ids]
    return xs, mus, vs


# ---------------------------------------------------------------------------
# hinton diagrams
# ---------------------------------------------------------------------------

_ASCII_LEVELS = ((0.8, "@"), (0.5, "O"), (0.25, "o"), (0.05, "."))


def hinton_ascii(eta):
    order = np.argsort(-eta.sum(axis=0), kind="stable")
    lines = []
    for d in range(eta.shape[0]):
        chars = []
        for q in order:
            c = " "
            for thr, ch in _ASCII_LEVELS:
                if eta[d, q] >= thr:
                    c = ch
                    break
            chars.append(c)
        lines.append("".join(chars))
    return "\n".join(lines) + "\n"


def hinton_svg(eta):
    """Deterministic SVG: 40px cells, black squares with side ~ sqrt(eta)."""
    cell = 40
    left, top = 60, 30
    D, Q = eta.shape
    order = np.argsort(-eta.sum(axis=0), kind="stable")
    width = left + Q * cell + 10
    height = top + D * cell + 10
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for j, q in enumerate(order):
        x = left + j * cell + cell // 2
        out.append(
            f'<text x="{x}" y="{top - 8}" font-family="monospace" font-size="12" '
            f'text-anchor="middle">q{q}</text>'
        )
    for d in range(D):
        y = top + d * cell + cell // 2 + 4
        out.append(
            f'<text x="{left - 8}" y="{y}" font-family="monospace" font-size="12" '
            f'text-anchor="end">d{d}</text>'
        )
    for d in range(D):
        for j, q in enumerate(order):
            side = cell * np.sqrt(max(min(float(eta[d, q]), 1.0), 0.0))
            if side <= 0.0:
                continue
            x0 = left + j * cell + (cell - side) / 2.0
            y0 = top + d * cell + (cell - side) / 2.0
            out.append(
                f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{side:.2f}" '
                f'height="{side:.2f}" fill="black"/>'
            )
    out.append(
        f'<rect x="{left}" y="{top}" width="{Q * cell}" height="{D * cell}" '
        'fill="none" stroke="black" stroke-width="1"/>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_sample(args):
    cfg = load_config(args.config)
    dc = cfg["data"]
    if dc["z"] is None or dc["s"] is None:
        raise ParseFailure("[data] z and s matrices are required for sampling")
    Z = np.asarray(dc["z"], dtype=float)
    S = np.asarray(dc["s"], dtype=float)
    if Z.shape != S.shape or Z.ndim != 2:
        raise ParseFailure("[data] z and s must be equal-shape 2-d arrays")
    D, Q = Z.shape
    spec = _kernel_from_config(cfg["kernel"], D, Q, require_all=True)
    xs = np.linspace(dc["x_min"], dc["x_max"], int(dc["n_per_output"]))
    ds = sample_model(spec, Z, S, float(dc["noise_std"]), xs,
                      seed=int(cfg["inference"]["seed"]))
    write_dataset_csv(args.out, ds)
    print(f"wrote {ds.n_total} observations over {D} outputs to {args.out}")


def _cmd_fit(args):
    cfg = load_config(args.config)
    dataset = read_dataset_csv(args.data)
    inf = cfg["inference"]
    ibp = cfg["ibp"]
    D = dataset.n_outputs
    Q = int(inf["q_trunc"])
    lo = min(float(x.min()) for x in dataset.x)
    hi = max(float(x.max()) for x in dataset.x)
    spec = _kernel_from_config(cfg["kernel"], D, Q, x_range=(lo, hi))
    noise = ibp["noise_var"]
    if np.isscalar(noise) and float(noise) == 0.0:
        noise = np.array([max(0.1 * np.var(y), 1e-4) for y in dataset.y])
    priors = Priors.broadcast(ibp["alpha"], ibp["a_gamma"], ibp["b_gamma"], noise, D, Q)
    config = ModelConfig(
        n_latents=Q, n_inducing=int(inf["m_inducing"]), max_iter=int(inf["max_iter"]),
        elbo_tol=float(inf["elbo_tol"]), hyperopt_period=int(inf["hyperopt_period"]),
        scg_iters=int(inf["scg_iters"]), hyperopt=bool(inf["hyperopt"]),
        seed=int(inf["seed"]), threads=args.threads,
    )
    report = fit(dataset, config, spec, priors)
    save_model(args.model_out, report.state, report.spec, report.priors,
               report.inducing)
    if args.trace_out:
        with open(args.trace_out, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iter", "elbo", "phase"])
            for step, val, phase in report.trace:
                writer.writerow([step, repr(float(val)), phase])
    print(f"fit: {report.n_sweeps} sweeps, bound {report.elbo:.6g}, "
          f"converged={report.converged}; model -> {args.model_out}")


def _cmd_predict(args):
    state, spec, priors, inducing = load_model(args.model)
    test = read_dataset_csv(args.inputs, with_y=False)
    if test.n_outputs != state.n_outputs:
        raise ParseFailure("test inputs must cover the model's outputs 0..D-1")
    blocks = latent_blocks(spec, inducing)
    means, covs = predict(state, blocks, spec, priors, test.x)
    variances = [np.diag(c).copy() for c in covs]
    write_pred_csv(args.out, test.x, means, variances)
    print(f"wrote predictions for {sum(len(m) for m in means)} points to {args.out}")


def _cmd_eval(args):
    xs_p, mus, vs = read_pred_csv(args.pred)
    truth = read_dataset_csv(args.truth)
    if len(mus) != truth.n_outputs:
        raise ParseFailure("prediction and truth files disagree on output count")
    train = read_dataset_csv(args.train) if args.train else None
    per_output = {}
    pooled_num = []
    pooled_loss = []
    for d in range(truth.n_outputs):
        if len(mus[d]) != len(truth.y[d]):
            raise ParseFailure(f"output {d}: prediction/truth length mismatch")
        if not np.allclose(xs_p[d], truth.x[d], atol=1e-12):
            raise ParseFailure(f"output {d}: prediction/truth inputs differ")
        ref = train.y[d] if train is not None else truth.y[d]
        tm, tv = float(np.mean(ref)), float(np.var(ref))
        per_output[str(d)] = {
            "smse": smse(truth.y[d], mus[d]),
            "msll": msll(truth.y[d], mus[d], vs[d], tm, tv),
        }
        pooled_num.append((truth.y[d] - mus[d]) ** 2)
        loss = (0.5 * np.log(2 * np.pi * vs[d]) + (truth.y[d] - mus[d]) ** 2 / (2 * vs[d])
                - 0.5 * np.log(2 * np.pi * tv) - (truth.y[d] - tm) ** 2 / (2 * tv))
        pooled_loss.append(loss)
    all_y = np.concatenate(truth.y)
    pooled = {
        "smse": float(np.mean(np.concatenate(pooled_num)) / np.var(all_y)),
        "msll": float(np.mean(np.concatenate(pooled_loss))),
    }
    doc = {"per_output": per_output, "pooled": pooled}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    print(f"wrote metrics to {args.out}")


def _cmd_hinton(args):
    state, spec, priors, inducing = load_model(args.model)
    content = hinton_ascii(state.eta) if args.ascii else hinton_svg(state.eta)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)
    print(f"wrote hinton diagram to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ibpmogp",
        description="Convolved multi-output GPs with IBP-selected connectivity",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="threads for covariance block assembly")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw a synthetic dataset from the model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("fit", help="run variational inference on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--model-out", required=True)
    p.add_argument("--trace-out")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="predictive mean/variance at new inputs")
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="SMSE/MSLL of predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--train", help="training CSV for the trivial-predictor baseline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("hinton", help="hinton diagram of E[Z]")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(func=_cmd_hinton)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ParseFailure, tomllib.TOMLDecodeError) as exc:
        print(f"E_PARSE: {exc}", file=sys.stderr)
        return 1
    except (KernelError, NonFiniteElbo, NonFiniteGradient, DegenerateVariance,
            DomainError, OverflowRisk, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"E_NUMERIC: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
