"""``tpemimo`` command line tool.

Subcommands: ``train``, ``sweep``, ``count-ops``, ``fit-oracle``, ``gen-data``.
Run configs are JSON files; a manifest written by an earlier run is accepted
wherever a config is, which replays that run.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__, detect, sim, train
from .model import SystemDims

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CONFIG_SCHEMA = 1

log = logging.getLogger("tpemimo")


class ValidationError(Exception):
    pass


def _load_json(path):
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top-level value must be an object")
    if "command" in doc and "config" in doc:  # a manifest
        doc = doc["config"]
    return doc


def _check_keys(doc, allowed, where):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ValidationError(f"{where}: unknown field(s) {unknown}")


def _build(cls, doc, where):
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc


# -- train config -------------------------------------------------------------

_TRAIN_FIELDS = [f.name for f in dataclasses.fields(train.TrainingConfig)]


def training_config(doc, where="config", overrides=None) -> train.TrainingConfig:
    doc = dict(doc)
    version = doc.pop("schema_version", CONFIG_SCHEMA)
    if version != CONFIG_SCHEMA:
        raise ValidationError(f"{where}: unknown schema_version {version!r}")
    doc.pop("output_dir", None)
    _check_keys(doc, _TRAIN_FIELDS, where)
    for key, val in (overrides or {}).items():
        if val is not None:
            doc[key] = val
    if "adam" in doc:
        if not isinstance(doc["adam"], dict):
            raise ValidationError(f"{where}: field 'adam' must be an object")
        _check_keys(doc["adam"], [f.name for f in dataclasses.fields(train.AdamHyper)], f"{where}.adam")
    return _build(train.TrainingConfig, doc, where)


def _training_snapshot(cfg: train.TrainingConfig) -> dict:
    return {"schema_version": CONFIG_SCHEMA, **cfg.to_dict()}


# -- sweep config -------------------------------------------------------------

_SWEEP_FIELDS = [f.name for f in dataclasses.fields(sim.SweepConfig)]
_DETECTOR_FIELDS = ("kind", "source", "J", "checkpoint", "w")


def _detector(entry, dims, base_dir, where):
    if not isinstance(entry, dict):
        raise ValidationError(f"{where}: detector entries must be objects")
    _check_keys(entry, _DETECTOR_FIELDS, where)
    kind, source, order_j = entry.get("kind"), entry.get("source"), entry.get("J")
    coeffs, ckpt = None, entry.get("checkpoint")
    if kind == "tpe" and source in ("learned", "closed_form", "fixed"):
        if ckpt is not None:
            path = ckpt if os.path.isabs(ckpt) else os.path.join(base_dir, ckpt)
            if not os.path.exists(path):
                raise ValidationError(f"{where}: checkpoint {ckpt!r} not found")
            try:
                coeffs, _ = detect.read_coefficients(path, dims, order_j)
            except detect.CoefficientFileError as exc:
                raise ValidationError(f"{where}: {exc}") from exc
        elif "w" in entry:
            coeffs = detect.TpeCoefficients(tuple(entry["w"]), origin=source)
        else:
            raise ValidationError(f"{where}: {source} TPE needs 'checkpoint' or 'w'")
    try:
        return sim.DetectorSpec(kind, source, order_j, coeffs, ckpt)
    except ValueError as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def sweep_config(doc, base_dir=".", where="config", overrides=None) -> sim.SweepConfig:
    doc = dict(doc)
    version = doc.pop("schema_version", CONFIG_SCHEMA)
    if version != CONFIG_SCHEMA:
        raise ValidationError(f"{where}: unknown schema_version {version!r}")
    doc.pop("output_dir", None)
    doc.pop("scenario", None)
    _check_keys(doc, _SWEEP_FIELDS, where)
    for key, val in (overrides or {}).items():
        if val is not None:
            doc[key] = val
    try:
        dims = SystemDims(doc.get("N"), doc.get("K"))
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    entries = doc.get("detectors") or []
    if not entries:
        raise ValidationError(f"{where}: detector list is empty")
    doc["detectors"] = tuple(
        _detector(e, dims, base_dir, f"{where}.detectors[{i}]") for i, e in enumerate(entries))
    return _build(sim.SweepConfig, doc, where)


def _sweep_snapshot(cfg: sim.SweepConfig) -> dict:
    out = {"schema_version": CONFIG_SCHEMA}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name == "detectors":
            val = []
            for d in cfg.detectors:
                e = {"kind": d.kind}
                if d.kind == "tpe":
                    e.update(source=d.source, J=d.order_j)
                    if d.coeffs is not None:
                        e["w"] = list(d.coeffs.w)
                val.append(e)
        elif f.name == "snr_grid_db":
            val = list(val)
        out[f.name] = val
    return out


# -- helpers ------------------------------------------------------------------

def _write_json(path, doc):
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(out_dir, command, snapshot, seed, artifacts):
    doc = {
        "schema_version": CONFIG_SCHEMA,
        "command": command,
        "config": snapshot,
        "master_seed": seed,
        "artifacts": artifacts,
        "tool_version": __version__,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), doc)


def _out_dir(args, doc):
    out = args.out_dir or doc.get("output_dir") or "."
    os.makedirs(out, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------

def cmd_train(args):
    doc = _load_json(args.config)
    cfg = training_config(doc, args.config, {
        "N": args.n, "K": args.k, "order_j": args.j, "epochs": args.epochs,
        "dataset_size": args.dataset_size, "master_seed": args.seed})
    out = _out_dir(args, doc)
    ckpt = os.path.join(out, "checkpoint.json")
    hist = os.path.join(out, "history.csv")
    _manifest(out, "train", _training_snapshot(cfg), cfg.master_seed, {"checkpoint": ckpt, "history": hist})
    log.info("training N=%d K=%d J=%d on %d samples", cfg.N, cfg.K, cfg.order_j, cfg.dataset_size)
    theta, history = train.train(cfg, workers=args.workers)
    train.save_checkpoint(ckpt, theta, cfg, loss_final=history.losses[-1])
    history.write_csv(hist)
    print(f"w = {list(theta.w)}")
    print(f"final loss = {history.losses[-1]!r}")
    print(f"wrote {ckpt} and {hist}")
    return EXIT_OK


def cmd_sweep(args):
    doc = _load_json(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    cfg = sweep_config(doc, base, args.config, {"master_seed": args.seed})
    out = _out_dir(args, doc)
    csv_path = os.path.join(out, "ber.csv")
    summary_path = os.path.join(out, "summary.json")
    _manifest(out, "sweep", _sweep_snapshot(cfg), cfg.master_seed, {"ber_csv": csv_path, "summary": summary_path})

    def progress(snr, totals):
        log.info("SNR %.1f dB done: %s", snr, {k: v[1] for k, v in totals.items()})

    curves, diag = sim.ber_sweep(cfg, workers=args.workers, progress=progress)
    sim.export_csv(curves, csv_path)
    rows = sim.summary(curves, doc.get("scenario", f"{cfg.N}x{cfg.K}"))
    _write_json(summary_path, {"schema_version": CONFIG_SCHEMA, "rows": rows,
                               "resampled_channels": diag["resampled_channels"]})
    for r in rows:
        at = "n/a" if r["snr_at_ber_1e-3"] is None else f"{r['snr_at_ber_1e-3']:.2f} dB"
        gap = "n/a" if r["gap_to_zf_db"] is None else f"{r['gap_to_zf_db']:+.2f} dB"
        print(f"{r['detector']:<26} SNR@1e-3 {at:>10}   gap to ZF {gap:>9}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_count_ops(args):
    try:
        dims = SystemDims(args.n, args.k)
        rows = [(args.detector, args.j, detect.count_ops(args.detector, dims, args.j))]
        if args.vs:
            rows.append((args.vs, args.vs_j, detect.count_ops(args.vs, dims, args.vs_j)))
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    print(f"{'detector':<14}{'J':>4}{'complex mults':>16}")
    for kind, j, c in rows:
        print(f"{kind:<14}{'' if j is None else j:>4}{c.complex_mults:>16}")
    if len(rows) == 2:
        saving = detect.savings(rows[0][2], rows[1][2])
        print(f"saving: {detect.format_percent(saving)}")
    return EXIT_OK


def cmd_fit_oracle(args):
    doc = _load_json(args.config)
    cfg = training_config(doc, args.config, {
        "N": args.n, "K": args.k, "order_j": args.j,
        "dataset_size": args.dataset_size, "master_seed": args.seed})
    dataset = train.generate_dataset(cfg, workers=args.workers)
    mu = cfg.target_mu
    fit = train.closed_form_fit(dataset, cfg.order_j, mu)
    fit_loss = train.spectral_loss(fit.w, dataset.eigenvalues, mu)
    print(f"closed-form w = {list(fit.w)}")
    print(f"closed-form loss = {fit_loss!r}")
    if cfg.order_j == 1 and len(dataset) == 1:
        lam = dataset.eigenvalues[0]
        num, den = float(np.sum(lam / (lam + mu))), float(np.sum(lam))
        print(f"w_0 = <A_0, W>/<A_0, A_0> = {num!r} / {den!r} = {num / den!r}")
    if args.checkpoint:
        try:
            theta = train.load_checkpoint(args.checkpoint, cfg.dims, cfg.order_j)
        except detect.CoefficientFileError as exc:
            raise ValidationError(str(exc)) from exc
        ck_loss = train.spectral_loss(theta.w, dataset.eigenvalues, mu)
        print(f"checkpoint w = {list(theta.w)}")
        print(f"checkpoint loss = {ck_loss!r}")
        print(f"relative gap = {(ck_loss - fit_loss) / fit_loss * 100:.4f}%")
    return EXIT_OK


def cmd_gen_data(args):
    doc = _load_json(args.config)
    cfg = training_config(doc, args.config, {
        "N": args.n, "K": args.k, "dataset_size": args.dataset_size, "master_seed": args.seed})
    out = _out_dir(args, doc)
    path = os.path.join(out, "dataset.npz")
    _manifest(out, "gen-data", _training_snapshot(cfg), cfg.master_seed, {"dataset": path})
    dataset = train.generate_dataset(cfg, workers=args.workers)
    channels = np.stack([s.h_complex for s in dataset])
    np.savez(path, h_complex=channels, gram_eigenvalues=dataset.eigenvalues,
             indices=dataset.indices, master_seed=cfg.master_seed)
    print(f"wrote {len(dataset)} channels to {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="tpemimo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, j=True):
        p.add_argument("--config", required=True, help="config JSON (or a manifest to replay)")
        p.add_argument("--out-dir", help="output directory (default: config 'output_dir' or cwd)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--n", type=int)
        p.add_argument("--k", type=int)
        if j:
            p.add_argument("--j", type=int)
        p.add_argument("--dataset-size", type=int)

    p = sub.add_parser("train", help="learn TPE coefficients with Adam")
    common(p)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="Monte-Carlo BER sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("count-ops", help="complex multiplications per detected vector")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--detector", required=True, help=f"one of {detect.DETECTOR_KINDS}")
    p.add_argument("--j", type=int)
    p.add_argument("--vs", help="reference detector for the saving percentage")
    p.add_argument("--vs-j", type=int)
    p.set_defaults(func=cmd_count_ops)

    p = sub.add_parser("fit-oracle", help="closed-form least-squares coefficients")
    common(p)
    p.add_argument("--checkpoint", help="compare against this trained checkpoint")
    p.set_defaults(func=cmd_fit_oracle)

    p = sub.add_parser("gen-data", help="write the training channels to an .npz file")
    common(p, j=False)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (train.TrainingDivergedError, train.IllPosedFitError, detect.DegenerateChannelError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
