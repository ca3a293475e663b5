"""Command-line entry point.

Subcommands: gen-data, pretrain, train, eval, export-embeddings,
export-prototypes, selftest.  Exit codes: 0 success, 1 usage/config error,
2 runtime failure.  Progress goes to stderr; CSV outputs go to files and
start with a ``# seed=N`` header line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataset, ops, selftest
from .encoder import encode, model_from_tensors, model_tensors
from .trainer import (
    ConfigError,
    TrainingDiverged,
    parse_config,
    pretrain,
    self_train,
)
from .volume import LabelVolume, Volume, VolumeFormatError, read_volume

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _read_config(path) -> "TrainConfig":
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config: {e}") from e
    try:
        return parse_config(text)
    except ConfigError as e:
        raise CliError(str(e)) from e


def _write_csv(path, seed, header, rows):
    with open(path, "w") as f:
        f.write(f"# seed={seed}\n")
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _history_rows(history):
    return [
        [_fmt(h.iteration), h.split, _fmt(h.dice), _fmt(h.jaccard), _fmt(h.hd95), _fmt(h.asd)]
        for h in history
    ]


def _load_split(data_dir):
    try:
        return dataset.load_dataset(data_dir)
    except (dataset.DatasetError, VolumeFormatError, OSError, KeyError) as e:
        raise CliError(f"cannot load dataset: {e}", EXIT_RUNTIME) from e


def _load_model(path, eta=0.999):
    try:
        return model_from_tensors(ops.load_weights(path), eta=eta)
    except (ops.CheckpointError, OSError, ValueError) as e:
        raise CliError(f"cannot load checkpoint: {e}", EXIT_RUNTIME) from e


def cmd_gen_data(args):
    cfg = _read_config(args.config)
    if args.labeled_fraction is not None:
        from dataclasses import replace

        cfg = replace(cfg, labeled_fraction=args.labeled_fraction)
    out = Path(args.out_dir)
    manifest = dataset.write_dataset(out, cfg, args.count)
    _log(
        f"wrote {args.count} cases to {out}: {len(manifest['labeled'])} labeled, "
        f"{len(manifest['unlabeled'])} unlabeled, {len(manifest['eval'])} eval"
    )


def cmd_pretrain(args):
    cfg = _read_config(args.config)
    split, _ = _load_split(args.data)
    if args.dry_run:
        _log("dry run: config and dataset are valid, no iterations performed")
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, history = pretrain(split, cfg)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_RUNTIME) from e
    ops.save_weights(out / "pretrained.mpwt", model_tensors(model))
    _write_csv(out / "metrics.csv", cfg.seed, "iter,split,dice,jaccard,hd95,asd",
               _history_rows(history))
    _log(f"pretraining done, checkpoint at {out / 'pretrained.mpwt'}")


def cmd_train(args):
    cfg = _read_config(args.config)
    split, _ = _load_split(args.data)
    if args.dry_run:
        _log("dry run: config and dataset are valid, no iterations performed")
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.pretrained:
            model = _load_model(args.pretrained, eta=cfg.eta)
            pre_history = []
        else:
            _log("no --pretrained checkpoint given, running the pretraining stage")
            model, pre_history = pretrain(split, cfg)
        student, teacher, history, loss_rows = self_train(split, model, cfg)
    except TrainingDiverged as e:
        raise CliError(str(e), EXIT_RUNTIME) from e
    ops.save_weights(out / "checkpoint.mpwt", model_tensors(student))
    ops.save_weights(out / "teacher.mpwt", model_tensors(teacher))
    _write_csv(out / "metrics.csv", cfg.seed, "iter,split,dice,jaccard,hd95,asd",
               _history_rows(history))
    _write_csv(
        out / "losses.csv",
        cfg.seed,
        "iter,lambda,l_lin,l_proto,l_cont,total",
        [
            [_fmt(r.iteration), _fmt(r.lam), _fmt(r.l_lin), _fmt(r.l_proto),
             _fmt(r.l_cont), _fmt(r.total)]
            for r in loss_rows
        ],
    )
    _log(f"self-training done, checkpoint at {out / 'checkpoint.mpwt'}")


def cmd_eval(args):
    from .metrics import evaluate

    model = _load_model(args.checkpoint)
    split, manifest = _load_split(args.data)
    if model.num_classes != manifest["num_classes"]:
        raise CliError(
            f"checkpoint has {model.num_classes} classes, dataset has "
            f"{manifest['num_classes']}",
            EXIT_RUNTIME,
        )
    rows = []
    macros = []
    from .trainer import predict

    for idx, (vol, gt) in enumerate(split.eval_cases):
        pred, _ = predict(model, vol)
        report = evaluate(pred, gt)
        for c, m in report.per_class.items():
            rows.append([str(idx), str(c), _fmt(m.dice), _fmt(m.jaccard),
                         _fmt(m.hd95), _fmt(m.asd)])
        macros.append(report.macro())
    mdice = float(np.mean([m.dice for m in macros]))
    mjac = float(np.mean([m.jaccard for m in macros]))
    hd = [m.hd95 for m in macros if m.hd95 is not None]
    ad = [m.asd for m in macros if m.asd is not None]
    rows.append(["macro", "all", _fmt(mdice), _fmt(mjac),
                 _fmt(float(np.mean(hd)) if hd else None),
                 _fmt(float(np.mean(ad)) if ad else None)])
    _write_csv(args.out, manifest["seed"], "case,class,dice,jaccard,hd95,asd", rows)
    _log(f"evaluated {len(split.eval_cases)} cases, macro dice {mdice:.4f}")


def cmd_export_embeddings(args):
    model = _load_model(args.checkpoint)
    vol = read_volume(args.volume)
    if isinstance(vol, LabelVolume):
        raise CliError("--volume must be a scalar volume, not labels", EXIT_RUNTIME)
    emb = encode(model, vol)
    h, w, d = vol.dims
    dim = emb.shape[-1]
    from .trainer import predict

    pred, _ = predict(model, vol)
    rows = []
    coords = [(x, y, z) for z in range(d) for y in range(w) for x in range(h)]
    if args.sample is not None:
        rng = np.random.default_rng(args.seed)
        idx = rng.permutation(len(coords))[: args.sample]
        coords = [coords[i] for i in sorted(idx)]
    for x, y, z in coords:
        vals = [str(x), str(y), str(z), str(int(pred.labels[x, y, z]))]
        vals += [f"{v:.6f}" for v in emb[x, y, z]]
        rows.append(vals)
    header = "x,y,z,label," + ",".join(f"dim{i}" for i in range(dim))
    _write_csv(args.out, args.seed, header, rows)
    _log(f"wrote {len(rows)} embedding rows to {args.out}")


def cmd_export_prototypes(args):
    model = _load_model(args.checkpoint)
    if model.bank is None:
        raise CliError("checkpoint has no prototype bank", EXIT_RUNTIME)
    vecs = model.bank.vectors
    c, k, dim = vecs.shape
    rows = [
        [str(ci), str(ki)] + [f"{v:.6f}" for v in vecs[ci, ki]]
        for ci in range(c)
        for ki in range(k)
    ]
    header = "class,proto," + ",".join(f"dim{i}" for i in range(dim))
    _write_csv(args.out, args.seed, header, rows)
    _log(f"wrote {c * k} prototype rows to {args.out}")


def cmd_selftest(args):
    if args.inject_fault:
        ops.set_fault_scale(2.0)
    try:
        results = selftest.run_selftest()
    finally:
        ops.set_fault_scale(1.0)
    print(selftest.format_report(results))
    if any(not r.passed for r in results):
        raise CliError("selftest failed", EXIT_RUNTIME)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="protoseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--config", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=40)
    g.add_argument("--labeled-fraction", type=float, default=None)
    g.set_defaults(func=cmd_gen_data)

    for name, fn in (("pretrain", cmd_pretrain), ("train", cmd_train)):
        t = sub.add_parser(name, help=f"run the {name} stage")
        t.add_argument("--config", required=True)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--dry-run", action="store_true")
        if name == "train":
            t.add_argument("--pretrained", default=None,
                           help="checkpoint from the pretrain stage")
        t.set_defaults(func=fn)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out cases")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings", help="per-voxel embeddings to CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--volume", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--sample", type=int, default=None)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_export_embeddings)

    xp = sub.add_parser("export-prototypes", help="prototype bank to CSV")
    xp.add_argument("--checkpoint", required=True)
    xp.add_argument("--out", required=True)
    xp.add_argument("--seed", type=int, default=0)
    xp.set_defaults(func=cmd_export_prototypes)

    s = sub.add_parser("selftest", help="run gradient and oracle checks")
    s.add_argument("--inject-fault", action="store_true",
                   help="debug: corrupt a backward pass to prove detection")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        args.func(args)
    except CliError as e:
        _log(f"error: {e}")
        return e.code
    except (VolumeFormatError, OSError) as e:
        _log(f"error: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
