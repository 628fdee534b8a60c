"""``phasekd`` command line: data generation, stagewise training, evaluation, experiment grids.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .config import RunConfig
from .data import exclude_videos, generate_dataset, split
from .errors import ConfigError, FormatError, ParameterError, PhaseKDError
from .metrics import (METRIC_NAMES, aggregate, evaluate_predictions, format_report, frame_metrics,
                      report_to_dict)
from .trainer import (FeatureSequence, extract_features, run_ablation_grid, run_reduced_data, train_decoder,
                      train_encoder)

log = logging.getLogger("phasekd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        cfg.set(section.strip(), name.strip(), value)
    return cfg


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# -- subcommands -------------------------------------------------------------------
def cmd_config(args) -> int:
    cfg = _config(args)
    if args.dump_defaults:
        sys.stdout.write(RunConfig().dump())
    else:
        sys.stdout.write(cfg.dump())
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    d = cfg["data"]
    videos = generate_dataset(cfg.phase_model(), d["n_videos"], cfg.length_range(), d["seed"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    formats.write_dataset(args.out, videos)
    hist = Counter()
    for v in videos:
        hist.update(v.labels.tolist())
    total = sum(len(v) for v in videos)
    print(f"videos={len(videos)} frames={total} phases={d['n_phases']}")
    print("phase histogram: " + " ".join(f"{c}:{hist.get(c, 0)}" for c in range(d["n_phases"])))
    return 0


def _splits(cfg: RunConfig, data_path):
    videos = formats.read_dataset(data_path)
    return split(videos, cfg["experiment"]["n_train"])


def cmd_train_encoder(args) -> int:
    cfg = _config(args)
    if args.no_self_kd:
        cfg.set("encoder", "self_kd", False)
    train, test = _splits(cfg, args.data)
    encoder, trace = train_encoder(train, cfg.encoder_run())
    formats.save_params(args.out_model, encoder.params)
    out = Path(args.features_out)
    out.mkdir(parents=True, exist_ok=True)
    for name, vids in (("train", train), ("test", test)):
        feats = extract_features(encoder, vids)
        formats.write_features(out / f"{name}.pkdf", [(f.video_id, f.features) for f in feats])
    _write(args.log or out / "encoder_log.jsonl", trace.to_jsonl())
    first_tau = next((r["tau"] for r in trace.records if r["tau"] is not None), None)
    print(f"encoder trained: params={encoder.params.num_parameters()} steps={len(trace.records) - cfg['encoder']['epochs']}"
          + (f" tau0={first_tau}" if first_tau is not None else " (no self-KD)"))
    return 0


def _feature_seqs(path, labels: dict[int, np.ndarray]) -> list[FeatureSequence]:
    out = []
    for vid, feats in formats.read_features(path):
        if vid not in labels:
            raise FormatError(f"video {vid} in {path} has no labels in the dataset")
        if len(labels[vid]) != len(feats):
            raise FormatError(f"video {vid}: {len(feats)} feature rows vs {len(labels[vid])} labels")
        out.append(FeatureSequence(vid, feats, labels[vid]))
    return out


def _timeline_rows(seqs, preds) -> str:
    lines = ["video_id,frame,gt,pred"]
    for s in seqs:
        p = preds[s.video_id]
        lines.extend(f"{s.video_id},{i},{int(g)},{int(q)}" for i, (g, q) in enumerate(zip(s.labels, p)))
    return "\n".join(lines) + "\n"


def cmd_train_decoder(args) -> int:
    cfg = _config(args)
    if args.decoder:
        cfg.set("decoder", "kind", args.decoder)
    if args.lam is not None:
        cfg.set("decoder", "lambda", args.lam)
    if args.no_self_kd:
        cfg.set("decoder", "self_kd", False)
    videos = formats.read_dataset(args.data)
    labels = {v.video_id: v.labels for v in videos}
    fdir = Path(args.features)
    train = _feature_seqs(fdir / "train.pkdf", labels)
    test = _feature_seqs(fdir / "test.pkdf", labels)
    n_classes = cfg["data"]["n_phases"]
    res = train_decoder(train, cfg.decoder_run(), test, n_classes)
    formats.save_params(args.out_model, res.model.params)
    report = evaluate_predictions(res.test_predictions, {s.video_id: s.labels for s in test}, n_classes,
                                  label=f"{cfg['decoder']['kind']} best_epoch={res.best_epoch}")
    _write(args.report, format_report(report))
    if args.pred_out:
        formats.write_predictions(args.pred_out, sorted(res.test_predictions.items()))
    if args.export_timeline:
        _write(args.export_timeline, _timeline_rows(test, res.test_predictions))
    if args.log:
        _write(args.log, res.log.to_jsonl())
    row = report.row()
    print(f"best_epoch={res.best_epoch} " + " ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_evaluate(args) -> int:
    preds = dict(formats.read_predictions(args.pred))
    gt_path = Path(args.gt)
    with open(gt_path, "rb") as f:
        is_dataset = f.read(4) == b"PKDV"
    if is_dataset:
        gts = {v.video_id: v.labels for v in formats.read_dataset(gt_path)}
        gts = {k: v for k, v in gts.items() if k in preds}
    else:
        gts = dict(formats.read_predictions(gt_path))
    report = evaluate_predictions(preds, gts, args.n_classes)
    text = format_report(report)
    if args.report:
        _write(args.report, text)
    sys.stdout.write(text)
    return 0


def _comparison_table(header: list[str], rows: list[tuple[list[str], object]]) -> str:
    cols = header + [*METRIC_NAMES, "pred_segments"]
    lines = ["\t".join(cols)]
    for keys, rep in rows:
        r = rep.row()
        lines.append("\t".join(keys + [r[m] for m in (*METRIC_NAMES, "pred_segments")]))
    return "\n".join(lines) + "\n"


def _seed_summary(reports) -> str:
    accs = np.array([r.mean["accuracy"] for r in reports]) * 100
    return f"{accs.mean():.2f}±{accs.std():.2f}"


def cmd_ablate(args) -> int:
    cfg = _config(args)
    exp = cfg["experiment"]
    kinds = [k.strip() for k in exp["decoders"].split(",") if k.strip()]
    videos = formats.read_dataset(args.data)
    arms = run_ablation_grid(videos, cfg.pipeline(), kinds, exp["seeds"])
    out = Path(args.out or exp["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    table_rows, summary = [], []
    for kind in kinds:
        for enc, dec in ((False, False), (True, False), (False, True), (True, True)):
            runs = [a for a in arms if a.decoder_kind == kind and a.enc_kd == enc and a.dec_kd == dec]
            pooled = aggregate([r for a in runs for r in a.report.per_video])
            keys = [kind, "x" if enc else "", "x" if dec else "", _seed_summary([a.report for a in runs])]
            table_rows.append((keys, pooled))
            summary.append({"decoder": kind, "enc_kd": enc, "dec_kd": dec,
                            "per_seed": {a.seed: report_to_dict(a.report) for a in runs}})
    for a in arms:
        tag = f"{a.decoder_kind}_enc{int(a.enc_kd)}_dec{int(a.dec_kd)}_seed{a.seed}"
        _write(out / f"{tag}.log.jsonl", a.decoder.log.to_jsonl())
        _write(out / f"{tag}.report.txt", format_report(a.report))
    table = _comparison_table(["decoder", "self-KD-Enc", "self-KD-Dec", "acc(seed mean±std)"], table_rows)
    _write(out / "ablation_table.tsv", table)
    _write(out / "ablation_summary.json", json.dumps(summary, indent=1))
    sys.stdout.write(table)
    return 0


def cmd_reduced(args) -> int:
    cfg = _config(args)
    exp = cfg["experiment"]
    k_list = [int(k) for k in args.k.split(",")] if args.k else list(exp["k_list"])
    modes = [m.strip() for m in (args.modes or exp["modes"]).split(",") if m.strip()]
    videos = formats.read_dataset(args.data)
    rows = run_reduced_data(videos, cfg.pipeline(), k_list, modes, exp["seeds"])
    out = Path(args.out or exp["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.block, r.k), []).append(r)
    table_rows, summary = [], []
    for (block, k), rs in groups.items():
        pooled = aggregate([v for r in rs for v in r.report.per_video])
        table_rows.append(([block, str(k), _seed_summary([r.report for r in rs])], pooled))
        summary.append({"block": block, "k": k, "per_seed": {r.seed: report_to_dict(r.report) for r in rs},
                        "unlabeled_videos": {r.seed: r.unlabeled_ids for r in rs},
                        "decoder_counters": {r.seed: {str(v): c for v, c in r.counters.items()} for r in rs}})
    table = _comparison_table(["block", "k_excluded", "acc(seed mean±std)"], table_rows)
    _write(out / "reduced_table.tsv", table)
    _write(out / "reduced_summary.json", json.dumps(summary, indent=1))
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phasekd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        if data:
            sp.add_argument("--data", required=True, help="PKDV dataset file")

    sp = sub.add_parser("config", help="print the effective configuration")
    common(sp, data=False)
    sp.add_argument("--dump-defaults", action="store_true")
    sp.set_defaults(func=cmd_config)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-encoder")
    common(sp)
    sp.add_argument("--out-model", required=True)
    sp.add_argument("--features-out", required=True, help="directory for train.pkdf / test.pkdf")
    sp.add_argument("--no-self-kd", action="store_true")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train_encoder)

    sp = sub.add_parser("train-decoder")
    common(sp)
    sp.add_argument("--features", required=True, help="directory holding train.pkdf / test.pkdf")
    sp.add_argument("--decoder", choices=("gru", "tcn"))
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--no-self-kd", action="store_true")
    sp.add_argument("--out-model", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--pred-out")
    sp.add_argument("--export-timeline")
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_train_decoder)

    sp = sub.add_parser("evaluate")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True, help="prediction-format file or PKDV dataset")
    sp.add_argument("--report")
    sp.add_argument("--n-classes", type=int, default=7)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate")
    common(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("reduced-data")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--k", help="comma-separated exclusion counts")
    sp.add_argument("--modes")
    sp.set_defaults(func=cmd_reduced)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (PhaseKDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
