"""Command-line entry point: ``dgsense <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import evalharness, sigproc, synth, vae
from .core import (ArgumentError, DGSenseError, DomainDataset, SourceSet, SplitSpec, TrainConfig, load_checkpoint,
                   load_dataset, save_dataset, seeded_rng, worker_threads)
from .episodic import load_network, save_network

log = logging.getLogger("dgsense")
RESOLVED = "resolved_config.json"


class UsageError(ArgumentError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config layering
# --------------------------------------------------------------------------


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArgumentError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"config file {path} is not valid JSON: {exc}") from None


def resolve_config(args) -> TrainConfig:
    """defaults < --config file < command-line flags.

    ``--config`` may also point at a previous run's resolved_config.json, in
    which case its ``config`` section is the overlay.
    """
    cfg = TrainConfig()
    if getattr(args, "config", None):
        data = _read_json(args.config)
        if isinstance(data, dict) and "command" in data and "config" in data:
            data = data["config"]
        if not isinstance(data, dict):
            raise ArgumentError("config file must hold a JSON object")
        cfg = TrainConfig.from_dict(data, base=cfg)
    flags = {"seed": "seed", "omega1": "omega_signal", "omega2": "omega_noise", "ratio": "virtual_ratio",
             "base_modality": "base_modality"}
    overrides = {key: getattr(args, flag) for flag, key in flags.items() if getattr(args, flag, None) is not None}
    cfg = cfg.replace(**overrides) if overrides else cfg
    cfg.validate()
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, args, cfg: TrainConfig | None, extra: dict | None = None) -> None:
    args_dict = {k: v for k, v in vars(args).items() if k not in ("handler", "config")}
    record = {"version": 1, "command": args.command, "args": args_dict,
              "config": cfg.to_dict() if cfg is not None else None,
              "seed": cfg.seed if cfg is not None else getattr(args, "seed", None),
              "threads": torch.get_num_threads(), **(extra or {})}
    evalharness.write_json(out / RESOLVED, record)


def _seeds(text: str | None, cfg: TrainConfig) -> tuple[int, ...]:
    if not text:
        return (cfg.seed,)
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ArgumentError(f"--seeds must be comma-separated integers, got {text!r}") from None


def _grid(text: str, sweep: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if sweep == "generator_variant":
        return items
    try:
        return [int(s) if sweep in ("num_domains", "num_real") else float(s) for s in items]
    except ValueError:
        raise ArgumentError(f"bad --grid value for {sweep}: {text!r}") from None


def _sources(dataset: SourceSet, targets: Sequence[str]) -> SourceSet:
    unknown = set(targets) - set(dataset.domain_ids)
    if unknown:
        raise ArgumentError(f"unknown target domain(s) {sorted(unknown)}; have {dataset.domain_ids}")
    keep = [d for d in dataset.domain_ids if d not in targets]
    if not keep:
        raise ArgumentError("no source domains remain after excluding the target")
    return dataset.select(keep)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    data = synth.make_benchmark(args.spec, args.seed)
    out = _out_dir(args.out)
    save_dataset(data, out)
    _write_resolved(out, args, None, {"benchmark": args.spec})
    print(f"wrote {args.spec}: N={data.num_domains} n={data.n} -> {out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        data = load_dataset(path)
        print(f"N={data.num_domains}")
        print(f"n={data.n}")
        print("modalities: " + ", ".join(f"{m.kind.value}{list(m.shape)}" for m in data.modalities))
        print("labels: " + ", ".join(data.label_names))
        for d in data.domains:
            counts = np.bincount(d.labels, minlength=data.num_classes)
            print(f"  {d.domain_id}: n={len(d)} per-class={counts.tolist()}")
        return 0
    if path.suffix == ".json":
        print(json.dumps(_read_json(path), sort_keys=True, indent=2))
        return 0
    header, params = load_checkpoint(path)
    print(f"checkpoint module={header['module']} version={header['version']}")
    print(f"parameters={sum(int(np.prod(p.shape)) for p in params.values())} tensors={len(params)}")
    print("meta: " + json.dumps(header["meta"], sort_keys=True))
    return 0


def cmd_preprocess(args) -> int:
    src = Path(args.input)
    if args.kind == "csi":
        if args.frames is None or args.dims is None:
            raise ArgumentError("csi preprocessing needs --frames and --dims")
        rec = sigproc.read_csi(src, args.frames, args.dims, args.sample_rate)
        out = sigproc.csi_doppler_spectrogram(rec, window_len=args.window, hop=args.hop)
    elif args.kind == "rdm":
        if not args.shape:
            raise ArgumentError("rdm preprocessing needs --shape T,R,V")
        shape = [int(s) for s in args.shape.split(",")]
        if len(shape) != 3:
            raise ArgumentError("--shape must be T,R,V")
        seq = sigproc.read_rdm(src, shape, args.frame_rate, synth.velocity_axis(shape[2], args.v_max))
        out = sigproc.compress_rdm(seq)
    else:
        cap = sigproc.read_wav(src, args.carrier)
        out = sigproc.acoustic_doppler_spectrogram(cap, args.half_band, args.window, args.hop)
    dst = Path(args.out)
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_bytes(np.ascontiguousarray(out, dtype="<f4").tobytes())
    dst.with_suffix(dst.suffix + ".json").write_text(json.dumps({"kind": args.kind, "shape": list(out.shape)}) + "\n")
    print(f"{args.kind}: {src} -> {dst} shape={list(out.shape)}")
    return 0


def cmd_train_gen(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(args.dataset)
    sources = _sources(data, args.target_domain or [])
    model = vae.build_generator(args.variant, sources.modalities, cfg, seeded_rng(cfg.seed, "generator/init"))
    model, history = vae.fit_generator(model, sources.samples(), cfg, seeded_rng(cfg.seed, "generator/fit"))
    ckpt = Path(args.out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    vae.save_generator(ckpt, model, cfg)
    out = _out_dir(args.out or ckpt.parent)
    evalharness.write_json(out / "generator_history.json", history)
    _write_resolved(out, args, cfg)
    print(f"generator loss {history['initial_loss']:.4f} -> {history['final_loss']:.4f}; saved {ckpt}")
    return 0


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    model, _ = vae.load_generator(args.checkpoint)
    data = load_dataset(args.dataset)
    sources = _sources(data, args.target_domain or [])
    virtual = vae.generate_virtual(model, sources.samples(), cfg, seeded_rng(cfg.seed, "virtual"))
    if not virtual:
        raise ArgumentError("no virtual samples requested (ratio is 0)")
    groups = {d: [s for s in virtual if s.domain_id == d] for d in sources.domain_ids}
    out_set = SourceSet(tuple(DomainDataset(d, tuple(g)) for d, g in groups.items() if g), data.label_names,
                        data.modalities)
    out = _out_dir(args.out)
    save_dataset(out_set, out)
    _write_resolved(out, args, cfg)
    print(f"wrote {len(virtual)} virtual samples -> {out}")
    return 0


def _variant(args) -> str:
    if args.no_dg:
        return "no_dg"
    if args.no_virtual:
        return "no_virtual"
    return args.variant


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(args.dataset)
    targets = args.target_domain or []
    sources = _sources(data, targets)
    spec = evalharness.ExperimentSpec(SplitSpec(target_domains=tuple(targets)), cfg, _variant(args), (cfg.seed,),
                                      str(args.dataset))
    model = evalharness.train_pipeline(sources, cfg, spec.variant)
    ckpt = Path(args.out_checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_network(ckpt, model.main, cfg, data.label_names, {"variant": spec.variant, "sources": sources.domain_ids})
    out = _out_dir(args.out or ckpt.parent)
    _write_resolved(out, args, cfg)
    if targets:
        metrics = evalharness.evaluate(model.main, data.select(targets).samples())
        result = {"folds": [{"target": ",".join(targets), "seed": cfg.seed, "metrics": metrics,
                             "num_virtual": model.num_virtual}],
                  "aggregate": {"accuracy": metrics.accuracy, "precision": metrics.precision,
                                "recall": metrics.recall}}
        report, _ = evalharness.build_report(spec, result)
        evalharness.write_json(out / "report.json", report)
        print(f"{spec.variant}: target {','.join(targets)} accuracy {metrics.accuracy:.4f}")
    print(f"saved {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(args.dataset)
    out = _out_dir(args.out)
    if args.checkpoint:
        net, header = load_network(args.checkpoint)
        targets = args.target_domain or [d for d in data.domain_ids if d not in header["meta"].get("sources", [])]
        if not targets:
            raise ArgumentError("no held-out domains to evaluate; pass --target-domain")
        metrics = evalharness.evaluate(net, data.select(targets).samples(), args.positive_class)
        evalharness.write_json(out / "report.json", {"version": evalharness.REPORT_VERSION,
                                                     "checkpoint": str(args.checkpoint), "targets": targets,
                                                     "metrics": metrics.to_dict(timing=False)})
        _write_resolved(out, args, cfg)
        print(f"accuracy {metrics.accuracy:.4f} on {','.join(targets)}")
        return 0
    mode = "k_fold_in_domain" if args.k else "leave_one_domain_out"
    spec = evalharness.ExperimentSpec(SplitSpec(mode, tuple(args.target_domain or ()), args.k or 5), cfg,
                                      _variant(args), _seeds(args.seeds, cfg), str(args.dataset), args.positive_class)
    _write_resolved(out, args, cfg)
    if args.k:
        result = evalharness.k_fold_in_domain(data, args.k, spec)
    else:
        result = evalharness.leave_one_domain_out(data, spec)
    report, timing = evalharness.build_report(spec, result)
    evalharness.write_json(out / "report.json", report)
    (out / "report.csv").write_text(evalharness.folds_csv(report), encoding="utf-8")
    evalharness.write_json(out / "timing.json", timing)
    leaked = sum(f.get("leaked", 0) for f in report["folds"])
    print(f"{spec.variant}: mean accuracy {report['aggregate']['accuracy']:.4f} over {len(report['folds'])} folds"
          f"; leaked samples {leaked}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(args.dataset)
    spec = evalharness.ExperimentSpec(SplitSpec(target_domains=tuple(args.target_domain or ())), cfg,
                                      _variant(args), _seeds(args.seeds, cfg), str(args.dataset))
    out = _out_dir(args.out)
    _write_resolved(out, args, cfg)
    rows = evalharness.run_ablation(data, args.sweep, _grid(args.grid, args.sweep), spec)
    table = {"version": evalharness.REPORT_VERSION, "spec": spec.to_dict(), "sweep": args.sweep,
             "rows": [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows]}
    evalharness.write_json(out / "ablation.json", table)
    (out / "ablation.csv").write_text(evalharness.ablation_csv(rows), encoding="utf-8")
    evalharness.write_json(out / "timing.json", {"rows": [r["runtime_s"] for r in rows]})
    for r in rows:
        print(f"{args.sweep}={r['value']}: mean accuracy {r['mean_accuracy']:.4f}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _config_flags(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="JSON TrainConfig overlay (or a previous resolved_config.json)")
    if seed:
        p.add_argument("--seed", type=int, help="training seed (overrides the config)")
    p.add_argument("--omega1", type=float, help="signal weight of the generation latent")
    p.add_argument("--omega2", type=float, help="noise weight of the generation latent")
    p.add_argument("--ratio", type=float, help="virtual samples per real sample")
    p.add_argument("--base-modality", choices=[k.value for k in synth.ModalityKind],
                   help="modality encoded by the cross-modal generator")


def _target_flag(p: argparse.ArgumentParser, help_text: str) -> None:
    p.add_argument("--target-domain", action="append", metavar="ID", help=help_text)


def _variant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=evalharness.VARIANTS, default="dgsense")
    p.add_argument("--no-dg", action="store_true", help="pooled baseline: no episodic training, no virtual data")
    p.add_argument("--no-virtual", action="store_true", help="episodic training without virtual data")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="dgsense", description="Domain-generalized wireless sensing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="write a synthetic benchmark dataset")
    p.add_argument("--spec", required=True, choices=("gesture6", "activity6", "fall2"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("inspect", help="summarise a dataset, checkpoint or report")
    p.add_argument("path")
    p.set_defaults(handler=cmd_inspect)

    p = sub.add_parser("preprocess", help="turn a raw capture into a model-ready tensor")
    p.add_argument("--kind", required=True, choices=("csi", "rdm", "audio"))
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, help="csi: number of packets")
    p.add_argument("--dims", type=int, help="csi: complex values per packet")
    p.add_argument("--sample-rate", type=float, default=1000.0, help="csi: packets per second")
    p.add_argument("--shape", help="rdm: T,R,V")
    p.add_argument("--frame-rate", type=float, default=10.0, help="rdm: frames per second")
    p.add_argument("--v-max", type=float, default=4.0, help="rdm: velocity of the outermost bin (m/s)")
    p.add_argument("--carrier", type=float, default=20000.0, help="audio: carrier frequency (Hz)")
    p.add_argument("--half-band", type=float, default=500.0, help="audio: analysed band around the carrier (Hz)")
    p.add_argument("--window", type=int, default=None, help="STFT window length")
    p.add_argument("--hop", type=int, default=None, help="STFT hop")
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train-gen", help="train a virtual-data generator on source domains")
    p.add_argument("--dataset", required=True)
    _target_flag(p, "domain excluded from generator training (repeatable)")
    p.add_argument("--variant", choices=("cross", "multi"), default="cross")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out", help="directory for logs (default: checkpoint directory)")
    _config_flags(p)
    p.set_defaults(handler=cmd_train_gen)

    p = sub.add_parser("generate", help="write virtual samples from a trained generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    _target_flag(p, "domain not used as generation input (repeatable)")
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("train", help="episodic training on source domains")
    p.add_argument("--dataset", required=True)
    _target_flag(p, "held-out domain, excluded from every training stage (repeatable)")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out", help="directory for report and logs (default: checkpoint directory)")
    _variant_flags(p)
    _config_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="leave-one-domain-out or k-fold evaluation")
    p.add_argument("--dataset", required=True)
    _target_flag(p, "evaluate only these held-out domains (repeatable; default all)")
    p.add_argument("--checkpoint", help="score an existing main-network checkpoint instead of training")
    p.add_argument("--k", type=int, help="run stratified k-fold in-domain evaluation instead")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--positive-class", type=int, help="binary protocol: class index treated as positive")
    p.add_argument("--out", required=True)
    _variant_flags(p)
    _config_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one factor and tabulate target accuracy")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sweep", required=True, choices=evalharness.SWEEPS)
    p.add_argument("--grid", required=True, help="comma-separated grid values")
    _target_flag(p, "held-out domain (default: last domain)")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--out", required=True)
    _variant_flags(p)
    _config_flags(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def _configure_torch() -> None:
    torch.set_num_threads(worker_threads())
    torch.use_deterministic_algorithms(True)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "window", 0) is None:
            args.window = 4096 if args.kind == "audio" else 256
        if getattr(args, "hop", 0) is None:
            args.hop = 1024 if args.kind == "audio" else 64
        _configure_torch()
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DGSenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
