"""``vidtag`` command line: synth, gallery, train, infer, eval, ablate.

Every option can also come from the environment (``VIDTAG_<OPTION>``, e.g.
``VIDTAG_RESOLUTION_KM``) or from a YAML/JSON file given with ``--config``.
Precedence is command line, then environment, then config file, then the
built-in default. Config files may also carry ``model``, ``train`` and
``world`` sections with overrides for the corresponding dataclasses.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical
divergence. Failures print one JSON object on stderr.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .errors import DivergenceError, FormatError, GraphStateError, VidTagError
from .frames import manifest_path_for, read_manifest, read_vtag, write_vtag
from .gallery import (build_gallery, build_val_gallery, load_embedding_cache, read_gallery_csv, region_extents,
                      save_embedding_cache, write_gallery_csv)
from .metrics import evaluate
from .model import ModelConfig, VidTagModel
from .retrieval import export_predictions, infer_dataset, read_predictions
from .synthetic import SyntheticWorldConfig, generate_synthetic
from .training import (TrainConfig, ablation_harness, deterministic_mode, split_probe, train_phase1,
                       train_phase2)

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4
ENV_PREFIX = "VIDTAG_"

log = logging.getLogger("vidtag")


class UsageError(Exception):
    pass


def _flag(parser, name, default=None, required=False, **kw):
    """Add ``--name`` with a ``None`` argparse default; the real default is resolved later."""
    dest = name.lstrip("-").replace("-", "_")
    specs = parser.get_default("_specs")
    specs[dest] = (default, required, kw.get("type", str), name)
    if default is not None and "help" in kw:
        kw["help"] += f" (default: {default})"
    parser.add_argument(name, dest=dest, default=None, **kw)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _common(parser):
    parser.set_defaults(_specs={})
    _flag(parser, "--config", help="YAML or JSON file with option values")
    _flag(parser, "--seed", default=42, type=int, help="random seed")
    _flag(parser, "--workers", default=os.cpu_count() or 1, type=int, help="parallel workers")
    _flag(parser, "--deterministic", default=False, type=_bool, nargs="?", const=True,
          help="single worker and single BLAS thread")
    _flag(parser, "--log-level", default="WARNING", help="logging level")


def build_parser():
    p = argparse.ArgumentParser(prog="vidtag", description="Frame-to-GPS video geolocalization.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(s)
    _flag(s, "--out", required=True, help="training VTAG output path")
    _flag(s, "--val-out", help="validation VTAG path (default: <out stem>-val.vtag)")
    _flag(s, "--sequences", default=400, type=int, help="training sequences")
    _flag(s, "--val-sequences", default=40, type=int, help="validation sequences")
    _flag(s, "--frames", type=int, help="frames per sequence (overrides the min/max range)")
    _flag(s, "--noise", default=0.01, type=float, help="feature noise standard deviation")
    _flag(s, "--step-km", default=2.0, type=float, help="trajectory step length")
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gallery", help="build a candidate gallery")
    gsub = g.add_subparsers(dest="gallery_command", required=True)
    gb = gsub.add_parser("build", help="uniform grid over training regions")
    _common(gb)
    _flag(gb, "--manifest", required=True, help="training manifest CSV")
    _flag(gb, "--resolution-km", default=0.1, type=float, help="grid spacing")
    _flag(gb, "--padding-deg", default=0.05, type=float, help="extent padding")
    _flag(gb, "--outlier-fraction", default=0.005, type=float, help="dropped fraction per tail and axis")
    _flag(gb, "--merge-radius-km", default=100.0, type=float, help="region merge radius")
    _flag(gb, "--out", required=True, help="gallery CSV output")
    gb.set_defaults(func=cmd_gallery_build)
    gv = gsub.add_parser("from-val", help="known validation coordinates as the gallery")
    _common(gv)
    _flag(gv, "--manifest", required=True, help="validation manifest CSV")
    _flag(gv, "--out", required=True, help="gallery CSV output")
    gv.set_defaults(func=cmd_gallery_from_val)

    t = sub.add_parser("train", help="train phase 1 or phase 2")
    tsub = t.add_subparsers(dest="phase", required=True)
    for phase in ("phase1", "phase2"):
        tp = tsub.add_parser(phase, help=f"{phase} training")
        _common(tp)
        _flag(tp, "--data", required=True, help="training VTAG file")
        _flag(tp, "--out", required=True, help="checkpoint output path")
        if phase == "phase2":
            _flag(tp, "--ckpt", required=True, help="phase-1 checkpoint")
        _flag(tp, "--profile", default="toy", choices=["toy", "full"], help="hyperparameter profile")
        _flag(tp, "--epochs", type=int, help="epochs")
        _flag(tp, "--batch", type=int, help="sequences per step")
        _flag(tp, "--lr", type=float, help="base learning rate")
        _flag(tp, "--log", help="JSON-lines training log (default: stderr)")
        tp.set_defaults(func=cmd_train, phase_num=1 if phase == "phase1" else 2)

    i = sub.add_parser("infer", help="two-stage retrieval")
    _common(i)
    _flag(i, "--data", required=True, help="VTAG file to geolocate")
    _flag(i, "--ckpt", required=True, help="checkpoint")
    _flag(i, "--gallery", required=True, help="gallery CSV")
    _flag(i, "--out", required=True, help="predictions CSV")
    _flag(i, "--trajectories", help="GeoJSON trajectory output")
    _flag(i, "--stage", default="refined", choices=["initial", "refined", "both"], help="stages to write")
    _flag(i, "--cache", help="gallery embedding cache file")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a manifest")
    _common(e)
    _flag(e, "--pred", required=True, help="predictions CSV")
    _flag(e, "--manifest", required=True, help="ground-truth manifest CSV")
    _flag(e, "--out", required=True, help="JSON report output")
    _flag(e, "--stage", choices=["initial", "refined"], help="stage to score (default: refined if present)")
    _flag(e, "--dfd-metric", default="haversine", choices=["haversine", "planar"], help="DFD ground metric")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="component ablation table")
    _common(a)
    _flag(a, "--data", required=True, help="training VTAG file")
    _flag(a, "--val-data", help="held-out VTAG file (default: split off the training data)")
    _flag(a, "--out", required=True, help="markdown table output")
    _flag(a, "--resolution-km", default=4.0, type=float, help="gallery spacing")
    _flag(a, "--profile", default="toy", choices=["toy", "full"], help="hyperparameter profile")
    _flag(a, "--epochs", type=int, help="phase-1 epochs")
    _flag(a, "--phase2-epochs", type=int, help="phase-2 epochs")
    a.set_defaults(func=cmd_ablate)
    return p


def load_config_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config file: {exc.strerror}", path) from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise FormatError(f"unparseable config file: {exc}", path) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise FormatError("config file must hold a mapping", path)
    return data


def resolve(args, parser, environ=None):
    """Fill unset options from environment, config file and defaults, in that order."""
    environ = os.environ if environ is None else environ
    specs = args._specs
    file_cfg = {}
    cfg_path = args.config or environ.get(ENV_PREFIX + "CONFIG")
    if cfg_path:
        file_cfg = load_config_file(cfg_path)
    args.file_config = file_cfg
    for dest, (default, required, typ, flag) in specs.items():
        if dest == "config":
            args.config = cfg_path
            continue
        value = getattr(args, dest)
        if value is None and ENV_PREFIX + dest.upper() in environ:
            raw = environ[ENV_PREFIX + dest.upper()]
            try:
                value = typ(raw)
            except ValueError:
                raise UsageError(f"environment {ENV_PREFIX}{dest.upper()}={raw!r} is not valid for {flag}") from None
        if value is None and dest in file_cfg:
            value = file_cfg[dest]
            try:
                value = typ(value) if typ is not str else str(value)
            except (TypeError, ValueError):
                raise UsageError(f"config value {dest}={value!r} is not valid for {flag}") from None
        if value is None:
            value = default
        if value is None and required:
            raise UsageError(f"{flag} is required (flag, {ENV_PREFIX}{dest.upper()} or config key {dest!r})")
        setattr(args, dest, value)
    if args.deterministic:
        args.workers = 1
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    return args


def _section(args, key):
    sec = args.file_config.get(key, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section {key!r} must be a mapping")
    return sec


# -- commands ---------------------------------------------------------------
def _val_path(out):
    out = Path(out)
    return out.with_name(out.stem + "-val" + out.suffix)


def cmd_synth(args):
    world = dict(_section(args, "world"))
    world.update(sequences=args.sequences, val_sequences=args.val_sequences, noise=args.noise, step_km=args.step_km)
    if args.frames is not None:
        world.update(frames_min=args.frames, frames_max=args.frames)
    cfg = SyntheticWorldConfig(**world)
    train, val = generate_synthetic(cfg, seed=args.seed)
    write_vtag(args.out, train)
    val_out = args.val_out or _val_path(args.out)
    if len(val):
        write_vtag(val_out, val)
    _report({"train": str(args.out), "train_manifest": str(manifest_path_for(args.out)),
             "val": str(val_out) if len(val) else None, "frames": train.frame_count})


def _manifest_coords(path):
    rows = read_manifest(path)
    if not rows:
        raise FormatError("manifest has no rows", path)
    return [r[2] for r in rows], [r[3] for r in rows]


def cmd_gallery_build(args):
    lat, lon = _manifest_coords(args.manifest)
    extents = region_extents(lat, lon, padding=args.padding_deg, resolution=args.resolution_km,
                             outlier_fraction=args.outlier_fraction, merge_radius_km=args.merge_radius_km)
    gallery = build_gallery(extents)
    write_gallery_csv(args.out, gallery)
    _report({"points": len(gallery), "regions": len(extents), "out": str(args.out)})


def cmd_gallery_from_val(args):
    lat, lon = _manifest_coords(args.manifest)
    gallery = build_val_gallery(lat, lon)
    write_gallery_csv(args.out, gallery)
    _report({"points": len(gallery), "out": str(args.out)})


def _train_config(args, phase):
    base = TrainConfig.toy if args.profile == "toy" else TrainConfig.full
    over = dict(_section(args, "train"))
    over.pop("phase", None)
    over["seed"] = args.seed
    for key in ("epochs", "batch", "lr"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    try:
        return base(phase, **over)
    except TypeError as exc:
        raise UsageError(f"bad train section: {exc}") from None


def _model_config(args, dataset):
    over = dict(_section(args, "model"))
    over.setdefault("seed", args.seed)
    maker = ModelConfig.toy if args.profile == "toy" else ModelConfig.full
    try:
        cfg = maker(**{**over, "d_clip": dataset.d_clip, "d_dino": dataset.d_dino})
    except TypeError as exc:
        raise UsageError(f"bad model section: {exc}") from None
    return cfg


def cmd_train(args):
    phase = args.phase_num
    cfg = _train_config(args, phase)
    data = read_vtag(args.data)
    sink = open(args.log, "w") if args.log else sys.stderr
    try:
        if phase == 1:
            model, records = train_phase1(data, cfg, model_cfg=_model_config(args, data), log_sink=sink)
        else:
            model, _ = VidTagModel.load(args.ckpt)
            if model.phase < 1:
                raise GraphStateError(f"{args.ckpt} is not a phase-1 checkpoint")
            model, records = train_phase2(data, cfg, model, log_sink=sink)
    finally:
        if sink is not sys.stderr:
            sink.close()
    model.save(args.out, phase, extra={"train": cfg.to_dict()})
    last = [r for r in records if r.get("event") == "epoch"][-1]
    _report({"checkpoint": str(args.out), "phase": phase, "final_epoch": last})


def _checkpoint_tag(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_infer(args):
    model, _ = VidTagModel.load(args.ckpt)
    data = read_vtag(args.data)
    if (data.d_clip, data.d_dino) != (model.cfg.d_clip, model.cfg.d_dino):
        raise FormatError(f"data dims {(data.d_clip, data.d_dino)} do not match the checkpoint", args.data)
    gallery = read_gallery_csv(args.gallery)
    tag = _checkpoint_tag(args.ckpt)
    cached = load_embedding_cache(args.cache, gallery, tag) if args.cache else None
    if cached is not None:
        gallery.embeddings = cached
    else:
        gallery.embed(model)
        if args.cache:
            save_embedding_cache(args.cache, gallery, tag)
    initial, refined = infer_dataset(data, model, gallery, args.workers)
    results = {"initial": initial, "refined": refined, "both": initial + refined}[args.stage]
    export_predictions(results, args.out, args.trajectories)
    _report({"predictions": str(args.out), "frames": data.frame_count, "gallery": len(gallery)})


def cmd_eval(args):
    report = evaluate(read_predictions(args.pred), read_manifest(args.manifest), stage=args.stage,
                      dfd_metric=args.dfd_metric, workers=args.workers)
    Path(args.out).write_text(report.to_json())
    summary = {k: v for k, v in report.to_dict().items() if k != "per_sequence"}
    _report(summary)


def cmd_ablate(args):
    data = read_vtag(args.data)
    if args.val_data:
        train, val = data, read_vtag(args.val_data)
    else:
        train, val = split_probe(data, 0.2, args.seed)
    p1 = _train_config(args, 1)
    p2 = _train_config(args, 2)
    p2 = replace(p2, epochs=args.phase2_epochs) if args.phase2_epochs is not None else \
        replace(p2, epochs=TrainConfig.toy(2).epochs if args.profile == "toy" else TrainConfig.full(2).epochs)
    table, _ = ablation_harness(train, val, _model_config(args, train), p1, p2, args.resolution_km,
                                workers=args.workers)
    Path(args.out).write_text(table.to_markdown())
    _report({"table": str(args.out), "rows": table.rows, "bypass_equivalent": table.bypass_equivalent})


# -- entry point ------------------------------------------------------------
def _report(obj):
    print(json.dumps(obj, sort_keys=True, default=str))


def _fail(code, exc):
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("path", "offset"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None, environ=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = resolve(args, parser, environ)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        with deterministic_mode(args.deterministic):
            args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGENCE, exc)
    except (FormatError, GraphStateError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except (VidTagError, ValueError) as exc:
        return _fail(EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
