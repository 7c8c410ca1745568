"""Command-line front end.

Subcommands: profile, detect, recover, defend, attack, eval, flops.  Options
can come from a flat ``key=value`` config file (``--config``); explicit
flags override config values.  Machine-readable output is line-delimited
``key=value`` records.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import attacks, complexity, defense, dsp, evalkit, profiles
from .engine import forward
from .interpret import Box
from .modelio import read_model


def load_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


_CONFIG_KEYS = {
    "model": str, "profiles": str, "modality": str, "threshold": float,
    "activation_threshold": float, "alpha": float, "k": int, "crop": int,
    "n_samples": int, "seed": int, "out": str,
    "mfcc_sample_rate": int, "mfcc_frame_len": int, "mfcc_hop": int,
    "mfcc_mel_bands": int, "mfcc_coefficients": int, "mfcc_fft_size": int,
}


def merge_config(args) -> argparse.Namespace:
    """Config-file values fill in any flag the user left at None."""
    if getattr(args, "config", None):
        file_vals = load_config_file(args.config)
        unknown = set(file_vals) - set(_CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, cast in _CONFIG_KEYS.items():
            if key in file_vals and getattr(args, key, None) is None:
                setattr(args, key, cast(file_vals[key]))
    defaults = {"modality": "image", "threshold": defense.IMAGE_THRESHOLD,
                "activation_threshold": defense.AUDIO_THRESHOLD, "alpha": 0.7,
                "k": defense.DEFAULT_TOP_K, "crop": profiles.DEFAULT_CROP_SIZE,
                "n_samples": 100, "seed": 0}
    for key, val in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    return args


def _mfcc_cfg(args) -> dsp.MfccConfig:
    kw = {}
    for field, attr in (("sample_rate", "mfcc_sample_rate"), ("frame_len", "mfcc_frame_len"),
                        ("hop", "mfcc_hop"), ("mel_bands", "mfcc_mel_bands"),
                        ("coefficients", "mfcc_coefficients"), ("fft_size", "mfcc_fft_size")):
        v = getattr(args, attr, None)
        if v is not None:
            kw[field] = v
    return dsp.MfccConfig(**kw)


def _defend_cfg(args) -> defense.DefendConfig:
    return defense.DefendConfig(modality=args.modality, image_threshold=args.threshold,
                                activation_threshold=args.activation_threshold,
                                alpha=args.alpha, k=args.k, mfcc=_mfcc_cfg(args))


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ValueError(f"missing required option(s): {', '.join('--' + m for m in missing)}")


def cmd_profile(args) -> int:
    _require(args, "model", "data", "out")
    model = read_model(args.model)
    dataset = [(x, label) for _, x, label in evalkit.load_dataset(args.data)]
    store = profiles.build_store(
        model, dataset, args.modality, alpha=args.alpha, crop_size=args.crop,
        k=args.k, n_samples=args.n_samples, mfcc_cfg=_mfcc_cfg(args))
    profiles.save_profiles(store, args.out)
    kinds = len(store.image) + len(store.audio)
    print(f"wrote {kinds} class profiles to {args.out}")
    return 0


def cmd_detect(args) -> int:
    _require(args, "model", "profiles", "input")
    model = read_model(args.model)
    store = profiles.load_profiles(args.profiles, model)
    x = evalkit.read_tensor(args.input)
    if args.modality == "image":
        report = defense.detect_image(model, x, store, args.threshold, args.alpha)
    else:
        report = defense.detect_audio(model, x, store, args.activation_threshold, _mfcc_cfg(args))
    print(report.to_record())
    return 0


def _parse_region(text) -> Box:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 4:
        raise ValueError("region must be y0,x0,y1,x1")
    return Box(*parts)


def cmd_recover(args) -> int:
    _require(args, "model", "input")
    model = read_model(args.model)
    x = evalkit.read_tensor(args.input)
    if args.modality == "image":
        if args.region:
            region = _parse_region(args.region)
        else:
            _require(args, "profiles")
            store = profiles.load_profiles(args.profiles, model)
            report = defense.detect_image(model, x, store, args.threshold, args.alpha)
            if report.region is None:
                print("no region to recover (no primary source located)", file=sys.stderr)
                return 1
            region = report.region
        outcome = defense.recover_image(model, x, region)
        if args.out:
            evalkit.write_tensor(args.out, outcome.recovered)
    else:
        _require(args, "profiles")
        store = profiles.load_profiles(args.profiles, model)
        feats = profiles.ensure_features(model, x, _mfcc_cfg(args))
        probs, pred, taps = forward(model, feats, tap_layers=(model.last_conv,))
        outcome = defense.recover_audio(model, taps, store, model.labels[pred], args.k,
                                        original_output=probs)
        if args.out:
            evalkit.write_tensor(args.out, outcome.recovered)
    print(outcome.to_record())
    return 0


def cmd_defend(args) -> int:
    _require(args, "model", "profiles", "input")
    model = read_model(args.model)
    store = profiles.load_profiles(args.profiles, model)
    x = evalkit.read_tensor(args.input)
    final, report, outcome = defense.defend(model, x, store, _defend_cfg(args))
    print(report.to_record())
    if outcome is not None:
        print("recovery " + outcome.to_record())
    print(f"final={final}")
    return 0


def cmd_attack(args) -> int:
    _require(args, "model", "data", "out")
    model = read_model(args.model)
    natural = evalkit.load_dataset(args.data)
    cfg = evalkit.AttackConfig(modality=args.modality, kind=args.kind,
                               patch_size=args.patch_size, target=args.target,
                               opt_steps=args.steps, opt_eta=args.eta,
                               epsilon=args.epsilon, step=args.step, iters=args.iters,
                               seed=args.seed)
    if args.modality == "audio":
        print("note: audio attacks perturb MFCC feature maps, not waveforms; "
              "the attacked dataset contains feature tensors")
    attacked = evalkit.attack_dataset(model, natural, cfg, _mfcc_cfg(args))
    evalkit.save_dataset(args.out, attacked)
    if cfg.kind in ("patch-random", "patch-optimized") and args.patch_out:
        evalkit.write_tensor(args.patch_out, evalkit.build_patch(model, natural, cfg))
    print(f"wrote {len(attacked)} attacked inputs to {args.out}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "model", "profiles", "data", "out")
    model = read_model(args.model)
    store = profiles.load_profiles(args.profiles, model)
    natural = evalkit.load_dataset(args.data)
    attacked = evalkit.load_dataset(args.attacked) if args.attacked else None
    cfg = evalkit.AttackConfig(modality=args.modality, kind=args.kind,
                               patch_size=args.patch_size, target=args.target,
                               opt_steps=args.steps, opt_eta=args.eta,
                               epsilon=args.epsilon, step=args.step, iters=args.iters,
                               seed=args.seed)
    report = evalkit.evaluate(model, store, natural, cfg, _defend_cfg(args),
                              attacked_set=attacked, workers=args.workers)
    with open(args.out + ".table.txt", "w") as f:
        f.write(report.to_table())
    with open(args.out + ".records.txt", "w") as f:
        f.write(report.to_records())
    print(report.to_table())
    print(f"wrote {args.out}.table.txt and {args.out}.records.txt")
    return 0


def cmd_flops(args) -> int:
    _require(args, "model")
    model = read_model(args.model)
    breakdown = complexity.pipeline_cost(model, args.modality, crop=(args.crop, args.crop))
    print(f"{'step':<22}{'operations':>16}")
    print("-" * 38)
    for name, value in breakdown.rows():
        print(f"{name:<22}{value:>16,}")
    print(f"{'total':<22}{breakdown.total:>16,}")
    print()
    print("published reference totals (for context, not estimated):")
    for name, value in complexity.PUBLISHED_REFERENCE_FLOPS.items():
        if isinstance(value, tuple):
            value = " / ".join(f"{v:,}" for v in value)
        else:
            value = f"{value:,}"
        print(f"  {name}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnndefense",
                                     description="Self-verifying CNN inference with data recovery")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--model", help="model container (.lncm)")
        p.add_argument("--profiles", help="profile store (.lncp)")
        p.add_argument("--modality", choices=("image", "audio"))
        p.add_argument("--threshold", type=float, help="image inconsistency threshold")
        p.add_argument("--activation-threshold", dest="activation_threshold", type=float)
        p.add_argument("--alpha", type=float, help="heatmap threshold fraction")
        p.add_argument("--k", type=int, help="top-k activations to suppress")
        p.add_argument("--crop", type=int, help="canonical crop side")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path (or prefix for eval)")
        for key in ("sample_rate", "frame_len", "hop", "mel_bands", "coefficients", "fft_size"):
            p.add_argument(f"--mfcc-{key.replace('_', '-')}", dest=f"mfcc_{key}", type=int)

    p = sub.add_parser("profile", help="build per-class profiles from a dataset")
    common(p)
    p.add_argument("--data", help="natural dataset directory")
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("detect", help="self-verify one input")
    common(p)
    p.add_argument("--input", help="tensor file (.ten)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("recover", help="repair one input")
    common(p)
    p.add_argument("--input", help="tensor file (.ten)")
    p.add_argument("--region", help="image region y0,x0,y1,x1 (default: detect first)")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("defend", help="detect and, if flagged, recover")
    common(p)
    p.add_argument("--input", help="tensor file (.ten)")
    p.set_defaults(func=cmd_defend)

    def attack_opts(p):
        p.add_argument("--kind", default="patch-random",
                       choices=("patch-random", "patch-optimized", "fgsm", "bim"))
        p.add_argument("--patch-size", dest="patch_size", type=int, default=12)
        p.add_argument("--target", help="target class label")
        p.add_argument("--steps", type=int, default=60, help="patch optimization steps")
        p.add_argument("--eta", type=float, default=1.0, help="patch optimization step size")
        p.add_argument("--epsilon", type=float, default=2.0)
        p.add_argument("--step", type=float, default=0.5)
        p.add_argument("--iters", type=int, default=8)

    p = sub.add_parser("attack", help="write an attacked twin of a dataset")
    common(p)
    p.add_argument("--data", help="natural dataset directory")
    attack_opts(p)
    p.add_argument("--patch-out", dest="patch_out", help="also save the patch tensor")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="full measurement protocol")
    common(p)
    p.add_argument("--data", help="natural dataset directory")
    p.add_argument("--attacked", help="attacked dataset directory (default: generate)")
    attack_opts(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic cost breakdown")
    common(p)
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = merge_config(args)
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
