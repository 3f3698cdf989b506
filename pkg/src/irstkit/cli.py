"""Command-line entry point: gen-data, train, eval, spectra.

Configuration is a flat key=value file; '#' starts a comment. Command-line
--set overrides win over the file, which wins over built-in defaults. Unknown
keys are rejected. Every run directory receives the fully resolved config so
the run can be reproduced from it.

Exit codes: 0 success, 2 config/validation error, 3 protocol guard, 4 I/O.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from pathlib import Path

log = logging.getLogger("irstkit")


class ConfigError(ValueError):
    pass


class GuardError(RuntimeError):
    pass


# -- configuration -----------------------------------------------------------

DEFAULTS = {
    "model.stages": "4",
    "model.base_channels": "16",
    "model.in_channels": "1",
    "model.input_size": "64",
    "model.prm": "true",
    "model.oam": "true",
    "model.ssr": "true",
    "model.ssr_stages": "1,2",
    "model.tau": "0.3",
    "model.lambda": "0.3",
    "model.alpha": "0.95",
    "model.upsample": "bilinear",
    "model.ssr_rank": "sigma",
    "model.zero_init": "false",
    "model.residual_init": "true",
    "train.epochs": "30",
    "train.lr": "5e-4",
    "train.batch": "8",
    "train.seed": "0",
    "train.manifests": "",
    "eval.threshold": "0.5",
    "eval.match_radius": "3.0",
    "eval.roc_thresholds": "0.95,0.9,0.8,0.7,0.6,0.5,0.4,0.3,0.2,0.1,0.05",
    "eval.split": "all",
    "gen.n": "50",
    "gen.size": "64",
    "gen.seed": "0",
    "gen.targets": "1,3",
    "gen.diameter": "2,9",
    "gen.scr": "2,10",
    "paths.out": "runs/out",
}

_DOMAIN_KEY = re.compile(
    r"^domain\.([A-Za-z0-9_-]+)\.(beta|mean|spread|clutter_density|clutter_scale|noise|phase_jitter)$"
)

# default three-domain preset used when no domain.* keys are configured
PRESET_DOMAINS = {
    "A": dict(beta=2.2, mean=0.30, spread=0.10, clutter_density=2.0,
              clutter_scale=6.0, noise=0.010, phase_jitter=0.25),
    "B": dict(beta=1.6, mean=0.45, spread=0.14, clutter_density=3.0,
              clutter_scale=4.0, noise=0.020, phase_jitter=0.80),
    "C": dict(beta=2.8, mean=0.22, spread=0.08, clutter_density=1.0,
              clutter_scale=8.0, noise=0.015, phase_jitter=1.60),
}


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_int(key, raw, lo=None, hi=None):
    try:
        v = int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if lo is not None and v < lo or hi is not None and v > hi:
        raise ConfigError(f"{key}: value {v} out of range")
    return v


def _parse_float(key, raw, lo=None, hi=None):
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if lo is not None and v < lo or hi is not None and v > hi:
        raise ConfigError(f"{key}: value {v} out of range")
    return v


def _parse_choice(key, raw, options):
    if raw not in options:
        raise ConfigError(f"{key}: expected one of {options}, got {raw!r}")
    return raw


def _validate_key(key: str, raw: str) -> None:
    if key in ("model.stages",):
        _parse_int(key, raw, lo=2)
    elif key in ("model.base_channels", "model.in_channels", "train.epochs",
                 "train.batch", "gen.n"):
        _parse_int(key, raw, lo=1)
    elif key in ("train.seed", "gen.seed"):
        _parse_int(key, raw, lo=0)
    elif key in ("model.input_size", "gen.size"):
        v = _parse_int(key, raw, lo=8)
        if v & (v - 1):
            raise ConfigError(f"{key}: {v} is not a power of two")
    elif key == "model.prm":
        if "," in raw:
            for part in raw.split(","):
                _parse_bool(key, part)
        else:
            _parse_bool(key, raw)
    elif key in ("model.oam", "model.ssr", "model.zero_init", "model.residual_init"):
        _parse_bool(key, raw)
    elif key == "model.ssr_stages":
        for part in raw.split(","):
            _parse_int(key, part, lo=1)
    elif key == "model.tau":
        v = _parse_float(key, raw)
        if not 0.0 < v <= 1.0:
            raise ConfigError(f"{key}: must be in (0,1]")
    elif key == "model.lambda":
        _parse_float(key, raw, lo=0.0, hi=1.0)
    elif key == "model.alpha":
        v = _parse_float(key, raw)
        if not 0.0 < v < 1.0:
            raise ConfigError(f"{key}: must be in (0,1)")
    elif key == "model.upsample":
        _parse_choice(key, raw, ("bilinear", "nearest"))
    elif key == "model.ssr_rank":
        _parse_choice(key, raw, ("sigma", "mu"))
    elif key == "train.lr":
        _parse_float(key, raw, lo=0.0)
    elif key == "train.manifests":
        pass
    elif key == "eval.threshold":
        _parse_float(key, raw, lo=0.0, hi=1.0)
    elif key == "eval.match_radius":
        _parse_float(key, raw, lo=0.0)
    elif key == "eval.roc_thresholds":
        vals = [_parse_float(key, p, lo=0.0, hi=1.0) for p in raw.split(",")]
        if any(a <= b for a, b in zip(vals, vals[1:])):
            raise ConfigError(f"{key}: thresholds must be strictly descending")
    elif key == "eval.split":
        _parse_choice(key, raw, ("train", "val", "all"))
    elif key in ("gen.targets", "gen.diameter", "gen.scr"):
        parts = raw.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'lo,hi'")
        lo, hi = (_parse_float(key, p) for p in parts)
        if hi < lo:
            raise ConfigError(f"{key}: range is reversed")
    elif key == "paths.out":
        pass
    else:
        m = _DOMAIN_KEY.match(key)
        if not m:
            raise ConfigError(f"unknown config key {key!r}")
        field = m.group(2)
        if field == "beta":
            _parse_float(key, raw, lo=0.5, hi=3.0)
        elif field in ("mean",):
            _parse_float(key, raw, lo=0.0, hi=1.0)
        elif field == "spread":
            _parse_float(key, raw, lo=0.0, hi=0.5)
        else:
            _parse_float(key, raw, lo=0.0)


def load_config(path: str | None, overrides: list[str]) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            _validate_key(key, value)
            cfg[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        _validate_key(key, value)
        cfg[key] = value
    return cfg


def write_resolved(cfg: dict[str, str], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {cfg[k]}\n" for k in sorted(cfg)]
    (out_dir / "config.resolved").write_text("".join(lines), encoding="utf-8")


def _model_config(cfg: dict[str, str], np):
    from .network import ModelConfig

    stages = int(cfg["model.stages"])
    raw_prm = cfg["model.prm"]
    if "," in raw_prm:
        prm = tuple(_parse_bool("model.prm", p) for p in raw_prm.split(","))
    else:
        prm = _parse_bool("model.prm", raw_prm)
    size = int(cfg["model.input_size"])
    mc = ModelConfig(
        stages=stages,
        base_channels=int(cfg["model.base_channels"]),
        in_channels=int(cfg["model.in_channels"]),
        input_size=(size, size),
        prm=prm,
        oam=_parse_bool("model.oam", cfg["model.oam"]),
        ssr=_parse_bool("model.ssr", cfg["model.ssr"]),
        ssr_stages=tuple(int(p) for p in cfg["model.ssr_stages"].split(",")),
        tau=float(cfg["model.tau"]),
        lam=float(cfg["model.lambda"]),
        alpha=float(cfg["model.alpha"]),
        upsample_mode=cfg["model.upsample"],
        ssr_rank_by=cfg["model.ssr_rank"],
        zero_init=_parse_bool("model.zero_init", cfg["model.zero_init"]),
        residual_init=_parse_bool("model.residual_init", cfg["model.residual_init"]),
        dtype=np.float32,
    )
    try:
        mc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return mc


def _domain_styles(cfg: dict[str, str]):
    from .synth import DomainStyle

    fields: dict[str, dict[str, float]] = {}
    for key, raw in cfg.items():
        m = _DOMAIN_KEY.match(key)
        if m:
            fields.setdefault(m.group(1), {})[m.group(2)] = float(raw)
    if not fields:
        fields = {k: dict(v) for k, v in PRESET_DOMAINS.items()}
    styles = []
    for dom in sorted(fields):
        f = fields[dom]
        missing = {"beta", "mean", "spread", "clutter_density",
                   "clutter_scale", "noise", "phase_jitter"} - set(f)
        if missing:
            raise ConfigError(f"domain.{dom}: missing keys {sorted(missing)}")
        styles.append(
            DomainStyle(
                domain_id=dom,
                beta=f["beta"],
                mean=f["mean"],
                spread=f["spread"],
                clutter_density=f["clutter_density"],
                clutter_scale=f["clutter_scale"],
                noise_sigma=f["noise"],
                phase_jitter=f["phase_jitter"],
            )
        )
    return styles


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(cfg: dict[str, str]) -> int:
    import numpy as np

    from .synth import SceneSpec, generate_domain_dataset

    out = Path(cfg["paths.out"])
    styles = _domain_styles(cfg)
    t_lo, t_hi = (int(float(p)) for p in cfg["gen.targets"].split(","))
    d_lo, d_hi = (float(p) for p in cfg["gen.diameter"].split(","))
    s_lo, s_hi = (float(p) for p in cfg["gen.scr"].split(","))
    spec = SceneSpec(
        size=int(cfg["gen.size"]),
        targets=(t_lo, t_hi),
        diameter=(d_lo, d_hi),
        scr=(s_lo, s_hi),
    )
    try:
        spec.validate()
        for style in styles:
            style.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    write_resolved(cfg, out)
    n = int(cfg["gen.n"])
    base_seed = int(cfg["gen.seed"])
    for idx, style in enumerate(styles):
        dom_seed = int(np.random.SeedSequence([base_seed, idx]).generate_state(1)[0])
        manifest = generate_domain_dataset(style, spec, n, dom_seed, out)
        print(f"domain {style.domain_id}: {len(manifest.entries)} samples "
              f"-> {manifest.root / 'manifest.tsv'}")
    return 0


def cmd_train(cfg: dict[str, str], resume: str | None = None) -> int:
    import numpy as np

    from .data import domains_of, load_manifests, load_split
    from .network import SmallTargetNet
    from .training import TrainSettings, train_loop

    paths = [p for p in cfg["train.manifests"].split(";") if p]
    if not paths:
        raise ConfigError("train.manifests: at least one manifest is required")
    manifests = load_manifests(paths)
    domains = domains_of(manifests)

    mc = _model_config(cfg, np)
    if mc.ssr and len(domains) < 2:
        log.warning("single source domain: style recomposition disabled")
        mc.ssr = False

    train_samples = load_split(manifests, "train")
    val_samples = load_split(manifests, "val")
    settings = TrainSettings(
        epochs=int(cfg["train.epochs"]),
        lr=float(cfg["train.lr"]),
        batch=int(cfg["train.batch"]),
        seed=int(cfg["train.seed"]),
        threshold=float(cfg["eval.threshold"]),
        match_radius=float(cfg["eval.match_radius"]),
    )
    out = Path(cfg["paths.out"])
    write_resolved(cfg, out)

    model = SmallTargetNet(mc, domains=tuple(domains), seed=settings.seed)
    try:
        result = train_loop(model, train_samples, val_samples, settings, out,
                            resume_from=resume)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"best val IoU {result.best_val_iou:.4f} at epoch {result.best_epoch}; "
          f"log: {result.log_path}")
    return 0


def _checkpoint_domains(arrays) -> list[str]:
    found = []
    for name in arrays:
        m = re.match(r"^meta\.domain\.(\d+)\.(.+)$", name)
        if m:
            found.append((int(m.group(1)), m.group(2)))
    return [dom for _, dom in sorted(found)]


def cmd_eval(cfg: dict[str, str], checkpoint: str, target_manifest: str,
             allow_same_domain: bool = False, dump_activations: int = 0) -> int:
    import numpy as np

    from .checkpoint import load_arrays
    from .data import domains_of, load_manifests, load_split
    from .metrics import evaluate_masks, roc_sweep
    from .network import SmallTargetNet, predict_mask
    from .pgm import save_pgm
    from .tensor import Tensor, no_grad

    arrays = load_arrays(checkpoint)
    train_domains = _checkpoint_domains(arrays)
    manifests = load_manifests([target_manifest])
    target_domains = domains_of(manifests)

    overlap = sorted(set(train_domains) & set(target_domains))
    if overlap and not allow_same_domain:
        raise GuardError(
            f"target domain(s) {overlap} appeared in training; "
            "pass --allow-same-domain for the domain-consistent setting"
        )

    mc = _model_config(cfg, np)
    model = SmallTargetNet(mc, domains=tuple(train_domains), seed=0)
    model.load_state_dict(arrays)

    split = None if cfg["eval.split"] == "all" else cfg["eval.split"]
    samples = load_split(manifests, split)
    if not samples:
        raise ConfigError(f"no samples in split {cfg['eval.split']!r} of {target_manifest}")

    threshold = float(cfg["eval.threshold"])
    radius = float(cfg["eval.match_radius"])
    out = Path(cfg["paths.out"])
    write_resolved(cfg, out)

    probs, preds, gts, doms = [], [], [], []
    batch = 8
    with no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            x = Tensor(np.stack([s.image for s in chunk])[:, None].astype(mc.dtype))
            p = model.forward(x, mode="eval").values
            for j, s in enumerate(chunk):
                probs.append(p[j, 0])
                preds.append(predict_mask(p[j, 0], threshold))
                gts.append(s.mask)
                doms.append(s.domain_id)

    rows = ["domain,iou,f1,pd,fa_1e6,tp,fp,fn,detected,targets,false_alarm_pixels,total_pixels\n"]
    for dom in sorted(set(doms)):
        sel = [k for k, d in enumerate(doms) if d == dom]
        r = evaluate_masks([preds[k] for k in sel], [gts[k] for k in sel], radius)
        rows.append(
            f"{dom},{_fmt(r.iou)},{_fmt(r.f1)},{_fmt(r.pd)},{_fmt(r.fa * 1e6)},"
            f"{r.tp},{r.fp},{r.fn},{r.detected_targets},{r.total_targets},"
            f"{r.false_alarm_pixels},{r.total_pixels}\n"
        )
    (out / "eval_report.csv").write_text("".join(rows), encoding="utf-8")

    thresholds = [float(p) for p in cfg["eval.roc_thresholds"].split(",")]
    points = roc_sweep(probs, gts, thresholds)
    roc_rows = ["threshold,pd,fa_1e6\n"] + [
        f"{_fmt(t)},{_fmt(pd)},{_fmt(fa * 1e6)}\n" for t, pd, fa in points
    ]
    (out / "roc.csv").write_text("".join(roc_rows), encoding="utf-8")

    if dump_activations > 0:
        act_dir = out / "activations"
        act_dir.mkdir(parents=True, exist_ok=True)
        with no_grad():
            for k in range(min(dump_activations, len(samples))):
                s = samples[k]
                x = Tensor(s.image[None, None].astype(mc.dtype))
                capture = []
                model.forward(x, mode="eval", capture=capture)
                for name, t in capture:
                    if not name.startswith("dec"):
                        continue
                    fmap = t.values[0].mean(axis=0)
                    lo, hi = fmap.min(), fmap.max()
                    norm = (fmap - lo) / (hi - lo) if hi > lo else np.zeros_like(fmap)
                    save_pgm(norm, act_dir / f"{k:04d}_{name}.pgm", depth=8)

    print(f"wrote {out / 'eval_report.csv'} and {out / 'roc.csv'}")
    return 0


def cmd_spectra(cfg: dict[str, str], manifest_paths: list[str]) -> int:
    from .data import load_manifests, load_sample
    from .spectral import dataset_spectrum_profile

    if not manifest_paths:
        raise ConfigError("spectra: at least one manifest is required")
    manifests = load_manifests(manifest_paths)
    out = Path(cfg["paths.out"])
    write_resolved(cfg, out)

    names, profiles = [], []
    for path, man in zip(manifest_paths, manifests):
        if len(man.entries) < 2:
            raise ConfigError(f"spectra: manifest {path} has fewer than 2 images")
        images = [load_sample(man.root, e).image for e in man.entries]
        profile = dataset_spectrum_profile(images)
        name = Path(path).resolve().parent.name or f"set{len(names)}"
        if name in names:
            name = f"{name}_{len(names)}"
        names.append(name)
        profiles.append(profile)
        rows = ["bin-radius,mean-log-magnitude,phase-congruency\n"] + [
            f"{r},{_fmt(m)},{_fmt(c)}\n"
            for r, m, c in zip(profile.radii, profile.magnitude, profile.congruency)
        ]
        (out / f"spectra_{name}.csv").write_text("".join(rows), encoding="utf-8")

    rows = ["a,b,magnitude_mad,congruency_mad\n"]
    for i in range(len(profiles)):
        for j in range(i + 1, len(profiles)):
            n = min(len(profiles[i].radii), len(profiles[j].radii))
            mag = float(
                abs(profiles[i].magnitude[:n] - profiles[j].magnitude[:n]).mean()
            )
            con = float(
                abs(profiles[i].congruency[:n] - profiles[j].congruency[:n]).mean()
            )
            rows.append(f"{names[i]},{names[j]},{_fmt(mag)},{_fmt(con)}\n")
    (out / "spectra_divergence.csv").write_text("".join(rows), encoding="utf-8")
    print(f"wrote {len(profiles)} profiles and {out / 'spectra_divergence.csv'}")
    return 0


# -- entry point ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irstkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (wins over file)")
        p.add_argument("--out", default=None, help="shorthand for --set paths.out=...")

    p = sub.add_parser("gen-data", help="generate synthetic multi-domain datasets")
    common(p)

    p = sub.add_parser("train", help="train a model on source-domain manifests")
    common(p)
    p.add_argument("--no-prm", action="store_true", help="disable phase rectification")
    p.add_argument("--no-oam", action="store_true", help="disable orthogonal attention")
    p.add_argument("--no-ssr", action="store_true", help="disable style recomposition")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a target manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target-manifest", required=True)
    p.add_argument("--allow-same-domain", action="store_true",
                   help="skip the cross-domain guard (domain-consistent setting)")
    p.add_argument("--dump-activations", type=int, default=0, metavar="N",
                   help="write per-stage decoder activation PGMs for the first N samples")

    p = sub.add_parser("spectra", help="radial spectrum profiles of datasets")
    common(p)
    p.add_argument("manifests", nargs="*", help="dataset manifest files")

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("S2CP_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    args = _build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"paths.out={args.out}")
        if args.command == "train":
            if args.no_prm:
                overrides.append("model.prm=false")
            if args.no_oam:
                overrides.append("model.oam=false")
            if args.no_ssr:
                overrides.append("model.ssr=false")
        cfg = load_config(args.config, overrides)

        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.target_manifest,
                            allow_same_domain=args.allow_same_domain,
                            dump_activations=args.dump_activations)
        if args.command == "spectra":
            return cmd_spectra(cfg, args.manifests)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GuardError as exc:
        print(f"guard: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
