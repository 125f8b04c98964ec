"""Command-line entry point: protect, profile-hqs, inspect-attention, evaluate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from disdiff.attack import run_disdiff
from disdiff.attention import AggregatedMaps, aggregate, relative_energy, smooth_all
from disdiff.backend import ToyBackend, load_adapter, load_weights, sample_noise, save_weights
from disdiff.config import RunConfig, load_config
from disdiff.errors import ConfigurationError, DisDiffError, InvalidInputError, RunAborted
from disdiff.evaluation import ToyDetector, ToyEmbedder, evaluate
from disdiff.hqs import profile
from disdiff.imageio import list_images, load_dir, make_fixture, read_image, write_image

log = logging.getLogger("disdiff")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
STEP_COLUMNS = ("epoch", "step", "t", "h", "skipped", "diffusion", "cae", "energy", "total")
HEATMAP_SCALE = 8


def _setup_logging():
    level = os.environ.get("DISDIFF_LOG", "info").lower()
    if level not in ("debug", "info"):
        level = "info"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "backend", None) is not None:
        changes["backend"] = args.backend
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = Path(args.out)
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
    return cfg


def _require(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if value is None:
        raise ConfigurationError(f"config needs '{key}'")
    return Path(value)


def build_backend(cfg: RunConfig):
    if cfg.backend == "adapter":
        return load_adapter(cfg.adapter)
    if cfg.backend_weights is not None:
        return load_weights(cfg.backend_weights)
    return ToyBackend.create(cfg.attack.seed)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items() if not isinstance(v, np.ndarray)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_steps(path: Path, steps) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_COLUMNS)
        for s in steps:
            w.writerow(
                [s["epoch"], s["step"], " ".join(str(t) for t in s["t"]), repr(s["h"]), str(s["skipped"]).lower()]
                + [repr(float(s[k])) for k in STEP_COLUMNS[5:]]
            )


def cmd_protect(args) -> int:
    cfg = _config(args)
    out = _require(cfg, "output_dir")
    in_paths, protect = load_dir(_require(cfg, "input_dir"))
    _, clean = load_dir(_require(cfg, "clean_dir"))
    class_set = []
    if cfg.class_dir is not None:
        _, class_set = load_dir(cfg.class_dir)
    if not protect:
        raise ConfigurationError(f"no PNG images in {cfg.input_dir}")
    backend = build_backend(cfg)

    out.mkdir(parents=True, exist_ok=True)
    img_dir = out / "protected"
    img_dir.mkdir(exist_ok=True)
    log.info("protecting %d images for %d epochs", len(protect), cfg.attack.epochs)
    try:
        result = run_disdiff(
            backend, clean, protect, cfg.prompt_spec(), cfg.attack, class_set=class_set, class_prompt=cfg.class_prompt
        )
    except RunAborted as exc:
        partial = exc.partial or {}
        so_far = partial.get("protected_so_far")
        if so_far is not None:
            for p, img in zip(in_paths, so_far):
                write_image(img_dir / p.name, img)
        _write_json(out / "report.json", {"run": cfg.to_dict(), "images": [p.name for p in in_paths], **partial})
        _write_steps(out / "steps.csv", partial.get("steps", []))
        log.error("%s", exc)
        return EXIT_FAILED

    for p, img in zip(in_paths, result.protected):
        write_image(img_dir / p.name, img)
    report = {"run": cfg.to_dict(), "images": [p.name for p in in_paths], **result.report}
    _write_json(out / "report.json", report)
    _write_steps(out / "steps.csv", result.report["steps"])
    if isinstance(result.backend, ToyBackend):
        save_weights(result.backend, out / "surrogate.bin")
    log.info("wrote %d protected images to %s", len(in_paths), img_dir)
    return EXIT_OK


def _first_image(cfg: RunConfig, explicit) -> Path:
    if explicit:
        return Path(explicit)
    paths = list_images(_require(cfg, "input_dir"))
    if not paths:
        raise ConfigurationError(f"no PNG images in {cfg.input_dir}")
    return paths[0]


def _heatmap(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    top = g.max()
    g = g / top if top > 0 else g
    g = np.kron(g, np.ones((HEATMAP_SCALE, HEATMAP_SCALE)))
    return np.repeat(g[..., None], 3, axis=-1)


def _token_maps(backend, image, prompt, t, eps, resolution, kernel):
    state = backend.add_noise(backend.encode(image), t, eps)
    with torch.no_grad():
        bundle = backend.predict_noise(state, prompt).attention
    return smooth_all(aggregate(bundle, resolution), kernel).maps.detach().numpy()


def cmd_profile_hqs(args) -> int:
    cfg = _config(args)
    out = _require(cfg, "output_dir")
    image = read_image(_first_image(cfg, args.image))
    backend = build_backend(cfg)
    prompt = cfg.prompt_spec()
    term = args.term or cfg.hqs_term
    result = profile(
        backend,
        image,
        prompt,
        term=term,
        lam=cfg.attack.lam,
        seed=cfg.attack.seed,
        resolution=cfg.attack.resolution,
        kernel=cfg.attack.kernel,
        reduction=cfg.attack.adv_reduction,
    )
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "hqs.csv")
    if args.heatmaps:
        hm = out / "hqs_heatmaps"
        hm.mkdir(exist_ok=True)
        rng = np.random.default_rng(cfg.attack.seed)
        resolution = cfg.attack.resolution or backend.default_resolution
        for t in result.timesteps:
            eps = sample_noise(rng, backend.latent_shape)
            maps = _token_maps(backend, image, prompt, int(t), eps, resolution, cfg.attack.kernel)
            write_image(hm / f"t{int(t):04d}_{prompt.subject_token}.png", _heatmap(maps[prompt.subject_index]))
    log.info("wrote %d-row profile to %s", len(result.timesteps), out / "hqs.csv")
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    cfg = _config(args)
    out = _require(cfg, "output_dir")
    image = read_image(_first_image(cfg, args.image))
    backend = build_backend(cfg)
    prompt = cfg.prompt_spec()
    timesteps = args.t or [backend.T // 2]
    for t in timesteps:
        if not 0 <= t <= backend.T:
            raise ConfigurationError(f"timestep {t} outside [0, {backend.T}]")
    resolution = cfg.attack.resolution or backend.default_resolution
    eps = sample_noise(np.random.default_rng(cfg.attack.seed), backend.latent_shape)

    out.mkdir(parents=True, exist_ok=True)
    per_t = {}
    for t in timesteps:
        per_t[f"t{t:04d}"] = _token_maps(backend, image, prompt, t, eps, resolution, cfg.attack.kernel)
    if args.mean and len(timesteps) > 1:
        per_t["mean"] = np.mean(list(per_t.values()), axis=0)
    for label, maps in per_t.items():
        d = out / label
        d.mkdir(exist_ok=True)
        for i, tok in enumerate(prompt.tokens):
            write_image(d / f"{i:02d}_{_safe(tok)}.png", _heatmap(maps[i]))
        report = relative_energy(AggregatedMaps(maps, prompt.tokens), prompt.subject_index)
        with (d / "energy.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["token", "index", "energy", "relative_energy"])
            for i, tok in enumerate(prompt.tokens):
                w.writerow([tok, i, repr(float(report.energies[i])), repr(float(report.relative[i]))])
    log.info("wrote attention maps for t=%s to %s", timesteps, out)
    return EXIT_OK


def _safe(token: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in token) or "_"


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _require(cfg, "output_dir")
    generated = Path(args.generated) if args.generated else _require(cfg, "input_dir")
    clean = Path(args.clean) if args.clean else _require(cfg, "clean_dir")
    detector = ToyDetector(tau=args.tau) if args.tau is not None else ToyDetector()
    report = evaluate(generated, clean, detector, ToyEmbedder())
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval.json")
    log.info("fdfr=%.4f ism=%s n=%d", report.fdfr, report.ism, report.n)
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    out = Path(args.out or ".")
    dirs = make_fixture(out, n_clean=args.n, n_protect=args.n, n_class=args.n, seed=args.seed or 0)
    for name, d in dirs.items():
        log.info("%s: %s", name, d)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--backend", choices=("toy", "adapter"), help="override the config backend")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("protect", help="compute protective perturbations for input_dir")
    common(p, config_required=True)
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("profile-hqs", help="per-timestep gradient quality profile")
    common(p, config_required=True)
    p.add_argument("--image", help="image to profile (default: first image in input_dir)")
    p.add_argument("--term", choices=("diffusion", "cae", "combined"), help="loss whose gradient is profiled")
    p.add_argument("--heatmaps", action="store_true", help="also write the subject-token map per timestep")
    p.set_defaults(func=cmd_profile_hqs)

    p = sub.add_parser("inspect-attention", help="per-token cross-attention heatmaps and energies")
    common(p)
    p.add_argument("--image", help="image to inspect (default: first image in input_dir)")
    p.add_argument("--t", type=int, action="append", help="diffusion timestep; repeat for several")
    p.add_argument("--mean", action="store_true", help="also write maps averaged over the given timesteps")
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("evaluate", help="face detection failure rate and identity similarity")
    common(p)
    p.add_argument("--generated", help="directory of generated images")
    p.add_argument("--clean", help="directory of clean reference images")
    p.add_argument("--tau", type=float, help="toy detector variance threshold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-fixture", help="write a seeded toy image set (clean/protect/class)")
    p.add_argument("--out", help="target directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=4, help="images per split")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except InvalidInputError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    except DisDiffError as exc:
        log.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
