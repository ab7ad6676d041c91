"""Command-line entry point: ``cagan <command> ...``.

Commands: ``prepare``, ``train``, ``synthesize``, ``evaluate``, ``curves``,
``gen-synthetic``. Every command writes the fully resolved run configuration
to ``run_config.json`` in its output directory. Failures exit non-zero
(2 for file-system errors, 1 otherwise) after printing one
``error: code=<Name> message=<json string>`` line to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import (
    Manifest,
    ManifestEntry,
    PadRecord,
    binarize,
    load_mask_set,
    load_samples,
    read_manifest,
    read_mask_pngs,
    read_png,
    renormalize_masks,
    save_image,
    write_fixture_dataset,
    write_manifest,
    write_mask_pngs,
    write_png,
    zero_pad,
    to_unit_range,
)
from .errors import CAGANError, ConfigError, DataError
from .metrics import (
    FlattenEmbedder,
    ProjectionEmbedder,
    embed_set,
    fid_from_embeddings,
    metric_report,
    read_feature_file,
    recognition_protocol,
)
from .trainer import (
    TrainConfig,
    init_state,
    load_checkpoint,
    read_loss_log,
    save_checkpoint,
    smooth_curve,
    synthesize,
    train,
    write_loss_log,
)

log = logging.getLogger("cagan")

TRAIN_DEFAULTS = {
    "data.manifest": None,
    "out_dir": "runs/train",
    "checkpoint_every": 0,
    "resume": None,
}


def write_run_config(out_dir, command: str, settings: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, "settings": settings}
    (out / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def parse_override(token: str) -> tuple[str, object]:
    key, sep, raw = token.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {token!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_train_config(config_file, overrides) -> tuple[dict, TrainConfig]:
    """Merge defaults, the flat dotted-key JSON file and ``key=value`` overrides."""
    settings = dict(TRAIN_DEFAULTS)
    settings.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items()})
    if config_file:
        with open(config_file) as fh:
            from_file = json.load(fh)
        if not isinstance(from_file, dict):
            raise ConfigError(f"{config_file}: config must be a flat JSON object")
        settings.update(from_file)
    settings.update(dict(parse_override(t) for t in overrides))
    unknown = [k for k in settings if k not in TRAIN_DEFAULTS and not k.startswith("train.")]
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    train_cfg = TrainConfig.from_dict({k[len("train."):]: v for k, v in settings.items() if k.startswith("train.")})
    return settings, train_cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _parse_size(text: str) -> tuple[int, int]:
    h, _, w = text.lower().partition("x")
    return int(h), int(w or h)


def cmd_prepare(args) -> None:
    manifest = read_manifest(args.manifest)
    out = Path(args.out)
    target_h, target_w = _parse_size(args.pad_to)
    entries = []
    for e in manifest.entries:
        photo = read_png(manifest.resolve(e.photo), 3)
        sketch = read_png(manifest.resolve(e.sketch), 1)
        masks = read_mask_pngs(manifest.resolve(e.mask_prefix))
        if args.binarize:
            soft, _ = renormalize_masks(masks)
            masks = (binarize(soft) * 255).astype(np.uint8)
        photo, rec = zero_pad(photo, target_h, target_w, "image")
        sketch, _ = zero_pad(sketch, target_h, target_w, "image")
        masks, _ = zero_pad(masks, target_h, target_w, "mask")
        if e.pad is not None:
            # already padded once: keep pointing at the original region
            prev = PadRecord.from_dict(e.pad)
            rec = PadRecord(prev.top + rec.top, prev.left + rec.left, prev.height, prev.width)
        rel = {"photo": f"photos/{e.id}.png", "sketch": f"sketches/{e.id}.png", "mask_prefix": f"masks/{e.id}"}
        write_png(out / rel["photo"], photo)
        write_png(out / rel["sketch"], sketch)
        write_mask_pngs(out / rel["mask_prefix"], masks)
        pads = out / "pads"
        pads.mkdir(parents=True, exist_ok=True)
        (pads / f"{e.id}.json").write_text(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        entries.append(ManifestEntry(e.id, rel["photo"], rel["sketch"], rel["mask_prefix"], e.split, e.source,
                                     rec.to_dict()))
    write_manifest(out / "manifest.jsonl", Manifest(entries, out))
    write_run_config(out, "prepare", {"manifest": str(args.manifest), "pad_to": [target_h, target_w],
                                      "binarize": args.binarize, "out": str(out)})
    print(f"prepared {len(entries)} entries into {out}")


def cmd_train(args) -> None:
    config, overrides = args.config, list(args.overrides)
    if config and "=" in config and not Path(config).is_file():
        # no config file given; the first token is an override
        config, overrides = None, [config] + overrides
    settings, cfg = resolve_train_config(config, overrides)
    if not settings["data.manifest"]:
        raise ConfigError("data.manifest is required")
    out = Path(settings["out_dir"])
    write_run_config(out, "train", settings)
    manifest = read_manifest(settings["data.manifest"])
    state = None
    if settings["resume"]:
        state = load_checkpoint(settings["resume"], expected=cfg)
        state.cfg = cfg
        log.info("resumed from %s at iteration %d", settings["resume"], state.iteration)
    every = int(settings["checkpoint_every"] or 0)
    if every:
        samples = load_samples(manifest, split="train")
        state = state or init_state(cfg)
        while state.epoch < cfg.epochs:
            target = min(cfg.epochs, (state.epoch // every + 1) * every)
            state = train(TrainConfig.from_dict({**cfg.to_dict(), "epochs": target}), samples, state)
            state.cfg = cfg
            save_checkpoint(state, out / f"epoch_{state.epoch:04d}")
    else:
        state = train(cfg, manifest, state)
    ckpt = save_checkpoint(state, out / "checkpoint")
    write_loss_log(state, out / "log.csv")
    print(f"trained {state.iteration} iterations; checkpoint at {ckpt}")


def cmd_synthesize(args) -> None:
    state = load_checkpoint(args.checkpoint)
    cfg = state.cfg
    source = to_unit_range(read_png(args.photo, cfg.source_channels))
    masks = load_mask_set(args.masks, cfg.components)
    if source.shape[:2] != masks.shape[:2]:
        raise DataError(f"image {source.shape[:2]} and masks {masks.shape[:2]} differ in size")
    size = cfg.image_size
    record = None
    if source.shape[:2] != (size, size):
        source, record = zero_pad(source, size, size, "image")
        masks, _ = zero_pad(masks, size, size, "mask")
    if args.pad_record:
        record = PadRecord.from_dict(json.loads(Path(args.pad_record).read_text()))
    out_img = synthesize(state, source, masks)
    if record is not None:
        out_img = record.crop(out_img)
    out = Path(args.out)
    save_image(out, out_img)
    write_run_config(out.parent, "synthesize", {"checkpoint": str(args.checkpoint), "photo": str(args.photo),
                                                "masks": str(args.masks), "pad_record": args.pad_record,
                                                "out": str(out), "train_config": cfg.to_dict()})
    print(f"wrote {out} ({out_img.shape[0]}x{out_img.shape[1]})")


def _load_dir(directory) -> dict[str, np.ndarray]:
    from PIL import Image

    images = {}
    for p in sorted(Path(directory).glob("*.png")):
        with Image.open(p) as im:
            channels = 1 if im.mode in ("L", "1", "I", "I;16") else 3
        images[p.stem] = to_unit_range(read_png(p, channels))
    if not images:
        raise DataError(f"no PNG images in {directory}")
    return images


def cmd_evaluate(args) -> None:
    real = _load_dir(args.real_dir)
    synth = _load_dir(args.synth_dir)
    if set(real) != set(synth):
        missing = sorted(set(real) ^ set(synth))
        raise DataError(f"real and synthesized sets differ in ids, e.g. {missing[:5]}")
    ids = sorted(real)
    if args.embedder == "features":
        if not (args.real_features and args.synth_features):
            raise ConfigError("--embedder features needs --real-features and --synth-features")
        real_emb, synth_emb = read_feature_file(args.real_features), read_feature_file(args.synth_features)
        embedder_id = f"{real_emb.embedder_id}|{synth_emb.embedder_id}"
    else:
        embedder = (ProjectionEmbedder(args.embed_dim, seed=args.seed) if args.embedder == "projection"
                    else FlattenEmbedder())
        real_emb = embed_set([real[i] for i in ids], embedder)
        synth_emb = embed_set([synth[i] for i in ids], embedder)
        embedder_id = real_emb.embedder_id
    fid = fid_from_embeddings(real_emb, synth_emb)
    nlda = None
    if args.nlda:
        nlda = recognition_protocol([synth[i] for i in ids], ids, [real[i] for i in ids], ids,
                                    repeats=args.repeats, seed=args.seed, fit_fraction=args.fit_fraction)
    config = {"real_dir": str(args.real_dir), "synth_dir": str(args.synth_dir), "embedder": args.embedder,
              "embed_dim": args.embed_dim, "nlda": args.nlda, "repeats": args.repeats, "seed": args.seed,
              "fit_fraction": args.fit_fraction, "n_images": len(ids)}
    report = metric_report(fid, nlda, embedder_id, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_run_config(out.parent, "evaluate", config)
    print(json.dumps({"fid": fid, "nlda": nlda.mean if nlda else None}))


def cmd_curves(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = read_loss_log(args.log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    smoothed = {key: smooth_curve(vals, args.window) for key, vals in sorted(series.items())}
    with open(out / "curves.csv", "w") as fh:
        fh.write("block,first_iteration,stage,loss,value\n")
        for (stage, name), vals in smoothed.items():
            for b, v in enumerate(vals):
                fh.write(f"{b},{b * args.window},{stage},{name},{v!r}\n")
    panels = sorted({name for _, name in smoothed})
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2), squeeze=False)
    for ax, name in zip(axes[0], panels):
        for (stage, n), vals in smoothed.items():
            if n == name:
                ax.plot(np.arange(len(vals)) * args.window, vals, label=f"stage {stage}")
        ax.set_title(name)
        ax.set_xlabel("iteration")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100)
    plt.close(fig)
    write_run_config(out, "curves", {"log": str(args.log), "window": args.window, "out": str(out)})
    print(f"wrote {out / 'curves.csv'} and {out / 'curves.png'}")


def cmd_gen_synthetic(args) -> None:
    manifest = write_fixture_dataset(args.out, args.n, args.size, args.seed, args.train_ratio)
    write_run_config(args.out, "gen-synthetic", {"n": args.n, "size": args.size, "seed": args.seed,
                                                 "train_ratio": args.train_ratio, "out": str(args.out)})
    print(f"wrote {len(manifest)} samples to {args.out}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagan", description="Composition-aided GAN toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="pad images and masks to a fixed size")
    p.add_argument("manifest")
    p.add_argument("--pad-to", required=True, help="N or HxW")
    p.add_argument("--binarize", action="store_true", help="convert masks to hard labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train CA-GAN / SCA-GAN")
    p.add_argument("config", nargs="?", help="flat JSON config with dotted keys")
    p.add_argument("overrides", nargs="*", help="key=value overrides, e.g. train.epochs=5")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="translate one image with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("photo", help="source image (photo, or sketch for sketch2photo)")
    p.add_argument("masks", help="mask prefix (<prefix>.c0.png ...)")
    p.add_argument("--out", required=True)
    p.add_argument("--pad-record", help="JSON pad record used to crop the output")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="FID and NLDA recognition")
    p.add_argument("real_dir")
    p.add_argument("synth_dir")
    p.add_argument("--embedder", choices=("projection", "flatten", "features"), default="projection")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--real-features")
    p.add_argument("--synth-features")
    p.add_argument("--nlda", action="store_true")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--fit-fraction", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="metrics.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curves", help="smooth a loss log and plot it")
    p.add_argument("log")
    p.add_argument("--window", type=int, default=40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("gen-synthetic", help="write a procedural fixture dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-ratio", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except OSError as exc:
        target = getattr(exc, "filename", None) or ""
        print(f"error: code={type(exc).__name__} file={json.dumps(str(target))} message={json.dumps(str(exc))}",
              file=sys.stderr)
        return 2
    except (CAGANError, ValueError, KeyError) as exc:
        print(f"error: code={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
