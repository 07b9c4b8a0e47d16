"""Command-line entry point: ``iidreid {synthesize,train,evaluate,reconstruct,analyze}``.

Settings come from built-in defaults, then the ``--config`` YAML file, then
command-line flags; later sources win.  Every JSON artifact carries the
resolved configuration's hash and the seed.
"""

import argparse
import hashlib
import json
import logging
import os
from pathlib import Path
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import yaml  # noqa: E402

from . import experiments  # noqa: E402
from .datasets import (  # noqa: E402
    load_dataset,
    make_toy_corpus,
    read_manifest,
    save_image,
    synthesize_dataset,
    write_dataset,
    write_manifest,
)
from .evalkit import (  # noqa: E402
    EvalProtocol,
    cmc_curve,
    cross_dataset_eval,
    evaluate_retrieval,
    extract,
    illumination_report,
    intra_inter_report,
    write_eval_report,
    write_per_query_csv,
)
from .exceptions import CheckpointError, ConfigurationError, InvalidParameterError  # noqa: E402
from .iidnet import ModelConfig, images_to_tensor, tensor_to_images  # noqa: E402
from .illumsynth import (  # noqa: E402
    PATCH_SIZES,
    SynthesisSpec,
    histogram_equalize,
    luminance_stats,
    scale_histogram,
    synthesize_arrays,
    synthesize_global,
)
from .trainer import PHASES, TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402

logger = logging.getLogger("iidreid")

EXPERIMENTS = (
    "standard",
    "ablation",
    "lambda_sweep",
    "cross_dataset",
    "low_light",
    "local_change",
    "ychannel",
    "he_baseline",
    "intra_inter",
    "illum_accuracy",
)


# ---------------------------------------------------------------------------
# configuration


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    cfg = yaml.safe_load(path.read_text()) or {}
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return cfg


def resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    if args.out is not None:
        cfg["out"] = args.out
    cfg.setdefault("out", "runs")
    return cfg


def config_hash(cfg):
    """Hash of the settings that determine numeric results (the output directory is not one)."""
    settings = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest()[:16]


def stamp(report, cfg):
    return {**report, "config_hash": config_hash(cfg), "seed": cfg["seed"]}


def train_config(cfg):
    """Training settings; toy runs start from the toy preset."""
    base = TrainConfig.toy() if cfg.get("toy") else TrainConfig()
    d = base.to_dict() | dict(cfg.get("train", {}))
    d["seed"] = cfg["seed"]
    d["loss"] = base.loss.to_dict() | dict(cfg.get("loss", {}))
    return TrainConfig.from_dict(d)


def model_config(cfg, data):
    overrides = dict(cfg.get("model", {}))
    n_ids = len(np.unique(data.identities))
    return ModelConfig.toy(n_ids, **{"image_size": data.image_shape, **overrides})


def eval_protocol(cfg):
    return EvalProtocol(**cfg.get("eval", {}))


def data_root(cfg):
    return cfg.get("data_root") or os.environ.get("IID_DATA_ROOT")


def _manifest_path(path, cfg):
    path = Path(path)
    root = data_root(cfg)
    if not path.is_absolute() and not path.exists() and root:
        path = Path(root) / path
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise ConfigurationError(f"manifest {path} does not exist")
    return path


def toy_corpus(cfg):
    """The toy corpus; a ``toy:`` mapping in the config passes corpus sizes."""
    kwargs = cfg["toy"] if isinstance(cfg.get("toy"), dict) else {}
    return make_toy_corpus(seed=cfg["seed"], **kwargs)


def get_data(cfg, which, flag_value=None):
    """Dataset named ``which`` ("base", "synth", ...) from a flag, the config or the toy corpus."""
    if cfg.get("toy") and flag_value is None:
        base = toy_corpus(cfg)
        if which == "base":
            return base
        return synthesize_dataset(base, SynthesisSpec(seed=cfg["seed"]), "toy-synth")
    path = flag_value or cfg.get("data", {}).get(which)
    if path is None:
        raise ConfigurationError(f"no {which} dataset: pass a manifest or use --toy")
    return load_dataset(_manifest_path(path, cfg))


def _out(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(report, path, cfg):
    write_eval_report(stamp(report, cfg), path)
    logger.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# synthesize


def cmd_synthesize(args, cfg):
    out = _out(cfg)
    overrides = dict(cfg.get("synthesis", {}))
    errors = []
    if args.toy or cfg.get("toy"):
        base = toy_corpus(cfg)
        if args.mode == "patch":
            overrides.setdefault("patch_sizes", scaled_patch_sizes(base.image_shape))
        spec = SynthesisSpec.for_mode(args.mode, seed=cfg["seed"], **overrides)
        write_dataset(base, out / "base")
        synth = synthesize_dataset(base, spec, "toy-synth")
        write_dataset(synth, out / "synth")
        labels, n = synth.illumination, len(base)
    else:
        manifest_path = _manifest_path(args.manifest or cfg.get("data", {}).get("base"), cfg)
        manifest = read_manifest(manifest_path)
        spec = SynthesisSpec.for_mode(args.mode, seed=cfg["seed"], **overrides)
        mask_root = args.masks or manifest_path.parent / "masks"
        records, errors = synthesize_global(
            manifest, spec, out / "synth", manifest_path.parent, mask_root
        )
        write_manifest(records, out / "synth" / "manifest.csv")
        labels, n = [r.illumination for r in records], len(manifest)
    hist = scale_histogram(labels, spec.n_scales)
    report = {
        "spec": spec.to_dict(),
        "n_input": n,
        "n_output": int(hist.sum()),
        "per_scale_counts": hist,
        "errors": errors,
    }
    _write_json(report, out / "synthesis_report.json", cfg)
    return 0


# ---------------------------------------------------------------------------
# train


def _write_metrics(state, path):
    with Path(path).open("w") as fh:
        for rec in state.metrics_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args, cfg):
    out = _out(cfg)
    data = get_data(cfg, args.dataset, args.data).select("train")
    if len(data) == 0:
        raise ConfigurationError("the dataset has no train split")
    phases = [p.strip() for p in args.phases.split(",") if p.strip()]
    bad = set(phases) - set(PHASES)
    if bad:
        raise InvalidParameterError(f"unknown phases {sorted(bad)}")
    state = load_checkpoint(args.resume) if args.resume else None
    config, variant_phases = experiments.variant_config(args.variant, train_config(cfg))
    if state is None:
        phases = [p for p in phases if p in variant_phases]
        if phases and phases[0] != "I":
            raise ConfigurationError(f"phase {phases[0]} needs a phase-I checkpoint (--resume)")
    else:
        config = state.config

    def checkpoint(st):
        save_checkpoint(st, out / "checkpoint.pt")

    state = train(
        data, config, phases, state=state, model_config=model_config(cfg, data), on_epoch_end=checkpoint
    )
    save_checkpoint(state, out / "checkpoint.pt")
    _write_metrics(state, out / "metrics.jsonl")
    report = {
        "variant": args.variant,
        "completed_phases": state.completed_phases,
        "steps": state.step,
        "final": state.metrics_log[-1] if state.metrics_log else None,
        "train_config": state.config.to_dict(),
    }
    _write_json(report, out / "train_report.json", cfg)
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _held_out(data):
    return data.subset(np.flatnonzero(data.split != "train"))


def _model(args):
    if not args.checkpoint:
        raise ConfigurationError("this experiment needs --checkpoint")
    return load_checkpoint(args.checkpoint).model


def _models_from_dir(args, cfg, names, train_fn):
    """Checkpoint ``<dir>/<name>.pt`` per name; missing ones are trained with ``--train-missing``."""
    ckpt_dir = Path(args.checkpoints or _out(cfg) / "checkpoints")
    missing = [n for n in names if not (ckpt_dir / f"{n}.pt").exists()]
    if missing and not args.train_missing:
        raise ConfigurationError(
            f"missing checkpoints in {ckpt_dir}: {', '.join(missing)} (or pass --train-missing)"
        )
    models = {}
    for name in names:
        path = ckpt_dir / f"{name}.pt"
        if path.exists():
            models[name] = load_checkpoint(path).model
        else:
            state = train_fn(name)
            save_checkpoint(state, path)
            models[name] = state.model
    return models


def _bar_chart(labels, values, ylabel, path, title=None):
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels)), 3.5))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _line_chart(x, series, xlabel, ylabel, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(x, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _eval_modified(model, data, transform, protocol):
    test = _held_out(data)
    return evaluate_retrieval(model, test.with_images(transform(test)), protocol)


def scaled_patch_sizes(image_shape, reference=(128, 64)):
    """Default patch sizes rescaled from the reference image size to ``image_shape``."""
    h, w = image_shape
    return tuple(
        (max(1, ph * h // reference[0]), max(1, pw * w // reference[1])) for ph, pw in PATCH_SIZES
    )


def run_experiment(name, args, cfg):
    """Run one named evaluation; returns ``(report, plots)`` where plots are written paths."""
    out = _out(cfg)
    protocol = eval_protocol(cfg)
    tcfg = train_config(cfg)
    plots = []

    if name == "standard":
        data = get_data(cfg, args.dataset, args.data)
        report, ranking = evaluate_retrieval(_model(args), data, protocol, return_ranking=True)
        write_per_query_csv(ranking, out / "per_query.csv")
        curve = cmc_curve(ranking, 20)
        report["cmc_curve"] = curve
        _line_chart(np.arange(1, 21), {"model": curve}, "rank", "CMC", out / "cmc.png")
        plots.append(out / "cmc.png")
        return report, plots

    if name == "ablation":
        data = get_data(cfg, args.dataset, args.data)
        mc = model_config(cfg, data.select("train"))
        models = _models_from_dir(
            args,
            cfg,
            experiments.ABLATION_ORDER,
            lambda v: experiments.train_variant(data.select("train"), v, tcfg, mc),
        )
        report = {v: evaluate_retrieval(m, data, protocol) for v, m in models.items()}
        _bar_chart(list(report), [r["mAP"] for r in report.values()], "mAP", out / "ablation.png")
        plots.append(out / "ablation.png")
        return report, plots

    if name == "lambda_sweep":
        data = get_data(cfg, args.dataset, args.data)
        train_split = data.select("train")
        mc = model_config(cfg, train_split)
        names = {f"lambda_{l3:g}_{l4:g}": (l3, l4) for l3, l4 in experiments.LAMBDA_GRID}

        def fit(key):
            l3, l4 = names[key]
            loss = {**tcfg.loss.to_dict(), "lambda3": l3, "lambda4": l4}
            c = TrainConfig.from_dict({**tcfg.to_dict(), "loss": loss})
            return train(train_split, c, PHASES, model_config=mc)

        models = _models_from_dir(args, cfg, list(names), fit)
        rows = [
            {"lambda3": l3, "lambda4": l4, **evaluate_retrieval(models[k], data, protocol)}
            for k, (l3, l4) in names.items()
        ]
        _bar_chart(list(names), [r["mAP"] for r in rows], "mAP", out / "lambda_sweep.png")
        plots.append(out / "lambda_sweep.png")
        return {"grid": rows}, plots

    if name == "cross_dataset":
        base = get_data(cfg, "base", args.base)
        synth = get_data(cfg, "synth", args.data)
        datasets = {"base": base, "synth": synth}
        models = _models_from_dir(
            args,
            cfg,
            ["base", "synth"],
            lambda k: experiments.train_variant(
                datasets[k].select("train"), "baseline", tcfg, model_config(cfg, datasets[k].select("train"))
            ),
        )
        report = cross_dataset_eval(models, datasets, protocol)
        _bar_chart(list(report), [r["mAP"] for r in report.values()], "mAP", out / "cross_dataset.png")
        plots.append(out / "cross_dataset.png")
        return report, plots

    model = _model(args)
    data = get_data(cfg, args.dataset, args.data)

    if name == "low_light":
        rows = experiments.low_light(model, data)
        _line_chart(
            [r["gamma"] for r in rows],
            {"CMC-1": [r["cmc1"] for r in rows], "mAP": [r["mAP"] for r in rows]},
            "darkening gamma",
            "score",
            out / "low_light.png",
        )
        plots.append(out / "low_light.png")
        return {"sweep": rows}, plots

    if name == "he_baseline":
        report = {
            "raw": evaluate_retrieval(model, _held_out(data), protocol),
            "equalized": _eval_modified(
                model, data, lambda d: np.stack([histogram_equalize(im) for im in d.images]), protocol
            ),
        }
        return report, plots

    if name in ("local_change", "ychannel"):
        modes = ("foreground", "patch") if name == "local_change" else ("ychannel",)
        report = {}
        for mode in modes:
            spec = SynthesisSpec.for_mode(
                mode, seed=cfg["seed"], patch_sizes=scaled_patch_sizes(data.image_shape)
            )
            if mode == "foreground" and data.masks is None:
                raise ConfigurationError("foreground changes need segmentation masks")
            report[mode] = _eval_modified(
                model, data, lambda d, s=spec: synthesize_arrays(d.images, s, d.masks)[0], protocol
            )
        return report, plots

    if name == "intra_inter":
        return intra_inter_report(model, _held_out(data), protocol), plots

    if name == "illum_accuracy":
        report = illumination_report(model, _held_out(data), model.config.n_scales)
        per = report["mean_prediction_per_scale"]
        _line_chart(sorted(per), {"mean prediction": [per[k] for k in sorted(per)]},
                    "true scale", "predicted scale", out / "illum_accuracy.png")
        plots.append(out / "illum_accuracy.png")
        return report, plots

    raise InvalidParameterError(f"unknown experiment {name!r}")


def cmd_evaluate(args, cfg):
    out = _out(cfg)
    report, plots = run_experiment(args.experiment, args, cfg)
    report = {
        "experiment": args.experiment,
        "protocol": eval_protocol(cfg).to_dict(),
        "results": report,
        "plots": [str(p) for p in plots],
    }
    _write_json(report, out / "eval_report.json", cfg)
    return 0


# ---------------------------------------------------------------------------
# reconstruct


@torch.no_grad()
def mean_illumination_features(model, data, n_scales):
    f_i = extract(model, data.images)["f_I"]
    means = []
    for s in range(n_scales):
        sel = data.illumination == s
        if not sel.any():
            raise ConfigurationError(f"no training image at illumination scale {s}")
        means.append(f_i[sel].mean(axis=0))
    return np.stack(means)


@torch.no_grad()
def reconstruction_strip(model, image, scale_features):
    """``[x, x_hat, G(f_P, mean f_I of scale 0), ...]`` as uint8 images."""
    dtype = next(model.parameters()).dtype
    model.eval()
    x = images_to_tensor(image[None], dtype)
    f_p, f_i = model.embed(model.encode(x))
    codes = torch.as_tensor(scale_features, dtype=dtype)
    x_hat = model.generate(f_p, f_i)
    strip = model.generate(f_p.expand(len(codes), -1), codes)
    return [image, *tensor_to_images(torch.cat([x_hat, strip]))]


@torch.no_grad()
def identity_preservation(model, strips):
    """Fraction of strip reconstructions whose predicted identity matches that of ``x_hat``."""
    dtype = next(model.parameters()).dtype
    agree = total = 0
    for strip in strips:
        f_p = torch.as_tensor(extract(model, np.stack(strip[1:]))["f_P"], dtype=dtype)
        pred = model.identity_logits(f_p).argmax(dim=1).numpy()
        agree += int((pred[1:] == pred[0]).sum())
        total += len(pred) - 1
    return agree / total


def cmd_reconstruct(args, cfg):
    out = _out(cfg)
    state = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if state is None:
        raise ConfigurationError("reconstruct needs --checkpoint")
    if "II" not in state.completed_phases:
        raise ConfigurationError("reconstruct needs a checkpoint with a trained generator (phase II)")
    model = state.model
    data = get_data(cfg, args.dataset, args.data)
    feats = mean_illumination_features(model, data.select("train"), model.config.n_scales)
    probe_pool = _held_out(data) if (data.split != "train").any() else data
    idx = [args.index] if args.index is not None else list(range(min(args.n_probes, len(probe_pool))))
    strips = [reconstruction_strip(model, probe_pool.images[i], feats) for i in idx]
    grid = np.concatenate([np.concatenate(s, axis=1) for s in strips], axis=0)
    save_image(grid, out / "reconstruction.png")
    report = {
        "n_probes": len(strips),
        "grid_width": len(strips[0]),
        "identity_preservation": identity_preservation(model, strips),
    }
    _write_json(report, out / "reconstruct_report.json", cfg)
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args, cfg):
    out = _out(cfg)
    if args.toy or cfg.get("toy"):
        base = toy_corpus(cfg)
        sets = {"base": base, "synth": synthesize_dataset(base, SynthesisSpec(seed=cfg["seed"]))}
    else:
        manifests = args.manifests or list(cfg.get("data", {}).values())
        if not manifests:
            raise ConfigurationError("analyze needs at least one manifest or --toy")
        sets = {}
        for m in manifests:
            path = _manifest_path(m, cfg)
            sets[path.parent.name] = load_dataset(path)
    stats = {name: luminance_stats(d.images) for name, d in sets.items()}
    for name, s in stats.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(s["per_image"], bins=40, range=(0, 255), color="tab:gray")
        ax.set_xlabel("mean luminance")
        ax.set_ylabel("images")
        ax.set_title(name)
        fig.tight_layout()
        fig.savefig(out / f"luminance_{name}.png", dpi=100)
        plt.close(fig)
    _bar_chart(list(stats), [s["variance"] for s in stats.values()], "luminance variance",
               out / "luminance_variance.png")
    report = {name: {"mean": s["mean"], "variance": s["variance"], "n_images": len(s["per_image"])}
              for name, s in stats.items()}
    if "base" in stats and "synth" in stats:
        report["synth_variance_exceeds_base"] = stats["synth"]["variance"] > stats["base"]["variance"]
    _write_json(report, out / "analysis_report.json", cfg)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--toy", action="store_true", help="use the bundled toy corpus")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="iidreid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="build an illumination-varied dataset")
    p.add_argument("--manifest", help="base corpus manifest")
    p.add_argument("--masks", help="directory of foreground masks")
    p.add_argument("--mode", default="global", choices=["global", "foreground", "patch", "ychannel"])
    p.set_defaults(func=cmd_synthesize)

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("--data", help="dataset manifest (or directory holding manifest.csv)")
    data_args.add_argument("--dataset", default="synth", help="config data key when --data is absent")

    p = sub.add_parser("train", parents=[common, data_args], help="run training phases")
    p.add_argument("--phases", default="I,II,III")
    p.add_argument("--variant", default="full", choices=sorted(experiments.VARIANTS))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, data_args], help="run an evaluation protocol")
    p.add_argument("--experiment", default="standard", choices=EXPERIMENTS)
    p.add_argument("--checkpoint", help="model checkpoint for single-model experiments")
    p.add_argument("--checkpoints", help="directory of <name>.pt checkpoints for multi-model experiments")
    p.add_argument("--train-missing", action="store_true", help="train absent multi-model checkpoints")
    p.add_argument("--base", help="base (unsynthesized) manifest for cross_dataset")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", parents=[common, data_args], help="re-light images via f_I swaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, help="held-out image to reconstruct")
    p.add_argument("--n-probes", type=int, default=8)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", parents=[common], help="luminance statistics of datasets")
    p.add_argument("manifests", nargs="*")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(max(1, min(torch.get_num_threads(), os.cpu_count() or 1)))
    try:
        cfg = resolve_config(args)
        if args.toy and not cfg.get("toy"):
            cfg["toy"] = True
        return args.func(args, cfg)
    except (ConfigurationError, CheckpointError, InvalidParameterError, OSError) as exc:
        print(f"iidreid {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
