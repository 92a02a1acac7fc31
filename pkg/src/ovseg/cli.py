"""Command-line entry point: config resolution, subcommands, artifacts.

Numeric modules are imported lazily inside handlers so `--threads` can pin
the BLAS thread environment before numpy loads. Every run directory is keyed
by a hash of the configuration (minus output location and thread count) and
carries `resolved_config.json`, checkpoints, logs, and reports.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import (
    ConfigError,
    RunConfig,
    apply_override,
    canonical_json,
    config_hash,
    parse_config,
    to_dict,
    validate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class MissingArtifactError(FileNotFoundError):
    """A required checkpoint or dataset has not been produced yet."""


def _set_thread_env(threads: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovseg",
        description="Open-vocabulary segmentation experiments on a synthetic shapes benchmark.",
    )
    parser.add_argument("--config", help="JSON config file; omitted means all defaults")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path override, e.g. data.n_train=100 (repeatable)",
    )
    parser.add_argument("--threads", type=int, help="BLAS/worker thread cap (default 1)")
    parser.add_argument("--ensemble-lambda", type=float, help="geometric ensemble weight in [0,1]")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate the two-domain synthetic datasets")
    sub.add_parser("pretrain", help="contrastively pretrain the image-text model on captions")
    sub.add_parser("select-prompt", help="pick the best hand-crafted template on seen regions")
    sub.add_parser("tune-prompt", help="train learnable prompt tokens on seen regions")
    sub.add_parser("train-proposals", help="train the query-based mask proposal model")
    sub.add_parser("train-fcn", help="train the per-pixel baseline classifier")
    seg = sub.add_parser("segment", help="segment validation images and export label maps")
    seg.add_argument("--domain", choices=("a", "b"), default="a")
    seg.add_argument("--limit", type=int, default=0, help="max images (0 = all)")
    sub.add_parser("self-train", help="pseudo-label ignore pixels and retrain proposals")
    ev = sub.add_parser("eval", help="run evaluation protocols and write reports")
    ev.add_argument(
        "--protocol",
        choices=("zero-shot", "cross-dataset", "oracle", "all"),
        default="zero-shot",
    )
    ab = sub.add_parser("ablate", help="run an ablation axis and write its table")
    ab.add_argument(
        "--axis",
        choices=("strategy", "prompt", "fill", "sw", "proposals", "all"),
        default="all",
    )
    return parser


def _resolve_config(args) -> RunConfig:
    config = parse_config(args.config, args.set)
    if args.ensemble_lambda is not None:
        apply_override(config, f"ensemble_lambda={args.ensemble_lambda}")
    if args.threads is not None:
        config.threads = args.threads
    validate(config)
    return config


def _prepare_run_dir(config: RunConfig) -> Path:
    root = Path(os.environ.get("OVSEG_OUT") or config.output_dir)
    run_dir = root / config_hash(config)
    for sub in ("checkpoints", "logs", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved_config.json").write_text(canonical_json(to_dict(config)))
    return run_dir


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}; run `ovseg {producer}` first")
    return path


def _load_domain(run_dir: Path, name: str):
    from .data import load_dataset

    _require(run_dir / "data" / name / "vocab.json", "gen-data")
    return load_dataset(run_dir / "data" / name)


def _load_model(run_dir: Path):
    from .vlm import load_vlm

    return load_vlm(_require(run_dir / "checkpoints" / "vlm.json", "pretrain"))


def _crop_config(config: RunConfig, train_scenes):
    from .classify import CropConfig, dataset_mean_rgb

    return CropConfig(
        threshold=config.crop.threshold,
        expand=config.crop.expand,
        fill=config.crop.fill,
        size=config.crop.size,
        mean_rgb=dataset_mean_rgb(train_scenes),
    )


def _class_embeddings(model, names: list[str], run_dir: Path):
    """Full-vocabulary embedding matrix from the best available prompt source."""
    from .prompts import DEFAULT_TEMPLATES, build_class_embeddings, load_learned_prompt

    learned = run_dir / "checkpoints" / "learned_prompt.json"
    if learned.exists():
        return build_class_embeddings(model, names, load_learned_prompt(learned)), "learned"
    selected = run_dir / "checkpoints" / "prompts.json"
    if selected.exists():
        doc = json.loads(selected.read_text())
        template = doc["templates"][doc["selected"]]
        return build_class_embeddings(model, names, template), f"template:{template}"
    return build_class_embeddings(model, names, DEFAULT_TEMPLATES[0]), f"template:{DEFAULT_TEMPLATES[0]}"


def _prompt_samples(config: RunConfig, ds, run_dir: Path):
    """Seen-class region samples from the training scenes, with labels."""
    from .prompts import prepare_prompt_samples

    seen = list(ds.split.seen)
    crop_cfg = _crop_config(config, ds.train)
    samples, warnings = prepare_prompt_samples(
        ds.train, seen, crop_cfg, config.prompts.samples_per_class, config.prompts.seed
    )
    if not samples:
        raise ConfigError("no seen-class regions found in the training scenes")
    return samples, warnings, seen


def _build_pipeline(config: RunConfig, run_dir: Path, ds, model, checkpoint: str, strategy: str, fill: str | None = None):
    import numpy as np

    from .proposals import load_query_model
    from .segment import SegPipeline
    from .vlm import embedding_checksum

    embs, _ = _class_embeddings(model, ds.vocab.names, run_dir)
    qm = load_query_model(_require(run_dir / "checkpoints" / checkpoint, "train-proposals"))
    if embedding_checksum(embs[qm.class_indices]) != qm.embed_checksum:
        raise ConfigError(
            f"{checkpoint} was trained with different class embeddings; rerun train-proposals"
        )
    crop_cfg = _crop_config(config, ds.train)
    if fill is not None:
        crop_cfg.fill = fill
    return SegPipeline(model, qm, np.asarray(embs), crop_cfg, config.ensemble_lambda, strategy)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args, config: RunConfig, run_dir: Path) -> int:
    from .data import GenConfig, domain_b_config, generate_dataset, make_split, save_dataset

    gen_a = GenConfig(image_size=config.data.image_size)
    vocab = gen_a.vocabulary()
    split = make_split(vocab, config.data.n_unseen, config.data.thing_stuff_ratio, config.seed)
    ds_a = generate_dataset(
        gen_a, split, config.data.n_train, config.data.n_val, config.seed, mask_train=True
    )
    ds_b = generate_dataset(
        domain_b_config(gen_a), split, 1, config.data.n_val, config.seed + 1, mask_train=False
    )
    ds_b.train = []  # domain B is evaluation-only
    save_dataset(ds_a, run_dir / "data" / "domain_a")
    save_dataset(ds_b, run_dir / "data" / "domain_b")
    _write_json(
        run_dir / "logs" / "gen_data.json",
        {
            "n_train": len(ds_a.train),
            "n_val": len(ds_a.val),
            "n_val_b": len(ds_b.val),
            "vocab_size": len(vocab),
            "seen": list(split.seen),
            "unseen": list(split.unseen),
        },
    )
    print(f"wrote {len(ds_a.train)}+{len(ds_a.val)} domain-A and {len(ds_b.val)} domain-B scenes")
    return EXIT_OK


def cmd_pretrain(args, config: RunConfig, run_dir: Path) -> int:
    import numpy as np

    from .prompts import DEFAULT_TEMPLATES
    from .vlm import PretrainConfig, pretrain_vlm, retrieval_top1, save_vlm, vision_features

    ds = _load_domain(run_dir, "domain_a")
    features = np.stack([vision_features(s.image.as_float()) for s in ds.train])
    captions = [s.caption for s in ds.train]
    cfg = PretrainConfig(
        steps=config.vlm.steps,
        batch_size=config.vlm.batch_size,
        lr=config.vlm.lr,
        momentum=config.vlm.momentum,
        seed=config.vlm.seed,
    )
    model, log = pretrain_vlm(features, captions, ds.vocab.names, cfg, list(DEFAULT_TEMPLATES))
    log["retrieval_top1"] = retrieval_top1(model, features[:64], captions[:64])
    save_vlm(model, run_dir / "checkpoints" / "vlm.json")
    _write_json(run_dir / "logs" / "pretrain.json", log)
    print(f"pretrained: probe loss {log['initial_probe_loss']:.3f} -> {log['final_probe_loss']:.3f}")
    return EXIT_OK


def cmd_select_prompt(args, config: RunConfig, run_dir: Path) -> int:
    import numpy as np

    from .prompts import PromptSet, crop_embeddings, select_template

    ds = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    samples, warnings, seen = _prompt_samples(config, ds, run_dir)
    embs = crop_embeddings(model, samples)
    labels = np.array([seen.index(s.class_index) for s in samples])
    names = [ds.vocab.names[i] for i in seen]
    best, accuracies = select_template(model, PromptSet(), embs, labels, names)
    doc = {
        "templates": list(PromptSet().templates),
        "selected": best,
        "accuracies": [float(a) for a in accuracies],
        "warnings": warnings,
    }
    _write_json(run_dir / "checkpoints" / "prompts.json", doc)
    print(f"selected template {best}: {doc['templates'][best]!r} ({accuracies[best]:.3f})")
    return EXIT_OK


def cmd_tune_prompt(args, config: RunConfig, run_dir: Path) -> int:
    import numpy as np

    from .prompts import (
        PromptTrainConfig,
        build_class_embeddings,
        crop_embeddings,
        save_learned_prompt,
        train_learned_prompt,
    )

    ds = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    samples, warnings, seen = _prompt_samples(config, ds, run_dir)
    embs = crop_embeddings(model, samples)
    labels = np.array([seen.index(s.class_index) for s in samples])
    names = [ds.vocab.names[i] for i in seen]
    cfg = PromptTrainConfig(
        m=config.prompts.m,
        samples_per_class=config.prompts.samples_per_class,
        steps=config.prompts.steps,
        lr=config.prompts.lr,
        momentum=config.prompts.momentum,
        batch_size=config.prompts.batch_size,
        seed=config.prompts.seed,
    )
    prompt, log = train_learned_prompt(model, embs, labels, names, cfg)
    save_learned_prompt(prompt, run_dir / "checkpoints" / "learned_prompt.json")
    selected = run_dir / "checkpoints" / "prompts.json"
    if selected.exists():
        doc = json.loads(selected.read_text())
        template_embs = build_class_embeddings(model, names, doc["templates"][doc["selected"]])
        preds = np.argmax(embs @ template_embs.T, axis=1)
        log["selected_template_accuracy"] = float((preds == labels).mean())
    log["warnings"] = warnings
    _write_json(run_dir / "logs" / "tune_prompt.json", log)
    print(f"learned prompt train accuracy {log['train_accuracy']:.3f}")
    return EXIT_OK


def cmd_train_proposals(args, config: RunConfig, run_dir: Path) -> int:
    from .proposals import QueryTrainConfig, pixel_features, save_query_model, train_query_model

    ds = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    embs, tag = _class_embeddings(model, ds.vocab.names, run_dir)
    seen = list(ds.split.seen)
    items = [(pixel_features(s.image.as_float()), s.gt.labels.ravel()) for s in ds.train]
    cfg = QueryTrainConfig(
        n_queries=config.query.n_queries,
        steps=config.query.steps,
        batch_size=config.query.batch_size,
        lr=config.query.lr,
        momentum=config.query.momentum,
        seed=config.query.seed,
    )
    qm, log = train_query_model(items, embs[seen], seen, cfg)
    log["embeddings"] = tag
    save_query_model(qm, run_dir / "checkpoints" / "query_model.json")
    _write_json(run_dir / "logs" / "train_proposals.json", log)
    print(f"proposal model: loss {log['first_batch_loss']:.3f} -> {log['last_batch_loss']:.3f}")
    return EXIT_OK


def cmd_train_fcn(args, config: RunConfig, run_dir: Path) -> int:
    from .proposals import pixel_features
    from .segment import FCNTrainConfig, save_fcn, train_fcn

    ds = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    embs, tag = _class_embeddings(model, ds.vocab.names, run_dir)
    seen = list(ds.split.seen)
    items = [(pixel_features(s.image.as_float()), s.gt.labels.ravel()) for s in ds.train]
    cfg = FCNTrainConfig(
        steps=config.fcn.steps,
        batch_size=config.fcn.batch_size,
        lr=config.fcn.lr,
        momentum=config.fcn.momentum,
        seed=config.fcn.seed,
    )
    params, log = train_fcn(items, embs[seen], seen, cfg)
    log["embeddings"] = tag
    save_fcn(params, run_dir / "checkpoints" / "fcn.json")
    _write_json(run_dir / "logs" / "train_fcn.json", log)
    print(f"pixel baseline: loss {log['first_batch_loss']:.3f} -> {log['last_batch_loss']:.3f}")
    return EXIT_OK


def cmd_segment(args, config: RunConfig, run_dir: Path) -> int:
    from .segment import save_label_map, save_overlay, segment_image

    domain = "domain_a" if args.domain == "a" else "domain_b"
    ds_a = _load_domain(run_dir, "domain_a")
    ds = ds_a if args.domain == "a" else _load_domain(run_dir, "domain_b")
    model = _load_model(run_dir)
    pipeline = _build_pipeline(config, run_dir, ds_a, model, "query_model.json", "ensemble")
    out = run_dir / "outputs" / domain
    out.mkdir(parents=True, exist_ok=True)
    scenes = ds.val if args.limit <= 0 else ds.val[: args.limit]
    all_warnings = []
    for scene in scenes:
        seg, _, warnings = segment_image(pipeline, scene.image.as_float(), scene.scene_id)
        save_label_map(seg.labels, out / f"{scene.scene_id}.pgm")
        save_overlay(scene.image.as_float(), seg.labels, out / f"{scene.scene_id}.ppm")
        all_warnings.extend(warnings)
    _write_json(run_dir / "logs" / "segment.json", {"count": len(scenes), "warnings": all_warnings})
    print(f"segmented {len(scenes)} {domain} scenes into {out}")
    return EXIT_OK


def cmd_self_train(args, config: RunConfig, run_dir: Path) -> int:
    from .proposals import QueryTrainConfig, save_query_model
    from .segment import self_train

    ds = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    pipeline = _build_pipeline(config, run_dir, ds, model, "query_model.json", "ensemble")
    cfg = QueryTrainConfig(
        n_queries=config.query.n_queries,
        steps=config.query.steps,
        batch_size=config.query.batch_size,
        lr=config.query.lr,
        momentum=config.query.momentum,
        seed=config.query.seed,
    )
    retrained, log = self_train(
        pipeline,
        ds.train,
        list(ds.split.unseen),
        cfg,
        threshold=config.self_train.confidence,
        rounds=config.self_train.rounds,
    )
    save_query_model(retrained.query_model, run_dir / "checkpoints" / "query_model_st.json")
    _write_json(run_dir / "logs" / "self_train.json", log)
    print(f"self-training relabeled {sum(log['relabeled'])} pixels over {log['rounds']} round(s)")
    return EXIT_OK


def _load_summary(run_dir: Path) -> dict:
    path = run_dir / "reports" / "summary.json"
    return json.loads(path.read_text()) if path.exists() else {}


def _report_rows(section: dict, keys=("miou_all", "miou_seen", "miou_unseen", "hiou", "pacc")):
    def fmt(d, key):
        return "-" if key not in d else f"{d[key]:.1f}"

    return [[name] + [fmt(d, k) for k in keys] for name, d in section.items()]


def _write_report_md(run_dir: Path, summary: dict) -> None:
    from .evaluation import markdown_table

    parts = ["# Results\n"]
    headers = ["variant", "mIoU", "mIoU-seen", "mIoU-unseen", "hIoU", "pAcc"]
    for section, title in (
        ("zero_shot", "Zero-shot (domain A)"),
        ("cross_dataset", "Cross-dataset (domain B)"),
        ("oracle", "Oracle-assigned proposals"),
        ("ablate_strategy", "Ablation: region classification strategy"),
        ("ablate_fill", "Ablation: crop background fill"),
        ("ablate_sw", "Ablation: baseline inference"),
        ("ablate_proposals", "Ablation: proposal source (oracle mIoU)"),
    ):
        if section not in summary:
            continue
        rows = _report_rows({k: v for k, v in summary[section].items() if isinstance(v, dict)})
        parts.append(f"## {title}\n\n" + markdown_table(headers, rows))
    if "ablate_prompt" in summary:
        block = summary["ablate_prompt"]
        rows = [[name, f"{acc:.4f}"] for name, acc in block["unseen_accuracy"].items()]
        parts.append(
            "## Ablation: prompt source (held-out region accuracy, unseen classes)\n\n"
            + markdown_table(["prompt", "accuracy"], rows)
        )
    (run_dir / "reports" / "report.md").write_text("\n".join(parts))


def _evaluate_to_report(segmenter, scenes, vocab, split):
    from .evaluation import compute_report, evaluate_segmenter

    cm = evaluate_segmenter(segmenter, scenes, len(vocab))
    return compute_report(cm, vocab, split), cm


def cmd_eval(args, config: RunConfig, run_dir: Path) -> int:
    from .evaluation import (
        fcn_segmenter,
        oracle_segmenter,
        two_stage_segmenter,
        write_metrics_csv,
    )
    from .segment import load_fcn
    from .vlm import embedding_checksum

    ds_a = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    vocab, split = ds_a.vocab, ds_a.split
    pipeline = _build_pipeline(config, run_dir, ds_a, model, "query_model.json", "ensemble")
    summary = _load_summary(run_dir)
    protocols = ("zero-shot", "cross-dataset", "oracle") if args.protocol == "all" else (args.protocol,)
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    if "zero-shot" in protocols:
        section = {}
        report, _ = _evaluate_to_report(two_stage_segmenter(pipeline), ds_a.val, vocab, split)
        section["two_stage"] = report.scaled()
        write_metrics_csv(report, vocab, reports_dir / "metrics_zero_shot.csv")
        fcn = load_fcn(_require(run_dir / "checkpoints" / "fcn.json", "train-fcn"))
        if embedding_checksum(pipeline.class_embs[fcn.class_indices]) != fcn.embed_checksum:
            raise ConfigError("fcn.json was trained with different class embeddings; rerun train-fcn")
        lam = config.ensemble_lambda
        variants = {
            "fcn": fcn_segmenter(fcn, pipeline.class_embs),
            "fcn_sw": fcn_segmenter(
                fcn, pipeline.class_embs, (model, config.sw.window, config.sw.stride, lam)
            ),
            "fcn_whole": fcn_segmenter(
                fcn, pipeline.class_embs, (model, config.data.image_size, config.sw.stride, lam)
            ),
        }
        for name, segmenter in variants.items():
            rep, _ = _evaluate_to_report(segmenter, ds_a.val, vocab, split)
            section[name] = rep.scaled()
        st_path = run_dir / "checkpoints" / "query_model_st.json"
        if st_path.exists():
            st_pipe = _build_pipeline(config, run_dir, ds_a, model, "query_model_st.json", "ensemble")
            rep, _ = _evaluate_to_report(two_stage_segmenter(st_pipe), ds_a.val, vocab, split)
            section["two_stage_st"] = rep.scaled()
        section["embed_checksum_query"] = pipeline.query_model.embed_checksum
        section["embed_checksum_fcn"] = fcn.embed_checksum
        summary["zero_shot"] = section

    if "cross-dataset" in protocols:
        ds_b = _load_domain(run_dir, "domain_b")
        section = {}
        report, _ = _evaluate_to_report(two_stage_segmenter(pipeline), ds_b.val, vocab, split)
        section["two_stage"] = report.scaled()
        write_metrics_csv(report, vocab, reports_dir / "metrics_cross_dataset.csv")
        summary["cross_dataset"] = section

    if "oracle" in protocols:
        ds_b = _load_domain(run_dir, "domain_b")
        qm = pipeline.query_model
        section = {}
        for name, scenes in (("domain_a", ds_a.val), ("domain_b", ds_b.val)):
            rep, _ = _evaluate_to_report(oracle_segmenter(qm, len(vocab)), scenes, vocab, split)
            section[name] = rep.scaled()
        summary["oracle"] = section

    _write_json(reports_dir / "summary.json", summary)
    _write_report_md(run_dir, summary)
    for proto in protocols:
        key = proto.replace("-", "_")
        if key in summary and "two_stage" in summary[key]:
            print(f"{proto}: two-stage mIoU {summary[key]['two_stage']['miou_all']:.1f}")
        elif key in summary:
            print(f"{proto}: done")
    return EXIT_OK


def cmd_ablate(args, config: RunConfig, run_dir: Path) -> int:
    import numpy as np

    from .classify import collect_region_samples
    from .evaluation import fcn_segmenter, two_stage_segmenter
    from .prompts import DEFAULT_TEMPLATES, build_class_embeddings, load_learned_prompt
    from .segment import load_fcn

    ds_a = _load_domain(run_dir, "domain_a")
    model = _load_model(run_dir)
    vocab, split = ds_a.vocab, ds_a.split
    summary = _load_summary(run_dir)
    axes = ("strategy", "prompt", "fill", "sw", "proposals") if args.axis == "all" else (args.axis,)

    if "strategy" in axes:
        section = {}
        for strategy in ("A", "B", "ensemble"):
            pipe = _build_pipeline(config, run_dir, ds_a, model, "query_model.json", strategy)
            rep, _ = _evaluate_to_report(two_stage_segmenter(pipe), ds_a.val, vocab, split)
            section[strategy] = rep.scaled()
        summary["ablate_strategy"] = section

    if "prompt" in axes:
        crop_cfg = _crop_config(config, ds_a.train)
        unseen = list(split.unseen)
        samples = collect_region_samples(ds_a.val, unseen, crop_cfg)
        if not samples:
            raise ConfigError("validation scenes contain no unseen-class regions")
        crop_embs = np.stack([model.encode_vision(s.crop.pixels) for s in samples])
        labels = np.array([s.class_index for s in samples])
        accuracy = {}
        for template in DEFAULT_TEMPLATES:
            embs = build_class_embeddings(model, vocab.names, template)
            accuracy[template] = float((np.argmax(crop_embs @ embs.T, axis=1) == labels).mean())
        learned_path = run_dir / "checkpoints" / "learned_prompt.json"
        prompt = load_learned_prompt(_require(learned_path, "tune-prompt"))
        embs = build_class_embeddings(model, vocab.names, prompt)
        accuracy["learned"] = float((np.argmax(crop_embs @ embs.T, axis=1) == labels).mean())
        best_template = max((v for k, v in accuracy.items() if k != "learned"), default=0.0)
        summary["ablate_prompt"] = {
            "unseen_accuracy": accuracy,
            "best_template_accuracy": best_template,
            "n_samples": len(samples),
        }

    if "fill" in axes:
        section = {}
        for fill in ("preserve", "zero", "mean"):
            pipe = _build_pipeline(config, run_dir, ds_a, model, "query_model.json", "ensemble", fill)
            rep, _ = _evaluate_to_report(two_stage_segmenter(pipe), ds_a.val, vocab, split)
            section[fill] = rep.scaled()
        summary["ablate_fill"] = section

    if "sw" in axes:
        embs, _ = _class_embeddings(model, vocab.names, run_dir)
        fcn = load_fcn(_require(run_dir / "checkpoints" / "fcn.json", "train-fcn"))
        lam = config.ensemble_lambda
        section = {}
        variants = {
            "fcn": None,
            "fcn_whole": (model, config.data.image_size, config.sw.stride, lam),
            "fcn_sw": (model, config.sw.window, config.sw.stride, lam),
        }
        for name, sw in variants.items():
            rep, _ = _evaluate_to_report(fcn_segmenter(fcn, embs, sw), ds_a.val, vocab, split)
            section[name] = rep.scaled()
        summary["ablate_sw"] = section

    if "proposals" in axes:
        summary["ablate_proposals"] = _proposal_source_ablation(config, run_dir, ds_a, model)

    _write_json(run_dir / "reports" / "summary.json", summary)
    _write_report_md(run_dir, summary)
    print(f"ablations written: {', '.join(axes)}")
    return EXIT_OK


def _proposal_source_ablation(config: RunConfig, run_dir: Path, ds_a, model) -> dict:
    from .evaluation import compute_report, evaluate_segmenter, oracle_score_map
    from .proposals import felz_partition, hierarchical_proposals, load_query_model, propose
    from .segment import argmax_segmentation

    qm = load_query_model(_require(run_dir / "checkpoints" / "query_model.json", "train-proposals"))
    k = len(ds_a.vocab)

    def query_oracle(scene):
        props = propose(qm, scene.image.as_float(), scene.scene_id)
        return argmax_segmentation(oracle_score_map(props, scene.gt, k)).labels

    def merged_oracle(scene):
        img = scene.image.as_float()
        partition = felz_partition(img, config.felz.k, config.felz.min_size)
        props = hierarchical_proposals(partition, img, scene.scene_id)
        return argmax_segmentation(oracle_score_map(props, scene.gt, k)).labels

    section = {}
    for name, segmenter in (("query", query_oracle), ("hierarchical", merged_oracle)):
        cm = evaluate_segmenter(segmenter, ds_a.val, k)
        section[name] = compute_report(cm, ds_a.vocab, ds_a.split).scaled()
    return section


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "select-prompt": cmd_select_prompt,
    "tune-prompt": cmd_tune_prompt,
    "train-proposals": cmd_train_proposals,
    "train-fcn": cmd_train_fcn,
    "segment": cmd_segment,
    "self-train": cmd_self_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _set_thread_env(config.threads)

    from .data import InvalidConfigError
    from .evaluation import UndefinedMetricError
    from .proposals import DivergenceError as QueryDivergenceError
    from .vlm import DivergenceError as VLMDivergenceError

    try:
        run_dir = _prepare_run_dir(config)
        return _COMMANDS[args.command](args, config, run_dir)
    except (ConfigError, InvalidConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (
        QueryDivergenceError,
        VLMDivergenceError,
        UndefinedMetricError,
        FloatingPointError,
        ZeroDivisionError,
        OverflowError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
