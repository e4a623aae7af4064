"""Command-line pipeline: synth, ingest, augment, train, eval, explain, analyze, report.

Every command reads one JSON config (``--config``), lets flags override
scalar fields, checks its inputs before writing anything, and writes
deterministic files under the output directory::

    corpus/    audio/*.wav, alignments/*.json, tracks/*.csv, manifest.jsonl, noise.wav
    splits/    train.jsonl, validation.jsonl, test.jsonl, train_augmented.jsonl
    augmented/ audio/*.wav, alignments/*.json
    model/     model.slrp, model.slrp.json, history.csv
    eval/      accuracy.csv
    explain/   <rule>/<source_id>.{csv,png,json}, index.csv
    analysis/  mu_table.csv, mu_<rule>.csv, feature_subsets.csv, residual_bands.csv, heatmaps/*.png
    report.md
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import corpus, dsp, lrp
from . import train as T
from .config import OUTPUT_DIR_ENV, PipelineConfig
from .errors import ConfigError, DependencyError, IngestError, StressLRPError, UndefinedRatioError
from .nn import network as N

logger = logging.getLogger("stresslrp")

SPLITS = ("train", "validation", "test")
AUGMENTED_MANIFEST = "train_augmented.jsonl"


# ---------------------------------------------------------------------------
# helpers


def _require(path: Path, what: str, hint: str):
    if not Path(path).exists():
        raise DependencyError(f"{what} not found at {path}; {hint}")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.9g}"
    return v


def _read_csv(path: Path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _write_png(path: Path, m: np.ndarray):
    from PIL import Image

    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m, dtype=np.float64) if hi == lo else (m - lo) / (hi - lo)
    img = np.round(scaled[::-1] * 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG", optimize=False, compress_level=6)


def _relocate(rows, src_dir: Path, dst_dir: Path) -> list:
    """Rewrite relative file paths in manifest rows from ``src_dir`` to ``dst_dir``."""
    out = []
    for row in rows:
        row = dict(row)
        for key in ("audio_path", "alignment_path"):
            p = Path(row[key])
            if not p.is_absolute():
                p = src_dir / p
            row[key] = os.path.relpath(p, dst_dir)
        out.append(row)
    return out


def _split_path(cfg: PipelineConfig, name: str) -> Path:
    return cfg.splits_dir / f"{name}.jsonl"


def _load_split(cfg: PipelineConfig, name: str, augmented: bool = False):
    """Windowed samples of one split plus each row's source-time word onset."""
    path = cfg.splits_dir / AUGMENTED_MANIFEST if augmented else _split_path(cfg, name)
    _require(path, f"{name} split", "run `stresslrp ingest` first")
    samples = corpus.load_manifest(path, cfg.dsp.word_window_s)
    onsets = [corpus.read_alignment(path.parent / r["alignment_path"]).word_start
              for r in corpus.read_manifest_rows(path)]
    return samples, onsets


def _load_model(cfg: PipelineConfig):
    _require(cfg.checkpoint_path, "checkpoint", "run `stresslrp train` first")
    _require(Path(str(cfg.checkpoint_path) + ".json"), "checkpoint sidecar", "run `stresslrp train` again")
    return T.load_checkpoint(cfg.checkpoint_path)


def _rule_dir(cfg: PipelineConfig, rule_name: str) -> Path:
    return cfg.output_dir / "explain" / rule_name


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: PipelineConfig) -> Path:
    """Write a synthetic corpus, its ground-truth feature tracks and a babble noise file."""
    n = cfg.synth.n_per_class
    tokens = corpus.synthetic_corpus(n, seed=cfg.seed, tokens_per_type=cfg.synth.tokens_per_type)
    root = cfg.corpus_dir
    for sub in ("audio", "alignments"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cfg.tracks_dir.mkdir(parents=True, exist_ok=True)
    cfg.manifest_path.parent.mkdir(parents=True, exist_ok=True)
    cfg.noise_path.parent.mkdir(parents=True, exist_ok=True)
    base = cfg.manifest_path.parent
    rows = []
    for tok in tokens:
        wav = root / "audio" / f"{tok.source_id}.wav"
        ali = root / "alignments" / f"{tok.source_id}.json"
        corpus.write_wav(wav, tok.clip)
        corpus.write_alignment(ali, tok.alignment)
        track = A.synthetic_track(tok.plan, tok.clip.samples, tok.clip.sample_rate)
        A.write_track_csv(cfg.tracks_dir / f"{tok.source_id}.csv", track)
        rows.append({"audio_path": os.path.relpath(wav, base), "alignment_path": os.path.relpath(ali, base),
                     "word_type": tok.word_type, "source_id": tok.source_id, "augmentation_tag": "none"})
    corpus.write_manifest(cfg.manifest_path, rows)
    corpus.write_wav(cfg.noise_path, corpus.synthesize_babble(cfg.seed))
    if n == 0:
        logger.warning("n_per_class is 0: wrote an empty manifest")
    logger.info("wrote %d samples to %s", len(rows), cfg.manifest_path)
    return cfg.manifest_path


def cmd_ingest(cfg: PipelineConfig) -> dict:
    """Validate the manifest and split it by word type into three manifests."""
    if not cfg.manifest_path.is_file():
        raise IngestError(f"manifest not found: {cfg.manifest_path}")
    samples = corpus.load_manifest(cfg.manifest_path, cfg.dsp.word_window_s)
    rows = corpus.read_manifest_rows(cfg.manifest_path)
    n_types = len({s.word_type for s in samples})
    sp = cfg.split
    if sp.train_types is None:
        counts = corpus.type_counts_from_fractions(n_types, sp.fractions)
    else:
        counts = (sp.train_types, sp.val_types, sp.test_types)
    split = corpus.split_by_word_type(samples, *counts, seed=cfg.seed)
    owner = {}
    for name in SPLITS:
        for s in getattr(split, name):
            owner[s.word_type] = name
    cfg.splits_dir.mkdir(parents=True, exist_ok=True)
    rows = _relocate(rows, cfg.manifest_path.parent, cfg.splits_dir)
    out = {}
    for name in SPLITS:
        part = [r for r in rows if owner[str(r["word_type"]).casefold()] == name]
        corpus.write_manifest(_split_path(cfg, name), part)
        out[name] = len(part)
    stale = cfg.splits_dir / AUGMENTED_MANIFEST
    if stale.exists():
        stale.unlink()
    logger.info("split %d samples over %d types: %s", len(samples), n_types, out)
    return out


def cmd_augment(cfg: PipelineConfig) -> int:
    """Add low-pass and three noise-mixed copies of every training sample."""
    train_path = _split_path(cfg, "train")
    _require(train_path, "train split", "run `stresslrp ingest` first")
    if not cfg.noise_path.is_file():
        raise ConfigError(f"noise file not found: {cfg.noise_path}")
    noise = corpus.read_wav(cfg.noise_path)
    if noise.sample_rate != corpus.SAMPLE_RATE:
        raise ConfigError(f"noise sample rate {noise.sample_rate} Hz, expected {corpus.SAMPLE_RATE} Hz")
    samples = corpus.load_manifest(train_path, cfg.dsp.word_window_s)
    rows = corpus.read_manifest_rows(train_path)
    root = cfg.output_dir / "augmented"
    for sub in ("audio", "alignments"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 7])
    new_rows = list(rows)
    for s in samples:
        offset = int(rng.integers(len(noise)))
        shifted_noise = corpus.AudioClip(np.roll(noise.samples, -offset), noise.sample_rate)
        variants = [("lowpass", dsp.lowpass(s.clip, cfg.dsp.lowpass_hz))]
        for snr in cfg.dsp.snr_db:
            variants.append((f"snr{snr:g}", dsp.mix_at_snr(s.clip, shifted_noise, snr)))
        for tag, clip in variants:
            if tag not in corpus.AUGMENTATION_TAGS:
                raise ConfigError(f"SNR level yields unsupported augmentation tag {tag!r}")
            stem = f"{s.source_id}__{tag}"
            wav = root / "audio" / f"{stem}.wav"
            ali = root / "alignments" / f"{stem}.json"
            corpus.write_wav(wav, clip)
            corpus.write_alignment(ali, s.alignment)
            new_rows.append({"audio_path": os.path.relpath(wav, cfg.splits_dir),
                             "alignment_path": os.path.relpath(ali, cfg.splits_dir),
                             "word_type": s.word_type, "source_id": s.source_id, "augmentation_tag": tag})
    corpus.write_manifest(cfg.splits_dir / AUGMENTED_MANIFEST, new_rows)
    logger.info("augmented %d training samples to %d rows", len(samples), len(new_rows))
    return len(new_rows)


def cmd_train(cfg: PipelineConfig, resume: bool = False):
    """Train the configured architecture and keep the best-validation weights."""
    augmented = (cfg.splits_dir / AUGMENTED_MANIFEST).is_file()
    train_s, _ = _load_split(cfg, "train", augmented=augmented)
    val_s, _ = _load_split(cfg, "validation")
    if resume:
        net, _, last_epoch, history = _load_model(cfg)
        start = last_epoch + 1
    else:
        net, history, start = N.build(cfg.architecture, seed=cfg.seed), None, 0
    if not augmented:
        logger.info("no augmented manifest found; training on the plain train split")
    split = corpus.DatasetSplit(train_s, val_s, [])
    best, history = T.train(net, split, cfg.train, history=history, start_epoch=start)
    cfg.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    T.save_checkpoint(cfg.checkpoint_path, best, cfg.train, start + cfg.train.epochs - 1, history)
    _write_csv(cfg.checkpoint_path.parent / "history.csv", ("epoch", "train_loss", "val_accuracy", "learning_rate"),
               [(k, l, a, r) for k, (l, a, r) in
                enumerate(zip(history.train_loss, history.val_accuracy, history.learning_rate))])
    return best, history


def cmd_eval(cfg: PipelineConfig) -> dict:
    """Accuracy of the checkpoint on every non-empty split."""
    for name in SPLITS:
        _require(_split_path(cfg, name), f"{name} split", "run `stresslrp ingest` first")
    net = _load_model(cfg)[0]
    out = {}
    for name in SPLITS:
        samples, _ = _load_split(cfg, name)
        if samples:
            out[name] = (len(samples), T.evaluate(net, samples))
    (cfg.output_dir / "eval").mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.output_dir / "eval" / "accuracy.csv", ("split", "n_samples", "accuracy"),
               [(k, n, acc) for k, (n, acc) in out.items()])
    return out


def cmd_explain(cfg: PipelineConfig) -> int:
    """Relevance maps for every sample of the configured split under each rule."""
    rules = [lrp.rule_from_name(r, cfg.lrp.epsilon) for r in cfg.lrp.rules]
    _require(_split_path(cfg, cfg.lrp.split), f"{cfg.lrp.split} split", "run `stresslrp ingest` first")
    net = N.canonize(_load_model(cfg)[0]).astype(np.float64)
    samples, _ = _load_split(cfg, cfg.lrp.split)
    index = []
    for rule in rules:
        _rule_dir(cfg, rule.name).mkdir(parents=True, exist_ok=True)
    for s in samples:
        logits, trace = N.forward(net, T.sample_features(s, np.float64))
        pred = int(np.argmax(logits))
        target = s.label if cfg.lrp.target == "label" else pred
        for rule in rules:
            rmap = lrp.relevance(trace, target, rule)
            lrp.export_map(rmap, _rule_dir(cfg, rule.name) / s.source_id)
            index.append((s.source_id, rule.name, s.label, pred, target, float(logits[target]), rmap.total))
    _write_csv(cfg.output_dir / "explain" / "index.csv",
               ("source_id", "rule", "label", "predicted", "target", "target_logit", "total_relevance"), index)
    logger.info("wrote %d relevance maps", len(index))
    return len(index)


def _explained_ids(cfg: PipelineConfig) -> list:
    path = cfg.output_dir / "explain" / "index.csv"
    _require(path, "relevance maps", "run `stresslrp explain` first")
    return _read_csv(path)


def cmd_analyze(cfg: PipelineConfig) -> dict:
    """Overlap ratios per rule, feature-subset correlations and residual bands."""
    index = _explained_ids(cfg)
    rules = sorted({row["rule"] for row in index}, key=lambda r: (r != cfg.analysis.rule, r))
    if cfg.analysis.rule not in rules:
        raise DependencyError(f"no maps for rule {cfg.analysis.rule!r}; add it to lrp.rules and rerun explain")
    samples, onsets = _load_split(cfg, cfg.lrp.split)
    by_id = {s.source_id: (s, t0) for s, t0 in zip(samples, onsets)}
    out_dir = cfg.output_dir / "analysis"
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)

    mu_rows, per_rule = [], {}
    for rule in rules:
        rows, skipped = [], 0
        for entry in index:
            if entry["rule"] != rule:
                continue
            s, _ = by_id[entry["source_id"]]
            m = lrp.read_map_csv(_rule_dir(cfg, rule) / f"{s.source_id}.csv")
            spec = dsp.stft_magnitude(s.clip)
            try:
                mus = A.region_mus(m, A.make_regions(s.alignment, spec))
            except UndefinedRatioError:
                skipped += 1
                continue
            rows.append((s.source_id, s.alignment.stress) + tuple(mus[t] for t in A.REGION_TAGS))
        _write_csv(out_dir / f"mu_{rule}.csv", ("source_id", "stress") + A.REGION_TAGS, rows)
        means = [float(np.mean([r[2 + k] for r in rows])) if rows else float("nan") for k in range(4)]
        per_rule[rule] = means
        mu_rows.append((rule, len(rows), skipped) + tuple(means) + (float(np.sum(means)),))
        if skipped:
            logger.warning("rule %s: %d maps without positive relevance skipped", rule, skipped)
    _write_csv(out_dir / "mu_table.csv", ("rule", "n_samples", "n_skipped") + A.REGION_TAGS + ("row_sum",), mu_rows)

    results, residuals, n_tracked = [], {c: [] for c in corpus.STRESS_CLASSES}, 0
    for k, entry in enumerate(e for e in index if e["rule"] == cfg.analysis.rule):
        s, onset = by_id[entry["source_id"]]
        track_path = cfg.tracks_dir / f"{s.source_id}.csv"
        if not track_path.is_file():
            logger.warning("no feature track for %s; skipping feature analysis", s.source_id)
            continue
        track = A.read_track_csv(track_path).shifted(-onset)
        m = lrp.read_map_csv(_rule_dir(cfg, cfg.analysis.rule) / f"{s.source_id}.csv")
        spec = dsp.stft_magnitude(s.clip)
        if np.maximum(m, 0).sum() == 0:
            continue
        res = A.analyze_sample(m, spec, s.alignment, track, cfg.analysis.permutations, cfg.seed + k,
                               cfg.analysis.tau, s.source_id)
        n_tracked += 1
        results.extend(res.correlations)
        if res.residual is not None and not res.residual.empty:
            residuals[s.alignment.stress].append(res.residual)
        _write_png(out_dir / "heatmaps" / f"{s.source_id}_features.png", A.feature_heatmap(track, A.FEATURES, spec))

    table = A.subset_table(results)
    _write_csv(out_dir / "feature_subsets.csv", ("subset", "mean_r", "mean_p", "n_samples"),
               [(A.subset_label(row.subset), row.mean_r, row.mean_p, row.n) for row in table])
    band_rows = []
    for stress, items in residuals.items():
        fr = [float(np.mean([x.fractions[b] for x in items])) if items else float("nan") for b in A.BANDS]
        band_rows.append((stress, len(items)) + tuple(fr))
    _write_csv(out_dir / "residual_bands.csv", ("stressed_vowel", "n_samples") + A.BANDS, band_rows)
    return {"mu": per_rule, "subsets": table, "n_tracked": n_tracked}


def _md_table(rows: list) -> list:
    if not rows:
        return ["(no rows)", ""]
    head = list(rows[0])
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    lines += ["| " + " | ".join(row[h] for h in head) + " |" for row in rows]
    return lines + [""]


def cmd_report(cfg: PipelineConfig) -> Path:
    """Collect the evaluation and analysis tables into one markdown file."""
    parts = {
        "Accuracy": cfg.output_dir / "eval" / "accuracy.csv",
        "Relevance inside regions (mu)": cfg.output_dir / "analysis" / "mu_table.csv",
        "Feature subsets": cfg.output_dir / "analysis" / "feature_subsets.csv",
        "Residual bands": cfg.output_dir / "analysis" / "residual_bands.csv",
    }
    for title, path in parts.items():
        _require(path, title.lower(), "run `stresslrp eval` and `stresslrp analyze` first")
    lines = ["# Stress classifier report", ""]
    for title, path in parts.items():
        lines += [f"## {title}", ""] + _md_table(_read_csv(path))
    out = cfg.output_dir / "report.md"
    out.write_text("\n".join(lines), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stresslrp", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="JSON pipeline configuration")
    p.add_argument("--output-dir", help=f"output directory (beats ${OUTPUT_DIR_ENV}, which beats the config file)")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--tokens-per-type", type=int)
    sub.add_parser("ingest", help="validate the manifest and split by word type")
    sub.add_parser("augment", help="add low-pass and noise-mixed training copies")
    s = sub.add_parser("train", help="train a classifier")
    s.add_argument("--architecture")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the saved checkpoint")
    sub.add_parser("eval", help="accuracy per split")
    s = sub.add_parser("explain", help="relevance maps")
    s.add_argument("--rules", help="comma-separated rule names")
    s = sub.add_parser("analyze", help="overlap, correlation and residual tables")
    s.add_argument("--permutations", type=int)
    s.add_argument("--tau", type=float)
    s.add_argument("--rule")
    sub.add_parser("report", help="summary markdown")
    return p


def config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    get = lambda name: getattr(args, name, None)  # noqa: E731
    rules = get("rules")
    merged = cfg.to_dict()
    over = {
        ("paths", "output_dir"): get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or None,
        ("synth", "n_per_class"): get("n_per_class"),
        ("synth", "tokens_per_type"): get("tokens_per_type"),
        ("train", "epochs"): get("epochs"),
        ("lrp", "rules"): tuple(r.strip() for r in rules.split(",") if r.strip()) if rules else None,
        ("analysis", "permutations"): get("permutations"),
        ("analysis", "tau"): get("tau"),
        ("analysis", "rule"): get("rule"),
    }
    for (sec, key), value in over.items():
        if value is not None:
            merged[sec][key] = value
    if get("architecture") is not None:
        merged["architecture"] = get("architecture")
    if get("seed") is not None:
        merged["seed"] = get("seed")
    return PipelineConfig.from_dict(merged)


COMMANDS = {
    "synth": lambda cfg, args: cmd_synth(cfg),
    "ingest": lambda cfg, args: cmd_ingest(cfg),
    "augment": lambda cfg, args: cmd_augment(cfg),
    "train": lambda cfg, args: cmd_train(cfg, resume=args.resume),
    "eval": lambda cfg, args: cmd_eval(cfg),
    "explain": lambda cfg, args: cmd_explain(cfg),
    "analyze": lambda cfg, args: cmd_analyze(cfg),
    "report": lambda cfg, args: cmd_report(cfg),
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg, args)
    except StressLRPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
