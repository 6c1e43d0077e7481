"""Experiment orchestration: features, training, conversion, evaluation.

A run executes five stages per seed — conversion-feature statistics, FVAE
training, corpus normalization, HMM-VAE training, evaluation — with every
stage cached on disk and resumable. The "clean" condition bypasses the
conversion model entirely; "rec" reconstructs each utterance with its own
style; "vc" converts everything to the corpus style medoid.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import fvae as fvae_mod
from . import hmmvae as hmm_mod
from .config import ExperimentConfig
from .dataio import CorpusManifest, ManifestError, UtteranceRecord, load_manifest, load_waveform
from .features import (
    AUD_BANDS,
    VC_BANDS,
    CorpusNormStats,
    LogMelSpectrogram,
    POWER_FLOOR,
    compute_logmel_aud,
    compute_logmel_vc,
    compute_norm_stats,
    finish_aud_features,
    load_feature,
    mel_filterbank,
    normalize_per_band,
    save_feature,
)
from .metrics import boundary_fscore, cluster_purity, frame_confusion, nmi
from .normalizer import (
    StyleTable,
    checkpoint_hash,
    extract_styles,
    find_style_medoid,
    load_converted_feature,
    normalize_corpus,
)
from .segments import (
    label_vocabulary,
    read_segments,
    segments_to_boundaries,
    segments_to_frame_labels,
    write_segments,
)

logger = logging.getLogger(__name__)

__all__ = ["ExperimentRunner", "run_experiment", "report", "StageError"]


class StageError(RuntimeError):
    """A pipeline stage failed; earlier stage outputs remain on disk."""


class FeatureCache:
    """Disk cache of per-utterance features; recompute only on miss."""

    def __init__(self, directory: Path, compute_fn):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.compute_fn = compute_fn

    def path(self, utterance_id: str) -> Path:
        return self.directory / f"{utterance_id}.npz"

    def get(self, record: UtteranceRecord) -> LogMelSpectrogram:
        path = self.path(record.utterance_id)
        if path.exists():
            return load_feature(path)
        feat = self.compute_fn(record)
        save_feature(path, feat)
        return feat


def mel_regroup_matrix() -> np.ndarray:
    """Least-squares map from 80-band to 40-band mel power (feature route)."""
    w80 = mel_filterbank(VC_BANDS)
    w40 = mel_filterbank(AUD_BANDS)
    # solve R @ w80 ~= w40 row-wise
    r_t, *_ = np.linalg.lstsq(w80.T, w40.T, rcond=None)
    return r_t.T


class ExperimentRunner:
    """All stages of one (condition, seed) run, cached under one directory."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.seed = seed
        self.run_dir = Path(config.output_dir) / f"{config.condition}_seed{seed}"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.status_path = self.run_dir / "status.json"
        self.status = self._load_status()
        self._manifests: dict[str, CorpusManifest] = {}

    # ---- bookkeeping -----------------------------------------------------

    def _load_status(self) -> dict:
        if self.status_path.exists():
            return json.loads(self.status_path.read_text())
        return {"stages": {}}

    def _mark_done(self, stage: str) -> None:
        self.status["stages"][stage] = True
        self.status_path.write_text(json.dumps(self.status, indent=2))

    def _is_done(self, stage: str) -> bool:
        return bool(self.status["stages"].get(stage))

    def aud_manifest(self, language: str) -> CorpusManifest:
        if language not in self._manifests:
            path = self.config.aud_manifests[language]
            self._manifests[language] = load_manifest(path, name=language)
        return self._manifests[language]

    def vc_training_manifest(self) -> CorpusManifest:
        """Pooled multilingual training set: the VC corpus plus all AUD sets."""
        records: list[UtteranceRecord] = []
        seen: set[str] = set()
        sources = []
        if self.config.vc_train_manifest is not None:
            sources.append(load_manifest(self.config.vc_train_manifest, name="vc_train"))
        sources.extend(self.aud_manifest(lang) for lang in sorted(self.config.aud_manifests))
        for manifest in sources:
            for record in manifest.records:
                if record.utterance_id in seen:
                    raise ManifestError(
                        f"utterance_id {record.utterance_id!r} appears in more than "
                        "one training manifest"
                    )
                seen.add(record.utterance_id)
                records.append(record)
        return CorpusManifest("vc_pool", records)

    # ---- paths -----------------------------------------------------------

    @property
    def norm_stats_path(self) -> Path:
        return self.run_dir / "norm_stats.npz"

    @property
    def fvae_checkpoint_path(self) -> Path:
        return self.run_dir / "fvae" / "checkpoint.pt"

    def style_table_path(self, language: str) -> Path:
        return self.run_dir / "styles" / f"{language}.txt"

    def medoid_path(self, language: str) -> Path:
        return self.run_dir / "styles" / f"{language}_medoid.json"

    def converted_dir(self, language: str) -> Path:
        return self.run_dir / "converted" / language

    def aud_feature_dir(self, language: str) -> Path:
        return self.run_dir / "aud_features" / language

    def hmm_checkpoint_path(self, language: str) -> Path:
        return self.run_dir / "hmmvae" / f"{language}.pt"

    def transcription_path(self, language: str) -> Path:
        return self.run_dir / "transcriptions" / f"{language}.txt"

    def metrics_path(self, language: str) -> Path:
        return self.run_dir / "metrics" / f"{language}.json"

    # ---- conversion-model stages ------------------------------------------

    def _vc_feature_cache(self, stats: CorpusNormStats) -> FeatureCache:
        def compute(record: UtteranceRecord) -> LogMelSpectrogram:
            feat = compute_logmel_vc(load_waveform(record), record.utterance_id)
            return normalize_per_band(feat, stats)

        return FeatureCache(self.run_dir / "features_vc", compute)

    def stage_norm_stats(self) -> CorpusNormStats:
        if self.config.condition == "clean":
            raise StageError("the clean condition has no conversion stages")
        if self.norm_stats_path.exists():
            return CorpusNormStats.load(self.norm_stats_path)
        manifest = self.vc_training_manifest()
        feats = [
            compute_logmel_vc(load_waveform(r), r.utterance_id) for r in manifest.records
        ]
        stats = compute_norm_stats(feats)
        stats.save(self.norm_stats_path)
        self._mark_done("norm_stats")
        return stats

    def stage_train_fvae(self) -> fvae_mod.FVAE:
        if self.config.condition == "clean":
            raise StageError("the clean condition does not train a conversion model")
        if self.fvae_checkpoint_path.exists() and self._is_done("fvae"):
            return fvae_mod.load_checkpoint(self.fvae_checkpoint_path)
        stats = self.stage_norm_stats()
        manifest = self.vc_training_manifest()
        cache = self._vc_feature_cache(stats)
        model = fvae_mod.build_fvae(self.config.fvae, seed=self.seed)
        fvae_mod.train_fvae(
            manifest,
            cache.get,
            model,
            steps=self.config.fvae_steps,
            batch_size=self.config.fvae_batch_size,
            seed=self.seed,
        )
        self.fvae_checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
        fvae_mod.save_checkpoint(self.fvae_checkpoint_path, model)
        self._mark_done("fvae")
        return model

    def stage_styles(self, language: str) -> tuple[StyleTable, str]:
        """Extract the style table of one AUD corpus and pick its medoid."""
        table_path = self.style_table_path(language)
        medoid_path = self.medoid_path(language)
        if table_path.exists() and medoid_path.exists():
            table = StyleTable.load(table_path, corpus=language)
            medoid_id = json.loads(medoid_path.read_text())["medoid_utterance_id"]
            return table, medoid_id
        model = self.stage_train_fvae()
        stats = self.stage_norm_stats()
        manifest = self.aud_manifest(language)
        cache = self._vc_feature_cache(stats)
        table = extract_styles(manifest, model, stats, feature_fn=cache.get)
        medoid_id = find_style_medoid(table)
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table.save(table_path)
        medoid_path.write_text(json.dumps({
            "corpus": language,
            "medoid_utterance_id": medoid_id,
            "checkpoint_sha256": checkpoint_hash(self.fvae_checkpoint_path),
        }, indent=2))
        self._mark_done(f"styles:{language}")
        return table, medoid_id

    def stage_convert(self, language: str) -> Path:
        """Convert one AUD corpus per the run condition; returns the cache dir."""
        condition = self.config.condition
        if condition == "clean":
            raise StageError("the clean condition does not convert")
        out_dir = self.converted_dir(language)
        stage = f"convert:{language}"
        if self._is_done(stage):
            return out_dir
        model = self.stage_train_fvae()
        stats = self.stage_norm_stats()
        manifest = self.aud_manifest(language)
        cache = self._vc_feature_cache(stats)
        table = None
        if condition == "vc":
            table, _ = self.stage_styles(language)
        summary = normalize_corpus(
            manifest,
            model,
            stats,
            mode=condition,
            output_dir=out_dir,
            style_table=table,
            synthesize_audio=self.config.route == "audio",
            feature_fn=cache.get,
        )
        if not summary.ok:
            raise StageError(
                f"conversion failed for {len(summary.failed)} utterances in "
                f"{language}: {dict(list(summary.failed.items())[:3])}"
            )
        self._mark_done(stage)
        return out_dir

    # ---- unit-discovery stages ---------------------------------------------

    def _aud_feature_cache(self, language: str) -> FeatureCache:
        condition = self.config.condition
        route = self.config.route

        if condition == "clean":
            def compute(record: UtteranceRecord) -> LogMelSpectrogram:
                return compute_logmel_aud(load_waveform(record), record.utterance_id)
        elif route == "audio":
            converted = self.converted_dir(language)

            def compute(record: UtteranceRecord) -> LogMelSpectrogram:
                wav_record = UtteranceRecord(
                    utterance_id=record.utterance_id,
                    language=record.language,
                    audio_path=converted / f"{record.utterance_id}.wav",
                    num_samples=record.num_samples,
                )
                return compute_logmel_aud(load_waveform(wav_record), record.utterance_id)
        else:
            converted = self.converted_dir(language)
            regroup = mel_regroup_matrix()

            def compute(record: UtteranceRecord) -> LogMelSpectrogram:
                feat = load_converted_feature(converted, record.utterance_id)
                mel80_power = np.exp(feat.values)
                mel40_power = np.maximum(mel80_power @ regroup.T, POWER_FLOOR)
                return finish_aud_features(np.log(mel40_power), record.utterance_id)

        return FeatureCache(self.aud_feature_dir(language), compute)

    def stage_aud_features(self, language: str) -> list[LogMelSpectrogram]:
        if self.config.condition != "clean":
            self.stage_convert(language)
        cache = self._aud_feature_cache(language)
        manifest = self.aud_manifest(language)
        feats = [cache.get(r) for r in manifest.records]
        self._mark_done(f"aud_features:{language}")
        return feats

    def stage_train_aud(self, language: str) -> hmm_mod.HMMVAE:
        ckpt = self.hmm_checkpoint_path(language)
        if ckpt.exists() and self._is_done(f"train_aud:{language}"):
            return hmm_mod.load_checkpoint(ckpt)
        corpus = self.stage_aud_features(language)
        model = hmm_mod.build_hmmvae(self.config.hmmvae, seed=self.seed)
        try:
            hmm_mod.pretrain_random_alignments(
                corpus, model, iterations=self.config.pretrain_iterations, seed=self.seed
            )
            hmm_mod.train_hmmvae(
                corpus, model, iterations=self.config.train_iterations, seed=self.seed
            )
        except hmm_mod.DivergenceError as exc:
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            hmm_mod.save_checkpoint(ckpt.with_suffix(".diverged.pt"), model, step=exc.step)
            raise StageError(
                f"unit-discovery training diverged for {language} at step {exc.step}; "
                "last good parameters saved"
            ) from exc
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        hmm_mod.save_checkpoint(ckpt, model)
        self._mark_done(f"train_aud:{language}")
        return model

    def stage_decode(self, language: str) -> Path:
        out = self.transcription_path(language)
        stage = f"decode:{language}"
        if out.exists() and self._is_done(stage):
            return out
        model = self.stage_train_aud(language)
        corpus = self.stage_aud_features(language)
        transcriptions = hmm_mod.decode_to_units(corpus, model)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_segments(out, {t.utterance_id: t.to_segments() for t in transcriptions})
        self._mark_done(stage)
        return out

    def stage_evaluate(self, language: str) -> dict:
        metrics_path = self.metrics_path(language)
        stage = f"evaluate:{language}"
        if metrics_path.exists() and self._is_done(stage):
            return json.loads(metrics_path.read_text())
        if language not in self.config.references:
            raise StageError(f"no reference alignment configured for {language}")
        hyp_path = self.stage_decode(language)
        results = evaluate_transcriptions(
            hyp_path, self.config.references[language], collar=self.config.collar
        )
        results.update({
            "language": language,
            "condition": self.config.condition,
            "seed": self.seed,
        })
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_path.write_text(json.dumps(results, indent=2))
        self._mark_done(stage)
        return results

    def run_all(self) -> dict[str, dict]:
        """Run every stage for every configured corpus; returns metrics."""
        results = {}
        for language in sorted(self.config.aud_manifests):
            results[language] = self.stage_evaluate(language)
        return results


def evaluate_transcriptions(
    hyp_path: str | Path, ref_path: str | Path, collar: float = 0.02
) -> dict:
    """Frame-cluster and boundary metrics of a decoded corpus vs reference."""
    hyp_segs = read_segments(hyp_path)
    ref_segs = read_segments(ref_path)
    shared = sorted(set(hyp_segs) & set(ref_segs))
    if not shared:
        raise ValueError("hypothesis and reference share no utterance ids")

    hyp_vocab = label_vocabulary(hyp_segs)
    ref_vocab = label_vocabulary(ref_segs)
    hyp_labels, ref_labels, hyp_bounds, ref_bounds = [], [], [], []
    for utt in shared:
        ref_frames = segments_to_frame_labels(ref_segs[utt], ref_vocab)
        hyp_frames = segments_to_frame_labels(
            hyp_segs[utt], hyp_vocab, num_frames=len(ref_frames.labels)
        )
        hyp_labels.append(hyp_frames)
        ref_labels.append(ref_frames)
        hyp_bounds.append(segments_to_boundaries(hyp_segs[utt]))
        ref_bounds.append(segments_to_boundaries(ref_segs[utt]))

    cm = frame_confusion(hyp_labels, ref_labels)
    score = boundary_fscore(hyp_bounds, ref_bounds, collar=collar)
    return {
        "nmi": nmi(cm),
        "cluster_purity": cluster_purity(cm),
        "boundary_precision": score.precision,
        "boundary_recall": score.recall,
        "boundary_fscore": score.fscore,
        "num_utterances": len(shared),
        "num_frames": cm.total,
    }


def run_experiment(config: ExperimentConfig) -> dict:
    """Run all seeds of an experiment; metrics nested seed -> language."""
    all_results = {}
    for seed in config.seeds:
        runner = ExperimentRunner(config, seed)
        all_results[seed] = runner.run_all()
    return all_results


# ---- reporting -------------------------------------------------------------

METRIC_COLUMNS = (("nmi", "NMI"), ("cluster_purity", "CP"), ("boundary_fscore", "BFS"))


def _collect_runs(output_dir: Path) -> list[dict]:
    rows = []
    for metrics_file in sorted(output_dir.glob("*_seed*/metrics/*.json")):
        rows.append(json.loads(metrics_file.read_text()))
    return rows


def report(output_dir: str | Path, report_dir: str | Path | None = None) -> str:
    """Aggregate per-seed metrics into a results table and bar plots.

    Rows are grouped by (language, input condition); each cell reports the
    mean and sample standard deviation over seeds (std omitted for a single
    seed). Writes report.txt, report.json, and one PNG per metric.
    """
    output_dir = Path(output_dir)
    report_dir = Path(report_dir) if report_dir else output_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = _collect_runs(output_dir)
    if not rows:
        raise ValueError(f"no completed runs under {output_dir}")

    groups: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["language"], row["condition"]), []).append(row)

    table_rows = []
    for (language, condition), members in sorted(groups.items()):
        entry = {"language": language, "model": "HMMVAE", "input": condition,
                 "seeds": sorted(m["seed"] for m in members)}
        for key, label in METRIC_COLUMNS:
            values = np.array([m[key] for m in members], dtype=np.float64)
            scale = 100.0 if key != "nmi" else 1.0  # CP/BFS reported as percentages
            entry[label] = {
                "mean": float(values.mean() * scale),
                "std": float(values.std(ddof=1) * scale) if len(values) > 1 else None,
                "values": [float(v * scale) for v in values],
            }
        table_rows.append(entry)

    lines = [f"{'language':<10} {'model':<8} {'input':<6} "
             + " ".join(f"{label:>14}" for _, label in METRIC_COLUMNS)]
    for entry in table_rows:
        cells = []
        for _, label in METRIC_COLUMNS:
            stats = entry[label]
            if stats["std"] is None:
                cells.append(f"{stats['mean']:>14.2f}")
            else:
                cells.append(f"{stats['mean']:>8.2f} ±{stats['std']:<5.2f}")
        lines.append(
            f"{entry['language']:<10} {entry['model']:<8} {entry['input']:<6} "
            + " ".join(cells)
        )
    text = "\n".join(lines) + "\n"

    (report_dir / "report.txt").write_text(text)
    (report_dir / "report.json").write_text(json.dumps(table_rows, indent=2))
    _plot_report(table_rows, report_dir)
    return text


def _plot_report(table_rows: list[dict], report_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for _, label in METRIC_COLUMNS:
        fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(table_rows), 3.5))
        groups = [f"{e['language']}/{e['input']}" for e in table_rows]
        width = 0.8
        for gi, entry in enumerate(table_rows):
            values = entry[label]["values"]
            n = len(values)
            offsets = (np.arange(n) - (n - 1) / 2) * (width / max(n, 1))
            ax.bar(gi + offsets, values, width=width / max(n, 1), edgecolor="black")
        ax.set_xticks(range(len(groups)))
        ax.set_xticklabels(groups, rotation=30, ha="right")
        ax.set_ylabel(label)
        ax.set_title(f"{label} per seed")
        fig.tight_layout()
        fig.savefig(report_dir / f"{label.lower()}_per_seed.png", dpi=120)
        plt.close(fig)
