//! End-to-end orchestration shared by the CLI and the acceptance suite:
//! run-directory layout, the single run configuration document, and the
//! synth / features / train / decode / evaluate / ablate steps with their
//! file artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    load_embeddings, load_fmri, load_timeline, save_embeddings, save_fmri, save_timeline,
    EmbeddingSeries, WordTimeline,
};
use crate::decoder::{decode, DecodeConfig, DecodeLog, Guidance};
use crate::error::{Error, Result};
use crate::eval::{
    normalized_scores, random_baseline, BertSimilarity, BleuSimilarity, IdfWeights, LmEmbedder,
    MeteorSimilarity, MetricReport, MetricScores, NormalizedScores, WerSimilarity,
};
use crate::features::{embed_contexts, fir_expand, lanczos_resample, FIR_DELAYS};
use crate::lm::{load_lm, save_lm, LanguageModel, ToyLm};
use crate::mapper::{
    load_checkpoint, save_checkpoint, train_mapper, MapperConfig, TrainLog,
};
use crate::synth::{synth_dataset, SyntheticSpec};
use crate::word_rate::{fit_word_rate, load_word_rate, save_word_rate, WordRateModel};

/// Path overrides plus feature-extraction settings. Any path left `None`
/// resolves to the standard artifact name inside the run directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub fmri: Option<PathBuf>,
    pub timeline: Option<PathBuf>,
    /// Mapper training target (the `features` output by default).
    pub embeddings: Option<PathBuf>,
    /// Ground-truth embeddings used for oracle-guided decoding.
    pub truth: Option<PathBuf>,
    pub embed_window: usize,
    /// `None` selects the LM's middle layer.
    pub embed_layer: Option<usize>,
    /// Emit the FIR-expanded (4n) series from `features` instead of the
    /// undelayed one.
    pub delayed: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            fmri: None,
            timeline: None,
            embeddings: None,
            truth: None,
            embed_window: 5,
            embed_layer: None,
            delayed: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    /// Language model directory; defaults to `<run>/lm`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WordRateSection {
    pub ridge_lambda: f64,
    /// Auditory voxel ids; defaults to the ids recorded by `synth`.
    pub auditory_ids: Option<Vec<i64>>,
    /// Persisted model path; defaults to `<run>/word_rate.json` (fit and
    /// saved on first use).
    pub model: Option<PathBuf>,
}

impl Default for WordRateSection {
    fn default() -> Self {
        Self {
            ridge_lambda: 1.0,
            auditory_ids: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub width: f64,
    pub stride: f64,
    pub n_baselines: usize,
    pub seed: u64,
    pub reference: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub windows_csv: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            width: 20.0,
            stride: 2.0,
            n_baselines: 200,
            seed: 1,
            reference: None,
            prediction: None,
            windows_csv: false,
        }
    }
}

/// The single configuration document; one section per pipeline module.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub lm: LmSection,
    pub mapper: MapperConfig,
    pub word_rate: WordRateSection,
    pub decode: DecodeConfig,
    pub evaluate: EvaluateSection,
    pub synth: SyntheticSpec,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        serde_json::from_slice(&raw)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))
    }

    /// Twelve hex chars of the canonical-JSON digest; names run directories.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Standard artifact names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn fmri(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.fmri.clone().unwrap_or_else(|| self.root.join("fmri.json"))
    }

    pub fn timeline(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data
            .timeline
            .clone()
            .unwrap_or_else(|| self.root.join("timeline.jsonl"))
    }

    pub fn embeddings(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data
            .embeddings
            .clone()
            .unwrap_or_else(|| self.root.join("embeddings.json"))
    }

    pub fn truth(&self, cfg: &RunConfig) -> PathBuf {
        cfg.data.truth.clone().unwrap_or_else(|| self.root.join("truth.json"))
    }

    pub fn lm_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.lm.dir.clone().unwrap_or_else(|| self.root.join("lm"))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn training_log(&self) -> PathBuf {
        self.root.join("training_log.json")
    }

    pub fn word_rate(&self, cfg: &RunConfig) -> PathBuf {
        cfg.word_rate
            .model
            .clone()
            .unwrap_or_else(|| self.root.join("word_rate.json"))
    }

    pub fn transcript(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }

    pub fn decode_log(&self) -> PathBuf {
        self.root.join("decode_log.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn windows_csv(&self) -> PathBuf {
        self.root.join("windows.csv")
    }

    pub fn synth_meta(&self) -> PathBuf {
        self.root.join("synth.json")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.json")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub auditory_ids: Vec<i64>,
    pub n_trs: usize,
    pub n_words: usize,
    pub vocab_size: usize,
    pub lm_heldout_perplexity: f64,
}

/// Generates the synthetic bundle and writes every artifact the rest of the
/// pipeline consumes.
pub fn run_synth(cfg: &RunConfig, paths: &RunPaths) -> Result<SynthMeta> {
    let bundle = synth_dataset(&cfg.synth)?;
    fs::create_dir_all(paths.root())?;
    save_fmri(&bundle.fmri, &paths.fmri(cfg))?;
    save_timeline(&bundle.timeline, &paths.timeline(cfg))?;
    save_embeddings(&bundle.truth, &paths.truth(cfg))?;
    save_lm(&bundle.lm, &paths.lm_dir(cfg))?;
    let corpus_dir = paths.corpus_dir();
    fs::create_dir_all(&corpus_dir)?;
    for (i, story) in bundle.corpus.iter().enumerate() {
        save_timeline(story, &corpus_dir.join(format!("story_{i:03}.jsonl")))?;
    }
    let meta = SynthMeta {
        auditory_ids: bundle.auditory_ids.clone(),
        n_trs: bundle.fmri.n_trs(),
        n_words: bundle.timeline.len(),
        vocab_size: bundle.lm.vocab().len(),
        lm_heldout_perplexity: bundle.lm_report.heldout_perplexity,
    };
    fs::write(paths.synth_meta(), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// Extracts per-TR stimulus features from the timeline with the stored LM:
/// context embeddings, Lanczos resampling onto the fMRI grid, optional FIR
/// expansion.
pub fn run_features(cfg: &RunConfig, paths: &RunPaths) -> Result<EmbeddingSeries> {
    let lm = load_lm(&paths.lm_dir(cfg))?;
    let timeline = load_timeline(&paths.timeline(cfg))?;
    let fmri = load_fmri(&paths.fmri(cfg))?;
    let layer = cfg
        .data
        .embed_layer
        .unwrap_or_else(|| lm.default_embedding_layer());
    let pairs = embed_contexts(&lm, &timeline, cfg.data.embed_window, layer)?;
    let series = lanczos_resample(&pairs, &fmri.times(), 3)?;
    let series = if cfg.data.delayed {
        fir_expand(&series, &FIR_DELAYS)?
    } else {
        series
    };
    save_embeddings(&series, &paths.embeddings(cfg))?;
    Ok(series)
}

/// Trains the mapper against the prepared embedding series and persists the
/// checkpoint plus the per-epoch training log.
pub fn run_train(cfg: &RunConfig, paths: &RunPaths) -> Result<TrainLog> {
    let fmri = load_fmri(&paths.fmri(cfg))?;
    let targets = load_embeddings(&paths.embeddings(cfg))?;
    let mut mapper_cfg = cfg.mapper.clone();
    if mapper_cfg.input_voxels == 0 {
        mapper_cfg.input_voxels = fmri.n_voxels();
    }
    if mapper_cfg.embed_dim == 0 {
        mapper_cfg.embed_dim = targets.dim();
    }
    let (ckpt, log) = train_mapper(&fmri, &targets, &mapper_cfg)?;
    save_checkpoint(&ckpt, &paths.checkpoint_dir())?;
    fs::write(paths.training_log(), serde_json::to_vec_pretty(&log)?)?;
    Ok(log)
}

fn resolve_word_rate(cfg: &RunConfig, paths: &RunPaths) -> Result<WordRateModel> {
    let model_path = paths.word_rate(cfg);
    if model_path.exists() {
        return load_word_rate(&model_path);
    }
    let fmri = load_fmri(&paths.fmri(cfg))?;
    let timeline = load_timeline(&paths.timeline(cfg))?;
    let auditory_ids = match &cfg.word_rate.auditory_ids {
        Some(ids) => ids.clone(),
        None => {
            let meta_path = paths.synth_meta();
            if !meta_path.exists() {
                return Err(Error::Config(
                    "no auditory voxel ids: set word_rate.auditory_ids or run synth first".into(),
                ));
            }
            let meta: SynthMeta = serde_json::from_slice(&fs::read(meta_path)?)?;
            meta.auditory_ids
        }
    };
    let aud = fmri.select_voxels(&auditory_ids)?;
    let model = fit_word_rate(&aud, &timeline, cfg.word_rate.ridge_lambda)?;
    save_word_rate(&model, &model_path)?;
    Ok(model)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub n_words: usize,
    pub final_guidance: f64,
    pub final_lm_logprob: f64,
}

/// Runs guided decoding and writes `transcript.jsonl` plus the decode log.
pub fn run_decode(cfg: &RunConfig, paths: &RunPaths) -> Result<(WordTimeline, DecodeLog)> {
    let fmri = load_fmri(&paths.fmri(cfg))?;
    let lm = load_lm(&paths.lm_dir(cfg))?;
    let word_rate = resolve_word_rate(cfg, paths)?;
    let ckpt = if matches!(cfg.decode.guidance, Guidance::Mapper) {
        Some(load_checkpoint(&paths.checkpoint_dir())?)
    } else {
        None
    };
    let oracle = if matches!(cfg.decode.guidance, Guidance::Oracle) {
        Some(load_embeddings(&paths.truth(cfg))?)
    } else {
        None
    };
    let mut decode_cfg = cfg.decode.clone();
    if decode_cfg.embed_layer.is_none() {
        decode_cfg.embed_layer = Some(
            cfg.data
                .embed_layer
                .unwrap_or_else(|| lm.default_embedding_layer()),
        );
    }
    let (timeline, log) = decode(
        &fmri,
        ckpt.as_ref(),
        &word_rate,
        &lm,
        &decode_cfg,
        oracle.as_ref(),
    )?;
    save_timeline(&timeline, &paths.transcript())?;
    fs::write(paths.decode_log(), serde_json::to_vec_pretty(&log)?)?;
    Ok((timeline, log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowDetail {
    pub start: f64,
    pub wer: WindowMetricDetail,
    pub bleu: WindowMetricDetail,
    pub meteor: WindowMetricDetail,
    pub bert: WindowMetricDetail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowMetricDetail {
    pub similarity: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub n_windows: usize,
    pub n_baselines: usize,
    pub width: f64,
    pub stride: f64,
    pub windows: Vec<WindowDetail>,
}

fn detail(scores: &NormalizedScores, i: usize) -> WindowMetricDetail {
    let w = &scores.per_window[i];
    WindowMetricDetail {
        similarity: w.similarity,
        baseline_mean: w.baseline_mean,
        baseline_std: w.baseline_std,
    }
}

/// Evaluates a prediction timeline against the reference with all four
/// metrics and the shared random baselines. The baselines sit on the
/// prediction's word-time grid.
pub fn evaluate_timelines(
    reference: &WordTimeline,
    prediction: &WordTimeline,
    lm: &ToyLm,
    corpus: &[WordTimeline],
    section: &EvaluateSection,
    embed_layer: Option<usize>,
) -> Result<EvalReport> {
    let times: Vec<f64> = prediction.times().collect();
    let baselines = random_baseline(lm, &times, section.n_baselines, section.seed)?;
    let idf = IdfWeights::from_stories(corpus);
    let layer = embed_layer.unwrap_or_else(|| lm.default_embedding_layer());
    let embedder = LmEmbedder { lm, layer };

    let wer_scores = normalized_scores(
        reference,
        prediction,
        &baselines,
        &WerSimilarity,
        section.width,
        section.stride,
    )?;
    let bleu_scores = normalized_scores(
        reference,
        prediction,
        &baselines,
        &BleuSimilarity,
        section.width,
        section.stride,
    )?;
    let meteor_scores = normalized_scores(
        reference,
        prediction,
        &baselines,
        &MeteorSimilarity,
        section.width,
        section.stride,
    )?;
    let bert_sim = BertSimilarity {
        embedder: &embedder,
        idf: &idf,
    };
    let bert_scores = normalized_scores(
        reference,
        prediction,
        &baselines,
        &bert_sim,
        section.width,
        section.stride,
    )?;

    let n_windows = wer_scores.per_window.len();
    let windows = (0..n_windows)
        .map(|i| WindowDetail {
            start: wer_scores.per_window[i].start,
            wer: detail(&wer_scores, i),
            bleu: detail(&bleu_scores, i),
            meteor: detail(&meteor_scores, i),
            bert: detail(&bert_scores, i),
        })
        .collect();

    Ok(EvalReport {
        metrics: MetricReport {
            wer: MetricScores {
                sim_pos: wer_scores.sim_pos,
                sim_zs: wer_scores.sim_zs,
            },
            bleu: MetricScores {
                sim_pos: bleu_scores.sim_pos,
                sim_zs: bleu_scores.sim_zs,
            },
            meteor: MetricScores {
                sim_pos: meteor_scores.sim_pos,
                sim_zs: meteor_scores.sim_zs,
            },
            bert: MetricScores {
                sim_pos: bert_scores.sim_pos,
                sim_zs: bert_scores.sim_zs,
            },
        },
        n_windows,
        n_baselines: section.n_baselines,
        width: section.width,
        stride: section.stride,
        windows,
    })
}

fn load_corpus_dir(dir: &Path) -> Result<Vec<WordTimeline>> {
    if !dir.exists() {
        return Err(Error::Config(format!(
            "corpus directory {} not found (needed for IDF weights)",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "jsonl").unwrap_or(false))
        .collect();
    files.sort();
    files.iter().map(|p| load_timeline(p)).collect()
}

/// Evaluates `transcript.jsonl` against the reference timeline and writes
/// `report.json` (and optionally the per-window CSV).
pub fn run_evaluate(cfg: &RunConfig, paths: &RunPaths) -> Result<EvalReport> {
    let reference_path = cfg
        .evaluate
        .reference
        .clone()
        .unwrap_or_else(|| paths.timeline(cfg));
    let prediction_path = cfg
        .evaluate
        .prediction
        .clone()
        .unwrap_or_else(|| paths.transcript());
    let reference = load_timeline(&reference_path)?;
    let prediction = load_timeline(&prediction_path)?;
    let lm = load_lm(&paths.lm_dir(cfg))?;
    let corpus = load_corpus_dir(&paths.corpus_dir())?;
    let report = evaluate_timelines(
        &reference,
        &prediction,
        &lm,
        &corpus,
        &cfg.evaluate,
        cfg.data.embed_layer,
    )?;
    fs::write(paths.report(), serde_json::to_vec_pretty(&report)?)?;
    if cfg.evaluate.windows_csv {
        let mut csv = String::from("start,metric,similarity,baseline_mean,baseline_std\n");
        for w in &report.windows {
            for (name, d) in [
                ("wer", &w.wer),
                ("bleu", &w.bleu),
                ("meteor", &w.meteor),
                ("bert", &w.bert),
            ] {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    w.start, name, d.similarity, d.baseline_mean, d.baseline_std
                ));
            }
        }
        fs::write(paths.windows_csv(), csv)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblateAxis {
    ContrastiveWeight,
    MaskRatio,
    TapLayer,
    NoiseSigma,
}

impl std::str::FromStr for AblateAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive_weight" => Ok(Self::ContrastiveWeight),
            "mask_ratio" => Ok(Self::MaskRatio),
            "tap_layer" => Ok(Self::TapLayer),
            "noise_sigma" => Ok(Self::NoiseSigma),
            other => Err(Error::Argument(format!(
                "unknown ablation axis '{other}' (contrastive_weight | mask_ratio | tap_layer | noise_sigma)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub val_cosine: f64,
    pub bleu_zs: f64,
    pub meteor_zs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblateAxis,
    pub rows: Vec<AblationRow>,
    /// Spearman correlation between mapper cosine and BLEU story-zscore
    /// across the sweep (requires >= 3 rows and non-constant values).
    pub spearman_cosine_bleu: Option<f64>,
}

/// Sweeps one hyperparameter axis: each value gets its own subrun
/// (synth -> features -> train -> decode -> evaluate) and one table row.
pub fn run_ablate(
    cfg: &RunConfig,
    paths: &RunPaths,
    axis: AblateAxis,
    values: &[f64],
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Argument("ablate needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut sub_cfg = cfg.clone();
        // subruns are self-contained: default paths inside the subrun dir
        sub_cfg.data = DataConfig {
            embed_window: cfg.data.embed_window,
            embed_layer: cfg.data.embed_layer,
            delayed: false,
            ..DataConfig::default()
        };
        sub_cfg.lm = LmSection::default();
        sub_cfg.word_rate.model = None;
        match axis {
            AblateAxis::ContrastiveWeight => sub_cfg.mapper.contrastive_weight = value,
            AblateAxis::MaskRatio => sub_cfg.mapper.mask_ratio = value,
            AblateAxis::TapLayer => sub_cfg.mapper.tap_layer = value as usize,
            AblateAxis::NoiseSigma => sub_cfg.synth.noise_sigma = value,
        }
        sub_cfg.mapper.validate()?;
        sub_cfg.synth.validate()?;
        let sub_paths = RunPaths::new(paths.root().join(format!("ablate_{i:02}")));
        run_synth(&sub_cfg, &sub_paths)?;
        run_features(&sub_cfg, &sub_paths)?;
        let log = run_train(&sub_cfg, &sub_paths)?;
        run_decode(&sub_cfg, &sub_paths)?;
        let report = run_evaluate(&sub_cfg, &sub_paths)?;
        rows.push(AblationRow {
            value,
            val_cosine: log.final_val_cosine,
            bleu_zs: report.metrics.bleu.sim_zs,
            meteor_zs: report.metrics.meteor.sim_zs,
        });
    }
    let spearman_cosine_bleu = if rows.len() >= 3 {
        crate::eval::correlation_report(
            &rows
                .iter()
                .map(|r| (r.val_cosine, r.bleu_zs))
                .collect::<Vec<_>>(),
        )
        .ok()
        .map(|r| r.spearman)
    } else {
        None
    };
    let table = AblationTable {
        axis,
        rows,
        spearman_cosine_bleu,
    };
    fs::write(paths.ablation(), serde_json::to_vec_pretty(&table)?)?;
    Ok(table)
}
