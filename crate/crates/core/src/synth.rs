//! Synthetic dataset rig: a toy language with a bigram prior, a story with
//! constant word rate, ground-truth embeddings computed through the real
//! feature pipeline, and voxel responses synthesized as a (optionally
//! nonlinear) map of the FIR-delayed embeddings with duplicated noisy voxels.
//!
//! Everything a desk-scale experiment needs comes out of one seed: the
//! scan, the story, the target embeddings, a trained language model over the
//! accompanying corpus, and the auditory voxel ids carrying word-rate signal.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSeries, FmriSeries, WordTimeline};
use crate::error::{Error, Result};
use crate::features::{embed_contexts, lanczos_resample, FIR_DELAYS};
use crate::lm::{train_toy_lm, LanguageModel, LmTrainReport, ToyLm, ToyLmConfig};
use crate::rng::SeedStreams;
use crate::word_rate::words_per_tr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    None,
    Tanh,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    /// Story length in words.
    pub n_words: usize,
    /// Total voxel count, auditory block included.
    pub voxels: usize,
    /// Each semantic base voxel is replicated this many times with
    /// independent noise.
    pub duplication_factor: usize,
    /// Noise std in units of (standardized) signal std.
    pub noise_sigma: f64,
    pub nonlinearity: Nonlinearity,
    pub tr_seconds: f64,
    pub seed: u64,
    /// Constant word rate; word i sits at `(i + 0.5) * tr / words_per_tr`.
    pub words_per_tr: f64,
    /// Trailing voxels carrying delayed word-count signal for the word-rate
    /// model. Zero disables the auditory block.
    pub auditory_voxels: usize,
    /// Number of corpus stories used to train the language model (and to
    /// compute IDF weights downstream).
    pub corpus_stories: usize,
    /// Language model for ground-truth feature extraction; `hidden_dim` is
    /// the embedding dimension of the synthesized targets.
    pub lm: ToyLmConfig,
    pub embed_window: usize,
    /// Feature tap; `None` selects the LM's middle layer.
    pub embed_layer: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            n_words: 360,
            voxels: 240,
            duplication_factor: 4,
            noise_sigma: 0.3,
            nonlinearity: Nonlinearity::None,
            tr_seconds: 2.0,
            seed: 0,
            words_per_tr: 2.5,
            auditory_voxels: 8,
            corpus_stories: 6,
            lm: ToyLmConfig::default(),
            embed_window: 5,
            embed_layer: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Validation("vocab_size must be >= 2".into()));
        }
        if self.vocab_size > SYLLABLES.len() * SYLLABLES.len() {
            return Err(Error::Validation(format!(
                "vocab_size {} exceeds the pseudo-word space",
                self.vocab_size
            )));
        }
        if self.n_words == 0 {
            return Err(Error::Validation("n_words must be positive".into()));
        }
        if self.duplication_factor == 0 || self.voxels < self.duplication_factor {
            return Err(Error::Validation("need voxels >= duplication_factor >= 1".into()));
        }
        if self.auditory_voxels >= self.voxels {
            return Err(Error::Validation("auditory_voxels must leave semantic voxels".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Validation("noise_sigma must be >= 0".into()));
        }
        if !(self.tr_seconds > 0.0) || !(self.words_per_tr > 0.0) {
            return Err(Error::Validation("tr_seconds and words_per_tr must be positive".into()));
        }
        if self.corpus_stories == 0 {
            return Err(Error::Validation("corpus_stories must be >= 1".into()));
        }
        self.lm.validate()
    }

    /// Number of TRs covering the story.
    pub fn n_trs(&self) -> usize {
        (self.n_words as f64 / self.words_per_tr).ceil() as usize
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "de", "ki", "mo", "su", "na", "po", "re", "ta", "vu", "la", "fe", "go", "hi", "ju", "ze",
    "wa", "ni", "co", "dy",
];

fn pseudo_word(i: usize) -> String {
    let l = SYLLABLES.len();
    format!("{}{}", SYLLABLES[i / l], SYLLABLES[i % l])
}

/// Bigram chain over the toy vocabulary. Every token most prefers its ring
/// successor and keeps a fixed set of coprime-shift successors, with the
/// remaining mass spread uniformly. The shift structure makes the chain
/// doubly stochastic, so its stationary distribution is exactly uniform:
/// deterministic high-probability paths then share the token composition of
/// sampled sequences, and unguided decoding stays statistically
/// indistinguishable from the random baselines.
struct BigramPrior {
    transition: Array2<f64>,
}

const PREFERRED_SHIFTS: [usize; 5] = [7, 11, 17, 23, 31];

impl BigramPrior {
    fn build(vocab_size: usize) -> Self {
        let ring_mass = 0.22;
        let preferred_mass = 0.43;
        let shifts: Vec<usize> = PREFERRED_SHIFTS
            .iter()
            .map(|s| s % vocab_size)
            .filter(|&s| s != 0 && s != 1)
            .collect();
        let uniform = (1.0 - ring_mass - if shifts.is_empty() { 0.0 } else { preferred_mass })
            / vocab_size as f64;
        let mut transition = Array2::from_elem((vocab_size, vocab_size), uniform);
        for row in 0..vocab_size {
            transition[[row, (row + 1) % vocab_size]] += ring_mass;
            for &s in &shifts {
                transition[[row, (row + s) % vocab_size]] += preferred_mass / shifts.len() as f64;
            }
        }
        // normalize exactly
        for mut row in transition.rows_mut() {
            let total: f64 = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        Self { transition }
    }

    fn sample(&self, n: usize, allowed: Option<&[bool]>, rng: &mut ChaCha12Rng) -> Vec<usize> {
        let vocab = self.transition.nrows();
        let mut out = Vec::with_capacity(n);
        let mut prev: Option<usize> = None;
        for _ in 0..n {
            let mut weights: Vec<f64> = match prev {
                Some(p) => self.transition.row(p).to_vec(),
                None => vec![1.0 / vocab as f64; vocab],
            };
            if let Some(mask) = allowed {
                for (w, ok) in weights.iter_mut().zip(mask) {
                    if !ok {
                        *w = 0.0;
                    }
                }
            }
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = vocab - 1;
            for (i, &w) in weights.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            out.push(chosen);
            prev = Some(chosen);
        }
        out
    }
}

fn timeline_from_ids(ids: &[usize], words: &[String], step: f64) -> WordTimeline {
    let entries = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (words[id].clone(), (i as f64 + 0.5) * step))
        .collect();
    WordTimeline::new(entries).expect("generated timeline is valid")
}

fn standardize_columns(data: &mut Array2<f64>) {
    let m = data.nrows() as f64;
    for mut col in data.columns_mut() {
        let mean = col.sum() / m;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let std = var.sqrt();
        let denom = if std > 1e-9 { std } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) / denom);
    }
}

/// Shared causal response filter applied to every embedding feature before
/// the voxel map: frame t mixes embeddings at t, t-1, t-2, t-3.
pub const HRF_WEIGHTS: [f64; 4] = [0.75, 0.15, 0.07, 0.03];

/// Applies [`HRF_WEIGHTS`] along time (zero-padded before the start).
pub fn hrf_filter(series: &Array2<f64>) -> Array2<f64> {
    let (m, n) = series.dim();
    let mut out = Array2::zeros((m, n));
    for t in 0..m {
        for (k, &w) in HRF_WEIGHTS.iter().enumerate() {
            if t >= k {
                for j in 0..n {
                    out[[t, j]] += w * series[[t - k, j]];
                }
            }
        }
    }
    out
}

/// Everything the generator produces for one seed.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub fmri: FmriSeries,
    pub timeline: WordTimeline,
    /// Ground-truth per-TR embeddings (undelayed, on the fMRI time grid).
    pub truth: EmbeddingSeries,
    pub lm: ToyLm,
    pub lm_report: LmTrainReport,
    /// Corpus stories the LM was trained on (also the IDF document set).
    pub corpus: Vec<WordTimeline>,
    pub auditory_ids: Vec<i64>,
}

/// Deterministically generates (scan, story, ground-truth embeddings) plus
/// the language model and corpus backing them.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<SynthBundle> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let words: Vec<String> = (0..spec.vocab_size).map(pseudo_word).collect();
    let prior = BigramPrior::build(spec.vocab_size);

    let word_step = spec.tr_seconds / spec.words_per_tr;
    let mut corpus_rng = streams.stream("synth/corpus");
    let corpus: Vec<WordTimeline> = (0..spec.corpus_stories)
        .map(|_| {
            let ids = prior.sample(spec.n_words, None, &mut corpus_rng);
            timeline_from_ids(&ids, &words, word_step)
        })
        .collect();

    // The story is restricted to words the corpus contains, so the trained
    // LM's vocabulary always covers it.
    let mut seen = vec![false; spec.vocab_size];
    for story in &corpus {
        for token in story.tokens() {
            if let Some(pos) = words.iter().position(|w| w == token) {
                seen[pos] = true;
            }
        }
    }
    let story_ids = prior.sample(spec.n_words, Some(&seen), &mut streams.stream("synth/story"));
    let timeline = timeline_from_ids(&story_ids, &words, word_step);

    let (lm, lm_report) = train_toy_lm(&corpus, &spec.lm)?;
    let layer = spec.embed_layer.unwrap_or_else(|| lm.default_embedding_layer());

    // Ground truth through the real feature pipeline.
    let m = spec.n_trs();
    let target_times: Vec<f64> = (0..m).map(|i| i as f64 * spec.tr_seconds).collect();
    let pairs = embed_contexts(&lm, &timeline, spec.embed_window, layer)?;
    let truth = lanczos_resample(&pairs, &target_times, 3)?;

    // Voxel synthesis: the semantic block is a random linear image of the
    // hemodynamically filtered embeddings (a shared causal FIR over the
    // current and three preceding frames, so the block's rank stays at the
    // embedding dimension), the auditory block carries delayed word counts.
    let filtered = hrf_filter(truth.vectors());
    let semantic = spec.voxels - spec.auditory_voxels;
    let base = semantic.div_ceil(spec.duplication_factor);
    let mut gmap_rng = streams.stream("synth/gmap");
    let gmap = Array2::from_shape_fn((filtered.ncols(), base), |_| {
        let z: f64 = gmap_rng.sample(StandardNormal);
        z
    });
    let mut base_signal = filtered.dot(&gmap);
    standardize_columns(&mut base_signal);
    if spec.nonlinearity == Nonlinearity::Tanh {
        base_signal.mapv_inplace(f64::tanh);
    }

    let mut data = Array2::zeros((m, spec.voxels));
    for col in 0..semantic {
        let group = col / spec.duplication_factor;
        for t in 0..m {
            data[[t, col]] = base_signal[[t, group]];
        }
    }

    if spec.auditory_voxels > 0 {
        // word counts need a provisional series for the TR grid
        let grid = FmriSeries::new(
            Array2::zeros((m, 1)),
            spec.tr_seconds,
            0.0,
            vec![0],
        )?;
        let counts = Array1::from(words_per_tr(&grid, &timeline));
        let mut aud_rng = streams.stream("synth/aud");
        let mut aud = Array2::zeros((m, spec.auditory_voxels));
        for j in 0..spec.auditory_voxels {
            let gains: Vec<f64> = (0..FIR_DELAYS.len())
                .map(|_| {
                    let z: f64 = aud_rng.sample(StandardNormal);
                    z.abs() + 0.2
                })
                .collect();
            for t in 0..m {
                let mut v = 0.0;
                for (k, &delay) in FIR_DELAYS.iter().enumerate() {
                    if t >= delay {
                        v += gains[k] * counts[t - delay];
                    }
                }
                aud[[t, j]] = v;
            }
        }
        standardize_columns(&mut aud);
        for j in 0..spec.auditory_voxels {
            for t in 0..m {
                data[[t, semantic + j]] = aud[[t, j]];
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let mut noise_rng = streams.stream("synth/noise");
        for v in data.iter_mut() {
            let z: f64 = noise_rng.sample(StandardNormal);
            *v += spec.noise_sigma * z;
        }
    }

    let fmri = FmriSeries::new(data, spec.tr_seconds, 0.0, (0..spec.voxels as i64).collect())?;
    let auditory_ids: Vec<i64> = (semantic as i64..spec.voxels as i64).collect();
    Ok(SynthBundle {
        fmri,
        timeline,
        truth,
        lm,
        lm_report,
        corpus,
        auditory_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::least_squares;
    use ndarray::s;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            vocab_size: 24,
            n_words: 80,
            voxels: 40,
            duplication_factor: 4,
            noise_sigma: 0.0,
            auditory_voxels: 0,
            corpus_stories: 2,
            lm: ToyLmConfig {
                hidden_dim: 8,
                context_limit: 24,
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = small_spec();
        let a = synth_dataset(&spec).unwrap();
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.fmri, b.fmri);
        assert_eq!(a.timeline, b.timeline);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn zero_noise_duplicates_are_identical() {
        let spec = small_spec();
        let bundle = synth_dataset(&spec).unwrap();
        let data = bundle.fmri.data();
        for group in 0..(spec.voxels / spec.duplication_factor) {
            let base = group * spec.duplication_factor;
            for r in 1..spec.duplication_factor {
                for t in 0..bundle.fmri.n_trs() {
                    assert_eq!(data[[t, base]], data[[t, base + r]]);
                }
            }
        }
    }

    #[test]
    fn zero_noise_linear_is_exact_image_of_delayed_truth() {
        use crate::features::fir_delay_matrix;
        let spec = small_spec();
        let bundle = synth_dataset(&spec).unwrap();
        // the aligned stack: current frame plus delays 1..3, with intercept
        let e = bundle.truth.vectors();
        let lagged = fir_delay_matrix(e, &[1, 2, 3]);
        let m = e.nrows();
        let n = e.ncols();
        let mut design = Array2::ones((m, n + lagged.ncols() + 1));
        design.slice_mut(s![.., ..n]).assign(e);
        design
            .slice_mut(s![.., n..n + lagged.ncols()])
            .assign(&lagged);
        let mut sq_resid = 0.0;
        let mut sq_total = 0.0;
        for col in 0..spec.voxels {
            let y = bundle.fmri.data().column(col).to_owned();
            let beta = least_squares(&design, &y).unwrap();
            let fitted = design.dot(&beta);
            for t in 0..m {
                sq_resid += (y[t] - fitted[t]) * (y[t] - fitted[t]);
                sq_total += y[t] * y[t];
            }
        }
        let rel = (sq_resid / sq_total.max(1e-300)).sqrt();
        assert!(rel < 1e-5, "relative residual {rel}");
    }

    #[test]
    fn noise_breaks_duplicates_but_not_shape() {
        let spec = SyntheticSpec {
            noise_sigma: 0.5,
            ..small_spec()
        };
        let bundle = synth_dataset(&spec).unwrap();
        assert_eq!(bundle.fmri.n_voxels(), spec.voxels);
        assert_eq!(bundle.fmri.n_trs(), spec.n_trs());
        let data = bundle.fmri.data();
        assert_ne!(data.column(0), data.column(1));
    }

    #[test]
    fn story_words_covered_by_lm_vocab() {
        let spec = SyntheticSpec {
            noise_sigma: 0.2,
            auditory_voxels: 4,
            ..small_spec()
        };
        let bundle = synth_dataset(&spec).unwrap();
        for token in bundle.timeline.tokens() {
            assert!(bundle.lm.vocab().id(token).is_ok(), "{token} missing");
        }
    }

    #[test]
    fn auditory_block_encodes_word_rate() {
        let spec = SyntheticSpec {
            auditory_voxels: 4,
            voxels: 44,
            ..small_spec()
        };
        let bundle = synth_dataset(&spec).unwrap();
        assert_eq!(bundle.auditory_ids, vec![40, 41, 42, 43]);
        // delayed counts should predict the auditory voxels exactly at zero noise
        let counts = Array1::from(words_per_tr(&bundle.fmri, &bundle.timeline));
        let m = bundle.fmri.n_trs();
        let mut lagged = Array2::ones((m, 5));
        for (k, delay) in FIR_DELAYS.iter().enumerate() {
            for t in *delay..m {
                lagged[[t, k]] = counts[t - delay];
            }
            for t in 0..*delay {
                lagged[[t, k]] = 0.0;
            }
        }
        let y = bundle.fmri.data().column(40).to_owned();
        let beta = least_squares(&lagged, &y).unwrap();
        let fitted = lagged.dot(&beta);
        let resid: f64 = y
            .iter()
            .zip(fitted.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(resid / (m as f64) < 1e-10, "residual {resid}");
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_spec();
        spec.vocab_size = 1;
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.voxels = 2;
        spec.duplication_factor = 4;
        assert!(spec.validate().is_err());
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn word_times_constant_rate_inside_scan() {
        let spec = small_spec();
        let bundle = synth_dataset(&spec).unwrap();
        let step = spec.tr_seconds / spec.words_per_tr;
        for (i, (_, t)) in bundle.timeline.entries().iter().enumerate() {
            assert!((t - (i as f64 + 0.5) * step).abs() < 1e-12);
        }
        let duration = bundle.fmri.n_trs() as f64 * spec.tr_seconds;
        assert!(bundle.timeline.entries().last().unwrap().1 < duration);
    }
}
