//! Evaluation harness: sliding-window metric comparison against randomized
//! baselines, positive rate and story-zscore normalization, and the
//! mapper-quality vs reconstruction-quality correlation report.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::WordTimeline;
use crate::error::{Error, Result};
use crate::lm::{sample_tokens, LanguageModel};
use crate::rng::SeedStreams;
use crate::util::{mean, sample_std};

/// One aligned window: reference and prediction tokens inside
/// `[start, start + width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub reference: Vec<String>,
    pub prediction: Vec<String>,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPairSet {
    pub windows: Vec<WindowPair>,
    pub width: f64,
    pub stride: f64,
}

/// Window starts covering `[t_start, t_end]`: `t_start + i * stride` while
/// the window fits.
pub fn window_starts(t_start: f64, t_end: f64, width: f64, stride: f64) -> Vec<f64> {
    let mut starts = Vec::new();
    let mut s = t_start;
    while s + width <= t_end + 1e-9 {
        starts.push(s);
        s += stride;
    }
    starts
}

fn tokens_in_window(timeline: &WordTimeline, start: f64, width: f64) -> Vec<String> {
    timeline
        .entries()
        .iter()
        .filter(|(_, t)| *t >= start && *t < start + width)
        .map(|(w, _)| w.clone())
        .collect()
}

/// Slides a window along both timelines; tokens are assigned by half-open
/// interval membership and windows with an empty reference side are dropped.
pub fn window_pairs(
    reference: &WordTimeline,
    prediction: &WordTimeline,
    width: f64,
    stride: f64,
) -> Result<WindowPairSet> {
    if !(width > 0.0) {
        return Err(Error::Argument(format!("window width must be positive, got {width}")));
    }
    if !(stride > 0.0) {
        return Err(Error::Argument(format!("stride must be positive, got {stride}")));
    }
    if reference.is_empty() || prediction.is_empty() {
        return Err(Error::Argument("both timelines must be non-empty".into()));
    }
    let t_start = reference.entries()[0]
        .1
        .min(prediction.entries()[0].1);
    let t_end = reference.entries()[reference.len() - 1]
        .1
        .max(prediction.entries()[prediction.len() - 1].1);
    let windows = window_starts(t_start, t_end, width, stride)
        .into_iter()
        .map(|start| WindowPair {
            reference: tokens_in_window(reference, start, width),
            prediction: tokens_in_window(prediction, start, width),
            start,
        })
        .filter(|w| !w.reference.is_empty())
        .collect();
    Ok(WindowPairSet {
        windows,
        width,
        stride,
    })
}

fn levenshtein(a: &[String], b: &[String]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Word error rate: edit operations turning the prediction into the
/// reference, normalized by reference length.
pub fn wer(reference: &[String], prediction: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Argument("WER is undefined for an empty reference".into()));
    }
    Ok(levenshtein(prediction, reference) as f64 / reference.len() as f64)
}

/// Clipped unigram precision (no brevity penalty).
pub fn bleu1(reference: &[String], prediction: &[String]) -> f64 {
    if prediction.is_empty() {
        return 0.0;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in reference {
        *ref_counts.entry(w.as_str()).or_default() += 1;
    }
    let mut pred_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in prediction {
        *pred_counts.entry(w.as_str()).or_default() += 1;
    }
    let clipped: usize = pred_counts
        .iter()
        .map(|(w, c)| (*c).min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / prediction.len() as f64
}

/// Deterministic suffix-stripping stemmer used by the METEOR stem stage.
pub fn stem(word: &str) -> String {
    let mut w = word.to_string();
    if let Some(base) = w.strip_suffix("sses") {
        w = format!("{base}ss");
    } else if let Some(base) = w.strip_suffix("ies") {
        w = format!("{base}y");
    } else if w.ends_with("ss") {
        // keep
    } else if w.len() > 3 {
        if let Some(base) = w.strip_suffix('s') {
            w = base.to_string();
        }
    }
    if w.len() > 5 {
        if let Some(base) = w.strip_suffix("ing") {
            return base.to_string();
        }
    }
    if w.len() > 4 {
        if let Some(base) = w.strip_suffix("ed") {
            return base.to_string();
        }
    }
    w
}

/// Greedy two-stage unigram alignment (exact matches first, then stems),
/// letting each token match at most once.
fn meteor_alignment(reference: &[String], prediction: &[String]) -> Vec<(usize, usize)> {
    let mut matched_r = vec![false; reference.len()];
    let mut mapping: Vec<(usize, usize)> = Vec::new();
    let mut matched_p = vec![false; prediction.len()];

    for (pi, p) in prediction.iter().enumerate() {
        if let Some(ri) = reference
            .iter()
            .enumerate()
            .position(|(ri, r)| !matched_r[ri] && r == p)
        {
            matched_r[ri] = true;
            matched_p[pi] = true;
            mapping.push((pi, ri));
        }
    }
    for (pi, p) in prediction.iter().enumerate() {
        if matched_p[pi] {
            continue;
        }
        let ps = stem(p);
        if let Some(ri) = reference
            .iter()
            .enumerate()
            .position(|(ri, r)| !matched_r[ri] && stem(r) == ps)
        {
            matched_r[ri] = true;
            mapping.push((pi, ri));
        }
    }
    mapping.sort_unstable();
    mapping
}

/// Unigram METEOR with exact and stem matching stages: harmonic mean
/// `F = 10 p r / (r + 9 p)` discounted by the fragmentation penalty
/// `0.5 (chunks / matches)^3`.
pub fn meteor(reference: &[String], prediction: &[String]) -> Result<f64> {
    if reference.is_empty() || prediction.is_empty() {
        return Err(Error::Argument("METEOR needs non-empty reference and prediction".into()));
    }
    let mapping = meteor_alignment(reference, prediction);
    let m = mapping.len();
    if m == 0 {
        return Ok(0.0);
    }
    let p = m as f64 / prediction.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let mut chunks = 1usize;
    for pair in mapping.windows(2) {
        if pair[1].0 != pair[0].0 + 1 || pair[1].1 != pair[0].1 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(f * (1.0 - penalty))
}

/// Produces the contextual embedding of each token within a token list.
pub trait TokenEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Result<Array2<f64>>;
}

/// Embeds tokens with the pipeline's LM hidden states (token i in the causal
/// context of the tokens before it in the same window).
pub struct LmEmbedder<'a> {
    pub lm: &'a dyn LanguageModel,
    pub layer: usize,
}

impl TokenEmbedder for LmEmbedder<'_> {
    fn dim(&self) -> usize {
        self.lm.hidden_dim()
    }

    fn embed(&self, tokens: &[String]) -> Result<Array2<f64>> {
        if tokens.is_empty() {
            return Ok(Array2::zeros((0, self.dim())));
        }
        let ids = self.lm.vocab().ids(tokens.iter())?;
        self.lm.hidden_states(&ids, self.layer)
    }
}

/// Inverse document frequency over the training stories:
/// `idf(w) = ln((1 + N) / (1 + df(w)))`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IdfWeights {
    pub n_stories: usize,
    pub table: BTreeMap<String, f64>,
}

impl IdfWeights {
    pub fn from_stories(stories: &[WordTimeline]) -> Self {
        let n = stories.len();
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for story in stories {
            let mut seen: Vec<&str> = story.tokens().collect();
            seen.sort_unstable();
            seen.dedup();
            for token in seen {
                *df.entry(token.to_string()).or_default() += 1;
            }
        }
        let table = df
            .into_iter()
            .map(|(w, d)| (w, ((1 + n) as f64 / (1 + d) as f64).ln()))
            .collect();
        Self {
            n_stories: n,
            table,
        }
    }

    /// Unseen tokens get the maximal weight (document frequency zero).
    pub fn weight(&self, token: &str) -> f64 {
        self.table
            .get(token)
            .copied()
            .unwrap_or_else(|| ((1 + self.n_stories) as f64).ln())
    }

    pub fn is_empty(&self) -> bool {
        self.n_stories == 0
    }
}

/// IDF-weighted embedding recall: each reference token claims its best-cosine
/// match among prediction tokens.
pub fn bert_recall(
    reference: &[String],
    prediction: &[String],
    embedder: &dyn TokenEmbedder,
    idf: &IdfWeights,
) -> Result<f64> {
    if idf.is_empty() {
        return Err(Error::Config("IDF table is empty; compute it over the training stories".into()));
    }
    if reference.is_empty() {
        return Err(Error::Argument("recall is undefined for an empty reference".into()));
    }
    let emb_r = embedder.embed(reference)?;
    let emb_p = embedder.embed(prediction)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, token) in reference.iter().enumerate() {
        let w = idf.weight(token);
        den += w;
        if w == 0.0 || emb_p.nrows() == 0 {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..emb_p.nrows() {
            let c = crate::util::cosine(emb_r.row(i), emb_p.row(j));
            if c > best {
                best = c;
            }
        }
        num += w * best;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Similarity measure evaluated per window; larger is always better (WER is
/// negated for this purpose).
pub trait WindowSimilarity {
    fn name(&self) -> &'static str;
    fn similarity(&self, reference: &[String], prediction: &[String]) -> Result<f64>;
}

pub struct WerSimilarity;

impl WindowSimilarity for WerSimilarity {
    fn name(&self) -> &'static str {
        "wer"
    }
    fn similarity(&self, reference: &[String], prediction: &[String]) -> Result<f64> {
        Ok(-wer(reference, prediction)?)
    }
}

pub struct BleuSimilarity;

impl WindowSimilarity for BleuSimilarity {
    fn name(&self) -> &'static str {
        "bleu"
    }
    fn similarity(&self, reference: &[String], prediction: &[String]) -> Result<f64> {
        Ok(bleu1(reference, prediction))
    }
}

pub struct MeteorSimilarity;

impl WindowSimilarity for MeteorSimilarity {
    fn name(&self) -> &'static str {
        "meteor"
    }
    fn similarity(&self, reference: &[String], prediction: &[String]) -> Result<f64> {
        if prediction.is_empty() {
            return Ok(0.0);
        }
        meteor(reference, prediction)
    }
}

pub struct BertSimilarity<'a> {
    pub embedder: &'a dyn TokenEmbedder,
    pub idf: &'a IdfWeights,
}

impl WindowSimilarity for BertSimilarity<'_> {
    fn name(&self) -> &'static str {
        "bert"
    }
    fn similarity(&self, reference: &[String], prediction: &[String]) -> Result<f64> {
        bert_recall(reference, prediction, self.embedder, self.idf)
    }
}

/// `n` unguided LM sample paths placed on the given word-time grid.
pub fn random_baseline(
    lm: &dyn LanguageModel,
    word_times: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<WordTimeline>> {
    if n < 2 {
        return Err(Error::Argument("need at least 2 baseline sequences".into()));
    }
    let streams = SeedStreams::new(seed);
    let vocab = lm.vocab();
    (0..n)
        .map(|i| {
            let mut rng = streams.stream(&format!("baseline/{i}"));
            let ids = sample_tokens(lm, word_times.len(), &mut rng)?;
            let entries = ids
                .iter()
                .zip(word_times)
                .map(|(&id, &t)| (vocab.token(id).to_string(), t))
                .collect();
            WordTimeline::new(entries)
        })
        .collect()
}

/// Random-baseline statistics backing Eq.-style normalization: per-window
/// mean/std plus the distribution of sequence-average similarity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomBaselineStats {
    pub per_window_mean: Vec<f64>,
    pub per_window_std: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowScore {
    pub start: f64,
    pub similarity: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedScores {
    /// Fraction of windows that strictly beat the per-window baseline mean.
    pub sim_pos: f64,
    /// Z-score of the sequence-average similarity under the baseline
    /// distribution.
    pub sim_zs: f64,
    pub per_window: Vec<WindowScore>,
    pub baseline: RandomBaselineStats,
}

/// Positive rate and story-zscore of `prediction` against `baselines`, all
/// evaluated on identical windows derived from (reference, prediction).
pub fn normalized_scores(
    reference: &WordTimeline,
    prediction: &WordTimeline,
    baselines: &[WordTimeline],
    similarity: &dyn WindowSimilarity,
    width: f64,
    stride: f64,
) -> Result<NormalizedScores> {
    if baselines.len() < 2 {
        return Err(Error::Argument("need at least 2 baseline sequences".into()));
    }
    let pairs = window_pairs(reference, prediction, width, stride)?;
    if pairs.windows.is_empty() {
        return Err(Error::Argument("no evaluation windows (story shorter than the window)".into()));
    }
    let s = pairs.windows.len();

    let mut pred_sims = Vec::with_capacity(s);
    for w in &pairs.windows {
        pred_sims.push(similarity.similarity(&w.reference, &w.prediction)?);
    }

    // baselines share the prediction's grid, so the same window starts apply
    let mut base_sims: Vec<Vec<f64>> = Vec::with_capacity(baselines.len());
    for baseline in baselines {
        let mut sims = Vec::with_capacity(s);
        for w in &pairs.windows {
            let tokens = tokens_in_window(baseline, w.start, width);
            sims.push(similarity.similarity(&w.reference, &tokens)?);
        }
        base_sims.push(sims);
    }

    let mut per_window_mean = Vec::with_capacity(s);
    let mut per_window_std = Vec::with_capacity(s);
    for i in 0..s {
        let col: Vec<f64> = base_sims.iter().map(|b| b[i]).collect();
        per_window_mean.push(mean(&col));
        per_window_std.push(sample_std(&col));
    }

    let positives = pred_sims
        .iter()
        .zip(&per_window_mean)
        .filter(|(sim, mu)| **sim - **mu > 0.0)
        .count();
    let sim_pos = positives as f64 / s as f64;

    let avg_pred = mean(&pred_sims);
    let avgs: Vec<f64> = base_sims.iter().map(|b| mean(b)).collect();
    let mu = mean(&avgs);
    let sigma = sample_std(&avgs);
    if sigma == 0.0 {
        return Err(Error::Undefined("baseline similarity spread is zero; z-score undefined".into()));
    }
    let sim_zs = (avg_pred - mu) / sigma;

    let per_window = pairs
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| WindowScore {
            start: w.start,
            similarity: pred_sims[i],
            baseline_mean: per_window_mean[i],
            baseline_std: per_window_std[i],
        })
        .collect();

    Ok(NormalizedScores {
        sim_pos,
        sim_zs,
        per_window,
        baseline: RandomBaselineStats {
            per_window_mean,
            per_window_std,
            mean: mu,
            std: sigma,
            n_sequences: baselines.len(),
        },
    })
}

/// Positive rate / story-zscore pair for one similarity metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricScores {
    pub sim_pos: f64,
    pub sim_zs: f64,
}

/// Scores for the four standard metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub wer: MetricScores,
    pub bleu: MetricScores,
    pub meteor: MetricScores,
    pub bert: MetricScores,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinPoint {
    pub x_center: f64,
    pub y_mean: f64,
    pub y_std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub spearman: f64,
    pub bins: Vec<BinPoint>,
}

/// Spearman rank correlation between mapper quality and reconstruction
/// quality, plus binned mean/std line data for plotting.
pub fn correlation_report(runs: &[(f64, f64)]) -> Result<CorrelationReport> {
    if runs.len() < 3 {
        return Err(Error::Argument("need at least 3 runs for a correlation".into()));
    }
    let xs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.1).collect();
    if xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0]) {
        return Err(Error::Undefined("correlation undefined for constant input".into()));
    }
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..runs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Undefined("correlation undefined for constant ranks".into()));
    }
    let spearman = cov / (vx * vy).sqrt();

    // error-band line data: bin x, mean +/- std of y per bin
    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n_bins = 5.min(runs.len());
    let span = (xmax - xmin).max(1e-12);
    let mut bins = Vec::new();
    for b in 0..n_bins {
        let lo = xmin + span * b as f64 / n_bins as f64;
        let hi = xmin + span * (b + 1) as f64 / n_bins as f64;
        let members: Vec<f64> = runs
            .iter()
            .filter(|(x, _)| {
                (*x >= lo && *x < hi) || (b == n_bins - 1 && (*x - hi).abs() < 1e-12)
            })
            .map(|(_, y)| *y)
            .collect();
        if members.is_empty() {
            continue;
        }
        bins.push(BinPoint {
            x_center: (lo + hi) / 2.0,
            y_mean: mean(&members),
            y_std: sample_std(&members),
            count: members.len(),
        });
    }
    Ok(CorrelationReport { spearman, bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn words(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn timeline(entries: &[(&str, f64)]) -> WordTimeline {
        WordTimeline::new(entries.iter().map(|(w, t)| (w.to_string(), *t)).collect()).unwrap()
    }

    #[test]
    fn sixty_second_story_has_21_starts() {
        assert_eq!(window_starts(0.0, 60.0, 20.0, 2.0).len(), 21);
    }

    #[test]
    fn identical_timelines_give_identical_windows() {
        let tl = timeline(&[("a", 1.0), ("b", 11.0), ("c", 21.0), ("d", 31.0)]);
        let pairs = window_pairs(&tl, &tl, 20.0, 2.0).unwrap();
        assert!(!pairs.windows.is_empty());
        for w in &pairs.windows {
            assert_eq!(w.reference, w.prediction);
        }
    }

    #[test]
    fn word_at_window_end_belongs_to_next() {
        let rl = timeline(&[("a", 0.0), ("b", 20.0), ("c", 40.0)]);
        let pairs = window_pairs(&rl, &rl, 20.0, 20.0).unwrap();
        assert_eq!(pairs.windows.len(), 2);
        assert_eq!(pairs.windows[0].reference, words(&["a"]));
        assert_eq!(pairs.windows[1].reference, words(&["b"]));
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&words(&["a", "b", "c"]), &words(&["a", "b", "c"])).unwrap(), 0.0);
        assert_abs_diff_eq!(
            wer(&words(&["a", "b", "c"]), &words(&["a", "x", "c"])).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        assert_eq!(wer(&words(&["a", "b", "c"]), &[]).unwrap(), 1.0);
        assert!(wer(&[], &words(&["a"])).is_err());
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1(&words(&["a", "b"]), &words(&["a", "b"])), 1.0);
        assert_abs_diff_eq!(
            bleu1(&words(&["the", "cat", "sat"]), &words(&["the", "the", "cat"])),
            2.0 / 3.0,
            epsilon = 1e-12
        );
        assert_eq!(bleu1(&words(&["a", "b"]), &words(&["c", "d"])), 0.0);
        assert_eq!(bleu1(&words(&["a"]), &[]), 0.0);
    }

    #[test]
    fn stemmer_examples() {
        assert_eq!(stem("cats"), "cat");
        assert_eq!(stem("sleeps"), "sleep");
        assert_eq!(stem("stories"), "story");
        assert_eq!(stem("glasses"), "glass");
        assert_eq!(stem("pass"), "pass");
        assert_eq!(stem("walked"), "walk");
    }

    #[test]
    fn meteor_identity_has_single_chunk_penalty() {
        let r = words(&["a", "b", "c", "d"]);
        let score = meteor(&r, &r).unwrap();
        let m = 4.0;
        let penalty = 0.5 * (1.0 / m_pow3(m));
        assert_abs_diff_eq!(score, 1.0 * (1.0 - penalty), epsilon = 1e-12);
    }

    fn m_pow3(m: f64) -> f64 {
        m * m * m
    }

    #[test]
    fn meteor_zero_overlap_is_zero() {
        assert_eq!(
            meteor(&words(&["a", "b"]), &words(&["c", "d"])).unwrap(),
            0.0
        );
    }

    #[test]
    fn meteor_stem_stage_matches() {
        // stemmer maps cats->cat and sleeps->sleep: 2 matches
        let r = words(&["cats", "sleep"]);
        let p = words(&["cat", "sleeps"]);
        let mapping = meteor_alignment(&r, &p);
        assert_eq!(mapping.len(), 2);
        let score = meteor(&r, &p).unwrap();
        // p = r = 1 -> F = 1; single chunk (0,0),(1,1) -> penalty 0.5/8
        assert_abs_diff_eq!(score, 1.0 - 0.5 * (1.0f64 / 8.0) * 8.0 / 8.0, epsilon = 1e-9);
    }

    struct OneHot {
        vocab: Vec<String>,
    }

    impl TokenEmbedder for OneHot {
        fn dim(&self) -> usize {
            self.vocab.len()
        }
        fn embed(&self, tokens: &[String]) -> Result<Array2<f64>> {
            let mut out = Array2::zeros((tokens.len(), self.vocab.len()));
            for (i, t) in tokens.iter().enumerate() {
                let j = self.vocab.iter().position(|v| v == t).unwrap();
                out[[i, j]] = 1.0;
            }
            Ok(out)
        }
    }

    fn test_idf() -> IdfWeights {
        IdfWeights::from_stories(&[
            timeline(&[("a", 0.0), ("b", 1.0)]),
            timeline(&[("a", 0.0), ("c", 1.0)]),
        ])
    }

    #[test]
    fn bert_recall_self_match_uniform_idf() {
        let embedder = OneHot {
            vocab: words(&["a", "b", "c", "d"]),
        };
        let mut idf = test_idf();
        // force uniform weights
        for v in idf.table.values_mut() {
            *v = 1.0;
        }
        let r = words(&["a", "b", "c"]);
        let got = bert_recall(&r, &r, &embedder, &idf).unwrap();
        assert_abs_diff_eq!(got, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bert_recall_zero_idf_token_ignored() {
        let embedder = OneHot {
            vocab: words(&["a", "b"]),
        };
        let mut idf = test_idf();
        idf.table.insert("a".into(), 0.0);
        idf.table.insert("b".into(), 1.0);
        // reference [a, b], prediction [b]: a contributes nothing
        let got = bert_recall(&words(&["a", "b"]), &words(&["b"]), &embedder, &idf).unwrap();
        assert_abs_diff_eq!(got, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bert_recall_matches_double_loop_oracle() {
        let embedder = OneHot {
            vocab: words(&["a", "b", "c", "d", "e"]),
        };
        let idf = test_idf();
        let r = words(&["a", "b", "c"]);
        let p = words(&["b", "d"]);
        let got = bert_recall(&r, &p, &embedder, &idf).unwrap();
        // brute force
        let er = embedder.embed(&r).unwrap();
        let ep = embedder.embed(&p).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, tok) in r.iter().enumerate() {
            let w = idf.weight(tok);
            den += w;
            let mut best = f64::NEG_INFINITY;
            for j in 0..p.len() {
                best = best.max(crate::util::cosine(er.row(i), ep.row(j)));
            }
            num += w * best;
        }
        assert_abs_diff_eq!(got, num / den, epsilon = 1e-9);
    }

    #[test]
    fn bert_recall_empty_idf_is_config_error() {
        let embedder = OneHot {
            vocab: words(&["a"]),
        };
        let idf = IdfWeights {
            n_stories: 0,
            table: BTreeMap::new(),
        };
        assert!(matches!(
            bert_recall(&words(&["a"]), &words(&["a"]), &embedder, &idf),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bert_recall_one_hot_reduces_to_idf_weighted_unigram_recall() {
        let embedder = OneHot {
            vocab: words(&["a", "b", "c", "d"]),
        };
        let idf = test_idf();
        let r = words(&["a", "b", "d"]);
        let p = words(&["b", "b", "c"]);
        let got = bert_recall(&r, &p, &embedder, &idf).unwrap();
        // one-hot cosine is 1 iff tokens equal: weighted fraction of
        // reference tokens present (anywhere) in the prediction
        let expect: f64 = r
            .iter()
            .map(|t| {
                if p.contains(t) {
                    idf.weight(t)
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / r.iter().map(|t| idf.weight(t)).sum::<f64>();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }

    #[test]
    fn strict_positive_rate_and_zero_numerator() {
        // one window; prediction sim 0.5; baselines {1.0, 0.0} -> mu = sim
        let reference = timeline(&[("a", 0.0), ("b", 1.0), ("z", 2.0)]);
        let prediction = timeline(&[("a", 0.0), ("c", 1.0)]);
        let b_hit = timeline(&[("a", 0.0), ("b", 1.0)]);
        let b_miss = timeline(&[("c", 0.0), ("d", 1.0)]);
        let scores = normalized_scores(
            &reference,
            &prediction,
            &[b_hit, b_miss],
            &BleuSimilarity,
            2.0,
            2.0,
        )
        .unwrap();
        assert_eq!(scores.per_window.len(), 1);
        assert_eq!(scores.per_window[0].similarity, 0.5);
        assert_eq!(scores.baseline.per_window_mean[0], 0.5);
        // equality is not a positive
        assert_eq!(scores.sim_pos, 0.0);
        // average equals mu -> z-score exactly zero
        assert_eq!(scores.sim_zs, 0.0);
    }

    #[test]
    fn zero_sigma_is_undefined() {
        let reference = timeline(&[("a", 0.0), ("z", 1.0)]);
        let prediction = timeline(&[("a", 0.0)]);
        let same = timeline(&[("b", 0.0)]);
        assert!(matches!(
            normalized_scores(
                &reference,
                &prediction,
                &[same.clone(), same],
                &BleuSimilarity,
                1.0,
                1.0
            ),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn spearman_monotone_extremes() {
        let up: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, (i * i) as f64)).collect();
        assert_abs_diff_eq!(correlation_report(&up).unwrap().spearman, 1.0, epsilon = 1e-12);
        let down: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, -(i as f64))).collect();
        assert_abs_diff_eq!(
            correlation_report(&down).unwrap().spearman,
            -1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn constant_correlation_is_undefined() {
        let flat = vec![(1.0, 2.0), (1.0, 3.0), (1.0, 4.0)];
        assert!(matches!(
            correlation_report(&flat),
            Err(Error::Undefined(_))
        ));
        assert!(matches!(
            correlation_report(&[(1.0, 2.0), (2.0, 3.0)]),
            Err(Error::Argument(_))
        ));
    }
}
