//! Linear word-rate model: ridge regression from FIR-delayed auditory-cortex
//! voxels to words-per-TR counts, used to predict the word-time grid for
//! decoding.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{FmriSeries, WordTimeline};
use crate::error::{Error, Result};
use crate::features::{fir_delay_matrix, FIR_DELAYS};
use crate::util::solve_spd;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordRateModel {
    /// One weight per delayed auditory voxel plus a trailing bias.
    pub weights: Vec<f64>,
    pub auditory_voxel_ids: Vec<i64>,
    pub ridge_lambda: f64,
}

/// Words falling in each TR interval `[t, t + TR)`.
pub fn words_per_tr(fmri: &FmriSeries, timeline: &WordTimeline) -> Vec<f64> {
    let mut counts = vec![0.0; fmri.n_trs()];
    let tr = fmri.tr_seconds();
    for t in timeline.times() {
        let offset = (t - fmri.t0()) / tr;
        if offset >= 0.0 && (offset as usize) < counts.len() {
            counts[offset as usize] += 1.0;
        }
    }
    counts
}

fn design_matrix(aud: &FmriSeries) -> Array2<f64> {
    // FIR delays plus a bias column of ones.
    let delayed = fir_delay_matrix(aud.data(), &FIR_DELAYS);
    let (m, k) = delayed.dim();
    let mut design = Array2::ones((m, k + 1));
    design.slice_mut(ndarray::s![.., ..k]).assign(&delayed);
    design
}

/// Fits the ridge regression. The intercept is left unpenalized so that in
/// the large-lambda limit predictions collapse to the mean training rate.
pub fn fit_word_rate(
    aud: &FmriSeries,
    timeline: &WordTimeline,
    ridge_lambda: f64,
) -> Result<WordRateModel> {
    if aud.n_trs() < 2 {
        return Err(Error::Argument("need at least 2 TRs to fit a word-rate model".into()));
    }
    if ridge_lambda < 0.0 {
        return Err(Error::Argument("ridge_lambda must be >= 0".into()));
    }
    let t_first = timeline.times().next();
    let in_scan = t_first.map(|t| t < aud.time(aud.n_trs() - 1) + aud.tr_seconds());
    if timeline.is_empty() || in_scan != Some(true) {
        return Err(Error::Argument("timeline does not overlap the scan interval".into()));
    }
    if aud.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Fit("auditory design is all zeros".into()));
    }

    let design = design_matrix(aud);
    let counts = Array1::from(words_per_tr(aud, timeline));
    let k = design.ncols();

    let mut gram = design.t().dot(&design);
    for i in 0..k - 1 {
        gram[[i, i]] += ridge_lambda;
    }
    // tiny jitter keeps the unpenalized-intercept system factorable
    gram[[k - 1, k - 1]] += 1e-12;
    let rhs = design.t().dot(&counts);
    let weights = solve_spd(&gram, &rhs)?;

    Ok(WordRateModel {
        weights: weights.to_vec(),
        auditory_voxel_ids: aud.voxel_ids().to_vec(),
        ridge_lambda,
    })
}

/// Per-TR predicted rate (before clipping and rounding). Columns are aligned
/// to the model's voxel ids, so a permuted series predicts identically.
pub fn predict_rates(model: &WordRateModel, aud: &FmriSeries) -> Result<Vec<f64>> {
    let expected = 4 * model.auditory_voxel_ids.len() + 1;
    if model.weights.len() != expected {
        return Err(Error::Shape(format!(
            "model has {} weights, expected {expected}",
            model.weights.len()
        )));
    }
    let aligned = aud.select_voxels(&model.auditory_voxel_ids)?;
    let design = design_matrix(&aligned);
    let w = Array1::from(model.weights.clone());
    Ok(design.dot(&w).to_vec())
}

/// Predicts word times: per-TR rates are clipped at zero, rounded to counts,
/// and each TR's words are placed uniformly inside it.
pub fn predict_word_times(model: &WordRateModel, aud: &FmriSeries) -> Result<Vec<f64>> {
    let rates = predict_rates(model, aud)?;
    let tr = aud.tr_seconds();
    let mut times = Vec::new();
    for (t, rate) in rates.iter().enumerate() {
        let count = rate.max(0.0).round() as usize;
        let start = aud.time(t);
        for j in 0..count {
            times.push(start + (j as f64 + 0.5) / count as f64 * tr);
        }
    }
    Ok(times)
}

pub fn save_word_rate(model: &WordRateModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(model)?)?;
    Ok(())
}

pub fn load_word_rate(path: &Path) -> Result<WordRateModel> {
    let raw = fs::read(path)?;
    let model: WordRateModel =
        serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("bad word-rate model: {e}")))?;
    if model.weights.len() != 4 * model.auditory_voxel_ids.len() + 1 {
        return Err(Error::Format("word-rate weight length does not match voxel ids".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Synthetic scan whose single informative voxel linearly encodes the
    /// delayed word count.
    fn rate_scenario(rate: usize, m: usize) -> (FmriSeries, WordTimeline) {
        let tr = 2.0;
        let mut counts = vec![0.0; m];
        let mut entries = Vec::new();
        for t in 0..m {
            for j in 0..rate {
                entries.push((
                    format!("w{j}"),
                    t as f64 * tr + (j as f64 + 0.5) / rate as f64 * tr,
                ));
                counts[t] += 1.0;
            }
        }
        let mut data = Array2::zeros((m, 2));
        for t in 0..m {
            // voxel 0 sees count at t-1, voxel 1 sees count at t-2
            if t >= 1 {
                data[[t, 0]] = counts[t - 1];
            }
            if t >= 2 {
                data[[t, 1]] = 0.5 * counts[t - 2];
            }
        }
        let fmri = FmriSeries::new(data, tr, 0.0, vec![7, 9]).unwrap();
        let timeline = WordTimeline::new(entries).unwrap();
        (fmri, timeline)
    }

    #[test]
    fn constant_rate_recovered() {
        let (fmri, timeline) = rate_scenario(3, 60);
        let train = fmri.slice_trs(0, 48).unwrap();
        let model = fit_word_rate(&train, &timeline, 1.0).unwrap();
        let held = fmri.slice_trs(48, 60).unwrap();
        let rates = predict_rates(&model, &held).unwrap();
        for r in rates.iter().skip(2) {
            assert_abs_diff_eq!(*r, 3.0, epsilon = 0.1);
        }
    }

    #[test]
    fn huge_lambda_predicts_mean_rate() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m = 50;
        let data = Array2::from_shape_fn((m, 3), |_| rng.gen::<f64>());
        let fmri = FmriSeries::new(data, 2.0, 0.0, vec![0, 1, 2]).unwrap();
        // alternating 2 and 4 words per TR, mean 3
        let mut entries = Vec::new();
        for t in 0..m {
            let c = if t % 2 == 0 { 2 } else { 4 };
            for j in 0..c {
                entries.push(("w".to_string(), t as f64 * 2.0 + (j as f64 + 0.5) / c as f64 * 2.0));
            }
        }
        let timeline = WordTimeline::new(entries).unwrap();
        let model = fit_word_rate(&fmri, &timeline, 1e12).unwrap();
        let rates = predict_rates(&model, &fmri).unwrap();
        let mean_rate = 3.0;
        for r in rates {
            assert_abs_diff_eq!(r, mean_rate, epsilon = 1e-3);
        }
    }

    #[test]
    fn voxel_permutation_invariance() {
        let (fmri, timeline) = rate_scenario(2, 40);
        let model = fit_word_rate(&fmri, &timeline, 1.0).unwrap();
        let permuted = fmri.select_voxels(&[9, 7]).unwrap();
        let a = predict_rates(&model, &fmri).unwrap();
        let b = predict_rates(&model, &permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_placement_rule() {
        // c_t = 2 for the TR starting at 10.0 s with TR = 2 -> [10.5, 11.5]
        let model = WordRateModel {
            weights: vec![0.0, 0.0, 0.0, 0.0, 2.0],
            auditory_voxel_ids: vec![0],
            ridge_lambda: 1.0,
        };
        let data = Array2::zeros((6, 1));
        let fmri = FmriSeries::new(data, 2.0, 0.0, vec![0]).unwrap();
        let times = predict_word_times(&model, &fmri).unwrap();
        assert_eq!(times.len(), 12);
        assert_abs_diff_eq!(times[10], 10.5, epsilon = 1e-12);
        assert_abs_diff_eq!(times[11], 11.5, epsilon = 1e-12);
    }

    #[test]
    fn negative_rates_clip_to_empty() {
        let model = WordRateModel {
            weights: vec![0.0, 0.0, 0.0, 0.0, -1.5],
            auditory_voxel_ids: vec![0],
            ridge_lambda: 1.0,
        };
        let fmri = FmriSeries::new(Array2::zeros((4, 1)), 2.0, 0.0, vec![0]).unwrap();
        assert!(predict_word_times(&model, &fmri).unwrap().is_empty());
    }

    #[test]
    fn times_strictly_increasing_inside_trs() {
        let (fmri, timeline) = rate_scenario(3, 40);
        let model = fit_word_rate(&fmri, &timeline, 1.0).unwrap();
        let times = predict_word_times(&model, &fmri).unwrap();
        for w in times.windows(2) {
            assert!(w[1] > w[0]);
        }
        // every time lies inside the scan
        for t in &times {
            assert!(*t >= fmri.t0() && *t < fmri.t0() + fmri.n_trs() as f64 * fmri.tr_seconds());
        }
    }

    #[test]
    fn count_sum_matches_rounded_rates() {
        let (fmri, timeline) = rate_scenario(2, 30);
        let model = fit_word_rate(&fmri, &timeline, 0.5).unwrap();
        let times = predict_word_times(&model, &fmri).unwrap();
        let rates = predict_rates(&model, &fmri).unwrap();
        let expected: usize = rates.iter().map(|r| r.max(0.0).round() as usize).sum();
        assert_eq!(times.len(), expected);
    }

    #[test]
    fn all_zero_design_is_fit_error() {
        let fmri = FmriSeries::new(Array2::zeros((10, 2)), 2.0, 0.0, vec![0, 1]).unwrap();
        let timeline = WordTimeline::new(vec![("a".into(), 1.0)]).unwrap();
        assert!(matches!(
            fit_word_rate(&fmri, &timeline, 1.0),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn voxel_id_mismatch_is_shape_error() {
        let (fmri, timeline) = rate_scenario(2, 20);
        let model = fit_word_rate(&fmri, &timeline, 1.0).unwrap();
        let other = FmriSeries::new(Array2::ones((20, 1)), 2.0, 0.0, vec![3]).unwrap();
        assert!(matches!(predict_rates(&model, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let (fmri, timeline) = rate_scenario(2, 20);
        let model = fit_word_rate(&fmri, &timeline, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wr.json");
        save_word_rate(&model, &path).unwrap();
        let back = load_word_rate(&path).unwrap();
        assert_eq!(model.weights, back.weights);
        assert_eq!(model.auditory_voxel_ids, back.auditory_voxel_ids);
    }
}
