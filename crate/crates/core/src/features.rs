//! Stimulus features: per-word context embeddings, windowed-sinc resampling
//! onto the acquisition grid, and FIR delay expansion.

use ndarray::{s, Array2};

use crate::data::{EmbeddingSeries, WordTimeline};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;

/// One semantic vector per word, tagged with the word's time.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorPairs {
    vectors: Array2<f64>,
    times: Vec<f64>,
}

impl WordVectorPairs {
    pub fn new(vectors: Array2<f64>, times: Vec<f64>) -> Result<Self> {
        if vectors.nrows() != times.len() {
            return Err(Error::Shape(format!(
                "{} vectors vs {} times",
                vectors.nrows(),
                times.len()
            )));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation("word vector times must be non-decreasing".into()));
        }
        Ok(Self { vectors, times })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Embeds every word using the hidden state of its trailing context window:
/// word i is represented by the LM state at the final position of
/// `(w_{i-window}, ..., w_i)`, with shorter contexts near the story start.
pub fn embed_contexts(
    lm: &dyn LanguageModel,
    timeline: &WordTimeline,
    window: usize,
    layer: usize,
) -> Result<WordVectorPairs> {
    if timeline.is_empty() {
        return Err(Error::Argument("cannot embed an empty timeline".into()));
    }
    let ids = lm.vocab().ids(timeline.tokens())?;
    let mut vectors = Array2::zeros((ids.len(), lm.hidden_dim()));
    for i in 0..ids.len() {
        let start = i.saturating_sub(window);
        let state = lm.hidden_state(&ids[start..=i], layer)?;
        for (j, v) in state.iter().enumerate() {
            vectors[[i, j]] = *v;
        }
    }
    WordVectorPairs::new(vectors, timeline.times().collect())
}

/// Lanczos kernel: `sinc(x) * sinc(x / lobes)` for `|x| < lobes`, else 0.
pub fn lanczos_kernel(x: f64, lobes: usize) -> f64 {
    let a = lobes as f64;
    if x.abs() >= a {
        return 0.0;
    }
    sinc(x) * sinc(x / a)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resamples irregular word vectors onto a uniform target grid with a
/// windowed-sinc kernel. Weights are normalized per output row so constants
/// are preserved; rows with no kernel support become zero vectors.
pub fn lanczos_resample(
    pairs: &WordVectorPairs,
    target_times: &[f64],
    lobes: usize,
) -> Result<EmbeddingSeries> {
    if lobes < 1 {
        return Err(Error::Argument(format!("lobes must be >= 1, got {lobes}")));
    }
    if pairs.is_empty() {
        return Err(Error::Argument("cannot resample empty word vectors".into()));
    }
    if target_times.len() < 2 {
        return Err(Error::Argument("need at least two target times".into()));
    }
    let tr = target_times[1] - target_times[0];
    if tr <= 0.0 {
        return Err(Error::Argument("target times must be increasing".into()));
    }
    for w in target_times.windows(2) {
        if ((w[1] - w[0]) - tr).abs() > 1e-9 * tr.abs().max(1.0) {
            return Err(Error::Argument("target times must be uniformly spaced".into()));
        }
    }

    let dim = pairs.dim();
    let mut out = Array2::zeros((target_times.len(), dim));
    for (row, &tau) in target_times.iter().enumerate() {
        let mut total = 0.0;
        let mut acc = vec![0.0; dim];
        for (i, &ti) in pairs.times().iter().enumerate() {
            let w = lanczos_kernel((ti - tau) / tr, lobes);
            if w == 0.0 {
                continue;
            }
            total += w;
            let v = pairs.vectors().row(i);
            for j in 0..dim {
                acc[j] += w * v[j];
            }
        }
        if total.abs() > 1e-12 {
            for j in 0..dim {
                out[[row, j]] = acc[j] / total;
            }
        }
    }
    EmbeddingSeries::new(out, target_times.to_vec(), false)
}

/// Concatenates delayed copies of the series: row t of the output is
/// `[x_{t-1}, x_{t-2}, x_{t-3}, x_{t-4}]` for the default delays, zero-padded
/// before the series start. Output dimension is `delays.len() * n`.
pub fn fir_expand(series: &EmbeddingSeries, delays: &[usize]) -> Result<EmbeddingSeries> {
    if series.delayed() {
        return Err(Error::Argument("series is already FIR-expanded".into()));
    }
    if delays.is_empty() || delays.contains(&0) {
        return Err(Error::Argument("delays must be positive".into()));
    }
    let expanded = fir_delay_matrix(series.vectors(), delays);
    EmbeddingSeries::new(expanded, series.times().to_vec(), true)
}

/// The default four-delay expansion.
pub const FIR_DELAYS: [usize; 4] = [1, 2, 3, 4];

/// Delay-and-concatenate on a raw matrix; shared with the word-rate design
/// matrix construction.
pub fn fir_delay_matrix(data: &Array2<f64>, delays: &[usize]) -> Array2<f64> {
    let (m, n) = data.dim();
    let mut out = Array2::zeros((m, delays.len() * n));
    for (k, &delay) in delays.iter().enumerate() {
        for t in 0..m {
            if t >= delay {
                out.slice_mut(s![t, k * n..(k + 1) * n])
                    .assign(&data.row(t - delay));
            }
        }
    }
    out
}
