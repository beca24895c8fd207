//! Stage B: beam-search text generation guided by predicted text embeddings.
//!
//! At each predicted word time, every beam proposes its top LM continuations;
//! candidates are ranked by the similarity between their trailing-context
//! embedding and the target embedding nearest that time, and the best ones
//! survive. With guidance off the search reduces to ordinary LM beam search.

use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSeries, FmriSeries, WordTimeline};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::mapper::{forward_map, MapperCheckpoint};
use crate::util::cosine;
use crate::word_rate::{predict_word_times, WordRateModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    Mapper,
    Oracle,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Continuations proposed per beam each step.
    pub continuations: usize,
    pub guidance: Guidance,
    /// Reserved for stochastic proposal variants; the search itself is
    /// fully deterministic.
    pub seed: u64,
    pub embed_window: usize,
    /// Scoring tap; `None` selects the LM's middle layer.
    pub embed_layer: Option<usize>,
    /// Mixing weight for length-normalized LM log probability in the
    /// ranking score; 0 ranks by similarity alone.
    pub lm_weight: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 10,
            continuations: 20,
            guidance: Guidance::Mapper,
            seed: 0,
            embed_window: 5,
            embed_layer: None,
            lm_weight: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.continuations == 0 {
            return Err(Error::Validation("beam_width and continuations must be >= 1".into()));
        }
        if self.lm_weight < 0.0 {
            return Err(Error::Validation("lm_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// One partial transcript in the beam.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub times: Vec<f64>,
    /// Cumulative LM log probability (always <= 0).
    pub lm_logprob: f64,
    /// Sum of per-word guidance cosines; see [`Self::guidance_score`].
    guidance_sum: f64,
}

impl BeamHypothesis {
    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            times: Vec::new(),
            lm_logprob: 0.0,
            guidance_sum: 0.0,
        }
    }

    /// Mean per-word cosine to the predicted embeddings.
    pub fn guidance_score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.guidance_sum / self.tokens.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn rank_key(&self, cfg: &DecodeConfig) -> f64 {
        match cfg.guidance {
            Guidance::None => self.lm_logprob,
            _ => {
                let lm_norm = self.lm_logprob / self.len().max(1) as f64;
                self.guidance_score() + cfg.lm_weight * lm_norm
            }
        }
    }
}

/// Similarity of a candidate's trailing context to the target embedding at
/// the candidate's last word time: the context window is embedded exactly as
/// in stimulus feature extraction, then compared by cosine to the nearest
/// target row.
pub fn score_continuation(
    candidate: &BeamHypothesis,
    target: &EmbeddingSeries,
    lm: &dyn LanguageModel,
    window: usize,
    layer: usize,
) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Argument("candidate must contain at least one token".into()));
    }
    if target.is_empty() {
        return Err(Error::Argument("target embedding series is empty".into()));
    }
    let len = candidate.tokens.len();
    let start = len.saturating_sub(window + 1);
    let state = lm.hidden_state(&candidate.tokens[start..], layer)?;
    let state = ndarray::Array1::from(state);
    let row = target.nearest_row(*candidate.times.last().unwrap());
    Ok(cosine(state.view(), target.vectors().row(row)))
}

fn compare_hypotheses(a: &BeamHypothesis, b: &BeamHypothesis, cfg: &DecodeConfig) -> std::cmp::Ordering {
    b.rank_key(cfg)
        .partial_cmp(&a.rank_key(cfg))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| {
            b.lm_logprob
                .partial_cmp(&a.lm_logprob)
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Extends every beam by its top-`continuations` LM proposals at `next_time`,
/// scores the candidates, and keeps the best `beam_width`.
pub fn beam_step(
    beams: &[BeamHypothesis],
    next_time: f64,
    target: Option<&EmbeddingSeries>,
    lm: &dyn LanguageModel,
    cfg: &DecodeConfig,
) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    if beams.is_empty() {
        return Err(Error::Argument("beam set must be non-empty".into()));
    }
    if !matches!(cfg.guidance, Guidance::None) && target.is_none() {
        return Err(Error::Argument("guided decoding requires a target series".into()));
    }
    let bos = lm.vocab().bos();
    let layer = cfg.embed_layer.unwrap_or_else(|| lm.default_embedding_layer());

    let mut candidates = Vec::with_capacity(beams.len() * cfg.continuations);
    for beam in beams {
        let mut context = Vec::with_capacity(beam.tokens.len() + 1);
        context.push(bos);
        context.extend_from_slice(&beam.tokens);
        let mut probs = lm.next_token_distribution(&context)?;
        probs[bos] = 0.0;

        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&x, &y| {
            probs[y]
                .partial_cmp(&probs[x])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(x.cmp(&y))
        });
        for &token in order.iter().take(cfg.continuations) {
            if probs[token] <= 0.0 {
                continue;
            }
            let mut cand = beam.clone();
            cand.tokens.push(token);
            cand.times.push(next_time);
            cand.lm_logprob += probs[token].ln();
            if let Some(target) = target {
                if !matches!(cfg.guidance, Guidance::None) {
                    cand.guidance_sum +=
                        score_continuation(&cand, target, lm, cfg.embed_window, layer)?;
                }
            }
            candidates.push(cand);
        }
    }
    candidates.sort_by(|a, b| compare_hypotheses(a, b, cfg));
    candidates.truncate(cfg.beam_width);
    Ok(candidates)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeStep {
    pub time: f64,
    pub best_guidance: f64,
    pub best_lm_logprob: f64,
    pub beam_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeLog {
    pub steps: Vec<DecodeStep>,
    pub final_guidance: f64,
    pub final_lm_logprob: f64,
}

/// Full guided decode: word times from the word-rate model, target embeddings
/// from the mapper (or supplied ground truth for the oracle upper bound), one
/// beam step per predicted word.
pub fn decode(
    fmri: &FmriSeries,
    ckpt: Option<&MapperCheckpoint>,
    word_rate: &WordRateModel,
    lm: &dyn LanguageModel,
    cfg: &DecodeConfig,
    oracle_target: Option<&EmbeddingSeries>,
) -> Result<(WordTimeline, DecodeLog)> {
    cfg.validate()?;
    let aud = fmri.select_voxels(&word_rate.auditory_voxel_ids)?;
    let times = predict_word_times(word_rate, &aud)?;

    let target: Option<EmbeddingSeries> = match cfg.guidance {
        Guidance::Mapper => {
            let ckpt = ckpt.ok_or_else(|| {
                Error::Argument("guidance=mapper requires a checkpoint".into())
            })?;
            Some(forward_map(ckpt, fmri)?)
        }
        Guidance::Oracle => Some(
            oracle_target
                .ok_or_else(|| Error::Argument("guidance=oracle requires ground-truth embeddings".into()))?
                .clone(),
        ),
        Guidance::None => None,
    };

    let mut beams = vec![BeamHypothesis::empty()];
    let mut log = DecodeLog {
        steps: Vec::with_capacity(times.len()),
        final_guidance: 0.0,
        final_lm_logprob: 0.0,
    };
    for &t in &times {
        beams = beam_step(&beams, t, target.as_ref(), lm, cfg)?;
        let best = &beams[0];
        log.steps.push(DecodeStep {
            time: t,
            best_guidance: best.guidance_score(),
            best_lm_logprob: best.lm_logprob,
            beam_size: beams.len(),
        });
    }

    let best = beams
        .into_iter()
        .min_by(|a, b| compare_hypotheses(a, b, cfg))
        .expect("beam never empties");
    log.final_guidance = best.guidance_score();
    log.final_lm_logprob = best.lm_logprob;

    let vocab = lm.vocab();
    let entries = best
        .tokens
        .iter()
        .zip(&best.times)
        .map(|(&id, &t)| (vocab.token(id).to_string(), t))
        .collect();
    Ok((WordTimeline::new(entries)?, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ToyLm, ToyLmConfig, Vocab};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn test_lm(seed: u64) -> ToyLm {
        let tokens: Vec<String> = (0..15).map(|i| format!("w{i:02}")).collect();
        ToyLm::untrained(
            Vocab::from_tokens(tokens.iter()),
            ToyLmConfig {
                hidden_dim: 8,
                n_layers: 2,
                context_limit: 32,
                seed,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn target_from_lm(lm: &ToyLm, rows: usize) -> EmbeddingSeries {
        let data = Array2::from_shape_fn((rows, lm.config().hidden_dim), |(i, j)| {
            ((i * 7 + j * 3) % 11) as f64 * 0.2 - 1.0
        });
        EmbeddingSeries::new(data, (0..rows).map(|i| i as f64 * 2.0).collect(), false).unwrap()
    }

    fn hyp(tokens: Vec<usize>, times: Vec<f64>) -> BeamHypothesis {
        BeamHypothesis {
            tokens,
            times,
            lm_logprob: -1.0,
            guidance_sum: 0.0,
        }
    }

    #[test]
    fn score_identity_and_orthogonal() {
        let lm = test_lm(0);
        let cand = hyp(vec![1, 2], vec![0.0, 2.0]);
        let state = lm.hidden_state(&[1, 2], 1).unwrap();
        // target row 1 (time 2.0) equals the candidate embedding -> 1.0
        let mut data = Array2::zeros((2, 8));
        for (j, v) in state.iter().enumerate() {
            data[[1, j]] = *v;
        }
        // row 0 orthogonal-ish: e_j pattern with zero dot against state? use
        // explicit orthogonal construction: v - proj onto state
        let s = ndarray::Array1::from(state.clone());
        let mut other = ndarray::Array1::zeros(8);
        other[0] = 1.0;
        let proj = other.dot(&s) / s.dot(&s);
        let orth = &other - &(proj * &s);
        for j in 0..8 {
            data[[0, j]] = orth[j];
        }
        let target = EmbeddingSeries::new(data, vec![0.0, 2.0], false).unwrap();
        let sim = score_continuation(&cand, &target, &lm, 5, 1).unwrap();
        assert_abs_diff_eq!(sim, 1.0, epsilon = 1e-9);
        // move last word time next to row 0 -> orthogonal -> 0
        let cand0 = hyp(vec![1, 2], vec![0.0, 0.1]);
        let sim0 = score_continuation(&cand0, &target, &lm, 5, 1).unwrap();
        assert_abs_diff_eq!(sim0, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn score_empty_target_rejected() {
        let lm = test_lm(0);
        let cand = hyp(vec![1], vec![0.0]);
        let target = EmbeddingSeries::new(Array2::zeros((0, 8)), vec![], false).unwrap();
        assert!(matches!(
            score_continuation(&cand, &target, &lm, 5, 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn closer_context_embedding_ranks_higher() {
        let lm = test_lm(1);
        let base = hyp(vec![3, 4], vec![0.0, 2.0]);
        // two candidates differing only in the last token
        let mut a = base.clone();
        a.tokens.push(5);
        a.times.push(4.0);
        let mut b = base.clone();
        b.tokens.push(6);
        b.times.push(4.0);
        let ea = lm.hidden_state(&a.tokens, 1).unwrap();
        let mut data = Array2::zeros((3, 8));
        for (j, v) in ea.iter().enumerate() {
            data[[2, j]] = *v;
        }
        let target = EmbeddingSeries::new(data, vec![0.0, 2.0, 4.0], false).unwrap();
        let sa = score_continuation(&a, &target, &lm, 5, 1).unwrap();
        let sb = score_continuation(&b, &target, &lm, 5, 1).unwrap();
        assert!(sa > sb, "a should match its own embedding best");
        // and the direct cosine oracle agrees
        let eb = lm.hidden_state(&b.tokens, 1).unwrap();
        let va = ndarray::Array1::from(ea);
        let vb = ndarray::Array1::from(eb);
        let direct_a = cosine(va.view(), target.vectors().row(2));
        let direct_b = cosine(vb.view(), target.vectors().row(2));
        assert_abs_diff_eq!(sa, direct_a, epsilon = 1e-12);
        assert_abs_diff_eq!(sb, direct_b, epsilon = 1e-12);
    }

    #[test]
    fn greedy_when_beam_and_continuations_are_one() {
        let lm = test_lm(2);
        let cfg = DecodeConfig {
            beam_width: 1,
            continuations: 1,
            guidance: Guidance::None,
            ..Default::default()
        };
        let mut beams = vec![BeamHypothesis::empty()];
        for step in 0..4 {
            beams = beam_step(&beams, step as f64, None, &lm, &cfg).unwrap();
        }
        // greedy oracle
        let mut context = vec![lm.vocab().bos()];
        for _ in 0..4 {
            let mut probs = lm.next_token_distribution(&context).unwrap();
            probs[lm.vocab().bos()] = 0.0;
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            context.push(argmax);
        }
        assert_eq!(beams[0].tokens, context[1..].to_vec());
    }

    /// Straightforward reference beam search: expand every beam over the
    /// whole vocabulary, rank by cumulative log probability.
    fn reference_beam_search(lm: &ToyLm, steps: usize, width: usize) -> Vec<Vec<usize>> {
        let bos = lm.vocab().bos();
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
        for _ in 0..steps {
            let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
            for (tokens, lp) in &beams {
                let mut context = vec![bos];
                context.extend_from_slice(tokens);
                let probs = lm.next_token_distribution(&context).unwrap();
                for (id, &p) in probs.iter().enumerate() {
                    if id == bos || p <= 0.0 {
                        continue;
                    }
                    let mut t = tokens.clone();
                    t.push(id);
                    cands.push((t, lp + p.ln()));
                }
            }
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cands.truncate(width);
            beams = cands;
        }
        beams.into_iter().map(|(t, _)| t).collect()
    }

    #[test]
    fn unguided_matches_reference_beam_search() {
        let lm = test_lm(3);
        let cfg = DecodeConfig {
            beam_width: 2,
            // full-vocabulary proposals so the reference search is equivalent
            continuations: lm.vocab().len(),
            guidance: Guidance::None,
            ..Default::default()
        };
        let mut beams = vec![BeamHypothesis::empty()];
        for step in 0..5 {
            beams = beam_step(&beams, step as f64, None, &lm, &cfg).unwrap();
        }
        let reference = reference_beam_search(&lm, 5, 2);
        let got: Vec<Vec<usize>> = beams.iter().map(|b| b.tokens.clone()).collect();
        assert_eq!(got, reference);
    }

    #[test]
    fn equal_scores_tie_break_by_lm_logprob() {
        let lm = test_lm(4);
        // zero target -> every candidate scores cosine 0 -> survivors are the
        // highest-lm_logprob candidates
        let target = EmbeddingSeries::new(
            Array2::zeros((3, 8)),
            vec![0.0, 2.0, 4.0],
            false,
        )
        .unwrap();
        let cfg = DecodeConfig {
            beam_width: 3,
            continuations: 4,
            guidance: Guidance::Oracle,
            ..Default::default()
        };
        let beams = beam_step(&[BeamHypothesis::empty()], 0.0, Some(&target), &lm, &cfg).unwrap();
        let cfg_none = DecodeConfig {
            guidance: Guidance::None,
            ..cfg.clone()
        };
        let unguided = beam_step(&[BeamHypothesis::empty()], 0.0, None, &lm, &cfg_none).unwrap();
        let a: Vec<Vec<usize>> = beams.iter().map(|b| b.tokens.clone()).collect();
        let mut b: Vec<Vec<usize>> = unguided.iter().map(|h| h.tokens.clone()).collect();
        b.sort();
        let mut a_sorted = a.clone();
        a_sorted.sort();
        assert_eq!(a_sorted, b);
    }

    #[test]
    fn surviving_set_is_top_b_of_candidates() {
        let lm = test_lm(5);
        let target = target_from_lm(&lm, 4);
        let cfg = DecodeConfig {
            beam_width: 3,
            continuations: 5,
            guidance: Guidance::Oracle,
            ..Default::default()
        };
        let layer = lm.default_embedding_layer();
        let beams = vec![
            hyp(vec![1], vec![0.0]),
            hyp(vec![2], vec![0.0]),
            hyp(vec![3], vec![0.0]),
        ];
        let next = beam_step(&beams, 2.0, Some(&target), &lm, &cfg).unwrap();

        // oracle: rebuild the full candidate set by hand
        let bos = lm.vocab().bos();
        let mut all = Vec::new();
        for beam in &beams {
            let mut ctx = vec![bos];
            ctx.extend_from_slice(&beam.tokens);
            let mut probs = lm.next_token_distribution(&ctx).unwrap();
            probs[bos] = 0.0;
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&x, &y| probs[y].partial_cmp(&probs[x]).unwrap().then(x.cmp(&y)));
            for &tok in order.iter().take(cfg.continuations) {
                let mut cand = beam.clone();
                cand.tokens.push(tok);
                cand.times.push(2.0);
                cand.lm_logprob += probs[tok].ln();
                cand.guidance_sum +=
                    score_continuation(&cand, &target, &lm, cfg.embed_window, layer).unwrap();
                all.push(cand);
            }
        }
        all.sort_by(|a, b| compare_hypotheses(a, b, &cfg));
        for (got, want) in next.iter().zip(all.iter().take(3)) {
            assert_eq!(got.tokens, want.tokens);
            assert_abs_diff_eq!(got.guidance_score(), want.guidance_score(), epsilon = 1e-12);
        }
    }
}
