// scratch calibration for the contrastive-direction and decode criteria
use std::time::Instant;

use braintext::decoder::{decode, DecodeConfig, Guidance};
use braintext::eval::{normalized_scores, random_baseline, BleuSimilarity};
use braintext::lm::ToyLmConfig;
use braintext::mapper::{forward_map, train_mapper, MapperConfig};
use braintext::synth::{synth_dataset, Nonlinearity, SyntheticSpec};
use braintext::word_rate::fit_word_rate;
use braintext::{EmbeddingSeries, WordTimeline};

fn base_spec(seed: u64, noise: f64) -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 60,
        n_words: 1000,
        voxels: 240,
        duplication_factor: 4,
        noise_sigma: noise,
        nonlinearity: Nonlinearity::None,
        tr_seconds: 2.0,
        seed,
        words_per_tr: 1.25,
        auditory_voxels: 8,
        corpus_stories: 8,
        lm: ToyLmConfig {
            hidden_dim: 16,
            n_layers: 2,
            context_limit: 48,
            epochs: 20,
            lr: 3e-3,
            seed,
        },
        embed_window: 5,
        embed_layer: None,
    }
}

fn mapper_cfg(seed: u64, lambda: f64, mask: f64) -> MapperConfig {
    MapperConfig {
        input_voxels: 240,
        embed_dim: 16,
        encoder_layers: 2,
        encoder_width: 48,
        patch_size: 60,
        tap_layer: 2,
        mask_ratio: mask,
        contrastive_weight: lambda,
        temperature: 0.1,
        batch_size: 32,
        seed,
        proj_dim: 24,
        learning_rate: 1e-4,
        max_epochs: 120,
        patience: 15,
        mse_on_masked: false,
        symmetric_infonce: false,
    }
}

fn crit5() {
    println!("== criterion 5: contrastive direction, paired seeds ==");
    let n_words: usize = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(400);
    for noise in [0.8, 1.2, 1.8] {
        let mut plain_total = 0.0;
        let mut contrastive_total = 0.0;
        print!("noise {noise} n_words {n_words}: ");
        for seed in 0..5u64 {
            let mut spec = base_spec(seed, noise);
            spec.n_words = n_words;
            let bundle = synth_dataset(&spec).unwrap();
            let t = Instant::now();
            let (_, log0) =
                train_mapper(&bundle.fmri, &bundle.truth, &mapper_cfg(seed, 0.0, 0.05)).unwrap();
            let (_, log1) =
                train_mapper(&bundle.fmri, &bundle.truth, &mapper_cfg(seed, 0.2, 0.05)).unwrap();
            plain_total += log0.final_val_cosine;
            contrastive_total += log1.final_val_cosine;
            print!(
                "[s{seed}: {:.4} vs {:.4} | {:.0}s] ",
                log0.final_val_cosine,
                log1.final_val_cosine,
                t.elapsed().as_secs_f64()
            );
        }
        println!(
            "\n  mean plain {:.4} vs contrastive {:.4} (delta {:+.4})",
            plain_total / 5.0,
            contrastive_total / 5.0,
            (contrastive_total - plain_total) / 5.0
        );
    }
}

fn bleu_zs(
    reference: &WordTimeline,
    prediction: &WordTimeline,
    baselines: &[WordTimeline],
) -> f64 {
    normalized_scores(reference, prediction, baselines, &BleuSimilarity, 20.0, 2.0)
        .map(|s| s.sim_zs)
        .unwrap_or(f64::NAN)
}

fn crit67() {
    let seed: u64 = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(11);
    println!("== criteria 6/7: decode ordering, seed {seed} ==");
    let noise = 1.0;
    let bundle = synth_dataset(&base_spec(seed, noise)).unwrap();
    let (ckpt, log) =
        train_mapper(&bundle.fmri, &bundle.truth, &mapper_cfg(seed, 0.2, 0.05)).unwrap();
    println!("mapper val cosine {:.4}", log.final_val_cosine);

    // word-rate model on the training portion
    let m = bundle.fmri.n_trs();
    let n_train = m * 4 / 5;
    let aud_train = bundle
        .fmri
        .slice_trs(0, n_train)
        .unwrap()
        .select_voxels(&bundle.auditory_ids)
        .unwrap();
    let wr = fit_word_rate(&aud_train, &bundle.timeline, 1.0).unwrap();

    // decode the held-out tail
    let tail = bundle.fmri.slice_trs(n_train, m).unwrap();
    let t_tail = tail.t0();
    let ref_tail = WordTimeline::new(
        bundle
            .timeline
            .entries()
            .iter()
            .filter(|(_, t)| *t >= t_tail)
            .cloned()
            .collect(),
    )
    .unwrap();
    let truth_tail = {
        let from = bundle.truth.times().iter().position(|&t| t >= t_tail).unwrap();
        bundle.truth.slice_rows(from, bundle.truth.len()).unwrap()
    };
    println!(
        "tail: {} TRs from t={}, {} reference words",
        tail.n_trs(),
        t_tail,
        ref_tail.len()
    );

    for (name, guidance) in [
        ("oracle", Guidance::Oracle),
        ("mapper", Guidance::Mapper),
        ("none", Guidance::None),
    ] {
        let cfg = DecodeConfig {
            beam_width: 10,
            continuations: 20,
            guidance,
            ..Default::default()
        };
        let t = Instant::now();
        let (out, _) = decode(
            &tail,
            Some(&ckpt),
            &wr,
            &bundle.lm,
            &cfg,
            Some(&truth_tail),
        )
        .unwrap();
        let baselines = random_baseline(
            &bundle.lm,
            &out.times().collect::<Vec<_>>(),
            200,
            999,
        )
        .unwrap();
        let zs = bleu_zs(&ref_tail, &out, &baselines);
        println!(
            "{name:>6}: {} words, bleu story-zscore {zs:+.2} ({:.0}s)",
            out.len(),
            t.elapsed().as_secs_f64()
        );
    }

    // mapped-embedding quality on the tail for reference
    let mapped = forward_map(&ckpt, &tail).unwrap();
    let mut cos = 0.0;
    for i in 0..mapped.len() {
        cos += braintext::util::cosine(mapped.vectors().row(i), truth_tail.vectors().row(i));
    }
    println!("tail mapped cosine: {:.4}", cos / mapped.len() as f64);
}

fn crit8() {
    println!("== criterion 8: sweep correlation ==");
    let mut pairs = Vec::new();
    for (i, (noise, lambda)) in [
        (0.1, 0.2),
        (0.7, 0.2),
        (1.4, 0.2),
        (2.8, 0.0),
        (5.0, 0.2),
        (8.0, 0.0),
    ]
    .iter()
    .enumerate()
    {
        let seed = 20 + i as u64;
        let mut spec = base_spec(seed, *noise);
        spec.n_words = 600;
        let bundle = synth_dataset(&spec).unwrap();
        let (ckpt, log) =
            train_mapper(&bundle.fmri, &bundle.truth, &mapper_cfg(seed, *lambda, 0.05)).unwrap();
        let m = bundle.fmri.n_trs();
        let n_train = m * 4 / 5;
        let aud_train = bundle
            .fmri
            .slice_trs(0, n_train)
            .unwrap()
            .select_voxels(&bundle.auditory_ids)
            .unwrap();
        let wr = fit_word_rate(&aud_train, &bundle.timeline, 1.0).unwrap();
        let tail = bundle.fmri.slice_trs(n_train, m).unwrap();
        let ref_tail = WordTimeline::new(
            bundle
                .timeline
                .entries()
                .iter()
                .filter(|(_, t)| *t >= tail.t0())
                .cloned()
                .collect(),
        )
        .unwrap();
        let cfg = DecodeConfig {
            beam_width: 10,
            continuations: 20,
            guidance: Guidance::Mapper,
            ..Default::default()
        };
        let (out, _) = decode(&tail, Some(&ckpt), &wr, &bundle.lm, &cfg, None).unwrap();
        let baselines =
            random_baseline(&bundle.lm, &out.times().collect::<Vec<_>>(), 200, 999).unwrap();
        let zs = bleu_zs(&ref_tail, &out, &baselines);
        println!(
            "noise {noise} lambda {lambda}: cosine {:.4}, bleu zs {zs:+.2}",
            log.final_val_cosine
        );
        pairs.push((log.final_val_cosine, zs));
    }
    let report = braintext::eval::correlation_report(&pairs).unwrap();
    println!("spearman: {:.3}", report.spearman);
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    if which == "5" || which == "all" {
        crit5();
    }
    if which == "67" || which == "all" {
        crit67();
    }
    if which == "8" || which == "all" {
        crit8();
    }
}
