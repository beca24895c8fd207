// scratch: inspect decoded transcripts
use braintext::decoder::{decode, DecodeConfig, Guidance};
use braintext::lm::ToyLmConfig;
use braintext::mapper::{train_mapper, MapperConfig};
use braintext::synth::{synth_dataset, Nonlinearity, SyntheticSpec};
use braintext::word_rate::fit_word_rate;
use braintext::WordTimeline;

fn main() {
    let seed: u64 = std::env::args().nth(1).map(|v| v.parse().unwrap()).unwrap_or(12);
    let spec = SyntheticSpec {
        vocab_size: 60,
        n_words: 1000,
        voxels: 240,
        duplication_factor: 4,
        noise_sigma: 1.0,
        nonlinearity: Nonlinearity::None,
        tr_seconds: 2.0,
        seed,
        words_per_tr: 2.5,
        auditory_voxels: 8,
        corpus_stories: 4,
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
    };
    let bundle = synth_dataset(&spec).unwrap();
    let cfg = MapperConfig {
        input_voxels: 240,
        embed_dim: 16,
        encoder_layers: 2,
        encoder_width: 48,
        patch_size: 60,
        tap_layer: 2,
        mask_ratio: 0.05,
        contrastive_weight: 0.2,
        temperature: 0.1,
        batch_size: 32,
        seed,
        proj_dim: 24,
        learning_rate: 1e-4,
        max_epochs: 120,
        patience: 15,
        mse_on_masked: false,
        symmetric_infonce: false,
    };
    let (ckpt, log) = train_mapper(&bundle.fmri, &bundle.truth, &cfg).unwrap();
    println!("val cosine {:.4}", log.final_val_cosine);
    let m = bundle.fmri.n_trs();
    let n_train = m * 4 / 5;
    let aud = bundle.fmri.slice_trs(0, n_train).unwrap().select_voxels(&bundle.auditory_ids).unwrap();
    let wr = fit_word_rate(&aud, &bundle.timeline, 1.0).unwrap();
    let tail = bundle.fmri.slice_trs(n_train, m).unwrap();
    let truth_tail = {
        let from = bundle.truth.times().iter().position(|&t| t >= tail.t0()).unwrap();
        bundle.truth.slice_rows(from, bundle.truth.len()).unwrap()
    };
    let ref_tail: Vec<&str> = bundle
        .timeline
        .entries()
        .iter()
        .filter(|(_, t)| *t >= tail.t0())
        .map(|(w, _)| w.as_str())
        .collect();
    println!("truth : {}", ref_tail[..40.min(ref_tail.len())].join(" "));
    for (name, guidance) in [("oracle", Guidance::Oracle), ("mapper", Guidance::Mapper), ("none", Guidance::None)] {
        let dcfg = DecodeConfig { beam_width: 10, continuations: 20, guidance, ..Default::default() };
        let (out, _) = decode(&tail, Some(&ckpt), &wr, &bundle.lm, &dcfg, Some(&truth_tail)).unwrap();
        let toks: Vec<&str> = out.tokens().collect();
        println!("{name:>6}: {}", toks[..40.min(toks.len())].join(" "));
    }
    let _ = WordTimeline::new(vec![]);
}
