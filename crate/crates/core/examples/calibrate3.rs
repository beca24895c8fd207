// scratch grid search for the contrastive-direction scenario
use braintext::lm::ToyLmConfig;
use braintext::mapper::{train_mapper, MapperConfig};
use braintext::synth::{synth_dataset, Nonlinearity, SyntheticSpec};

fn spec(seed: u64, noise: f64, n_words: usize, dup: usize, nl: Nonlinearity) -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 60,
        n_words,
        voxels: 240,
        duplication_factor: dup,
        noise_sigma: noise,
        nonlinearity: nl,
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
    }
}

fn cfg(seed: u64, lambda: f64, tap: usize, width: usize) -> MapperConfig {
    MapperConfig {
        input_voxels: 240,
        embed_dim: 16,
        encoder_layers: 2,
        encoder_width: width,
        patch_size: 60,
        tap_layer: tap,
        mask_ratio: 0.05,
        contrastive_weight: lambda,
        temperature: 0.1,
        batch_size: 32,
        seed,
        proj_dim: 24,
        learning_rate: 1e-4,
        max_epochs: 150,
        patience: 20,
        mse_on_masked: false,
        symmetric_infonce: false,
    }
}

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|v| (0..v.parse::<u64>().unwrap()).collect())
        .unwrap_or_else(|| vec![0, 1]);
    let grid: Vec<(f64, usize, usize, Nonlinearity, usize, usize)> = vec![
        // noise, n_words, dup, nonlin, tap, width
        (2.5, 400, 8, Nonlinearity::None, 2, 64),
        (2.5, 250, 8, Nonlinearity::None, 2, 64),
        (1.8, 250, 4, Nonlinearity::None, 2, 64),
    ];
    for (noise, n_words, dup, nl, tap, width) in grid {
        let mut d_total = 0.0;
        let mut pos = 0;
        print!("noise {noise} words {n_words} dup {dup} {nl:?} tap {tap} w{width}: ");
        for &seed in &seeds {
            let bundle = synth_dataset(&spec(seed, noise, n_words, dup, nl)).unwrap();
            let (_, l0) = train_mapper(&bundle.fmri, &bundle.truth, &cfg(seed, 0.0, tap, width)).unwrap();
            let (_, l1) = train_mapper(&bundle.fmri, &bundle.truth, &cfg(seed, 0.2, tap, width)).unwrap();
            let d = l1.final_val_cosine - l0.final_val_cosine;
            d_total += d;
            if d > 0.0 {
                pos += 1;
            }
            print!("{d:+.4} ");
        }
        println!("| mean {:+.4} ({pos}/{})", d_total / seeds.len() as f64, seeds.len());
    }
}
