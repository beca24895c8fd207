// scratch calibration runs; not part of the deliverable test suite
use std::time::Instant;

use braintext::features::fir_delay_matrix;
use braintext::lm::ToyLmConfig;
use braintext::mapper::{train_mapper, MapperConfig};
use braintext::synth::{synth_dataset, Nonlinearity, SyntheticSpec};
use braintext::util::{cosine, least_squares};
use ndarray::{s, Array1, Array2};

fn crit4_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 60,
        n_words: 5000,
        voxels: 1000,
        duplication_factor: 1,
        noise_sigma: 0.0,
        nonlinearity: Nonlinearity::None,
        tr_seconds: 2.0,
        seed: 7,
        words_per_tr: 2.5,
        auditory_voxels: 8,
        corpus_stories: 4,
        lm: ToyLmConfig {
            hidden_dim: 16,
            n_layers: 2,
            context_limit: 64,
            epochs: 20,
            lr: 3e-3,
            seed: 7,
        },
        embed_window: 5,
        embed_layer: None,
    }
}

fn main() {
    let t0 = Instant::now();
    let spec = crit4_spec();
    let bundle = synth_dataset(&spec).unwrap();
    println!(
        "synth: {:.1}s; m={}, V={}, lm ppl={:.2}",
        t0.elapsed().as_secs_f64(),
        bundle.fmri.n_trs(),
        bundle.fmri.n_voxels(),
        bundle.lm_report.heldout_perplexity
    );

    let m = bundle.fmri.n_trs();
    let n_train = m * 4 / 5;
    let d = bundle.truth.dim();

    // оracle a: ridge from raw F to e
    let t1 = Instant::now();
    let f_train = bundle.fmri.data().slice(s![..n_train, ..]).to_owned();
    let f_val = bundle.fmri.data().slice(s![n_train.., ..]).to_owned();
    let e_train = bundle.truth.vectors().slice(s![..n_train, ..]).to_owned();
    let e_val = bundle.truth.vectors().slice(s![n_train.., ..]).to_owned();

    let mut design = Array2::ones((n_train, f_train.ncols() + 1));
    design.slice_mut(s![.., ..f_train.ncols()]).assign(&f_train);
    let mut design_val = Array2::ones((m - n_train, f_val.ncols() + 1));
    design_val.slice_mut(s![.., ..f_val.ncols()]).assign(&f_val);

    let mut preds = Array2::zeros((m - n_train, d));
    for j in 0..d {
        let y = e_train.column(j).to_owned();
        let beta = least_squares(&design, &y).unwrap();
        let fitted = design_val.dot(&beta);
        preds.column_mut(j).assign(&fitted);
    }
    let mut cos_lin = 0.0;
    for i in 0..preds.nrows() {
        cos_lin += cosine(preds.row(i), e_val.row(i));
    }
    cos_lin /= preds.nrows() as f64;
    println!("linear oracle F->e val cosine: {:.4} ({:.1}s)", cos_lin, t1.elapsed().as_secs_f64());

    // oracle b: autoregression e_{t-1..t-4} -> e_t (intrinsic predictability)
    let fir = fir_delay_matrix(bundle.truth.vectors(), &[1, 2, 3]);
    let e0 = bundle.truth.vectors();
    let fir = ndarray::concatenate![ndarray::Axis(1), e0.view(), fir.view()];
    let mut design2 = Array2::ones((n_train, fir.ncols() + 1));
    design2.slice_mut(s![.., ..fir.ncols()]).assign(&fir.slice(s![..n_train, ..]));
    let mut design2_val = Array2::ones((m - n_train, fir.ncols() + 1));
    design2_val
        .slice_mut(s![.., ..fir.ncols()])
        .assign(&fir.slice(s![n_train.., ..]));
    let mut preds2 = Array2::zeros((m - n_train, d));
    for j in 0..d {
        let y: Array1<f64> = e_train.column(j).to_owned();
        let beta = least_squares(&design2, &y).unwrap();
        preds2.column_mut(j).assign(&design2_val.dot(&beta));
    }
    let mut cos_ar = 0.0;
    for i in 0..preds2.nrows() {
        cos_ar += cosine(preds2.row(i), e_val.row(i));
    }
    cos_ar /= preds2.nrows() as f64;
    println!("AR oracle fir(e)->e val cosine: {:.4}", cos_ar);

    // mapper training
    let cfg = MapperConfig {
        input_voxels: 1000,
        embed_dim: 16,
        encoder_layers: 2,
        encoder_width: 64,
        patch_size: 250,
        tap_layer: 2,
        mask_ratio: 0.0,
        contrastive_weight: 0.0,
        temperature: 0.1,
        batch_size: 32,
        seed: 7,
        proj_dim: 32,
        learning_rate: 1e-4,
        max_epochs: 200,
        patience: 20,
        mse_on_masked: false,
        symmetric_infonce: false,
    };
    let t2 = Instant::now();
    let (_ckpt, log) = train_mapper(&bundle.fmri, &bundle.truth, &cfg).unwrap();
    println!(
        "mapper: val cosine {:.4} after {} epochs (best {}), {:.1}s",
        log.final_val_cosine,
        log.epochs.len(),
        log.best_epoch,
        t2.elapsed().as_secs_f64()
    );
    for (i, e) in log.epochs.iter().enumerate() {
        if i % 10 == 0 || i + 1 == log.epochs.len() {
            println!(
                "  epoch {i:3}: train_mse {:.5} val_mse {:.5} val_cos {:.4}",
                e.train_mse, e.val_mse, e.val_cosine
            );
        }
    }
}
