//! End-to-end run on synthetic phantoms: generate, split, train, evaluate.
//!
//! `cargo run --release --example synthetic_benchmark -- [epochs] [input_px] [augment_percent]`

use std::time::Instant;

use dqe::augment::AugmentConfig;
use dqe::infer::predict_exam;
use dqe::metrics::{mae, pearson_r, PairedSeries};
use dqe::net::{train_with_progress, TrainConfig, TrainSample};
use dqe::ratings::split_dataset;
use dqe::synth::{generate_dataset, PhantomParams};

fn main() {
    let arg = |i: usize, default: usize| {
        std::env::args()
            .nth(i)
            .map_or(default, |s| s.parse().expect("integer argument"))
    };
    let (epochs, px, augment_percent) = (arg(1, 100), arg(2, 32), arg(3, 50));
    let start = Instant::now();
    let data = generate_dataset(75, 4, &PhantomParams::default(), 7).expect("dataset");
    let ids: Vec<String> = data.exams.iter().map(|e| e.exam_id.clone()).collect();
    let (train_ids, test_ids) = split_dataset(&ids, 0.8, 7).expect("split");
    let config = TrainConfig {
        epochs,
        input_size: [px, px],
        augment: if augment_percent == 0 {
            AugmentConfig::disabled()
        } else {
            let mut a = AugmentConfig::default();
            a.set_all_probabilities(augment_percent as f64 / 100.0);
            a
        },
        ..TrainConfig::default()
    };
    let mut samples = Vec::new();
    for c in data
        .candidates
        .iter()
        .filter(|c| train_ids.contains(&c.exam_id))
    {
        let exam = data.candidate_exam(c).expect("exam");
        samples.extend(TrainSample::views_of(
            &exam,
            config.encoding,
            config.normalization,
            c.stars,
        ));
    }
    println!(
        "{} training samples, prepared in {:?}",
        samples.len(),
        start.elapsed()
    );
    let model = train_with_progress(&samples, &config, |e, l| {
        if e % 10 == 9 || e == 0 {
            println!("epoch {:>4} loss {l:.4} ({:?})", e + 1, start.elapsed());
        }
    })
    .expect("training");
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for c in data
        .candidates
        .iter()
        .filter(|c| test_ids.contains(&c.exam_id))
    {
        let exam = data.candidate_exam(c).expect("exam");
        pred.push(
            predict_exam(&model, &exam, &c.seg_id)
                .expect("prediction")
                .stars_mean,
        );
        truth.push(c.stars);
    }
    let series = PairedSeries::new(pred, truth).expect("series");
    println!(
        "held-out pearson {:.4} mae {:.4} ({:?})",
        pearson_r(&series).expect("pearson"),
        mae(&series),
        start.elapsed()
    );
}
