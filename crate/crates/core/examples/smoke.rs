//! Quick training smoke run: base step on a small dataset, printing loss and
//! panoptic quality per epoch batch. For hyperparameter sizing, not CI.

use cpp_lab_core::engine::{
    base_targets, evaluate_step, partition_steps, train_epochs, ExperimentConfig, Method,
    StepLoader,
};
use cpp_lab_core::model::ModelState;
use cpp_lab_core::synth_data::{generate_dataset, train_val_split, DatasetSpec, PanopticSample};
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_samples: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.01);

    let dataset = DatasetSpec::new(n_samples, 6, 2, 7);
    let mut cfg = ExperimentConfig::new(
        dataset.clone(),
        Method::Cpp,
        7,
        std::path::PathBuf::from("/tmp/smoke"),
    );
    cfg.optim.lr = lr;
    cfg.optim.epochs_base = epochs;

    let samples = generate_dataset(&dataset).unwrap();
    let schedule = cfg.build_schedule().unwrap();
    let (train_idx, val_idx) = train_val_split(&samples, dataset.seed);
    let partition = partition_steps(&samples, &train_idx, &schedule);
    println!(
        "train {} / val {} | step0 samples {}",
        train_idx.len(),
        val_idx.len(),
        partition[0].len()
    );

    let loader = StepLoader::new(0, &samples, partition[0].clone());
    let base_words: Vec<(u32, String)> = schedule.steps[0]
        .iter()
        .map(|&c| (c, dataset.vocab.word(c).unwrap().to_string()))
        .collect();
    let mut model = ModelState::init(cfg.model.clone(), &base_words, cfg.seed).unwrap();
    println!("params: {}", model.num_params());

    let step_samples: Vec<&PanopticSample> =
        (0..loader.len()).map(|i| loader.get(i)).collect();
    let targets: Vec<_> = step_samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| base_targets(s, i, &schedule, &dataset.vocab, &model).unwrap())
        .collect();

    let t0 = std::time::Instant::now();
    for round in 0..epochs {
        let logs = train_epochs(
            &mut model,
            None,
            &step_samples,
            &targets,
            &schedule,
            0,
            &cfg,
            1,
        )
        .unwrap();
        let elapsed = t0.elapsed().as_secs_f64();
        if round % 2 == 1 || round == epochs - 1 {
            let report = evaluate_step(
                &model, &samples, &val_idx, &schedule, 0, &dataset.vocab, 2,
            )
            .unwrap();
            println!(
                "epoch {:>3} loss {:>8.3} | PQ all {:.3} SQ {:.3} RQ {:.3} | bleu {:.3} | {:.1}s",
                round, logs[0].mean_loss, report.all_group.pq, report.all_group.sq,
                report.all_group.rq, report.bleu, elapsed
            );
        } else {
            println!("epoch {:>3} loss {:>8.3} | {:.1}s", round, logs[0].mean_loss, elapsed);
        }
    }
}
