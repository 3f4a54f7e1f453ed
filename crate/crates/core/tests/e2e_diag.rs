use moelora_core::backbone::BackboneConfig;
use moelora_core::corpus::{CorpusManifest, Dataset};
use moelora_core::model::Model;
use moelora_core::trainer::{fit, TrainConfig};
use std::time::Instant;

fn run(ds: &Dataset, label: &str, batch: usize, w2_scale: f64, epochs: usize) {
    let cfg = BackboneConfig::default();
    let model = Model::build(&cfg, 2024).unwrap();
    // optionally rescale the output layer init
    if w2_scale != 1.0 {
        for (name, t) in model.trainable_params() {
            if name == "head.w2" {
                t.with_data_mut(|d| d.iter_mut().for_each(|v| *v *= w2_scale));
            }
        }
    }
    let tcfg = TrainConfig { max_epochs: epochs, batch_size: batch, patience: 50, ..TrainConfig::default() };
    let t1 = Instant::now();
    let result = fit(&model, ds, &tcfg).unwrap();
    let per_epoch = t1.elapsed().as_secs_f64() / result.epochs_run as f64;
    let traj: Vec<String> = result.log.iter().map(|r| format!("{:.3}", r.dev_eer)).collect();
    println!("{label}: {:.1}s/epoch  dev EER: {}", per_epoch, traj.join(" "));
}

#[test]
fn diag_sweep() {
    let ds = Dataset::generate(&CorpusManifest::default_with_seed(1001)).unwrap();
    run(&ds, "bs2_w2tiny ", 2, 1.0, 12);
    run(&ds, "bs2_w2norm ", 2, 150.0, 12);
    run(&ds, "bs1_w2norm ", 1, 150.0, 12);
}
