//! Frozen-feature evaluation of a briefly pretrained encoder against its
//! own initialization.

use dualmim::data::synth::generate;
use dualmim::train::run::{knn_encoder, probe_encoder, random_encoder};
use dualmim::train::{pretrain, PretrainOptions, TrainConfig};

fn main() -> dualmim::Result<()> {
    let mut cfg = TrainConfig::smoke();
    cfg.optim.batch_size = 32;
    cfg.optim.epochs = 4;
    cfg.eval.probe_epochs = 30;
    let train = generate(1024, 0);
    let test = generate(256, 1);
    let dir = std::env::temp_dir().join("dualmim_probe_and_knn");
    let out = pretrain(&cfg, &train, &dir, &PretrainOptions::default())?;

    let (enc, init) = random_encoder(&cfg);
    let trained = &out.trainer.student.enc;
    for (name, store) in [("random init", &init), ("pretrained", trained)] {
        let probe = probe_encoder(&cfg, &enc, store, &train, &test)?;
        let knn = knn_encoder(&cfg, &enc, store, &train, &test)?;
        println!("{name:<12} probe top-1 {:.3}  kNN top-1 {:.3}", probe.test_acc, knn);
    }
    Ok(())
}
