//! A short pretraining run on in-memory synthetic images.

use dualmim::data::synth::generate;
use dualmim::train::{pretrain, PretrainOptions, TrainConfig};

fn main() -> dualmim::Result<()> {
    let mut cfg = TrainConfig::smoke();
    cfg.optim.batch_size = 16;
    cfg.optim.epochs = 5;
    let records = generate(256, 0);
    let dir = std::env::temp_dir().join("dualmim_pretrain_smoke");
    let out = pretrain(&cfg, &records, &dir, &PretrainOptions::default())?;
    println!("epoch,iter,loss_m,loss_c,loss_p,total");
    for r in out.rows.iter().step_by(8) {
        println!("{},{},{:.4},{:.4},{:.4},{:.4}", r.epoch, r.iter, r.loss_m, r.loss_c, r.loss_p, r.total);
    }
    println!("metrics and checkpoint in {}", dir.display());
    Ok(())
}
