//! Save, load and re-save a training state.

use dualmim::train::{Checkpoint, TrainConfig, Trainer};

fn main() -> dualmim::Result<()> {
    let cfg = TrainConfig::smoke();
    let trainer = Trainer::new(&cfg, 64, true)?;
    let ck = trainer.to_checkpoint();
    let path = std::env::temp_dir().join("dualmim_roundtrip.ckpt");
    ck.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let again = Trainer::from_checkpoint(&loaded, 64)?.to_checkpoint();
    println!("{} tensors, {} bytes", ck.tensors.len(), ck.encode().len());
    println!("byte-identical after reload: {}", again.encode() == ck.encode());
    Ok(())
}
