//! Momentum schedules of the two teachers and the EMA update itself.

use dualmim::autodiff::{ParamStore, Tensor};
use dualmim::teachers::{ema_update, EmaSchedule};

fn main() -> dualmim::Result<()> {
    let rec = EmaSchedule::reconstruction();
    let cl = EmaSchedule::pseudo_labeling();
    println!("reconstruction teacher, one update per epoch over 20 epochs:");
    for e in [0, 5, 10, 15, 19] {
        println!("  epoch {e:>2}: m = {:.5}", rec.momentum_at(e, 19)?);
    }
    println!("pseudo-labelling teacher, one update per iteration over 1000 iterations:");
    for t in [0, 250, 500, 750, 999] {
        println!("  iter {t:>4}: m = {:.5}", cl.momentum_at(t, 999)?);
    }

    let mut student = ParamStore::new();
    student.insert("w", Tensor::new(vec![2], vec![1.0, -1.0])?);
    let mut teacher = ParamStore::new();
    teacher.insert("w", Tensor::zeros(&[2]));
    for step in 1..=5 {
        ema_update(&mut teacher, &student, 0.5)?;
        println!("after {step} updates at m=0.5: {:?}", teacher.iter().next().unwrap().2.data());
    }
    Ok(())
}
