use std::f64::consts::PI;

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `total`. Steps past `total` stay at 0.
pub fn lr_at(step: u64, warmup: u64, total: u64, peak: f32) -> f32 {
    let peak = peak as f64;
    let lr = if step < warmup {
        peak * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        let span = (total - warmup) as f64;
        peak * 0.5 * (1.0 + (PI * (step - warmup) as f64 / span).cos())
    };
    lr as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_at(0, 10, 100, 1e-3), 0.0);
        assert_eq!(lr_at(10, 10, 100, 1e-3), 1e-3);
        assert_eq!(lr_at(100, 10, 100, 1e-3), 0.0);
        assert_eq!(lr_at(5, 10, 100, 1e-3), 5e-4);
        assert!((lr_at(55, 10, 100, 1e-3) - 5e-4).abs() < 1e-9);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_at(0, 0, 10, 0.5), 0.5);
        let v: Vec<f32> = (0..=10).map(|s| lr_at(s, 0, 10, 0.5)).collect();
        assert!(v.windows(2).all(|w| w[0] >= w[1]));
    }
}
