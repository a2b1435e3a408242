/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total`.
/// Steps past `total` clamp to 0; `warmup` larger than `total` is clamped.
pub fn linear_warmup_lr(step: usize, warmup: usize, total: usize, base_lr: f64) -> f64 {
    let warmup = warmup.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total == warmup || step >= total {
        return 0.0;
    }
    (base_lr * (total - step) as f64 / (total - warmup) as f64).max(0.0)
}

/// 5% of the optimizer steps, rounded.
pub fn default_warmup(total: usize) -> usize {
    (total as f64 * 0.05).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        assert_eq!(linear_warmup_lr(0, 100, 300, 2e-4), 0.0);
        assert_eq!(linear_warmup_lr(50, 100, 300, 2e-4), 1e-4);
        assert_eq!(linear_warmup_lr(100, 100, 300, 2e-4), 2e-4);
        assert_eq!(linear_warmup_lr(200, 100, 300, 2e-4), 1e-4);
        assert_eq!(linear_warmup_lr(300, 100, 300, 2e-4), 0.0);
        assert_eq!(linear_warmup_lr(0, 0, 10, 1.0), 1.0);
        assert_eq!(linear_warmup_lr(5, 5, 5, 1.0), 0.0);
        assert_eq!(default_warmup(1000), 50);
    }

    #[test]
    fn monotone_pieces() {
        let lrs: Vec<f64> = (0..=40).map(|s| linear_warmup_lr(s, 10, 40, 1.0)).collect();
        assert!(lrs[..=10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] > w[1]));
    }
}
