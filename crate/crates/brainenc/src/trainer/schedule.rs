//! Cosine-annealed learning rate.

use crate::error::{Error, Result};

/// eta_t = eta_min + (eta_max - eta_min)/2 * (1 + cos(pi * t / t_max))
pub fn cosine_lr(t: u64, eta_max: f64, eta_min: f64, t_max: u64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::InvalidConfig("cosine schedule needs t_max > 0".into()));
    }
    let t = t.min(t_max);
    let progress = t as f64 / t_max as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_identities() {
        let (mx, mn, tm) = (3e-4, 1e-5, 1000);
        assert!((cosine_lr(0, mx, mn, tm).unwrap() - mx).abs() < 1e-12);
        assert!((cosine_lr(tm, mx, mn, tm).unwrap() - mn).abs() < 1e-12);
        assert!((cosine_lr(tm / 2, mx, mn, tm).unwrap() - (mx + mn) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_with_zero_floor() {
        let lr = cosine_lr(500, 3e-4, 0.0, 1000).unwrap();
        assert!((lr - 1.5e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_t_max_is_an_error() {
        assert!(cosine_lr(0, 3e-4, 0.0, 0).is_err());
    }

    #[test]
    fn monotone_decreasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(t, 3e-4, 0.0, 100).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
