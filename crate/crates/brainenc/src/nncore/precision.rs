//! Numeric-precision policy: full-precision storage or emulated IEEE half.
//!
//! In mixed-half mode every op rounds its stored outputs (and the backward
//! pass rounds stored gradients) to the nearest binary16 value: 1 sign bit,
//! 5 exponent bits, 10 mantissa bits. Accumulations inside an op (dot
//! products, reductions, optimizer state) always stay full precision.
//! Values past the half-format maximum (65504) round to infinity, which
//! raises the thread-local overflow signal consumed by the trainer.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrecisionMode {
    Single,
    MixedHalf,
}

impl PrecisionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PrecisionMode::Single),
            "mixed-half" => Ok(PrecisionMode::MixedHalf),
            other => Err(Error::InvalidConfig(format!(
                "precision must be 'single' or 'mixed-half', got '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecisionMode::Single => "single",
            PrecisionMode::MixedHalf => "mixed-half",
        }
    }
}

/// Loss-scaling policy for half-precision training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub mode: PrecisionMode,
    pub loss_scale: f64,
    pub backoff_factor: f64,
    /// Clean steps before the scale doubles.
    pub growth_interval: u64,
}

impl PrecisionPolicy {
    pub fn single() -> Self {
        PrecisionPolicy {
            mode: PrecisionMode::Single,
            loss_scale: 1.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
        }
    }

    /// Dynamic loss scaling starting at 2^16, halving on overflow and
    /// doubling after `growth_interval` clean steps.
    pub fn mixed_half() -> Self {
        PrecisionPolicy {
            mode: PrecisionMode::MixedHalf,
            loss_scale: 65536.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
        }
    }

    pub fn for_mode(mode: PrecisionMode) -> Self {
        match mode {
            PrecisionMode::Single => Self::single(),
            PrecisionMode::MixedHalf => Self::mixed_half(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.backoff_factor > 0.0 && self.backoff_factor < 1.0) {
            return Err(Error::InvalidConfig(
                "backoff_factor must lie in (0, 1)".into(),
            ));
        }
        match self.mode {
            PrecisionMode::Single => {
                if self.loss_scale != 1.0 {
                    return Err(Error::InvalidConfig(
                        "single-precision mode requires loss_scale = 1".into(),
                    ));
                }
            }
            PrecisionMode::MixedHalf => {
                if self.loss_scale <= 0.0 || self.loss_scale.log2().fract() != 0.0 {
                    return Err(Error::InvalidConfig(
                        "mixed-half loss_scale must be a positive power of two".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

thread_local! {
    static MODE: Cell<PrecisionMode> = const { Cell::new(PrecisionMode::Single) };
    static OVERFLOW: Cell<bool> = const { Cell::new(false) };
}

/// Set the active storage mode for ops executed on this thread.
pub fn set_mode(mode: PrecisionMode) {
    MODE.with(|m| m.set(mode));
}

pub fn mode() -> PrecisionMode {
    MODE.with(|m| m.get())
}

/// Run `f` under `mode`, restoring the previous mode afterwards.
pub fn with_mode<T>(mode: PrecisionMode, f: impl FnOnce() -> T) -> T {
    let prev = self::mode();
    set_mode(mode);
    let out = f();
    set_mode(prev);
    out
}

/// True if any non-finite value was stored since the last reset.
pub fn overflow_seen() -> bool {
    OVERFLOW.with(|o| o.get())
}

pub fn reset_overflow() {
    OVERFLOW.with(|o| o.set(false));
}

fn signal_overflow() {
    OVERFLOW.with(|o| o.set(true));
}

/// Round one value to the nearest representable binary16 (ties to even).
///
/// Converts directly from f64; a detour through f32 would double-round and
/// occasionally miss the nearest half value.
#[inline]
pub fn round_half_value(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let a = x.abs();
    if a == 0.0 {
        return x;
    }
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let e = ((a.to_bits() >> 52) as i32) - 1023;
    // Half-precision quantum: 2^-24 in the subnormal range, else 2^(e-10).
    let quantum = if e < -14 {
        2f64.powi(-24)
    } else {
        2f64.powi(e - 10)
    };
    // Power-of-two division is exact, so the tie test is exact too.
    let n = (a / quantum).round_ties_even();
    let r = n * quantum;
    // 65520 is the rounding boundary past the largest finite half (65504).
    if r >= 65520.0 {
        return sign * f64::INFINITY;
    }
    sign * r
}

/// Round a buffer in place; raises the overflow signal when any element
/// becomes (or already was) non-finite.
pub fn round_half_slice(data: &mut [f64]) {
    let mut bad = false;
    for v in data.iter_mut() {
        let r = round_half_value(*v);
        bad |= !r.is_finite();
        *v = r;
    }
    if bad {
        signal_overflow();
    }
}

/// Storage hook applied by every op to its freshly written output and by
/// the reverse pass to finalized gradients. Scalar buffers are reduction
/// heads (losses and their gradient seeds, which carry the loss scale);
/// those stay full precision, like everything accumulated.
#[inline]
pub fn quantize_store(data: &mut [f64]) {
    if mode() == PrecisionMode::MixedHalf && data.len() > 1 {
        round_half_slice(data);
    } else if data.iter().any(|v| !v.is_finite()) {
        signal_overflow();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent bit-level reference: decompose an f64 and rebuild the
    /// nearest binary16 by hand (round to nearest, ties to even).
    fn half_reference(x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        let sign = if x.is_sign_negative() { -1.0 } else { 1.0 };
        let a = x.abs();
        if a == 0.0 {
            return sign * 0.0;
        }
        // Largest finite half is (2 - 2^-10) * 2^15 = 65504; the rounding
        // boundary to infinity is 65520.
        if a >= 65520.0 {
            return sign * f64::INFINITY;
        }
        // Subnormal spacing below 2^-14 is 2^-24; normal spacing is
        // 2^(e-10) for 2^e <= a < 2^(e+1).
        let e = a.log2().floor() as i32;
        let quantum = if e < -14 {
            2f64.powi(-24)
        } else {
            2f64.powi(e - 10)
        };
        let q = a / quantum;
        let mut n = q.floor();
        let frac = q - n;
        if frac > 0.5 || (frac == 0.5 && (n as u64) % 2 == 1) {
            n += 1.0;
        }
        let r = n * quantum;
        if r >= 65520.0 {
            return sign * f64::INFINITY;
        }
        sign * r
    }

    #[test]
    fn exact_values_pass_through() {
        assert_eq!(round_half_value(1.0), 1.0);
        assert_eq!(round_half_value(-2.5), -2.5);
        assert_eq!(round_half_value(65504.0), 65504.0);
        assert_eq!(round_half_value(0.0), 0.0);
    }

    #[test]
    fn overflow_at_half_max_boundary() {
        // 65520 is the midpoint between 65504 and the out-of-range 65536;
        // ties-to-even sends it to infinity.
        assert!(round_half_value(65520.0).is_infinite());
        assert!(round_half_value(70000.0).is_infinite());
        assert_eq!(round_half_value(65519.0), 65504.0);
    }

    #[test]
    fn overflow_signal_raised_by_store() {
        reset_overflow();
        set_mode(PrecisionMode::MixedHalf);
        let mut buf = vec![1.0, 65520.0];
        quantize_store(&mut buf);
        assert!(overflow_seen());
        assert!(buf[1].is_infinite());
        set_mode(PrecisionMode::Single);
        reset_overflow();
    }

    #[test]
    fn matches_bit_level_reference() {
        let mut rng = 0x243f6a8885a308d3u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            rng
        };
        for _ in 0..20_000 {
            let bits = next();
            // Mix magnitudes: mantissa noise times a wide exponent range.
            let mag = ((bits >> 12) as f64 / (1u64 << 52) as f64) * 2f64.powi((bits % 40) as i32 - 20);
            let x = if bits & 1 == 0 { mag } else { -mag };
            let got = round_half_value(x);
            let want = half_reference(x);
            assert!(
                got == want || (got == 0.0 && want == 0.0),
                "x={x:e} got={got:e} want={want:e}"
            );
        }
    }

    #[test]
    fn policy_invariants() {
        assert!(PrecisionPolicy::single().validate().is_ok());
        assert!(PrecisionPolicy::mixed_half().validate().is_ok());
        let mut p = PrecisionPolicy::single();
        p.loss_scale = 2.0;
        assert!(p.validate().is_err());
        let mut p = PrecisionPolicy::mixed_half();
        p.loss_scale = 3.0;
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn idempotent(x in -1e6f64..1e6) {
            let once = round_half_value(x);
            prop_assert_eq!(round_half_value(once).to_bits(), once.to_bits());
        }

        #[test]
        fn monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_half_value(lo) <= round_half_value(hi));
        }
    }
}
