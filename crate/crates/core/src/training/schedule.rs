use crate::error::{Error, Result};

/// `D^-0.5 · min(step^-0.5, step · warmup^-1.5)`, with `step` counted from 1.
pub fn noam_lr(step: u64, d: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::config("noam schedule is undefined at step 0"));
    }
    if d == 0 || warmup == 0 {
        return Err(Error::config("noam schedule needs d >= 1 and warmup >= 1"));
    }
    let s = step as f64;
    Ok((d as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// `max(0, 1 - epoch / total)`, never below `tf_epsilon`.
pub fn teacher_forcing_ratio(epoch: usize, total_effective_epochs: usize, tf_epsilon: f64) -> f64 {
    let linear = if total_effective_epochs == 0 {
        0.0
    } else {
        (1.0 - epoch as f64 / total_effective_epochs as f64).max(0.0)
    };
    linear.max(tf_epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crossover_at_warmup() {
        let lr = noam_lr(4000, 128, 4000).unwrap();
        assert!((lr - 1.397_542_485_937_368_6e-3).abs() < 1e-15);
        assert!((lr - 1.0 / (128f64 * 4000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_zero_is_rejected() {
        assert!(noam_lr(0, 128, 4000).is_err());
    }

    #[test]
    fn tf_endpoints() {
        assert_eq!(teacher_forcing_ratio(0, 10, 1e-3), 1.0);
        assert_eq!(teacher_forcing_ratio(5, 10, 1e-3), 0.5);
        assert_eq!(teacher_forcing_ratio(10, 10, 1e-3), 1e-3);
        assert_eq!(teacher_forcing_ratio(50, 10, 1e-3), 1e-3);
    }

    proptest! {
        #[test]
        fn noam_rises_then_falls(warmup in 1u64..500, step in 1u64..2000) {
            let a = noam_lr(step, 64, warmup).unwrap();
            let b = noam_lr(step + 1, 64, warmup).unwrap();
            if step + 1 <= warmup {
                prop_assert!(b >= a);
            } else if step >= warmup {
                prop_assert!(b <= a);
            }
        }

        #[test]
        fn tf_in_range(epoch in 0usize..200, total in 1usize..100) {
            let r = teacher_forcing_ratio(epoch, total, 1e-3);
            prop_assert!((1e-3..=1.0).contains(&r));
        }
    }
}
