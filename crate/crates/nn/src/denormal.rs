//! Scoped flush-to-zero for subnormal floats.
//!
//! Gabor envelopes and Adam second moments routinely produce subnormal
//! values, which are orders of magnitude slower on x86. Inside the guard's
//! scope they are treated as zero.

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    fn read() -> u32 {
        let mut v: u32 = 0;
        // SAFETY: stores the current MXCSR into a valid local.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack)) };
        v
    }

    fn write(v: u32) {
        // SAFETY: only the FTZ/DAZ bits differ from a value read back from MXCSR.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &v, options(nostack)) };
    }

    pub struct Guard(u32);

    impl Guard {
        pub fn new() -> Self {
            let old = read();
            write(old | FTZ | DAZ);
            Guard(old)
        }
    }

    impl Drop for Guard {
        fn drop(&mut self) {
            write(self.0);
        }
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub struct Guard;

    impl Guard {
        pub fn new() -> Self {
            Guard
        }
    }
}

/// Restores the previous floating-point mode when dropped.
pub struct FlushToZero(#[allow(dead_code)] imp::Guard);

impl FlushToZero {
    pub fn enable() -> Self {
        FlushToZero(imp::Guard::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subnormals_flush_inside_scope_only() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        {
            let _g = FlushToZero::enable();
            let v = std::hint::black_box(tiny * half);
            if cfg!(target_arch = "x86_64") {
                assert_eq!(v, 0.0);
            }
        }
        assert!(std::hint::black_box(tiny * half) > 0.0);
    }
}
