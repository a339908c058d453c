use core::fmt::Debug;

use num_traits::Float;

/// Floating-point element type. Training runs in `f32`; gradient checks and
/// oracle comparisons run in `f64`.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    /// Name used in checkpoint headers.
    const DTYPE: &'static str;
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut alloc::vec::Vec<u8>);
    /// Reads one value from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    // `Float::exp` and friends switch to the platform maths library whenever
    // any crate in the build enables `num-traits/std`, so results would
    // depend on the dependency graph. These always go through `libm`.
    fn det_sqrt(self) -> Self;
    fn det_exp(self) -> Self;
    fn det_ln(self) -> Self;
    fn det_tanh(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
    fn det_sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn det_exp(self) -> Self {
        libm::expf(self)
    }
    fn det_ln(self) -> Self {
        libm::logf(self)
    }
    fn det_tanh(self) -> Self {
        libm::tanhf(self)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
    fn det_sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn det_exp(self) -> Self {
        libm::exp(self)
    }
    fn det_ln(self) -> Self {
        libm::log(self)
    }
    fn det_tanh(self) -> Self {
        libm::tanh(self)
    }
}
