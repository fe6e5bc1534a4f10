//! Text formatting shared by the line-oriented serializers.

/// Formats a real with 9 significant digits (scientific notation).
pub(crate) fn g9(x: f64) -> String {
    format!("{x:.8e}")
}

/// FNV-1a over a byte stream; stable across platforms and builds.
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xCBF2_9CE4_8422_2325)
    }

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }

    pub(crate) fn write_f64(&mut self, x: f64) {
        self.write(&x.to_bits().to_le_bytes());
    }

    pub(crate) fn write_u64(&mut self, x: u64) {
        self.write(&x.to_le_bytes());
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_prints_nine_significant_digits() {
        assert_eq!(g9(0.0625), "6.25000000e-2");
        assert_eq!(g9(1.0), "1.00000000e0");
        assert_eq!(g9(-0.5), "-5.00000000e-1");
    }

    #[test]
    fn g9_round_trips_through_parse() {
        let x = 0.123456789;
        let y: f64 = g9(x).parse().unwrap();
        assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn fnv_is_order_sensitive() {
        let mut a = Fnv1a::new();
        a.write_u64(1);
        a.write_u64(2);
        let mut b = Fnv1a::new();
        b.write_u64(2);
        b.write_u64(1);
        assert_ne!(a.finish(), b.finish());
    }
}
