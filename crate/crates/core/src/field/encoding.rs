use std::f64::consts::PI;

/// Number of frequency bands.
pub const PE_BANDS: usize = 10;
/// Raw coordinates plus a sine and cosine per band and axis: `3 + 3 * 2 * 10`.
pub const PE_CHANNELS: usize = 3 + 3 * 2 * PE_BANDS;

/// Fourier features of a point in normalised coordinates:
/// `[q, sin(2^0 pi q), cos(2^0 pi q), ..., sin(2^9 pi q), cos(2^9 pi q)]`,
/// each entry covering the three axes.
pub fn positional_encode(q: [f64; 3]) -> [f64; PE_CHANNELS] {
    let mut out = [0.0; PE_CHANNELS];
    out[..3].copy_from_slice(&q);
    let mut k = 3;
    for band in 0..PE_BANDS {
        let freq = (1u64 << band) as f64 * PI;
        for &x in &q {
            out[k] = (freq * x).sin();
            k += 1;
        }
        for &x in &q {
            out[k] = (freq * x).cos();
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_three_channels() {
        assert_eq!(PE_CHANNELS, 63);
    }

    #[test]
    fn origin_encodes_to_zero_sines_unit_cosines() {
        let e = positional_encode([0.0; 3]);
        assert_eq!(&e[..3], &[0.0; 3]);
        for band in 0..PE_BANDS {
            let base = 3 + band * 6;
            assert_eq!(&e[base..base + 3], &[0.0; 3]);
            assert_eq!(&e[base + 3..base + 6], &[1.0; 3]);
        }
    }

    #[test]
    fn encoding_is_pure() {
        let q = [0.3, -0.7, 0.11];
        let a = positional_encode(q);
        let b = positional_encode(q);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
