use alloc::vec::Vec;
use core::f64::consts::PI;

/// Precomputed radix-2 complex FFT of a fixed power-of-two size.
#[derive(Clone, Debug)]
pub struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "fft size must be a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let half = n / 2;
        let cos = (0..half).map(|k| libm::cos(-2.0 * PI * k as f64 / n as f64)).collect();
        let sin = (0..half).map(|k| libm::sin(-2.0 * PI * k as f64 / n as f64)).collect();
        Self { n, cos, sin, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X_k = sum_n x_n exp(-2 pi i k n / N)`.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matches_direct_dft() {
        let n = 16;
        let x: Vec<f64> = (0..n).map(|i| libm::sin(i as f64 * 0.9) + 0.3 * i as f64).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        Fft::new(n).forward(&mut re, &mut im);
        for k in 0..n {
            let (mut dr, mut di) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * (k * t) as f64 / n as f64;
                dr += v * libm::cos(ang);
                di += v * libm::sin(ang);
            }
            assert!((dr - re[k]).abs() < 1e-9 && (di - im[k]).abs() < 1e-9);
        }
    }
}
