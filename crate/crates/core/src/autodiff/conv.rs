//! im2col / col2im kernels shared by the convolution primitives.

use super::Real;

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Geom {
    /// Output extent of a forward convolution over `(h, w)`.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.ph;
        let wp = w + 2 * self.pw;
        if hp < self.kh || wp < self.kw || self.sh == 0 || self.sw == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.sh + 1, (wp - self.kw) / self.sw + 1))
    }

    /// Output extent of a transposed convolution over `(h, w)`.
    pub fn transpose_out(&self, h: usize, w: usize, oph: usize, opw: usize) -> Option<(usize, usize)> {
        let ho = ((h - 1) * self.sh + self.kh + oph).checked_sub(2 * self.ph)?;
        let wo = ((w - 1) * self.sw + self.kw + opw).checked_sub(2 * self.pw)?;
        Some((ho, wo))
    }
}

/// Unfolds `img` (`c x hi x wi`) into `cols` (`c*kh*kw x ho*wo`).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    img: &[T],
    c: usize,
    hi: usize,
    wi: usize,
    g: Geom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let src = &img[ch * hi * wi..(ch + 1) * hi * wi];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= hi as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let line = &src[ih as usize * wi..(ih as usize + 1) * wi];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        *o = if iw < 0 || iw >= wi as isize {
                            T::zero()
                        } else {
                            line[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `img`, accumulating.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    hi: usize,
    wi: usize,
    g: Geom,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut img[ch * hi * wi..(ch + 1) * hi * wi];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih >= hi as isize {
                        continue;
                    }
                    let line = &mut dst[ih as usize * wi..(ih as usize + 1) * wi];
                    for ow in 0..wo {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw >= 0 && iw < wi as isize {
                            line[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geom { kh: 3, kw: 2, sh: 2, sw: 1, ph: 1, pw: 0 };
        let (c, hi, wi) = (2, 5, 4);
        let (ho, wo) = g.conv_out(hi, wi).unwrap();
        let x: alloc::vec::Vec<f64> = (0..c * hi * wi).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: alloc::vec::Vec<f64> = (0..c * 6 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c * 6 * ho * wo];
        im2col(&x, c, hi, wi, g, ho, wo, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, hi, wi, g, ho, wo, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
