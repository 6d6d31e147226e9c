//! Two-dimensional discrete Fourier transforms.
//!
//! Forward transforms are unnormalized, inverse transforms carry the
//! `1/(H·W)` factor. Power-of-two extents go through an iterative radix-2
//! transform; other extents use the direct per-row/column sum.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{contract, Result};
use crate::image::Image;

/// Complex `height × width` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl SpectrumGrid {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return contract(format!(
                "spectrum {height}x{width} with {} bins",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }

    pub fn re(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.im).collect()
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Forward DFT of a grayscale plane: `F[u,v] = Σ I[y,x]·exp(−2πi(uy/H + vx/W))`.
pub fn dft2(img: &Image) -> Result<SpectrumGrid> {
    img.require_gray()?;
    let values: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let grid = SpectrumGrid::from_real(img.height(), img.width(), &values)?;
    Ok(transform2(grid, false))
}

/// Inverse DFT with the `1/(H·W)` normalization.
pub fn idft2(spec: &SpectrumGrid) -> SpectrumGrid {
    transform2(spec.clone(), true)
}

/// Reference forward DFT straight from the definition, `O((HW)²)`.
pub fn dft2_direct(img: &Image) -> Result<SpectrumGrid> {
    img.require_gray()?;
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += Complex64::from_polar(img.get(x, y, 0) as f64, phase);
                }
            }
            out.push(acc);
        }
    }
    SpectrumGrid::new(h, w, out)
}

/// Separable 2D transform (rows, then columns). `inverse` conjugates the
/// kernel and divides by `H·W`.
pub(crate) fn transform2(mut grid: SpectrumGrid, inverse: bool) -> SpectrumGrid {
    let (h, w) = (grid.height, grid.width);
    let row_plan = Plan1d::new(w, inverse);
    for row in grid.data.chunks_mut(w) {
        row_plan.run(row);
    }
    let col_plan = Plan1d::new(h, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid.data[y * w + x];
        }
        col_plan.run(&mut col);
        for y in 0..h {
            grid.data[y * w + x] = col[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        for c in grid.data.iter_mut() {
            *c *= s;
        }
    }
    grid
}

/// One-dimensional unnormalized DFT of a fixed length.
struct Plan1d {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Plan1d {
    fn new(n: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        let twiddles = (0..n)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
            .collect();
        Self { n, twiddles }
    }

    fn run(&self, buf: &mut [Complex64]) {
        if self.n <= 1 {
            return;
        }
        if self.n.is_power_of_two() {
            self.radix2(buf);
        } else {
            self.direct(buf);
        }
    }

    fn direct(&self, buf: &mut [Complex64]) {
        let n = self.n;
        let input = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &x) in input.iter().enumerate() {
                acc += x * self.twiddles[(j * k) % n];
            }
            *out = acc;
        }
    }

    fn radix2(&self, buf: &mut [Complex64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + len / 2] * w;
                    buf[start + k] = a + b;
                    buf[start + k + len / 2] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

/// Moves bin `(u, v)` to `((u + ⌊H/2⌋) mod H, (v + ⌊W/2⌋) mod W)`.
pub fn fftshift(spec: &SpectrumGrid) -> SpectrumGrid {
    roll(spec, spec.height / 2, spec.width / 2)
}

/// Inverse of [`fftshift`] for every shape, odd extents included.
pub fn ifftshift(spec: &SpectrumGrid) -> SpectrumGrid {
    roll(
        spec,
        spec.height - spec.height / 2,
        spec.width - spec.width / 2,
    )
}

fn roll(spec: &SpectrumGrid, dy: usize, dx: usize) -> SpectrumGrid {
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            data[((u + dy) % h) * w + (v + dx) % w] = spec.data[u * w + v];
        }
    }
    SpectrumGrid {
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_plane(h: usize, w: usize, seed: u64) -> Image {
        let t = ndarr::Tensor::uniform(&[h * w], 0.0, 1.0, seed);
        Image::new(w, h, 1, t.data().iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn constant_plane_is_dc_only() {
        let c = 0.37f32;
        let f = dft2(&Image::filled(4, 4, 1, c)).unwrap();
        assert!((f.get(0, 0).re - 16.0 * c as f64).abs() < 1e-12);
        for (i, z) in f.data().iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-12, "bin {i}");
        }
    }

    #[test]
    fn fast_path_matches_direct_formula() {
        for (h, w) in [(8, 8), (16, 4), (6, 10), (5, 8)] {
            let img = random_plane(h, w, (h * 31 + w) as u64);
            let fast = dft2(&img).unwrap();
            let slow = dft2_direct(&img).unwrap();
            let scale = slow.data().iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).norm() / scale < 1e-5, "{h}x{w}");
            }
        }
    }

    #[test]
    fn shift_moves_dc_to_center() {
        let mut data = vec![Complex64::new(0.0, 0.0); 16];
        data[0] = Complex64::new(1.0, 0.0);
        let s = fftshift(&SpectrumGrid::new(4, 4, data).unwrap());
        assert_eq!(s.get(2, 2), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn shift_round_trips_including_odd_and_unit() {
        for (h, w) in [(5, 5), (1, 1), (3, 4), (4, 7)] {
            let data = (0..h * w)
                .map(|i| Complex64::new(i as f64, -(i as f64)))
                .collect();
            let g = SpectrumGrid::new(h, w, data).unwrap();
            assert_eq!(ifftshift(&fftshift(&g)), g);
            if h == 1 && w == 1 {
                assert_eq!(fftshift(&g), g);
            }
        }
    }

    #[test]
    fn rejects_multichannel_input() {
        assert!(dft2(&Image::filled(4, 4, 3, 0.0)).is_err());
    }
}
