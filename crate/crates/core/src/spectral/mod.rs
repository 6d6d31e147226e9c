//! Fourier analysis, high-frequency extraction and Sobel seam detection.

mod dft;
mod highpass;
mod sobel;

pub use dft::{dft2, dft2_direct, fftshift, idft2, ifftshift, SpectrumGrid};
pub use highpass::{
    extract_hf, extract_hf_adjoint, extract_hf_rgb, extract_hf_var, highpass_linear, highpass_mask,
    HighPassConfig, Normalize,
};
pub use sobel::{band_columns, sobel_magnitude, sobel_seam, sobel_x, DEFAULT_BAND};
