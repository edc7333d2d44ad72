//! Synthetic MR data: phantoms, coil sensitivities, Fourier transforms and
//! k-space renderings.

mod coils;
mod complex;
mod fft;
mod phantom;

pub use coils::{kspace_image, rss_combine, simulate_coils, to_log_magnitude, CoilSet};
pub use complex::ComplexGrid;
pub use fft::{fft2, fftshift, ifft2, pad_centered};
pub use phantom::{generate_phantom, Ellipse, PhantomSpec};
