//! Cached 3D transforms on row-major cubes.
//!
//! Lines along the two strided axes are gathered in blocks of `BLOCK`
//! neighbouring columns so every read and write touches contiguous memory.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftDirection, FftPlanner};

const BLOCK: usize = 32;

/// Unnormalized complex 3D DFT of side `n`.
pub struct Fft3 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("n", &self.n).finish()
    }
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<Fft3>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Fft3>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl Fft3 {
    /// Shared plan for side `n`; plans are immutable once built.
    pub fn shared(n: usize) -> Arc<Fft3> {
        let mut cache = plan_cache().lock().expect("fft plan cache poisoned");
        cache
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Arc::new(Fft3 {
                    n,
                    forward: planner.plan_fft_forward(n),
                    inverse: planner.plan_fft_inverse(n),
                })
            })
            .clone()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.process(data, FftDirection::Forward);
    }

    /// Unnormalized inverse (no 1/n³ factor).
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.process(data, FftDirection::Inverse);
    }

    fn plan(&self, dir: FftDirection) -> &Arc<dyn Fft<f64>> {
        match dir {
            FftDirection::Forward => &self.forward,
            FftDirection::Inverse => &self.inverse,
        }
    }

    pub fn process(&self, data: &mut [Complex64], dir: FftDirection) {
        let n = self.n;
        assert_eq!(data.len(), n * n * n, "buffer does not match plan size");
        let fft = self.plan(dir);
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut lines = vec![Complex64::default(); BLOCK * n];

        // z: contiguous rows
        fft.process_with_scratch(data, &mut scratch);
        // y: stride n inside each x-slab
        for slab in data.chunks_exact_mut(n * n) {
            strided_pass(slab, n, n, 1, n, fft.as_ref(), &mut lines, &mut scratch);
        }
        // x: stride n² with y-rows as the outer loop
        for j in 0..n {
            let tail = &mut data[j * n..];
            strided_pass(tail, n, n * n, 1, n, fft.as_ref(), &mut lines, &mut scratch);
        }
    }
}

/// Transforms `count` lines of length `len`; line `c` starts at `c * col_stride`
/// and its elements are `stride` apart.
#[allow(clippy::too_many_arguments)]
fn strided_pass(
    data: &mut [Complex64],
    len: usize,
    stride: usize,
    col_stride: usize,
    count: usize,
    fft: &dyn Fft<f64>,
    lines: &mut [Complex64],
    scratch: &mut [Complex64],
) {
    let mut c0 = 0;
    while c0 < count {
        let b = BLOCK.min(count - c0);
        for i in 0..len {
            let row = i * stride + c0 * col_stride;
            for c in 0..b {
                lines[c * len + i] = data[row + c * col_stride];
            }
        }
        fft.process_with_scratch(&mut lines[..b * len], scratch);
        for i in 0..len {
            let row = i * stride + c0 * col_stride;
            for c in 0..b {
                data[row + c * col_stride] = lines[c * len + i];
            }
        }
        c0 += b;
    }
}

/// Zero-padded real convolution on a doubled cube.
///
/// Input and output are `n³` real arrays; the transform runs on the `(2n)³`
/// cube in half-spectrum form `[2n][2n][n+1]` and skips lines that are known to
/// be zero on the way in and whose results are discarded on the way out.
pub struct PaddedConvolver {
    n: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PaddedConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PaddedConvolver").field("n", &self.n).finish()
    }
}

impl PaddedConvolver {
    pub fn new(n: usize) -> Self {
        let m = 2 * n;
        let mut real = RealFftPlanner::<f64>::new();
        let mut planner = FftPlanner::new();
        PaddedConvolver {
            n,
            r2c: real.plan_fft_forward(m),
            c2r: real.plan_fft_inverse(m),
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        }
    }

    /// Length of the half-spectrum buffer, `(2n)² (n+1)`.
    pub fn spectrum_len(&self) -> usize {
        let m = 2 * self.n;
        m * m * (self.n + 1)
    }

    /// Index of `(qx, qy, qz)` in the half-spectrum buffer.
    pub fn spectrum_index(&self, qx: usize, qy: usize, qz: usize) -> usize {
        let m = 2 * self.n;
        (qx * m + qy) * (self.n + 1) + qz
    }

    /// Unnormalized forward transform of the zero-padded `src` into `spec`.
    pub fn forward(&self, src: &[f64], spec: &mut [Complex64]) {
        let n = self.n;
        let m = 2 * n;
        let hz = n + 1;
        assert_eq!(src.len(), n * n * n);
        assert_eq!(spec.len(), self.spectrum_len());
        spec.fill(Complex64::default());

        let mut line = vec![0.0; m];
        let mut out = vec![Complex64::default(); hz];
        let mut rscratch = self.r2c.make_scratch_vec();
        for x in 0..n {
            for y in 0..n {
                line[..n].copy_from_slice(&src[(x * n + y) * n..(x * n + y + 1) * n]);
                line[n..].fill(0.0);
                self.r2c
                    .process_with_scratch(&mut line, &mut out, &mut rscratch)
                    .expect("r2c length");
                let base = (x * m + y) * hz;
                spec[base..base + hz].copy_from_slice(&out);
            }
        }

        let fft = self.forward.as_ref();
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut lines = vec![Complex64::default(); BLOCK * m];
        // y lines exist only for x < n
        for x in 0..n {
            let slab = &mut spec[x * m * hz..(x + 1) * m * hz];
            strided_pass(slab, m, hz, 1, hz, fft, &mut lines, &mut scratch);
        }
        // x lines for every (qy, qz)
        for qy in 0..m {
            let tail = &mut spec[qy * hz..];
            strided_pass(tail, m, m * hz, 1, hz, fft, &mut lines, &mut scratch);
        }
    }

    /// Unnormalized inverse of `spec` (consumed as scratch), keeping the `n³`
    /// corner of the doubled cube.
    pub fn inverse(&self, spec: &mut [Complex64], dst: &mut [f64]) {
        let n = self.n;
        let m = 2 * n;
        let hz = n + 1;
        assert_eq!(dst.len(), n * n * n);
        assert_eq!(spec.len(), self.spectrum_len());

        let fft = self.inverse.as_ref();
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut lines = vec![Complex64::default(); BLOCK * m];
        for qy in 0..m {
            let tail = &mut spec[qy * hz..];
            strided_pass(tail, m, m * hz, 1, hz, fft, &mut lines, &mut scratch);
        }
        for x in 0..n {
            let slab = &mut spec[x * m * hz..(x + 1) * m * hz];
            strided_pass(slab, m, hz, 1, hz, fft, &mut lines, &mut scratch);
        }

        let mut inp = vec![Complex64::default(); hz];
        let mut line = vec![0.0; m];
        let mut cscratch = self.c2r.make_scratch_vec();
        for x in 0..n {
            for y in 0..n {
                let base = (x * m + y) * hz;
                inp.copy_from_slice(&spec[base..base + hz]);
                // C2R ignores the imaginary parts of the DC and Nyquist bins
                inp[0].im = 0.0;
                inp[n].im = 0.0;
                self.c2r
                    .process_with_scratch(&mut inp, &mut line, &mut cscratch)
                    .expect("c2r length");
                dst[(x * n + y) * n..(x * n + y + 1) * n].copy_from_slice(&line[..n]);
            }
        }
    }
}
