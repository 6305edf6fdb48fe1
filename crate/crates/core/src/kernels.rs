//! Multiplication-free matrix-vector products over packed ternary weights.
//!
//! Activations are quantized per vector to int8 with an absmax scale. The
//! integer dot product of each trit row with the int8 activations is computed
//! exactly (adds, subtracts and skips only) and rescaled once by `α·s`.
//!
//! Two kernels are provided. On x86_64 with AVX2 the trit codes of 32 weights
//! are expanded to byte masks with a shuffle and applied with `sign_epi8`.
//! Elsewhere a per-call lookup table maps each packed byte to the signed sum
//! of its four activations.

use std::time::Instant;

use crate::error::{shape_err, Error, Result};
use crate::quant::TernaryTensor;
use crate::rng::RngStream;

/// Int8 activations with their dequantization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedActivations {
    pub values: Vec<i8>,
    pub scale: f64,
}

impl QuantizedActivations {
    pub fn dequantize(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| f64::from(v) * self.scale)
            .collect()
    }
}

/// Absmax int8 quantization: `s = max|x| / 127`, `q = round(x / s)`.
///
/// Rounding is half away from zero. An all-zero vector yields zeros with scale 1.
pub fn quantize_activations(x: &[f64]) -> Result<QuantizedActivations> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite activation".into()));
    }
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(QuantizedActivations {
            values: vec![0; x.len()],
            scale: 1.0,
        });
    }
    let scale = max / 127.0;
    let values = x.iter().map(|&v| round_half_away(v / scale)).collect();
    Ok(QuantizedActivations { values, scale })
}

/// `y.round()` clamped to ±127, without a libm call.
fn round_half_away(y: f64) -> i8 {
    let y = y.clamp(-127.0, 127.0);
    let t = y as i32;
    let frac = y - t as f64;
    (t + i32::from(frac >= 0.5) - i32::from(frac <= -0.5)) as i8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Avx2,
    Lut,
    Scalar,
}

impl Kernel {
    /// Fastest kernel available on this CPU.
    pub fn detect() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                return Kernel::Avx2;
            }
        }
        Kernel::Lut
    }

    pub fn is_available(self) -> bool {
        match self {
            Kernel::Avx2 => Kernel::detect() == Kernel::Avx2,
            Kernel::Lut | Kernel::Scalar => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Avx2 => "avx2",
            Kernel::Lut => "lut",
            Kernel::Scalar => "scalar",
        }
    }
}

fn check_shape(w: &TernaryTensor, n: usize) -> Result<()> {
    if w.cols() != n {
        return shape_err(format!(
            "ternary matrix has {} columns, activation has {n}",
            w.cols()
        ));
    }
    Ok(())
}

/// Exact integer products `Σ_j t_ij · q_j` with the default kernel.
pub fn ternary_matvec_int(w: &TernaryTensor, xq: &[i8]) -> Result<Vec<i32>> {
    ternary_matvec_int_with(Kernel::detect(), w, xq)
}

pub fn ternary_matvec_int_with(kernel: Kernel, w: &TernaryTensor, xq: &[i8]) -> Result<Vec<i32>> {
    check_shape(w, xq.len())?;
    if xq.contains(&i8::MIN) {
        return Err(Error::Invalid(
            "int8 activations must lie in [-127, 127]".into(),
        ));
    }
    let mut y = vec![0i32; w.rows()];
    if !w.cols().is_multiple_of(4) || kernel == Kernel::Scalar {
        scalar_rows(w, xq, &mut y);
        return Ok(y);
    }
    match kernel {
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 if Kernel::Avx2.is_available() => {
            let bpr = w.cols() / 4;
            for (yr, row) in y.iter_mut().zip(w.packed().chunks_exact(bpr)) {
                // SAFETY: AVX2 support was checked at runtime above.
                *yr = unsafe { avx2::row_dot(row, xq) };
            }
        }
        Kernel::Avx2 => {
            return Err(Error::Invalid(
                "AVX2 kernel is not available on this CPU".into(),
            ))
        }
        _ => lut_rows(w, xq, &mut y),
    }
    Ok(y)
}

/// Integer products for `n` activation rows at once, output `n × rows` row-major.
///
/// Each packed weight row is expanded once and reused across all activation rows.
pub fn ternary_matmul_int(w: &TernaryTensor, xq: &[i8], n: usize) -> Result<Vec<i32>> {
    let cols = w.cols();
    if xq.len() != n * cols {
        return shape_err(format!(
            "{} activations do not form {n} rows of {cols}",
            xq.len()
        ));
    }
    if xq.contains(&i8::MIN) {
        return Err(Error::Invalid(
            "int8 activations must lie in [-127, 127]".into(),
        ));
    }
    let rows = w.rows();
    let mut out = vec![0i32; n * rows];
    #[cfg(target_arch = "x86_64")]
    if cols.is_multiple_of(4) && Kernel::detect() == Kernel::Avx2 {
        // SAFETY: AVX2 support was checked at runtime above.
        unsafe { avx2::batch_dot(w.packed(), cols, rows, xq, n, &mut out) };
        return Ok(out);
    }
    for t in 0..n {
        let y = ternary_matvec_int(w, &xq[t * cols..(t + 1) * cols])?;
        out[t * rows..(t + 1) * rows].copy_from_slice(&y);
    }
    Ok(out)
}

/// `y = α · s · (T q)`, the deployed ternary product.
pub fn ternary_matvec(w: &TernaryTensor, x: &QuantizedActivations) -> Result<Vec<f64>> {
    let acc = ternary_matvec_int(w, &x.values)?;
    let k = w.scale() * x.scale;
    Ok(acc.into_iter().map(|v| k * f64::from(v)).collect())
}

/// Quantizes `x` and applies [`ternary_matvec`].
pub fn ternary_matvec_f64(w: &TernaryTensor, x: &[f64]) -> Result<Vec<f64>> {
    ternary_matvec(w, &quantize_activations(x)?)
}

/// Decode-and-multiply oracle in f64.
pub fn ternary_matvec_reference(w: &TernaryTensor, x: &QuantizedActivations) -> Result<Vec<f64>> {
    check_shape(w, x.values.len())?;
    let mut y = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let mut acc = 0.0;
        for j in 0..w.cols() {
            acc += f64::from(w.trit(i, j)) * f64::from(x.values[j]);
        }
        y.push(acc * w.scale() * x.scale);
    }
    Ok(y)
}

fn scalar_rows(w: &TernaryTensor, xq: &[i8], y: &mut [i32]) {
    let cols = w.cols();
    let packed = w.packed();
    for (i, yr) in y.iter_mut().enumerate() {
        let mut acc = 0i32;
        for (j, &xj) in xq.iter().enumerate() {
            let idx = i * cols + j;
            match (packed[idx / 4] >> (2 * (idx % 4))) & 0b11 {
                0b01 => acc += i32::from(xj),
                0b10 => acc -= i32::from(xj),
                _ => {}
            }
        }
        *yr = acc;
    }
}

/// For every group of four activations, the signed sum selected by each byte.
fn build_lut(xq: &[i8]) -> Vec<i16> {
    let mut table = vec![0i16; xq.len() / 4 * 256];
    let signed = |code: usize, v: i8| -> i16 {
        match code {
            0b01 => i16::from(v),
            0b10 => -i16::from(v),
            _ => 0,
        }
    };
    for (t, xs) in table.chunks_exact_mut(256).zip(xq.chunks_exact(4)) {
        let mut lo = [0i16; 16];
        let mut hi = [0i16; 16];
        for code in 0..16 {
            let (c0, c1) = (code & 3, code >> 2);
            lo[code] = signed(c0, xs[0]) + signed(c1, xs[1]);
            hi[code] = signed(c0, xs[2]) + signed(c1, xs[3]);
        }
        for h in 0..16 {
            for l in 0..16 {
                t[h * 16 + l] = lo[l] + hi[h];
            }
        }
    }
    table
}

fn lut_rows(w: &TernaryTensor, xq: &[i8], y: &mut [i32]) {
    let table = build_lut(xq);
    let bpr = w.cols() / 4;
    for (yr, row) in y.iter_mut().zip(w.packed().chunks_exact(bpr)) {
        let mut acc = [0i32; 4];
        let mut chunks = row.chunks_exact(4);
        let mut g = 0;
        for ch in &mut chunks {
            let t = &table[g * 256..(g + 4) * 256];
            acc[0] += i32::from(t[ch[0] as usize]);
            acc[1] += i32::from(t[256 + ch[1] as usize]);
            acc[2] += i32::from(t[512 + ch[2] as usize]);
            acc[3] += i32::from(t[768 + ch[3] as usize]);
            g += 4;
        }
        for &b in chunks.remainder() {
            acc[0] += i32::from(table[g * 256 + b as usize]);
            g += 1;
        }
        *yr = acc.iter().sum();
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn expand(bytes: u64) -> __m256i {
        let ctrl = _mm256_setr_epi8(
            0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 6, 6, 6, 6, 7,
            7, 7, 7,
        );
        let mask = _mm256_set1_epi32(0xC030_0C03u32 as i32);
        let pos = _mm256_set1_epi32(0x4010_0401u32 as i32);
        let neg = _mm256_set1_epi32(0x8020_0802u32 as i32);
        let spread = _mm256_shuffle_epi8(_mm256_set1_epi64x(bytes as i64), ctrl);
        let t = _mm256_and_si256(spread, mask);
        _mm256_sub_epi8(_mm256_cmpeq_epi8(t, neg), _mm256_cmpeq_epi8(t, pos))
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn hsum(v: __m256i) -> i32 {
        let s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256(v, 1));
        let s = _mm_hadd_epi32(s, s);
        _mm_cvtsi128_si32(_mm_hadd_epi32(s, s))
    }

    /// Scalar sum over the packed bytes past the last full 32-trit group.
    fn tail(row: &[u8], start: usize, x: &[i8]) -> i32 {
        let mut total = 0;
        for (b, &byte) in row.iter().enumerate().skip(start) {
            for k in 0..4 {
                let xv = i32::from(x[4 * b + k]);
                match (byte >> (2 * k)) & 0b11 {
                    0b01 => total += xv,
                    0b10 => total -= xv,
                    _ => {}
                }
            }
        }
        total
    }

    /// `Σ_k sign(x_k, w_k)` over `signs`, in i16 blocks of 64 steps.
    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn signed_sum(signs: *const __m256i, full: usize, x: *const i8) -> __m256i {
        let ones8 = _mm256_set1_epi8(1);
        let ones16 = _mm256_set1_epi16(1);
        let mut acc32 = _mm256_setzero_si256();
        let mut block = 0;
        while block < full {
            let end = (block + 64).min(full);
            let mut acc16 = _mm256_setzero_si256();
            for k in block..end {
                let xv = _mm256_loadu_si256(x.add(32 * k) as *const __m256i);
                acc16 = _mm256_add_epi16(
                    acc16,
                    _mm256_maddubs_epi16(ones8, _mm256_sign_epi8(xv, *signs.add(k))),
                );
            }
            acc32 = _mm256_add_epi32(acc32, _mm256_madd_epi16(acc16, ones16));
            block = end;
        }
        acc32
    }

    /// `out[t·rows + r] = Σ_j t_rj · x_tj` for every weight row and activation row.
    ///
    /// # Safety
    /// The CPU must support AVX2. `cols % 4 == 0`, `packed.len() == rows·cols/4`,
    /// `x.len() == n·cols` and `out.len() == n·rows`.
    #[target_feature(enable = "avx2")]
    pub unsafe fn batch_dot(
        packed: &[u8],
        cols: usize,
        rows: usize,
        x: &[i8],
        n: usize,
        out: &mut [i32],
    ) {
        let bpr = cols / 4;
        let full = bpr / 8;
        let mut signs: Vec<__m256i> = Vec::with_capacity(4 * full);
        let mut r = 0;
        while r < rows {
            let group = (rows - r).min(4);
            signs.clear();
            for g in 0..group {
                let row = &packed[(r + g) * bpr..(r + g + 1) * bpr];
                for k in 0..full {
                    signs.push(expand(u64::from_le_bytes(
                        row[8 * k..8 * k + 8].try_into().unwrap(),
                    )));
                }
            }
            let sp = signs.as_ptr();
            for t in 0..n {
                let xt = &x[t * cols..(t + 1) * cols];
                let o = &mut out[t * rows + r..t * rows + r + group];
                if group == 4 {
                    let a0 = signed_sum(sp, full, xt.as_ptr());
                    let a1 = signed_sum(sp.add(full), full, xt.as_ptr());
                    let a2 = signed_sum(sp.add(2 * full), full, xt.as_ptr());
                    let a3 = signed_sum(sp.add(3 * full), full, xt.as_ptr());
                    let h = _mm256_hadd_epi32(_mm256_hadd_epi32(a0, a1), _mm256_hadd_epi32(a2, a3));
                    let s =
                        _mm_add_epi32(_mm256_castsi256_si128(h), _mm256_extracti128_si256(h, 1));
                    _mm_storeu_si128(o.as_mut_ptr() as *mut __m128i, s);
                } else {
                    for (g, v) in o.iter_mut().enumerate() {
                        *v = hsum(signed_sum(sp.add(g * full), full, xt.as_ptr()));
                    }
                }
                if 8 * full < bpr {
                    for (g, v) in o.iter_mut().enumerate() {
                        *v += tail(&packed[(r + g) * bpr..(r + g + 1) * bpr], 8 * full, xt);
                    }
                }
            }
            r += group;
        }
    }

    /// Signed dot product of one packed trit row with int8 activations.
    ///
    /// # Safety
    /// The CPU must support AVX2. `row.len() * 4 == x.len()`.
    #[target_feature(enable = "avx2")]
    pub unsafe fn row_dot(row: &[u8], x: &[i8]) -> i32 {
        let ctrl = _mm256_setr_epi8(
            0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 6, 6, 6, 6, 7,
            7, 7, 7,
        );
        let mask = _mm256_set1_epi32(0xC030_0C03u32 as i32);
        let pos = _mm256_set1_epi32(0x4010_0401u32 as i32);
        let neg = _mm256_set1_epi32(0x8020_0802u32 as i32);
        let ones8 = _mm256_set1_epi8(1);
        let ones16 = _mm256_set1_epi16(1);

        let full = row.len() / 8;
        let mut acc32 = _mm256_setzero_si256();
        // 64 steps of at most 2·127 per i16 lane stay below i16::MAX.
        for block in (0..full).step_by(64) {
            let mut acc16 = _mm256_setzero_si256();
            for k in block..(block + 64).min(full) {
                let bytes = u64::from_le_bytes(row[8 * k..8 * k + 8].try_into().unwrap());
                let spread = _mm256_shuffle_epi8(_mm256_set1_epi64x(bytes as i64), ctrl);
                let t = _mm256_and_si256(spread, mask);
                let w = _mm256_sub_epi8(_mm256_cmpeq_epi8(t, neg), _mm256_cmpeq_epi8(t, pos));
                let xv = _mm256_loadu_si256(x.as_ptr().add(32 * k) as *const __m256i);
                acc16 =
                    _mm256_add_epi16(acc16, _mm256_maddubs_epi16(ones8, _mm256_sign_epi8(xv, w)));
            }
            acc32 = _mm256_add_epi32(acc32, _mm256_madd_epi16(acc16, ones16));
        }
        let mut lanes = [0i32; 8];
        _mm256_storeu_si256(lanes.as_mut_ptr() as *mut __m256i, acc32);
        let mut total: i32 = lanes.iter().sum();

        for (b, &byte) in row.iter().enumerate().skip(8 * full) {
            for k in 0..4 {
                let xv = i32::from(x[4 * b + k]);
                match (byte >> (2 * k)) & 0b11 {
                    0b01 => total += xv,
                    0b10 => total -= xv,
                    _ => {}
                }
            }
        }
        total
    }
}

/// Dense f32 row-major matvec used as the speed baseline.
pub fn dense_matvec_f32(w: &[f32], rows: usize, cols: usize, x: &[f32], y: &mut [f32]) {
    for (yr, row) in y.iter_mut().zip(w.chunks_exact(cols)).take(rows) {
        let mut acc = [0f32; 8];
        let mut rc = row.chunks_exact(8);
        let mut xc = x.chunks_exact(8);
        for (a, b) in (&mut rc).zip(&mut xc) {
            for k in 0..8 {
                acc[k] += a[k] * b[k];
            }
        }
        let mut s: f32 = acc.iter().sum();
        for (a, b) in rc.remainder().iter().zip(xc.remainder()) {
            s += a * b;
        }
        *yr = s;
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchResult {
    pub rows: usize,
    pub cols: usize,
    pub kernel: &'static str,
    pub median_ns: u64,
    pub p95_ns: u64,
    pub dense_median_ns: u64,
    pub speedup: f64,
}

fn time_ns(iters: usize, mut f: impl FnMut()) -> (u64, u64) {
    for _ in 0..iters.min(10) {
        f();
    }
    let mut samples: Vec<u64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    let median = samples[samples.len() / 2];
    let p95 = samples[((samples.len() as f64 * 0.95) as usize).min(samples.len() - 1)];
    (median, p95)
}

/// Times the ternary kernel against the dense f32 baseline on random data.
///
/// The ternary timing covers activation quantization, the integer product and
/// the final rescale.
pub fn bench_matvec(rows: usize, cols: usize, iters: usize, seed: u64) -> Result<BenchResult> {
    if rows == 0 || cols == 0 || iters == 0 {
        return Err(Error::Invalid(
            "bench needs positive rows, cols and iters".into(),
        ));
    }
    let mut rng = RngStream::new(seed, 0xBE4C);
    let trits: Vec<i8> = (0..rows * cols).map(|_| rng.below(3) as i8 - 1).collect();
    let tern = TernaryTensor::from_trits(rows, cols, &trits, 0.5)?;
    let dense: Vec<f32> = (0..rows * cols).map(|_| rng.normal() as f32).collect();
    let x: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let mut yf = vec![0f32; rows];

    let (median, p95) = time_ns(iters, || {
        std::hint::black_box(ternary_matvec_f64(&tern, std::hint::black_box(&x)).unwrap());
    });
    let (dense_median, _) = time_ns(iters, || {
        dense_matvec_f32(&dense, rows, cols, std::hint::black_box(&xf), &mut yf);
        std::hint::black_box(&yf);
    });
    Ok(BenchResult {
        rows,
        cols,
        kernel: Kernel::detect().name(),
        median_ns: median,
        p95_ns: p95,
        dense_median_ns: dense_median,
        speedup: dense_median as f64 / median.max(1) as f64,
    })
}
