//! Degradation pipeline: blur -> bicubic downsample -> additive noise ->
//! JPEG round-trip, applied in that fixed order with per-stage random or
//! fixed parameters.
//!
//! Stream consumption in train mode is fixed per active stage: one u64
//! draw per ranged parameter (blur sigma, noise sigma, jpeg quality),
//! plus two u64 draws per pair of noise samples for the noise field.
//! Test mode draws no parameters; only the noise field consumes the
//! stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DegradationType {
    Clean,
    Blur,
    Noise,
    Jpeg,
}

impl DegradationType {
    pub const ALL: [DegradationType; 4] = [
        DegradationType::Clean,
        DegradationType::Blur,
        DegradationType::Noise,
        DegradationType::Jpeg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DegradationType::Clean => "clean",
            DegradationType::Blur => "blur",
            DegradationType::Noise => "noise",
            DegradationType::Jpeg => "jpeg",
        }
    }
}

/// A stage parameter: fixed scalar (test mode) or sampled uniformly from
/// a range (train mode).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Range { lo: f64, hi: f64 },
}

impl Param {
    fn resolve(&self, rng: &mut RngStream) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Range { lo, hi } => rng.uniform(lo, hi),
        }
    }

    fn is_fixed(&self) -> bool {
        matches!(self, Param::Fixed(_))
    }
}

/// Integer-valued parameter (JPEG quality).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntParam {
    Fixed(u32),
    Range { lo: u32, hi: u32 },
}

impl IntParam {
    fn resolve(&self, rng: &mut RngStream) -> u32 {
        match *self {
            IntParam::Fixed(v) => v,
            IntParam::Range { lo, hi } => rng.uniform_int(lo as u64, hi as u64) as u32,
        }
    }

    fn is_fixed(&self) -> bool {
        matches!(self, IntParam::Fixed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMode {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur: Option<Param>,
    pub scale: usize,
    pub noise: Option<Param>,
    pub jpeg: Option<IntParam>,
    pub mode: DegradationMode,
}

/// Sampling ranges for train-mode degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRanges {
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u32, u32),
}

impl Default for TrainRanges {
    fn default() -> Self {
        TrainRanges {
            blur_sigma: (0.2, 3.0),
            noise_sigma: (1.0 / 255.0, 30.0 / 255.0),
            jpeg_quality: (30, 95),
        }
    }
}

/// Fixed parameters for the deterministic test variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub jpeg_quality: u32,
}

impl Default for TestParams {
    fn default() -> Self {
        TestParams {
            blur_sigma: 2.0,
            noise_sigma: 20.0 / 255.0,
            jpeg_quality: 50,
        }
    }
}

impl DegradationSpec {
    /// Train-mode spec for a client's single degradation type. Clean is
    /// downsample only.
    pub fn for_type(ty: DegradationType, scale: usize, ranges: &TrainRanges) -> DegradationSpec {
        let mut spec = DegradationSpec {
            blur: None,
            scale,
            noise: None,
            jpeg: None,
            mode: DegradationMode::Train,
        };
        match ty {
            DegradationType::Clean => {}
            DegradationType::Blur => {
                spec.blur = Some(Param::Range {
                    lo: ranges.blur_sigma.0,
                    hi: ranges.blur_sigma.1,
                })
            }
            DegradationType::Noise => {
                spec.noise = Some(Param::Range {
                    lo: ranges.noise_sigma.0,
                    hi: ranges.noise_sigma.1,
                })
            }
            DegradationType::Jpeg => {
                spec.jpeg = Some(IntParam::Range {
                    lo: ranges.jpeg_quality.0,
                    hi: ranges.jpeg_quality.1,
                })
            }
        }
        spec
    }

    fn test_combo(blur: bool, noise: bool, jpeg: bool, scale: usize, p: &TestParams) -> DegradationSpec {
        DegradationSpec {
            blur: blur.then_some(Param::Fixed(p.blur_sigma)),
            scale,
            noise: noise.then_some(Param::Fixed(p.noise_sigma)),
            jpeg: jpeg.then_some(IntParam::Fixed(p.jpeg_quality)),
            mode: DegradationMode::Test,
        }
    }
}

/// The 8 test variants: the power set of {blur, noise, jpeg} at a fixed
/// scale, in canonical order.
pub fn test_variant_specs(scale: usize, params: &TestParams) -> Vec<(String, DegradationSpec)> {
    let combos: [(&str, bool, bool, bool); 8] = [
        ("clean", false, false, false),
        ("b", true, false, false),
        ("n", false, true, false),
        ("j", false, false, true),
        ("b+n", true, true, false),
        ("b+j", true, false, true),
        ("n+j", false, true, true),
        ("b+n+j", true, true, true),
    ];
    combos
        .iter()
        .map(|&(name, b, n, j)| {
            (
                name.to_string(),
                DegradationSpec::test_combo(b, n, j, scale, params),
            )
        })
        .collect()
}

pub const VARIANT_NAMES: [&str; 8] = ["clean", "b", "n", "j", "b+n", "b+j", "n+j", "b+n+j"];

/// Isotropic Gaussian kernel, size 2*ceil(3*sigma)+1, normalized to sum
/// exactly 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    if sigma <= 0.0 {
        return Err(Error::invalid_argument(format!(
            "gaussian_kernel: sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let k = 2 * radius + 1;
    let mut data = vec![0.0f32; k * k];
    let mut sum = 0.0f64;
    for dy in 0..k {
        for dx in 0..k {
            let y = dy as f64 - radius as f64;
            let x = dx as f64 - radius as f64;
            let v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            data[dy * k + dx] = v as f32;
            sum += v;
        }
    }
    for v in &mut data {
        *v = (*v as f64 / sum) as f32;
    }
    Tensor::new(vec![k, k], data)
}

/// Per-channel 2-D correlation with edge-replicate padding; shape
/// preserved.
pub fn apply_blur(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        [a, b, c] => [*a, *b, *c],
        other => {
            return Err(Error::invalid_argument(format!(
                "apply_blur: expected (C,H,W), got {other:?}"
            )))
        }
    };
    let kshape = kernel.shape();
    if kshape.len() != 2 || kshape[0] != kshape[1] || kshape[0] % 2 == 0 {
        return Err(Error::invalid_argument(format!(
            "apply_blur: kernel must be odd square, got {kshape:?}"
        )));
    }
    let k = kshape[0];
    let r = k / 2;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for i in 0..k {
                    for j in 0..k {
                        let yy = (y as isize + i as isize - r as isize).clamp(0, h as isize - 1);
                        let xx = (x as isize + j as isize - r as isize).clamp(0, w as isize - 1);
                        acc += (kernel.data()[i * k + j] * plane[yy as usize * w + xx as usize])
                            as f64;
                    }
                }
                out.data_mut()[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Keys cubic kernel, a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-pixel source taps and normalized weights for one axis.
fn bicubic_weights(out_len: usize, s: usize) -> Vec<Vec<(usize, f64)>> {
    let in_len = out_len * s;
    let support = 2.0 * s as f64;
    (0..out_len)
        .map(|dst| {
            let src = (dst as f64 + 0.5) * s as f64 - 0.5;
            let lo = (src - support).floor() as isize;
            let hi = (src + support).ceil() as isize;
            let mut taps = Vec::new();
            let mut sum = 0.0;
            for i in lo..=hi {
                let wgt = cubic((i as f64 - src) / s as f64);
                if wgt != 0.0 {
                    let idx = i.clamp(0, in_len as isize - 1) as usize;
                    taps.push((idx, wgt));
                    sum += wgt;
                }
            }
            for t in &mut taps {
                t.1 /= sum;
            }
            taps
        })
        .collect()
}

/// Antialiased bicubic downsampling by integer factor s (kernel support
/// stretched by s, weights renormalized, edge-replicate sampling).
pub fn downsample_bicubic(image: &Tensor, s: usize) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        [a, b, c] => [*a, *b, *c],
        other => {
            return Err(Error::invalid_argument(format!(
                "downsample: expected (C,H,W), got {other:?}"
            )))
        }
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::invalid_argument(format!(
            "downsample: dims {h}x{w} not divisible by scale {s}"
        )));
    }
    if s == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h / s, w / s);
    let wx = bicubic_weights(ow, s);
    let wy = bicubic_weights(oh, s);

    // horizontal pass: (C,H,W) -> (C,H,ow)
    let mut tmp = vec![0.0f64; c * h * ow];
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for &(i, wgt) in taps {
                    acc += wgt * plane[y * w + i] as f64;
                }
                tmp[(ch * h + y) * ow + x] = acc;
            }
        }
    }
    // vertical pass: (C,H,ow) -> (C,oh,ow)
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for (y, taps) in wy.iter().enumerate() {
            for x in 0..ow {
                let mut acc = 0.0;
                for &(i, wgt) in taps {
                    acc += wgt * tmp[(ch * h + i) * ow + x];
                }
                out.data_mut()[(ch * oh + y) * ow + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// i.i.d. N(0, sigma^2) field via Box-Muller; exposed separately so the
/// pre-clamp statistics are testable.
pub fn noise_field(len: usize, sigma: f64, rng: &mut RngStream) -> Vec<f32> {
    let mut field = Vec::with_capacity(len);
    while field.len() < len {
        let (a, b) = rng.normal_pair();
        field.push((a * sigma) as f32);
        if field.len() < len {
            field.push((b * sigma) as f32);
        }
    }
    field
}

/// Adds Gaussian noise and clamps to [0,1].
pub fn add_gaussian_noise(image: &Tensor, sigma: f64, rng: &mut RngStream) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::invalid_argument("noise sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let field = noise_field(image.len(), sigma, rng);
    let mut out = image.clone();
    for (v, n) in out.data_mut().iter_mut().zip(field) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
    Ok(out)
}

// JPEG Annex-K base quantization tables.
#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

fn scaled_qtable(base: &[u16; 64], quality: u32) -> [f64; 64] {
    let s = if quality < 50 {
        5000.0 / quality as f64
    } else {
        200.0 - 2.0 * quality as f64
    };
    let mut out = [0.0; 64];
    for i in 0..64 {
        let q = ((base[i] as f64 * s + 50.0) / 100.0).floor();
        out[i] = q.clamp(1.0, 255.0);
    }
    out
}

fn dct_cos_table() -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for (x, row) in t.iter_mut().enumerate() {
        for (u, v) in row.iter_mut().enumerate() {
            *v = (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    t
}

fn cu(u: usize) -> f64 {
    if u == 0 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// One plane: pad to 8, per block DCT -> quantize -> dequantize -> IDCT.
fn jpeg_plane(plane: &[f64], h: usize, w: usize, qtable: &[f64; 64]) -> Vec<f64> {
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut padded = vec![0.0f64; ph * pw];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            padded[y * pw + x] = plane[sy * w + x.min(w - 1)];
        }
    }
    let cos = dct_cos_table();
    let mut recon = vec![0.0f64; ph * pw];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            let mut block = [0.0f64; 64];
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = padded[(by + y) * pw + bx + x] - 128.0;
                }
            }
            let mut coeffs = [0.0f64; 64];
            for v in 0..8 {
                for u in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += block[y * 8 + x] * cos[x][u] * cos[y][v];
                        }
                    }
                    let c = 0.25 * cu(u) * cu(v) * acc;
                    let q = qtable[v * 8 + u];
                    coeffs[v * 8 + u] = (c / q).round() * q;
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let mut acc = 0.0;
                    for v in 0..8 {
                        for u in 0..8 {
                            acc += cu(u) * cu(v) * coeffs[v * 8 + u] * cos[x][u] * cos[y][v];
                        }
                    }
                    recon[(by + y) * pw + bx + x] = 0.25 * acc + 128.0;
                }
            }
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&recon[y * pw..y * pw + w]);
    }
    out
}

/// Lossy JPEG distortion without the byte stream: full-range BT.601
/// YCbCr, 8x8 DCT quantization with Annex-K tables, no chroma
/// subsampling, no entropy coding.
pub fn jpeg_roundtrip(image: &Tensor, quality: u32) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid_argument(format!(
            "jpeg quality must be in [1,100], got {quality}"
        )));
    }
    let [c, h, w] = match image.shape() {
        [a, b, c] if *a == 3 => [*a, *b, *c],
        other => {
            return Err(Error::invalid_argument(format!(
                "jpeg_roundtrip: expected (3,H,W), got {other:?}"
            )))
        }
    };
    let _ = c;
    let n = h * w;
    let (rp, gp, bp) = (
        &image.data()[0..n],
        &image.data()[n..2 * n],
        &image.data()[2 * n..3 * n],
    );
    let mut yp = vec![0.0f64; n];
    let mut cb = vec![0.0f64; n];
    let mut cr = vec![0.0f64; n];
    for i in 0..n {
        let r = rp[i] as f64 * 255.0;
        let g = gp[i] as f64 * 255.0;
        let b = bp[i] as f64 * 255.0;
        yp[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    let luma_q = scaled_qtable(&LUMA_QTABLE, quality);
    let chroma_q = scaled_qtable(&CHROMA_QTABLE, quality);
    let yr = jpeg_plane(&yp, h, w, &luma_q);
    let cbr = jpeg_plane(&cb, h, w, &chroma_q);
    let crr = jpeg_plane(&cr, h, w, &chroma_q);
    let mut out = Tensor::zeros(vec![3, h, w]);
    for i in 0..n {
        let y = yr[i];
        let u = cbr[i] - 128.0;
        let v = crr[i] - 128.0;
        let r = y + 1.402 * v;
        let g = y - 0.344136 * u - 0.714136 * v;
        let b = y + 1.772 * u;
        out.data_mut()[i] = ((r / 255.0).clamp(0.0, 1.0)) as f32;
        out.data_mut()[n + i] = ((g / 255.0).clamp(0.0, 1.0)) as f32;
        out.data_mut()[2 * n + i] = ((b / 255.0).clamp(0.0, 1.0)) as f32;
    }
    Ok(out)
}

/// Full pipeline: active stages in the fixed order blur -> downsample ->
/// noise -> jpeg. Train mode samples ranged parameters from `rng`; test
/// mode requires all active parameters fixed.
pub fn degrade(hr: &Tensor, spec: &DegradationSpec, rng: &mut RngStream) -> Result<Tensor> {
    if spec.mode == DegradationMode::Test {
        let fixed = spec.blur.map_or(true, |p| p.is_fixed())
            && spec.noise.map_or(true, |p| p.is_fixed())
            && spec.jpeg.map_or(true, |p| p.is_fixed());
        if !fixed {
            return Err(Error::invalid_argument(
                "test-mode spec must have all active parameters fixed",
            ));
        }
    }
    let mut img = match spec.blur {
        Some(p) => {
            let sigma = p.resolve(rng);
            apply_blur(hr, &gaussian_kernel(sigma)?)?
        }
        None => hr.clone(),
    };
    img = downsample_bicubic(&img, spec.scale)?;
    if let Some(p) = spec.noise {
        let sigma = p.resolve(rng);
        img = add_gaussian_noise(&img, sigma, rng)?;
    }
    if let Some(p) = spec.jpeg {
        let quality = p.resolve(rng);
        img = jpeg_roundtrip(&img, quality)?;
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = derive_stream(seed, "degrade-test");
        let data = (0..c * h * w).map(|_| rng.next_f64() as f32).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    }

    fn psnr_db(a: &Tensor, b: &Tensor) -> f64 {
        10.0 * (1.0 / mse(a, b)).log10()
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        for &sigma in &[0.3, 0.8, 1.5, 2.7] {
            let k = gaussian_kernel(sigma).unwrap();
            let size = k.shape()[0];
            let sum: f64 = k.data().iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "sigma {sigma}: sum {sum}");
            // 8-fold symmetry
            for y in 0..size {
                for x in 0..size {
                    let v = k.data()[y * size + x];
                    assert_eq!(v, k.data()[(size - 1 - y) * size + x]);
                    assert_eq!(v, k.data()[y * size + (size - 1 - x)]);
                    assert_eq!(v, k.data()[x * size + y]);
                }
            }
        }
    }

    #[test]
    fn gaussian_kernel_size_and_peak() {
        let k = gaussian_kernel(0.5).unwrap();
        assert_eq!(k.shape(), &[5, 5]);
        let center = k.data()[2 * 5 + 2];
        assert!(k.data().iter().all(|&v| v <= center));
    }

    #[test]
    fn gaussian_kernel_matches_formula() {
        // sigma=0.8: size 2*ceil(2.4)+1 = 7; evaluate directly.
        let sigma = 0.8f64;
        let k = gaussian_kernel(sigma).unwrap();
        assert_eq!(k.shape(), &[7, 7]);
        let mut expected = vec![0.0f64; 49];
        let mut sum = 0.0;
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                expected[((dy + 3) * 7 + dx + 3) as usize] = v;
                sum += v;
            }
        }
        for (got, exp) in k.data().iter().zip(&expected) {
            assert!((*got as f64 - exp / sum).abs() < 1e-7);
        }
    }

    #[test]
    fn gaussian_kernel_rejects_nonpositive_sigma() {
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Tensor::full(vec![3, 6, 6], 0.6);
        let k = gaussian_kernel(1.2).unwrap();
        let out = apply_blur(&img, &k).unwrap();
        for v in out.data() {
            assert!((v - 0.6).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_identity_kernel() {
        let img = random_image(2, 5, 5, 1);
        let k = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = apply_blur(&img, &k).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn blur_matches_double_loop_oracle() {
        let img = random_image(3, 9, 9, 2);
        let kernel = gaussian_kernel(1.0).unwrap();
        let out = apply_blur(&img, &kernel).unwrap();
        let k = kernel.shape()[0];
        let r = k as isize / 2;
        let (h, w) = (9usize, 9usize);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for i in 0..k as isize {
                        for j in 0..k as isize {
                            let yy = (y as isize + i - r).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + j - r).clamp(0, w as isize - 1) as usize;
                            acc += kernel.data()[(i * k as isize + j) as usize] as f64
                                * img.data()[(c * h + yy) * w + xx] as f64;
                        }
                    }
                    let got = out.data()[(c * h + y) * w + x] as f64;
                    assert!((got - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn blur_rejects_even_kernel() {
        let img = random_image(1, 4, 4, 3);
        let k = Tensor::zeros(vec![2, 2]);
        assert!(apply_blur(&img, &k).is_err());
    }

    #[test]
    fn bicubic_s1_is_identity() {
        let img = random_image(3, 6, 6, 4);
        assert_eq!(downsample_bicubic(&img, 1).unwrap(), img);
    }

    #[test]
    fn bicubic_preserves_constant() {
        let img = Tensor::full(vec![1, 8, 8], 0.37);
        let out = downsample_bicubic(&img, 2).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_matches_direct_weighted_sum_oracle() {
        // 1x8x8 horizontal ramp downsampled by 2, checked against a
        // per-output-pixel non-separable weighted sum using the same
        // kernel definition.
        let mut data = vec![0.0f32; 64];
        for y in 0..8 {
            for x in 0..8 {
                data[y * 8 + x] = x as f32 / 7.0;
            }
        }
        let img = Tensor::new(vec![1, 8, 8], data).unwrap();
        let out = downsample_bicubic(&img, 2).unwrap();
        let s = 2.0f64;
        for oy in 0..4usize {
            for ox in 0..4usize {
                let sy = (oy as f64 + 0.5) * s - 0.5;
                let sx = (ox as f64 + 0.5) * s - 0.5;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for iy in -8i64..16 {
                    for ix in -8i64..16 {
                        let wgt = cubic((iy as f64 - sy) / s) * cubic((ix as f64 - sx) / s);
                        if wgt == 0.0 {
                            continue;
                        }
                        let yy = iy.clamp(0, 7) as usize;
                        let xx = ix.clamp(0, 7) as usize;
                        acc += wgt * img.data()[yy * 8 + xx] as f64;
                        wsum += wgt;
                    }
                }
                let expected = acc / wsum;
                let got = out.data()[oy * 4 + ox] as f64;
                assert!(
                    (got - expected).abs() < 1e-5,
                    "({oy},{ox}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn bicubic_rejects_indivisible_dims() {
        let img = random_image(1, 6, 6, 5);
        assert!(downsample_bicubic(&img, 4).is_err());
    }

    #[test]
    fn noise_sigma_zero_is_identity() {
        let img = random_image(3, 4, 4, 6);
        let mut rng = derive_stream(0, "noise");
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
    }

    #[test]
    fn noise_field_std_matches_sigma() {
        let sigma = 20.0 / 255.0;
        let mut rng = derive_stream(1, "noise-std");
        let field = noise_field(64 * 64 * 3, sigma, &mut rng);
        let n = field.len() as f64;
        let mean: f64 = field.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = field.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.03, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn noise_is_deterministic_per_stream() {
        let img = random_image(3, 8, 8, 7);
        let mut r1 = derive_stream(5, "noise-det");
        let mut r2 = derive_stream(5, "noise-det");
        let a = add_gaussian_noise(&img, 0.05, &mut r1).unwrap();
        let b = add_gaussian_noise(&img, 0.05, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jpeg_constant_mid_gray_is_exact() {
        let img = Tensor::full(vec![3, 12, 10], 128.0 / 255.0);
        for &q in &[1, 10, 50, 100] {
            let out = jpeg_roundtrip(&img, q).unwrap();
            assert_eq!(out, img, "quality {q}");
        }
    }

    #[test]
    fn jpeg_q100_high_fidelity() {
        let img = random_image(3, 16, 16, 8);
        let out = jpeg_roundtrip(&img, 100).unwrap();
        assert!(psnr_db(&img, &out) >= 40.0);
    }

    #[test]
    fn jpeg_quality_monotonicity() {
        let img = random_image(3, 24, 24, 9);
        let mut prev = f64::NEG_INFINITY;
        for &q in &[10u32, 30, 50, 70, 90] {
            let out = jpeg_roundtrip(&img, q).unwrap();
            let p = psnr_db(&img, &out);
            assert!(p >= prev, "psnr dropped from {prev} to {p} at q={q}");
            prev = p;
        }
    }

    #[test]
    fn jpeg_matches_straight_line_reference() {
        // Independent single-function reference of the same pipeline.
        fn reference(img: &Tensor, quality: u32) -> Tensor {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let n = h * w;
            let mut planes = vec![vec![0.0f64; n]; 3];
            for i in 0..n {
                let r = img.data()[i] as f64 * 255.0;
                let g = img.data()[n + i] as f64 * 255.0;
                let b = img.data()[2 * n + i] as f64 * 255.0;
                planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
                planes[1][i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
                planes[2][i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
            }
            let s = if quality < 50 {
                5000.0 / quality as f64
            } else {
                200.0 - 2.0 * quality as f64
            };
            let ph = h.div_ceil(8) * 8;
            let pw = w.div_ceil(8) * 8;
            let mut recon = vec![vec![0.0f64; n]; 3];
            for (pi, plane) in planes.iter().enumerate() {
                let base: &[u16; 64] = if pi == 0 { &LUMA_QTABLE } else { &CHROMA_QTABLE };
                let mut padded = vec![0.0f64; ph * pw];
                for y in 0..ph {
                    for x in 0..pw {
                        padded[y * pw + x] = plane[y.min(h - 1) * w + x.min(w - 1)];
                    }
                }
                let mut rec = vec![0.0f64; ph * pw];
                for by in (0..ph).step_by(8) {
                    for bx in (0..pw).step_by(8) {
                        for v in 0..8 {
                            for u in 0..8 {
                                let mut acc = 0.0;
                                for y in 0..8 {
                                    for x in 0..8 {
                                        acc += (padded[(by + y) * pw + bx + x] - 128.0)
                                            * (((2 * x + 1) as f64 * u as f64
                                                * std::f64::consts::PI)
                                                / 16.0)
                                                .cos()
                                            * (((2 * y + 1) as f64 * v as f64
                                                * std::f64::consts::PI)
                                                / 16.0)
                                                .cos();
                                    }
                                }
                                let c = |k: usize| if k == 0 { 1.0 / 2.0f64.sqrt() } else { 1.0 };
                                let coeff = 0.25 * c(u) * c(v) * acc;
                                let q = ((base[v * 8 + u] as f64 * s + 50.0) / 100.0)
                                    .floor()
                                    .clamp(1.0, 255.0);
                                let deq = (coeff / q).round() * q;
                                // scatter back via IDCT accumulation
                                for y in 0..8 {
                                    for x in 0..8 {
                                        rec[(by + y) * pw + bx + x] += 0.25
                                            * c(u)
                                            * c(v)
                                            * deq
                                            * (((2 * x + 1) as f64 * u as f64
                                                * std::f64::consts::PI)
                                                / 16.0)
                                                .cos()
                                            * (((2 * y + 1) as f64 * v as f64
                                                * std::f64::consts::PI)
                                                / 16.0)
                                                .cos();
                                    }
                                }
                            }
                        }
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        recon[pi][y * w + x] = rec[y * pw + x] + 128.0;
                    }
                }
            }
            let mut out = Tensor::zeros(vec![3, h, w]);
            for i in 0..n {
                let y = recon[0][i];
                let u = recon[1][i] - 128.0;
                let v = recon[2][i] - 128.0;
                out.data_mut()[i] = ((y + 1.402 * v) / 255.0).clamp(0.0, 1.0) as f32;
                out.data_mut()[n + i] =
                    ((y - 0.344136 * u - 0.714136 * v) / 255.0).clamp(0.0, 1.0) as f32;
                out.data_mut()[2 * n + i] = ((y + 1.772 * u) / 255.0).clamp(0.0, 1.0) as f32;
            }
            out
        }

        let img = random_image(3, 12, 12, 10);
        for &q in &[30u32, 75, 100] {
            let ours = jpeg_roundtrip(&img, q).unwrap();
            let theirs = reference(&img, q);
            for (a, b) in ours.data().iter().zip(theirs.data()) {
                assert!((a - b).abs() < 1e-4, "q={q}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn jpeg_rejects_out_of_range_quality() {
        let img = Tensor::full(vec![3, 8, 8], 0.5);
        assert!(jpeg_roundtrip(&img, 0).is_err());
        assert!(jpeg_roundtrip(&img, 101).is_err());
    }

    #[test]
    fn degrade_all_inactive_scale1_is_identity() {
        let img = random_image(3, 8, 8, 11);
        let spec = DegradationSpec {
            blur: None,
            scale: 1,
            noise: None,
            jpeg: None,
            mode: DegradationMode::Test,
        };
        let mut rng = derive_stream(0, "degrade");
        assert_eq!(degrade(&img, &spec, &mut rng).unwrap(), img);
    }

    #[test]
    fn degrade_clean_equals_downsample() {
        let img = random_image(3, 16, 16, 12);
        let spec = DegradationSpec {
            blur: None,
            scale: 4,
            noise: None,
            jpeg: None,
            mode: DegradationMode::Test,
        };
        let mut rng = derive_stream(0, "degrade-clean");
        let out = degrade(&img, &spec, &mut rng).unwrap();
        assert_eq!(out, downsample_bicubic(&img, 4).unwrap());
    }

    #[test]
    fn degrade_matches_manual_stage_composition() {
        let img = random_image(3, 16, 16, 13);
        let spec = DegradationSpec {
            blur: Some(Param::Fixed(2.0)),
            scale: 2,
            noise: Some(Param::Fixed(20.0 / 255.0)),
            jpeg: Some(IntParam::Fixed(50)),
            mode: DegradationMode::Test,
        };
        let mut rng = derive_stream(99, "compose");
        let out = degrade(&img, &spec, &mut rng).unwrap();

        let mut rng2 = derive_stream(99, "compose");
        let blurred = apply_blur(&img, &gaussian_kernel(2.0).unwrap()).unwrap();
        let down = downsample_bicubic(&blurred, 2).unwrap();
        let noised = add_gaussian_noise(&down, 20.0 / 255.0, &mut rng2).unwrap();
        let expected = jpeg_roundtrip(&noised, 50).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn degrade_output_shape_and_range() {
        let img = random_image(3, 16, 16, 14);
        let ranges = TrainRanges::default();
        for ty in DegradationType::ALL {
            let spec = DegradationSpec::for_type(ty, 2, &ranges);
            let mut rng = derive_stream(7, "range-check");
            let out = degrade(&img, &spec, &mut rng).unwrap();
            assert_eq!(out.shape(), &[3, 8, 8]);
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn test_variants_are_the_power_set() {
        let specs = test_variant_specs(2, &TestParams::default());
        assert_eq!(specs.len(), 8);
        let mut seen = std::collections::HashSet::new();
        for (name, spec) in &specs {
            assert!(seen.insert((spec.blur.is_some(), spec.noise.is_some(), spec.jpeg.is_some())));
            assert_eq!(spec.mode, DegradationMode::Test);
            assert_eq!(spec.scale, 2);
            assert!(VARIANT_NAMES.contains(&name.as_str()));
        }
    }

    #[test]
    fn test_mode_rejects_ranged_params() {
        let img = random_image(3, 8, 8, 15);
        let spec = DegradationSpec {
            blur: Some(Param::Range { lo: 0.5, hi: 2.0 }),
            scale: 2,
            noise: None,
            jpeg: None,
            mode: DegradationMode::Test,
        };
        let mut rng = derive_stream(0, "bad-test-spec");
        assert!(degrade(&img, &spec, &mut rng).is_err());
    }
}
