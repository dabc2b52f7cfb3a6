//! PSNR metric and cross-degradation evaluation: one matrix cell per
//! (degradation combination, dataset), mean over images, plus the
//! relative-to-baseline and FL-vs-centralized difference tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{decode_ppm, load_ppm, sha256_hex, Manifest};
use crate::error::{Error, Result};
use crate::model::forward;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Finite stand-in for infinity when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsnrMode {
    Rgb,
    Y,
}

impl Default for PsnrMode {
    fn default() -> Self {
        PsnrMode::Rgb
    }
}

fn mse_of(a: &[f32], b: &[f32]) -> f64 {
    let mut sum = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let xc = x.clamp(0.0, 1.0) as f64;
        let yc = y.clamp(0.0, 1.0) as f64;
        sum += (xc - yc) * (xc - yc);
    }
    sum / a.len() as f64
}

/// 10*log10(1/MSE) over all channels and pixels at unit range, values
/// clamped to [0,1] first; capped at +100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid_argument(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = mse_of(a.data(), b.data());
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn luma(img: &Tensor) -> Vec<f32> {
    let n = img.len() / 3;
    (0..n)
        .map(|i| {
            let r = img.data()[i].clamp(0.0, 1.0);
            let g = img.data()[n + i].clamp(0.0, 1.0);
            let b = img.data()[2 * n + i].clamp(0.0, 1.0);
            0.299 * r + 0.587 * g + 0.114 * b
        })
        .collect()
}

/// PSNR on the BT.601 luma channel, for comparability with SR
/// literature that reports Y-channel numbers.
pub fn psnr_with_mode(a: &Tensor, b: &Tensor, mode: PsnrMode) -> Result<f64> {
    match mode {
        PsnrMode::Rgb => psnr(a, b),
        PsnrMode::Y => {
            if a.shape() != b.shape() {
                return Err(Error::invalid_argument("psnr: shape mismatch"));
            }
            let (ya, yb) = (luma(a), luma(b));
            let mse = mse_of(&ya, &yb);
            if mse == 0.0 {
                return Ok(PSNR_CAP_DB);
            }
            Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// values[row][col], mean PSNR in dB
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub baseline: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImagePsnr {
    pub combo: String,
    pub image_id: String,
    pub psnr_db: f64,
}

/// Runs the model on every pre-generated LR variant at full image
/// resolution (no patching), clamps, and averages PSNR against the HR
/// references per variant.
pub fn evaluate(
    weights: &ModelWeights,
    manifest: &Manifest,
    base_dir: &Path,
    dataset_name: &str,
    mode: PsnrMode,
) -> Result<(EvaluationMatrix, Vec<PerImagePsnr>)> {
    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut per_image = Vec::new();
    for variant in &manifest.variants {
        let mut sum = 0.0f64;
        for file in &variant.files {
            let lr_path = base_dir.join(&file.path);
            let bytes = std::fs::read(&lr_path).map_err(|e| Error::io(&lr_path, e))?;
            let actual = sha256_hex(&bytes);
            if actual != file.sha256 {
                return Err(Error::CorruptedDataset {
                    path: lr_path,
                    expected: file.sha256.clone(),
                    actual,
                });
            }
            let lr = decode_ppm(&bytes, &lr_path)?;
            let shape = lr.shape().to_vec();
            let batch = Tensor::new(
                vec![1, shape[0], shape[1], shape[2]],
                lr.data().to_vec(),
            )?;
            let sr = forward(weights, &batch)?;
            let out_shape = sr.shape().to_vec();
            let sr_img = Tensor::new(
                vec![out_shape[1], out_shape[2], out_shape[3]],
                sr.into_data(),
            )?
            .clamp01();
            let hr = load_ppm(&base_dir.join("hr").join(format!("{}.ppm", file.id)))?;
            let db = psnr_with_mode(&sr_img, &hr.hr, mode)?;
            per_image.push(PerImagePsnr {
                combo: variant.name.clone(),
                image_id: file.id.clone(),
                psnr_db: db,
            });
            sum += db;
        }
        rows.push(variant.name.clone());
        values.push(vec![sum / variant.files.len() as f64]);
    }
    Ok((
        EvaluationMatrix {
            rows,
            cols: vec![dataset_name.to_string()],
            values,
        },
        per_image,
    ))
}

fn check_labels(a: &EvaluationMatrix, b: &EvaluationMatrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::invalid_argument(
            "matrix labels do not match between run and baseline",
        ));
    }
    Ok(())
}

/// Elementwise run - baseline, in dB.
pub fn relative_to_baseline(
    run: &EvaluationMatrix,
    baseline: &EvaluationMatrix,
    baseline_id: &str,
) -> Result<RelativeMatrix> {
    check_labels(run, baseline)?;
    let values = run
        .values
        .iter()
        .zip(&baseline.values)
        .map(|(r, b)| r.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(RelativeMatrix {
        rows: run.rows.clone(),
        cols: run.cols.clone(),
        values,
        baseline: baseline_id.to_string(),
    })
}

/// FL-minus-centralized signed differences.
pub fn diff_table(fl: &EvaluationMatrix, central: &EvaluationMatrix) -> Result<RelativeMatrix> {
    relative_to_baseline(fl, central, "centralized")
}

/// Text rendering of the comparison: per dataset, the centralized row,
/// the FL row, and the signed difference row.
pub fn render_diff_table(
    fl: &EvaluationMatrix,
    central: &EvaluationMatrix,
) -> Result<String> {
    let diff = diff_table(fl, central)?;
    let mut out = String::new();
    out.push_str(&format!("{:<12}", "combo"));
    for col in &fl.cols {
        out.push_str(&format!(" {:>10} {:>10} {:>10}", format!("{col}/1c"), format!("{col}/fl"), "diff"));
    }
    out.push('\n');
    for (r, row) in fl.rows.iter().enumerate() {
        out.push_str(&format!("{row:<12}"));
        for c in 0..fl.cols.len() {
            out.push_str(&format!(
                " {:>10.2} {:>10.2} {:>10}",
                central.values[r][c],
                fl.values[r][c],
                format!("{:+.2}", diff.values[r][c])
            ));
        }
        out.push('\n');
    }
    Ok(out)
}

// --- CSV serialization -------------------------------------------------

/// matrix.csv: "combo,dataset,psnr_db", row-major.
pub fn matrix_to_csv(matrix: &EvaluationMatrix) -> String {
    let mut out = String::from("combo,dataset,psnr_db\n");
    for (r, row) in matrix.rows.iter().enumerate() {
        for (c, col) in matrix.cols.iter().enumerate() {
            out.push_str(&format!("{row},{col},{:.6}\n", matrix.values[r][c]));
        }
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<EvaluationMatrix> {
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "combo,dataset,psnr_db" {
                return Err(Error::invalid_argument(format!(
                    "matrix csv: unexpected header '{line}'"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::invalid_argument(format!(
                "matrix csv line {}: expected 3 fields",
                lineno + 1
            )));
        }
        let r = match rows.iter().position(|x| x == parts[0]) {
            Some(i) => i,
            None => {
                rows.push(parts[0].to_string());
                rows.len() - 1
            }
        };
        let c = match cols.iter().position(|x| x == parts[1]) {
            Some(i) => i,
            None => {
                cols.push(parts[1].to_string());
                cols.len() - 1
            }
        };
        let v: f64 = parts[2]
            .parse()
            .map_err(|_| Error::invalid_argument(format!("matrix csv line {}: bad value", lineno + 1)))?;
        cells.push((r, c, v));
    }
    let mut values = vec![vec![f64::NAN; cols.len()]; rows.len()];
    for (r, c, v) in cells {
        values[r][c] = v;
    }
    Ok(EvaluationMatrix { rows, cols, values })
}

/// per_image.csv: "combo,image_id,psnr_db".
pub fn per_image_to_csv(records: &[PerImagePsnr]) -> String {
    let mut out = String::from("combo,image_id,psnr_db\n");
    for r in records {
        out.push_str(&format!("{},{},{:.6}\n", r.combo, r.image_id, r.psnr_db));
    }
    out
}

/// heatmap.csv: wide layout, one row per combo, one column per dataset.
pub fn relative_to_csv(matrix: &RelativeMatrix) -> String {
    let mut out = String::from("combo");
    for col in &matrix.cols {
        out.push_str(&format!(",{col}"));
    }
    out.push('\n');
    for (r, row) in matrix.rows.iter().enumerate() {
        out.push_str(row);
        for c in 0..matrix.cols.len() {
            out.push_str(&format!(",{:.6}", matrix.values[r][c]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = derive_stream(seed, "eval-test");
        let data = (0..3 * h * w).map(|_| rng.next_f64() as f32).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = random_image(4, 4, 0);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn zeros_vs_ones_is_zero_db() {
        let a = Tensor::zeros(vec![3, 4, 4]);
        let b = Tensor::full(vec![3, 4, 4], 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_closed_form() {
        // 1/255 offset: 20*log10(255) = 48.1308 dB
        let a = Tensor::full(vec![3, 8, 8], 0.5);
        let b = Tensor::full(vec![3, 8, 8], 0.5 + 1.0 / 255.0);
        let expected = 20.0 * 255.0f64.log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 0.01);
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = random_image(5, 5, 1);
        let b = random_image(5, 5, 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_clamps_before_comparing() {
        let a = Tensor::full(vec![3, 2, 2], 1.5);
        let b = Tensor::full(vec![3, 2, 2], 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 100.0);
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let base = random_image(16, 16, 3);
        let mut prev = f64::INFINITY;
        for (i, &sigma) in [0.01f64, 0.05, 0.15].iter().enumerate() {
            let mut rng = derive_stream(4 + i as u64, "psnr-noise");
            let noisy = crate::degrade::add_gaussian_noise(&base, sigma, &mut rng).unwrap();
            let db = psnr(&base, &noisy).unwrap();
            assert!(db < prev, "sigma {sigma}: {db} !< {prev}");
            prev = db;
        }
    }

    #[test]
    fn psnr_shape_mismatch_rejected() {
        let a = Tensor::zeros(vec![3, 2, 2]);
        let b = Tensor::zeros(vec![3, 4, 4]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn y_mode_equals_rgb_for_gray_images() {
        let a = Tensor::full(vec![3, 4, 4], 0.3);
        let b = Tensor::full(vec![3, 4, 4], 0.4);
        let rgb = psnr_with_mode(&a, &b, PsnrMode::Rgb).unwrap();
        let y = psnr_with_mode(&a, &b, PsnrMode::Y).unwrap();
        assert!((rgb - y).abs() < 1e-6);
    }

    fn sample_matrix(offset: f64) -> EvaluationMatrix {
        EvaluationMatrix {
            rows: vec!["clean".into(), "b".into()],
            cols: vec!["set5".into()],
            values: vec![vec![30.0 + offset], vec![25.0 + offset]],
        }
    }

    #[test]
    fn relative_of_self_is_zero() {
        let m = sample_matrix(0.0);
        let rel = relative_to_baseline(&m, &m, "uniform").unwrap();
        assert!(rel.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(rel.baseline, "uniform");
    }

    #[test]
    fn relative_constant_offset() {
        let run = sample_matrix(0.5);
        let base = sample_matrix(0.0);
        let rel = relative_to_baseline(&run, &base, "uniform").unwrap();
        assert!(rel.values.iter().flatten().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn relative_rejects_label_mismatch() {
        let run = sample_matrix(0.0);
        let mut base = sample_matrix(0.0);
        base.cols = vec!["set14".into()];
        assert!(relative_to_baseline(&run, &base, "x").is_err());
    }

    #[test]
    fn diff_table_renders_paper_difference() {
        // published Set14/clean values: 25.97 (1 client), 25.49 (16 clients)
        let central = EvaluationMatrix {
            rows: vec!["clean".into()],
            cols: vec!["Set14".into()],
            values: vec![vec![25.97]],
        };
        let fl = EvaluationMatrix {
            rows: vec!["clean".into()],
            cols: vec!["Set14".into()],
            values: vec![vec![25.49]],
        };
        let rendered = render_diff_table(&fl, &central).unwrap();
        assert!(rendered.contains("-0.48"), "{rendered}");
    }

    #[test]
    fn diff_table_matches_elementwise_subtraction() {
        let mut rng = derive_stream(5, "diff-oracle");
        let mk = |rng: &mut crate::rng::RngStream| EvaluationMatrix {
            rows: vec!["clean".into(), "b".into(), "n".into()],
            cols: vec!["d1".into(), "d2".into()],
            values: (0..3)
                .map(|_| (0..2).map(|_| rng.uniform(15.0, 35.0)).collect())
                .collect(),
        };
        let fl = mk(&mut rng);
        let central = mk(&mut rng);
        let diff = diff_table(&fl, &central).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(diff.values[r][c], fl.values[r][c] - central.values[r][c]);
            }
        }
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let m = EvaluationMatrix {
            rows: vec!["clean".into(), "b+n+j".into()],
            cols: vec!["synthetic".into()],
            values: vec![vec![31.25], vec![19.5]],
        };
        let csv = matrix_to_csv(&m);
        let back = matrix_from_csv(&csv).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.cols, m.cols);
        for (a, b) in back.values.iter().flatten().zip(m.values.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
