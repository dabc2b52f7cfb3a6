//! Dense f32 tensors and the handful of forward/backward kernels the SR
//! model and degradation engine need. Everything is value-in/value-out;
//! no shared mutable state.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid_argument(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|x| x.clamp(0.0, 1.0))
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::invalid_argument(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// 2-D cross-correlation (no kernel flip), stride 1, "same" zero
/// padding. Input (Cin,H,W), kernel (Cout,Cin,kh,kw), bias (Cout).
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [cin, h, w] = dims3(input, "conv input")?;
    let [cout, kcin, kh, kw] = dims4(kernel, "conv kernel")?;
    if kcin != cin {
        return Err(Error::invalid_argument(format!(
            "conv: input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::invalid_argument(format!(
            "conv: bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid_argument(format!(
            "conv: kernel dims must be odd, got {kh}x{kw}"
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Tensor::zeros(vec![cout, h, w]);
    for o in 0..cout {
        let plane = &mut out.data[o * h * w..(o + 1) * h * w];
        plane.fill(bias.data[o]);
        for c in 0..cin {
            let in_plane = &input.data[c * h * w..(c + 1) * h * w];
            let kbase = ((o * cin) + c) * kh * kw;
            for i in 0..kh {
                for j in 0..kw {
                    let kv = kernel.data[kbase + i * kw + j];
                    if kv == 0.0 {
                        continue;
                    }
                    let dy = i as isize - ph as isize;
                    let dx = j as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst_row = y * w;
                        for x in x0..x1 {
                            plane[dst_row + x] +=
                                kv * in_plane[src_row + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of `conv2d_forward` with respect to input, kernel and
/// bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [cin, h, w] = dims3(input, "conv input")?;
    let [cout, kcin, kh, kw] = dims4(kernel, "conv kernel")?;
    if kcin != cin {
        return Err(Error::invalid_argument(format!(
            "conv backward: input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if grad_out.shape() != [cout, h, w] {
        return Err(Error::invalid_argument(format!(
            "conv backward: grad_out shape {:?}, expected [{cout}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut grad_input = Tensor::zeros(vec![cin, h, w]);
    let mut grad_kernel = Tensor::zeros(vec![cout, cin, kh, kw]);
    let mut grad_bias = Tensor::zeros(vec![cout]);

    for o in 0..cout {
        let go_plane = &grad_out.data[o * h * w..(o + 1) * h * w];
        grad_bias.data[o] = go_plane.iter().map(|&g| g as f64).sum::<f64>() as f32;
        for c in 0..cin {
            let in_plane = &input.data[c * h * w..(c + 1) * h * w];
            let gi_plane = &mut grad_input.data[c * h * w..(c + 1) * h * w];
            let kbase = ((o * cin) + c) * kh * kw;
            for i in 0..kh {
                for j in 0..kw {
                    let dy = i as isize - ph as isize;
                    let dx = j as isize - pw as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    let kv = kernel.data[kbase + i * kw + j];
                    let mut gk = 0.0f64;
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let out_row = y * w;
                        for x in x0..x1 {
                            let g = go_plane[out_row + x];
                            let src = src_row + (x as isize + dx) as usize;
                            gk += (g * in_plane[src]) as f64;
                            gi_plane[src] += kv * g;
                        }
                    }
                    grad_kernel.data[kbase + i * kw + j] = gk as f32;
                }
            }
        }
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// PReLU over (C,H,W) with one slope per channel.
pub fn prelu_forward(input: &Tensor, slope: &Tensor) -> Result<Tensor> {
    let [c, h, w] = dims3(input, "prelu input")?;
    if slope.shape() != [c] {
        return Err(Error::invalid_argument(format!(
            "prelu: slope shape {:?}, expected [{c}]",
            slope.shape()
        )));
    }
    let mut out = input.clone();
    for ch in 0..c {
        let s = slope.data[ch];
        for v in &mut out.data[ch * h * w..(ch + 1) * h * w] {
            if *v <= 0.0 {
                *v *= s;
            }
        }
    }
    Ok(out)
}

/// Subgradient with derivative 1 at x>0, slope at x<=0.
pub fn prelu_backward(
    input: &Tensor,
    slope: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [c, h, w] = dims3(input, "prelu input")?;
    if slope.shape() != [c] {
        return Err(Error::invalid_argument("prelu backward: slope shape"));
    }
    check_same_shape(input, grad_out, "prelu backward")?;
    let mut grad_input = Tensor::zeros(vec![c, h, w]);
    let mut grad_slope = Tensor::zeros(vec![c]);
    for ch in 0..c {
        let s = slope.data[ch];
        let mut gs = 0.0f64;
        for idx in ch * h * w..(ch + 1) * h * w {
            let x = input.data[idx];
            let g = grad_out.data[idx];
            if x > 0.0 {
                grad_input.data[idx] = g;
            } else {
                grad_input.data[idx] = s * g;
                gs += (x * g) as f64;
            }
        }
        grad_slope.data[ch] = gs as f32;
    }
    Ok((grad_input, grad_slope))
}

/// Depth-to-space: (C*r^2, H, W) -> (C, r*H, r*W).
/// out[c,h,w] = in[c*r^2 + (h%r)*r + w%r, h/r, w/r].
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let [cin, h, w] = dims3(input, "pixel_shuffle input")?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::invalid_argument(format!(
            "pixel_shuffle: {cin} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for oc in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let ic = oc * r * r + (y % r) * r + (x % r);
                out.data[(oc * oh + y) * ow + x] = input.data[(ic * h + y / r) * w + x / r];
            }
        }
    }
    Ok(out)
}

/// Inverse scatter of `pixel_shuffle`; gradients flow back through the
/// same index permutation.
pub fn pixel_shuffle_backward(grad_out: &Tensor, r: usize, in_shape: &[usize]) -> Result<Tensor> {
    let [c, oh, ow] = dims3(grad_out, "pixel_shuffle grad_out")?;
    if in_shape.len() != 3 || in_shape[0] != c * r * r || in_shape[1] * r != oh || in_shape[2] * r != ow
    {
        return Err(Error::invalid_argument(format!(
            "pixel_shuffle backward: grad shape {:?} inconsistent with input shape {:?} at r={r}",
            grad_out.shape(),
            in_shape
        )));
    }
    let (h, w) = (in_shape[1], in_shape[2]);
    let mut grad_input = Tensor::zeros(in_shape.to_vec());
    for oc in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let ic = oc * r * r + (y % r) * r + (x % r);
                grad_input.data[(ic * h + y / r) * w + x / r] =
                    grad_out.data[(oc * oh + y) * ow + x];
            }
        }
    }
    Ok(grad_input)
}

/// Mean absolute error and its gradient wrt `pred`, with sign(0) = 0.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    check_same_shape(pred, target, "l1_loss")?;
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape.clone());
    for i in 0..pred.len() {
        let d = pred.data[i] - target.data[i];
        sum += d.abs() as f64;
        grad.data[i] = if d > 0.0 {
            (1.0 / n) as f32
        } else if d < 0.0 {
            (-1.0 / n) as f32
        } else {
            0.0
        };
    }
    Ok(((sum / n) as f32, grad))
}

/// Mean squared error and its gradient wrt `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
    check_same_shape(pred, target, "mse_loss")?;
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape.clone());
    for i in 0..pred.len() {
        let d = (pred.data[i] - target.data[i]) as f64;
        sum += d * d;
        grad.data[i] = (2.0 * d / n) as f32;
    }
    Ok(((sum / n) as f32, grad))
}

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(Error::invalid_argument(format!(
            "{what}: expected 3 dims, got {other:?}"
        ))),
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => Err(Error::invalid_argument(format!(
            "{what}: expected 4 dims, got {other:?}"
        ))),
    }
}
