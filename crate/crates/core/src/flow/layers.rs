//! Invertible layers and their hand-derived reverse-mode gradients.
//!
//! Every same-shape layer maps `x -> y` and reports `log|det dy/dx|`. The
//! `backward` methods receive `dL/dy` for the per-image loss
//! `L = 0.5 |z|^2 - sum(logdet)` and return `dL/dx`, accumulating parameter
//! gradients into the layer's own slots. The `- logdet` term of the loss is
//! folded in here, so callers never differentiate log-determinants.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{ImageTensor, Shape};

/// Raw affine-coupling log-scales are clamped to this symmetric range.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

/// Invertible 1x1 convolutions with `|det W|` at or below this are rejected.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    /// `y_b = x_b + t(x_a)`; volume preserving.
    Additive,
    /// `y_b = x_b * exp(s(x_a)) + t(x_a)`.
    Affine,
}

/// Per-channel affine normalization, `y = x * exp(log_scale) + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNorm {
    pub log_scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// False until data-dependent initialization has run.
    pub initialized: bool,
}

impl ActNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            log_scale: vec![0.0; channels],
            shift: vec![0.0; channels],
            initialized: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.log_scale.len()
    }

    pub fn forward(&self, x: &ImageTensor) -> (ImageTensor, f64) {
        let c = self.channels();
        let scale: Vec<f64> = self.log_scale.iter().map(|v| v.exp()).collect();
        let mut y = x.clone();
        for px in y.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = px[ch] * scale[ch] + self.shift[ch];
            }
        }
        let logdet = x.shape().pixels() as f64 * self.log_scale.iter().sum::<f64>();
        (y, logdet)
    }

    pub fn inverse(&self, y: &ImageTensor) -> (ImageTensor, f64) {
        let c = self.channels();
        let inv_scale: Vec<f64> = self.log_scale.iter().map(|v| (-v).exp()).collect();
        let mut x = y.clone();
        for px in x.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                px[ch] = (px[ch] - self.shift[ch]) * inv_scale[ch];
            }
        }
        let logdet = -(y.shape().pixels() as f64) * self.log_scale.iter().sum::<f64>();
        (x, logdet)
    }

    /// Sets scale and shift so this batch leaves the layer with zero mean and
    /// unit variance per channel.
    pub fn initialize_from(&mut self, batch: &[ImageTensor]) {
        let c = self.channels();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for x in batch {
            for px in x.data().chunks_exact(c) {
                for ch in 0..c {
                    sum[ch] += px[ch];
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c];
        for x in batch {
            for px in x.data().chunks_exact(c) {
                for ch in 0..c {
                    let d = px[ch] - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        for ch in 0..c {
            let var = (sq[ch] / count as f64).max(1e-12);
            self.log_scale[ch] = -0.5 * var.ln();
            self.shift[ch] = -mean[ch] * self.log_scale[ch].exp();
        }
        self.initialized = true;
    }

    /// Gradient slots: `[log_scale, shift]`.
    pub fn backward(&self, x: &ImageTensor, gy: &ImageTensor, grads: &mut [Vec<f64>]) -> ImageTensor {
        let c = self.channels();
        let scale: Vec<f64> = self.log_scale.iter().map(|v| v.exp()).collect();
        let mut gx = gy.clone();
        let (g_ls, rest) = grads.split_at_mut(1);
        let g_ls = &mut g_ls[0];
        let g_shift = &mut rest[0];
        for (gpx, xpx) in gx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
            for ch in 0..c {
                let g = gpx[ch];
                g_shift[ch] += g;
                g_ls[ch] += g * xpx[ch] * scale[ch];
                gpx[ch] = g * scale[ch];
            }
        }
        let pixels = x.shape().pixels() as f64;
        for g in g_ls.iter_mut() {
            *g -= pixels;
        }
        gx
    }
}

/// Invertible 1x1 convolution with an LU-parameterized weight
/// `W = P * L * (U + diag(sign * exp(log_s)))`.
///
/// `P` and `sign` are fixed at construction. `lower` and `upper` are stored
/// as full `C x C` row-major buffers of which only the strictly lower
/// (respectively strictly upper) triangle is used.
#[derive(Debug, Clone, PartialEq)]
pub struct InvConv {
    /// `(P A)` row `i` is row `perm[i]` of `A`.
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub log_s: Vec<f64>,
}

impl InvConv {
    pub fn identity(channels: usize) -> Self {
        Self {
            perm: (0..channels).collect(),
            sign: vec![1.0; channels],
            lower: vec![0.0; channels * channels],
            upper: vec![0.0; channels * channels],
            log_s: vec![0.0; channels],
        }
    }

    /// A uniformly random rotation, LU-factored with partial pivoting.
    pub fn random_rotation<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let gauss = DMatrix::from_fn(c, c, |_, _| standard_normal(rng));
        let q = gauss.qr().q();
        let (p, l, u) = q.lu().unpack();
        // nalgebra: p * q = l * u, so q = p^-1 * l * u.
        let mut pinv = DMatrix::<f64>::identity(c, c);
        p.inv_permute_rows(&mut pinv);
        let perm: Vec<usize> = (0..c)
            .map(|i| (0..c).find(|&j| pinv[(i, j)] == 1.0).expect("permutation row"))
            .collect();
        let mut out = Self::identity(c);
        out.perm = perm;
        for i in 0..c {
            for j in 0..c {
                if j < i {
                    out.lower[i * c + j] = l[(i, j)];
                } else if j > i {
                    out.upper[i * c + j] = u[(i, j)];
                }
            }
            let d = u[(i, i)];
            out.sign[i] = if d < 0.0 { -1.0 } else { 1.0 };
            out.log_s[i] = d.abs().ln();
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.log_s.len()
    }

    /// `P * L` as a row-major buffer.
    fn permuted_lower(&self) -> Vec<f64> {
        let c = self.channels();
        let mut a = vec![0.0; c * c];
        for i in 0..c {
            let r = self.perm[i];
            for j in 0..c {
                a[i * c + j] = if j < r {
                    self.lower[r * c + j]
                } else if j == r {
                    1.0
                } else {
                    0.0
                };
            }
        }
        a
    }

    fn upper_with_diag(&self) -> Vec<f64> {
        let c = self.channels();
        let mut m = vec![0.0; c * c];
        for i in 0..c {
            m[i * c + i] = self.sign[i] * self.log_s[i].exp();
            for j in i + 1..c {
                m[i * c + j] = self.upper[i * c + j];
            }
        }
        m
    }

    pub fn weight(&self) -> Vec<f64> {
        matmul(&self.permuted_lower(), &self.upper_with_diag(), self.channels())
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_s.iter().sum()
    }

    pub fn is_invertible(&self) -> bool {
        self.log_abs_det().exp() > MIN_ABS_DET && self.log_abs_det().is_finite()
    }

    pub fn forward(&self, x: &ImageTensor) -> (ImageTensor, f64) {
        let w = self.weight();
        let y = apply_channel_matrix(x, &w);
        (y, x.shape().pixels() as f64 * self.log_abs_det())
    }

    /// `None` when the weight is numerically singular.
    pub fn inverse(&self, y: &ImageTensor) -> Option<(ImageTensor, f64)> {
        let c = self.channels();
        let w = DMatrix::from_row_slice(c, c, &self.weight());
        let inv = w.try_inverse()?;
        let inv: Vec<f64> = (0..c * c).map(|k| inv[(k / c, k % c)]).collect();
        let x = apply_channel_matrix(y, &inv);
        Some((x, -(y.shape().pixels() as f64) * self.log_abs_det()))
    }

    /// Gradient slots: `[lower, upper, log_s]`.
    pub fn backward(&self, x: &ImageTensor, gy: &ImageTensor, grads: &mut [Vec<f64>]) -> ImageTensor {
        let c = self.channels();
        let a = self.permuted_lower();
        let m = self.upper_with_diag();
        let w = matmul(&a, &m, c);
        let mut gx = ImageTensor::zeros(x.shape());
        let mut gw = vec![0.0; c * c];
        for ((gxp, gyp), xp) in gx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(gy.data().chunks_exact(c))
            .zip(x.data().chunks_exact(c))
        {
            for i in 0..c {
                let g = gyp[i];
                let wrow = &w[i * c..(i + 1) * c];
                let gwrow = &mut gw[i * c..(i + 1) * c];
                for j in 0..c {
                    gxp[j] += wrow[j] * g;
                    gwrow[j] += g * xp[j];
                }
            }
        }
        // W = A M: dA = dW M^T, dM = A^T dW.
        let ga = matmul(&gw, &transpose(&m, c), c);
        let gm = matmul(&transpose(&a, c), &gw, c);
        let pixels = x.shape().pixels() as f64;
        let (g_lower, rest) = grads.split_at_mut(1);
        let (g_upper, g_log_s) = rest.split_at_mut(1);
        for i in 0..c {
            let r = self.perm[i];
            for j in 0..r {
                g_lower[0][r * c + j] += ga[i * c + j];
            }
        }
        for i in 0..c {
            for j in i + 1..c {
                g_upper[0][i * c + j] += gm[i * c + j];
            }
            g_log_s[0][i] += gm[i * c + i] * self.sign[i] * self.log_s[i].exp() - pixels;
        }
        gx
    }
}

/// Two-convolution conditioner: 3x3 (zero padded) then tanh then 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingNet {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    /// `[(tap * in + ci) * hidden + k]`, `tap = dr * 3 + dc`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[k * out + o]`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl CouplingNet {
    pub fn zeros(in_channels: usize, hidden: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            hidden,
            out_channels,
            w1: vec![0.0; 9 * in_channels * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * out_channels],
            b2: vec![0.0; out_channels],
        }
    }

    fn hidden_activations(&self, xa: &ImageTensor) -> Vec<f64> {
        let s = xa.shape();
        let (h, w, cin, hid) = (s.height, s.width, self.in_channels, self.hidden);
        let mut act = vec![0.0; h * w * hid];
        let x = xa.data();
        for r in 0..h {
            for c in 0..w {
                let out = &mut act[(r * w + c) * hid..(r * w + c + 1) * hid];
                out.copy_from_slice(&self.b1);
                for dr in 0..3 {
                    let rr = r as isize + dr as isize - 1;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in 0..3 {
                        let cc = c as isize + dc as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let tap = dr * 3 + dc;
                        let base = (rr as usize * w + cc as usize) * cin;
                        for ci in 0..cin {
                            let xv = x[base + ci];
                            let wrow = &self.w1[(tap * cin + ci) * hid..(tap * cin + ci + 1) * hid];
                            for (o, wv) in out.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                for o in out.iter_mut() {
                    *o = o.tanh();
                }
            }
        }
        act
    }

    fn output_from_hidden(&self, act: &[f64], shape: Shape) -> Vec<f64> {
        let (hid, cout) = (self.hidden, self.out_channels);
        let mut out = vec![0.0; shape.pixels() * cout];
        for (o_px, a_px) in out.chunks_exact_mut(cout).zip(act.chunks_exact(hid)) {
            o_px.copy_from_slice(&self.b2);
            for (k, &a) in a_px.iter().enumerate() {
                let wrow = &self.w2[k * cout..(k + 1) * cout];
                for (o, wv) in o_px.iter_mut().zip(wrow) {
                    *o += a * wv;
                }
            }
        }
        out
    }

    /// Output in `HWC` layout with `out_channels` channels.
    pub fn apply(&self, xa: &ImageTensor) -> Vec<f64> {
        let act = self.hidden_activations(xa);
        self.output_from_hidden(&act, xa.shape())
    }

    /// Returns `dL/dxa`. Gradient slots: `[w1, b1, w2, b2]`.
    fn backward(&self, xa: &ImageTensor, g_out: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let s = xa.shape();
        let (h, w, cin, hid, cout) = (s.height, s.width, self.in_channels, self.hidden, self.out_channels);
        let act = self.hidden_activations(xa);
        let [g_w1, g_b1, g_w2, g_b2] = grads else {
            unreachable!("coupling net has four parameter tensors")
        };
        let mut g_pre = vec![0.0; h * w * hid];
        for ((gp, a_px), go_px) in g_pre
            .chunks_exact_mut(hid)
            .zip(act.chunks_exact(hid))
            .zip(g_out.chunks_exact(cout))
        {
            for (o, &g) in go_px.iter().enumerate() {
                g_b2[o] += g;
            }
            for k in 0..hid {
                let wrow = &self.w2[k * cout..(k + 1) * cout];
                let gwrow = &mut g_w2[k * cout..(k + 1) * cout];
                let mut acc = 0.0;
                for o in 0..cout {
                    acc += wrow[o] * go_px[o];
                    gwrow[o] += a_px[k] * go_px[o];
                }
                gp[k] = acc * (1.0 - a_px[k] * a_px[k]);
            }
        }
        let x = xa.data();
        let mut g_x = vec![0.0; h * w * cin];
        for r in 0..h {
            for c in 0..w {
                let gp = &g_pre[(r * w + c) * hid..(r * w + c + 1) * hid];
                for (b, g) in g_b1.iter_mut().zip(gp) {
                    *b += g;
                }
                for dr in 0..3 {
                    let rr = r as isize + dr as isize - 1;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in 0..3 {
                        let cc = c as isize + dc as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let tap = dr * 3 + dc;
                        let base = (rr as usize * w + cc as usize) * cin;
                        for ci in 0..cin {
                            let xv = x[base + ci];
                            let off = (tap * cin + ci) * hid;
                            let wrow = &self.w1[off..off + hid];
                            let gwrow = &mut g_w1[off..off + hid];
                            let mut acc = 0.0;
                            for k in 0..hid {
                                acc += wrow[k] * gp[k];
                                gwrow[k] += xv * gp[k];
                            }
                            g_x[base + ci] += acc;
                        }
                    }
                }
            }
        }
        g_x
    }
}

/// Coupling layer: the first `C/2` channels condition the remaining ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub kind: CouplingKind,
    pub net: CouplingNet,
}

impl Coupling {
    pub fn identity(kind: CouplingKind, channels: usize, hidden: usize) -> Self {
        let (ca, cb) = split_sizes(channels);
        let out = match kind {
            CouplingKind::Additive => cb,
            CouplingKind::Affine => 2 * cb,
        };
        Self {
            kind,
            net: CouplingNet::zeros(ca, hidden, out),
        }
    }

    pub fn forward(&self, x: &ImageTensor) -> (ImageTensor, f64) {
        self.transform(x, true)
    }

    pub fn inverse(&self, y: &ImageTensor) -> (ImageTensor, f64) {
        self.transform(y, false)
    }

    fn transform(&self, input: &ImageTensor, forward: bool) -> (ImageTensor, f64) {
        let shape = input.shape();
        let c = shape.channels;
        let (ca, cb) = split_sizes(c);
        let xa = take_channels(input, 0, ca);
        let h = self.net.apply(&xa);
        let cout = self.net.out_channels;
        let mut out = input.clone();
        let mut logdet = 0.0;
        for (px, hp) in out.data_mut().chunks_exact_mut(c).zip(h.chunks_exact(cout)) {
            match self.kind {
                CouplingKind::Additive => {
                    for j in 0..cb {
                        if forward {
                            px[ca + j] += hp[j];
                        } else {
                            px[ca + j] -= hp[j];
                        }
                    }
                }
                CouplingKind::Affine => {
                    for j in 0..cb {
                        let s = clamp_log_scale(hp[j]);
                        let t = hp[cb + j];
                        if forward {
                            px[ca + j] = px[ca + j] * s.exp() + t;
                        } else {
                            px[ca + j] = (px[ca + j] - t) * (-s).exp();
                        }
                        logdet += s;
                    }
                }
            }
        }
        (out, if forward { logdet } else { -logdet })
    }

    /// Gradient slots: `[w1, b1, w2, b2]` of the conditioner.
    pub fn backward(&self, x: &ImageTensor, gy: &ImageTensor, grads: &mut [Vec<f64>]) -> ImageTensor {
        let shape = x.shape();
        let c = shape.channels;
        let (ca, cb) = split_sizes(c);
        let xa = take_channels(x, 0, ca);
        let h = self.net.apply(&xa);
        let cout = self.net.out_channels;
        let mut gx = gy.clone();
        let mut g_h = vec![0.0; shape.pixels() * cout];
        for (((gxp, xp), hp), ghp) in gx
            .data_mut()
            .chunks_exact_mut(c)
            .zip(x.data().chunks_exact(c))
            .zip(h.chunks_exact(cout))
            .zip(g_h.chunks_exact_mut(cout))
        {
            match self.kind {
                CouplingKind::Additive => {
                    for j in 0..cb {
                        ghp[j] = gxp[ca + j];
                    }
                }
                CouplingKind::Affine => {
                    for j in 0..cb {
                        let raw = hp[j];
                        let s = clamp_log_scale(raw);
                        let e = s.exp();
                        let g = gxp[ca + j];
                        ghp[cb + j] = g;
                        let g_s = g * xp[ca + j] * e - 1.0;
                        ghp[j] = if raw.abs() < LOG_SCALE_CLAMP { g_s } else { 0.0 };
                        gxp[ca + j] = g * e;
                    }
                }
            }
        }
        let g_xa = self.net.backward(&xa, &g_h, grads);
        for (gxp, gap) in gx.data_mut().chunks_exact_mut(c).zip(g_xa.chunks_exact(ca)) {
            for j in 0..ca {
                gxp[j] += gap[j];
            }
        }
        gx
    }
}

#[inline]
fn clamp_log_scale(raw: f64) -> f64 {
    raw.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
}

/// Conditioning and transformed channel counts for a coupling on `c` channels.
pub fn split_sizes(c: usize) -> (usize, usize) {
    (c / 2, c - c / 2)
}

/// Reverses channel order at every pixel.
pub fn reverse_channels(x: &ImageTensor) -> ImageTensor {
    let c = x.shape().channels;
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        px.reverse();
    }
    y
}

/// Channels `[from, from + count)` as a new tensor.
pub fn take_channels(x: &ImageTensor, from: usize, count: usize) -> ImageTensor {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.pixels() * count);
    for px in x.data().chunks_exact(s.channels) {
        data.extend_from_slice(&px[from..from + count]);
    }
    ImageTensor::new(Shape::new(s.height, s.width, count), data)
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(a: &ImageTensor, b: &ImageTensor) -> ImageTensor {
    let (sa, sb) = (a.shape(), b.shape());
    debug_assert_eq!((sa.height, sa.width), (sb.height, sb.width));
    let mut data = Vec::with_capacity(sa.volume() + sb.volume());
    for (pa, pb) in a
        .data()
        .chunks_exact(sa.channels)
        .zip(b.data().chunks_exact(sb.channels))
    {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    ImageTensor::new(Shape::new(sa.height, sa.width, sa.channels + sb.channels), data)
}

/// `(H, W, C) -> (H/2, W/2, 4C)`. Output channel `(dr * 2 + dc) * C + ch`
/// holds input pixel `(2r + dr, 2c + dc)` channel `ch`.
///
/// Callers are responsible for even `H` and `W`.
pub(crate) fn squeeze_unchecked(x: &ImageTensor) -> ImageTensor {
    let s = x.shape();
    let out_shape = Shape::new(s.height / 2, s.width / 2, 4 * s.channels);
    let mut y = ImageTensor::zeros(out_shape);
    for r in 0..out_shape.height {
        for c in 0..out_shape.width {
            for dr in 0..2 {
                for dc in 0..2 {
                    for ch in 0..s.channels {
                        let v = x.get(2 * r + dr, 2 * c + dc, ch);
                        y.set(r, c, (dr * 2 + dc) * s.channels + ch, v);
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn unsqueeze_unchecked(y: &ImageTensor) -> ImageTensor {
    let s = y.shape();
    let cin = s.channels / 4;
    let out_shape = Shape::new(s.height * 2, s.width * 2, cin);
    let mut x = ImageTensor::zeros(out_shape);
    for r in 0..s.height {
        for c in 0..s.width {
            for dr in 0..2 {
                for dc in 0..2 {
                    for ch in 0..cin {
                        let v = y.get(r, c, (dr * 2 + dc) * cin + ch);
                        x.set(2 * r + dr, 2 * c + dc, ch, v);
                    }
                }
            }
        }
    }
    x
}

fn apply_channel_matrix(x: &ImageTensor, m: &[f64]) -> ImageTensor {
    let c = x.shape().channels;
    let mut y = ImageTensor::zeros(x.shape());
    for (yp, xp) in y.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for i in 0..c {
            let row = &m[i * c..(i + 1) * c];
            yp[i] = row.iter().zip(xp).map(|(a, b)| a * b).sum();
        }
    }
    y
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
