//! Straight-line reference implementations shared by the integration tests.
//!
//! Everything works on flat `N×H×W×C` `f64` buffers with explicit loops and
//! no code from the library's kernels.
#![allow(dead_code)]

use dfca_core::nn::ParamStore;
use dfca_core::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Zeroes every tensor except batch-norm scales and running variances, which
/// become one.
pub fn zero_weights<T: Scalar>(store: &mut ParamStore<T>) {
    let ids: Vec<_> = store
        .iter()
        .map(|(id, e)| {
            let one = e.name.ends_with(".gamma") || e.name.ends_with(".running_var");
            (id, one, e.value.shape().to_vec())
        })
        .collect();
    for (id, gamma, shape) in ids {
        let t = if gamma { Tensor::ones(&shape) } else { Tensor::zeros(&shape) };
        store.set(id, t).unwrap();
    }
}

/// Replaces every tensor under `prefix` with uniform noise of the given scale.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.name.starts_with(prefix))
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in ids {
        let mut t: Tensor<T> = random_tensor(&shape, scale, rng);
        if name.ends_with("running_var") || name.ends_with(".gamma") {
            t = t.map(|v| T::one() + v.abs());
        }
        store.set(id, t).unwrap();
    }
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

pub struct Map {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Map { n, h, w, c, d: vec![0.0; n * h * w * c] }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        Map { n: s[0], h: s[1], w: s[2], c: s[3], d: to_f64(t) }
    }

    pub fn at(&self, b: usize, y: usize, x: usize, ch: usize) -> f64 {
        self.d[((b * self.h + y) * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, ch: usize, v: f64) {
        self.d[((b * self.h + y) * self.w + x) * self.c + ch] = v;
    }

    pub fn channels(&self, start: usize, width: usize) -> Map {
        let mut out = Map::new(self.n, self.h, self.w, width);
        for b in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    for ch in 0..width {
                        out.set(b, y, x, ch, self.at(b, y, x, start + ch));
                    }
                }
            }
        }
        out
    }

    pub fn zip(&self, other: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!(self.d.len(), other.d.len());
        Map {
            d: self.d.iter().zip(&other.d).map(|(a, b)| f(*a, *b)).collect(),
            ..*self
        }
    }

    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            d: self.d.iter().map(|a| f(*a)).collect(),
            ..*self
        }
    }

    pub fn concat(&self, other: &Map) -> Map {
        let mut out = Map::new(self.n, self.h, self.w, self.c + other.c);
        for b in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    for ch in 0..self.c {
                        out.set(b, y, x, ch, self.at(b, y, x, ch));
                    }
                    for ch in 0..other.c {
                        out.set(b, y, x, self.c + ch, other.at(b, y, x, ch));
                    }
                }
            }
        }
        out
    }
}

/// TensorFlow-style "same" geometry: `(out, pad_before)`.
pub fn same_geometry(extent: usize, k: usize, s: usize) -> (usize, usize) {
    let out = extent.div_ceil(s);
    let need = (out - 1) * s + k;
    (out, need.saturating_sub(extent) / 2)
}

/// Six nested loops over output and kernel positions.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &Map, kernel: &[f64], kh: usize, kw: usize, cout: usize, bias: &[f64], stride: (usize, usize), same: bool) -> Map {
    let (ho, pt) = if same { same_geometry(x.h, kh, stride.0) } else { ((x.h - kh) / stride.0 + 1, 0) };
    let (wo, pl) = if same { same_geometry(x.w, kw, stride.1) } else { ((x.w - kw) / stride.1 + 1, 0) };
    let mut out = Map::new(x.n, ho, wo, cout);
    for b in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bias.get(co).copied().unwrap_or(0.0);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride.0 + ky) as isize - pt as isize;
                            let ix = (ox * stride.1 + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                acc += x.at(b, iy as usize, ix as usize, ci) * kernel[((ky * kw + kx) * x.c + ci) * cout + co];
                            }
                        }
                    }
                    out.set(b, oy, ox, co, acc);
                }
            }
        }
    }
    out
}

/// Mean over each `p×p` window taken with stride `p`; a trailing partial window
/// averages only the cells it covers.
pub fn naive_avgpool_ceil(x: &Map, p: usize) -> Map {
    let (ho, wo) = (x.h.div_ceil(p), x.w.div_ceil(p));
    let mut out = Map::new(x.n, ho, wo, x.c);
    for b in 0..x.n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..x.c {
                    let (mut s, mut cnt) = (0.0, 0.0);
                    for y in oy * p..((oy + 1) * p).min(x.h) {
                        for xx in ox * p..((ox + 1) * p).min(x.w) {
                            s += x.at(b, y, xx, ch);
                            cnt += 1.0;
                        }
                    }
                    out.set(b, oy, ox, ch, s / cnt);
                }
            }
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn naive_bilinear(x: &Map, oh: usize, ow: usize) -> Map {
    let coord = |o: usize, src: usize, dst: usize| {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0).min((src - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src - 1), s - i0 as f64)
    };
    let mut out = Map::new(x.n, oh, ow, x.c);
    for b in 0..x.n {
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, x.h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, x.w, ow);
                for ch in 0..x.c {
                    let v = (1.0 - fy) * ((1.0 - fx) * x.at(b, y0, x0, ch) + fx * x.at(b, y0, x1, ch))
                        + fy * ((1.0 - fx) * x.at(b, y1, x0, ch) + fx * x.at(b, y1, x1, ch));
                    out.set(b, oy, ox, ch, v);
                }
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Per-channel affine batch norm with fixed statistics.
pub fn bn_infer(x: &Map, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Map {
    let mut out = Map::new(x.n, x.h, x.w, x.c);
    for (i, v) in x.d.iter().enumerate() {
        let ch = i % x.c;
        out.d[i] = gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
    }
    out
}

/// Weights of one convolution read from a store.
pub struct ConvW {
    pub k: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub cout: usize,
}

pub fn conv_weights<T: Scalar>(store: &ParamStore<T>, name: &str) -> ConvW {
    let kernel = store.get(store.id(&format!("{name}.kernel")).unwrap());
    let bias = store.get(store.id(&format!("{name}.bias")).unwrap());
    ConvW {
        k: kernel.shape()[0],
        cout: kernel.shape()[3],
        kernel: to_f64(kernel),
        bias: to_f64(bias),
    }
}

pub fn apply_conv(x: &Map, w: &ConvW) -> Map {
    naive_conv(x, &w.kernel, w.k, w.k, w.cout, &w.bias, (1, 1), true)
}

pub fn bn_from_store<T: Scalar>(store: &ParamStore<T>, name: &str, x: &Map, eps: f64) -> Map {
    let get = |s: &str| to_f64(store.get(store.id(&format!("{name}.{s}")).unwrap()));
    bn_infer(x, &get("gamma"), &get("beta"), &get("running_mean"), &get("running_var"), eps)
}

/// Inference-mode FC-Conv written out equation by equation.
pub fn fcconv_reference<T: Scalar>(store: &ParamStore<T>, name: &str, x: &Map, pool: usize, eps: f64) -> Map {
    let half = x.c / 2;
    let i1 = x.channels(0, half);
    let i2 = x.channels(half, half);
    let conv = |sub: &str, m: &Map| apply_conv(m, &conv_weights(store, &format!("{name}.{sub}")));

    let i1p = bn_from_store(store, &format!("{name}.bn1"), &conv("f1", &i1), eps).apply(relu);
    let local = conv("f3", &i2).apply(relu);
    let pooled = naive_avgpool_ceil(&i2, pool);
    let global = naive_bilinear(&conv("f2", &pooled).apply(relu), x.h, x.w);
    let gate = global.zip(&i2, |g, v| sigmoid(g + v));
    let calibrated = local.zip(&gate, |l, g| l * g);
    let i2p = bn_from_store(store, &format!("{name}.bn4"), &conv("f4", &calibrated), eps).apply(relu);
    i1p.concat(&i2p)
}

/// Channel attention by explicit sums: `U = softmax_rows(Q Qᵀ)`, out = β·U·Q + X.
pub fn cam_reference(x: &Map, beta: f64) -> (Vec<Vec<Vec<f64>>>, Map) {
    let hw = x.h * x.w;
    let mut out = Map::new(x.n, x.h, x.w, x.c);
    let mut us = Vec::new();
    for b in 0..x.n {
        let q = |ch: usize, p: usize| x.at(b, p / x.w, p % x.w, ch);
        let mut u = vec![vec![0.0; x.c]; x.c];
        for i in 0..x.c {
            let g: Vec<f64> = (0..x.c).map(|j| (0..hw).map(|p| q(i, p) * q(j, p)).sum()).collect();
            let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = g.iter().map(|v| (v - m).exp()).sum();
            for j in 0..x.c {
                u[i][j] = (g[j] - m).exp() / z;
            }
        }
        for i in 0..x.c {
            for p in 0..hw {
                let refined: f64 = (0..x.c).map(|j| u[i][j] * q(j, p)).sum();
                out.set(b, p / x.w, p % x.w, i, beta * refined + q(i, p));
            }
        }
        us.push(u);
    }
    (us, out)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// APCER and NPCER (percent) at one threshold, counted sample by sample.
/// Label 1 is an attack; a score at or above `t` is called an attack.
pub fn rates_at(scores: &[f64], labels: &[usize], t: f64) -> (f64, f64) {
    let (mut a, mut missed, mut b, mut rejected) = (0.0, 0.0, 0.0, 0.0);
    for (s, l) in scores.iter().zip(labels) {
        if *l == 1 {
            a += 1.0;
            if *s < t {
                missed += 1.0;
            }
        } else {
            b += 1.0;
            if *s >= t {
                rejected += 1.0;
            }
        }
    }
    (100.0 * missed / a, 100.0 * rejected / b)
}

/// Equal error rate by trying every distinct score and one threshold above
/// them all, then interpolating linearly between the two thresholds where
/// APCER − NPCER changes sign.
pub fn brute_eer(scores: &[f64], labels: &[usize]) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts.push(f64::INFINITY);
    let pts: Vec<(f64, f64)> = ts.iter().map(|&t| rates_at(scores, labels, t)).collect();
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 == 0.0 {
            return w[0].0;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let f = d0 / (d0 - d1);
            return w[0].0 + f * (w[1].0 - w[0].0);
        }
    }
    pts.last().unwrap().0
}
