//! Layer kernels with explicit forward/backward passes.
//!
//! Every layer computes gradients with respect to both its parameters and its
//! input, so the same machinery serves parameter training, input-space noise
//! optimization, and backpropagation started from the final-conv feature tap.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, Axis};

/// Activation flowing between layers: 4-D feature maps or 2-D row batches.
#[derive(Clone, Debug)]
pub enum Act<F: Scalar> {
    T4(Array4<F>),
    T2(Array2<F>),
}

impl<F: Scalar> Act<F> {
    pub fn t4(self) -> Array4<F> {
        match self {
            Act::T4(a) => a,
            Act::T2(_) => panic!("expected a 4-d activation"),
        }
    }

    pub fn t2(self) -> Array2<F> {
        match self {
            Act::T4(_) => panic!("expected a 2-d activation"),
            Act::T2(a) => a,
        }
    }

    pub fn t4_ref(&self) -> &Array4<F> {
        match self {
            Act::T4(a) => a,
            Act::T2(_) => panic!("expected a 4-d activation"),
        }
    }

    fn hadamard(&self, other: &Act<F>) -> Act<F> {
        match (self, other) {
            (Act::T4(a), Act::T4(b)) => Act::T4(a * b),
            (Act::T2(a), Act::T2(b)) => Act::T2(a * b),
            _ => panic!("activation rank mismatch"),
        }
    }
}

/// Batch-norm statistics mode. `Train` normalizes with batch statistics and
/// updates the running averages; `Frozen` normalizes with the stored running
/// statistics and leaves them untouched (used for evaluation and for every
/// unlearning-side pass, where drift against the reference must stay
/// meaningful).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Frozen,
}

#[derive(Clone, Debug)]
pub struct Conv2d<F: Scalar> {
    pub weight: Array4<F>, // [out, in, kh, kw]
    pub bias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>, // [out, in]
    pub bias: Array1<F>,
}

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Residual block: `relu(path(x) + shortcut(x))`. An empty shortcut is the
/// identity; a non-empty one is a projection (1x1 conv + bn) used when the
/// block changes resolution or channel count.
#[derive(Clone, Debug)]
pub struct ResidualBlock<F: Scalar> {
    pub path: Vec<Layer<F>>,
    pub shortcut: Vec<Layer<F>>,
}

#[derive(Clone, Debug)]
pub enum Layer<F: Scalar> {
    Conv2d(Conv2d<F>),
    MaxPool2d(MaxPool2d),
    ReLU,
    Flatten,
    Linear(Linear<F>),
    BatchNorm2d(BatchNorm2d<F>),
    Residual(ResidualBlock<F>),
    GlobalAvgPool,
}

#[derive(Clone, Debug)]
pub enum LayerCache<F: Scalar> {
    Conv {
        cols: Array2<F>,
        in_dim: (usize, usize, usize, usize),
    },
    Pool {
        argmax: Vec<usize>,
        in_dim: (usize, usize, usize, usize),
        out_dim: (usize, usize, usize, usize),
    },
    Mask(Act<F>),
    FlattenDim((usize, usize, usize, usize)),
    LinearIn(Array2<F>),
    Bn {
        x_hat: Array4<F>,
        inv_std: Array1<F>,
        train: bool,
    },
    Residual(Box<ResidualCache<F>>),
    GapDim((usize, usize, usize, usize)),
}

#[derive(Clone, Debug)]
pub struct ResidualCache<F: Scalar> {
    pub path: Vec<LayerCache<F>>,
    pub shortcut: Vec<LayerCache<F>>,
    pub sum_mask: Array4<F>,
}

/// One named tensor of model state (parameters or running statistics).
#[derive(Clone, Debug)]
pub struct NamedTensor<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

// ---------------------------------------------------------------------------
// im2col convolution kernels
// ---------------------------------------------------------------------------

fn conv_out_dim(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

fn im2col<F: Scalar>(x: &Array4<F>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let (ho, wo) = conv_out_dim(h, w, kh, kw, stride, pad);
    let n_cols = b * ho * wo;
    let mut cols = Array2::<F>::zeros((c * kh * kw, n_cols));
    let xs = x.as_slice().expect("input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_off = ((ci * kh + ki) * kw + kj) * n_cols;
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_base = x_base + ih as usize * w;
                        let dst_base = row_off + (bi * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[dst_base + ow] = xs[src_base + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    in_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, w) = in_dim;
    let (ho, wo) = conv_out_dim(h, w, kh, kw, stride, pad);
    let n_cols = b * ho * wo;
    let mut dx = Array4::<F>::zeros(in_dim);
    let ds = dcols.as_slice().expect("dcols must be standard layout");
    let xs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_off = ((ci * kh + ki) * kw + kj) * n_cols;
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_base = x_base + ih as usize * w;
                        let src_base = row_off + (bi * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[dst_base + iw as usize] += ds[src_base + ow];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<F: Scalar> Conv2d<F> {
    fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (kh, kw)
    }

    fn forward(&self, x: &Array4<F>) -> (Array4<F>, LayerCache<F>) {
        let in_dim = x.dim();
        let (b, _, h, w) = in_dim;
        let (kh, kw) = self.kernel();
        let (ho, wo) = conv_out_dim(h, w, kh, kw, self.stride, self.pad);
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let cout = self.out_channels();
        let k = cols.nrows();
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((cout, k))
            .expect("conv weight must be standard layout");
        let mut y_mat = w_mat.dot(&cols);
        for (co, mut row) in y_mat.axis_iter_mut(Axis(0)).enumerate() {
            let bias = self.bias[co];
            row.mapv_inplace(|v| v + bias);
        }
        let y = y_mat
            .into_shape_with_order((cout, b, ho, wo))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        (y, LayerCache::Conv { cols, in_dim })
    }

    fn backward(
        &self,
        cache: &LayerCache<F>,
        dy: &Array4<F>,
        pg: Option<&mut [F]>,
        want_dx: bool,
    ) -> Option<Array4<F>> {
        let LayerCache::Conv { cols, in_dim } = cache else {
            panic!("conv backward got foreign cache");
        };
        let (b, co, ho, wo) = dy.dim();
        let (kh, kw) = self.kernel();
        let k = cols.nrows();
        let dy_mat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, b * ho * wo))
            .unwrap();
        if let Some(pg) = pg {
            let dw = dy_mat.dot(&cols.t());
            let db = dy_mat.sum_axis(Axis(1));
            let w_len = co * k;
            pg[..w_len].copy_from_slice(dw.as_slice().unwrap());
            pg[w_len..w_len + co].copy_from_slice(db.as_slice().unwrap());
        }
        if want_dx {
            let w_mat = self
                .weight
                .view()
                .into_shape_with_order((co, k))
                .unwrap();
            let dcols = w_mat.t().dot(&dy_mat);
            Some(col2im(&dcols, *in_dim, kh, kw, self.stride, self.pad))
        } else {
            None
        }
    }
}

impl MaxPool2d {
    fn forward<F: Scalar>(&self, x: &Array4<F>) -> (Array4<F>, LayerCache<F>) {
        let in_dim = x.dim();
        let (b, c, h, w) = in_dim;
        let ho = (h - self.k) / self.stride + 1;
        let wo = (w - self.k) / self.stride + 1;
        let mut y = Array4::<F>::zeros((b, c, ho, wo));
        let mut argmax = vec![0usize; b * c * ho * wo];
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let out_base = (bi * c + ci) * ho * wo;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..self.k {
                            let row = base + (oh * self.stride + ki) * w + ow * self.stride;
                            for kj in 0..self.k {
                                let v = xs[row + kj];
                                if v > best {
                                    best = v;
                                    best_idx = row + kj;
                                }
                            }
                        }
                        let o = out_base + oh * wo + ow;
                        ys[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        (
            y,
            LayerCache::Pool {
                argmax,
                in_dim,
                out_dim: (b, c, ho, wo),
            },
        )
    }

    fn backward<F: Scalar>(&self, cache: &LayerCache<F>, dy: &Array4<F>) -> Array4<F> {
        let LayerCache::Pool { argmax, in_dim, .. } = cache else {
            panic!("pool backward got foreign cache");
        };
        let mut dx = Array4::<F>::zeros(*in_dim);
        let dxs = dx.as_slice_mut().unwrap();
        let dys = dy.as_slice().unwrap();
        for (o, &src) in argmax.iter().enumerate() {
            dxs[src] += dys[o];
        }
        dx
    }
}

impl<F: Scalar> Linear<F> {
    fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerCache<F>) {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        (y, LayerCache::LinearIn(x.clone()))
    }

    fn backward(
        &self,
        cache: &LayerCache<F>,
        dy: &Array2<F>,
        pg: Option<&mut [F]>,
        want_dx: bool,
    ) -> Option<Array2<F>> {
        let LayerCache::LinearIn(x) = cache else {
            panic!("linear backward got foreign cache");
        };
        if let Some(pg) = pg {
            let dw = dy.t().dot(x);
            let db = dy.sum_axis(Axis(0));
            let (o, i) = dw.dim();
            pg[..o * i].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
            pg[o * i..].copy_from_slice(db.as_slice().unwrap());
        }
        if want_dx {
            Some(dy.dot(&self.weight))
        } else {
            None
        }
    }
}

impl<F: Scalar> BatchNorm2d<F> {
    fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> (Array4<F>, LayerCache<F>) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = Array1::<F>::zeros(c);
                let mut var = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(1), ci);
                    let m = ch.sum() * F::cast(1.0 / n);
                    let v = ch.fold(F::zero(), |s, &xv| s + (xv - m) * (xv - m))
                        * F::cast(1.0 / n);
                    mean[ci] = m;
                    var[ci] = v;
                }
                // running averages keep the unbiased variance
                let mom = F::cast(self.momentum);
                let keep = F::one() - mom;
                let bessel = F::cast(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                for ci in 0..c {
                    self.running_mean[ci] = keep * self.running_mean[ci] + mom * mean[ci];
                    self.running_var[ci] = keep * self.running_var[ci] + mom * var[ci] * bessel;
                }
                (mean, var)
            }
            BnMode::Frozen => (self.running_mean.clone(), self.running_var.clone()),
        };
        let eps = F::cast(self.eps);
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut x_hat = x.clone();
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            x_hat
                .index_axis_mut(Axis(1), ci)
                .mapv_inplace(|xv| (xv - m) * is);
        }
        let mut y = x_hat.clone();
        for ci in 0..c {
            let g = self.gamma[ci];
            let be = self.beta[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + be);
        }
        (
            y,
            LayerCache::Bn {
                x_hat,
                inv_std,
                train: mode == BnMode::Train,
            },
        )
    }

    fn backward(
        &self,
        cache: &LayerCache<F>,
        dy: &Array4<F>,
        pg: Option<&mut [F]>,
        want_dx: bool,
    ) -> Option<Array4<F>> {
        let LayerCache::Bn { x_hat, inv_std, train } = cache else {
            panic!("batchnorm backward got foreign cache");
        };
        let (b, c, h, w) = dy.dim();
        let n = F::cast((b * h * w) as f64);
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xc = x_hat.index_axis(Axis(1), ci);
            dgamma[ci] = dyc
                .iter()
                .zip(xc.iter())
                .fold(F::zero(), |s, (&d, &xh)| s + d * xh);
            dbeta[ci] = dyc.sum();
        }
        if let Some(pg) = pg {
            pg[..c].copy_from_slice(dgamma.as_slice().unwrap());
            pg[c..].copy_from_slice(dbeta.as_slice().unwrap());
        }
        if !want_dx {
            return None;
        }
        let mut dx = Array4::<F>::zeros(dy.dim());
        for ci in 0..c {
            let g = self.gamma[ci];
            let is = inv_std[ci];
            let dyc = dy.index_axis(Axis(1), ci);
            let xc = x_hat.index_axis(Axis(1), ci);
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if *train {
                let sum_dy = dbeta[ci];
                let sum_dy_xhat = dgamma[ci];
                ndarray::Zip::from(&mut dxc).and(&dyc).and(&xc).for_each(
                    |o, &d, &xh| {
                        *o = g * is * (d - sum_dy / n - xh * sum_dy_xhat / n);
                    },
                );
            } else {
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| {
                    *o = g * is * d;
                });
            }
        }
        Some(dx)
    }
}

impl<F: Scalar> ResidualBlock<F> {
    fn forward(&mut self, x: &Array4<F>, mode: BnMode) -> (Array4<F>, LayerCache<F>) {
        let mut act = Act::T4(x.clone());
        let mut path_caches = Vec::with_capacity(self.path.len());
        for layer in &mut self.path {
            let (next, cache) = layer.forward(act, mode);
            path_caches.push(cache);
            act = next;
        }
        let main = act.t4();
        let mut shortcut_caches = Vec::with_capacity(self.shortcut.len());
        let sc = if self.shortcut.is_empty() {
            x.clone()
        } else {
            let mut act = Act::T4(x.clone());
            for layer in &mut self.shortcut {
                let (next, cache) = layer.forward(act, mode);
                shortcut_caches.push(cache);
                act = next;
            }
            act.t4()
        };
        let sum = &main + &sc;
        let sum_mask = sum.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        let y = &sum * &sum_mask;
        (
            y,
            LayerCache::Residual(Box::new(ResidualCache {
                path: path_caches,
                shortcut: shortcut_caches,
                sum_mask,
            })),
        )
    }

    fn backward(
        &self,
        cache: &LayerCache<F>,
        dy: &Array4<F>,
        pg: Option<&mut [F]>,
        want_dx: bool,
    ) -> Option<Array4<F>> {
        let LayerCache::Residual(rc) = cache else {
            panic!("residual backward got foreign cache");
        };
        let d_sum = dy * &rc.sum_mask;
        // Split this block's gradient slice among sub-layers in declaration order.
        let mut pg = pg;
        let mut offsets: Vec<Option<&mut [F]>> = Vec::new();
        if let Some(buf) = pg.take() {
            let mut rest = buf;
            for layer in self.path.iter().chain(self.shortcut.iter()) {
                let (piece, tail) = rest.split_at_mut(layer.param_count());
                offsets.push(Some(piece));
                rest = tail;
            }
        } else {
            for _ in 0..(self.path.len() + self.shortcut.len()) {
                offsets.push(None);
            }
        }
        let mut grad_slices = offsets.into_iter();

        // Walk the main path backwards; the input grad is needed whenever the
        // caller wants it or the shortcut is identity (it reuses d_sum anyway).
        let mut path_slices: Vec<Option<&mut [F]>> =
            self.path.iter().map(|_| grad_slices.next().unwrap()).collect();
        let mut shortcut_slices: Vec<Option<&mut [F]>> = self
            .shortcut
            .iter()
            .map(|_| grad_slices.next().unwrap())
            .collect();

        let mut act = Some(Act::T4(d_sum.clone()));
        for (i, layer) in self.path.iter().enumerate().rev() {
            let want = want_dx || i > 0;
            let slice = path_slices[i].take();
            act = layer.backward(&rc.path[i], act.take().expect("gradient present"), slice, want);
            if act.is_none() {
                break;
            }
        }
        let dx_main = if want_dx {
            Some(act.expect("input grad requested").t4())
        } else {
            None
        };

        let dx_short = if self.shortcut.is_empty() {
            if want_dx {
                Some(d_sum)
            } else {
                None
            }
        } else {
            let mut act = Some(Act::T4(d_sum));
            for (i, layer) in self.shortcut.iter().enumerate().rev() {
                let want = want_dx || i > 0;
                let slice = shortcut_slices[i].take();
                act = layer.backward(
                    &rc.shortcut[i],
                    act.take().expect("gradient present"),
                    slice,
                    want,
                );
                if act.is_none() {
                    break;
                }
            }
            if want_dx {
                Some(act.expect("input grad requested").t4())
            } else {
                None
            }
        };

        match (dx_main, dx_short) {
            (Some(a), Some(b)) => Some(&a + &b),
            _ => None,
        }
    }
}

impl<F: Scalar> Layer<F> {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.weight.len() + c.bias.len(),
            Layer::Linear(l) => l.weight.len() + l.bias.len(),
            Layer::BatchNorm2d(bn) => bn.gamma.len() + bn.beta.len(),
            Layer::Residual(r) => r
                .path
                .iter()
                .chain(r.shortcut.iter())
                .map(Layer::param_count)
                .sum(),
            _ => 0,
        }
    }

    pub fn forward(&mut self, x: Act<F>, mode: BnMode) -> (Act<F>, LayerCache<F>) {
        match self {
            Layer::Conv2d(c) => {
                let (y, cache) = c.forward(x.t4_ref());
                (Act::T4(y), cache)
            }
            Layer::MaxPool2d(p) => {
                let (y, cache) = p.forward(x.t4_ref());
                (Act::T4(y), cache)
            }
            Layer::ReLU => {
                let (y, mask) = match x {
                    Act::T4(a) => {
                        let mask = a.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                        (Act::T4(&a * &mask), Act::T4(mask))
                    }
                    Act::T2(a) => {
                        let mask = a.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                        (Act::T2(&a * &mask), Act::T2(mask))
                    }
                };
                (y, LayerCache::Mask(mask))
            }
            Layer::Flatten => {
                let a = x.t4();
                let dim = a.dim();
                let (b, c, h, w) = dim;
                let y = a.into_shape_with_order((b, c * h * w)).unwrap();
                (Act::T2(y), LayerCache::FlattenDim(dim))
            }
            Layer::Linear(l) => {
                let (y, cache) = l.forward(&x.t2());
                (Act::T2(y), cache)
            }
            Layer::BatchNorm2d(bn) => {
                let (y, cache) = bn.forward(x.t4_ref(), mode);
                (Act::T4(y), cache)
            }
            Layer::Residual(r) => {
                let (y, cache) = r.forward(x.t4_ref(), mode);
                (Act::T4(y), cache)
            }
            Layer::GlobalAvgPool => {
                let a = x.t4();
                let dim = a.dim();
                let (b, c, h, w) = dim;
                let scale = F::cast(1.0 / (h * w) as f64);
                let mut y = Array2::<F>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        y[[bi, ci]] = a
                            .index_axis(Axis(0), bi)
                            .index_axis(Axis(0), ci)
                            .sum()
                            * scale;
                    }
                }
                (Act::T2(y), LayerCache::GapDim(dim))
            }
        }
    }

    /// Backward through this layer. Writes parameter gradients into `pg`
    /// (flat, this layer's region) when given; returns the input gradient
    /// when `want_dx`.
    pub fn backward(
        &self,
        cache: &LayerCache<F>,
        dy: Act<F>,
        pg: Option<&mut [F]>,
        want_dx: bool,
    ) -> Option<Act<F>> {
        match self {
            Layer::Conv2d(c) => c
                .backward(cache, dy.t4_ref(), pg, want_dx)
                .map(Act::T4),
            Layer::MaxPool2d(p) => {
                if want_dx {
                    Some(Act::T4(p.backward(cache, dy.t4_ref())))
                } else {
                    None
                }
            }
            Layer::ReLU => {
                if want_dx {
                    let LayerCache::Mask(mask) = cache else {
                        panic!("relu backward got foreign cache");
                    };
                    Some(dy.hadamard(mask))
                } else {
                    None
                }
            }
            Layer::Flatten => {
                if want_dx {
                    let LayerCache::FlattenDim(dim) = cache else {
                        panic!("flatten backward got foreign cache");
                    };
                    Some(Act::T4(dy.t2().into_shape_with_order(*dim).unwrap()))
                } else {
                    None
                }
            }
            Layer::Linear(l) => l.backward(cache, &dy.t2(), pg, want_dx).map(Act::T2),
            Layer::BatchNorm2d(bn) => {
                bn.backward(cache, dy.t4_ref(), pg, want_dx).map(Act::T4)
            }
            Layer::Residual(r) => r.backward(cache, dy.t4_ref(), pg, want_dx).map(Act::T4),
            Layer::GlobalAvgPool => {
                if want_dx {
                    let LayerCache::GapDim(dim) = cache else {
                        panic!("gap backward got foreign cache");
                    };
                    let (b, c, h, w) = *dim;
                    let dy = dy.t2();
                    let scale = F::cast(1.0 / (h * w) as f64);
                    let mut dx = Array4::<F>::zeros(*dim);
                    for bi in 0..b {
                        for ci in 0..c {
                            let v = dy[[bi, ci]] * scale;
                            dx.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .fill(v);
                        }
                    }
                    Some(Act::T4(dx))
                } else {
                    None
                }
            }
        }
    }

    /// Inference-only forward (no cache, no running-stat updates).
    pub fn infer(&self, x: Act<F>) -> Act<F> {
        match self {
            Layer::Conv2d(c) => Act::T4(c.forward(x.t4_ref()).0),
            Layer::MaxPool2d(p) => Act::T4(p.forward(x.t4_ref()).0),
            Layer::ReLU => match x {
                Act::T4(a) => Act::T4(a.mapv(|v| if v > F::zero() { v } else { F::zero() })),
                Act::T2(a) => Act::T2(a.mapv(|v| if v > F::zero() { v } else { F::zero() })),
            },
            Layer::Flatten => {
                let a = x.t4();
                let (b, c, h, w) = a.dim();
                Act::T2(a.into_shape_with_order((b, c * h * w)).unwrap())
            }
            Layer::Linear(l) => Act::T2(l.forward(&x.t2()).0),
            Layer::BatchNorm2d(bn) => {
                let mut bn = bn.clone();
                Act::T4(bn.forward(x.t4_ref(), BnMode::Frozen).0)
            }
            Layer::Residual(r) => {
                let xr = x.t4();
                let mut main = Act::T4(xr.clone());
                for layer in &r.path {
                    main = layer.infer(main);
                }
                let sc = if r.shortcut.is_empty() {
                    xr
                } else {
                    let mut act = Act::T4(xr);
                    for layer in &r.shortcut {
                        act = layer.infer(act);
                    }
                    act.t4()
                };
                let sum = main.t4() + sc;
                Act::T4(sum.mapv(|v| if v > F::zero() { v } else { F::zero() }))
            }
            Layer::GlobalAvgPool => {
                let a = x.t4();
                let (b, c, h, w) = a.dim();
                let scale = F::cast(1.0 / (h * w) as f64);
                let mut y = Array2::<F>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        y[[bi, ci]] =
                            a.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * scale;
                    }
                }
                Act::T2(y)
            }
        }
    }

    pub fn write_params(&self, out: &mut Vec<F>) {
        match self {
            Layer::Conv2d(c) => {
                out.extend_from_slice(c.weight.as_slice().unwrap());
                out.extend_from_slice(c.bias.as_slice().unwrap());
            }
            Layer::Linear(l) => {
                out.extend_from_slice(l.weight.as_slice().unwrap());
                out.extend_from_slice(l.bias.as_slice().unwrap());
            }
            Layer::BatchNorm2d(bn) => {
                out.extend_from_slice(bn.gamma.as_slice().unwrap());
                out.extend_from_slice(bn.beta.as_slice().unwrap());
            }
            Layer::Residual(r) => {
                for layer in r.path.iter().chain(r.shortcut.iter()) {
                    layer.write_params(out);
                }
            }
            _ => {}
        }
    }

    pub fn read_params(&mut self, src: &[F], pos: &mut usize) {
        fn take<'a, F: Scalar>(src: &'a [F], pos: &mut usize, len: usize) -> &'a [F] {
            let s = &src[*pos..*pos + len];
            *pos += len;
            s
        }
        match self {
            Layer::Conv2d(c) => {
                let wl = c.weight.len();
                c.weight
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(take(src, pos, wl));
                let bl = c.bias.len();
                c.bias
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(take(src, pos, bl));
            }
            Layer::Linear(l) => {
                let wl = l.weight.len();
                l.weight
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(take(src, pos, wl));
                let bl = l.bias.len();
                l.bias
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(take(src, pos, bl));
            }
            Layer::BatchNorm2d(bn) => {
                let gl = bn.gamma.len();
                bn.gamma
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(take(src, pos, gl));
                let bl = bn.beta.len();
                bn.beta
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(take(src, pos, bl));
            }
            Layer::Residual(r) => {
                for layer in r.path.iter_mut().chain(r.shortcut.iter_mut()) {
                    layer.read_params(src, pos);
                }
            }
            _ => {}
        }
    }

    /// Named state tensors (parameters plus batch-norm running statistics).
    pub fn named_state(&self, prefix: &str, out: &mut Vec<NamedTensor<F>>) {
        let push = |out: &mut Vec<NamedTensor<F>>, name: String, shape: Vec<usize>, data: &[F]| {
            out.push(NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            });
        };
        match self {
            Layer::Conv2d(c) => {
                let (o, i, kh, kw) = c.weight.dim();
                push(
                    out,
                    format!("{prefix}.weight"),
                    vec![o, i, kh, kw],
                    c.weight.as_slice().unwrap(),
                );
                push(out, format!("{prefix}.bias"), vec![o], c.bias.as_slice().unwrap());
            }
            Layer::Linear(l) => {
                let (o, i) = l.weight.dim();
                push(
                    out,
                    format!("{prefix}.weight"),
                    vec![o, i],
                    l.weight.as_slice().unwrap(),
                );
                push(out, format!("{prefix}.bias"), vec![o], l.bias.as_slice().unwrap());
            }
            Layer::BatchNorm2d(bn) => {
                let c = bn.gamma.len();
                push(out, format!("{prefix}.gamma"), vec![c], bn.gamma.as_slice().unwrap());
                push(out, format!("{prefix}.beta"), vec![c], bn.beta.as_slice().unwrap());
                push(
                    out,
                    format!("{prefix}.running_mean"),
                    vec![c],
                    bn.running_mean.as_slice().unwrap(),
                );
                push(
                    out,
                    format!("{prefix}.running_var"),
                    vec![c],
                    bn.running_var.as_slice().unwrap(),
                );
            }
            Layer::Residual(r) => {
                for (j, layer) in r.path.iter().enumerate() {
                    layer.named_state(&format!("{prefix}.path{j}"), out);
                }
                for (j, layer) in r.shortcut.iter().enumerate() {
                    layer.named_state(&format!("{prefix}.shortcut{j}"), out);
                }
            }
            _ => {}
        }
    }

    pub fn load_named_state(
        &mut self,
        prefix: &str,
        map: &std::collections::HashMap<String, NamedTensor<F>>,
    ) -> Result<(), String> {
        fn fetch<'a, F: Scalar>(
            map: &'a std::collections::HashMap<String, NamedTensor<F>>,
            name: String,
            len: usize,
        ) -> Result<&'a [F], String> {
            let t = map.get(&name).ok_or_else(|| format!("missing tensor {name}"))?;
            if t.data.len() != len {
                return Err(format!(
                    "tensor {name} has {} elements, expected {len}",
                    t.data.len()
                ));
            }
            Ok(&t.data)
        }
        match self {
            Layer::Conv2d(c) => {
                let wl = c.weight.len();
                c.weight
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.weight"), wl)?);
                let bl = c.bias.len();
                c.bias
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.bias"), bl)?);
            }
            Layer::Linear(l) => {
                let wl = l.weight.len();
                l.weight
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.weight"), wl)?);
                let bl = l.bias.len();
                l.bias
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.bias"), bl)?);
            }
            Layer::BatchNorm2d(bn) => {
                let c = bn.gamma.len();
                bn.gamma
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.gamma"), c)?);
                bn.beta
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.beta"), c)?);
                bn.running_mean
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.running_mean"), c)?);
                bn.running_var
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(fetch(map, format!("{prefix}.running_var"), c)?);
            }
            Layer::Residual(r) => {
                for (j, layer) in r.path.iter_mut().enumerate() {
                    layer.load_named_state(&format!("{prefix}.path{j}"), map)?;
                }
                for (j, layer) in r.shortcut.iter_mut().enumerate() {
                    layer.load_named_state(&format!("{prefix}.shortcut{j}"), map)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}
