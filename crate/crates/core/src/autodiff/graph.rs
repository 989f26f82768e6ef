use super::conv::{self, ConvDims};
use super::{AutodiffError, Real, Tensor};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    AvgPool2 {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
    Sigmoid {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    SeparableFilter {
        x: Var,
        kernel: Vec<T>,
    },
    Composite {
        mask: Var,
        diff: Vec<T>,
    },
    Pick {
        x: Var,
        index: usize,
    },
    AreaPenalty {
        x: Var,
        order: Vec<usize>,
        reference: Vec<T>,
    },
    Combine {
        a: Var,
        b: Var,
        alpha: T,
        beta: T,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4], AutodiffError> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        _ => Err(AutodiffError::Shape(format!(
            "{what} expects a [N,C,H,W] tensor, got {shape:?}"
        ))),
    }
}

/// Reflect-101 index folding (`dcb|abcd|cba`).
pub(crate) fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return vec![T::one()];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::of(v / total)).collect()
}

/// Per-axis bilinear taps with half-pixel centers: `(lo, hi, frac)`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn filter_rows<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, kernel: &[T]) {
    let r = (kernel.len() / 2) as isize;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * row[reflect101(x as isize + t as isize - r, w)];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn filter_cols<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, kernel: &[T]) {
    let r = (kernel.len() / 2) as isize;
    for y in 0..h {
        for (t, &k) in kernel.iter().enumerate() {
            let sy = reflect101(y as isize + t as isize - r, h);
            let (s, d) = (&src[sy * w..(sy + 1) * w], &mut dst[y * w..(y + 1) * w]);
            for (o, &i) in d.iter_mut().zip(s) {
                *o += k * i;
            }
        }
    }
}

fn filter_rows_adjoint<T: Real>(gout: &[T], gin: &mut [T], h: usize, w: usize, kernel: &[T]) {
    let r = (kernel.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let g = gout[y * w + x];
            for (t, &k) in kernel.iter().enumerate() {
                gin[y * w + reflect101(x as isize + t as isize - r, w)] += k * g;
            }
        }
    }
}

fn filter_cols_adjoint<T: Real>(gout: &[T], gin: &mut [T], h: usize, w: usize, kernel: &[T]) {
    let r = (kernel.len() / 2) as isize;
    for y in 0..h {
        for (t, &k) in kernel.iter().enumerate() {
            let sy = reflect101(y as isize + t as isize - r, h);
            let (g, d) = (&gout[y * w..(y + 1) * w], &mut gin[sy * w..(sy + 1) * w]);
            for (o, &i) in d.iter_mut().zip(g) {
                *o += k * i;
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(v.0).ok_or(AutodiffError::NoForwardPass(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0)?.value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Square-kernel convolution, stride 1, zero padding `kernel / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let [n, ic, h, wd] = dims4(self.value(x).shape(), "conv2d input")?;
        let [oc, wic, kh, kw] = dims4(self.value(w).shape(), "conv2d weight")?;
        if wic != ic || kh != kw || kh % 2 == 0 {
            return Err(AutodiffError::Shape(format!(
                "conv2d weight {:?} incompatible with input channels {ic}",
                self.value(w).shape()
            )));
        }
        if self.value(b).len() != oc {
            return Err(AutodiffError::Shape("conv2d bias length".into()));
        }
        let dims = ConvDims {
            ic,
            oc,
            h,
            w: wd,
            k: kh,
        };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            dims,
        );
        let value = Tensor::new(vec![n, oc, h, wd], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = dims4(self.value(x).shape(), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::Shape(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let ip = &src[p * h * w..(p + 1) * h * w];
            let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                let r0 = &ip[2 * y * w..2 * y * w + w];
                let r1 = &ip[(2 * y + 1) * w..(2 * y + 1) * w + w];
                for xo in 0..ow {
                    op[y * ow + xo] =
                        (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2 { x }, rg))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = dims4(self.value(x).shape(), "global_avg_pool")?;
        let hw = h * w;
        let src = self.value(x).data();
        let count = T::of(hw as f64);
        let out = (0..n * c)
            .map(|p| src[p * hw..(p + 1) * hw].iter().copied().sum::<T>() / count)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// `y = x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, fin) = match self.value(x).shape() {
            [n, f] => (*n, *f),
            s => {
                return Err(AutodiffError::Shape(format!(
                    "linear expects [N,F], got {s:?}"
                )))
            }
        };
        let (fout, win) = match self.value(w).shape() {
            [o, i] => (*o, *i),
            s => return Err(AutodiffError::Shape(format!("linear weight shape {s:?}"))),
        };
        if win != fin || self.value(b).len() != fout {
            return Err(AutodiffError::Shape(format!(
                "linear weight [{fout},{win}] incompatible with {fin} input features"
            )));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); n * fout];
        for s in 0..n {
            let xr = &xd[s * fin..(s + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                out[s * fout + o] = bd[o] + wr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Mean over the batch of `-w[y] * log softmax(logits)[y]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[T]>,
    ) -> Result<Var, AutodiffError> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] => (*n, *k),
            s => {
                return Err(AutodiffError::Shape(format!(
                    "logits must be [N,K], got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(AutodiffError::Shape(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::InvalidLabel {
                label: bad,
                classes: k,
            });
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(AutodiffError::Shape(format!(
                    "{} class weights for {k} classes",
                    w.len()
                )));
            }
        }
        if !self.value(logits).all_finite() {
            return Err(AutodiffError::NonFinite("logits".into()));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for s in 0..n {
            let row = &data[s * k..(s + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for c in 0..k {
                probs[s * k + c] = (row[c] - max).exp() / denom;
            }
            let y = labels[s];
            let weight = class_weights.map_or(T::one(), |w| w[y]);
            loss += -weight * (row[y] - max - log_denom);
        }
        loss = loss / T::of(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.map(|w| w.to_vec()),
                probs,
            },
            rg,
        ))
    }

    /// Bilinear resize (half-pixel centers, edge clamped) to `out_h x out_w`.
    pub fn upsample_bilinear(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = dims4(self.value(x).shape(), "upsample")?;
        let out = upsample_planes(self.value(x).data(), n * c, h, w, out_h, out_w);
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x }, rg))
    }

    /// Separable filtering of every plane with a symmetric odd-length kernel,
    /// reflect-101 borders.
    pub fn separable_filter(&mut self, x: Var, kernel: Vec<T>) -> Result<Var, AutodiffError> {
        let [n, c, h, w] = dims4(self.value(x).shape(), "separable_filter")?;
        if kernel.len() % 2 == 0 {
            return Err(AutodiffError::Shape(
                "filter kernel length must be odd".into(),
            ));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut tmp = vec![T::zero(); h * w];
        for p in 0..n * c {
            filter_rows(&src[p * h * w..(p + 1) * h * w], &mut tmp, h, w, &kernel);
            filter_cols(&tmp, &mut out[p * h * w..(p + 1) * h * w], h, w, &kernel);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SeparableFilter { x, kernel }, rg))
    }

    /// `mask * image + (1 - mask) * base`, with a single-channel mask
    /// broadcast over the image channels. `image` and `base` are constants.
    pub fn composite(
        &mut self,
        mask: Var,
        image: &Tensor<T>,
        base: &Tensor<T>,
    ) -> Result<Var, AutodiffError> {
        let [n, mc, h, w] = dims4(self.value(mask).shape(), "composite mask")?;
        let [ni, c, hi, wi] = dims4(image.shape(), "composite image")?;
        if mc != 1 || ni != n || hi != h || wi != w || base.shape() != image.shape() {
            return Err(AutodiffError::Shape(format!(
                "composite mask {:?} vs image {:?} vs base {:?}",
                self.value(mask).shape(),
                image.shape(),
                base.shape()
            )));
        }
        let hw = h * w;
        let m = self.value(mask).data();
        let diff: Vec<T> = image
            .data()
            .iter()
            .zip(base.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let mut out = base.data().to_vec();
        for s in 0..n {
            let mp = &m[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for p in 0..hw {
                    out[off + p] += mp[p] * diff[off + p];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[mask]);
        Ok(self.push(value, Op::Composite { mask, diff }, rg))
    }

    /// Scalar holding element `index` of the flattened tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, AutodiffError> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| AutodiffError::Shape(format!("pick index {index} out of range")))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, rg))
    }

    /// Mean squared distance between the descending-sorted entries of `x` and a
    /// step reference that is 1 on the top `round(area_fraction * len)` entries.
    pub fn area_penalty(&mut self, x: Var, area_fraction: f64) -> Var {
        let data = self.value(x).data();
        let len = data.len();
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| {
            data[b]
                .partial_cmp(&data[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let ones = (area_fraction * len as f64).round() as usize;
        let reference: Vec<T> = (0..len)
            .map(|j| if j < ones { T::one() } else { T::zero() })
            .collect();
        let total: T = order
            .iter()
            .zip(&reference)
            .map(|(&i, &r)| (data[i] - r) * (data[i] - r))
            .sum();
        let value = Tensor::scalar(total / T::of(len as f64));
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::AreaPenalty {
                x,
                order,
                reference,
            },
            rg,
        )
    }

    /// `alpha * a + beta * b` for equally shaped inputs.
    pub fn combine(&mut self, a: Var, b: Var, alpha: T, beta: T) -> Result<Var, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::Shape(
                "combine operands differ in shape".into(),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Combine { a, b, alpha, beta }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::Shape("mul operands differ in shape".into()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Clears every gradient buffer in the graph.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let node = self.node(loss)?;
        if !node.value.is_scalar() {
            return Err(AutodiffError::NotScalar(node.value.shape().to_vec()));
        }
        self.zero_grad();
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = node.value.grad.take() else {
                continue;
            };
            backprop(before, node, &gout);
            node.value.grad = Some(gout);
        }
        Ok(())
    }
}

pub(crate) fn upsample_planes<T: Real>(
    src: &[T],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let ip = &src[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = ip[y0 * w + x0] * (T::one() - lx) + ip[y0 * w + x1] * lx;
                let bot = ip[y1 * w + x0] * (T::one() - lx) + ip[y1 * w + x1] * lx;
                op[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

fn grad_buf<T: Real>(node: &mut Node<T>) -> Option<&mut Vec<T>> {
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.value.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(before: &mut [Node<T>], node: &Node<T>, gout: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b } => {
            let [n, ic, h, wd] = dims4(before[x.0].value.shape(), "").expect("checked");
            let [oc, _, k, _] = dims4(before[w.0].value.shape(), "").expect("checked");
            let dims = ConvDims {
                ic,
                oc,
                h,
                w: wd,
                k,
            };
            if let Some(gb) = grad_buf(&mut before[b.0]) {
                conv::backward(&[], &[], gout, n, dims, None, Some(gb), None);
            }
            if before[w.0].requires_grad {
                let xin = before[x.0].value.data().to_vec();
                let gw = grad_buf(&mut before[w.0]).expect("requires grad");
                conv::backward(&xin, &[], gout, n, dims, Some(gw), None, None);
            }
            if before[x.0].requires_grad {
                let wt = before[w.0].value.data().to_vec();
                let gx = grad_buf(&mut before[x.0]).expect("requires grad");
                conv::backward(&[], &wt, gout, n, dims, None, None, Some(gx));
            }
        }
        Op::Relu { x } => {
            let src = before[x.0].value.data().to_vec();
            if let Some(g) = grad_buf(&mut before[x.0]) {
                for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(&src) {
                    if v > T::zero() {
                        *gi += go;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            let out = node.value.data();
            if let Some(g) = grad_buf(&mut before[x.0]) {
                for ((gi, &go), &s) in g.iter_mut().zip(gout).zip(out) {
                    *gi += go * s * (T::one() - s);
                }
            }
        }
        Op::AvgPool2 { x } => {
            let [n, c, h, w] = dims4(before[x.0].value.shape(), "").expect("checked");
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            if let Some(g) = grad_buf(&mut before[x.0]) {
                for p in 0..n * c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            let v = gout[p * oh * ow + y * ow + xo] * quarter;
                            let base = p * h * w;
                            g[base + 2 * y * w + 2 * xo] += v;
                            g[base + 2 * y * w + 2 * xo + 1] += v;
                            g[base + (2 * y + 1) * w + 2 * xo] += v;
                            g[base + (2 * y + 1) * w + 2 * xo + 1] += v;
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let [n, c, h, w] = dims4(before[x.0].value.shape(), "").expect("checked");
            let hw = h * w;
            let inv = T::one() / T::of(hw as f64);
            if let Some(g) = grad_buf(&mut before[x.0]) {
                for p in 0..n * c {
                    let v = gout[p] * inv;
                    g[p * hw..(p + 1) * hw].iter_mut().for_each(|gi| *gi += v);
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (n, fin) = (before[x.0].value.shape()[0], before[x.0].value.shape()[1]);
            let fout = before[w.0].value.shape()[0];
            if let Some(gb) = grad_buf(&mut before[b.0]) {
                for s in 0..n {
                    for o in 0..fout {
                        gb[o] += gout[s * fout + o];
                    }
                }
            }
            if before[w.0].requires_grad {
                let xd = before[x.0].value.data().to_vec();
                let gw = grad_buf(&mut before[w.0]).expect("requires grad");
                for s in 0..n {
                    for o in 0..fout {
                        let go = gout[s * fout + o];
                        for i in 0..fin {
                            gw[o * fin + i] += go * xd[s * fin + i];
                        }
                    }
                }
            }
            if before[x.0].requires_grad {
                let wd = before[w.0].value.data().to_vec();
                let gx = grad_buf(&mut before[x.0]).expect("requires grad");
                for s in 0..n {
                    for o in 0..fout {
                        let go = gout[s * fout + o];
                        for i in 0..fin {
                            gx[s * fin + i] += go * wd[o * fin + i];
                        }
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            weights,
            probs,
        } => {
            let n = labels.len();
            let k = probs.len() / n.max(1);
            let scale = gout[0] / T::of(n as f64);
            if let Some(g) = grad_buf(&mut before[logits.0]) {
                for (s, &y) in labels.iter().enumerate() {
                    let wy = weights.as_ref().map_or(T::one(), |w| w[y]);
                    for c in 0..k {
                        let onehot = if c == y { T::one() } else { T::zero() };
                        g[s * k + c] += scale * wy * (probs[s * k + c] - onehot);
                    }
                }
            }
        }
        Op::Upsample { x } => {
            let [n, c, h, w] = dims4(before[x.0].value.shape(), "").expect("checked");
            let (out_h, out_w) = (node.value.shape()[2], node.value.shape()[3]);
            let ty = bilinear_taps(h, out_h);
            let tx = bilinear_taps(w, out_w);
            if let Some(g) = grad_buf(&mut before[x.0]) {
                for p in 0..n * c {
                    let gp = &mut g[p * h * w..(p + 1) * h * w];
                    let go = &gout[p * out_h * out_w..(p + 1) * out_h * out_w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::of(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::of(lx);
                            let v = go[oy * out_w + ox];
                            let top = v * (T::one() - ly);
                            let bot = v * ly;
                            gp[y0 * w + x0] += top * (T::one() - lx);
                            gp[y0 * w + x1] += top * lx;
                            gp[y1 * w + x0] += bot * (T::one() - lx);
                            gp[y1 * w + x1] += bot * lx;
                        }
                    }
                }
            }
        }
        Op::SeparableFilter { x, kernel } => {
            let [n, c, h, w] = dims4(before[x.0].value.shape(), "").expect("checked");
            if let Some(g) = grad_buf(&mut before[x.0]) {
                let mut tmp = vec![T::zero(); h * w];
                for p in 0..n * c {
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    filter_cols_adjoint(&gout[p * h * w..(p + 1) * h * w], &mut tmp, h, w, kernel);
                    filter_rows_adjoint(&tmp, &mut g[p * h * w..(p + 1) * h * w], h, w, kernel);
                }
            }
        }
        Op::Composite { mask, diff } => {
            let [n, _, h, w] = dims4(before[mask.0].value.shape(), "").expect("checked");
            let hw = h * w;
            let c = diff.len() / (n * hw);
            if let Some(g) = grad_buf(&mut before[mask.0]) {
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for p in 0..hw {
                            g[s * hw + p] += gout[off + p] * diff[off + p];
                        }
                    }
                }
            }
        }
        Op::Pick { x, index } => {
            if let Some(g) = grad_buf(&mut before[x.0]) {
                g[*index] += gout[0];
            }
        }
        Op::AreaPenalty {
            x,
            order,
            reference,
        } => {
            let data = before[x.0].value.data().to_vec();
            let scale = gout[0] * T::of(2.0 / data.len() as f64);
            if let Some(g) = grad_buf(&mut before[x.0]) {
                for (&i, &r) in order.iter().zip(reference) {
                    g[i] += scale * (data[i] - r);
                }
            }
        }
        Op::Combine { a, b, alpha, beta } => {
            for (v, coef) in [(a, *alpha), (b, *beta)] {
                if let Some(g) = grad_buf(&mut before[v.0]) {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += coef * go;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            if let Some(g) = grad_buf(&mut before[a.0]) {
                for ((gi, &go), &o) in g.iter_mut().zip(gout).zip(&bv) {
                    *gi += go * o;
                }
            }
            if let Some(g) = grad_buf(&mut before[b.0]) {
                for ((gi, &go), &o) in g.iter_mut().zip(gout).zip(&av) {
                    *gi += go * o;
                }
            }
        }
        Op::Sum { x } => {
            if let Some(g) = grad_buf(&mut before[x.0]) {
                g.iter_mut().for_each(|gi| *gi += gout[0]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect101_folds() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect101(-4, 1), 0);
    }

    #[test]
    fn backward_on_unknown_var_is_rejected() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(
            g.backward(Var(0)),
            Err(AutodiffError::NoForwardPass(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![3]), true);
        assert!(matches!(g.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.5, -2.0, 4.0]).unwrap(), false);
        let w = g.leaf(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(), true);
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.5, -2.0, 4.0]);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn gap_of_constant_is_constant() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::filled(vec![2, 3, 4, 5], 0.75), false);
        let y = g.global_avg_pool(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn gap_is_channel_mean() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i * i % 7) as f64).collect();
        let x = g.leaf(Tensor::new(vec![1, 2, 3, 4], data.clone()).unwrap(), false);
        let y = g.global_avg_pool(x).unwrap();
        for c in 0..2 {
            let mean = data[c * 12..(c + 1) * 12].iter().sum::<f64>() / 12.0;
            assert_eq!(g.value(y).data()[c], mean);
        }
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let input = vec![0.3, -1.2, 7.0];
        let x = g.leaf(Tensor::new(vec![1, 3], input.clone()).unwrap(), false);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.leaf(Tensor::new(vec![3, 3], eye).unwrap(), true);
        let b = g.leaf(Tensor::zeros(vec![3]), true);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), input.as_slice());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(
            Tensor::new(vec![2, 2], vec![0.4, 0.4, -3.0, -3.0]).unwrap(),
            true,
        );
        let loss = g.softmax_cross_entropy(l, &[0, 1], None).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_zero_loss_and_gradient() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(
            Tensor::new(vec![1, 3], vec![0.0, 200.0, 0.0]).unwrap(),
            true,
        );
        let loss = g.softmax_cross_entropy(l, &[1], None).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-12);
        g.backward(loss).unwrap();
        assert!(g.grad(l).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn weighted_cross_entropy_matches_hand_values() {
        // logits, labels and weights chosen by hand; expected value below is
        // -(1/3) * sum_i w[y_i] * log softmax(z_i)[y_i] evaluated termwise.
        let z = [[1.0, 2.0, 0.5], [0.0, 0.0, 3.0], [-1.0, 1.0, 1.0]];
        let labels = [1usize, 0, 2];
        let w = [0.5, 2.0, 1.5];
        let lse = |r: &[f64; 3]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let term0 = w[1] * (lse(&z[0]) - 2.0);
        let term1 = w[0] * (lse(&z[1]) - 0.0);
        let term2 = w[2] * (lse(&z[2]) - 1.0);
        let expected = (term0 + term1 + term2) / 3.0;
        // independently evaluated with numpy
        assert!((expected - 1.20471152).abs() < 1e-8, "{expected}");

        let mut g = Graph::<f64>::new();
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let l = g.leaf(Tensor::new(vec![3, 3], flat).unwrap(), true);
        let loss = g.softmax_cross_entropy(l, &labels, Some(&w)).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut g = Graph::<f32>::new();
        let l = g.leaf(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap(), true);
        assert!(matches!(
            g.softmax_cross_entropy(l, &[0], None),
            Err(AutodiffError::NonFinite(_))
        ));
        let l = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        assert!(g.softmax_cross_entropy(l, &[2], None).is_err());
    }

    #[test]
    fn area_penalty_zero_on_reference() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::new(
                vec![1, 1, 2, 5],
                vec![0., 1., 0., 0., 0., 0., 0., 0., 0., 0.],
            )
            .unwrap(),
            true,
        );
        let p = g.area_penalty(x, 0.1);
        assert_eq!(g.value(p).data()[0], 0.0);
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k: Vec<f64> = gaussian_kernel(2.3);
        assert_eq!(k.len(), 2 * 7 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
