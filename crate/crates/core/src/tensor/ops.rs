use super::tape::{accumulate, Node, Tape, Var};
use super::Tensor;
use crate::error::{invalid, shape, Result};
use crate::scalar::Scalar;

pub(crate) enum Op<T> {
    Leaf,
    PatchEmbed { x: Var, w: Var, b: Var, patch: usize },
    DepthwiseConv { x: Var, w: Var, b: Var, kernel: usize },
    ChannelAffine { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Dot { x: Var, weights: Vec<T> },
    GlobalAvgPool { x: Var },
    TokenMix { x: Var, u: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    PenaltyLu { u: Var, gram_minus_eye: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::PatchEmbed { x, w, b, .. } | Op::DepthwiseConv { x, w, b, .. } | Op::ChannelAffine { x, w, b } => {
                vec![*x, *w, *b]
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Add { a, b } => vec![*a, *b],
            Op::TokenMix { x, u } => vec![*x, *u],
            Op::Gelu { x } | Op::Scale { x, .. } | Op::Sum { x } | Op::Dot { x, .. } | Op::GlobalAvgPool { x } => {
                vec![*x]
            }
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::PenaltyLu { u, .. } => vec![*u],
        }
    }
}

/// Whether batch normalization uses batch statistics (and updates the
/// running averages) or the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormStats<T> {
    /// Zero mean, unit variance, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(shape(msg()))
    }
}

/// `(batch, channels, positions)` view of a tensor of rank >= 2.
fn bcp(s: &[usize]) -> Result<(usize, usize, usize)> {
    check(s.len() >= 2, || format!("expected rank >= 2, got shape {s:?}"))?;
    Ok((s[0], s[1], s[2..].iter().product()))
}

impl<T: Scalar> Tape<T> {
    /// Non-overlapping stride-`patch` convolution plus bias:
    /// `x: B x C x H x W`, `w: h x C x patch x patch`, `b: h`.
    pub fn patch_embed(&mut self, x: Var, w: Var, b: Var, patch: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        check(xs.len() == 4 && ws.len() == 4, || format!("patch_embed shapes {xs:?}, {ws:?}"))?;
        let (bn, c, hgt, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let h = ws[0];
        check(ws[1] == c && ws[2] == patch && ws[3] == patch && bs == [h], || {
            format!("patch_embed weight {ws:?} / bias {bs:?} do not fit input {xs:?} with patch {patch}")
        })?;
        check(patch > 0 && hgt % patch == 0 && wid % patch == 0, || {
            format!("input {hgt}x{wid} not divisible by patch {patch}")
        })?;
        let (gu, gv) = (hgt / patch, wid / patch);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); bn * h * gu * gv];
        for bi in 0..bn {
            for o in 0..h {
                let wo = &wd[o * c * patch * patch..(o + 1) * c * patch * patch];
                for u in 0..gu {
                    for v in 0..gv {
                        let mut acc = T::zero();
                        for ci in 0..c {
                            let plane = &xd[(bi * c + ci) * hgt * wid..(bi * c + ci + 1) * hgt * wid];
                            for i in 0..patch {
                                let row = &plane[(u * patch + i) * wid + v * patch..][..patch];
                                let wrow = &wo[(ci * patch + i) * patch..][..patch];
                                for j in 0..patch {
                                    acc += wrow[j] * row[j];
                                }
                            }
                        }
                        out[((bi * h + o) * gu + u) * gv + v] = acc + bd[o];
                    }
                }
            }
        }
        let value = Tensor::new(&[bn, h, gu, gv], out)?;
        Ok(self.push(value, Op::PatchEmbed { x, w, b, patch }))
    }

    /// Per-channel 2-D convolution with zero "same" padding:
    /// `x: B x C x S1 x S2`, `w: C x k x k`, `b: C`, `k` odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        check(xs.len() == 4 && ws.len() == 3, || format!("depthwise_conv shapes {xs:?}, {ws:?}"))?;
        let k = ws[1];
        if k % 2 == 0 || ws[2] != k {
            return Err(invalid(format!("depthwise kernel must be square with odd side, got {ws:?}")));
        }
        let (bn, c, s1, s2) = (xs[0], xs[1], xs[2], xs[3]);
        check(ws[0] == c && bs == [c], || format!("depthwise weight {ws:?} / bias {bs:?} vs input {xs:?}"))?;
        let r = k / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); bn * c * s1 * s2];
        for bi in 0..bn {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * s1 * s2..][..s1 * s2];
                let dst = &mut out[(bi * c + ci) * s1 * s2..][..s1 * s2];
                for dy in 0..k {
                    let (y0, y1) = tap_range(dy, r, s1);
                    for dx in 0..k {
                        let (x0, x1) = tap_range(dx, r, s2);
                        if x0 == x1 {
                            continue;
                        }
                        let wv = wd[(ci * k + dy) * k + dx];
                        for y in y0..y1 {
                            let src = &plane[(y + dy - r) * s2 + x0 + dx - r..][..x1 - x0];
                            let d = &mut dst[y * s2 + x0..][..x1 - x0];
                            for (o, &s) in d.iter_mut().zip(src) {
                                *o += wv * s;
                            }
                        }
                    }
                }
                for o in dst.iter_mut() {
                    *o += bd[ci];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, w, b, kernel: k }))
    }

    /// Affine map across the channel axis: `x: B x Cin [x positions]`,
    /// `w: Cout x Cin`, `b: Cout`.
    pub fn channel_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (bn, cin, p) = bcp(xs)?;
        check(ws.len() == 2 && ws[1] == cin && bs == [ws[0]], || {
            format!("channel_affine weight {ws:?} / bias {bs:?} vs input {xs:?}")
        })?;
        let cout = ws[0];
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); bn * cout * p];
        for bi in 0..bn {
            let xb = &xd[bi * cin * p..][..cin * p];
            for o in 0..cout {
                let dst = &mut out[(bi * cout + o) * p..][..p];
                for i in 0..cin {
                    let wv = wd[o * cin + i];
                    for (d, &s) in dst.iter_mut().zip(&xb[i * p..(i + 1) * p]) {
                        *d += wv * s;
                    }
                }
                for d in dst.iter_mut() {
                    *d += bd[o];
                }
            }
        }
        let mut shape = xs.to_vec();
        shape[1] = cout;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ChannelAffine { x, w, b }))
    }

    /// Batch normalization over all axes but the channel axis.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (bn, c, p) = bcp(&xs)?;
        check(self.value(gamma).shape() == [c] && self.value(beta).shape() == [c] && stats.channels() == c, || {
            format!("batchnorm parameters do not match {c} channels")
        })?;
        let count = bn * p;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match mode {
            NormMode::Train => {
                if count < 2 {
                    return Err(invalid(format!("batchnorm in train mode needs >= 2 values per channel, got {count}")));
                }
                let n = T::from_usize(count).unwrap();
                for ci in 0..c {
                    let mut s = T::zero();
                    for bi in 0..bn {
                        for &v in &xd[(bi * c + ci) * p..][..p] {
                            s += v;
                        }
                    }
                    mean[ci] = s / n;
                    let mut sq = T::zero();
                    for bi in 0..bn {
                        for &v in &xd[(bi * c + ci) * p..][..p] {
                            let d = v - mean[ci];
                            sq += d * d;
                        }
                    }
                    var[ci] = sq / n;
                }
                let mom = stats.momentum;
                let unbias = n / (n - T::one());
                let rm = stats.running_mean.data_mut();
                for ci in 0..c {
                    rm[ci] = (T::one() - mom) * rm[ci] + mom * mean[ci];
                }
                let rv = stats.running_var.data_mut();
                for ci in 0..c {
                    rv[ci] = (T::one() - mom) * rv[ci] + mom * var[ci] * unbias;
                }
            }
            NormMode::Eval => {
                mean.copy_from_slice(stats.running_mean.data());
                var.copy_from_slice(stats.running_var.data());
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..bn {
            for ci in 0..c {
                let base = (bi * c + ci) * p;
                for q in base..base + p {
                    xhat[q] = (xd[q] - mean[ci]) * inv_std[ci];
                    out[q] = gd[ci] * xhat[q] + bd[ci];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let batch_stats = mode == NormMode::Train;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }))
    }

    /// `x * Phi(x)` with the exact normal CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v.normal_cdf());
        self.push(value, Op::Gelu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check(av.shape() == bv.shape(), || format!("add shapes {:?} and {:?}", av.shape(), bv.shape()))?;
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `sum_i weights[i] * x[i]`, for projecting tensor outputs to a scalar.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        check(weights.len() == self.value(x).numel(), || "dot weight length mismatch".to_string())?;
        let s = self.value(x).data().iter().zip(&weights).fold(T::zero(), |a, (&v, &w)| a + w * v);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }))
    }

    /// Mean over the trailing spatial axes: `B x C x ... -> B x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (bn, c, p) = bcp(self.value(x).shape())?;
        let pn = T::from_usize(p).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(p)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / pn)
            .collect();
        let value = Tensor::new(&[bn, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }))
    }

    /// Mixes the flattened (row-major) token grid with `u`:
    /// output token `t` is `sum_s u[t, s] * token s`, identically per channel.
    pub fn token_mix(&mut self, x: Var, u: Var) -> Result<Var> {
        let (xs, us) = (self.value(x).shape(), self.value(u).shape());
        let (bn, c, n) = bcp(xs)?;
        check(us == [n, n], || format!("adaptive matrix {us:?} does not match {n} tokens of input {xs:?}"))?;
        let (xd, ud) = (self.value(x).data(), self.value(u).data());
        let mut out = vec![T::zero(); bn * c * n];
        for (row, dst) in xd.chunks(n).zip(out.chunks_mut(n)) {
            for (t, d) in dst.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (&uv, &xv) in ud[t * n..(t + 1) * n].iter().zip(row) {
                    acc += uv * xv;
                }
                *d = acc;
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::TokenMix { x, u }))
    }

    /// Mean cross-entropy of `logits: B x K` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape();
        check(ls.len() == 2 && ls[0] == labels.len(), || {
            format!("logits {ls:?} vs {} labels", labels.len())
        })?;
        let k = ls[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); ld.len()];
        let mut total = T::zero();
        for (i, (row, prow)) in ld.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut z = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            total += m + z.ln() - row[labels[i]];
        }
        let loss = total / T::from_usize(labels.len().max(1)).unwrap();
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }))
    }

    /// `||U^T U - I||_F^2 + ||min(U, 0)||_F^2`; zero exactly on permutation matrices.
    pub fn penalty_lu(&mut self, u: Var) -> Result<Var> {
        let us = self.value(u).shape();
        check(us.len() == 2 && us[0] == us[1], || format!("penalty needs a square matrix, got {us:?}"))?;
        let n = us[0];
        let ud = self.value(u).data();
        let mut g = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = T::zero();
                for r in 0..n {
                    acc += ud[r * n + i] * ud[r * n + j];
                }
                g[i * n + j] = if i == j { acc - T::one() } else { acc };
            }
        }
        let ortho = g.iter().fold(T::zero(), |a, &v| a + v * v);
        let neg = ud.iter().fold(T::zero(), |a, &v| {
            let m = v.min(T::zero());
            a + m * m
        });
        Ok(self.push(Tensor::scalar(ortho + neg), Op::PenaltyLu { u, gram_minus_eye: g }))
    }
}

/// Output rows `y` whose tap at offset `d` (kernel radius `r`) lands inside `0..len`.
#[inline]
fn tap_range(d: usize, r: usize, len: usize) -> (usize, usize) {
    let lo = r.saturating_sub(d).min(len);
    let hi = (len + r).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

pub(crate) fn backward_node<T: Scalar>(tape: &Tape<T>, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| tape.value(v);
    let want = |v: Var| tape.needs_grad(v);
    match &node.op {
        Op::Leaf => {}
        Op::PatchEmbed { x, w, b, patch } => {
            let patch = *patch;
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let (bn, c, hgt, wid) = (xs[0], xs[1], xs[2], xs[3]);
            let h = ws[0];
            let (gu, gv) = (hgt / patch, wid / patch);
            let (xd, wd) = (val(*x).data(), val(*w).data());
            let gat = |bi: usize, o: usize, u: usize, v: usize| g[((bi * h + o) * gu + u) * gv + v];
            if want(*b) {
                accumulate(grads, *b, h, |db| {
                    for bi in 0..bn {
                        for o in 0..h {
                            for &gvl in &g[(bi * h + o) * gu * gv..][..gu * gv] {
                                db[o] += gvl;
                            }
                        }
                    }
                });
            }
            if want(*w) {
                accumulate(grads, *w, wd.len(), |dw| {
                    for bi in 0..bn {
                        for o in 0..h {
                            for u in 0..gu {
                                for v in 0..gv {
                                    let gy = gat(bi, o, u, v);
                                    for ci in 0..c {
                                        for i in 0..patch {
                                            let row = &xd[((bi * c + ci) * hgt + u * patch + i) * wid + v * patch..]
                                                [..patch];
                                            let dst = &mut dw[((o * c + ci) * patch + i) * patch..][..patch];
                                            for (d, &s) in dst.iter_mut().zip(row) {
                                                *d += gy * s;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if want(*x) {
                accumulate(grads, *x, xd.len(), |dx| {
                    for bi in 0..bn {
                        for o in 0..h {
                            for u in 0..gu {
                                for v in 0..gv {
                                    let gy = gat(bi, o, u, v);
                                    for ci in 0..c {
                                        for i in 0..patch {
                                            let wrow = &wd[((o * c + ci) * patch + i) * patch..][..patch];
                                            let dst = &mut dx[((bi * c + ci) * hgt + u * patch + i) * wid + v * patch..]
                                                [..patch];
                                            for (d, &wv) in dst.iter_mut().zip(wrow) {
                                                *d += gy * wv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::DepthwiseConv { x, w, b, kernel } => {
            let k = *kernel;
            let r = k / 2;
            let xs = val(*x).shape();
            let (bn, c, s1, s2) = (xs[0], xs[1], xs[2], xs[3]);
            let (xd, wd) = (val(*x).data(), val(*w).data());
            if want(*b) {
                accumulate(grads, *b, c, |db| {
                    for (pi, plane) in g.chunks(s1 * s2).enumerate() {
                        for &v in plane {
                            db[pi % c] += v;
                        }
                    }
                });
            }
            if want(*w) {
                accumulate(grads, *w, wd.len(), |dw| {
                    for bi in 0..bn {
                        for ci in 0..c {
                            let plane = &xd[(bi * c + ci) * s1 * s2..][..s1 * s2];
                            let gp = &g[(bi * c + ci) * s1 * s2..][..s1 * s2];
                            for dy in 0..k {
                                let (y0, y1) = tap_range(dy, r, s1);
                                for dx in 0..k {
                                    let (x0, x1) = tap_range(dx, r, s2);
                                    if x0 == x1 {
                                        continue;
                                    }
                                    let mut acc = T::zero();
                                    for y in y0..y1 {
                                        let src = &plane[(y + dy - r) * s2 + x0 + dx - r..][..x1 - x0];
                                        let gr = &gp[y * s2 + x0..][..x1 - x0];
                                        for (&a, &bv) in src.iter().zip(gr) {
                                            acc += a * bv;
                                        }
                                    }
                                    dw[(ci * k + dy) * k + dx] += acc;
                                }
                            }
                        }
                    }
                });
            }
            if want(*x) {
                accumulate(grads, *x, xd.len(), |dx_all| {
                    for bi in 0..bn {
                        for ci in 0..c {
                            let gp = &g[(bi * c + ci) * s1 * s2..][..s1 * s2];
                            let dst = &mut dx_all[(bi * c + ci) * s1 * s2..][..s1 * s2];
                            for dy in 0..k {
                                let (y0, y1) = tap_range(dy, r, s1);
                                for dx in 0..k {
                                    let (x0, x1) = tap_range(dx, r, s2);
                                    if x0 == x1 {
                                        continue;
                                    }
                                    let wv = wd[(ci * k + dy) * k + dx];
                                    for y in y0..y1 {
                                        let d = &mut dst[(y + dy - r) * s2 + x0 + dx - r..][..x1 - x0];
                                        for (o, &gv) in d.iter_mut().zip(&gp[y * s2 + x0..][..x1 - x0]) {
                                            *o += wv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::ChannelAffine { x, w, b } => {
            let (bn, cin, p) = bcp(val(*x).shape()).expect("recorded shape");
            let cout = val(*w).shape()[0];
            let (xd, wd) = (val(*x).data(), val(*w).data());
            if want(*b) {
                accumulate(grads, *b, cout, |db| {
                    for (ri, row) in g.chunks(p).enumerate() {
                        for &v in row {
                            db[ri % cout] += v;
                        }
                    }
                });
            }
            if want(*w) {
                accumulate(grads, *w, wd.len(), |dw| {
                    for bi in 0..bn {
                        for o in 0..cout {
                            let gr = &g[(bi * cout + o) * p..][..p];
                            for i in 0..cin {
                                let xr = &xd[(bi * cin + i) * p..][..p];
                                let mut acc = T::zero();
                                for (&a, &bv) in gr.iter().zip(xr) {
                                    acc += a * bv;
                                }
                                dw[o * cin + i] += acc;
                            }
                        }
                    }
                });
            }
            if want(*x) {
                accumulate(grads, *x, xd.len(), |dx| {
                    for bi in 0..bn {
                        for o in 0..cout {
                            let gr = &g[(bi * cout + o) * p..][..p];
                            for i in 0..cin {
                                let wv = wd[o * cin + i];
                                for (d, &gv) in dx[(bi * cin + i) * p..][..p].iter_mut().zip(gr) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
            let (bn, c, p) = bcp(val(*x).shape()).expect("recorded shape");
            let gd = val(*gamma).data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for bi in 0..bn {
                for ci in 0..c {
                    let base = (bi * c + ci) * p;
                    for q in base..base + p {
                        sum_g[ci] += g[q];
                        sum_gx[ci] += g[q] * xhat[q];
                    }
                }
            }
            if want(*beta) {
                accumulate(grads, *beta, c, |d| d.iter_mut().zip(&sum_g).for_each(|(a, &s)| *a += s));
            }
            if want(*gamma) {
                accumulate(grads, *gamma, c, |d| d.iter_mut().zip(&sum_gx).for_each(|(a, &s)| *a += s));
            }
            if want(*x) {
                let n = T::from_usize(bn * p).unwrap();
                accumulate(grads, *x, g.len(), |dx| {
                    for bi in 0..bn {
                        for ci in 0..c {
                            let base = (bi * c + ci) * p;
                            let scale = gd[ci] * inv_std[ci];
                            for q in base..base + p {
                                dx[q] += if *batch_stats {
                                    scale / n * (n * g[q] - sum_g[ci] - xhat[q] * sum_gx[ci])
                                } else {
                                    scale * g[q]
                                };
                            }
                        }
                    }
                });
            }
        }
        Op::Gelu { x } => {
            let xd = val(*x).data();
            accumulate(grads, *x, xd.len(), |dx| {
                for ((d, &v), &gv) in dx.iter_mut().zip(xd).zip(g) {
                    *d += gv * (v.normal_cdf() + v * v.normal_pdf());
                }
            });
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if want(v) {
                    accumulate(grads, v, g.len(), |d| d.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv));
                }
            }
        }
        Op::Scale { x, factor } => {
            accumulate(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * *factor));
        }
        Op::Sum { x } => {
            let n = val(*x).numel();
            accumulate(grads, *x, n, |d| d.iter_mut().for_each(|o| *o += g[0]));
        }
        Op::Dot { x, weights } => {
            accumulate(grads, *x, weights.len(), |d| {
                d.iter_mut().zip(weights).for_each(|(o, &w)| *o += g[0] * w)
            });
        }
        Op::GlobalAvgPool { x } => {
            let (_, _, p) = bcp(val(*x).shape()).expect("recorded shape");
            let pn = T::from_usize(p).unwrap();
            accumulate(grads, *x, val(*x).numel(), |d| {
                for (plane, &gv) in d.chunks_mut(p).zip(g) {
                    let share = gv / pn;
                    plane.iter_mut().for_each(|o| *o += share);
                }
            });
        }
        Op::TokenMix { x, u } => {
            let n = val(*u).shape()[0];
            let (xd, ud) = (val(*x).data(), val(*u).data());
            if want(*u) {
                accumulate(grads, *u, ud.len(), |du| {
                    for (row, grow) in xd.chunks(n).zip(g.chunks(n)) {
                        for (t, &gt) in grow.iter().enumerate() {
                            for (d, &xv) in du[t * n..(t + 1) * n].iter_mut().zip(row) {
                                *d += gt * xv;
                            }
                        }
                    }
                });
            }
            if want(*x) {
                accumulate(grads, *x, xd.len(), |dx| {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        for (t, &gt) in grow.iter().enumerate() {
                            for (d, &uv) in drow.iter_mut().zip(&ud[t * n..(t + 1) * n]) {
                                *d += gt * uv;
                            }
                        }
                    }
                });
            }
        }
        Op::SoftmaxXent { logits, labels, probs } => {
            let k = val(*logits).shape()[1];
            let scale = g[0] / T::from_usize(labels.len().max(1)).unwrap();
            accumulate(grads, *logits, probs.len(), |d| {
                for (i, (drow, prow)) in d.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                    for (j, (o, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let target = if j == labels[i] { T::one() } else { T::zero() };
                        *o += scale * (p - target);
                    }
                }
            });
        }
        Op::PenaltyLu { u, gram_minus_eye } => {
            let n = val(*u).shape()[0];
            let ud = val(*u).data();
            let two = T::from_f64_lossy(2.0);
            let four = T::from_f64_lossy(4.0);
            accumulate(grads, *u, ud.len(), |du| {
                for r in 0..n {
                    for j in 0..n {
                        let mut acc = T::zero();
                        for i in 0..n {
                            acc += ud[r * n + i] * gram_minus_eye[i * n + j];
                        }
                        du[r * n + j] += g[0] * (four * acc + two * ud[r * n + j].min(T::zero()));
                    }
                }
            });
        }
    }
}
