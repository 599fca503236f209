use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tape::{Activation, Op, Tape, Var};
use crate::numerics::tensor::{numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// ── dense kernels ──────────────────────────────────────────────────────────

/// c[m,n] = a[m,k] . b[k,n]
fn mat_mul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// c[k,n] = a[m,k]^T . d[m,n]
fn mat_mul_ta<F: Real>(a: &[F], d: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let drow = &d[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * drow[j];
            }
        }
    }
    out
}

/// c[m,k] = d[m,n] . b[k,n]^T
fn mat_mul_tb<F: Real>(d: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc = acc + drow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

fn softmax_line<F: Real>(line: &mut [F]) {
    let mut mx = line[0];
    for &v in line.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for v in line.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in line.iter_mut() {
        *v = *v / sum;
    }
}

fn gelu_val<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (F::one() + t)
}

fn gelu_deriv<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Number of pooling windows covering a length-`t` sequence. The final
/// window is clamped to the sequence end so every position is covered and a
/// one-token sequence still yields one window.
pub fn pool_output_len(t: usize, width: usize, stride: usize) -> usize {
    if t <= width {
        1
    } else {
        (t - width).div_ceil(stride) + 1
    }
}

fn rank3<F: Real>(tape: &Tape<F>, v: Var, what: &str) -> Result<(usize, usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 3 {
        return Err(Error::Shape(format!("{what}: expected rank 3, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn check_mask_len(mask: &[bool], b: usize, t: usize, what: &str) -> Result<()> {
    if mask.len() != b * t {
        return Err(Error::Shape(format!(
            "{what}: mask has {} entries for shape [{b}, {t}, ..]",
            mask.len()
        )));
    }
    Ok(())
}

// ── forward builders ───────────────────────────────────────────────────────

impl<F: Real> Tape<F> {
    fn emit(&mut self, t: Tensor<F>, tracked: bool, op: impl FnOnce(Var) -> Op<F>) -> Var {
        let out = self.push(t, tracked);
        if tracked {
            self.record(op(out));
        }
        out
    }

    pub(crate) fn record(&mut self, op: Op<F>) {
        self.ops.push(op);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<F> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(t, tracked, |out| Op::Add { a, b, out }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let data: Vec<F> = self.data(a).iter().map(|x| *x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a);
        Ok(self.emit(t, tracked, |out| Op::Scale { a, c, out }))
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`, reshaped to `prefix ++ [E]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(Error::Shape(format!("gather: table must be rank 2, got {ts:?}")));
        }
        let (rows, width) = (ts[0], ts[1]);
        if numel(prefix) != ids.len() {
            return Err(Error::Shape(format!(
                "gather: {} ids do not fill prefix {prefix:?}",
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        {
            let tdata = self.data(table);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Input(format!(
                        "gather: id {id} out of range for table with {rows} rows"
                    )));
                }
                data.extend_from_slice(&tdata[id * width..(id + 1) * width]);
            }
        }
        let mut shape = prefix.to_vec();
        shape.push(width);
        let t = Tensor::new(shape, data)?;
        let tracked = self.tracked(table);
        let ids = ids.to_vec();
        Ok(self.emit(t, tracked, |out| Op::Gather { table, ids, out }))
    }

    /// Affine map over the last axis: `out[.., j] = sum_i x[.., i] w[i, j] (+ b[j])`.
    /// Leading axes are folded into rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.is_empty() || ws.len() != 2 {
            return Err(Error::Shape(format!("linear: x {xs:?} w {ws:?}")));
        }
        let nin = *xs.last().unwrap();
        let (win, nout) = (ws[0], ws[1]);
        if win != nin {
            return Err(Error::Shape(format!(
                "linear: input width {nin} does not match weight {ws:?}"
            )));
        }
        if let Some(bv) = b {
            if self.shape(bv) != [nout] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match output width {nout}",
                    self.shape(bv)
                )));
            }
        }
        let rows = numel(&xs) / nin.max(1);
        let mut data = mat_mul(self.data(x), self.data(w), rows, nin, nout);
        if let Some(bv) = b {
            let bias = self.data(bv);
            for r in 0..rows {
                for j in 0..nout {
                    data[r * nout + j] = data[r * nout + j] + bias[j];
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = nout;
        let t = Tensor::new(shape, data)?;
        let tracked = self.tracked(x)
            || self.tracked(w)
            || b.map(|bv| self.tracked(bv)).unwrap_or(false);
        Ok(self.emit(t, tracked, |out| Op::Linear { x, w, b, out }))
    }

    /// Strict 2-D product `a[m,k] . b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::Shape(format!("matmul: {ash:?} x {bsh:?}")));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = mat_mul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(t, tracked, |out| Op::Matmul { a, b, out }))
    }

    /// `out[g] = a[g] . b[g]` for `a [G,m,k]`, `b [G,k,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g1, m, k) = rank3(self, a, "batch_matmul lhs")?;
        let (g2, k2, n) = rank3(self, b, "batch_matmul rhs")?;
        if g1 != g2 || k != k2 {
            return Err(Error::Shape(format!(
                "batch_matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = Vec::with_capacity(g1 * m * n);
        for g in 0..g1 {
            let ab = &self.data(a)[g * m * k..(g + 1) * m * k];
            let bb = &self.data(b)[g * k * n..(g + 1) * k * n];
            data.extend(mat_mul(ab, bb, m, k, n));
        }
        let t = Tensor::new(vec![g1, m, n], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(t, tracked, |out| Op::BatchMatmul { a, b, out }))
    }

    /// `out[g] = a[g] . b[g]^T` for `a [G,m,k]`, `b [G,n,k]`.
    pub fn batch_matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g1, m, k) = rank3(self, a, "batch_matmul_tb lhs")?;
        let (g2, n, k2) = rank3(self, b, "batch_matmul_tb rhs")?;
        if g1 != g2 || k != k2 {
            return Err(Error::Shape(format!(
                "batch_matmul_tb: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = Vec::with_capacity(g1 * m * n);
        for g in 0..g1 {
            let ab = &self.data(a)[g * m * k..(g + 1) * m * k];
            let bb = &self.data(b)[g * n * k..(g + 1) * n * k];
            data.extend(mat_mul_tb(ab, bb, m, n, k));
        }
        let t = Tensor::new(vec![g1, m, n], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(t, tracked, |out| Op::BatchMatmulTb { a, b, out }))
    }

    /// `[B, T, H] -> [B*heads, T, H/heads]`, head-major within each batch row.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (bsz, tlen, h) = rank3(self, x, "split_heads")?;
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!(
                "split_heads: width {h} not divisible by {heads} heads"
            )));
        }
        let dh = h / heads;
        let xd = self.data(x);
        let mut data = vec![F::zero(); xd.len()];
        for b in 0..bsz {
            for a in 0..heads {
                for t in 0..tlen {
                    let src = (b * tlen + t) * h + a * dh;
                    let dst = ((b * heads + a) * tlen + t) * dh;
                    data[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![bsz * heads, tlen, dh], data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::SplitHeads { x, heads, out }))
    }

    /// Inverse of [`Tape::split_heads`]: `[B*heads, T, dh] -> [B, T, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (g, tlen, dh) = rank3(self, x, "merge_heads")?;
        if heads == 0 || g % heads != 0 {
            return Err(Error::Shape(format!(
                "merge_heads: {g} groups not divisible by {heads} heads"
            )));
        }
        let bsz = g / heads;
        let h = heads * dh;
        let xd = self.data(x);
        let mut data = vec![F::zero(); xd.len()];
        for b in 0..bsz {
            for a in 0..heads {
                for t in 0..tlen {
                    let src = ((b * heads + a) * tlen + t) * dh;
                    let dst = (b * tlen + t) * h + a * dh;
                    data[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![bsz, tlen, h], data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::MergeHeads { x, heads, out }))
    }

    /// Stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("softmax: axis {axis} of {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = self.data(x);
        let mut data = xd.to_vec();
        let mut line = vec![F::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for t in 0..n {
                    line[t] = data[o * n * inner + t * inner + i];
                }
                softmax_line(&mut line);
                for t in 0..n {
                    data[o * n * inner + t * inner + i] = line[t];
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::Softmax { x, axis, out }))
    }

    /// Softmax over the key axis of attention logits `[B*heads, Tq, Tk]`,
    /// with masked keys excluded (probability exactly zero). `mask` is the
    /// per-batch validity row `[B*Tk]`, true = attendable.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], heads: usize) -> Result<Var> {
        let (g, tq, tk) = rank3(self, x, "masked_softmax")?;
        if heads == 0 || g % heads != 0 {
            return Err(Error::Shape(format!(
                "masked_softmax: {g} groups not divisible by {heads} heads"
            )));
        }
        let bsz = g / heads;
        check_mask_len(mask, bsz, tk, "masked_softmax")?;
        for b in 0..bsz {
            if !mask[b * tk..(b + 1) * tk].iter().any(|&m| m) {
                return Err(Error::Degenerate(format!(
                    "masked_softmax: batch row {b} has no attendable positions"
                )));
            }
        }
        let xd = self.data(x);
        let mut data = vec![F::zero(); xd.len()];
        for gi in 0..g {
            let row_mask = &mask[(gi / heads) * tk..(gi / heads + 1) * tk];
            for q in 0..tq {
                let base = (gi * tq + q) * tk;
                let mut mx = F::neg_infinity();
                for t in 0..tk {
                    if row_mask[t] && xd[base + t] > mx {
                        mx = xd[base + t];
                    }
                }
                let mut sum = F::zero();
                for t in 0..tk {
                    if row_mask[t] {
                        let e = (xd[base + t] - mx).exp();
                        data[base + t] = e;
                        sum = sum + e;
                    }
                }
                for t in 0..tk {
                    data[base + t] = data[base + t] / sum;
                }
            }
        }
        let t = Tensor::new(vec![g, tq, tk], data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::MaskedSoftmax { x, out }))
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (population variance, epsilon `1e-12`), then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or_else(|| {
            Error::Shape("layer_norm: input must have at least one axis".into())
        })?;
        if h == 0 || self.shape(gamma) != [h] || self.shape(beta) != [h] {
            return Err(Error::Shape(format!(
                "layer_norm: x {shape:?} gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = numel(&shape) / h;
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_h = F::one() / F::from_usize(h);
        let mut data = vec![F::zero(); rows * h];
        {
            let xd = self.data(x);
            let gd = self.data(gamma);
            let bd = self.data(beta);
            for r in 0..rows {
                let row = &xd[r * h..(r + 1) * h];
                let mut mu = F::zero();
                for &v in row {
                    mu = mu + v;
                }
                mu = mu * inv_h;
                let mut var = F::zero();
                for &v in row {
                    let c = v - mu;
                    var = var + c * c;
                }
                var = var * inv_h;
                let rstd = F::one() / (var + eps).sqrt();
                for j in 0..h {
                    data[r * h + j] = gd[j] * (row[j] - mu) * rstd + bd[j];
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.emit(t, tracked, |out| Op::LayerNorm { x, gamma, beta, out }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let data: Vec<F> = match kind {
            Activation::Tanh => self.data(x).iter().map(|v| v.tanh()).collect(),
            Activation::Gelu => self.data(x).iter().map(|v| gelu_val(*v)).collect(),
        };
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::Activation { x, kind, out }))
    }

    /// Same-padded 1-D convolution over the time axis: `x [B,T,C_in]`,
    /// `kernel [K,C_in,C_out]` with odd `K`, `bias [C_out]`. Positions past
    /// either end contribute zero.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (bsz, tlen, cin) = rank3(self, x, "conv1d input")?;
        let (kw, kci, cout) = rank3(self, kernel, "conv1d kernel")?;
        if kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv1d: kernel width {kw} must be odd for symmetric padding"
            )));
        }
        if kci != cin || self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "conv1d: x {:?} kernel {:?} bias {:?}",
                self.shape(x),
                self.shape(kernel),
                self.shape(bias)
            )));
        }
        let half = kw / 2;
        let mut data = vec![F::zero(); bsz * tlen * cout];
        {
            let xd = self.data(x);
            let kd = self.data(kernel);
            let bd = self.data(bias);
            for b in 0..bsz {
                for t in 0..tlen {
                    let obase = (b * tlen + t) * cout;
                    data[obase..obase + cout].copy_from_slice(bd);
                    for dt in 0..kw {
                        let ti = t as isize + dt as isize - half as isize;
                        if ti < 0 || ti >= tlen as isize {
                            continue;
                        }
                        let xbase = (b * tlen + ti as usize) * cin;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            if xv == F::zero() {
                                continue;
                            }
                            let kbase = (dt * cin + ci) * cout;
                            for co in 0..cout {
                                data[obase + co] = data[obase + co] + xv * kd[kbase + co];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, tlen, cout], data)?;
        let tracked = self.tracked(x) || self.tracked(kernel) || self.tracked(bias);
        Ok(self.emit(t, tracked, |out| Op::Conv1d { x, kernel, bias, out }))
    }

    /// Masked max pooling over time. Windows start every `stride` positions;
    /// the last window is clamped to the sequence end so all positions are
    /// covered (a one-token sequence yields one window). Masked positions
    /// never win; a window with no valid position emits 0 and is marked
    /// invalid in the returned output mask `[B * pool_output_len(T)]`.
    pub fn max_pool1d(
        &mut self,
        x: Var,
        width: usize,
        stride: usize,
        mask: &[bool],
    ) -> Result<(Var, Vec<bool>)> {
        let (bsz, tlen, ch) = rank3(self, x, "max_pool1d")?;
        if width == 0 || stride == 0 || tlen == 0 {
            return Err(Error::Shape(format!(
                "max_pool1d: width {width}, stride {stride}, length {tlen} must all be positive"
            )));
        }
        check_mask_len(mask, bsz, tlen, "max_pool1d")?;
        let nout = pool_output_len(tlen, width, stride);
        let mut data = vec![F::zero(); bsz * nout * ch];
        let mut argmax = vec![None; bsz * nout * ch];
        let mut out_mask = vec![false; bsz * nout];
        {
            let xd = self.data(x);
            for b in 0..bsz {
                for o in 0..nout {
                    let start = o * stride;
                    let end = (start + width).min(tlen);
                    let valid = (start..end).any(|t| mask[b * tlen + t]);
                    out_mask[b * nout + o] = valid;
                    if !valid {
                        continue;
                    }
                    for c in 0..ch {
                        let mut best: Option<(F, usize)> = None;
                        for t in start..end {
                            if !mask[b * tlen + t] {
                                continue;
                            }
                            let v = xd[(b * tlen + t) * ch + c];
                            if best.map(|(bv, _)| v > bv).unwrap_or(true) {
                                best = Some((v, (b * tlen + t) * ch + c));
                            }
                        }
                        let (v, idx) = best.unwrap();
                        data[(b * nout + o) * ch + c] = v;
                        argmax[(b * nout + o) * ch + c] = Some(idx);
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, nout, ch], data)?;
        let tracked = self.tracked(x);
        let out = self.emit(t, tracked, |out| Op::MaxPool1d { x, argmax, out });
        Ok((out, out_mask))
    }

    /// Zeroes masked positions: `out[b,t,:] = mask[b,t] ? x[b,t,:] : 0`.
    pub fn zero_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (bsz, tlen, ch) = rank3(self, x, "zero_masked")?;
        check_mask_len(mask, bsz, tlen, "zero_masked")?;
        let xd = self.data(x);
        let mut data = vec![F::zero(); xd.len()];
        for bt in 0..bsz * tlen {
            if mask[bt] {
                data[bt * ch..(bt + 1) * ch].copy_from_slice(&xd[bt * ch..(bt + 1) * ch]);
            }
        }
        let t = Tensor::new(vec![bsz, tlen, ch], data)?;
        let tracked = self.tracked(x);
        let mask = mask.to_vec();
        Ok(self.emit(t, tracked, |out| Op::ZeroMasked { x, mask, out }))
    }

    /// Mean over valid time steps: `[B,T,H] -> [B,H]`. A row with no valid
    /// position is degenerate.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (bsz, tlen, h) = rank3(self, x, "masked_mean")?;
        check_mask_len(mask, bsz, tlen, "masked_mean")?;
        let mut data = vec![F::zero(); bsz * h];
        {
            let xd = self.data(x);
            for b in 0..bsz {
                let count = (0..tlen).filter(|&t| mask[b * tlen + t]).count();
                if count == 0 {
                    return Err(Error::Degenerate(format!(
                        "masked_mean: batch row {b} has no valid positions"
                    )));
                }
                let inv = F::one() / F::from_usize(count);
                for t in 0..tlen {
                    if !mask[b * tlen + t] {
                        continue;
                    }
                    for j in 0..h {
                        data[b * h + j] = data[b * h + j] + xd[(b * tlen + t) * h + j] * inv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, h], data)?;
        let tracked = self.tracked(x);
        let mask = mask.to_vec();
        Ok(self.emit(t, tracked, |out| Op::MaskedMean { x, mask, out }))
    }

    /// Per-channel max over valid time steps: `[B,T,H] -> [B,H]`. Ties go to
    /// the earliest position.
    pub fn masked_max(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (bsz, tlen, h) = rank3(self, x, "masked_max")?;
        check_mask_len(mask, bsz, tlen, "masked_max")?;
        let mut data = vec![F::zero(); bsz * h];
        let mut argmax = vec![0usize; bsz * h];
        {
            let xd = self.data(x);
            for b in 0..bsz {
                if !mask[b * tlen..(b + 1) * tlen].iter().any(|&m| m) {
                    return Err(Error::Degenerate(format!(
                        "masked_max: batch row {b} has no valid positions"
                    )));
                }
                for j in 0..h {
                    let mut best: Option<(F, usize)> = None;
                    for t in 0..tlen {
                        if !mask[b * tlen + t] {
                            continue;
                        }
                        let v = xd[(b * tlen + t) * h + j];
                        if best.map(|(bv, _)| v > bv).unwrap_or(true) {
                            best = Some((v, (b * tlen + t) * h + j));
                        }
                    }
                    let (v, idx) = best.unwrap();
                    data[b * h + j] = v;
                    argmax[b * h + j] = idx;
                }
            }
        }
        let t = Tensor::new(vec![bsz, h], data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::MaskedMax { x, argmax, out }))
    }

    /// First time step of each row: `[B,T,H] -> [B,H]`.
    pub fn take_first(&mut self, x: Var) -> Result<Var> {
        let (bsz, tlen, h) = rank3(self, x, "take_first")?;
        if tlen == 0 {
            return Err(Error::Shape("take_first: empty time axis".into()));
        }
        let xd = self.data(x);
        let mut data = vec![F::zero(); bsz * h];
        for b in 0..bsz {
            data[b * h..(b + 1) * h].copy_from_slice(&xd[b * tlen * h..b * tlen * h + h]);
        }
        let t = Tensor::new(vec![bsz, h], data)?;
        let tracked = self.tracked(x);
        Ok(self.emit(t, tracked, |out| Op::TakeFirst { x, out }))
    }

    /// Column-wise concatenation of rank-2 tensors sharing a batch axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let bsz = {
            let s = self.shape(parts[0]);
            if s.len() != 2 {
                return Err(Error::Shape(format!("concat_cols: expected rank 2, got {s:?}")));
            }
            s[0]
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != bsz {
                return Err(Error::Shape(format!(
                    "concat_cols: part {s:?} does not match batch {bsz}"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![F::zero(); bsz * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for b in 0..bsz {
                data[b * total + off..b * total + off + w]
                    .copy_from_slice(&pd[b * w..(b + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![bsz, total], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        let parts = parts.to_vec();
        Ok(self.emit(t, tracked, |out| Op::ConcatCols { parts, out }))
    }

    /// Elementwise `|a - b|`. The subgradient at zero is taken as zero.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "abs_diff: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<F> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| (*x - *y).abs()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(t, tracked, |out| Op::AbsDiff { a, b, out }))
    }

    /// Row-wise cosine similarity of `[B,H]` pairs, unclamped. Zero-norm rows
    /// are degenerate.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || self.shape(b) != s {
            return Err(Error::Shape(format!(
                "cosine_rows: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (bsz, h) = (s[0], s[1]);
        let mut data = vec![F::zero(); bsz];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for r in 0..bsz {
                let (mut dot, mut na, mut nb) = (F::zero(), F::zero(), F::zero());
                for j in 0..h {
                    let (x, y) = (ad[r * h + j], bd[r * h + j]);
                    dot = dot + x * y;
                    na = na + x * x;
                    nb = nb + y * y;
                }
                if na == F::zero() || nb == F::zero() {
                    return Err(Error::Degenerate(format!(
                        "cosine_rows: row {r} has zero norm"
                    )));
                }
                data[r] = dot / (na.sqrt() * nb.sqrt());
            }
        }
        let t = Tensor::new(vec![bsz], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.emit(t, tracked, |out| Op::CosineRows { a, b, out }))
    }

    /// Mean squared error against fixed targets, reduced to a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: &[F]) -> Result<Var> {
        let n = self.value(pred).numel();
        if n == 0 || target.len() != n {
            return Err(Error::Shape(format!(
                "mse_loss: {} predictions vs {} targets",
                n,
                target.len()
            )));
        }
        let mut acc = F::zero();
        for (p, t) in self.data(pred).iter().zip(target) {
            let d = *p - *t;
            acc = acc + d * d;
        }
        let t = Tensor::scalar(acc / F::from_usize(n));
        let tracked = self.tracked(pred);
        let target = target.to_vec();
        Ok(self.emit(t, tracked, |out| Op::MseLoss { pred, target, out }))
    }

    /// Mean softmax cross-entropy of `logits [B,C]` against class indices,
    /// computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] == 0 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (bsz, nc) = (s[0], s[1]);
        let mut acc = F::zero();
        {
            let zd = self.data(logits);
            for (b, &y) in labels.iter().enumerate() {
                if y >= nc {
                    return Err(Error::Input(format!(
                        "cross_entropy: label {y} out of range for {nc} classes"
                    )));
                }
                let row = &zd[b * nc..(b + 1) * nc];
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = F::zero();
                for &v in row {
                    sum = sum + (v - mx).exp();
                }
                acc = acc + mx + sum.ln() - row[y];
            }
        }
        let t = Tensor::scalar(acc / F::from_usize(bsz));
        let tracked = self.tracked(logits);
        let labels = labels.to_vec();
        Ok(self.emit(t, tracked, |out| Op::CrossEntropy { logits, labels, out }))
    }

    /// Elementwise product with a fixed coefficient vector (dropout masks).
    pub fn mul_mask(&mut self, x: Var, mask: &[F]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "mul_mask: {} coefficients for {} elements",
                mask.len(),
                self.value(x).numel()
            )));
        }
        let data: Vec<F> = self.data(x).iter().zip(mask).map(|(v, m)| *v * *m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x);
        let mask = mask.to_vec();
        Ok(self.emit(t, tracked, |out| Op::MulMask { x, mask, out }))
    }

    /// Weighted sum against fixed coefficients, reduced to a scalar. Used to
    /// scalarize arbitrary outputs for gradient checks.
    pub fn dot_const(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape(format!(
                "dot_const: {} weights for {} elements",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let mut acc = F::zero();
        for (v, w) in self.data(x).iter().zip(weights) {
            acc = acc + *v * *w;
        }
        let t = Tensor::scalar(acc);
        let tracked = self.tracked(x);
        let weights = weights.to_vec();
        Ok(self.emit(t, tracked, |out| Op::DotConst { x, weights, out }))
    }
}

// ── reverse pass ───────────────────────────────────────────────────────────

impl<F: Real> Tape<F> {
    pub(crate) fn reverse(&mut self, op: &Op<F>) -> Result<()> {
        match *op {
            Op::Add { a, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(a) {
                    self.accumulate(a, &d);
                }
                if self.tracked(b) {
                    self.accumulate(b, &d);
                }
            }
            Op::Scale { a, c, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(a) {
                    let da: Vec<F> = d.iter().map(|v| *v * c).collect();
                    self.accumulate(a, &da);
                }
            }
            Op::Gather { table, ref ids, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(table) {
                    let width = self.shape(table)[1];
                    let mut dt = vec![F::zero(); self.value(table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            dt[id * width + j] = dt[id * width + j] + d[i * width + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::Linear { x, w, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let nin = self.shape(w)[0];
                let nout = self.shape(w)[1];
                let rows = self.value(x).numel() / nin.max(1);
                if self.tracked(x) {
                    let dx = mat_mul_tb(&d, self.data(w), rows, nin, nout);
                    self.accumulate(x, &dx);
                }
                if self.tracked(w) {
                    let dw = mat_mul_ta(self.data(x), &d, rows, nin, nout);
                    self.accumulate(w, &dw);
                }
                if let Some(bv) = b {
                    if self.tracked(bv) {
                        let mut db = vec![F::zero(); nout];
                        for r in 0..rows {
                            for j in 0..nout {
                                db[j] = db[j] + d[r * nout + j];
                            }
                        }
                        self.accumulate(bv, &db);
                    }
                }
            }
            Op::Matmul { a, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.tracked(a) {
                    let da = mat_mul_tb(&d, self.data(b), m, k, n);
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    let db = mat_mul_ta(self.data(a), &d, m, k, n);
                    self.accumulate(b, &db);
                }
            }
            Op::BatchMatmul { a, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let (g, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[2];
                if self.tracked(a) {
                    let mut da = Vec::with_capacity(g * m * k);
                    for gi in 0..g {
                        da.extend(mat_mul_tb(
                            &d[gi * m * n..(gi + 1) * m * n],
                            &self.data(b)[gi * k * n..(gi + 1) * k * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    let mut db = Vec::with_capacity(g * k * n);
                    for gi in 0..g {
                        db.extend(mat_mul_ta(
                            &self.data(a)[gi * m * k..(gi + 1) * m * k],
                            &d[gi * m * n..(gi + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::BatchMatmulTb { a, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let (g, m, k) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let n = self.shape(b)[1];
                if self.tracked(a) {
                    // da[g] = d[g] . b[g] : [m,n] x [n,k]
                    let mut da = Vec::with_capacity(g * m * k);
                    for gi in 0..g {
                        da.extend(mat_mul(
                            &d[gi * m * n..(gi + 1) * m * n],
                            &self.data(b)[gi * n * k..(gi + 1) * n * k],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    // db[g] = d[g]^T . a[g] : [n,m] x [m,k]
                    let mut db = Vec::with_capacity(g * n * k);
                    for gi in 0..g {
                        db.extend(mat_mul_ta(
                            &d[gi * m * n..(gi + 1) * m * n],
                            &self.data(a)[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::SplitHeads { x, heads, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let (bsz, tlen, h) =
                        (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                    let dh = h / heads;
                    let mut dx = vec![F::zero(); bsz * tlen * h];
                    for b in 0..bsz {
                        for a in 0..heads {
                            for t in 0..tlen {
                                let src = ((b * heads + a) * tlen + t) * dh;
                                let dst = (b * tlen + t) * h + a * dh;
                                dx[dst..dst + dh].copy_from_slice(&d[src..src + dh]);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::MergeHeads { x, heads, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let (g, tlen, dh) =
                        (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                    let bsz = g / heads;
                    let h = heads * dh;
                    let mut dx = vec![F::zero(); g * tlen * dh];
                    for b in 0..bsz {
                        for a in 0..heads {
                            for t in 0..tlen {
                                let src = (b * tlen + t) * h + a * dh;
                                let dst = ((b * heads + a) * tlen + t) * dh;
                                dx[dst..dst + dh].copy_from_slice(&d[src..src + dh]);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Softmax { x, axis, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let shape = self.shape(out).to_vec();
                    let n = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let p = self.data(out);
                    let mut dx = vec![F::zero(); p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |t: usize| o * n * inner + t * inner + i;
                            let mut dot = F::zero();
                            for t in 0..n {
                                dot = dot + p[at(t)] * d[at(t)];
                            }
                            for t in 0..n {
                                dx[at(t)] = p[at(t)] * (d[at(t)] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::MaskedSoftmax { x, out, .. } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    // Masked entries carry probability zero, so the plain
                    // softmax Jacobian leaves them at zero gradient.
                    let (g, tq, tk) =
                        (self.shape(out)[0], self.shape(out)[1], self.shape(out)[2]);
                    let p = self.data(out);
                    let mut dx = vec![F::zero(); p.len()];
                    for row in 0..g * tq {
                        let base = row * tk;
                        let mut dot = F::zero();
                        for t in 0..tk {
                            dot = dot + p[base + t] * d[base + t];
                        }
                        for t in 0..tk {
                            dx[base + t] = p[base + t] * (d[base + t] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let shape = self.shape(x).to_vec();
                let h = *shape.last().unwrap();
                let rows = numel(&shape) / h;
                let eps = F::from_f64(LAYER_NORM_EPS);
                let inv_h = F::one() / F::from_usize(h);
                let (tx, tg, tb) =
                    (self.tracked(x), self.tracked(gamma), self.tracked(beta));
                let mut dx = if tx { vec![F::zero(); rows * h] } else { Vec::new() };
                let mut dgamma = if tg { vec![F::zero(); h] } else { Vec::new() };
                let mut dbeta = if tb { vec![F::zero(); h] } else { Vec::new() };
                {
                    let xd = self.data(x);
                    let gd = self.data(gamma);
                    let mut xhat = vec![F::zero(); h];
                    for r in 0..rows {
                        let row = &xd[r * h..(r + 1) * h];
                        let drow = &d[r * h..(r + 1) * h];
                        let mut mu = F::zero();
                        for &v in row {
                            mu = mu + v;
                        }
                        mu = mu * inv_h;
                        let mut var = F::zero();
                        for &v in row {
                            let c = v - mu;
                            var = var + c * c;
                        }
                        var = var * inv_h;
                        let rstd = F::one() / (var + eps).sqrt();
                        for j in 0..h {
                            xhat[j] = (row[j] - mu) * rstd;
                        }
                        if tg {
                            for j in 0..h {
                                dgamma[j] = dgamma[j] + drow[j] * xhat[j];
                            }
                        }
                        if tb {
                            for j in 0..h {
                                dbeta[j] = dbeta[j] + drow[j];
                            }
                        }
                        if tx {
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for j in 0..h {
                                let dh = drow[j] * gd[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * xhat[j];
                            }
                            m1 = m1 * inv_h;
                            m2 = m2 * inv_h;
                            for j in 0..h {
                                let dh = drow[j] * gd[j];
                                dx[r * h + j] = rstd * (dh - m1 - xhat[j] * m2);
                            }
                        }
                    }
                }
                if tx {
                    self.accumulate(x, &dx);
                }
                if tg {
                    self.accumulate(gamma, &dgamma);
                }
                if tb {
                    self.accumulate(beta, &dbeta);
                }
            }
            Op::Activation { x, kind, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let dx: Vec<F> = match kind {
                        Activation::Tanh => {
                            let y = self.data(out);
                            d.iter()
                                .zip(y)
                                .map(|(dv, yv)| *dv * (F::one() - *yv * *yv))
                                .collect()
                        }
                        Activation::Gelu => {
                            let xd = self.data(x);
                            d.iter().zip(xd).map(|(dv, xv)| *dv * gelu_deriv(*xv)).collect()
                        }
                    };
                    self.accumulate(x, &dx);
                }
            }
            Op::Conv1d { x, kernel, bias, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let (bsz, tlen, cin) =
                    (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                let (kw, cout) = (self.shape(kernel)[0], self.shape(kernel)[2]);
                let half = kw / 2;
                let (tx, tk, tb) =
                    (self.tracked(x), self.tracked(kernel), self.tracked(bias));
                let mut dx = if tx { vec![F::zero(); bsz * tlen * cin] } else { Vec::new() };
                let mut dk = if tk { vec![F::zero(); kw * cin * cout] } else { Vec::new() };
                let mut db = if tb { vec![F::zero(); cout] } else { Vec::new() };
                {
                    let xd = self.data(x);
                    let kd = self.data(kernel);
                    for b in 0..bsz {
                        for t in 0..tlen {
                            let obase = (b * tlen + t) * cout;
                            if tb {
                                for co in 0..cout {
                                    db[co] = db[co] + d[obase + co];
                                }
                            }
                            for dt in 0..kw {
                                let ti = t as isize + dt as isize - half as isize;
                                if ti < 0 || ti >= tlen as isize {
                                    continue;
                                }
                                let xbase = (b * tlen + ti as usize) * cin;
                                for ci in 0..cin {
                                    let kbase = (dt * cin + ci) * cout;
                                    let mut acc = F::zero();
                                    for co in 0..cout {
                                        acc = acc + kd[kbase + co] * d[obase + co];
                                    }
                                    if tx {
                                        dx[xbase + ci] = dx[xbase + ci] + acc;
                                    }
                                    if tk {
                                        let xv = xd[xbase + ci];
                                        if xv != F::zero() {
                                            for co in 0..cout {
                                                dk[kbase + co] =
                                                    dk[kbase + co] + xv * d[obase + co];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if tx {
                    self.accumulate(x, &dx);
                }
                if tk {
                    self.accumulate(kernel, &dk);
                }
                if tb {
                    self.accumulate(bias, &db);
                }
            }
            Op::MaxPool1d { x, ref argmax, out, .. } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let mut dx = vec![F::zero(); self.value(x).numel()];
                    for (i, slot) in argmax.iter().enumerate() {
                        if let Some(idx) = slot {
                            dx[*idx] = dx[*idx] + d[i];
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::ZeroMasked { x, ref mask, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let ch = self.shape(x)[2];
                    let mut dx = vec![F::zero(); d.len()];
                    for (bt, &keep) in mask.iter().enumerate() {
                        if keep {
                            dx[bt * ch..(bt + 1) * ch].copy_from_slice(&d[bt * ch..(bt + 1) * ch]);
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::MaskedMean { x, ref mask, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let (bsz, tlen, h) =
                        (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                    let mut dx = vec![F::zero(); bsz * tlen * h];
                    for b in 0..bsz {
                        let count = (0..tlen).filter(|&t| mask[b * tlen + t]).count();
                        let inv = F::one() / F::from_usize(count);
                        for t in 0..tlen {
                            if !mask[b * tlen + t] {
                                continue;
                            }
                            for j in 0..h {
                                dx[(b * tlen + t) * h + j] = d[b * h + j] * inv;
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::MaskedMax { x, ref argmax, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let mut dx = vec![F::zero(); self.value(x).numel()];
                    for (i, &idx) in argmax.iter().enumerate() {
                        dx[idx] = dx[idx] + d[i];
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::TakeFirst { x, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let (bsz, tlen, h) =
                        (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
                    let mut dx = vec![F::zero(); bsz * tlen * h];
                    for b in 0..bsz {
                        dx[b * tlen * h..b * tlen * h + h].copy_from_slice(&d[b * h..(b + 1) * h]);
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::ConcatCols { ref parts, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let bsz = self.shape(out)[0];
                let total = self.shape(out)[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.tracked(p) {
                        let mut dp = vec![F::zero(); bsz * w];
                        for b in 0..bsz {
                            dp[b * w..(b + 1) * w]
                                .copy_from_slice(&d[b * total + off..b * total + off + w]);
                        }
                        self.accumulate(p, &dp);
                    }
                    off += w;
                }
            }
            Op::AbsDiff { a, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let sign: Vec<F> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b))
                    .map(|(x, y)| {
                        if *x > *y {
                            F::one()
                        } else if *x < *y {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                if self.tracked(a) {
                    let da: Vec<F> = d.iter().zip(&sign).map(|(dv, s)| *dv * *s).collect();
                    self.accumulate(a, &da);
                }
                if self.tracked(b) {
                    let db: Vec<F> = d.iter().zip(&sign).map(|(dv, s)| -(*dv * *s)).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::CosineRows { a, b, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                let (bsz, h) = (self.shape(a)[0], self.shape(a)[1]);
                let (ta, tb) = (self.tracked(a), self.tracked(b));
                let mut da = if ta { vec![F::zero(); bsz * h] } else { Vec::new() };
                let mut db = if tb { vec![F::zero(); bsz * h] } else { Vec::new() };
                {
                    let ad = self.data(a);
                    let bd = self.data(b);
                    for r in 0..bsz {
                        let (mut dot, mut na2, mut nb2) = (F::zero(), F::zero(), F::zero());
                        for j in 0..h {
                            let (x, y) = (ad[r * h + j], bd[r * h + j]);
                            dot = dot + x * y;
                            na2 = na2 + x * x;
                            nb2 = nb2 + y * y;
                        }
                        let na = na2.sqrt();
                        let nb = nb2.sqrt();
                        let cos = dot / (na * nb);
                        let dv = d[r];
                        for j in 0..h {
                            let (x, y) = (ad[r * h + j], bd[r * h + j]);
                            if ta {
                                da[r * h + j] = dv * (y / (na * nb) - cos * x / na2);
                            }
                            if tb {
                                db[r * h + j] = dv * (x / (na * nb) - cos * y / nb2);
                            }
                        }
                    }
                }
                if ta {
                    self.accumulate(a, &da);
                }
                if tb {
                    self.accumulate(b, &db);
                }
            }
            Op::MseLoss { pred, ref target, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(pred) {
                    let n = F::from_usize(target.len());
                    let two = F::from_f64(2.0);
                    let dp: Vec<F> = self
                        .data(pred)
                        .iter()
                        .zip(target)
                        .map(|(p, t)| d[0] * two * (*p - *t) / n)
                        .collect();
                    self.accumulate(pred, &dp);
                }
            }
            Op::CrossEntropy { logits, ref labels, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(logits) {
                    let nc = self.shape(logits)[1];
                    let bsz = labels.len();
                    let inv_b = F::one() / F::from_usize(bsz);
                    let zd = self.data(logits);
                    let mut dz = vec![F::zero(); bsz * nc];
                    let mut row = vec![F::zero(); nc];
                    for (b, &y) in labels.iter().enumerate() {
                        row.copy_from_slice(&zd[b * nc..(b + 1) * nc]);
                        softmax_line(&mut row);
                        for c in 0..nc {
                            let ind = if c == y { F::one() } else { F::zero() };
                            dz[b * nc + c] = d[0] * (row[c] - ind) * inv_b;
                        }
                    }
                    self.accumulate(logits, &dz);
                }
            }
            Op::MulMask { x, ref mask, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let dx: Vec<F> = d.iter().zip(mask).map(|(dv, m)| *dv * *m).collect();
                    self.accumulate(x, &dx);
                }
            }
            Op::DotConst { x, ref weights, out } => {
                let Some(d) = self.out_grad(out) else { return Ok(()) };
                if self.tracked(x) {
                    let dx: Vec<F> = weights.iter().map(|w| d[0] * *w).collect();
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    fn leaf(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let t = Tensor::new(shape, data).unwrap().requires_grad();
        tape.leaf(t)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn matmul_small_case() {
        let mut t = tape();
        let a = leaf(&mut t, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, vec![2, 1], vec![5.0, 6.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[17.0, 39.0]);
        assert_eq!(t.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = tape();
        let a = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut t, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_matches_closed_form() {
        let mut t = tape();
        let x = leaf(&mut t, vec![2], vec![0.0, (3.0f64).ln()]);
        let y = t.softmax(x, 0).unwrap();
        assert!(close(t.data(y)[0], 0.25));
        assert!(close(t.data(y)[1], 0.75));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut t = tape();
        let x = leaf(&mut t, vec![3], vec![1.0, 2.0, 3.0]);
        let xs = leaf(&mut t, vec![3], vec![1001.0, 1002.0, 1003.0]);
        let y = t.softmax(x, 0).unwrap();
        let ys = t.softmax(xs, 0).unwrap();
        for (a, b) in t.data(y).iter().zip(t.data(ys)) {
            assert!(close(*a, *b));
        }
        let sum: f64 = t.data(y).iter().sum();
        assert!(close(sum, 1.0));
    }

    #[test]
    fn softmax_middle_axis() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 2, 2], vec![0.0, 10.0, 0.0, 10.0]);
        let y = t.softmax(x, 1).unwrap();
        // Lines run down axis 1: columns (0,0) pair with (1,0), etc.
        assert!(close(t.data(y)[0] + t.data(y)[2], 1.0));
        assert!(close(t.data(y)[1] + t.data(y)[3], 1.0));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 3], vec![1.0, 2.0, 3.0]);
        let g = leaf(&mut t, vec![3], vec![1.0, 1.0, 1.0]);
        let b = leaf(&mut t, vec![3], vec![0.0, 0.0, 0.0]);
        let y = t.layer_norm(x, g, b).unwrap();
        let d = t.data(y);
        let mean: f64 = d.iter().sum::<f64>() / 3.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_fixed_points_and_sign() {
        let mut t = tape();
        let x = leaf(&mut t, vec![3], vec![0.0, 5.0, -5.0]);
        let y = t.activation(x, Activation::Gelu).unwrap();
        let d = t.data(y);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 5.0).abs() < 1e-4); // large positive passes through
        assert!(d[2].abs() < 1e-4); // large negative squashed to ~0
    }

    #[test]
    fn conv1d_same_padding_window_sums() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 3, 1], vec![1.0, 2.0, 3.0]);
        let k = leaf(&mut t, vec![3, 1, 1], vec![1.0, 1.0, 1.0]);
        let b = leaf(&mut t, vec![1], vec![0.0]);
        let y = t.conv1d(x, k, b).unwrap();
        assert_eq!(t.data(y), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernels() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 3, 1], vec![0.0; 3]);
        let k = leaf(&mut t, vec![2, 1, 1], vec![0.0; 2]);
        let b = leaf(&mut t, vec![1], vec![0.0]);
        assert!(matches!(t.conv1d(x, k, b), Err(Error::Shape(_))));
    }

    #[test]
    fn max_pool_clamps_final_window() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 5, 1], vec![1.0, 3.0, 2.0, 5.0, 4.0]);
        let (y, out_mask) = t.max_pool1d(x, 2, 2, &[true; 5]).unwrap();
        assert_eq!(t.data(y), &[3.0, 5.0, 4.0]);
        assert_eq!(out_mask, vec![true, true, true]);
    }

    #[test]
    fn max_pool_single_position() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 1, 2], vec![7.0, -7.0]);
        let (y, out_mask) = t.max_pool1d(x, 2, 2, &[true]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2]);
        assert_eq!(t.data(y), &[7.0, -7.0]);
        assert_eq!(out_mask, vec![true]);
    }

    #[test]
    fn max_pool_empty_window_emits_zero_and_invalid() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 4, 1], vec![9.0, 8.0, 7.0, 6.0]);
        let (y, out_mask) = t.max_pool1d(x, 2, 2, &[true, true, false, false]).unwrap();
        assert_eq!(t.data(y), &[9.0, 0.0]);
        assert_eq!(out_mask, vec![true, false]);
    }

    #[test]
    fn masked_mean_ignores_padding() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0]);
        let y = t.masked_mean(x, &[true, true, false]).unwrap();
        assert_eq!(t.data(y), &[2.0, 3.0]);
    }

    #[test]
    fn masked_mean_all_padding_is_degenerate() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 2, 1], vec![1.0, 2.0]);
        assert!(matches!(t.masked_mean(x, &[false, false]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn masked_max_ignores_padding_and_takes_max() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 3, 2], vec![1.0, 5.0, 2.0, -1.0, 99.0, 99.0]);
        let y = t.masked_max(x, &[true, true, false]).unwrap();
        assert_eq!(t.data(y), &[2.0, 5.0]);
    }

    #[test]
    fn take_first_selects_leading_token() {
        let mut t = tape();
        let x = leaf(&mut t, vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = t.take_first(x).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn split_and_merge_heads_round_trip() {
        let mut t = tape();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
        let x = leaf(&mut t, vec![2, 3, 4], data.clone());
        let s = t.split_heads(x, 2).unwrap();
        assert_eq!(t.shape(s), &[4, 3, 2]);
        let m = t.merge_heads(s, 2).unwrap();
        assert_eq!(t.shape(m), &[2, 3, 4]);
        assert_eq!(t.data(m), data.as_slice());
    }

    #[test]
    fn cosine_rows_known_angles() {
        let mut t = tape();
        let a = leaf(&mut t, vec![3, 2], vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
        let b = leaf(&mut t, vec![3, 2], vec![3.0, 0.0, 0.0, 5.0, -1.0, -1.0]);
        let y = t.cosine_rows(a, b).unwrap();
        let d = t.data(y);
        assert!(close(d[0], 1.0));
        assert!(close(d[1], 0.0));
        assert!(close(d[2], -1.0));
    }

    #[test]
    fn cosine_rows_zero_norm_is_degenerate() {
        let mut t = tape();
        let a = leaf(&mut t, vec![1, 2], vec![0.0, 0.0]);
        let b = leaf(&mut t, vec![1, 2], vec![1.0, 0.0]);
        assert!(matches!(t.cosine_rows(a, b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = tape();
        let z = leaf(&mut t, vec![1, 3], vec![0.0, 0.0, 0.0]);
        let l = t.cross_entropy(z, &[1]).unwrap();
        assert!(close(t.data(l)[0], 3.0f64.ln()));
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut t = tape();
        let z = leaf(&mut t, vec![1, 3], vec![0.0, 0.0, 0.0]);
        assert!(matches!(t.cross_entropy(z, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn mse_of_exact_predictions_is_zero() {
        let mut t = tape();
        let p = leaf(&mut t, vec![2], vec![0.5, -0.5]);
        let l = t.mse_loss(p, &[0.5, -0.5]).unwrap();
        assert_eq!(t.data(l)[0], 0.0);
    }

    #[test]
    fn gather_copies_rows_and_scatters_grads() {
        let mut t = tape();
        let table = leaf(&mut t, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = t.gather(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(t.data(y), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.dot_const(y, &[1.0; 6]).unwrap();
        t.backward(s).unwrap();
        // Row 2 was gathered twice, row 1 never.
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut t = tape();
        let table = leaf(&mut t, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(t.gather(table, &[2], &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 2, 3], vec![1.0, 100.0, 1.0, 0.0, 0.0, 0.0]);
        let y = t.masked_softmax(x, &[true, false, true], 1).unwrap();
        let d = t.data(y);
        assert_eq!(d[1], 0.0);
        assert!(close(d[0] + d[2], 1.0));
        assert!(close(d[0], d[2])); // equal logits among the valid keys
    }

    #[test]
    fn masked_softmax_all_masked_row_is_degenerate() {
        let mut t = tape();
        let x = leaf(&mut t, vec![1, 1, 2], vec![0.0, 0.0]);
        let r = t.masked_softmax(x, &[false, false], 1);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn add_backward_routes_to_both_inputs() {
        let mut t = tape();
        let a = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let b = leaf(&mut t, vec![2], vec![3.0, 4.0]);
        let s = t.add(a, b).unwrap();
        let l = t.dot_const(s, &[1.0, 10.0]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 10.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 10.0]);
    }

    #[test]
    fn untracked_inputs_receive_no_grad() {
        let mut t = tape();
        let a = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let c = t.constant_from(vec![2], vec![5.0, 5.0]).unwrap();
        let s = t.add(a, c).unwrap();
        let l = t.dot_const(s, &[1.0, 1.0]).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(a).is_some());
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn concat_cols_layout_and_backward() {
        let mut t = tape();
        let a = leaf(&mut t, vec![2, 1], vec![1.0, 2.0]);
        let b = leaf(&mut t, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let y = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.data(y), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let l = t.dot_const(y, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn abs_diff_values_and_signs() {
        let mut t = tape();
        let a = leaf(&mut t, vec![3], vec![1.0, -2.0, 5.0]);
        let b = leaf(&mut t, vec![3], vec![4.0, -2.0, 1.0]);
        let y = t.abs_diff(a, b).unwrap();
        assert_eq!(t.data(y), &[3.0, 0.0, 4.0]);
        let l = t.dot_const(y, &[1.0, 1.0, 1.0]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[-1.0, 0.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn pool_output_len_covers_all_positions() {
        assert_eq!(pool_output_len(5, 2, 2), 3);
        assert_eq!(pool_output_len(4, 2, 2), 2);
        assert_eq!(pool_output_len(1, 2, 2), 1);
        assert_eq!(pool_output_len(2, 3, 3), 1);
        // Every position falls inside some window when windows overlap or tile.
        for t in 1..40 {
            for w in 1..6 {
                for s in 1..=w {
                    let n = pool_output_len(t, w, s);
                    let covered = (0..n).fold(vec![false; t], |mut acc, o| {
                        acc[o * s..(o * s + w).min(t)].fill(true);
                        acc
                    });
                    assert!(covered.iter().all(|&c| c), "t={t} w={w} s={s}");
                }
            }
        }
    }
}
