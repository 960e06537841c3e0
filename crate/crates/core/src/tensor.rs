//! Dense row-major tensors of `f64` and the kernels the tape is built from.
//!
//! Shapes follow numpy broadcasting rules: dimensions are aligned from the
//! right and a size-1 dimension stretches to match its partner.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k + a.len() >= n { a[k + a.len() - n] } else { 1 };
        let db = if k + b.len() >= n { b[k + b.len() - n] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; stretched
/// dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        if shape[k] != 1 {
            strides[k + offset] = acc;
        }
        acc *= shape[k];
    }
    strides
}

/// Visits every index of `out`, handing the callback the linear output
/// position plus the matching offsets under two stride sets.
fn for_each_strided(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let nd = out.len();
    let last = out[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut pos = 0;
    loop {
        for k in 0..last {
            f(pos + k, oa + k * la, ob + k * lb);
        }
        pos += last;
        // odometer over the leading dimensions
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    if b.numel() == 1 && b.ndim() <= a.ndim() {
        let y = b.data[0];
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| f(x, y)).collect(),
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_strided(&out, &sa, &sb, |p, ia, ib| {
        data[p] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor { shape: out, data })
}

pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    let out = broadcast_shape(&x.shape, shape)?;
    if out != shape {
        return Err(Error::Shape(format!("cannot broadcast {:?} to {shape:?}", x.shape)));
    }
    let sx = broadcast_strides(&x.shape, &out);
    let zero = vec![0; out.len()];
    let mut data = vec![0.0; out.iter().product()];
    for_each_strided(&out, &sx, &zero, |p, ix, _| data[p] = x.data[ix]);
    Ok(Tensor { shape: out, data })
}

/// Sums a broadcast result back down to `shape` (the adjoint of
/// [`broadcast_to`]).
pub fn sum_to_shape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if x.shape == shape {
        return Ok(x.clone());
    }
    let check = broadcast_shape(shape, &x.shape)?;
    if check != x.shape {
        return Err(Error::Shape(format!("cannot reduce {:?} to {shape:?}", x.shape)));
    }
    let st = broadcast_strides(shape, &x.shape);
    let zero = vec![0; x.shape.len()];
    let mut data = vec![0.0; shape.iter().product()];
    for_each_strided(&x.shape, &st, &zero, |p, it, _| data[it] += x.data[p]);
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Product of an `n x k` and a `k x m` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape, b.shape)));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::Shape(format!("transpose of {:?}", a.shape)));
    }
    let (n, m) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

fn check_axis(x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.ndim() {
        return Err(Error::Shape(format!("axis {axis} out of range for {:?}", x.shape)));
    }
    Ok(())
}

pub fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor { shape, data })
}

/// Stabilized `log(sum(exp(x)))` along `axis`, which is removed.
pub fn logsumexp_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut shape = x.shape.clone();
    shape.remove(axis);
    if inner == 1 && len > 0 {
        let data = x.data.chunks_exact(len).map(lse_slice).collect();
        return Ok(Tensor { shape, data });
    }
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| x.data[(o * len + a) * inner + i];
            let mut m = f64::NEG_INFINITY;
            for a in 0..len {
                m = m.max(at(a));
            }
            data[o * inner + i] = if m == f64::NEG_INFINITY {
                m
            } else {
                let s: f64 = (0..len).map(|a| (at(a) - m).exp()).sum();
                m + s.ln()
            };
        }
    }
    Ok(Tensor { shape, data })
}

pub(crate) fn lse_slice(v: &[f64]) -> f64 {
    if let [a, b] = *v {
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            return m;
        }
        return m + (-(a - b).abs()).exp().ln_1p();
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&a| (a - m).exp()).sum::<f64>().ln()
}

/// Selects entries `index[..]` along `axis`.
pub fn gather_axis(x: &Tensor, axis: usize, index: &[usize]) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    if let Some(&bad) = index.iter().find(|&&i| i >= len) {
        return Err(Error::Index(format!("gather index {bad} out of range {len}")));
    }
    let m = index.len();
    let mut data = Vec::with_capacity(outer * m * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for &src in index {
            data.extend_from_slice(&x.data[base + src * inner..base + (src + 1) * inner]);
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = m;
    Ok(Tensor { shape, data })
}

/// Accumulates slices along `axis` into `size` buckets given by `index`.
pub fn scatter_add_axis(x: &Tensor, axis: usize, index: &[usize], size: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    if len != index.len() {
        return Err(Error::Shape(format!(
            "scatter index of length {} along axis of length {len}",
            index.len()
        )));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= size) {
        return Err(Error::Index(format!("scatter index {bad} out of range {size}")));
    }
    let mut data = vec![0.0; outer * size * inner];
    for o in 0..outer {
        for (a, &dst) in index.iter().enumerate() {
            let src = &x.data[(o * len + a) * inner..(o * len + a + 1) * inner];
            let d0 = (o * size + dst) * inner;
            for (d, s) in data[d0..d0 + inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = size;
    Ok(Tensor { shape, data })
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    check_axis(first, axis)?;
    for p in parts {
        let same = p.ndim() == first.ndim()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(k, (a, b))| k == axis || a == b);
        if !same {
            return Err(Error::Shape(format!(
                "concat {:?} with {:?} along {axis}",
                first.shape, p.shape
            )));
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Slices `[start, start + len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(x, axis)?;
    let (outer, alen, inner) = split_axis(&x.shape, axis);
    if start + len > alen {
        return Err(Error::Index(format!("narrow {start}+{len} beyond axis length {alen}")));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let b = (o * alen + start) * inner;
        data.extend_from_slice(&x.data[b..b + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}
