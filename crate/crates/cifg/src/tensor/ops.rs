//! Differentiable operations on [`Tensor`].
//!
//! Each op validates shapes, computes the forward value eagerly, and attaches
//! a VJP closure that maps the output adjoint to per-parent adjoints. Values
//! are always owned, standard-layout arrays.

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};
use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let value = self.value() + rhs.value();
        Ok(Tensor::op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let value = self.value() - rhs.value();
        Ok(Tensor::op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(-g)]),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let value = self.value() * rhs.value();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| vec![Some(g * b.value()), Some(g * a.value())]),
        ))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("div", self, rhs)?;
        let value = self.value() / rhs.value();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let db = -(g * a.value()) / (b.value() * b.value());
                vec![Some(g / b.value()), Some(db)]
            }),
        ))
    }

    // ---- scalar constants ---------------------------------------------------

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let value = self.value() + c;
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let value = self.value() * c;
        Tensor::op(value, vec![self.clone()], Box::new(move |g| vec![Some(g * c)]))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    // ---- 0-dim tensor scalars (trainable temperatures etc.) -----------------

    /// Multiply every element by a 0-dim tensor.
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("mul_scalar_t: scalar operand required"));
        }
        let sv = s.item()?;
        let value = self.value() * sv;
        let x = self.clone();
        Ok(Tensor::op(
            value,
            vec![self.clone(), s.clone()],
            Box::new(move |g| {
                let ds = (g * x.value()).sum();
                vec![
                    Some(g * sv),
                    Some(ArrayD::from_elem(IxDyn(&[]), ds)),
                ]
            }),
        ))
    }

    /// Divide every element by a 0-dim tensor.
    pub fn div_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("div_scalar_t: scalar operand required"));
        }
        let sv = s.item()?;
        if sv == 0.0 {
            return Err(Error::Numeric("div_scalar_t: division by zero".into()));
        }
        let value = self.value() / sv;
        let x = self.clone();
        Ok(Tensor::op(
            value,
            vec![self.clone(), s.clone()],
            Box::new(move |g| {
                let ds = -(g * x.value()).sum() / (sv * sv);
                vec![
                    Some(g / sv),
                    Some(ArrayD::from_elem(IxDyn(&[]), ds)),
                ]
            }),
        ))
    }

    // ---- row/column broadcasts on 2-d arrays --------------------------------

    fn check_row(&self, op: &str, r: &Tensor) -> Result<(usize, usize)> {
        let (s, rs) = (self.shape(), r.shape());
        if s.len() != 2 || rs.len() != 1 || s[1] != rs[0] {
            return Err(Error::shape(format!("{op}: {:?} with row {:?}", s, rs)));
        }
        Ok((s[0], s[1]))
    }

    fn check_col(&self, op: &str, c: &Tensor) -> Result<(usize, usize)> {
        let (s, cs) = (self.shape(), c.shape());
        if s.len() != 2 || cs.len() != 1 || s[0] != cs[0] {
            return Err(Error::shape(format!("{op}: {:?} with col {:?}", s, cs)));
        }
        Ok((s[0], s[1]))
    }

    /// `[n, d] + [d]`, broadcast over rows.
    pub fn add_row(&self, r: &Tensor) -> Result<Tensor> {
        self.check_row("add_row", r)?;
        let rv = r.value().view().into_dimensionality::<Ix1>().unwrap();
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() + &rv).into_dyn();
        Ok(Tensor::op(
            value,
            vec![self.clone(), r.clone()],
            Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![Some(g.clone()), Some(g2.sum_axis(Axis(0)).into_dyn())]
            }),
        ))
    }

    /// `[n, d] - [d]`, broadcast over rows.
    pub fn sub_row(&self, r: &Tensor) -> Result<Tensor> {
        self.check_row("sub_row", r)?;
        let rv = r.value().view().into_dimensionality::<Ix1>().unwrap();
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() - &rv).into_dyn();
        Ok(Tensor::op(
            value,
            vec![self.clone(), r.clone()],
            Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![Some(g.clone()), Some(-g2.sum_axis(Axis(0)).into_dyn())]
            }),
        ))
    }

    /// `[n, d] * [d]`, broadcast over rows.
    pub fn mul_row(&self, r: &Tensor) -> Result<Tensor> {
        self.check_row("mul_row", r)?;
        let rv = r.value().view().into_dimensionality::<Ix1>().unwrap();
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() * &rv).into_dyn();
        let (x, rr) = (self.clone(), r.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), r.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let rv = rr.value().view().into_dimensionality::<Ix1>().unwrap();
                let xv = x.value().view().into_dimensionality::<Ix2>().unwrap();
                let dx = (&g2 * &rv).into_dyn();
                let dr = (&g2 * &xv).sum_axis(Axis(0)).into_dyn();
                vec![Some(dx), Some(dr)]
            }),
        ))
    }

    /// `[n, d] / [d]`, broadcast over rows.
    pub fn div_row(&self, r: &Tensor) -> Result<Tensor> {
        self.check_row("div_row", r)?;
        let rv = r.value().view().into_dimensionality::<Ix1>().unwrap();
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() / &rv).into_dyn();
        let (x, rr) = (self.clone(), r.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), r.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let rv = rr.value().view().into_dimensionality::<Ix1>().unwrap();
                let xv = x.value().view().into_dimensionality::<Ix2>().unwrap();
                let dx = (&g2 / &rv).into_dyn();
                let dr = -((&g2 * &xv).sum_axis(Axis(0)) / (&rv * &rv)).into_dyn();
                vec![Some(dx), Some(dr)]
            }),
        ))
    }

    /// `[n, m] - [n]`, broadcast over columns.
    pub fn sub_col(&self, c: &Tensor) -> Result<Tensor> {
        let (n, _m) = self.check_col("sub_col", c)?;
        let cv = c.value().view().into_dimensionality::<Ix1>().unwrap();
        let col = cv.to_owned().insert_axis(Axis(1));
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() - &col).into_dyn();
        Ok(Tensor::op(
            value,
            vec![self.clone(), c.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let dc = -g2.sum_axis(Axis(1));
                debug_assert_eq!(dc.len(), n);
                vec![Some(g.clone()), Some(dc.into_dyn())]
            }),
        ))
    }

    /// `[n, m] * [n]`, broadcast over columns.
    pub fn mul_col(&self, c: &Tensor) -> Result<Tensor> {
        self.check_col("mul_col", c)?;
        let cv = c.value().view().into_dimensionality::<Ix1>().unwrap();
        let col = cv.to_owned().insert_axis(Axis(1));
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() * &col).into_dyn();
        let (x, cc) = (self.clone(), c.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), c.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let cv = cc.value().view().into_dimensionality::<Ix1>().unwrap();
                let col = cv.to_owned().insert_axis(Axis(1));
                let xv = x.value().view().into_dimensionality::<Ix2>().unwrap();
                let dx = (&g2 * &col).into_dyn();
                let dc = (&g2 * &xv).sum_axis(Axis(1)).into_dyn();
                vec![Some(dx), Some(dc)]
            }),
        ))
    }

    /// `[n, m] / [n]`, broadcast over columns.
    pub fn div_col(&self, c: &Tensor) -> Result<Tensor> {
        self.check_col("div_col", c)?;
        let cv = c.value().view().into_dimensionality::<Ix1>().unwrap();
        let col = cv.to_owned().insert_axis(Axis(1));
        let value = (&self.value().view().into_dimensionality::<Ix2>().unwrap() / &col).into_dyn();
        let (x, cc) = (self.clone(), c.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), c.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let cv = cc.value().view().into_dimensionality::<Ix1>().unwrap();
                let col = cv.to_owned().insert_axis(Axis(1));
                let xv = x.value().view().into_dimensionality::<Ix2>().unwrap();
                let dx = (&g2 / &col).into_dyn();
                let dc = -((&g2 * &xv).sum_axis(Axis(1)) / (&cv * &cv)).into_dyn();
                vec![Some(dx), Some(dc)]
            }),
        ))
    }

    // ---- unary --------------------------------------------------------------

    pub fn relu(&self) -> Tensor {
        let value = self.value().mapv(|v| v.max(0.0));
        let x = self.clone();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(x.value())
                    .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                vec![Some(dx)]
            }),
        )
    }

    /// Numerically stable logistic; outputs strictly inside (0, 1).
    pub fn sigmoid(&self) -> Tensor {
        let value = self.value().mapv(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let y = value.clone();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(&y)
                    .map_collect(|&gi, &yi| gi * yi * (1.0 - yi));
                vec![Some(dx)]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let value = self.value().mapv(f64::exp);
        let y = value.clone();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &y)]),
        )
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.value().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln of a non-positive value".into()));
        }
        let value = self.value().mapv(f64::ln);
        let x = self.clone();
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g / x.value())]),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.value().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let value = self.value().mapv(f64::sqrt);
        let y = value.clone();
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(&y)
                    .map_collect(|&gi, &yi| if yi == 0.0 { 0.0 } else { 0.5 * gi / yi });
                vec![Some(dx)]
            }),
        ))
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        let value = self.value().mapv(f64::abs);
        let x = self.clone();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(x.value())
                    .map_collect(|&gi, &xi| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 });
                vec![Some(dx)]
            }),
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let value = self.value().mapv(|v| v.clamp(lo, hi));
        let x = self.clone();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(x.value())
                    .map_collect(|&gi, &xi| if xi > lo && xi < hi { gi } else { 0.0 });
                vec![Some(dx)]
            }),
        )
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum of all elements as a 0-dim tensor.
    pub fn sum_all(&self) -> Tensor {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        let shape = self.value().raw_dim();
        Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![Some(ArrayD::from_elem(shape.clone(), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "sum_axis: axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let value = self.value().sum_axis(Axis(axis));
        let shape = self.value().raw_dim();
        Ok(Tensor::op(
            value.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let expanded = g.clone().insert_axis(Axis(axis));
                let dx = expanded.broadcast(shape.clone()).unwrap().to_owned();
                vec![Some(dx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / n))
    }

    // ---- shaping --------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let value = self
            .value()
            .to_shape(IxDyn(shape))
            .map_err(|e| Error::shape(format!("reshape: {e}")))?
            .to_owned();
        let orig: Vec<usize> = self.shape().to_vec();
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g.to_shape(IxDyn(&orig)).unwrap().to_owned();
                vec![Some(dx)]
            }),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        if axes.len() != self.shape().len() {
            return Err(Error::shape(format!(
                "permute: {axes:?} on rank {}",
                self.shape().len()
            )));
        }
        let value = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                vec![Some(dx)]
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along an axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow: axis {axis} [{start}, {start}+{len}) of {:?}",
                s
            )));
        }
        let value = self
            .value()
            .slice_axis(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        let shape = self.value().raw_dim();
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(shape.clone());
                dx.slice_axis_mut(
                    Axis(axis),
                    Slice::from(start as isize..(start + len) as isize),
                )
                .assign(g);
                vec![Some(dx)]
            }),
        ))
    }

    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = concatenate(Axis(axis), &views)
            .map_err(|e| Error::shape(format!("concat: {e}")))?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::op(
            value,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0usize;
                for &sz in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(offset as isize..(offset + sz) as isize))
                        .to_owned();
                    out.push(Some(piece));
                    offset += sz;
                }
                out
            }),
        ))
    }

    /// Repeat a tensor `n` times along a new leading axis.
    pub fn tile_axis0(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::shape("tile_axis0: n must be positive"));
        }
        let expanded = self.value().clone().insert_axis(Axis(0));
        let mut target: Vec<usize> = vec![n];
        target.extend_from_slice(self.shape());
        let value = expanded.broadcast(IxDyn(&target)).unwrap().to_owned();
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.sum_axis(Axis(0)))]),
        ))
    }

    // ---- linear algebra --------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", a, b)));
        }
        let av = self.value().view().into_dimensionality::<Ix2>().unwrap();
        let bv = rhs.value().view().into_dimensionality::<Ix2>().unwrap();
        let value = av.dot(&bv).into_dyn();
        let (ta, tb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = ta.value().view().into_dimensionality::<Ix2>().unwrap();
                let bv = tb.value().view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Batched matmul: `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(Error::shape(format!("bmm: {:?} x {:?}", a, b)));
        }
        let av = self.value().view().into_dimensionality::<Ix3>().unwrap();
        let bv = rhs.value().view().into_dimensionality::<Ix3>().unwrap();
        let mut value = ndarray::Array3::<f64>::zeros((a[0], a[1], b[2]));
        for i in 0..a[0] {
            value
                .index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        let (ta, tb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            value.into_dyn(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = ta.value().view().into_dimensionality::<Ix3>().unwrap();
                let bv = tb.value().view().into_dimensionality::<Ix3>().unwrap();
                let nb = av.shape()[0];
                let mut da = ndarray::Array3::<f64>::zeros((nb, av.shape()[1], av.shape()[2]));
                let mut db = ndarray::Array3::<f64>::zeros((nb, bv.shape()[1], bv.shape()[2]));
                for i in 0..nb {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        ))
    }

    // ---- convolution -------------------------------------------------------------

    /// 1-d convolution with zero "same" padding.
    ///
    /// `self` is `[t, d_in]`, `kernel` is `[w, d_in, d_out]` with odd `w`;
    /// the output has `ceil(t / stride)` frames (`t` frames at stride 1).
    pub fn conv1d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Parameter("conv1d: stride must be positive".into()));
        }
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 2 || ks.len() != 3 || xs[1] != ks[1] {
            return Err(Error::shape(format!("conv1d: x {:?}, kernel {:?}", xs, ks)));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Parameter(
                "conv1d: kernel width must be odd for same padding".into(),
            ));
        }
        let x = self.value().view().into_dimensionality::<Ix2>().unwrap();
        let k = kernel.value().view().into_dimensionality::<Ix3>().unwrap();
        let (t, din) = (xs[0], xs[1]);
        let (w, dout) = (ks[0], ks[2]);
        let t_out = t.div_ceil(stride);

        let cols = im2col(&x, w, stride, t_out);
        let kmat = k.to_shape((w * din, dout)).unwrap().to_owned();
        let value = cols.dot(&kmat).into_dyn();

        let (tx, tk) = (self.clone(), kernel.clone());
        Ok(Tensor::op(
            value,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let x = tx.value().view().into_dimensionality::<Ix2>().unwrap();
                let k = tk.value().view().into_dimensionality::<Ix3>().unwrap();
                let cols = im2col(&x, w, stride, t_out);
                let kmat = k.to_shape((w * din, dout)).unwrap().to_owned();
                let dk = cols
                    .t()
                    .dot(&g2)
                    .to_shape((w, din, dout))
                    .unwrap()
                    .to_owned()
                    .into_dyn();
                let dcols = g2.dot(&kmat.t());
                let dx = col2im(&dcols.view(), t, din, w, stride).into_dyn();
                vec![Some(dx), Some(dk)]
            }),
        ))
    }

    /// Batched [`Tensor::conv1d`] over `[b, t, d_in]`.
    pub fn conv1d_batch(&self, kernel: &Tensor, stride: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Parameter("conv1d: stride must be positive".into()));
        }
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[1] {
            return Err(Error::shape(format!(
                "conv1d_batch: x {:?}, kernel {:?}",
                xs, ks
            )));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Parameter(
                "conv1d: kernel width must be odd for same padding".into(),
            ));
        }
        let x = self.value().view().into_dimensionality::<Ix3>().unwrap();
        let k = kernel.value().view().into_dimensionality::<Ix3>().unwrap();
        let (nb, t, din) = (xs[0], xs[1], xs[2]);
        let (w, dout) = (ks[0], ks[2]);
        let t_out = t.div_ceil(stride);
        let kmat = k.to_shape((w * din, dout)).unwrap().to_owned();
        let mut value = ndarray::Array3::<f64>::zeros((nb, t_out, dout));
        for i in 0..nb {
            let cols = im2col(&x.index_axis(Axis(0), i), w, stride, t_out);
            value.index_axis_mut(Axis(0), i).assign(&cols.dot(&kmat));
        }
        let (tx, tk) = (self.clone(), kernel.clone());
        Ok(Tensor::op(
            value.into_dyn(),
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x = tx.value().view().into_dimensionality::<Ix3>().unwrap();
                let k = tk.value().view().into_dimensionality::<Ix3>().unwrap();
                let kmat = k.to_shape((w * din, dout)).unwrap().to_owned();
                let mut dk = ndarray::Array2::<f64>::zeros((w * din, dout));
                let mut dx = ndarray::Array3::<f64>::zeros((nb, t, din));
                for i in 0..nb {
                    let gi = g3.index_axis(Axis(0), i);
                    let cols = im2col(&x.index_axis(Axis(0), i), w, stride, t_out);
                    dk += &cols.t().dot(&gi);
                    let dcols = gi.dot(&kmat.t());
                    dx.index_axis_mut(Axis(0), i)
                        .assign(&col2im(&dcols.view(), t, din, w, stride));
                }
                let dk = dk.to_shape((w, din, dout)).unwrap().to_owned().into_dyn();
                vec![Some(dx.into_dyn()), Some(dk)]
            }),
        ))
    }

    // ---- softmax / layer norm -------------------------------------------------

    /// Softmax over the last axis, numerically stabilized per lane.
    pub fn softmax_last(&self) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::shape("softmax_last on 0-dim tensor"));
        }
        let last = self.shape().len() - 1;
        let mut value = self.value().clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        let y = value.clone();
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = g.clone();
                for (mut dl, yl) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot: f64 = dl.iter().zip(yl.iter()).map(|(a, b)| a * b).sum();
                    for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                        *d = (*d - dot) * yv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::shape("layer_norm on 0-dim tensor"));
        }
        let d = s[s.len() - 1];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gain/bias must be [{d}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let last = s.len() - 1;
        let mut xhat = self.value().clone();
        let mut inv_std_flat: Vec<f64> = Vec::new();
        for mut lane in xhat.lanes_mut(Axis(last)) {
            let mean = lane.sum() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std_flat.push(inv);
            lane.mapv_inplace(|v| (v - mean) * inv);
        }
        let gv = gamma.value().view().into_dimensionality::<Ix1>().unwrap();
        let bv = beta.value().view().into_dimensionality::<Ix1>().unwrap();
        let mut value = xhat.clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            for (v, (&g, &b)) in lane.iter_mut().zip(gv.iter().zip(bv.iter())) {
                *v = *v * g + b;
            }
        }
        let xhat_saved = xhat;
        let inv_saved = inv_std_flat;
        let gamma_t = gamma.clone();
        Ok(Tensor::op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gv = gamma_t
                    .value()
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let mut dgamma = ndarray::Array1::<f64>::zeros(d);
                let mut dbeta = ndarray::Array1::<f64>::zeros(d);
                let mut dx = g.clone();
                for (i, (mut dl, xl)) in dx
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(xhat_saved.lanes(Axis(last)))
                    .enumerate()
                {
                    let inv = inv_saved[i];
                    // dxhat = dy * gamma
                    let dxhat: Vec<f64> = dl
                        .iter()
                        .zip(gv.iter())
                        .map(|(&dyv, &gvv)| dyv * gvv)
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(xl.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / d as f64;
                    for (j, dv) in dl.iter_mut().enumerate() {
                        dgamma[j] += *dv * xl[j];
                        dbeta[j] += *dv;
                        *dv = inv * (dxhat[j] - mean_dxhat - xl[j] * mean_dxhat_xhat);
                    }
                }
                vec![
                    Some(dx),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        ))
    }

    // ---- stochastic ----------------------------------------------------------

    /// Inverted dropout. Training mode zeroes each element with probability
    /// `p` and rescales survivors by `1/(1-p)`; evaluation mode is the
    /// identity and consumes no randomness.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R, training: bool) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout: p must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - p;
        let scale = 1.0 / keep;
        let mask = ArrayD::from_shape_simple_fn(self.value().raw_dim(), || {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        });
        let value = self.value() * &mask;
        Ok(Tensor::op(
            value,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g * &mask)]),
        ))
    }

    // ---- embedding lookup -------------------------------------------------------

    /// Select rows of a `[v, d]` table; adjoints scatter-add back into it.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("gather_rows on {:?}", s)));
        }
        let v = s[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!(
                "gather_rows: id {bad} out of range for table of {v}"
            )));
        }
        let table = self.value().view().into_dimensionality::<Ix2>().unwrap();
        let mut value = ndarray::Array2::<f64>::zeros((ids.len(), s[1]));
        for (row, &id) in ids.iter().enumerate() {
            value.row_mut(row).assign(&table.row(id));
        }
        let ids_saved: Vec<usize> = ids.to_vec();
        let (rows, cols) = (v, s[1]);
        Ok(Tensor::op(
            value.into_dyn(),
            vec![self.clone()],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = ndarray::Array2::<f64>::zeros((rows, cols));
                for (row, &id) in ids_saved.iter().enumerate() {
                    let mut target = dt.row_mut(id);
                    target += &g2.row(row);
                }
                vec![Some(dt.into_dyn())]
            }),
        ))
    }
}

pub(crate) fn im2col(
    x: &ndarray::ArrayView2<f64>,
    w: usize,
    stride: usize,
    t_out: usize,
) -> ndarray::Array2<f64> {
    let (t, din) = (x.shape()[0], x.shape()[1]);
    let pad = (w - 1) / 2;
    let mut cols = ndarray::Array2::<f64>::zeros((t_out, w * din));
    for ti in 0..t_out {
        for j in 0..w {
            let src = (ti * stride + j) as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..din {
                cols[[ti, j * din + c]] = x[[src, c]];
            }
        }
    }
    cols
}

fn col2im(
    dcols: &ndarray::ArrayView2<f64>,
    t: usize,
    din: usize,
    w: usize,
    stride: usize,
) -> ndarray::Array2<f64> {
    let t_out = dcols.shape()[0];
    let pad = (w - 1) / 2;
    let mut dx = ndarray::Array2::<f64>::zeros((t, din));
    for ti in 0..t_out {
        for j in 0..w {
            let src = (ti * stride + j) as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..din {
                dx[[src, c]] += dcols[[ti, j * din + c]];
            }
        }
    }
    dx
}
