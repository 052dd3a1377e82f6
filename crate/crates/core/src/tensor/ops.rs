use super::tape::{Backward, Tape, Var};
use super::{field_rank, Tensor};
use crate::error::{Error, Result};

/// Backward for ops whose gradient is a pure function of
/// `(grad, inputs, output)`.
struct ClosureOp<F>(F);

impl<F> Backward for ClosureOp<F>
where
    F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + Send + Sync,
{
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok((self.0)(grad, inputs, output))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        for (axis, (x, y)) in a.shape().iter().zip(b.shape()).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("axis {axis}"), *x, *y));
            }
        }
        return Err(Error::shape(op, "rank", a.ndim(), b.ndim()));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a), tape.value(b));
    same_shape("add", x, y)?;
    let out = zip_with(x, y, |p, q| p + q);
    Ok(tape.push(
        out,
        &[a, b],
        Box::new(ClosureOp(|g: &Tensor, _: &[&Tensor], _: &Tensor| vec![Some(g.clone()), Some(g.clone())])),
    ))
}

/// Elementwise product.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a), tape.value(b));
    same_shape("mul", x, y)?;
    let out = zip_with(x, y, |p, q| p * q);
    Ok(tape.push(
        out,
        &[a, b],
        Box::new(ClosureOp(|g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            vec![
                Some(zip_with(g, inp[1], |d, q| d * q)),
                Some(zip_with(g, inp[0], |d, p| d * p)),
            ]
        })),
    ))
}

pub fn scale(tape: &mut Tape, a: Var, factor: f64) -> Var {
    let out = tape.value(a).map(|v| v * factor);
    tape.push(
        out,
        &[a],
        Box::new(ClosureOp(move |g: &Tensor, _: &[&Tensor], _: &Tensor| vec![Some(g.map(|d| d * factor))])),
    )
}

pub fn sum(tape: &mut Tape, a: Var) -> Var {
    let out = Tensor::scalar(tape.value(a).sum());
    tape.push(
        out,
        &[a],
        Box::new(ClosureOp(|g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            vec![Some(Tensor::full(inp[0].shape(), g.item()))]
        })),
    )
}

pub fn mean(tape: &mut Tape, a: Var) -> Var {
    let n = tape.value(a).len() as f64;
    let s = sum(tape, a);
    scale(tape, s, 1.0 / n)
}

/// `y = x * a + b` where `a`, `b` are single-sample, single-channel fields
/// broadcast over batch and channels. Only `x` is differentiated.
pub fn affine_field(tape: &mut Tape, x: Var, a: &Tensor, b: &Tensor) -> Result<Var> {
    let xv = tape.value(x);
    field_rank("affine_field", xv.shape())?;
    for f in [a, b] {
        if f.shape()[..2] != [1, 1] || f.spatial() != xv.spatial() {
            return Err(Error::invalid(
                "affine_field",
                format!("field shape {:?} does not broadcast to {:?}", f.shape(), xv.shape()),
            ));
        }
    }
    let vol = a.len();
    let mut out = xv.clone();
    for chunk in out.data_mut().chunks_mut(vol) {
        for ((v, &s), &o) in chunk.iter_mut().zip(a.data()).zip(b.data()) {
            *v = *v * s + o;
        }
    }
    let a = a.clone();
    Ok(tape.push(
        out,
        &[x],
        Box::new(ClosureOp(move |g: &Tensor, _: &[&Tensor], _: &Tensor| {
            let mut d = g.clone();
            for chunk in d.data_mut().chunks_mut(vol) {
                for (v, &s) in chunk.iter_mut().zip(a.data()) {
                    *v *= s;
                }
            }
            vec![Some(d)]
        })),
    ))
}

pub fn leaky_relu(tape: &mut Tape, x: Var, slope: f64) -> Var {
    let out = tape.value(x).map(|v| if v > 0.0 { v } else { slope * v });
    tape.push(
        out,
        &[x],
        Box::new(ClosureOp(move |g: &Tensor, inp: &[&Tensor], _: &Tensor| {
            vec![Some(zip_with(g, inp[0], |d, v| if v > 0.0 { d } else { slope * d }))]
        })),
    )
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    let out = tape.value(x).map(sigmoid_scalar);
    tape.push(
        out,
        &[x],
        Box::new(ClosureOp(|g: &Tensor, _: &[&Tensor], y: &Tensor| {
            vec![Some(zip_with(g, y, |d, s| d * s * (1.0 - s)))]
        })),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Mean,
}

/// Index of the source element for each output element and each of the
/// `2^rank` window taps, in row-major window order.
fn pool_windows(shape: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let rank = shape.len() - 2;
    let taps = 1 << rank;
    let in_sp = &shape[2..];
    let out_sp: Vec<usize> = in_sp.iter().map(|e| e / 2).collect();
    let (in_vol, out_vol): (usize, usize) = (in_sp.iter().product(), out_sp.iter().product());
    let planes = shape[0] * shape[1];
    let mut out_shape = shape[..2].to_vec();
    out_shape.extend(&out_sp);
    let mut idx = Vec::with_capacity(planes * out_vol * taps);
    for plane in 0..planes {
        for o in 0..out_vol {
            let mut coord = vec![0; rank];
            let mut rem = o;
            for a in (0..rank).rev() {
                coord[a] = rem % out_sp[a];
                rem /= out_sp[a];
            }
            for t in 0..taps {
                let mut lin = 0;
                for a in 0..rank {
                    let bit = (t >> (rank - 1 - a)) & 1;
                    lin = lin * in_sp[a] + 2 * coord[a] + bit;
                }
                idx.push(plane * in_vol + lin);
            }
        }
    }
    (idx, out_shape, taps)
}

struct PoolOp {
    mode: Pool,
    src: Vec<usize>,
    taps: usize,
}

impl Backward for PoolOp {
    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let mut dx = Tensor::zeros(x.shape());
        let d = dx.data_mut();
        for (o, &g) in grad.data().iter().enumerate() {
            let win = &self.src[o * self.taps..][..self.taps];
            match self.mode {
                Pool::Mean => {
                    let share = g / self.taps as f64;
                    for &i in win {
                        d[i] += share;
                    }
                }
                Pool::Max => {
                    let best = argmax(x.data(), win);
                    d[best] += g;
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

fn argmax(data: &[f64], win: &[usize]) -> usize {
    let mut best = win[0];
    for &i in &win[1..] {
        if data[i] > data[best] {
            best = i;
        }
    }
    best
}

/// Halve every spatial axis by max or mean pooling over `2^rank` windows.
pub fn downsample2(tape: &mut Tape, x: Var, mode: Pool) -> Result<Var> {
    let xv = tape.value(x);
    let rank = field_rank("downsample2", xv.shape())?;
    for (a, &e) in xv.spatial().iter().enumerate() {
        if e % 2 != 0 {
            let name = ["depth", "height", "width"][3 - rank + a];
            return Err(Error::invalid(
                "downsample2",
                format!("extent along {name} must be even, found {e}"),
            ));
        }
    }
    let (src, out_shape, taps) = pool_windows(xv.shape());
    let data = xv.data();
    let out: Vec<f64> = src
        .chunks(taps)
        .map(|win| match mode {
            Pool::Mean => win.iter().map(|&i| data[i]).sum::<f64>() / taps as f64,
            Pool::Max => data[argmax(data, win)],
        })
        .collect();
    let out = Tensor::new(out_shape, out)?;
    Ok(tape.push(out, &[x], Box::new(PoolOp { mode, src, taps })))
}

/// Concatenate two field tensors along the channel axis.
pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (x, y) = (tape.value(a), tape.value(b));
    field_rank("concat_channels", x.shape())?;
    if x.ndim() != y.ndim() {
        return Err(Error::shape("concat_channels", "rank", x.ndim(), y.ndim()));
    }
    if x.batch() != y.batch() {
        return Err(Error::shape("concat_channels", "batch", x.batch(), y.batch()));
    }
    for (axis, (p, q)) in x.spatial().iter().zip(y.spatial()).enumerate() {
        if p != q {
            return Err(Error::shape("concat_channels", format!("spatial axis {axis}"), *p, *q));
        }
    }
    let (sa, sb) = (x.sample_len(), y.sample_len());
    let mut data = Vec::with_capacity(x.len() + y.len());
    for n in 0..x.batch() {
        data.extend_from_slice(&x.data()[n * sa..][..sa]);
        data.extend_from_slice(&y.data()[n * sb..][..sb]);
    }
    let mut shape = x.shape().to_vec();
    shape[1] += y.channels();
    let out = Tensor::new(shape, data)?;
    let (shape_a, shape_b) = (x.shape().to_vec(), y.shape().to_vec());
    Ok(tape.push(
        out,
        &[a, b],
        Box::new(ClosureOp(move |g: &Tensor, _: &[&Tensor], _: &Tensor| {
            let batch = shape_a[0];
            let mut da = Vec::with_capacity(batch * sa);
            let mut db = Vec::with_capacity(batch * sb);
            for n in 0..batch {
                let row = &g.data()[n * (sa + sb)..][..sa + sb];
                da.extend_from_slice(&row[..sa]);
                db.extend_from_slice(&row[sa..]);
            }
            vec![
                Tensor::new(shape_a.clone(), da).ok(),
                Tensor::new(shape_b.clone(), db).ok(),
            ]
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = leaky_relu(&mut tape, x, 0.01);
        assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = sigmoid(&mut tape, x);
        assert_eq!(tape.value(y).item(), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn mean_pool_of_two_by_two() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = downsample2(&mut tape, x, Pool::Mean).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 4.0);
        let m = downsample2(&mut tape, x, Pool::Max).unwrap();
        assert_eq!(tape.value(m).item(), 7.0);
    }

    #[test]
    fn pooling_halves_three_dimensional_fields() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 6, 2], |i| i as f64));
        let y = downsample2(&mut tape, x, Pool::Mean).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 2, 3, 1]);
        // First window: offsets {0, 1, 2, 3} in w/h and one depth step of 12.
        let expect = [0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0].iter().sum::<f64>() / 8.0;
        assert_eq!(tape.value(y).data()[0], expect);
    }

    #[test]
    fn odd_extent_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        let err = downsample2(&mut tape, x, Pool::Mean).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn concat_then_split_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64), true);
        let b = tape.leaf(Tensor::from_fn(&[2, 2, 2, 2], |i| -(i as f64)), true);
        let c = concat_channels(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 2, 2]);
        assert_eq!(&tape.value(c).data()[12..16], &[4.0, 5.0, 6.0, 7.0]);
        let w = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let p = mul(&mut tape, c, w).unwrap();
        let s = sum(&mut tape, p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(&g.get(b).unwrap().data()[..4], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(add(&mut tape, a, b).is_err());
        assert!(concat_channels(&mut tape, a, b).is_err());
    }
}
