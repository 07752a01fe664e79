//! Forward and backward kernels shared by the eager API and the tape.

use rayon::prelude::*;

use super::tensor::{gemm, MatLayout, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the number of elements in one im2col strip. Large images
/// are convolved a band of rows at a time so the column buffer stays small.
const STRIP_ELEMS: usize = 1 << 20;

/// Batch items folded into one weight-gradient partial sum. Fixed so the
/// reduction order never depends on the number of worker threads.
const GRAD_GROUP: usize = 8;

/// One convolution: weights of shape (out, in, k, k) and a bias per output
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let s = weight.shape();
        if s.height != s.width || s.height.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "convolution kernel must be square with odd size, got {}x{}",
                s.height, s.width
            )));
        }
        if bias.len() != s.batch {
            return Err(Error::Dimension(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                s.batch
            )));
        }
        Ok(ConvLayer { weight, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(Shape::new(out_channels, in_channels, k, k))?,
            vec![T::zero(); out_channels],
        )
    }

    /// `k×k` identity map: unit center tap on the channel diagonal.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let mut layer = Self::zeros(channels, channels, k)?;
        let c = k / 2;
        for ch in 0..channels {
            let idx = layer.weight.index(ch, ch, c, c);
            layer.weight.data_mut()[idx] = T::one();
        }
        Ok(layer)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().batch
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().channels
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape().height
    }

    pub fn numel(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|b| U::from_f64(b.as_f64())).collect(),
        }
    }
}

/// Geometry of one same-padded convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl ConvGeom {
    fn new(input: Shape, weight: Shape) -> Result<Self> {
        if input.channels != weight.channels {
            return Err(Error::Dimension(format!(
                "conv2d: input has {} channels, kernel expects {}",
                input.channels, weight.channels
            )));
        }
        if weight.height != weight.width || weight.height.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel must be square and odd, got {}x{}",
                weight.height, weight.width
            )));
        }
        Ok(ConvGeom {
            in_c: input.channels,
            out_c: weight.batch,
            k: weight.height,
            h: input.height,
            w: input.width,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn strip_rows(&self) -> usize {
        (STRIP_ELEMS / (self.patch_len() * self.w)).clamp(1, self.h)
    }

    fn strips(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.strip_rows();
        let h = self.h;
        (0..h).step_by(step).map(move |r0| (r0, step.min(h - r0)))
    }
}

/// Fills `cols` (patch_len × rows·w, row-major) with the zero-padded
/// neighbourhoods of output rows `row0..row0+rows`.
fn im2col<T: Scalar>(item: &[T], g: &ConvGeom, row0: usize, rows: usize, cols: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let np = rows * g.w;
    for ch in 0..g.in_c {
        let plane = &item[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for u in 0..g.k {
            for v in 0..g.k {
                let r = (ch * g.k + u) * g.k + v;
                let dst = &mut cols[r * np..(r + 1) * np];
                let dx = v as isize - pad;
                let j_lo = (-dx).max(0) as usize;
                let j_hi = ((g.w as isize - dx).min(g.w as isize)).max(0) as usize;
                for i in 0..rows {
                    let y = (row0 + i) as isize + u as isize - pad;
                    let drow = &mut dst[i * g.w..(i + 1) * g.w];
                    if y < 0 || y >= g.h as isize || j_lo >= j_hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    drow[..j_lo].fill(T::zero());
                    drow[j_hi..].fill(T::zero());
                    let s0 = (j_lo as isize + dx) as usize;
                    drow[j_lo..j_hi].copy_from_slice(&src[s0..s0 + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the input item; inverse of
/// [`im2col`].
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, row0: usize, rows: usize, item: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let np = rows * g.w;
    for ch in 0..g.in_c {
        let plane = &mut item[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for u in 0..g.k {
            for v in 0..g.k {
                let r = (ch * g.k + u) * g.k + v;
                let src = &cols[r * np..(r + 1) * np];
                let dx = v as isize - pad;
                let j_lo = (-dx).max(0) as usize;
                let j_hi = ((g.w as isize - dx).min(g.w as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..rows {
                    let y = (row0 + i) as isize + u as isize - pad;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    let s0 = (j_lo as isize + dx) as usize;
                    let srow = &src[i * g.w + j_lo..i * g.w + j_hi];
                    for (d, &s) in dst[s0..s0 + (j_hi - j_lo)].iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded 2-D cross-correlation with stride 1.
///
/// `out[b,o,i,j] = bias[o] + Σ_{c,u,v} w[o,c,u,v] · in[b,c,i+u−p,j+v−p]`
/// with `p = (k−1)/2` and out-of-range input read as zero.
pub fn conv2d_same<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    conv2d_raw(input, &layer.weight, &layer.bias)
}

pub(crate) fn conv2d_raw<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    let s = input.shape();
    let g = ConvGeom::new(s, weight.shape())?;
    if bias.len() != g.out_c {
        return Err(Error::Dimension(format!(
            "conv2d: bias has {} entries for {} output channels",
            bias.len(),
            g.out_c
        )));
    }
    let out_shape = Shape::new(s.batch, g.out_c, g.h, g.w);
    let mut out = Tensor::zeros(out_shape)?;
    let plane = g.h * g.w;
    let in_len = s.item_len();
    let wdata = weight.data();
    let idata = input.data();

    out.data_mut()
        .par_chunks_mut(out_shape.item_len())
        .enumerate()
        .for_each(|(b, out_item)| {
            for (o, chunk) in out_item.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
            let item = &idata[b * in_len..(b + 1) * in_len];
            let mut cols = vec![T::zero(); g.patch_len() * g.strip_rows() * g.w];
            for (r0, rows) in g.strips() {
                let np = rows * g.w;
                let cols = &mut cols[..g.patch_len() * np];
                im2col(item, &g, r0, rows, cols);
                gemm(
                    g.out_c,
                    g.patch_len(),
                    np,
                    T::one(),
                    wdata,
                    MatLayout::row_major(0, g.patch_len()),
                    cols,
                    MatLayout::row_major(0, np),
                    T::one(),
                    out_item,
                    MatLayout::row_major(r0 * g.w, plane),
                );
            }
        });
    Ok(out)
}

/// Gradients of a convolution with respect to its operands.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let g = ConvGeom::new(s, weight.shape())?;
    let plane = g.h * g.w;
    let in_len = s.item_len();
    let out_len = g.out_c * plane;
    let wlen = weight.len();
    let idata = input.data();
    let gdata = grad_out.data();
    let wdata = weight.data();

    let mut grad_input = if need_input_grad {
        Some(Tensor::zeros(s)?)
    } else {
        None
    };

    // Each group of batch items produces its own partial weight/bias sums;
    // partials are then added in group order.
    let group_items: Vec<usize> = (0..s.batch).step_by(GRAD_GROUP).collect();
    let mut gi_chunks: Vec<Option<&mut [T]>> = match grad_input.as_mut() {
        Some(t) => t
            .data_mut()
            .chunks_mut(in_len * GRAD_GROUP)
            .map(Some)
            .collect(),
        None => (0..group_items.len()).map(|_| None).collect(),
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = group_items
        .par_iter()
        .zip(gi_chunks.par_iter_mut())
        .map(|(&b0, gi_chunk)| {
            let mut gw = vec![T::zero(); wlen];
            let mut gb = vec![T::zero(); g.out_c];
            let mut cols = vec![T::zero(); g.patch_len() * g.strip_rows() * g.w];
            let mut dcols = if gi_chunk.is_some() {
                vec![T::zero(); cols.len()]
            } else {
                Vec::new()
            };
            for b in b0..(b0 + GRAD_GROUP).min(s.batch) {
                let item = &idata[b * in_len..(b + 1) * in_len];
                let gout = &gdata[b * out_len..(b + 1) * out_len];
                for (o, chunk) in gout.chunks(plane).enumerate() {
                    gb[o] += chunk.iter().copied().sum::<T>();
                }
                for (r0, rows) in g.strips() {
                    let np = rows * g.w;
                    let cols = &mut cols[..g.patch_len() * np];
                    im2col(item, &g, r0, rows, cols);
                    // dW += dOut(strip) · colsᵀ
                    gemm(
                        g.out_c,
                        np,
                        g.patch_len(),
                        T::one(),
                        gout,
                        MatLayout::row_major(r0 * g.w, plane),
                        cols,
                        MatLayout::transposed(0, np),
                        T::one(),
                        &mut gw,
                        MatLayout::row_major(0, g.patch_len()),
                    );
                    if let Some(gi) = gi_chunk.as_deref_mut() {
                        // dCols = Wᵀ · dOut(strip)
                        let dcols = &mut dcols[..g.patch_len() * np];
                        gemm(
                            g.patch_len(),
                            g.out_c,
                            np,
                            T::one(),
                            wdata,
                            MatLayout::transposed(0, g.patch_len()),
                            gout,
                            MatLayout::row_major(r0 * g.w, plane),
                            T::zero(),
                            dcols,
                            MatLayout::row_major(0, np),
                        );
                        let local = b - b0;
                        col2im(
                            dcols,
                            &g,
                            r0,
                            rows,
                            &mut gi[local * in_len..(local + 1) * in_len],
                        );
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); wlen];
    let mut grad_b = vec![T::zero(); g.out_c];
    for (gw, gb) in partials {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in grad_b.iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weight: Tensor::from_vec(weight.shape(), grad_w)?,
        bias: grad_b,
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Passes `grad_out` through where the ReLU output was positive.
pub(crate) fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b).map_err(|_| {
        Error::Dimension(format!(
            "add: shapes {} and {} differ",
            a.shape(),
            b.shape()
        ))
    })?;
    Ok(out)
}

/// `Σ_d w_d · t_d` with no normalisation of the weights.
pub fn weighted_sum<T: Scalar>(tensors: &[&Tensor<T>], weights: &[T]) -> Result<Tensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("weighted_sum of an empty list".into()))?;
    if tensors.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "weighted_sum: {} tensors but {} weights",
            tensors.len(),
            weights.len()
        )));
    }
    let mut out = Tensor::zeros(first.shape())?;
    for (t, &w) in tensors.iter().zip(weights) {
        t.ensure_same_shape(first, "weighted_sum")?;
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `(1/divisor) · ½ Σ (pred − target)²`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, divisor: T) -> Result<T> {
    pred.ensure_same_shape(target, "mse_loss")?;
    if divisor.is_nan() || divisor <= T::zero() {
        return Err(Error::InvalidArgument(format!(
            "mse_loss divisor must be positive, got {divisor}"
        )));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum * T::from_f64(0.5) / divisor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        t(
            shape,
            (0..shape.numel())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_naive(x: &Tensor<f64>, layer: &ConvLayer<f64>) -> Tensor<f64> {
        let s = x.shape();
        let k = layer.kernel_size();
        let p = (k / 2) as isize;
        let oc = layer.out_channels();
        let mut out = Tensor::zeros(Shape::new(s.batch, oc, s.height, s.width)).unwrap();
        for b in 0..s.batch {
            for o in 0..oc {
                for i in 0..s.height {
                    for j in 0..s.width {
                        let mut acc = layer.bias[o];
                        for c in 0..s.channels {
                            for u in 0..k {
                                for v in 0..k {
                                    let y = i as isize + u as isize - p;
                                    let xx = j as isize + v as isize - p;
                                    if y < 0
                                        || xx < 0
                                        || y >= s.height as isize
                                        || xx >= s.width as isize
                                    {
                                        continue;
                                    }
                                    acc += layer.weight.at(o, c, u, v)
                                        * x.at(b, c, y as usize, xx as usize);
                                }
                            }
                        }
                        let idx = out.index(b, o, i, j);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect());
        let layer = ConvLayer::identity(1, 3).unwrap();
        assert_eq!(conv2d_same(&x, &layer).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_counts_in_range_taps() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64).unwrap();
        let layer = ConvLayer::new(
            Tensor::full(Shape::new(1, 1, 3, 3), 1.0).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let y = conv2d_same(&x, &layer).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 3, 4, 5), &mut rng);
        let mut layer = ConvLayer::<f64>::zeros(2, 3, 3).unwrap();
        layer.bias = vec![0.25, -1.5];
        let y = conv2d_same(&x, &layer).unwrap();
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    assert_eq!(y.at(b, 0, i, j), 0.25);
                    assert_eq!(y.at(b, 1, i, j), -1.5);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3)).unwrap();
        let layer = ConvLayer::zeros(1, 3, 3).unwrap();
        assert!(matches!(conv2d_same(&x, &layer), Err(Error::Dimension(_))));
    }

    #[test]
    fn even_kernels_are_rejected() {
        assert!(ConvLayer::<f64>::zeros(1, 1, 2).is_err());
    }

    #[test]
    fn matches_naive_convolution_including_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in [1, 3, 5] {
            let x = random(Shape::new(3, 2, 6, 7), &mut rng);
            let w = random(Shape::new(4, 2, k, k), &mut rng);
            let layer = ConvLayer::new(w, vec![0.1, -0.2, 0.3, 0.0]).unwrap();
            let fast = conv2d_same(&x, &layer).unwrap();
            let slow = conv_naive(&x, &layer);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn strip_tiling_matches_single_pass() {
        // 300 columns × 27 patch rows forces strips of ~129 rows.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(1, 3, 300, 300), &mut rng);
        let w = random(Shape::new(2, 3, 3, 3), &mut rng);
        let layer = ConvLayer::new(w, vec![0.0, 0.5]).unwrap();
        let g = ConvGeom::new(x.shape(), layer.weight.shape()).unwrap();
        assert!(g.strip_rows() < 300);
        let fast = conv2d_same(&x, &layer).unwrap();
        let slow = conv_naive(&x, &layer);
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn backward_matches_adjoint_identity() {
        // <conv(x), g> - bias term == <x, dX> and == <w, dW> for linear maps.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape::new(9, 2, 5, 4), &mut rng);
        let w = random(Shape::new(3, 2, 3, 3), &mut rng);
        let go = random(Shape::new(9, 3, 5, 4), &mut rng);
        let y = conv2d_raw(&x, &w, &[0.0; 3]).unwrap();
        let grads = conv2d_backward(&x, &w, &go, true).unwrap();
        let lhs: f64 = y.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x
            .data()
            .iter()
            .zip(grads.input.as_ref().unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        let via_w: f64 = w
            .data()
            .iter()
            .zip(grads.weight.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        let bias_sum: Vec<f64> = (0..3)
            .map(|o| {
                (0..9)
                    .map(|b| go.item_slice(b)[o * 20..(o + 1) * 20].iter().sum::<f64>())
                    .sum()
            })
            .collect();
        for (a, b) in grads.bias.iter().zip(&bias_sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_cases() {
        let x = t(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_and_weighted_sum() {
        let a = t(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let b = t(Shape::new(1, 1, 1, 2), vec![3.0, 4.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[4.0, 6.0]);
        let c = t(Shape::new(1, 1, 2, 1), vec![3.0, 4.0]);
        assert!(matches!(add(&a, &c), Err(Error::Dimension(_))));

        let t1 = Tensor::scalar(2.0);
        let t2 = Tensor::scalar(4.0);
        assert_eq!(
            weighted_sum(&[&t1, &t2], &[0.25, 0.75])
                .unwrap()
                .item()
                .unwrap(),
            3.5
        );
        assert_eq!(weighted_sum(&[&a], &[1.0]).unwrap(), a);
        assert_eq!(weighted_sum(&[&a, &a], &[0.5, 0.5]).unwrap(), a);
        assert!(matches!(
            weighted_sum::<f64>(&[], &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mse_examples() {
        let p = t(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]);
        let q = t(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]);
        assert_eq!(mse_loss(&p, &p, 1.0).unwrap(), 0.0);
        assert_eq!(
            mse_loss(&Tensor::scalar(1.0), &Tensor::scalar(0.0), 1.0).unwrap(),
            0.5
        );
        assert_eq!(mse_loss(&p, &q, 2.0).unwrap(), 1.25);
        assert!(mse_loss(&p, &Tensor::scalar(0.0), 1.0).is_err());
    }
}
