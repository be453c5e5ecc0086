//! Primitive kernels and their reverse-mode companions.
//!
//! Every kernel is a pure function. Where the convolution kernels run in
//! parallel, work is partitioned over whole output planes so each output
//! element is accumulated by one thread in a fixed order; parallel and
//! serial runs are bit-identical.

use rayon::prelude::*;

use crate::tensor::{Axis, ConvSpec, Dims, Real, Tensor4, TensorError};

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 20;

fn check_conv_operands<T: Real>(
    op: &'static str,
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<(), TensorError> {
    if spec.kernel.is_multiple_of(2) || spec.padding * 2 + 1 != spec.kernel {
        return Err(TensorError::Config {
            op,
            reason: format!(
                "kernel {} with padding {} does not preserve spatial size",
                spec.kernel, spec.padding
            ),
        });
    }
    let d = input.dims();
    if d.c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: Axis::Channel,
            expected: spec.in_channels,
            actual: d.c,
        });
    }
    spec.weight_dims().expect_eq(&weights.dims(), op)
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `tap`.
#[inline]
fn tap_range(tap: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    (lo, hi.max(lo))
}

/// Same-padded, stride-1 2-D convolution with bias.
///
/// `out[n,o,y,x] = bias[o] + sum_{i,dy,dx} w[o,i,dy,dx] * in[n,i,y+dy-p,x+dx-p]`,
/// accumulated with `i` outermost and `dx` innermost.
pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: &[T],
    spec: &ConvSpec,
) -> Result<Tensor4<T>, TensorError> {
    check_conv_operands("conv2d_forward", input, weights, spec)?;
    if bias.len() != spec.out_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_forward",
            axis: Axis::Channel,
            expected: spec.out_channels,
            actual: bias.len(),
        });
    }
    let d = input.dims();
    let out_dims = Dims::new(d.n, spec.out_channels, d.h, d.w);
    let mut out = Tensor4::zeros(out_dims);
    let plane = d.plane();
    if plane == 0 || out_dims.is_empty() {
        return Ok(out);
    }
    let k = spec.kernel;
    let p = spec.padding;
    let (h, w) = (d.h, d.w);

    let fill = |idx: usize, dst: &mut [T]| {
        let n = idx / spec.out_channels;
        let o = idx % spec.out_channels;
        dst.iter_mut().for_each(|v| *v = bias[o]);
        let wrow = &weights.data()[o * spec.fan_in()..(o + 1) * spec.fan_in()];
        for i in 0..spec.in_channels {
            let src = input.plane(n, i);
            for dy in 0..k {
                let (ylo, yhi) = tap_range(dy, p, h);
                for dx in 0..k {
                    let wt = wrow[(i * k + dy) * k + dx];
                    let (xlo, xhi) = tap_range(dx, p, w);
                    for y in ylo..yhi {
                        let sy = y + dy - p;
                        let drow = &mut dst[y * w + xlo..y * w + xhi];
                        let srow = &src[sy * w + xlo + dx - p..sy * w + xhi + dx - p];
                        for (o_v, &s) in drow.iter_mut().zip(srow) {
                            *o_v = *o_v + wt * s;
                        }
                    }
                }
            }
        }
    };

    let work = out_dims.len() * spec.fan_in();
    if work >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| fill(idx, dst));
    } else {
        out.data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| fill(idx, dst));
    }
    Ok(out)
}

/// Adjoints of [`conv2d_forward`] with respect to input, weights and bias.
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>, TensorError> {
    check_conv_operands("conv2d_backward", input, weights, spec)?;
    let d = input.dims();
    let out_dims = Dims::new(d.n, spec.out_channels, d.h, d.w);
    out_dims.expect_eq(&grad_out.dims(), "conv2d_backward")?;
    let k = spec.kernel;
    let p = spec.padding;
    let (h, w) = (d.h, d.w);
    let plane = d.plane();
    let work = out_dims.len() * spec.fan_in();

    let mut grad_input = Tensor4::zeros(d);
    let mut grad_weights = Tensor4::zeros(spec.weight_dims());
    let mut grad_bias = vec![T::zero(); spec.out_channels];
    if plane == 0 {
        return Ok(ConvGrads {
            input: grad_input,
            weights: grad_weights,
            bias: grad_bias,
        });
    }

    // grad_input[n,i,y,x] = sum_{o,dy,dx} w[o,i,dy,dx] * g[n,o,y-dy+p,x-dx+p]
    let fill_input = |idx: usize, dst: &mut [T]| {
        let n = idx / spec.in_channels;
        let i = idx % spec.in_channels;
        for o in 0..spec.out_channels {
            let g = grad_out.plane(n, o);
            for dy in 0..k {
                let (ylo, yhi) = tap_range(dy, p, h);
                for dx in 0..k {
                    let wt = weights.at(o, i, dy, dx);
                    let (xlo, xhi) = tap_range(dx, p, w);
                    for y in ylo..yhi {
                        let sy = y + dy - p;
                        let grow = &g[y * w + xlo..y * w + xhi];
                        let drow = &mut dst[sy * w + xlo + dx - p..sy * w + xhi + dx - p];
                        for (d_v, &gv) in drow.iter_mut().zip(grow) {
                            *d_v = *d_v + wt * gv;
                        }
                    }
                }
            }
        }
    };

    // grad_w[o,i,dy,dx] = sum_{n,y,x} g[n,o,y,x] * in[n,i,y+dy-p,x+dx-p]
    let fan_in = spec.fan_in();
    let fill_weights = |o: usize, dst: &mut [T], gb: &mut T| {
        for n in 0..d.n {
            let g = grad_out.plane(n, o);
            *gb = g.iter().fold(*gb, |acc, &v| acc + v);
            for i in 0..spec.in_channels {
                let src = input.plane(n, i);
                for dy in 0..k {
                    let (ylo, yhi) = tap_range(dy, p, h);
                    for dx in 0..k {
                        let (xlo, xhi) = tap_range(dx, p, w);
                        let mut acc = T::zero();
                        for y in ylo..yhi {
                            let sy = y + dy - p;
                            let grow = &g[y * w + xlo..y * w + xhi];
                            let srow = &src[sy * w + xlo + dx - p..sy * w + xhi + dx - p];
                            for (&gv, &s) in grow.iter().zip(srow) {
                                acc = acc + gv * s;
                            }
                        }
                        let slot = &mut dst[(i * k + dy) * k + dx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    };

    if work >= PAR_THRESHOLD {
        grad_input
            .data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| fill_input(idx, dst));
        grad_weights
            .data_mut()
            .par_chunks_mut(fan_in)
            .zip(grad_bias.par_iter_mut())
            .enumerate()
            .for_each(|(o, (dst, gb))| fill_weights(o, dst, gb));
    } else {
        grad_input
            .data_mut()
            .chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| fill_input(idx, dst));
        grad_weights
            .data_mut()
            .chunks_mut(fan_in)
            .zip(grad_bias.iter_mut())
            .enumerate()
            .for_each(|(o, (dst, gb))| fill_weights(o, dst, gb));
    }

    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

pub fn relu_forward<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `input > 0`; the subgradient at zero is zero.
pub fn relu_backward<T: Real>(
    input: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>, TensorError> {
    input.dims().expect_eq(&grad_out.dims(), "relu_backward")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(input.dims(), data)
}

fn check_shuffle_factor(op: &'static str, c: usize, r: usize) -> Result<(), TensorError> {
    if r == 0 || !c.is_multiple_of(r * r) {
        return Err(TensorError::Config {
            op,
            reason: format!("{c} channels not divisible by r^2 for r = {r}"),
        });
    }
    Ok(())
}

/// Rearranges `c*r^2` channels into an `r`-times larger grid:
/// `out[n, c, y*r+i, x*r+j] = in[n, c*r^2 + i*r + j, y, x]`.
pub fn pixel_shuffle<T: Real>(input: &Tensor4<T>, r: usize) -> Result<Tensor4<T>, TensorError> {
    let d = input.dims();
    check_shuffle_factor("pixel_shuffle", d.c, r)?;
    let out_dims = Dims::new(d.n, d.c / (r * r), d.h * r, d.w * r);
    let mut out = Tensor4::zeros(out_dims);
    for n in 0..d.n {
        for c in 0..out_dims.c {
            for i in 0..r {
                for j in 0..r {
                    let src = input.plane(n, c * r * r + i * r + j);
                    for y in 0..d.h {
                        for x in 0..d.w {
                            out.set(n, c, y * r + i, x * r + j, src[y * d.w + x]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`pixel_shuffle`]; also its adjoint.
pub fn pixel_unshuffle<T: Real>(input: &Tensor4<T>, r: usize) -> Result<Tensor4<T>, TensorError> {
    let d = input.dims();
    if r == 0 || !d.h.is_multiple_of(r) || !d.w.is_multiple_of(r) {
        return Err(TensorError::Config {
            op: "pixel_unshuffle",
            reason: format!("spatial dims {}x{} not divisible by r = {r}", d.h, d.w),
        });
    }
    let out_dims = Dims::new(d.n, d.c * r * r, d.h / r, d.w / r);
    let mut out = Tensor4::zeros(out_dims);
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..r {
                for j in 0..r {
                    for y in 0..out_dims.h {
                        for x in 0..out_dims.w {
                            let v = input.at(n, c, y * r + i, x * r + j);
                            out.set(n, c * r * r + i * r + j, y, x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Copies channels `[start, start + count)`.
pub fn slice_channels<T: Real>(input: &Tensor4<T>, start: usize, count: usize) -> Tensor4<T> {
    let d = input.dims();
    let plane = d.plane();
    let out_dims = Dims::new(d.n, count, d.h, d.w);
    let mut data = Vec::with_capacity(out_dims.len());
    for n in 0..d.n {
        let base = (n * d.c + start) * plane;
        data.extend_from_slice(&input.data()[base..base + count * plane]);
    }
    Tensor4::from_vec(out_dims, data).expect("slice length matches dims")
}

/// Splits into the upper channel half `[0, c/2)` and the lower half `[c/2, c)`.
pub fn split_channels<T: Real>(input: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>), TensorError> {
    let c = input.dims().c;
    if !c.is_multiple_of(2) {
        return Err(TensorError::Config {
            op: "split_channels",
            reason: format!("odd channel count {c}"),
        });
    }
    Ok((slice_channels(input, 0, c / 2), slice_channels(input, c / 2, c / 2)))
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let (da, db) = (a.dims(), b.dims());
    Dims::new(da.n, 0, da.h, da.w).expect_eq(&Dims::new(db.n, 0, db.h, db.w), "concat_channels")?;
    let plane = da.plane();
    let out_dims = Dims::new(da.n, da.c + db.c, da.h, da.w);
    let mut data = Vec::with_capacity(out_dims.len());
    for n in 0..da.n {
        data.extend_from_slice(&a.data()[n * da.c * plane..(n + 1) * da.c * plane]);
        data.extend_from_slice(&b.data()[n * db.c * plane..(n + 1) * db.c * plane]);
    }
    Tensor4::from_vec(out_dims, data)
}

/// Adds `src` into channels `[offset, offset + src.c)` of `dst`.
pub fn add_into_channels<T: Real>(
    dst: &mut Tensor4<T>,
    src: &Tensor4<T>,
    offset: usize,
) -> Result<(), TensorError> {
    let (dd, ds) = (dst.dims(), src.dims());
    Dims::new(dd.n, 0, dd.h, dd.w).expect_eq(&Dims::new(ds.n, 0, ds.h, ds.w), "add_into_channels")?;
    if offset + ds.c > dd.c {
        return Err(TensorError::ShapeMismatch {
            op: "add_into_channels",
            axis: Axis::Channel,
            expected: dd.c,
            actual: offset + ds.c,
        });
    }
    let plane = dd.plane();
    for n in 0..dd.n {
        let dbase = (n * dd.c + offset) * plane;
        let sbase = n * ds.c * plane;
        let len = ds.c * plane;
        let dst_slice = &mut dst.data_mut()[dbase..dbase + len];
        for (d_v, &s) in dst_slice.iter_mut().zip(&src.data()[sbase..sbase + len]) {
            *d_v = *d_v + s;
        }
    }
    Ok(())
}

pub fn elementwise_add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>, TensorError> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Quadruple-loop reference with explicit zero padding.
    fn naive_conv(input: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], spec: &ConvSpec) -> Tensor4<f64> {
        let d = input.dims();
        let p = spec.padding as isize;
        Tensor4::from_fn(Dims::new(d.n, spec.out_channels, d.h, d.w), |n, o, y, x| {
            let mut acc = b[o];
            for i in 0..spec.in_channels {
                for dy in 0..spec.kernel {
                    for dx in 0..spec.kernel {
                        let sy = y as isize + dy as isize - p;
                        let sx = x as isize + dx as isize - p;
                        let v = if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                            0.0
                        } else {
                            input.at(n, i, sy as usize, sx as usize)
                        };
                        acc += w.at(o, i, dy, dx) * v;
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let input = Tensor4::full(Dims::new(1, 1, 3, 3), 1.0);
        let w = Tensor4::full(Dims::new(1, 1, 3, 3), 1.0);
        let out = conv2d_forward(&input, &w, &[0.0], &ConvSpec::k3(1, 1)).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random(Dims::new(2, 3, 4, 5), &mut rng);
        let w = Tensor4::zeros(Dims::new(2, 3, 3, 3));
        let out = conv2d_forward(&input, &w, &[0.25, -1.5], &ConvSpec::k3(3, 2)).unwrap();
        for n in 0..2 {
            assert!(out.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(out.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::k3(3, 4);
        let input = random(Dims::new(2, 3, 5, 5), &mut rng);
        let w = random(spec.weight_dims(), &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv2d_forward(&input, &w, &b, &spec).unwrap();
        let slow = naive_conv(&input, &w, &b, &spec);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn conv_5x5_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = ConvSpec::same(2, 3, 5).unwrap();
        let input = random(Dims::new(1, 2, 3, 7), &mut rng);
        let w = random(spec.weight_dims(), &mut rng);
        let b = vec![0.1, 0.2, 0.3];
        let fast = conv2d_forward(&input, &w, &b, &spec).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&input, &w, &b, &spec)).unwrap() < 1e-12);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor4::<f64>::zeros(Dims::new(1, 2, 4, 4));
        let w = Tensor4::zeros(Dims::new(1, 3, 3, 3));
        let err = conv2d_forward(&input, &w, &[0.0], &ConvSpec::k3(3, 1)).err().unwrap();
        assert!(matches!(
            err,
            TensorError::ShapeMismatch {
                axis: Axis::Channel,
                expected: 3,
                actual: 2,
                ..
            }
        ));
    }

    #[test]
    fn backward_rejects_bad_grad_shape() {
        let input = Tensor4::<f64>::zeros(Dims::new(1, 1, 4, 4));
        let w = Tensor4::zeros(Dims::new(1, 1, 3, 3));
        let g = Tensor4::zeros(Dims::new(1, 1, 4, 5));
        assert!(conv2d_backward(&input, &w, &g, &ConvSpec::k3(1, 1)).is_err());
    }

    #[test]
    fn zero_cotangent_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::k3(2, 3);
        let input = random(Dims::new(1, 2, 4, 4), &mut rng);
        let w = random(spec.weight_dims(), &mut rng);
        let g = Tensor4::zeros(Dims::new(1, 3, 4, 4));
        let grads = conv2d_backward(&input, &w, &g, &spec).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let spec = ConvSpec::same(1, 1, 1).unwrap();
        let input = Tensor4::full(Dims::new(1, 1, 1, 1), 3.0);
        let w = Tensor4::full(Dims::new(1, 1, 1, 1), -2.0);
        let g = Tensor4::full(Dims::new(1, 1, 1, 1), 1.0);
        let grads = conv2d_backward(&input, &w, &g, &spec).unwrap();
        assert_eq!(grads.input.data(), &[-2.0]);
        assert_eq!(grads.weights.data(), &[3.0]);
        assert_eq!(grads.bias, vec![1.0]);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ConvSpec::k3(2, 3);
        let mut input = random(Dims::new(2, 2, 4, 3), &mut rng);
        let mut w = random(spec.weight_dims(), &mut rng);
        let mut b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = random(Dims::new(2, 3, 4, 3), &mut rng);
        // scalar objective <conv(x), u>
        let objective = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| {
            conv2d_forward(x, w, b, &spec).unwrap().dot(&u).unwrap()
        };
        let grads = conv2d_backward(&input, &w, &u, &spec).unwrap();
        let h = 1e-5;
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            input.data_mut()[idx] = orig + h;
            let fp = objective(&input, &w, &b);
            input.data_mut()[idx] = orig - h;
            let fm = objective(&input, &w, &b);
            input.data_mut()[idx] = orig;
            assert!(rel_err(grads.input.data()[idx], (fp - fm) / (2.0 * h)) < 1e-6);
        }
        for idx in 0..w.len() {
            let orig = w.data()[idx];
            w.data_mut()[idx] = orig + h;
            let fp = objective(&input, &w, &b);
            w.data_mut()[idx] = orig - h;
            let fm = objective(&input, &w, &b);
            w.data_mut()[idx] = orig;
            assert!(rel_err(grads.weights.data()[idx], (fp - fm) / (2.0 * h)) < 1e-6);
        }
        for o in 0..3 {
            let orig = b[o];
            b[o] = orig + h;
            let fp = objective(&input, &w, &b);
            b[o] = orig - h;
            let fm = objective(&input, &w, &b);
            b[o] = orig;
            assert!(rel_err(grads.bias[o], (fp - fm) / (2.0 * h)) < 1e-6);
        }
    }

    #[test]
    fn parallel_path_is_bit_identical_to_serial() {
        // Large enough to cross PAR_THRESHOLD; compare against per-sample runs
        // that stay below it.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = ConvSpec::k3(16, 16);
        let input = random(Dims::new(4, 16, 16, 16), &mut rng);
        let w = random(spec.weight_dims(), &mut rng);
        let b = vec![0.5; 16];
        assert!(input.dims().len() * spec.fan_in() >= PAR_THRESHOLD);
        assert!(input.sample(0).dims().len() * spec.fan_in() < PAR_THRESHOLD);
        let whole = conv2d_forward(&input, &w, &b, &spec).unwrap();
        let small_spec = ConvSpec::k3(16, 16);
        for n in 0..4 {
            let part = conv2d_forward(&input.sample(n), &w, &b, &small_spec).unwrap();
            assert_eq!(part.data(), whole.sample(n).data());
        }
    }

    #[test]
    fn relu_examples() {
        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.5]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.5]);
        let neg = Tensor4::full(Dims::new(1, 2, 2, 2), -0.5);
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));

        let x = Tensor4::from_vec(Dims::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        let g = Tensor4::full(Dims::new(1, 1, 1, 2), 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 5.0]);

        let zeros = Tensor4::zeros(Dims::new(1, 1, 2, 2));
        let g = Tensor4::full(Dims::new(1, 1, 2, 2), 3.0);
        assert!(relu_backward(&zeros, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let x = random(Dims::new(1, 2, 4, 4), &mut rng);
        let u = random(Dims::new(1, 2, 4, 4), &mut rng);
        let g = relu_backward(&x, &u).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let v = x.data()[idx];
            if v.abs() < 1e-3 {
                continue;
            }
            let mut xp = x.clone();
            xp.data_mut()[idx] = v + h;
            let mut xm = x.clone();
            xm.data_mut()[idx] = v - h;
            let fd = (relu_forward(&xp).dot(&u).unwrap() - relu_forward(&xm).dot(&u).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn pixel_shuffle_index_map() {
        let x = Tensor4::from_vec(Dims::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        // brute-force enumeration of the index law for r = 3
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(Dims::new(2, 18, 2, 3), &mut rng);
        let y = pixel_shuffle(&x, 3).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                for yy in 0..2 {
                    for xx in 0..3 {
                        for i in 0..3 {
                            for j in 0..3 {
                                assert_eq!(y.at(n, c, yy * 3 + i, xx * 3 + j), x.at(n, c * 9 + i * 3 + j, yy, xx));
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(pixel_unshuffle(&y, 3).unwrap(), x);
    }

    #[test]
    fn pixel_shuffle_identity_and_errors() {
        let x = Tensor4::from_fn(Dims::new(1, 3, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f64);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(matches!(pixel_shuffle(&x, 2), Err(TensorError::Config { .. })));
    }

    #[test]
    fn split_concat_examples() {
        let x = Tensor4::from_fn(Dims::new(1, 2, 2, 2), |_, c, _, _| if c == 0 { 7.0 } else { 9.0 });
        let (a, b) = split_channels(&x).unwrap();
        assert!(a.data().iter().all(|&v| v == 7.0));
        assert!(b.data().iter().all(|&v| v == 9.0));
        assert_eq!(concat_channels(&a, &b).unwrap(), x);

        let wide = Tensor4::<f64>::zeros(Dims::new(2, 64, 3, 3));
        let (u, l) = split_channels(&wide).unwrap();
        assert_eq!(u.dims().c, 32);
        assert_eq!(l.dims().c, 32);
        assert_eq!(concat_channels(&u, &l).unwrap().dims().c, 64);

        let odd = Tensor4::<f64>::zeros(Dims::new(1, 3, 2, 2));
        assert!(matches!(split_channels(&odd), Err(TensorError::Config { .. })));

        let empty = Tensor4::<f64>::zeros(Dims::new(1, 0, 2, 2));
        assert_eq!(concat_channels(&x, &empty).unwrap(), x);

        let mismatched = Tensor4::<f64>::zeros(Dims::new(1, 2, 3, 2));
        assert!(matches!(
            concat_channels(&x, &mismatched),
            Err(TensorError::ShapeMismatch { axis: Axis::Height, .. })
        ));
    }

    #[test]
    fn add_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(Dims::new(1, 64, 3, 3), &mut rng);
        let b = random(Dims::new(1, 64, 3, 3), &mut rng);
        assert_eq!(elementwise_add(&a, &Tensor4::zeros(a.dims())).unwrap(), a);
        assert_eq!(elementwise_add(&a, &b).unwrap(), elementwise_add(&b, &a).unwrap());
        assert_eq!(elementwise_add(&a, &b).unwrap().dims(), Dims::new(1, 64, 3, 3));
        let c = Tensor4::<f64>::zeros(Dims::new(1, 63, 3, 3));
        assert!(elementwise_add(&a, &c).is_err());
    }
}
