//! Layer kernels. Convolutional layers work on channel-major batches
//! `[C, N, H, W]`, which lets one GEMM cover the whole batch; dense layers
//! work on `[N, F]`. `Flatten` and `Unflatten` convert between the two.

use rand::Rng;

use super::tensor::{gemm, Mat, Scalar, Tensor};
use super::NnError;

/// Input gradient, weight gradient, bias gradient.
type Grads3<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

/// Geometry shared by `im2col` and `col2im`: an image of `channels × batch ×
/// height × width` sampled by a `kernel × kernel` stencil on a
/// `grid_h × grid_w` lattice.
#[derive(Debug, Clone, Copy)]
struct Patches {
    channels: usize,
    batch: usize,
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    /// Range of grid positions whose tap `t` lands inside an axis of length
    /// `extent`; the image index of grid position `g` is `g·stride + t − padding`.
    #[inline]
    fn valid(&self, t: usize, grid: usize, extent: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
        let hi = if extent + p > t {
            ((extent + p - t - 1) / s + 1).min(grid)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    fn im2col<T: Scalar>(&self, image: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        let plane = self.height * self.width;
        let grid = self.grid_h * self.grid_w;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for c in 0..self.channels {
            for ki in 0..k {
                let ys = self.valid(ki, self.grid_h, self.height);
                for kj in 0..k {
                    let xs = self.valid(kj, self.grid_w, self.width);
                    let row = (c * k + ki) * k + kj;
                    let dst_row = &mut cols[row * self.cols()..(row + 1) * self.cols()];
                    for n in 0..self.batch {
                        let src = &image[(c * self.batch + n) * plane..][..plane];
                        let dst = &mut dst_row[n * grid..(n + 1) * grid];
                        for gy in ys.clone() {
                            let iy = gy * s + ki - p;
                            let src_row = &src[iy * self.width..(iy + 1) * self.width];
                            let dst_row = &mut dst[gy * self.grid_w..(gy + 1) * self.grid_w];
                            for gx in xs.clone() {
                                dst_row[gx] = src_row[gx * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let plane = self.height * self.width;
        let grid = self.grid_h * self.grid_w;
        let mut image = vec![T::zero(); self.channels * self.batch * plane];
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for c in 0..self.channels {
            for ki in 0..k {
                let ys = self.valid(ki, self.grid_h, self.height);
                for kj in 0..k {
                    let xs = self.valid(kj, self.grid_w, self.width);
                    let row = (c * k + ki) * k + kj;
                    let src_row = &cols[row * self.cols()..(row + 1) * self.cols()];
                    for n in 0..self.batch {
                        let dst = &mut image[(c * self.batch + n) * plane..][..plane];
                        let src = &src_row[n * grid..(n + 1) * grid];
                        for gy in ys.clone() {
                            let iy = gy * s + ki - p;
                            let dst_row = &mut dst[iy * self.width..(iy + 1) * self.width];
                            let src_row = &src[gy * self.grid_w..(gy + 1) * self.grid_w];
                            for gx in xs.clone() {
                                dst_row[gx * s + kj - p] += src_row[gx];
                            }
                        }
                    }
                }
            }
        }
        image
    }
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn expect_rank<T: Scalar>(x: &Tensor<T>, rank: usize, what: &str) -> Result<(), NnError> {
    if x.shape().len() != rank {
        return Err(NnError::Shape(format!(
            "{what} expects a rank-{rank} input, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Per-channel sum over a channel-major `[C, rest]` buffer.
fn channel_sums<T: Scalar>(dy: &[T], channels: usize) -> Vec<T> {
    let per = dy.len() / channels;
    dy.chunks_exact(per)
        .map(|c| c.iter().copied().sum())
        .collect()
}

/// 2D convolution, weight `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: uniform(
                &[out_channels, in_channels, kernel, kernel],
                (gain / fan_in).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn patches(&self, x: &Tensor<T>) -> Result<Patches, NnError> {
        expect_rank(x, 4, "conv2d")?;
        let [c, n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if c != self.in_channels || h + 2 * self.padding < self.kernel {
            return Err(NnError::Shape(format!(
                "conv2d({}→{}) cannot take input {:?}",
                self.in_channels,
                self.out_channels,
                x.shape()
            )));
        }
        let (grid_h, grid_w) = self.output_size(h, w);
        Ok(Patches {
            channels: c,
            batch: n,
            height: h,
            width: w,
            grid_h,
            grid_w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let g = self.patches(x)?;
        let cols = g.im2col(x.data());
        let mut out = vec![T::zero(); self.out_channels * g.cols()];
        for (o, chunk) in out.chunks_exact_mut(g.cols()).enumerate() {
            chunk.fill(self.bias.data()[o]);
        }
        gemm(
            T::one(),
            Mat::new(self.weight.data(), self.out_channels, g.rows()),
            Mat::new(&cols, g.rows(), g.cols()),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(&[self.out_channels, g.batch, g.grid_h, g.grid_w], out)
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Grads3<T>, NnError> {
        let g = self.patches(x)?;
        if dy.len() != self.out_channels * g.cols() {
            return Err(NnError::Shape("conv2d gradient shape".into()));
        }
        let cols = g.im2col(x.data());
        let dy_m = Mat::new(dy.data(), self.out_channels, g.cols());
        let mut dw = vec![T::zero(); self.out_channels * g.rows()];
        gemm(
            T::one(),
            dy_m,
            Mat::new(&cols, g.rows(), g.cols()).t(),
            T::zero(),
            &mut dw,
        );
        let mut dcols = vec![T::zero(); g.rows() * g.cols()];
        gemm(
            T::one(),
            Mat::new(self.weight.data(), self.out_channels, g.rows()).t(),
            dy_m,
            T::zero(),
            &mut dcols,
        );
        let dx = g.col2im(&dcols);
        Ok((
            Tensor::from_vec(x.shape(), dx)?,
            Tensor::from_vec(self.weight.shape(), dw)?,
            Tensor::from_vec(
                &[self.out_channels],
                channel_sums(dy.data(), self.out_channels),
            )?,
        ))
    }
}

/// Transposed 2D convolution, weight `[in, out, k, k]`; output size is
/// `(h − 1)·stride − 2·padding + kernel + output_padding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees about in·(k/stride)² inputs
        let fan_in = (in_channels * kernel * kernel) as f64 / (stride * stride) as f64;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: uniform(
                &[in_channels, out_channels, kernel, kernel],
                (gain / fan_in).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f =
            |i: usize| (i - 1) * self.stride + self.kernel + self.output_padding - 2 * self.padding;
        (f(h), f(w))
    }

    /// The output image seen as the input of the adjoint convolution.
    fn patches(&self, x: &Tensor<T>) -> Result<Patches, NnError> {
        expect_rank(x, 4, "conv_transpose2d")?;
        let [c, n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        if c != self.in_channels || h == 0 || w == 0 {
            return Err(NnError::Shape(format!(
                "conv_transpose2d({}→{}) cannot take input {:?}",
                self.in_channels,
                self.out_channels,
                x.shape()
            )));
        }
        let (oh, ow) = self.output_size(h, w);
        Ok(Patches {
            channels: self.out_channels,
            batch: n,
            height: oh,
            width: ow,
            grid_h: h,
            grid_w: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let g = self.patches(x)?;
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        gemm(
            T::one(),
            Mat::new(self.weight.data(), self.in_channels, g.rows()).t(),
            Mat::new(x.data(), self.in_channels, g.cols()),
            T::zero(),
            &mut cols,
        );
        let mut out = g.col2im(&cols);
        let plane = g.batch * g.height * g.width;
        for (o, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let b = self.bias.data()[o];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Tensor::from_vec(&[self.out_channels, g.batch, g.height, g.width], out)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Grads3<T>, NnError> {
        let g = self.patches(x)?;
        if dy.len() != self.out_channels * g.batch * g.height * g.width {
            return Err(NnError::Shape("conv_transpose2d gradient shape".into()));
        }
        let dcols = g.im2col(dy.data());
        let dcols_m = Mat::new(&dcols, g.rows(), g.cols());
        let mut dx = vec![T::zero(); self.in_channels * g.cols()];
        gemm(
            T::one(),
            Mat::new(self.weight.data(), self.in_channels, g.rows()),
            dcols_m,
            T::zero(),
            &mut dx,
        );
        let mut dw = vec![T::zero(); self.in_channels * g.rows()];
        gemm(
            T::one(),
            Mat::new(x.data(), self.in_channels, g.cols()),
            dcols_m.t(),
            T::zero(),
            &mut dw,
        );
        Ok((
            Tensor::from_vec(x.shape(), dx)?,
            Tensor::from_vec(self.weight.shape(), dw)?,
            Tensor::from_vec(
                &[self.out_channels],
                channel_sums(dy.data(), self.out_channels),
            )?,
        ))
    }
}

/// Fully connected layer, weight `[out, in]`, input `[N, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: uniform(&[outputs, inputs], (gain / inputs as f64).sqrt(), rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn batch(&self, x: &Tensor<T>) -> Result<usize, NnError> {
        expect_rank(x, 2, "dense")?;
        if x.shape()[1] != self.inputs {
            return Err(NnError::Shape(format!(
                "dense({}→{}) cannot take input {:?}",
                self.inputs,
                self.outputs,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let n = self.batch(x)?;
        let mut out = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            T::one(),
            Mat::new(x.data(), n, self.inputs),
            Mat::new(self.weight.data(), self.outputs, self.inputs).t(),
            T::one(),
            &mut out,
        );
        Tensor::from_vec(&[n, self.outputs], out)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Grads3<T>, NnError> {
        let n = self.batch(x)?;
        if dy.shape() != [n, self.outputs] {
            return Err(NnError::Shape("dense gradient shape".into()));
        }
        let dy_m = Mat::new(dy.data(), n, self.outputs);
        let mut dx = vec![T::zero(); n * self.inputs];
        gemm(
            T::one(),
            dy_m,
            Mat::new(self.weight.data(), self.outputs, self.inputs),
            T::zero(),
            &mut dx,
        );
        let mut dw = vec![T::zero(); self.outputs * self.inputs];
        gemm(
            T::one(),
            dy_m.t(),
            Mat::new(x.data(), n, self.inputs),
            T::zero(),
            &mut dw,
        );
        let mut db = vec![T::zero(); self.outputs];
        for row in dy.data().chunks_exact(self.outputs) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Ok((
            Tensor::from_vec(x.shape(), dx)?,
            Tensor::from_vec(self.weight.shape(), dw)?,
            Tensor::from_vec(&[self.outputs], db)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    ConvTranspose2d(ConvTranspose2d<T>),
    Dense(Dense<T>),
    Relu,
    Sigmoid,
    /// `[C, N, H, W]` → `[N, C·H·W]`.
    Flatten,
    /// `[N, C·H·W]` → `[C, N, H, W]`.
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::ConvTranspose2d(_) => "conv_transpose2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Flatten => "flatten",
            Layer::Unflatten { .. } => "unflatten",
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::ConvTranspose2d(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::Relu => Ok(x.map(|v| v.max(T::zero()))),
            Layer::Sigmoid => Ok(x.map(|v| T::one() / (T::one() + (-v).exp()))),
            Layer::Flatten => {
                expect_rank(x, 4, "flatten")?;
                let [c, n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let plane = h * w;
                let mut out = vec![T::zero(); x.len()];
                for ci in 0..c {
                    for ni in 0..n {
                        let src = &x.data()[(ci * n + ni) * plane..][..plane];
                        out[ni * c * plane + ci * plane..][..plane].copy_from_slice(src);
                    }
                }
                Tensor::from_vec(&[n, c * plane], out)
            }
            Layer::Unflatten {
                channels,
                height,
                width,
            } => {
                expect_rank(x, 2, "unflatten")?;
                let plane = height * width;
                if x.shape()[1] != channels * plane {
                    return Err(NnError::Shape(format!(
                        "unflatten cannot take {:?}",
                        x.shape()
                    )));
                }
                let n = x.shape()[0];
                let mut out = vec![T::zero(); x.len()];
                for ci in 0..*channels {
                    for ni in 0..n {
                        let src = &x.data()[ni * channels * plane + ci * plane..][..plane];
                        out[(ci * n + ni) * plane..][..plane].copy_from_slice(src);
                    }
                }
                Tensor::from_vec(&[*channels, n, *height, *width], out)
            }
        }
    }

    /// Given the layer input `x`, its output `y` and the upstream gradient
    /// `dy`, returns the input gradient and the parameter gradients (in
    /// [`Layer::params`] order).
    pub fn backward(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>), NnError> {
        if dy.len() != y.len() {
            return Err(NnError::Shape(format!(
                "{}: gradient {:?} does not match output {:?}",
                self.name(),
                dy.shape(),
                y.shape()
            )));
        }
        match self {
            Layer::Conv2d(l) => l.backward(x, dy).map(|(dx, dw, db)| (dx, vec![dw, db])),
            Layer::ConvTranspose2d(l) => l.backward(x, dy).map(|(dx, dw, db)| (dx, vec![dw, db])),
            Layer::Dense(l) => l.backward(x, dy).map(|(dx, dw, db)| (dx, vec![dw, db])),
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
                    .collect();
                Ok((Tensor::from_vec(x.shape(), data)?, Vec::new()))
            }
            Layer::Sigmoid => {
                let data = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (T::one() - s))
                    .collect();
                Ok((Tensor::from_vec(x.shape(), data)?, Vec::new()))
            }
            Layer::Flatten => {
                let [c, n, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let inverse = Layer::<T>::Unflatten {
                    channels: c,
                    height: h,
                    width: w,
                };
                let dy = Tensor::from_vec(&[n, c * h * w], dy.data().to_vec())?;
                Ok((inverse.forward(&dy)?, Vec::new()))
            }
            Layer::Unflatten { .. } => {
                let dy = Tensor::from_vec(y.shape(), dy.data().to_vec())?;
                Ok((Layer::<T>::Flatten.forward(&dy)?, Vec::new()))
            }
        }
    }
}
