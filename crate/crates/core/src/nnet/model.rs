use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, ConvTranspose2d, Dense, Layer};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Identifier written into weight files.
pub const ARCHITECTURE: &str = "cae-conv3-16-32-64";

const CHANNELS: [usize; 3] = [16, 32, 64];

/// Symmetric convolutional autoencoder.
///
/// Encoder: three 3×3 stride-2 convolutions (1→16→32→64) with ReLU, then a
/// dense projection to the latent vector. The decoder mirrors it with a dense
/// layer, three transposed convolutions and a final sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cae<T> {
    latent_dim: usize,
    input_size: usize,
    layers: Vec<Layer<T>>,
    encoder_len: usize,
}

/// Activations recorded during a forward pass: `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
pub struct Trace<T> {
    pub values: Vec<Tensor<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("trace holds the input")
    }
}

impl<T: Scalar> Cae<T> {
    /// Builds a seeded model for square `input_size` windows (a multiple of 8).
    pub fn new(latent_dim: usize, input_size: usize, seed: u64) -> Result<Self, NnError> {
        if latent_dim == 0 {
            return Err(NnError::Config("latent_dim must be positive".into()));
        }
        if input_size == 0 || !input_size.is_multiple_of(8) {
            return Err(NnError::Config(format!(
                "input size must be a positive multiple of 8, got {input_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = input_size / 8;
        let flat = CHANNELS[2] * side * side;
        // ReLU-followed layers use the He gain, the rest the LeCun gain
        let (relu, linear) = (6.0, 3.0);
        let layers = vec![
            Layer::Conv2d(Conv2d::new(1, CHANNELS[0], 3, 2, 1, relu, &mut rng)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(
                CHANNELS[0],
                CHANNELS[1],
                3,
                2,
                1,
                relu,
                &mut rng,
            )),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(
                CHANNELS[1],
                CHANNELS[2],
                3,
                2,
                1,
                relu,
                &mut rng,
            )),
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense(Dense::new(flat, latent_dim, linear, &mut rng)),
            // decoder
            Layer::Dense(Dense::new(latent_dim, flat, relu, &mut rng)),
            Layer::Relu,
            Layer::Unflatten {
                channels: CHANNELS[2],
                height: side,
                width: side,
            },
            Layer::ConvTranspose2d(ConvTranspose2d::new(
                CHANNELS[2],
                CHANNELS[1],
                3,
                2,
                1,
                1,
                relu,
                &mut rng,
            )),
            Layer::Relu,
            Layer::ConvTranspose2d(ConvTranspose2d::new(
                CHANNELS[1],
                CHANNELS[0],
                3,
                2,
                1,
                1,
                relu,
                &mut rng,
            )),
            Layer::Relu,
            Layer::ConvTranspose2d(ConvTranspose2d::new(
                CHANNELS[0],
                1,
                3,
                2,
                1,
                1,
                linear,
                &mut rng,
            )),
            Layer::Sigmoid,
        ];
        Ok(Self {
            latent_dim,
            input_size,
            layers,
            encoder_len: 8,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn encoder(&self) -> &[Layer<T>] {
        &self.layers[..self.encoder_len]
    }

    pub fn decoder(&self) -> &[Layer<T>] {
        &self.layers[self.encoder_len..]
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }

    /// `(name, shape)` of every parameter tensor, in [`Cae::params`] order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, kind) in layer.params().iter().zip(["weight", "bias"]) {
                out.push((
                    format!("layers.{i}.{}.{kind}", layer.name()),
                    p.shape().to_vec(),
                ));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Cae<U> {
        let mut out = Cae::<U>::new(self.latent_dim, self.input_size, 0).expect("valid shape");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    /// Accepts `[N, S, S]` or `[N, 1, S, S]` and returns `(N, [1, N, S, S])`.
    fn as_images(&self, batch: &Tensor<T>) -> Result<(usize, Tensor<T>), NnError> {
        let s = self.input_size;
        let n = match batch.shape() {
            [n, h, w] if *h == s && *w == s => *n,
            [n, 1, h, w] if *h == s && *w == s => *n,
            other => {
                return Err(NnError::Shape(format!(
                    "expected [N, {s}, {s}] or [N, 1, {s}, {s}], got {other:?}"
                )))
            }
        };
        Ok((n, batch.clone().reshape(&[1, n, s, s])?))
    }

    fn run(
        &self,
        layers: &[Layer<T>],
        offset: usize,
        mut x: Tensor<T>,
    ) -> Result<Tensor<T>, NnError> {
        for (i, layer) in layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if !x.is_finite() {
                return Err(NnError::NonFinite {
                    layer: offset + i,
                    name: layer.name(),
                });
            }
        }
        Ok(x)
    }

    /// Reconstruction with the same shape as `batch`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (_, x) = self.as_images(batch)?;
        self.run(&self.layers, 0, x)?.reshape(batch.shape())
    }

    /// Latent codes, `[N, latent_dim]`.
    pub fn encode(&self, batch: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (_, x) = self.as_images(batch)?;
        self.run(self.encoder(), 0, x)
    }

    /// Reconstructions from latent codes, `[N, 1, S, S]`.
    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let n = latent.shape().first().copied().unwrap_or(0);
        let s = self.input_size;
        self.run(self.decoder(), self.encoder_len, latent.clone())?
            .reshape(&[n, 1, s, s])
    }

    pub fn forward_trace(&self, batch: &Tensor<T>) -> Result<Trace<T>, NnError> {
        let (_, x) = self.as_images(batch)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(values.last().expect("non-empty"))?;
            if !y.is_finite() {
                return Err(NnError::NonFinite {
                    layer: i,
                    name: layer.name(),
                });
            }
            values.push(y);
        }
        Ok(Trace { values })
    }

    /// Backpropagates `d_output` (gradient w.r.t. the final activation, any
    /// shape with matching length) and returns parameter gradients in
    /// [`Cae::params`] order.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        d_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>, NnError> {
        let mut grad = d_output.clone().reshape(trace.output().shape())?;
        let mut per_layer: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, dparams) = layer.backward(&trace.values[i], &trace.values[i + 1], &grad)?;
            per_layer.push(dparams);
            grad = dx;
        }
        Ok(per_layer.into_iter().rev().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 32, 32], (0..n * 1024).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn untrained_outputs_are_in_unit_interval() {
        let m = Cae::<f32>::new(16, 32, 1).unwrap();
        let y = m.forward(&batch(3, 2)).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn latent_length_matches_dim() {
        for dim in [2, 16, 128] {
            let m = Cae::<f32>::new(dim, 32, 1).unwrap();
            assert_eq!(m.encode(&batch(2, 3)).unwrap().shape(), &[2, dim]);
        }
    }

    #[test]
    fn decoder_mirrors_encoder_shapes() {
        let m = Cae::<f64>::new(8, 32, 4).unwrap();
        let x = batch(2, 5).cast::<f64>();
        let trace = m.forward_trace(&x).unwrap();
        let shapes: Vec<Vec<usize>> = trace.values.iter().map(|t| t.shape().to_vec()).collect();
        // conv stages on the way down: 32 → 16 → 8 → 4
        assert_eq!(shapes[1], vec![16, 2, 16, 16]);
        assert_eq!(shapes[3], vec![32, 2, 8, 8]);
        assert_eq!(shapes[5], vec![64, 2, 4, 4]);
        // and back up: 4 → 8 → 16 → 32
        assert_eq!(shapes[11], vec![64, 2, 4, 4]);
        assert_eq!(shapes[12], vec![32, 2, 8, 8]);
        assert_eq!(shapes[14], vec![16, 2, 16, 16]);
        assert_eq!(shapes[16], vec![1, 2, 32, 32]);
        // every transposed convolution undoes the spatial change of its mirror
        assert_eq!(shapes[12][2..], shapes[3][2..]);
        assert_eq!(shapes[14][2..], shapes[1][2..]);
        assert_eq!(shapes[16][2..], shapes[0][2..]);
    }

    #[test]
    fn rejects_wrong_input() {
        let m = Cae::<f32>::new(4, 32, 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[2, 16, 16])).is_err());
        assert!(Cae::<f32>::new(0, 32, 0).is_err());
        assert!(Cae::<f32>::new(4, 30, 0).is_err());
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let m = Cae::<f32>::new(4, 32, 0).unwrap();
        let mut x = batch(1, 1);
        x.data_mut()[10] = f32::NAN;
        match m.forward(&x) {
            Err(NnError::NonFinite { layer: 0, name }) => assert_eq!(name, "conv2d"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
