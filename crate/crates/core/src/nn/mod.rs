//! Minimal differentiable network core: a fixed layer zoo with hand-written
//! backward passes, cross-entropy and NT-Xent losses, Adam with decoupled
//! weight decay, and a plateau learning-rate schedule.

mod layers;
mod loss;
mod model;
mod optim;
mod train;

pub use layers::{softmax_in_place, Cache, Conv2d, Dense, Layer, ParamGrad, Sequential};
pub use loss::{cross_entropy_loss, nt_xent_loss, softmax_rows};
pub use model::{conv_layer, dense_layer, EncoderModel, Head, HeadKind, Stage};
pub use optim::{OptimizerState, PlateauSchedule};
pub(crate) use train::{apply_update, argmax};
pub use train::{accuracy, predict_labels, predict_proba, train_supervised, TrainConfig, TrainLog};

use crate::data::Image;
use crate::error::{invalid_arg, Result};
use crate::Matrix;

/// Dense NCHW batch. Flat vectors use `h = w = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(invalid_arg!("tensor data length {} != {n}x{c}x{h}x{w}", data.len()));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Converts interleaved HWC images into an NCHW batch.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let images: Vec<&Image> = images.into_iter().collect();
        let Some(first) = images.first() else {
            return Err(invalid_arg!("empty image batch"));
        };
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut t = Tensor::zeros(images.len(), c, h, w);
        for (n, im) in images.iter().enumerate() {
            if (im.height, im.width, im.channels) != (h, w, c) {
                return Err(invalid_arg!("image {n} has a different shape"));
            }
            let s = t.sample_mut(n);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        s[(ch * h + y) * w + x] = im.get(y, x, ch);
                    }
                }
            }
        }
        Ok(t)
    }

    /// `n x (c*h*w)` matrix view of the batch.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.n, self.sample_len(), self.data.clone()).expect("finite activations")
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            n: m.rows(),
            c: m.cols(),
            h: 1,
            w: 1,
            data: m.as_slice().to_vec(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    /// Gathers samples in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            n: idx.len(),
            data,
            ..*self
        }
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(invalid_arg!("nothing to concatenate"));
        };
        if parts.iter().any(|p| (p.c, p.h, p.w) != (first.c, first.h, first.w)) {
            return Err(invalid_arg!("sample shape mismatch in concat"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            n: parts.iter().map(|p| p.n).sum(),
            data,
            ..*first
        })
    }
}
