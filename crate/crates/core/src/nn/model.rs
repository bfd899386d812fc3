use std::ops::Range;

use rand::Rng;

use super::layers::{Cache, Conv2d, Dense, Layer, Sequential};
use super::Tensor;
use crate::codec::{Kind, Persist, Reader, Writer};
use crate::error::{invalid_arg, Error, Result};

/// Training stages a backbone has been through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generic,
    Intermediate,
    Target,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generic => "generic",
            Stage::Intermediate => "intermediate",
            Stage::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "generic" => Stage::Generic,
            "intermediate" => Stage::Intermediate,
            "target" => Stage::Target,
            _ => return Err(invalid_arg!("unknown stage {s:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Contrastive projection head (no softmax).
    Projection,
    /// Supervised head ending in a softmax.
    Classification,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub layers: Sequential,
}

/// Convolutional backbone `f` with an optional head `g`.
///
/// The backbone maps a `(c, h, w)` image to a spatial feature map whose
/// channel count is the feature dimension; heads start with a global pooling
/// layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub input_shape: (usize, usize, usize),
    pub backbone: Sequential,
    /// Per-backbone-layer trainable flags. Head layers are always trainable.
    pub trainable: Vec<bool>,
    pub head: Option<Head>,
    pub provenance: Vec<Stage>,
}

impl EncoderModel {
    pub fn new(input_shape: (usize, usize, usize), backbone: Sequential) -> Result<Self> {
        backbone.output_shape(input_shape)?;
        if !backbone.layers.iter().any(|l| matches!(l, Layer::Conv2d(_))) {
            return Err(invalid_arg!("backbone needs at least one convolution"));
        }
        let trainable = vec![true; backbone.len()];
        Ok(Self {
            input_shape,
            backbone,
            trainable,
            head: None,
            provenance: Vec::new(),
        })
    }

    /// Shape of the backbone's output feature map.
    pub fn feature_map_shape(&self) -> (usize, usize, usize) {
        self.backbone
            .output_shape(self.input_shape)
            .expect("validated at construction")
    }

    /// Feature dimension `D_f` (channels of the final map).
    pub fn feature_dim(&self) -> usize {
        self.feature_map_shape().0
    }

    pub fn set_head(&mut self, head: Head) -> Result<()> {
        let out = head.layers.output_shape(self.feature_map_shape())?;
        if out.1 != 1 || out.2 != 1 {
            return Err(invalid_arg!("head must produce a flat vector"));
        }
        if head.kind == HeadKind::Classification && !matches!(head.layers.layers.last(), Some(Layer::Softmax)) {
            return Err(invalid_arg!("classification head must end in Softmax"));
        }
        self.head = Some(head);
        Ok(())
    }

    pub fn remove_head(&mut self) -> Option<Head> {
        self.head.take()
    }

    /// Output width of the head, if any.
    pub fn head_output_dim(&self) -> Option<usize> {
        self.head
            .as_ref()
            .map(|h| h.layers.output_shape(self.feature_map_shape()).expect("validated").0)
    }

    /// Layer-index ranges of conv blocks: a block starts at a convolution
    /// and runs up to the next one.
    pub fn conv_blocks(&self) -> Vec<Range<usize>> {
        let starts: Vec<usize> = self
            .backbone
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv2d(_)))
            .map(|(i, _)| i)
            .collect();
        starts
            .iter()
            .enumerate()
            .map(|(k, &s)| s..starts.get(k + 1).copied().unwrap_or(self.backbone.len()))
            .collect()
    }

    /// Index of the last convolution in the backbone.
    pub fn last_conv_index(&self) -> usize {
        self.conv_blocks().last().expect("backbone has a conv").start
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|t| *t = on);
    }

    pub fn freeze_range(&mut self, r: Range<usize>) {
        for i in r {
            self.trainable[i] = false;
        }
    }

    /// Number of leading backbone layers that are frozen.
    pub fn frozen_prefix_len(&self) -> usize {
        self.trainable.iter().take_while(|t| !**t).count()
    }

    /// Backbone parameters flattened in layer order.
    pub fn backbone_parameters(&self) -> Vec<f64> {
        self.backbone
            .layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    /// Parameters of frozen backbone layers, for bit-identity checks.
    pub fn frozen_parameters(&self) -> Vec<f64> {
        self.backbone
            .layers
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| !**t)
            .filter_map(|(l, _)| l.params())
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if (x.c, x.h, x.w) != self.input_shape {
            return Err(invalid_arg!(
                "input batch {:?} does not match model input {:?}",
                (x.c, x.h, x.w),
                self.input_shape
            ));
        }
        Ok(())
    }

    /// Backbone feature map in inference mode.
    pub fn feature_map(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.backbone.infer(x)
    }

    /// Pooled `n x D_f` features: the head's leading global pooling layer
    /// (global average pooling when there is no head).
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.feature_map(x)?;
        let pool = match self.head.as_ref().and_then(|h| h.layers.layers.first()) {
            Some(Layer::GlobalMaxPool) => Layer::GlobalMaxPool,
            _ => Layer::GlobalAvgPool,
        };
        Sequential::new(vec![pool]).infer(&map)
    }

    /// Input to the head's final dense layer.
    pub fn penultimate_features(&self, x: &Tensor) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidState("model has no head".into()))?;
        let last_dense = head
            .layers
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense(_)))
            .ok_or_else(|| Error::InvalidState("head has no dense layer".into()))?;
        let map = self.feature_map(x)?;
        head.layers.infer_range(&map, 0..last_dense)
    }

    /// Full inference-mode forward (head output when present).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.feature_map(x)?;
        match &self.head {
            Some(h) => h.layers.infer(&map),
            None => Ok(map),
        }
    }

    /// Cached forward. Returns the output along with backbone and head caches.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<Cache>, Vec<Cache>)> {
        self.check_input(x)?;
        let (map, bcache) = self.backbone.forward(x, training, rng)?;
        match &self.head {
            Some(h) => {
                let (out, hcache) = h.layers.forward(&map, training, rng)?;
                Ok((out, bcache, hcache))
            }
            None => Ok((map, bcache, Vec::new())),
        }
    }
}

pub fn dense_layer<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Layer {
    Layer::Dense(Dense::new(inputs, outputs, rng))
}

pub fn conv_layer<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Result<Layer> {
    Ok(Layer::Conv2d(Conv2d::new(in_ch, out_ch, kernel, rng)?))
}

fn write_layers(w: &mut Writer, seq: &Sequential) {
    w.usize(seq.len());
    for l in &seq.layers {
        match l {
            Layer::Conv2d(c) => {
                w.u8(1);
                w.usize(c.in_ch);
                w.usize(c.out_ch);
                w.usize(c.kernel);
                w.f64s(&c.weight);
                w.f64s(&c.bias);
            }
            Layer::Dense(d) => {
                w.u8(2);
                w.usize(d.inputs);
                w.usize(d.outputs);
                w.f64s(&d.weight);
                w.f64s(&d.bias);
            }
            Layer::Relu => w.u8(3),
            Layer::MaxPool2d => w.u8(4),
            Layer::GlobalAvgPool => w.u8(5),
            Layer::GlobalMaxPool => w.u8(6),
            Layer::Flatten => w.u8(7),
            Layer::Dropout(rate) => {
                w.u8(8);
                w.f64(*rate);
            }
            Layer::Softmax => w.u8(9),
        }
    }
}

fn read_layers(r: &mut Reader<'_>) -> Result<Sequential> {
    let n = r.usize()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let tag = r.u8()?;
        let layer = match tag {
            1 => {
                let (in_ch, out_ch, kernel) = (r.usize()?, r.usize()?, r.usize()?);
                let weight = r.f64s()?;
                let bias = r.f64s()?;
                if weight.len() != out_ch * in_ch * kernel * kernel || bias.len() != out_ch || kernel % 2 == 0 {
                    return Err(r.err("conv parameter shape mismatch"));
                }
                Layer::Conv2d(Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    weight,
                    bias,
                })
            }
            2 => {
                let (inputs, outputs) = (r.usize()?, r.usize()?);
                let weight = r.f64s()?;
                let bias = r.f64s()?;
                if weight.len() != inputs * outputs || bias.len() != outputs {
                    return Err(r.err("dense parameter shape mismatch"));
                }
                Layer::Dense(Dense {
                    inputs,
                    outputs,
                    weight,
                    bias,
                })
            }
            3 => Layer::Relu,
            4 => Layer::MaxPool2d,
            5 => Layer::GlobalAvgPool,
            6 => Layer::GlobalMaxPool,
            7 => Layer::Flatten,
            8 => {
                let rate = r.f64()?;
                if !(0.0..1.0).contains(&rate) {
                    return Err(r.err("dropout rate outside [0, 1)"));
                }
                Layer::Dropout(rate)
            }
            9 => Layer::Softmax,
            _ => return Err(r.err(format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    Ok(Sequential::new(layers))
}

impl Persist for EncoderModel {
    const KIND: Kind = Kind::Model;

    fn write_body(&self, w: &mut Writer) {
        let (c, h, wd) = self.input_shape;
        w.usize(c);
        w.usize(h);
        w.usize(wd);
        w.u32(self.provenance.len() as u32);
        for s in &self.provenance {
            w.str(s.name());
        }
        write_layers(w, &self.backbone);
        for &t in &self.trainable {
            w.bool(t);
        }
        match &self.head {
            None => w.u8(0),
            Some(head) => {
                w.u8(match head.kind {
                    HeadKind::Projection => 1,
                    HeadKind::Classification => 2,
                });
                write_layers(w, &head.layers);
            }
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self> {
        let input_shape = (r.usize()?, r.usize()?, r.usize()?);
        let n_stages = r.u32()?;
        let mut provenance = Vec::new();
        for _ in 0..n_stages {
            let s = r.str()?;
            provenance.push(Stage::parse(&s).map_err(|e| r.err(e.to_string()))?);
        }
        let backbone = read_layers(r)?;
        let mut model = EncoderModel::new(input_shape, backbone).map_err(|e| r.err(format!("invalid shape chain: {e}")))?;
        for i in 0..model.trainable.len() {
            model.trainable[i] = r.bool()?;
        }
        model.provenance = provenance;
        let kind = match r.u8()? {
            0 => None,
            1 => Some(HeadKind::Projection),
            2 => Some(HeadKind::Classification),
            t => return Err(r.err(format!("unknown head kind {t}"))),
        };
        if let Some(kind) = kind {
            let layers = read_layers(r)?;
            model
                .set_head(Head { kind, layers })
                .map_err(|e| r.err(format!("invalid head: {e}")))?;
        }
        Ok(model)
    }
}
