use rand::Rng;

use super::Tensor;
use crate::error::{invalid_arg, Result};

/// 2-D convolution, stride 1, same padding (odd kernels only).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch][in_ch][kernel][kernel]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-uniform initialization.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(invalid_arg!("conv kernel must be odd, got {kernel}"));
        }
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            weight,
            bias: vec![0.0; out_ch],
        })
    }

    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((oc * self.in_ch + ic) * self.kernel + ky) * self.kernel + kx]
    }

    /// Valid output range along one axis for kernel offset `k`.
    #[inline]
    fn span(len: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (len + pad).saturating_sub(k).min(len);
        (lo, hi.max(lo))
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.h, x.w);
        let p = self.kernel / 2;
        let plane = h * w;
        let mut out = Tensor::zeros(x.n, self.out_ch, h, w);
        for n in 0..x.n {
            let input = x.sample(n);
            let output = out.sample_mut(n);
            for oc in 0..self.out_ch {
                let o = &mut output[oc * plane..(oc + 1) * plane];
                o.iter_mut().for_each(|v| *v = self.bias[oc]);
                for ic in 0..self.in_ch {
                    let inp = &input[ic * plane..(ic + 1) * plane];
                    for ky in 0..self.kernel {
                        let (y0, y1) = Self::span(h, ky, p);
                        for kx in 0..self.kernel {
                            let wv = self.w(oc, ic, ky, kx);
                            let (x0, x1) = Self::span(w, kx, p);
                            for y in y0..y1 {
                                let sy = y + ky - p;
                                let orow = &mut o[y * w + x0..y * w + x1];
                                let irow = &inp[sy * w + x0 + kx - p..sy * w + x1 + kx - p];
                                for (ov, &iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &Tensor, g: &Tensor, need_input: bool) -> (Option<Tensor>, ParamGrad) {
        let (h, w) = (x.h, x.w);
        let p = self.kernel / 2;
        let plane = h * w;
        let k2 = self.kernel * self.kernel;
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_ch];
        let mut gin = need_input.then(|| Tensor::zeros(x.n, self.in_ch, h, w));
        for n in 0..x.n {
            let input = x.sample(n);
            let gout = g.sample(n);
            for oc in 0..self.out_ch {
                let go = &gout[oc * plane..(oc + 1) * plane];
                gb[oc] += go.iter().sum::<f64>();
                for ic in 0..self.in_ch {
                    let inp = &input[ic * plane..(ic + 1) * plane];
                    let wbase = (oc * self.in_ch + ic) * k2;
                    for ky in 0..self.kernel {
                        let (y0, y1) = Self::span(h, ky, p);
                        for kx in 0..self.kernel {
                            let (x0, x1) = Self::span(w, kx, p);
                            let wv = self.weight[wbase + ky * self.kernel + kx];
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = y + ky - p;
                                let grow = &go[y * w + x0..y * w + x1];
                                let irow = &inp[sy * w + x0 + kx - p..sy * w + x1 + kx - p];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[wbase + ky * self.kernel + kx] += acc;
                            if let Some(gi) = gin.as_mut() {
                                let gi = &mut gi.sample_mut(n)[ic * plane..(ic + 1) * plane];
                                for y in y0..y1 {
                                    let sy = y + ky - p;
                                    let grow = &go[y * w + x0..y * w + x1];
                                    let irow = &mut gi[sy * w + x0 + kx - p..sy * w + x1 + kx - p];
                                    for (iv, &gv) in irow.iter_mut().zip(grow) {
                                        *iv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gin, ParamGrad { weight: gw, bias: gb })
    }
}

/// Fully-connected layer; weight stored `[outputs][inputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Glorot-uniform initialization.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.n, self.outputs, 1, 1);
        for n in 0..x.n {
            let inp = x.sample(n);
            let o = out.sample_mut(n);
            for (j, ov) in o.iter_mut().enumerate() {
                let row = &self.weight[j * self.inputs..(j + 1) * self.inputs];
                *ov = self.bias[j] + row.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    fn backward(&self, x: &Tensor, g: &Tensor, need_input: bool) -> (Option<Tensor>, ParamGrad) {
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.outputs];
        let mut gin = need_input.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        for n in 0..x.n {
            let inp = x.sample(n);
            let go = g.sample(n);
            for (j, &gj) in go.iter().enumerate() {
                gb[j] += gj;
                if gj == 0.0 {
                    continue;
                }
                let row = &mut gw[j * self.inputs..(j + 1) * self.inputs];
                for (r, &iv) in row.iter_mut().zip(inp) {
                    *r += gj * iv;
                }
            }
            if let Some(gi) = gin.as_mut() {
                let gi = gi.sample_mut(n);
                for (j, &gj) in go.iter().enumerate() {
                    let row = &self.weight[j * self.inputs..(j + 1) * self.inputs];
                    for (iv, &wv) in gi.iter_mut().zip(row) {
                        *iv += gj * wv;
                    }
                }
            }
        }
        (gin, ParamGrad { weight: gw, bias: gb })
    }
}

/// The fixed layer zoo.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    /// 2x2 max pooling, stride 2 (odd trailing rows/columns are dropped).
    MaxPool2d,
    GlobalAvgPool,
    GlobalMaxPool,
    Flatten,
    Dropout(f64),
    Softmax,
}

/// Gradients for a parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Input(Tensor),
    Mask(Vec<f64>),
    Argmax { idx: Vec<usize>, shape: [usize; 4] },
    Shape([usize; 4]),
    Output(Tensor),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2d",
            Layer::Dense(_) => "Dense",
            Layer::Relu => "ReLU",
            Layer::MaxPool2d => "MaxPool2d",
            Layer::GlobalAvgPool => "GlobalAvgPool",
            Layer::GlobalMaxPool => "GlobalMaxPool",
            Layer::Flatten => "Flatten",
            Layer::Dropout(_) => "Dropout",
            Layer::Softmax => "Softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv2d(c) => Some((&c.weight, &c.bias)),
            Layer::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    /// Output (channels, height, width) for a given input shape.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            Layer::Conv2d(conv) => {
                if c != conv.in_ch {
                    return Err(invalid_arg!("Conv2d expects {} channels, got {c}", conv.in_ch));
                }
                Ok((conv.out_ch, h, w))
            }
            Layer::Dense(d) => {
                if h != 1 || w != 1 || c != d.inputs {
                    return Err(invalid_arg!(
                        "Dense expects a flat vector of {}, got {c}x{h}x{w}",
                        d.inputs
                    ));
                }
                Ok((d.outputs, 1, 1))
            }
            Layer::Relu | Layer::Dropout(_) => Ok((c, h, w)),
            Layer::MaxPool2d => {
                if h < 2 || w < 2 {
                    return Err(invalid_arg!("MaxPool2d needs at least 2x2, got {h}x{w}"));
                }
                Ok((c, h / 2, w / 2))
            }
            Layer::GlobalAvgPool | Layer::GlobalMaxPool => Ok((c, 1, 1)),
            Layer::Flatten => Ok((c * h * w, 1, 1)),
            Layer::Softmax => {
                if h != 1 || w != 1 {
                    return Err(invalid_arg!("Softmax expects a flat vector"));
                }
                Ok((c, 1, 1))
            }
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, training: bool, rng: &mut R) -> Result<(Tensor, Cache)> {
        self.output_shape((x.c, x.h, x.w))?;
        Ok(match self {
            Layer::Conv2d(conv) => (conv.forward(x), Cache::Input(x.clone())),
            Layer::Dense(d) => (d.forward(x), Cache::Input(x.clone())),
            Layer::Relu => {
                let mask: Vec<f64> = x.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let mut out = x.clone();
                out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                (out, Cache::Mask(mask))
            }
            Layer::Dropout(rate) => {
                if !training || *rate == 0.0 {
                    (x.clone(), Cache::Mask(vec![1.0; x.data.len()]))
                } else {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..x.data.len())
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut out = x.clone();
                    out.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    (out, Cache::Mask(mask))
                }
            }
            Layer::MaxPool2d => {
                let (oh, ow) = (x.h / 2, x.w / 2);
                let mut out = Tensor::zeros(x.n, x.c, oh, ow);
                let mut idx = Vec::with_capacity(out.data.len());
                for n in 0..x.n {
                    for c in 0..x.c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = usize::MAX;
                                let mut bv = f64::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let i = x.index(n, c, 2 * y + dy, 2 * xx + dx);
                                        if x.data[i] > bv {
                                            bv = x.data[i];
                                            best = i;
                                        }
                                    }
                                }
                                let o = out.index(n, c, y, xx);
                                out.data[o] = bv;
                                idx.push(best);
                            }
                        }
                    }
                }
                (out, Cache::Argmax { idx, shape: x.shape() })
            }
            Layer::GlobalAvgPool => {
                let plane = x.h * x.w;
                let data = x.data.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
                (
                    Tensor { n: x.n, c: x.c, h: 1, w: 1, data },
                    Cache::Shape(x.shape()),
                )
            }
            Layer::GlobalMaxPool => {
                let plane = x.h * x.w;
                let mut idx = Vec::with_capacity(x.n * x.c);
                let mut data = Vec::with_capacity(x.n * x.c);
                for (k, p) in x.data.chunks(plane).enumerate() {
                    let (bi, bv) = p
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
                    idx.push(k * plane + bi);
                    data.push(bv);
                }
                (
                    Tensor { n: x.n, c: x.c, h: 1, w: 1, data },
                    Cache::Argmax { idx, shape: x.shape() },
                )
            }
            Layer::Flatten => {
                let shape = x.shape();
                (
                    Tensor {
                        n: x.n,
                        c: x.c * x.h * x.w,
                        h: 1,
                        w: 1,
                        data: x.data.clone(),
                    },
                    Cache::Shape(shape),
                )
            }
            Layer::Softmax => {
                let mut out = x.clone();
                for n in 0..x.n {
                    softmax_in_place(out.sample_mut(n));
                }
                (out.clone(), Cache::Output(out))
            }
        })
    }

    /// Backward pass. Returns the input gradient (when requested) and the
    /// parameter gradients for parameterized layers.
    pub fn backward(&self, cache: &Cache, g: &Tensor, need_input: bool) -> (Option<Tensor>, Option<ParamGrad>) {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Input(x)) => {
                let (gi, pg) = conv.backward(x, g, need_input);
                (gi, Some(pg))
            }
            (Layer::Dense(d), Cache::Input(x)) => {
                let (gi, pg) = d.backward(x, g, need_input);
                (gi, Some(pg))
            }
            (Layer::Relu | Layer::Dropout(_), Cache::Mask(mask)) => {
                let mut gi = g.clone();
                gi.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                (Some(gi), None)
            }
            (Layer::MaxPool2d | Layer::GlobalMaxPool, Cache::Argmax { idx, shape }) => {
                let mut gi = Tensor::zeros(shape[0], shape[1], shape[2], shape[3]);
                for (&i, &gv) in idx.iter().zip(&g.data) {
                    gi.data[i] += gv;
                }
                (Some(gi), None)
            }
            (Layer::GlobalAvgPool, Cache::Shape(s)) => {
                let plane = s[2] * s[3];
                let mut gi = Tensor::zeros(s[0], s[1], s[2], s[3]);
                for (p, &gv) in gi.data.chunks_mut(plane).zip(&g.data) {
                    p.iter_mut().for_each(|v| *v = gv / plane as f64);
                }
                (Some(gi), None)
            }
            (Layer::Flatten, Cache::Shape(s)) => (
                Some(Tensor {
                    n: s[0],
                    c: s[1],
                    h: s[2],
                    w: s[3],
                    data: g.data.clone(),
                }),
                None,
            ),
            (Layer::Softmax, Cache::Output(s)) => {
                let mut gi = g.clone();
                for n in 0..g.n {
                    let sn = s.sample(n);
                    let gn = g.sample(n);
                    let dot: f64 = sn.iter().zip(gn).map(|(a, b)| a * b).sum();
                    for ((o, &sv), &gv) in gi.sample_mut(n).iter_mut().zip(sn).zip(gn) {
                        *o = sv * (gv - dot);
                    }
                }
                (Some(gi), None)
            }
            _ => unreachable!("cache does not belong to layer {}", self.name()),
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// An ordered stack of layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Validates the shape chain and returns the output shape.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.layers.iter().enumerate().try_fold(input, |s, (i, l)| {
            l.output_shape(s)
                .map_err(|e| invalid_arg!("layer {i} ({}): {e}", l.name()))
        })
    }

    /// Runs layers `range`, keeping caches.
    pub fn forward_range<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        range: std::ops::Range<usize>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(range.len());
        let mut cur = x.clone();
        for i in range {
            let layer = &self.layers[i];
            let (out, cache) = layer
                .forward(&cur, training, rng)
                .map_err(|e| invalid_arg!("layer {i} ({}): {e}", layer.name()))?;
            caches.push(cache);
            cur = out;
        }
        Ok((cur, caches))
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, training: bool, rng: &mut R) -> Result<(Tensor, Vec<Cache>)> {
        self.forward_range(x, 0..self.layers.len(), training, rng)
    }

    /// Inference-mode forward over layers `range` without caches.
    pub fn infer_range(&self, x: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        // dropout is disabled in inference mode, so the generator is never drawn from
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut cur = x.clone();
        for i in range {
            let layer = &self.layers[i];
            cur = layer
                .forward(&cur, false, &mut rng)
                .map_err(|e| invalid_arg!("layer {i} ({}): {e}", layer.name()))?
                .0;
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_range(x, 0..self.layers.len())
    }

    /// Backward over layers `range` (matching the caches of a
    /// [`forward_range`](Self::forward_range) call). Parameter gradients are
    /// returned per layer of the range; the input gradient of the first layer
    /// is computed only when `need_input`.
    pub fn backward_range(
        &self,
        caches: &[Cache],
        range: std::ops::Range<usize>,
        grad: Tensor,
        need_input: bool,
    ) -> (Vec<Option<ParamGrad>>, Option<Tensor>) {
        let start = range.start;
        let mut grads = vec![None; range.len()];
        let mut g = grad;
        for i in range.rev() {
            let need = need_input || i > start;
            let (gi, pg) = self.layers[i].backward(&caches[i - start], &g, need);
            grads[i - start] = pg;
            match gi {
                Some(t) => g = t,
                None => return (grads, None),
            }
        }
        (grads, need_input.then_some(g))
    }
}
